#!/usr/bin/env python3
"""Stand-alone Step-1 test-time adaptation, written without the tta engine.

Recipe: fine-tune the pretrained GUP on (bicubic-downsampled patch, patch)
pairs cut from the test image; L1 loss, Adam, 1000 iterations, base lr 2e-7
halved every 100 iterations, 48x48 patches with random dihedral augmentation.

Stream protocol (shared with the engine so the two can be compared bit for
bit): ``SeedSequence(seed).spawn(2)[1]`` drives the patch draws; each draw
takes row, column, then an augmentation code from ``integers``.

    python scripts/step1_reference.py gup.ckpt lr.png out.png --seed 0
"""
from __future__ import annotations

import argparse
import math

import numpy as np
import torch

from ttasr.image import read_png, write_png
from ttasr.models import load_checkpoint


def keys(t: float) -> float:
    a = -0.5
    t = abs(t)
    if t <= 1.0:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2.0:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def downsample_matrix(n: int, s: int) -> np.ndarray:
    """Rows of the 1/s Keys downsampler with antialias stretch and edge clamping."""
    m = np.zeros((n // s, n))
    for i in range(n // s):
        c = (i + 0.5) * s - 0.5
        taps = np.arange(math.floor(c - 2 * s), math.ceil(c + 2 * s) + 1)
        w = np.array([keys((j - c) / s) for j in taps])
        keep = w != 0.0
        taps, w = taps[keep], w[keep]
        w = w / w.sum()
        np.add.at(m[i], np.clip(taps, 0, n - 1), w)
    return m


def draw_patch(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    code = int(rng.integers(0, 8))
    p = img[r : r + size, c : c + size]
    if code >= 4:
        p = p[:, ::-1]
    return np.ascontiguousarray(np.rot90(p, code % 4, axes=(0, 1)))


def step1(gup, lr_img, seed=0, iters=1000, base_lr=2e-7, step=100, decay=0.5, patch=48):
    s = gup.spec.scale
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)).spawn(2)[1])
    m = torch.from_numpy(downsample_matrix(patch, s)).float()
    opt = torch.optim.Adam(gup.parameters(), lr=base_lr)
    gup.train()
    for it in range(iters):
        for g in opt.param_groups:
            g["lr"] = base_lr * decay ** (it // step)
        p = draw_patch(lr_img, patch, rng)
        hr = torch.from_numpy(np.ascontiguousarray(p.transpose(2, 0, 1))).float()[None]
        llr = m @ hr @ m.T
        loss = torch.nn.functional.l1_loss(gup(llr), hr)
        opt.zero_grad()
        loss.backward()
        opt.step()
    gup.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(lr_img.transpose(2, 0, 1))).float()[None]
        sr = gup(x)[0].double().numpy().transpose(1, 2, 0)
    return np.clip(sr, 0.0, 1.0), gup


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("ckpt")
    ap.add_argument("image")
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--lr", type=float, default=2e-7)
    args = ap.parse_args()
    torch.set_num_threads(1)
    sr, _ = step1(load_checkpoint(args.ckpt, kind="gup"), read_png(args.image), args.seed, args.iters, args.lr)
    write_png(args.out, sr)


if __name__ == "__main__":
    main()
