"""Acceptance criteria 1-8 on the desk benchmark.

A session fixture pretrains the GUP on 16 bicubic training crops and builds
three 8-image x2 test benchmarks from disjoint crops: mismatched (Gaussian
sigma 2.0), matched (bicubic) and kernel-recovery (Gaussian sigma 1.3).
Each criterion prints one PASS/FAIL line with its measured numbers.
"""
import json
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from scipy.ndimage import convolve

from test_models import FD_RTOL, fd_check, projected
from ttasr.cli import main as cli_main
from ttasr.degradation import DegradationSpec, build_benchmark, load_manifest, make_kernel
from ttasr.desk import write_sources
from ttasr.engine import AdaptationConfig, adapt, lr_schedule, preset, run_streams, super_resolve, train_gdn
from ttasr.harness import VariantMatrix, run_sweep
from ttasr.image import bicubic_resample, psnr, ssim, to_luminance
from ttasr.models import (
    PretrainConfig,
    ResBlock,
    build_ddn,
    build_gdn,
    build_gup,
    checksum,
    collapse_gdn_kernel,
    pretrain_gup,
    read_checkpoint,
    save_checkpoint,
    to_tensor,
)

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
from step1_reference import step1  # noqa: E402

pytestmark = pytest.mark.acceptance

# reduced desk-scale iteration counts (Stage A / Stage B)
REDUCED = {"stage_a": {"iters": 600}, "stage_b": {"iters": 300}}
SEED = 0


@pytest.fixture
def verdict(capsys):
    def _verdict(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nAC{n} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, detail

    return _verdict


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    train = build_benchmark(write_sources(root / "src_train", "train"), [DegradationSpec("bicubic", scale=2)], root / "train", SEED)
    ckpt = pretrain_gup(train, PretrainConfig(iters=3000, lr=2e-4, batch=8, patch=24, seed=SEED))
    save_checkpoint(ckpt, root / "gup.ckpt")
    tests = write_sources(root / "src_test", "test")
    specs = {
        "mismatched": DegradationSpec("gaussian_iso", sigma_x=2.0, sigma_y=2.0, kernel_size=13, scale=2),
        "matched": DegradationSpec("bicubic", scale=2),
        "k13": DegradationSpec("gaussian_iso", sigma_x=1.3, sigma_y=1.3, kernel_size=13, scale=2),
    }
    for name, spec in specs.items():
        build_benchmark(tests, [spec], root / name, SEED)
    return SimpleNamespace(root=root, ckpt=root / "gup.ckpt", train=train, specs=specs,
                           manifest=lambda name: root / name / "manifest.json")


def desk_matrix(names):
    return VariantMatrix.builtin(preset("desk").with_overrides(REDUCED), names)


@pytest.fixture(scope="session")
def mismatched_sweep(desk):
    return run_sweep(desk.ckpt, desk.manifest("mismatched"), desk_matrix(["frozen", "step1-bicubic", "step3-full"]), SEED)


@pytest.fixture(scope="session")
def matched_sweep(desk):
    return run_sweep(desk.ckpt, desk.manifest("matched"), desk_matrix(["frozen", "step3-full"]), SEED)


def per_image_deltas(table, variant):
    rows = {(r["variant"], r["image"]): r["psnr_y"] for r in table.rows}
    return {img: rows[(variant, img)] - rows[("frozen", img)] for img in table.images}


# ---------------------------------------------------------------------------


def test_pretrained_gup_beats_bicubic_on_training_set(desk):
    gup = read_checkpoint(desk.ckpt).model()
    gains = [psnr(super_resolve(gup, lr), hr, 2) - psnr(bicubic_resample(lr, 2), hr, 2) for _, hr, lr, _ in desk.train.pairs()]
    assert min(gains) >= -0.01


def test_ac1_mismatch_improvement(mismatched_sweep, verdict):
    assert len(mismatched_sweep.images) >= 8
    d = mismatched_sweep.deltas()["step3-full"]
    per = per_image_deltas(mismatched_sweep, "step3-full")
    detail = f"mean dY-PSNR full TTA vs frozen = {d:+.4f} dB (need >= +0.10) over {len(per)} images; per-image " + \
        ", ".join(f"{k.split('@')[0]} {v:+.3f}" for k, v in per.items())
    verdict(1, d >= 0.10, detail)


def test_ac2_no_harm_on_matched(matched_sweep, verdict):
    d = matched_sweep.deltas()["step3-full"]
    per = per_image_deltas(matched_sweep, "step3-full")
    detail = f"mean dY-PSNR full TTA vs frozen = {d:+.4f} dB (need >= -0.05); per-image " + \
        ", ".join(f"{k.split('@')[0]} {v:+.3f}" for k, v in per.items())
    verdict(2, d >= -0.05, detail)


def test_ac3_learned_vs_bicubic_pairs(mismatched_sweep, verdict):
    means = mismatched_sweep.means()
    md = mismatched_sweep.to_markdown()
    both_rows = "| step1-bicubic |" in md and "| step3-full |" in md
    learned, bicubic = means["step3-full"]["psnr_y"], means["step1-bicubic"]["psnr_y"]
    detail = f"learned {learned:.6f} dB vs bicubic pairs {bicubic:.6f} dB (diff {learned - bicubic:+.4f}, need >= -0.02); both rows in table: {both_rows}"
    verdict(3, both_rows and learned >= bicubic - 0.02, detail)


def test_ac4_step1_equivalence(desk, verdict):
    _, _, lr, _ = next(load_manifest(desk.manifest("mismatched")).pairs())
    ckpt = read_checkpoint(desk.ckpt)
    cfg = AdaptationConfig().with_overrides({"degrader_mode": "bicubic", "stage_b": {"enabled_losses": ["down_up"]}, "seed": 7})
    b = cfg.stage_b
    recipe = (b.iters, b.lr, b.lr_step, b.lr_decay, cfg.patch) == (1000, 2e-7, 100, 0.5, 48)
    sr, rep = adapt(lr, ckpt, cfg)
    ref, gup = step1(ckpt.model(), lr, seed=7)
    same_sr = np.array_equal(sr, ref)
    same_w = rep.checksums["gup_final"] == checksum(gup)
    moved = rep.checksums["gup_final"] != rep.checksums["gup_initial"]
    detail = f"recipe defaults {recipe}; SR bit-identical {same_sr}; weights identical {same_w}; weights changed {moved}"
    verdict(4, recipe and same_sr and same_w and moved, detail)


def test_ac5_kernel_recovery(desk, verdict):
    ckpt = read_checkpoint(desk.ckpt)
    cfg = preset("desk").with_overrides(REDUCED)
    true_k = make_kernel(desk.specs["k13"])
    closer, lines, equiv = 0, [], 0.0
    for eid, _, lr, _ in load_manifest(desk.manifest("k13")).pairs():
        rng_a, _ = run_streams(SEED)
        gdn, _, _ = train_gdn(lr, ckpt.model(), cfg, rng_a)
        init_rng = run_streams(SEED)[0].spawn(2)[0]  # the stream train_gdn initialises from
        k0 = collapse_gdn_kernel(build_gdn(2, cfg.stage_a.gdn_kernel_sizes, init_rng))
        k = collapse_gdn_kernel(gdn)
        d0, d1 = np.linalg.norm(k0 - true_k), np.linalg.norm(k - true_k)
        closer += d1 < d0
        lines.append(f"{eid.split('@')[0]} {d0:.3f}->{d1:.3f}")
        # the collapse identity must survive training
        with torch.no_grad():
            chain = gdn.double()(to_tensor(lr, torch.float64))[0].numpy().transpose(1, 2, 0)
        direct = np.stack([convolve(lr[:, :, c], k, mode="mirror") for c in range(3)], axis=2)[0::2, 0::2]
        equiv = max(equiv, float(np.abs(chain - direct).max()))
    detail = f"{closer}/8 images closer to the true sigma=1.3 kernel (need >= 7); L2 init->trained: " + ", ".join(lines) + \
        f"; post-training collapse error {equiv:.1e}"
    verdict(5, closer >= 7 and equiv < 1e-5, detail)


def test_ac6_numerical_core(verdict):
    rng = np.random.default_rng(0)
    errs = {}
    conv = torch.nn.Conv2d(3, 4, 3, padding=1).double()
    x, fn = projected(conv, (1, 3, 6, 6), rng)
    errs["conv"] = fd_check(fn, [x, conv.weight, conv.bias], rng)
    block = ResBlock(4, np.random.default_rng(0)).double()
    x, fn = projected(block, (1, 4, 6, 6), rng)
    errs["resblock"] = fd_check(fn, [x, block.conv1.weight, block.conv2.weight], rng)
    x, fn = projected(lambda t: torch.nn.functional.pixel_shuffle(t, 2), (1, 12, 6, 6), rng)
    errs["pixel_shuffle"] = fd_check(fn, [x], rng)
    gup = build_gup(2, 8, 1, np.random.default_rng(0)).double()
    with torch.no_grad():
        gup.tail.weight.normal_(0, 0.1)
    x, fn = projected(gup, (1, 3, 6, 6), rng)
    errs["gup"] = fd_check(fn, [x, gup.head.weight, gup.tail.weight], rng)
    gdn = build_gdn(2, (3, 3, 1), np.random.default_rng(0)).double()
    with torch.no_grad():
        for w in gdn.weights:
            w.add_(torch.from_numpy(rng.normal(0, 0.1, size=tuple(w.shape))))
    x, fn = projected(gdn, (1, 3, 6, 6), rng)
    errs["gdn"] = fd_check(fn, [x, *gdn.weights], rng)
    ddn = build_ddn(8, np.random.default_rng(0)).double()
    x, fn = projected(ddn, (1, 3, 6, 6), rng)
    errs["ddn"] = fd_check(fn, [x, ddn.features[0].weight, ddn.head.weight], rng)
    grads_ok = max(errs.values()) < FD_RTOL

    gdn = build_gdn(2, rng=np.random.default_rng(1))
    with torch.no_grad():
        for w in gdn.weights:
            w.add_(torch.from_numpy(rng.normal(0, 0.05, size=tuple(w.shape)).astype(np.float32)))
    gdn = gdn.double()
    k = collapse_gdn_kernel(gdn)
    img = rng.random((24, 24, 3))
    with torch.no_grad():
        chain = gdn(to_tensor(img, torch.float64))[0].numpy().transpose(1, 2, 0)
    direct = np.stack([convolve(img[:, :, c], k, mode="mirror") for c in range(3)], axis=2)[0::2, 0::2]
    collapse_err = float(np.abs(chain - direct).max())

    c1 = 1e-4
    oracles = {
        "luma white": np.allclose(to_luminance(np.ones((2, 2, 3))), 0.257 + 0.504 + 0.098 + 16 / 255, atol=1e-15),
        "luma grey": np.allclose(to_luminance(np.full((2, 2, 3), 0.5)), 0.859 * 0.5 + 16 / 255, atol=1e-15),
        "psnr 20dB": abs(psnr(np.full((6, 6, 1), 0.3), np.full((6, 6, 1), 0.4)) - 20.0) < 1e-9,
        "psnr inf": psnr(img, img) == float("inf"),
        "ssim const": abs(ssim(np.full((16, 16, 1), 0.25), np.full((16, 16, 1), 0.75)) - (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)) < 1e-12,
        "bicubic x1": np.array_equal(bicubic_resample(img, 1), img),
        "lr schedule": lr_schedule(250, 2e-7, 100, 0.5) == pytest.approx(5e-8) and lr_schedule(750, 1.0, 750, 0.25) == 0.25,
    }
    ok = grads_ok and collapse_err < 1e-5 and all(oracles.values())
    detail = "max FD rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + \
        f"; collapse err {collapse_err:.1e}; oracles {sum(oracles.values())}/{len(oracles)} " + \
        ("" if all(oracles.values()) else f"failed {[k for k, v in oracles.items() if not v]}")
    verdict(6, ok, detail)


def test_ac7_determinism(desk, tmp_path, verdict):
    full = load_manifest(desk.manifest("mismatched"))
    sub = json.loads(full.to_json())
    sub["entries"] = sub["entries"][:3]
    for e in sub["entries"]:
        for key in ("hr_path", "lr_path"):
            e[key] = str(full.resolve(e[key]))
    (tmp_path / "manifest.json").write_text(json.dumps(sub))
    (tmp_path / "variants.json").write_text(json.dumps(
        {"base": {"stage_a": {"iters": 40}, "stage_b": {"iters": 20}}, "variants": ["frozen", "step3-full"]}))
    base = ["eval", "--ckpt", str(desk.ckpt), "--manifest", str(tmp_path / "manifest.json"),
            "--config", str(tmp_path / "variants.json"), "--seed", "11"]
    codes = [cli_main(base + ["--out", str(tmp_path / "a")]),
             cli_main(base + ["--out", str(tmp_path / "b")]),
             cli_main(base + ["--out", str(tmp_path / "p"), "--workers", "2"])]
    csvs = [(tmp_path / d / "results.csv").read_bytes() for d in "abp"]
    rerun, parallel = csvs[0] == csvs[1], csvs[0] == csvs[2]
    detail = f"exit codes {codes}; rerun CSV byte-identical {rerun}; parallel == serial {parallel}"
    verdict(7, codes == [0, 0, 0] and rerun and parallel, detail)


def test_ac8_stage_isolation(desk, verdict):
    _, hr, lr, _ = next(load_manifest(desk.manifest("mismatched")).pairs())
    cfg = preset("desk").with_overrides({"stage_a": {"iters": 100}, "stage_b": {"iters": 50}})
    _, rep = adapt(lr, read_checkpoint(desk.ckpt), cfg, hr)
    c = rep.checksums
    a_ok = c["gup_initial"] == c["gup_after_stage_a"]
    b_ok = c["gdn"] == c["gdn_after_stage_b"]
    adapted = c["gup_final"] != c["gup_initial"]
    detail = f"GUP unchanged by Stage A {a_ok}; GDN unchanged by Stage B {b_ok}; GUP adapted in Stage B {adapted}"
    verdict(8, a_ok and b_ok and adapted, detail)


@pytest.mark.xfail(strict=True, reason="per-image no-harm bound does not hold at desk scale; see decisions ledger")
def test_matched_per_image_no_harm(matched_sweep, capsys):
    per = per_image_deltas(matched_sweep, "step3-full")
    worst = min(per, key=per.get)
    with capsys.disabled():
        print(f"\nper-image no-harm (invariant, not a criterion): worst {worst.split('@')[0]} {per[worst]:+.3f} dB (bound -0.05)", flush=True)
    assert all(d >= -0.05 for d in per.values())
