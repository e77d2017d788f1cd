"""Parametric degradation ``y = (x conv k) subsampled + noise`` and desk benchmarks."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .image import (
    ParameterError,
    SizeError,
    as_image,
    bicubic_resample,
    clamp,
    keys_kernel,
    read_png,
    write_png,
)

MANIFEST_FORMAT_VERSION = 1
KERNEL_FAMILIES = ("delta", "gaussian_iso", "gaussian_aniso", "box", "bicubic")


@dataclass(frozen=True)
class DegradationSpec:
    kernel_family: str = "delta"
    sigma_x: float = 0.0
    sigma_y: float = 0.0
    angle: float = 0.0
    kernel_size: int = 13
    scale: int = 2
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kernel_family not in KERNEL_FAMILIES:
            raise ParameterError(f"unknown kernel family {self.kernel_family!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.sigma_x < 0 or self.sigma_y < 0:
            raise ParameterError("sigma must be non-negative")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be non-negative")
        if int(self.scale) != self.scale or self.scale < 1:
            raise ParameterError(f"scale must be an integer >= 1, got {self.scale}")

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def tag(self) -> str:
        """Short filesystem-safe label, unique for distinct specs."""
        digest = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:8]
        return f"{self.kernel_family}_x{self.scale}_{digest}"


def _grid(size: int) -> np.ndarray:
    return np.arange(size, dtype=np.float64) - size // 2


def make_kernel(spec: DegradationSpec) -> np.ndarray:
    """Blur kernel on the centred integer grid, normalised to sum 1.

    The ``bicubic`` family is the scale-stretched Keys kernel; it matches
    :func:`bicubic_resample` exactly only when the scale is odd (for even
    scales the bicubic grid sits half a pixel off the subsample grid).
    """
    size = spec.kernel_size
    fam = spec.kernel_family
    delta = np.zeros((size, size))
    delta[size // 2, size // 2] = 1.0
    if fam == "delta":
        return delta
    if fam == "box":
        return np.full((size, size), 1.0 / size**2)
    r = _grid(size)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    if fam == "bicubic":
        w = keys_kernel(r / spec.scale)
        k = np.outer(w, w)
    elif fam == "gaussian_iso":
        if spec.sigma_x < 1e-6:
            return delta
        k = np.exp(-(xx**2 + yy**2) / (2.0 * spec.sigma_x**2))
    else:
        if spec.sigma_x < 1e-6 and spec.sigma_y < 1e-6:
            return delta
        c, s = np.cos(spec.angle), np.sin(spec.angle)
        u = c * xx + s * yy
        v = -s * xx + c * yy
        sx = max(spec.sigma_x, 1e-6)
        sy = max(spec.sigma_y, 1e-6)
        k = np.exp(-0.5 * (u**2 / sx**2 + v**2 / sy**2))
    return k / k.sum()


def subsample_phase(scale: int) -> int:
    return (scale - 1) // 2


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve each channel with ``kernel`` using reflect padding (edge not repeated)."""
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[:, :, ch] = convolve(img[:, :, ch], kernel, mode="mirror")
    return out


def degrade(hr: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    hr = as_image(hr, copy=False)
    s = int(spec.scale)
    h, w = hr.shape[:2]
    if h % s or w % s:
        raise SizeError(f"{h}x{w} image is not divisible by scale {s}; crop first")
    if spec.kernel_family == "bicubic":
        lr = bicubic_resample(hr, 1 / s) if s > 1 else hr.copy()
    else:
        k = make_kernel(spec)
        blurred = blur(hr, k) if k.shape != (1, 1) else hr.copy()
        ph = subsample_phase(s)
        lr = blurred[ph::s, ph::s]
    if spec.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(spec.seed)
        lr = lr + rng.normal(0.0, spec.noise_sigma, size=lr.shape)
    return clamp(lr)


def center_crop(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape[:2]
    nh, nw = h - h % multiple, w - w % multiple
    if nh < 1 or nw < 1:
        raise SizeError(f"{h}x{w} image too small to crop to a multiple of {multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top : top + nh, left : left + nw]


def entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


@dataclass
class BenchmarkManifest:
    entries: list[dict]
    seed: int
    created: str
    format_version: int = MANIFEST_FORMAT_VERSION
    root: Path | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "seed": self.seed,
            "created": self.created,
            "entries": self.entries,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def pairs(self):
        """Yield ``(entry_id, hr, lr, spec)`` for every entry."""
        for e in self.entries:
            yield (
                e["id"],
                read_png(self.resolve(e["hr_path"])),
                read_png(self.resolve(e["lr_path"])),
                DegradationSpec.from_dict(e["spec"]),
            )

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def load_manifest(path: str | Path) -> BenchmarkManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported manifest format_version {doc.get('format_version')!r}")
    return BenchmarkManifest(
        entries=doc["entries"],
        seed=doc["seed"],
        created=doc["created"],
        format_version=doc["format_version"],
        root=path.parent,
    )


def _creation_stamp() -> str:
    # SOURCE_DATE_EPOCH keeps reruns byte-identical; default is the epoch itself
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def build_benchmark(hr_images, specs, out_dir, seed: int = 0) -> BenchmarkManifest:
    """Write cropped HR / degraded LR PNG pairs plus ``manifest.json`` into ``out_dir``.

    Entry ``i`` (image-major order) draws its noise from ``SeedSequence([seed, i])``.
    """
    out_dir = Path(out_dir)
    specs = list(specs)
    hr_images = [Path(p) for p in hr_images]
    if not specs:
        raise ParameterError("at least one degradation spec is required")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    multiple = max(int(s.scale) for s in specs)
    entries = []
    index = 0
    for src in hr_images:
        try:
            hr = read_png(src)
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read HR image {src}: {exc}") from exc
        hr = center_crop(hr, multiple)
        hr_rel = Path("hr") / f"{src.stem}.png"
        write_png(out_dir / hr_rel, hr)
        for spec in specs:
            lr = degrade(hr, spec, entry_rng(seed, index))
            lr_rel = Path("lr") / spec.tag / f"{src.stem}.png"
            write_png(out_dir / lr_rel, lr)
            entries.append(
                {
                    "id": f"{src.stem}@{spec.tag}",
                    "hr_path": hr_rel.as_posix(),
                    "lr_path": lr_rel.as_posix(),
                    "spec": spec.to_dict(),
                }
            )
            index += 1
    manifest = BenchmarkManifest(entries=entries, seed=int(seed), created=_creation_stamp(), root=out_dir)
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest
