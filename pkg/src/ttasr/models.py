"""GUP (upsampler), GDN (deep-linear downsampler), DDN (patch discriminator),
GUP pretraining and the checkpoint container."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import convolve2d
from torch import nn

from .image import ParameterError, SizeError, dihedral, resize_tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"TTASRCKP"
DEFAULT_GDN_KERNELS = (7, 5, 3, 1, 1)
RES_SCALE = 0.1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointKindError(CheckpointError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    scale: int = 2
    width: int = 32
    depth: int = 4
    channels: int = 3
    gdn_kernel_sizes: tuple[int, ...] = DEFAULT_GDN_KERNELS
    gdn_linear: bool = True

    def __post_init__(self):
        if self.kind not in ("gup", "gdn", "ddn"):
            raise ParameterError(f"unknown network kind {self.kind!r}")
        if self.scale < 1 or self.width < 1 or self.depth < 0:
            raise ParameterError(f"invalid network dimensions in {self}")
        object.__setattr__(self, "gdn_kernel_sizes", tuple(int(k) for k in self.gdn_kernel_sizes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gdn_kernel_sizes"] = list(self.gdn_kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def _he_normal(rng: np.random.Generator, shape) -> torch.Tensor:
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return torch.from_numpy(w.astype(np.float32))


def _conv(cin: int, cout: int, rng: np.random.Generator, zero: bool = False) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, 3, padding=1)
    with torch.no_grad():
        if zero:
            conv.weight.zero_()
        else:
            conv.weight.copy_(_he_normal(rng, conv.weight.shape))
        conv.bias.zero_()
    return conv


class ResBlock(nn.Module):
    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = _conv(width, width, rng)
        self.conv2 = _conv(width, width, rng)

    def forward(self, x):
        return x + RES_SCALE * self.conv2(F.relu(self.conv1(x)))


class GUP(nn.Module):
    """Residual SR net whose output is ``bicubic_up(x) + residual(x)``."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        c, w, s = spec.channels, spec.width, spec.scale
        self.head = _conv(c, w, rng)
        self.body = nn.Sequential(*[ResBlock(w, rng) for _ in range(spec.depth)])
        self.tail = _conv(w, c * s * s, rng, zero=True)

    @property
    def receptive_radius(self) -> int:
        """Radius in input pixels beyond which inputs cannot affect an output pixel."""
        return max(2 + 2 * self.spec.depth, 2)

    def forward(self, x):
        res = F.pixel_shuffle(self.tail(self.body(self.head(x))), self.spec.scale)
        return resize_tensor(x, self.spec.scale) + res


class GDN(nn.Module):
    """Chain of single-channel convolutions (shared over colour channels),
    subsampled by ``scale`` at phase ``(scale - 1) // 2``.

    Each layer convolves with its weights divided by their sum, so the chain
    always has unit DC gain.  Without this, Adam spends its steps oscillating
    along the kernel-sum direction and the taps barely move.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, noise: float = 1e-3):
        super().__init__()
        if any(k < 1 or k % 2 == 0 for k in spec.gdn_kernel_sizes):
            raise ParameterError(f"GDN kernel sizes must be odd, got {spec.gdn_kernel_sizes}")
        self.spec = spec
        self.weights = nn.ParameterList()
        for i, k in enumerate(spec.gdn_kernel_sizes):
            w = np.zeros((1, 1, k, k))
            w[0, 0, k // 2, k // 2] = 1.0
            if i == 0:
                w = w + rng.normal(0.0, noise, size=w.shape)
            self.weights.append(nn.Parameter(torch.from_numpy(w.astype(np.float32))))

    @property
    def support(self) -> int:
        return sum(k - 1 for k in self.spec.gdn_kernel_sizes) + 1

    def layer_kernels(self) -> list[torch.Tensor]:
        return [w / w.sum() for w in self.weights]

    def forward(self, x):
        n, c, h, w = x.shape
        pad = (self.support - 1) // 2
        if pad >= min(h, w):
            raise SizeError(f"GDN input {h}x{w} too small for kernel support {self.support}")
        y = x.reshape(n * c, 1, h, w)
        if pad:
            y = F.pad(y, (pad, pad, pad, pad), mode="reflect")
        last = len(self.weights) - 1
        for i, wt in enumerate(self.layer_kernels()):
            y = F.conv2d(y, wt)
            if not self.spec.gdn_linear and i < last:
                y = F.leaky_relu(y, 0.2)
        s = self.spec.scale
        ph = (s - 1) // 2
        y = y[:, :, ph::s, ph::s]
        return y.reshape(n, c, y.shape[-2], y.shape[-1])


class DDN(nn.Module):
    """Fully convolutional patch discriminator producing a per-pixel realness map."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        c, w = spec.channels, spec.width
        self.features = nn.Sequential(
            _conv(c, w, rng), nn.LeakyReLU(0.2),
            _conv(w, w, rng), nn.LeakyReLU(0.2),
            _conv(w, w, rng), nn.LeakyReLU(0.2),
        )
        self.head = _conv(w, 1, rng)

    def forward(self, x):
        return self.head(self.features(x))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def build_gup(scale: int = 2, width: int = 32, depth: int = 4, rng=0, channels: int = 3) -> GUP:
    if scale not in (2, 3, 4):
        raise ParameterError(f"GUP supports scales 2, 3 and 4, got {scale}")
    spec = NetworkSpec("gup", scale=scale, width=width, depth=depth, channels=channels)
    return GUP(spec, _as_rng(rng))


def build_gdn(scale: int = 2, kernel_sizes=DEFAULT_GDN_KERNELS, rng=0, channels: int = 3, linear: bool = True) -> GDN:
    spec = NetworkSpec(
        "gdn", scale=scale, width=1, depth=len(kernel_sizes), channels=channels,
        gdn_kernel_sizes=tuple(kernel_sizes), gdn_linear=linear,
    )
    return GDN(spec, _as_rng(rng))


def build_ddn(width: int = 32, rng=0, channels: int = 3) -> DDN:
    if width < 8:
        raise ParameterError(f"DDN width must be >= 8, got {width}")
    spec = NetworkSpec("ddn", scale=1, width=width, depth=3, channels=channels)
    return DDN(spec, _as_rng(rng))


def build_from_spec(spec: NetworkSpec, rng=0) -> nn.Module:
    cls = {"gup": GUP, "gdn": GDN, "ddn": DDN}[spec.kind]
    return cls(spec, _as_rng(rng))


def collapse_gdn_kernel(gdn: GDN) -> np.ndarray:
    """Single kernel ``k`` with ``gdn(x) == subsample(x conv k)`` (reflect padded).

    Returned in convolution orientation, directly comparable to a degradation kernel.
    """
    if not isinstance(gdn, GDN):
        raise TypeError("collapse_gdn_kernel needs a GDN")
    if not gdn.spec.gdn_linear:
        raise NotImplementedError("a nonlinear GDN has no single equivalent kernel")
    k = np.ones((1, 1))
    for wt in gdn.weights:
        wt = wt.detach().double().numpy()[0, 0]
        k = convolve2d(k, wt / wt.sum(), mode="full")
    # layers cross-correlate; flipping turns the composite into a convolution kernel
    return k[::-1, ::-1].copy()


def checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Tensor/image plumbing


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)[None]


def to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach()[0].double().numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    weights: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def from_model(cls, model: nn.Module, metadata: dict | None = None) -> "Checkpoint":
        weights = {k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
        return cls(model.spec, weights, dict(metadata or {}))

    def model(self) -> nn.Module:
        m = build_from_spec(self.spec, np.random.default_rng(0))
        expected = m.state_dict()
        _check_shapes(expected, self.weights)
        m.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.weights.items()})
        m.checkpoint_metadata = dict(self.metadata)
        return m

    def to_bytes(self) -> bytes:
        names = list(self.weights)
        header = {
            "format_version": self.format_version,
            "spec": self.spec.to_dict(),
            "metadata": self.metadata,
            "tensors": [{"name": n, "shape": list(self.weights[n].shape)} for n in names],
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        blobs = b"".join(np.ascontiguousarray(self.weights[n], dtype="<f4").tobytes() for n in names)
        return CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blobs

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(CHECKPOINT_MAGIC) + 8 or not data.startswith(CHECKPOINT_MAGIC):
            raise CorruptCheckpointError("missing checkpoint magic")
        off = len(CHECKPOINT_MAGIC)
        (hlen,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + hlen > len(data):
            raise CorruptCheckpointError("truncated checkpoint header")
        try:
            header = json.loads(data[off : off + hlen])
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
        off += hlen
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format_version {header.get('format_version')!r}, expected {CHECKPOINT_FORMAT_VERSION}"
            )
        try:
            spec = NetworkSpec.from_dict(header["spec"])
            tensors = header["tensors"]
        except (KeyError, TypeError, ParameterError) as exc:
            raise CorruptCheckpointError(f"malformed header: {exc}") from exc
        weights = {}
        for t in tensors:
            shape = tuple(int(d) for d in t["shape"])
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(data):
                raise CorruptCheckpointError(f"truncated weight blob {t['name']!r}")
            weights[t["name"]] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
            off += nbytes
        if off != len(data):
            raise CorruptCheckpointError(f"{len(data) - off} trailing bytes after weights")
        ckpt = cls(spec, weights, header.get("metadata", {}), header["format_version"])
        _check_shapes(build_from_spec(spec, np.random.default_rng(0)).state_dict(), weights)
        return ckpt


def _check_shapes(expected: dict, weights: dict) -> None:
    if set(expected) != set(weights):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise CheckpointShapeError(f"weight names differ: missing={missing} unexpected={extra}")
    for k, v in expected.items():
        if tuple(v.shape) != tuple(weights[k].shape):
            raise CheckpointShapeError(f"{k}: expected shape {tuple(v.shape)}, got {tuple(weights[k].shape)}")


def save_checkpoint(obj, path: str | Path, metadata: dict | None = None) -> Path:
    """Atomically write a model or :class:`Checkpoint` to ``path``."""
    ckpt = obj if isinstance(obj, Checkpoint) else Checkpoint.from_model(obj, metadata or getattr(obj, "checkpoint_metadata", {}))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(ckpt.to_bytes())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def read_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if kind is not None and ckpt.spec.kind != kind:
        raise CheckpointKindError(f"{path} holds a {ckpt.spec.kind!r} network, expected {kind!r}")
    return ckpt


def load_checkpoint(path: str | Path, kind: str | None = None) -> nn.Module:
    return read_checkpoint(path, kind).model()


# ---------------------------------------------------------------------------
# Pretraining


@dataclass
class PretrainConfig:
    iters: int = 2000
    lr: float = 2e-4
    batch: int = 8
    patch: int = 24
    seed: int = 0
    scale: int = 2
    width: int = 32
    depth: int = 4
    log_every: int = 200


def _training_pairs(manifest, scale: int):
    pairs = []
    for entry_id, hr, lr, spec in manifest.pairs():
        fam = spec.kernel_family
        matched = fam in ("delta", "bicubic") or (fam == "gaussian_iso" and spec.sigma_x < 1e-6)
        if not matched or spec.noise_sigma > 0:
            raise ValueError(f"pretraining needs bicubic/delta, noise-free pairs; {entry_id} uses {fam}")
        if spec.scale != scale:
            raise ValueError(f"{entry_id} has scale {spec.scale}, expected {scale}")
        pairs.append((hr, lr))
    return pairs


def pretrain_gup(manifest, cfg: PretrainConfig, progress=None) -> Checkpoint:
    """Fit a fresh GUP to the manifest's (lr, hr) pairs with L1 loss and Adam."""
    pairs = _training_pairs(manifest, cfg.scale)
    if not pairs:
        raise ValueError("empty training manifest")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    torch.manual_seed(cfg.seed)
    gup = build_gup(cfg.scale, cfg.width, cfg.depth, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    opt = torch.optim.Adam(gup.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    s, p = cfg.scale, cfg.patch
    trace = []
    for it in range(cfg.iters):
        lrs, hrs = [], []
        for _ in range(cfg.batch):
            hr, lr = pairs[int(rng.integers(len(pairs)))]
            r = int(rng.integers(0, lr.shape[0] - p + 1))
            c = int(rng.integers(0, lr.shape[1] - p + 1))
            code = int(rng.integers(0, 8))
            lrs.append(dihedral(lr[r : r + p, c : c + p], code))
            hrs.append(dihedral(hr[r * s : (r + p) * s, c * s : (c + p) * s], code))
        x = torch.from_numpy(np.stack(lrs).transpose(0, 3, 1, 2).astype(np.float32))
        y = torch.from_numpy(np.stack(hrs).transpose(0, 3, 1, 2).astype(np.float32))
        loss = F.l1_loss(gup(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if progress is not None and cfg.log_every and (it + 1) % cfg.log_every == 0:
            progress(it + 1, float(np.mean(trace[-cfg.log_every :])))
    meta = {"iterations": cfg.iters, "seed": cfg.seed, "loss_trace": trace,
            "final_loss": trace[-1] if trace else None, "config": asdict(cfg)}
    return Checkpoint.from_model(gup, meta)
