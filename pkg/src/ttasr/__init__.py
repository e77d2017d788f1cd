"""Test-time adaptation for single-image super-resolution.

A pretrained upsampler (GUP) is fine-tuned on the test image itself, using
pseudo-pairs from either bicubic downsampling or a per-image learned
downsampler (GDN) trained with cycle and adversarial losses.
"""
from .degradation import DegradationSpec, build_benchmark, degrade, load_manifest
from .engine import AdaptationConfig, StageAConfig, StageBConfig, adapt, preset, super_resolve
from .image import bicubic_resample, psnr, read_png, ssim, to_luminance, write_png
from .models import build_ddn, build_gdn, build_gup, collapse_gdn_kernel, load_checkpoint, save_checkpoint

__all__ = [
    "AdaptationConfig",
    "DegradationSpec",
    "StageAConfig",
    "StageBConfig",
    "adapt",
    "bicubic_resample",
    "build_benchmark",
    "build_ddn",
    "build_gdn",
    "build_gup",
    "collapse_gdn_kernel",
    "degrade",
    "load_checkpoint",
    "load_manifest",
    "preset",
    "psnr",
    "read_png",
    "save_checkpoint",
    "ssim",
    "super_resolve",
    "to_luminance",
    "write_png",
]
