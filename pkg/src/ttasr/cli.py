"""``ttasr`` command line: pretrain | build-bench | adapt | eval | report.

Exit codes: 0 success, 1 regression or failed run, 2 usage/config error,
3 I/O error, 4 unusable checkpoint.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import desk
from .degradation import DegradationSpec, build_benchmark, load_manifest
from .engine import ConfigError, adapt, preset, super_resolve
from .harness import (
    BASELINE,
    DEFAULT_TOLERANCE,
    BaselineMissingError,
    MergeError,
    ResultsTable,
    SweepError,
    VariantMatrix,
    merge_tables,
    run_sweep,
    write_table,
)
from .image import ImageError, ParameterError, psnr, read_png, ssim, write_png
from .models import CheckpointError, PretrainConfig, pretrain_gup, read_checkpoint, save_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_CHECKPOINT = 0, 1, 2, 3, 4

log = logging.getLogger("ttasr")


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_json(path) -> tuple[dict, Path]:
    """Load a JSON config; returns the document and the directory relative paths resolve against."""
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise CLIError(EXIT_USAGE, f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(EXIT_USAGE, f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CLIError(EXIT_USAGE, f"config {path} must hold a JSON object")
    return doc, path.parent


def _rel(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _load_ckpt(path):
    try:
        return read_checkpoint(path, kind="gup")
    except FileNotFoundError:
        raise CLIError(EXIT_IO, f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise CLIError(EXIT_CHECKPOINT, f"unusable checkpoint {path}: {exc}") from None


def _load_image(path, what="image"):
    try:
        return read_png(path)
    except FileNotFoundError:
        raise CLIError(EXIT_IO, f"{what} not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise CLIError(EXIT_IO, f"cannot read {what} {path}: {exc}") from None


def _adaptation_base(args, overrides: dict):
    cfg = preset(args.profile)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    doc, base = _read_json(args.config)
    if "manifest" not in doc:
        raise CLIError(EXIT_USAGE, "pretrain config needs a 'manifest' entry")
    manifest_path = _rel(base, doc["manifest"])
    if not manifest_path.is_file():
        raise CLIError(EXIT_USAGE, f"manifest not found: {manifest_path}")
    known = {f.name for f in fields(PretrainConfig)}
    opts = doc.get("pretrain", {})
    unknown = set(opts) - known
    if unknown:
        raise CLIError(EXIT_USAGE, f"unknown pretrain options {sorted(unknown)}")
    cfg = PretrainConfig(**opts)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or _rel(base, doc.get("out", "runs/pretrain")))
    manifest = load_manifest(manifest_path)
    try:
        ckpt = pretrain_gup(manifest, cfg, progress=lambda i, v: print(f"iter {i:6d}  L1 {v:.6f}", flush=True))
    except ValueError as exc:
        raise CLIError(EXIT_USAGE, str(exc)) from None
    ckpt.metadata["manifest_hash"] = manifest.digest()
    path = save_checkpoint(ckpt, out / "gup.ckpt")
    sidecar = {k: v for k, v in ckpt.metadata.items() if k != "loss_trace"}
    sidecar.update(checkpoint_sha256=ckpt.digest(), spec=ckpt.spec.to_dict())
    (out / "gup.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    print(f"wrote {path} ({ckpt.digest()[:16]})")
    return EXIT_OK


def cmd_build_bench(args) -> int:
    doc, base = _read_json(args.config)
    out = Path(args.out or _rel(base, doc.get("out", "runs/bench")))
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    try:
        specs = [DegradationSpec.from_dict(s) for s in doc.get("specs", [{}])]
    except (ParameterError, TypeError) as exc:
        raise CLIError(EXIT_USAGE, f"bad degradation spec: {exc}") from None
    if "desk" in doc:
        if doc["desk"] not in ("test", "train"):
            raise CLIError(EXIT_USAGE, "'desk' must be 'test' or 'train'")
        images = desk.write_sources(out / "sources", doc["desk"], doc.get("count"))
    else:
        images = [_rel(base, p) for p in doc.get("images", [])]
        if not images:
            raise CLIError(EXIT_USAGE, "build-bench config needs 'images' or 'desk'")
    manifest = build_benchmark(images, specs, out, seed=seed)
    print(f"wrote {out / 'manifest.json'}: {len(manifest.entries)} entries ({manifest.digest()[:16]})")
    return EXIT_OK


def cmd_adapt(args) -> int:
    if not args.ckpt or not args.image:
        raise CLIError(EXIT_USAGE, "adapt needs --ckpt and --image")
    overrides, _ = _read_json(args.config)
    matrix = VariantMatrix.builtin(_adaptation_base(args, overrides), [args.variant or "step3-full"])
    cfg = matrix.config(matrix.names[0])
    if args.seed is not None:
        cfg.seed = args.seed
    ckpt = _load_ckpt(args.ckpt)
    lr = _load_image(args.image)
    gt = _load_image(args.gt, "ground truth") if args.gt else None
    sr, report = adapt(lr, ckpt, cfg, gt)
    out = Path(args.out or "runs/adapt")
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "sr.png", sr)
    (out / "report.json").write_text(report.to_json() + "\n")
    if report.gdn_kernel is not None:
        with open(out / "kernel.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([[f"{v:.8f}" for v in row] for row in report.gdn_kernel])
    print(f"wrote {out / 'sr.png'} and {out / 'report.json'}")
    if gt is not None:
        frozen = super_resolve(ckpt.model(), lr, cfg.tile, cfg.overlap)
        d_psnr = report.metrics["psnr_y"] - psnr(frozen, gt, shave=cfg.scale)
        d_ssim = report.metrics["ssim_y"] - ssim(frozen, gt)
        print(f"Y-PSNR={report.metrics['psnr_y']:.6f} dB  SSIM={report.metrics['ssim_y']:.6f}")
        print(f"ΔPSNR={d_psnr:+.2f} dB  ΔSSIM={d_ssim:+.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.ckpt or not args.manifest:
        raise CLIError(EXIT_USAGE, "eval needs --ckpt and --manifest")
    doc, _ = _read_json(args.config)
    matrix = VariantMatrix.from_dict(doc, _adaptation_base(args, {}))
    if args.variant:
        keep = args.variant.split(",")
        missing = [n for n in keep if n not in matrix.names]
        if missing:
            raise CLIError(EXIT_USAGE, f"unknown variant(s) {missing}")
        matrix = VariantMatrix(matrix.base, [v for v in matrix.variants if v[0] in keep])
    if not Path(args.manifest).is_file():
        raise CLIError(EXIT_IO, f"manifest not found: {args.manifest}")
    _load_ckpt(args.ckpt)
    out = Path(args.out or "runs/eval")
    for name in ("results.csv", "results.json", "table.md"):
        (out / name).unlink(missing_ok=True)
    seed = args.seed if args.seed is not None else 0

    def progress(row):
        print(f"{row['variant']:>20s}  {row['image']:<40s}  Y-PSNR {row['psnr_y']:.6f}", flush=True)

    try:
        table = run_sweep(args.ckpt, args.manifest, matrix, seed=seed, workers=args.workers, progress=progress)
    except SweepError as exc:
        raise CLIError(EXIT_FAIL, f"sweep aborted: {exc}") from None
    paths = write_table(table, out, BASELINE, args.tolerance)
    print(paths["md"].read_text())
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.inputs:
        raise CLIError(EXIT_USAGE, "report needs at least one results.json")
    tables = []
    for p in args.inputs:
        try:
            tables.append(ResultsTable.from_json(Path(p).read_text()))
        except FileNotFoundError:
            raise CLIError(EXIT_IO, f"results file not found: {p}") from None
        except (json.JSONDecodeError, KeyError) as exc:
            raise CLIError(EXIT_USAGE, f"{p} is not a results file: {exc}") from None
    try:
        merged = merge_tables(tables)
        text = merged.to_markdown(args.baseline, args.tolerance)
    except MergeError as exc:
        raise CLIError(EXIT_USAGE, str(exc)) from None
    except BaselineMissingError:
        raise CLIError(EXIT_USAGE, f"baseline variant not found: {args.baseline!r}") from None
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.md").write_text(text)
    print(text)
    bad = merged.regressions(args.baseline, args.tolerance)
    if bad:
        print(f"regression beyond {args.tolerance} dB: {', '.join(bad)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    adapt_opts = argparse.ArgumentParser(add_help=False)
    adapt_opts.add_argument("--profile", choices=["paper", "desk"], default="desk")
    adapt_opts.add_argument("--ckpt", metavar="PATH", help="pretrained GUP checkpoint")

    parser = argparse.ArgumentParser(prog="ttasr", description="Single-image test-time adaptation for SR.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="pretrain the GUP on a bicubic manifest")
    sub.add_parser("build-bench", parents=[common], help="build a degraded benchmark")

    p = sub.add_parser("adapt", parents=[common, adapt_opts], help="adapt to one LR image")
    p.add_argument("--image", metavar="PATH", help="LR input PNG")
    p.add_argument("--gt", metavar="PATH", help="HR ground truth PNG")
    p.add_argument("--variant", metavar="NAME", help="built-in variant (default step3-full)")

    p = sub.add_parser("eval", parents=[common, adapt_opts], help="sweep variants over a benchmark")
    p.add_argument("--manifest", metavar="PATH")
    p.add_argument("--variant", metavar="NAME", help="comma-separated subset of variants")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)

    p = sub.add_parser("report", parents=[common], help="merge results and flag regressions")
    p.add_argument("inputs", nargs="*", metavar="results.json")
    p.add_argument("--baseline", default=BASELINE)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "build-bench": cmd_build_bench,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ImageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
