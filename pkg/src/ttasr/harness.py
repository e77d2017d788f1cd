"""Variant sweeps over a benchmark, result tables and report merging."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .degradation import BenchmarkManifest, load_manifest
from .engine import AdaptationConfig, ConfigError, adapt, preset
from .image import read_png
from .models import Checkpoint, read_checkpoint

BASELINE = "frozen"
DEFAULT_TOLERANCE = 0.05
DECIMALS = 6

_ALL_A = ["bwd_cycle", "fwd_cycle", "gan"]
_ALL_B = ["down_up", "up_down"]

BUILTIN_VARIANTS: dict[str, dict] = {
    "frozen": {"dry_run": True},
    "step1-bicubic": {"degrader_mode": "bicubic", "stage_b": {"enabled_losses": ["down_up"]}},
    "step2-learned-nogan": {
        "degrader_mode": "learned",
        "stage_a": {"enabled_losses": ["bwd_cycle", "fwd_cycle"]},
        "stage_b": {"enabled_losses": ["down_up"]},
    },
    "step2-learned-gan": {
        "degrader_mode": "learned",
        "stage_a": {"enabled_losses": _ALL_A},
        "stage_b": {"enabled_losses": ["down_up"]},
    },
    "step3-full": {
        "degrader_mode": "learned",
        "stage_a": {"enabled_losses": _ALL_A},
        "stage_b": {"enabled_losses": _ALL_B},
    },
}

_SHORT = {"bwd_cycle": "bwd", "fwd_cycle": "fwd", "gan": "gan", "down_up": "du", "up_down": "ud"}


class SweepError(RuntimeError):
    def __init__(self, variant: str, image: str, cause: BaseException):
        super().__init__(f"variant {variant!r} failed on image {image!r}: {type(cause).__name__}: {cause}")
        self.variant, self.image, self.cause = variant, image, cause


class MergeError(ValueError):
    pass


class BaselineMissingError(KeyError):
    pass


def toggle_label(cfg: AdaptationConfig) -> str:
    """Explicit loss-toggle label such as ``A:bwd+fwd+gan|B:du+ud``."""
    if cfg.dry_run:
        return "none"
    if cfg.degrader_mode == "bicubic":
        a = "bicubic"
    else:
        a = "+".join(_SHORT[n] for n in _ALL_A if n in cfg.stage_a.enabled_losses) or "-"
    b = "+".join(_SHORT[n] for n in _ALL_B if n in cfg.stage_b.enabled_losses) or "-"
    return f"A:{a}|B:{b}"


@dataclass
class VariantMatrix:
    """Named config deltas applied over one base config."""

    base: AdaptationConfig
    variants: list[tuple[str, dict]]

    def __post_init__(self):
        names = [n for n, _ in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names in {names}")
        for n in names:
            self.config(n).validate()

    @classmethod
    def builtin(cls, base: AdaptationConfig | None = None, names=None) -> "VariantMatrix":
        names = list(BUILTIN_VARIANTS) if names is None else list(names)
        unknown = [n for n in names if n not in BUILTIN_VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variant(s) {unknown}; built-ins are {sorted(BUILTIN_VARIANTS)}")
        return cls(base or preset("desk"), [(n, BUILTIN_VARIANTS[n]) for n in names])

    @classmethod
    def from_dict(cls, doc: dict, base: AdaptationConfig) -> "VariantMatrix":
        """``{"base": {...overrides}, "variants": ["name" | {"name", "delta"}]}``."""
        if "base" in doc:
            base = base.with_overrides(doc["base"])
        items = []
        for v in doc.get("variants", list(BUILTIN_VARIANTS)):
            if isinstance(v, str):
                if v not in BUILTIN_VARIANTS:
                    raise ConfigError(f"unknown variant {v!r}")
                items.append((v, BUILTIN_VARIANTS[v]))
            else:
                try:
                    items.append((v["name"], v.get("delta", {})))
                except (KeyError, TypeError) as exc:
                    raise ConfigError(f"bad variant entry {v!r}") from exc
        return cls(base, items)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.variants]

    def config(self, name: str) -> AdaptationConfig:
        for n, delta in self.variants:
            if n == name:
                return self.base.with_overrides(delta)
        raise ConfigError(f"unknown variant {name!r}")

    def with_baseline(self) -> "VariantMatrix":
        if BASELINE in self.names:
            return self
        return VariantMatrix(self.base, [(BASELINE, BUILTIN_VARIANTS[BASELINE])] + self.variants)


def job_seed(global_seed: int, image_id: str, variant: str) -> int:
    """Per-job seed that depends only on the job's identity, never on scheduling."""
    h = hashlib.sha256(f"{int(global_seed)}\0{image_id}\0{variant}".encode()).digest()
    return int.from_bytes(h[:4], "little")


# ---------------------------------------------------------------------------
# Results


def fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.{DECIMALS}f}"


@dataclass
class ResultsTable:
    rows: list[dict]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r["variant"], r["image"]))

    @property
    def variants(self) -> list[str]:
        order = self.provenance.get("variant_order") or []
        seen = [v for v in order if any(r["variant"] == v for r in self.rows)]
        rest = sorted({r["variant"] for r in self.rows} - set(seen))
        return seen + rest

    @property
    def images(self) -> list[str]:
        return sorted({r["image"] for r in self.rows})

    def check_complete(self) -> None:
        have = {(r["variant"], r["image"]) for r in self.rows}
        want = {(v, i) for v in self.variants for i in self.images}
        if have != want or len(have) != len(self.rows):
            raise ValueError(f"table incomplete or duplicated: missing {sorted(want - have)}")

    def means(self) -> dict[str, dict]:
        out = {}
        for v in self.variants:
            rs = [r for r in self.rows if r["variant"] == v]
            out[v] = {
                "label": rs[0]["label"],
                "psnr_y": float(np.mean([r["psnr_y"] for r in rs])),
                "ssim_y": float(np.mean([r["ssim_y"] for r in rs])),
                "n": len(rs),
            }
        return out

    def deltas(self, baseline: str = BASELINE) -> dict[str, float]:
        m = self.means()
        if baseline not in m:
            raise BaselineMissingError(baseline)
        return {v: m[v]["psnr_y"] - m[baseline]["psnr_y"] for v in m}

    # -- serialisation --

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["variant", "label", "image", "psnr_y", "ssim_y"])
        for r in self.rows:
            w.writerow([r["variant"], r["label"], r["image"], fmt(r["psnr_y"]), fmt(r["ssim_y"])])
        for v, m in self.means().items():
            w.writerow([v, m["label"], "mean", fmt(m["psnr_y"]), fmt(m["ssim_y"])])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"rows": self.rows, "means": self.means(), "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ResultsTable":
        doc = json.loads(text)
        return cls(doc["rows"], doc.get("provenance", {}))

    def to_markdown(self, baseline: str = BASELINE, tolerance: float = DEFAULT_TOLERANCE) -> str:
        means = self.means()
        deltas = self.deltas(baseline)
        images = self.images
        head = ["variant", "toggles", *images, "mean Y-PSNR", "mean SSIM", f"Δ vs {baseline}", "flag"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        per = {(r["variant"], r["image"]): r for r in self.rows}
        for v in self.variants:
            flag = "REGRESSION" if deltas[v] < -tolerance else ""
            cells = [v, means[v]["label"], *(fmt(per[(v, i)]["psnr_y"]) for i in images)]
            cells += [fmt(means[v]["psnr_y"]), fmt(means[v]["ssim_y"]), f"{deltas[v]:+.{DECIMALS}f}", flag]
            lines.append("| " + " | ".join(cells) + " |")
        prov = self.provenance
        lines.append("")
        lines.append(f"manifest `{prov.get('manifest_hash', '?')[:16]}` · checkpoint `{prov.get('checkpoint_hash', '?')[:16]}` · seed {prov.get('seed', '?')}")
        return "\n".join(lines) + "\n"

    def regressions(self, baseline: str = BASELINE, tolerance: float = DEFAULT_TOLERANCE) -> list[str]:
        return [v for v, d in self.deltas(baseline).items() if d < -tolerance]


def merge_tables(tables: list[ResultsTable]) -> ResultsTable:
    """Union of the rows of several tables over the same benchmark."""
    if not tables:
        raise MergeError("nothing to merge")
    hashes = {t.provenance.get("manifest_hash") for t in tables}
    if len(hashes) != 1:
        raise MergeError(f"refusing to merge results from different benchmarks: {sorted(map(str, hashes))}")
    rows, seen, order = [], {}, []
    for t in tables:
        for r in t.rows:
            key = (r["variant"], r["image"])
            if key in seen:
                if seen[key] != r:
                    raise MergeError(f"conflicting results for {key}")
                continue
            seen[key] = r
            rows.append(r)
        order += [v for v in t.variants if v not in order]
    prov = dict(tables[0].provenance)
    prov["variant_order"] = order
    if len(tables) > 1:
        prov["merged_from"] = len(tables)
    merged = ResultsTable(rows, prov)
    merged.check_complete()
    return merged


# ---------------------------------------------------------------------------
# Sweep execution


def _run_job(job: dict) -> dict:
    torch.set_num_threads(1)
    try:
        manifest = load_manifest(job["manifest"])
        entry = next(e for e in manifest.entries if e["id"] == job["image"])
        lr = read_png(manifest.resolve(entry["lr_path"]))
        hr = read_png(manifest.resolve(entry["hr_path"]))
        cfg = AdaptationConfig.from_dict(job["config"])
        ckpt = Checkpoint.from_bytes(Path(job["ckpt"]).read_bytes())
        _, report = adapt(lr, ckpt, cfg, hr)
    except Exception as exc:  # identify the failing job, then abort the sweep
        raise SweepError(job["variant"], job["image"], exc) from None
    return {
        "variant": job["variant"],
        "label": job["label"],
        "image": job["image"],
        "psnr_y": report.metrics["psnr_y"],
        "ssim_y": report.metrics["ssim_y"],
        "seed": cfg.seed,
        "report_hash": report.digest(),
    }


def plan_jobs(ckpt_path, manifest_path, matrix: VariantMatrix, seed: int) -> list[dict]:
    manifest = load_manifest(manifest_path)
    jobs = []
    for entry in manifest.entries:
        for name in matrix.names:
            cfg = matrix.config(name)
            cfg.seed = job_seed(seed, entry["id"], name)
            jobs.append(
                {
                    "ckpt": str(ckpt_path),
                    "manifest": str(manifest_path),
                    "image": entry["id"],
                    "variant": name,
                    "label": toggle_label(cfg),
                    "config": cfg.to_dict(),
                }
            )
    return jobs


def run_sweep(ckpt_path, manifest_path, matrix: VariantMatrix, seed: int = 0, workers: int = 1, progress=None) -> ResultsTable:
    """Run every variant on every benchmark image and collect a :class:`ResultsTable`.

    Jobs run in a process pool when ``workers > 1``; the result does not depend on
    the worker count.  The first failing job aborts the sweep with :class:`SweepError`.
    """
    matrix = matrix.with_baseline()
    ckpt = read_checkpoint(ckpt_path, kind="gup")
    manifest: BenchmarkManifest = load_manifest(manifest_path)
    jobs = plan_jobs(ckpt_path, manifest_path, matrix, seed)
    rows = []
    if workers <= 1:
        for job in jobs:
            rows.append(_run_job(job))
            if progress:
                progress(rows[-1])
    else:
        ctx = mp.get_context("spawn")
        with ctx.Pool(workers) as pool:
            try:
                for row in pool.imap_unordered(_run_job, jobs):
                    rows.append(row)
                    if progress:
                        progress(row)
            except SweepError:
                pool.terminate()
                raise
    provenance = {
        "manifest_hash": manifest.digest(),
        "checkpoint_hash": ckpt.digest(),
        "seed": int(seed),
        "variant_order": matrix.names,
        "configs": {n: matrix.config(n).digest() for n in matrix.names},
    }
    table = ResultsTable(rows, provenance)
    table.check_complete()
    return table


def write_table(table: ResultsTable, out_dir, baseline: str = BASELINE, tolerance: float = DEFAULT_TOLERANCE) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "json": out / "results.json", "md": out / "table.md"}
    paths["csv"].write_bytes(table.to_csv().encode())
    paths["json"].write_text(table.to_json())
    paths["md"].write_text(table.to_markdown(baseline, tolerance))
    return paths
