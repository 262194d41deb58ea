"""Ablation grid driver: run every (cell, seed) combination, summarize to CSV."""

from __future__ import annotations

import csv
import itertools
import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import SynthSpec, corrupt_to_partial_labels, generate_synthetic_dataset
from .errors import ConfigurationError
from .hog import HOGParams
from .metrics import disambiguation_report, evaluate
from .model import DecoderConfig, EncoderConfig
from .objectives import RevisionConfig
from .trainer import TrainConfig, finetune, pretrain

# grid axes, in the order they appear in every CSV row
CELL_PARAMS = (
    "q", "threshold", "tau", "k_top", "pretrain", "decoder", "lambda_uniform", "lambda_align",
)
RUNS_HEADER = CELL_PARAMS + (
    "seed", "accuracy", "confidence_correctness", "top2_coverage", "wall_s",
)
SUMMARY_HEADER = CELL_PARAMS + (
    "seeds",
    "accuracy_mean", "accuracy_std",
    "confidence_correctness_mean", "confidence_correctness_std",
    "top2_coverage_mean", "top2_coverage_std",
    "wall_s_mean",
)

_DEFAULT_CELL = {
    "q": 0.3, "threshold": 0.5, "tau": 0.001, "k_top": 2,
    "pretrain": False, "decoder": True, "lambda_uniform": 1.0, "lambda_align": 1.0,
}


@dataclass
class GridSpec:
    dataset: SynthSpec = field(default_factory=SynthSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5))
    hog: HOGParams = field(default_factory=HOGParams)
    pretrain_epochs: int = 5
    seeds: tuple[int, ...] = (1, 2, 3)
    grid: dict = field(default_factory=dict)  # axis name -> list of values

    def __post_init__(self):
        unknown = set(self.grid) - set(CELL_PARAMS)
        if unknown:
            raise ConfigurationError(f"unknown grid axes: {sorted(unknown)}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")

    def cells(self) -> list[dict]:
        axes = {k: list(v) for k, v in self.grid.items()}
        names = [k for k in CELL_PARAMS if k in axes]
        combos = itertools.product(*(axes[k] for k in names)) if names else [()]
        out = []
        for combo in combos:
            cell = dict(_DEFAULT_CELL)
            cell.update(dict(zip(names, combo)))
            out.append(cell)
        return out

    @classmethod
    def from_json(cls, path: str | Path) -> "GridSpec":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        kwargs = {}
        if "dataset" in raw:
            kwargs["dataset"] = SynthSpec(**raw["dataset"])
        if "encoder" in raw:
            kwargs["encoder"] = EncoderConfig(**raw["encoder"])
        if "decoder" in raw:
            kwargs["decoder"] = DecoderConfig(**raw["decoder"])
        if "train" in raw:
            t = dict(raw["train"])
            if "revision" in t:
                t["revision"] = RevisionConfig(**t["revision"])
            if "betas" in t:
                t["betas"] = tuple(t["betas"])
            kwargs["train"] = TrainConfig(**t)
        if "hog" in raw:
            kwargs["hog"] = HOGParams(**raw["hog"])
        for key in ("pretrain_epochs",):
            if key in raw:
                kwargs[key] = raw[key]
        if "seeds" in raw:
            kwargs["seeds"] = tuple(raw["seeds"])
        kwargs["grid"] = raw.get("grid", {})
        return cls(**kwargs)


def _run_cell(
    cell: dict, seed: int, spec: GridSpec, datasets: dict, pretrain_cache: dict,
    cache_dir: Path,
) -> dict:
    start = time.perf_counter()
    data_key = seed
    if data_key not in datasets:
        ds = SynthSpec(
            num_classes=spec.dataset.num_classes,
            train_count=spec.dataset.train_count,
            test_count=spec.dataset.test_count,
            image_size=spec.dataset.image_size,
            noise_sigma=spec.dataset.noise_sigma,
            seed=seed,
            imbalance=spec.dataset.imbalance,
        )
        datasets[data_key] = generate_synthetic_dataset(ds)
    train_samples, test_samples = datasets[data_key]
    partials = corrupt_to_partial_labels(
        train_samples, float(cell["q"]), seed=seed, num_classes=spec.dataset.num_classes
    )

    checkpoint = None
    if cell["pretrain"]:
        if seed not in pretrain_cache:
            pre_cfg = TrainConfig(
                epochs=spec.pretrain_epochs, batch_size=spec.train.batch_size,
                base_lr=spec.train.base_lr, weight_decay=spec.train.weight_decay,
                betas=spec.train.betas, seed=seed, mask_ratio=spec.train.mask_ratio,
            )
            result = pretrain(
                train_samples, spec.encoder, spec.hog, pre_cfg,
                out_dir=cache_dir / f"pretrain_seed{seed}",
            )
            pretrain_cache[seed] = result.checkpoint_path
        checkpoint = pretrain_cache[seed]

    cfg = TrainConfig(
        epochs=spec.train.epochs, batch_size=spec.train.batch_size,
        base_lr=spec.train.base_lr, weight_decay=spec.train.weight_decay,
        betas=spec.train.betas, seed=seed,
        lambda_uniform=float(cell["lambda_uniform"]), lambda_align=float(cell["lambda_align"]),
        revision=RevisionConfig(threshold=float(cell["threshold"]), k_top=int(cell["k_top"])),
        warmup_epochs=spec.train.warmup_epochs, tau=float(cell["tau"]),
        mask_ratio=spec.train.mask_ratio,
    )
    result = finetune(
        partials, spec.encoder, spec.decoder, cfg, test_samples=test_samples,
        checkpoint_path=checkpoint, use_decoder=bool(cell["decoder"]),
    )
    metrics = evaluate(result.model, test_samples, cfg.batch_size)
    report = disambiguation_report(result.store, partials, result.phi_final)
    return {
        **cell,
        "seed": seed,
        "accuracy": metrics.accuracy,
        "confidence_correctness": report.confidence_correctness,
        "top2_coverage": report.top2_coverage,
        "wall_s": time.perf_counter() - start,
    }


def run_ablation(spec: GridSpec, out_dir: str | Path) -> tuple[list[dict], list[dict]]:
    """Run the whole grid; returns (run rows, summary rows) and writes both CSVs.

    A failing cell is recorded in failures.csv and the remaining cells proceed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "cache"
    cache_dir.mkdir(exist_ok=True)

    datasets: dict = {}
    pretrain_cache: dict = {}
    runs: list[dict] = []
    failures: list[dict] = []
    for cell in spec.cells():
        for seed in spec.seeds:
            try:
                runs.append(_run_cell(cell, seed, spec, datasets, pretrain_cache, cache_dir))
            except Exception as e:  # record and continue with the rest of the grid
                failures.append(
                    {**cell, "seed": seed, "error": f"{type(e).__name__}: {e}",
                     "trace": traceback.format_exc()}
                )

    summary: list[dict] = []
    for cell in spec.cells():
        cell_runs = [r for r in runs if all(r[k] == cell[k] for k in CELL_PARAMS)]
        if not cell_runs:
            continue
        row = dict(cell)
        row["seeds"] = len(cell_runs)
        for metric in ("accuracy", "confidence_correctness", "top2_coverage"):
            vals = np.asarray([r[metric] for r in cell_runs])
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_std"] = float(vals.std())
        row["wall_s_mean"] = float(np.mean([r["wall_s"] for r in cell_runs]))
        summary.append(row)

    _write_csv(out_dir / "runs.csv", RUNS_HEADER, runs)
    _write_csv(out_dir / "summary.csv", SUMMARY_HEADER, summary)
    if failures:
        _write_csv(
            out_dir / "failures.csv", CELL_PARAMS + ("seed", "error", "trace"), failures
        )
    return runs, summary


def _write_csv(path: Path, header: tuple[str, ...], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(header))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in header})


_BOOL = {"True": True, "False": False}


def _parse_value(key: str, value: str):
    if value is None or value == "":
        return None
    if key in ("pretrain", "decoder"):
        return _BOOL.get(value, value)
    if key in ("k_top", "seed", "seeds"):
        return int(value)
    if key in ("error", "trace"):
        return value
    return float(value)


def load_runs_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            {k: _parse_value(k, v) for k, v in row.items()} for row in csv.DictReader(f)
        ]
