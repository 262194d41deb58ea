"""Command-line UI: gen-data, pretrain, finetune, eval, report, ablate.

Exit codes: 0 success, 1 bad usage/validation, 2 runtime failure. Flags
override values from --config (JSON), which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ablation import GridSpec, run_ablation
from .datasets import (
    SynthSpec,
    corrupt_to_partial_labels,
    generate_synthetic_dataset,
    load_candidate_sets,
    load_image_folder,
    save_dataset,
    PartialSample,
)
from .errors import ConfigurationError, PllferError, UsageError
from .hog import HOGParams
from .metrics import (
    collapse_only_report,
    disambiguation_report,
    evaluate,
    export_confusion_plot,
)
from .model import DecoderConfig, EncoderConfig
from .objectives import RevisionConfig
from .store import ConfidenceStore
from .trainer import TrainConfig, finetune, load_finetuned_model, pretrain


class _UsageExit(UsageError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags as exit code 1 instead of 2."""

    def error(self, message):
        raise _UsageExit(f"{message}\n{self.format_usage()}")


@dataclass
class AppConfig:
    dataset: SynthSpec = field(default_factory=SynthSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    hog: HOGParams = field(default_factory=HOGParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    q: float = 0.3


def _merge_config(args) -> AppConfig:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"--config file not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))

    dataset = dict(raw.get("dataset", {}))
    encoder = dict(raw.get("encoder", {}))
    decoder = dict(raw.get("decoder", {}))
    hog = dict(raw.get("hog", {}))
    train = dict(raw.get("train", {}))
    revision = dict(train.pop("revision", {}))
    q = raw.get("q", 0.3)

    if args.seed is not None:
        dataset["seed"] = args.seed
        train["seed"] = args.seed
    if getattr(args, "q", None) is not None:
        q = args.q
    overrides = {
        "mask_ratio": args.mask_ratio,
        "tau": args.tau,
        "lambda_uniform": args.lambda_uniform,
        "lambda_align": args.lambda_align,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
    }
    for key, val in overrides.items():
        if val is not None:
            train[key] = val
    if args.threshold is not None:
        revision["threshold"] = args.threshold
    if args.k_top is not None:
        revision["k_top"] = args.k_top

    if "betas" in train:
        train["betas"] = tuple(train["betas"])
    train["revision"] = RevisionConfig(**revision)
    try:
        cfg = AppConfig(
            dataset=SynthSpec(**dataset),
            encoder=EncoderConfig(**encoder),
            decoder=DecoderConfig(**decoder),
            hog=HOGParams(**hog),
            train=TrainConfig(**train),
            q=float(q),
        )
    except TypeError as e:
        raise ConfigurationError(f"bad config key: {e}") from e
    if cfg.encoder.image_size != cfg.dataset.image_size:
        cfg = AppConfig(
            dataset=cfg.dataset,
            encoder=EncoderConfig(
                image_size=cfg.dataset.image_size,
                patch_size=cfg.encoder.patch_size,
                embed_dim=cfg.encoder.embed_dim,
                depth=cfg.encoder.depth,
                heads=cfg.encoder.heads,
                mlp_ratio=cfg.encoder.mlp_ratio,
            ),
            decoder=cfg.decoder,
            hog=cfg.hog,
            train=cfg.train,
            q=cfg.q,
        )
    return cfg


def _require(args, flag: str):
    value = getattr(args, flag.lstrip("-").replace("-", "_"))
    if value is None:
        raise ConfigurationError(f"missing required flag {flag}")
    return value


def _load_split(data_dir: Path, split: str, cfg: AppConfig, require_labels: bool):
    root = data_dir / split
    if not root.is_dir():
        raise ConfigurationError(f"--data has no '{split}/' directory: {root}")
    samples = load_image_folder(
        root, image_size=cfg.dataset.image_size, num_classes=cfg.decoder.num_classes
    )
    if require_labels and any(s.true_label is None for s in samples):
        raise ConfigurationError(f"{split} manifest must carry labels for this command")
    return samples


def _load_train_partials(data_dir: Path, cfg: AppConfig) -> list[PartialSample]:
    samples = _load_split(data_dir, "train", cfg, require_labels=False)
    cand_sets = load_candidate_sets(data_dir / "train" / "manifest.jsonl",
                                    cfg.decoder.num_classes)
    partials = []
    for s, y in zip(samples, cand_sets):
        if y is None:
            if s.true_label is None:
                raise ConfigurationError(
                    "train manifest rows need either 'candidates' or 'label'"
                )
            y = np.zeros(cfg.decoder.num_classes, dtype=np.int8)
            y[s.true_label] = 1
        partials.append(PartialSample(sample=s, candidates=y))
    return partials


def _cmd_gen_data(args) -> int:
    cfg = _merge_config(args)
    out = Path(_require(args, "--out"))
    train, test = generate_synthetic_dataset(cfg.dataset)
    partials = corrupt_to_partial_labels(
        train, cfg.q, seed=cfg.dataset.seed, num_classes=cfg.dataset.num_classes
    )
    save_dataset(train, out / "train", candidates=[p.candidates for p in partials])
    save_dataset(test, out / "test")
    print(f"wrote {len(train)} train / {len(test)} test samples under {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _merge_config(args)
    data_dir = Path(_require(args, "--data"))
    out = Path(_require(args, "--out"))
    samples = _load_split(data_dir, "train", cfg, require_labels=False)
    if args.dump_hog:
        _dump_hog_csv(samples[0], cfg, Path(args.dump_hog))
        print(f"descriptor dump: {args.dump_hog}")
    result = pretrain(samples, cfg.encoder, cfg.hog, cfg.train, out_dir=out)
    print(f"pretrain checkpoint: {result.checkpoint_path}")
    print(f"final mim_loss: {result.record.rows[-1]['mim_loss']:.6f}")
    return 0


def _dump_hog_csv(sample, cfg: AppConfig, path: Path) -> None:
    """Per-patch descriptor rows of one image, for eyeballing targets."""
    from .hog import hog_targets_for_patches

    targets = hog_targets_for_patches(sample.image, cfg.encoder.patch_size, cfg.hog)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as f:
        f.write(",".join(["patch"] + [f"d{i}" for i in range(targets.shape[1])]) + "\n")
        for i, row in enumerate(targets):
            f.write(",".join([str(i)] + [f"{v:.8f}" for v in row]) + "\n")


def _cmd_finetune(args) -> int:
    cfg = _merge_config(args)
    data_dir = Path(_require(args, "--data"))
    out = Path(_require(args, "--out"))
    partials = _load_train_partials(data_dir, cfg)
    test = None
    if (data_dir / "test").is_dir():
        test = _load_split(data_dir, "test", cfg, require_labels=True)
    checkpoint = None
    if not args.no_pretrain and args.checkpoint:
        checkpoint = args.checkpoint
    result = finetune(
        partials, cfg.encoder, cfg.decoder, cfg.train, test_samples=test,
        checkpoint_path=checkpoint, use_decoder=not args.no_decoder, out_dir=out,
    )
    np.save(out / "phi_final.npy", result.phi_final)
    if test:
        metrics = evaluate(result.model, test, cfg.train.batch_size)
        metrics.save(out / "metrics.json")
        print(f"test accuracy: {metrics.accuracy:.4f}")
    print(f"finetune checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _merge_config(args)
    data_dir = Path(_require(args, "--data"))
    ckpt = _require(args, "--checkpoint")
    out = Path(_require(args, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    model = load_finetuned_model(ckpt)
    test = _load_split(data_dir, "test", cfg, require_labels=True)
    metrics = evaluate(model, test, cfg.train.batch_size)
    metrics.save(out / "metrics.json")
    export_confusion_plot(metrics, out / "confusion.png")
    print(f"accuracy: {metrics.accuracy:.4f}")
    print(f"mean class accuracy: {metrics.mean_class_accuracy:.4f}")
    return 0


def _cmd_report(args) -> int:
    cfg = _merge_config(args)
    data_dir = Path(_require(args, "--data"))
    run_dir = Path(_require(args, "--run"))
    out = Path(_require(args, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    partials = _load_train_partials(data_dir, cfg)
    store = ConfidenceStore.from_partial_samples(partials, cfg.decoder.num_classes)
    store.load_snapshot(run_dir / "confidence_final.jsonl")
    have_truth = all(p.sample.true_label is not None for p in partials)
    phi_path = run_dir / "phi_final.npy"
    if have_truth and phi_path.is_file():
        report = disambiguation_report(store, partials, np.load(phi_path))
        report.save(out / "disambiguation.json")
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        payload = collapse_only_report(store)
        (out / "disambiguation.json").write_text(
            json.dumps(payload, sort_keys=True), encoding="ascii"
        )
        print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    grid_path = _require(args, "--config")
    out = Path(_require(args, "--out"))
    spec = GridSpec.from_json(grid_path)
    runs, summary = run_ablation(spec, out)
    print(f"{len(runs)} runs, {len(summary)} summary rows -> {out / 'summary.csv'}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "ablate": _cmd_ablate,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="pllfer", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--data", default=None, help="dataset directory (train/, test/)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--config", default=None, help="JSON config file; flags override it")
        p.add_argument("--checkpoint", default=None, help="checkpoint path")
        p.add_argument("--run", default=None, help="finetune run directory (report)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--q", type=float, default=None, help="flip-in probability (gen-data)")
        p.add_argument("--mask-ratio", type=float, default=None)
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--k-top", type=int, default=None)
        p.add_argument("--lambda-uniform", type=float, default=None)
        p.add_argument("--lambda-align", type=float, default=None)
        p.add_argument("--no-pretrain", action="store_true")
        p.add_argument("--no-decoder", action="store_true")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--dump-hog", default=None,
                       help="write one image's patch descriptors to this CSV (pretrain)")
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise _UsageExit(parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PllferError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # anything unexpected is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())
