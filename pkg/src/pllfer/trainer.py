"""Pretraining and fine-tuning loops, checkpoint I/O, and run records.

Fine-tuning follows the batch order: forward to logits, uniformity and
anchor-alignment terms on the live queries, confidence revision against the
current sigmoid responses, then the partial-label loss against the
just-revised confidences, then the parameter update.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasets import PartialSample, Sample
from .errors import CheckpointError, ConfigurationError, NumericError, ValidationError
from .hog import HOGParams
from .metrics import EpochSnapshot, evaluate
from .mim import MaskedPretrainer, hog_targets_batch, pretrain_batch_forward, sample_mask
from .model import (
    DecoderConfig,
    Encoder,
    EncoderConfig,
    ExpressionModel,
    classifier_probs,
    confidence_response,
)
from .objectives import (
    AnchorSet,
    RevisionConfig,
    anchor_alignment_loss,
    optimal_anchor_positions,
    pll_loss,
    revise_confidence_batch,
    total_finetune_loss,
    uniform_loss,
)
from .store import ConfidenceStore

SEED_ENV_VAR = "PLLFER_SEED"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-4
    weight_decay: float = 5e-2
    betas: tuple[float, float] = (0.9, 0.95)
    seed: int = 0
    lambda_uniform: float = 1.0
    lambda_align: float = 1.0
    revision: RevisionConfig = field(default_factory=RevisionConfig)
    warmup_epochs: int | None = None  # None -> 5% of epochs, rounded up
    tau: float = 0.001
    mask_ratio: float = 0.4
    finetune_mask_ratio: float = 0.0  # masking during fine-tuning, off by default
    anchor_steps: int = 600
    anchor_restarts: int = 8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0 or not self.weight_decay >= 0:
            raise ConfigurationError("base_lr must be > 0 and weight_decay >= 0")
        if self.lambda_uniform < 0 or self.lambda_align < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")

    @property
    def resolved_warmup_epochs(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return math.ceil(0.05 * self.epochs)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "seed": self.seed,
            "lambda_uniform": self.lambda_uniform,
            "lambda_align": self.lambda_align,
            "revision": {"threshold": self.revision.threshold, "k_top": self.revision.k_top},
            "warmup_epochs": self.warmup_epochs,
            "tau": self.tau,
            "mask_ratio": self.mask_ratio,
            "finetune_mask_ratio": self.finetune_mask_ratio,
            "anchor_steps": self.anchor_steps,
            "anchor_restarts": self.anchor_restarts,
        }


def resolve_seed(config: TrainConfig) -> int:
    """Config seed, unless the PLLFER_SEED environment variable overrides it."""
    env = os.environ.get(SEED_ENV_VAR)
    if env is None:
        return config.seed
    try:
        return int(env)
    except ValueError as e:
        raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from e


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("ascii")).hexdigest()


def _lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup then cosine decay, per optimizer step."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    remaining = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / remaining)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo : lo + batch_size]


# ---------------------------------------------------------------------------
# checkpoint I/O: raw little-endian blob + JSON sidecar
# ---------------------------------------------------------------------------


def save_checkpoint(state: dict, metadata: dict, path: str | Path) -> Path:
    """Write tensors as one deterministic binary blob plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    chunks = []
    for name in sorted(state):
        arr = state[name]
        arr = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
        raw = np.ascontiguousarray(arr).tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    sidecar = dict(metadata)
    sidecar["tensors"] = index
    sidecar["blob_bytes"] = offset
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True), encoding="ascii")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Read a checkpoint pair back into (name -> ndarray, metadata)."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise CheckpointError(f"checkpoint not found: {path} (+ .json sidecar)")
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        index = sidecar.pop("tensors")
        expected = sidecar.pop("blob_bytes")
    except (json.JSONDecodeError, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint sidecar: {sidecar_path} ({e})") from e
    blob = path.read_bytes()
    if len(blob) != expected:
        raise CheckpointError(
            f"corrupt checkpoint blob: {path} has {len(blob)} bytes, sidecar says {expected}"
        )
    state = {}
    for name, meta in index.items():
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"corrupt checkpoint blob: {path} (tensor {name} out of range)")
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(meta["shape"]).copy()
        state[name] = arr
    return state, sidecar


def _module_state_arrays(module: torch.nn.Module, prefix: str = "model.") -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def _load_module_state(module: torch.nn.Module, state: dict, prefix: str = "model.") -> None:
    wanted = module.state_dict()
    tensors = {}
    for k, ref in wanted.items():
        key = prefix + k
        if key not in state:
            raise CheckpointError(f"checkpoint is missing tensor {key}")
        arr = state[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"checkpoint tensor {key} has shape {tuple(arr.shape)}, expected "
                f"{tuple(ref.shape)}"
            )
        tensors[k] = torch.as_tensor(arr, dtype=ref.dtype)
    module.load_state_dict(tensors)


def _optimizer_state_arrays(optimizer: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, group_state in optimizer.state_dict()["state"].items():
        for key, val in group_state.items():
            if isinstance(val, torch.Tensor):
                out[f"optim.{idx}.{key}"] = val
    return out


def _load_optimizer_state(optimizer: torch.optim.Optimizer, state: dict) -> None:
    sd = optimizer.state_dict()
    new_state = {}
    for idx, _ in enumerate(sd["param_groups"][0]["params"]):
        entry = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            blob_key = f"optim.{idx}.{key}"
            if blob_key in state:
                arr = state[blob_key]
                entry[key] = torch.as_tensor(arr)
        if entry:
            new_state[idx] = entry
    sd["state"] = new_state
    optimizer.load_state_dict(sd)


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="ascii") as f:
            for row in self.rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")


def _run_id(*parts) -> str:
    return hashlib.sha256("|".join(str(p) for p in parts).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: MaskedPretrainer
    record: RunRecord
    checkpoint_path: Path | None = None


def _pretrain_metadata(
    encoder_config: EncoderConfig, hog_params: HOGParams, config: TrainConfig, epoch: int
) -> dict:
    enc = encoder_config.to_dict()
    return {
        "stage": "pretrain",
        "mask_ratio": config.mask_ratio,
        "hog": {
            "cell_size": hog_params.cell_size,
            "bins": hog_params.bins,
            "epsilon": hog_params.epsilon,
        },
        "encoder_config": enc,
        "config_hash": config_hash(enc),
        "completed_epochs": epoch,
        "discardable": ["model.head.weight", "model.head.bias"],
    }


def pretrain(
    samples: list[Sample],
    encoder_config: EncoderConfig,
    hog_params: HOGParams = HOGParams(),
    config: TrainConfig = TrainConfig(epochs=2),
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> PretrainResult:
    """Masked descriptor-regression pretraining over the sample list.

    Deterministic per seed: shuffling and mask sampling are derived from
    (seed, epoch), and AdamW state rides along in checkpoints so a resumed
    run continues exactly where the saved one stopped.
    """
    if not samples:
        raise ValidationError("pretrain requires a non-empty dataset")
    if not 0.0 < config.mask_ratio < 1.0:
        raise ConfigurationError(f"pretrain mask_ratio must be in (0,1), got {config.mask_ratio}")
    seed = resolve_seed(config)
    torch.manual_seed(seed)
    model = MaskedPretrainer(encoder_config, hog_params)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.base_lr, betas=config.betas,
        weight_decay=config.weight_decay,
    )

    start_epoch = 0
    if resume_from is not None:
        state, meta = load_checkpoint(resume_from)
        if meta.get("config_hash") != config_hash(encoder_config.to_dict()):
            raise CheckpointError("resume checkpoint encoder config does not match")
        _load_module_state(model, state)
        _load_optimizer_state(optimizer, state)
        start_epoch = int(meta.get("completed_epochs", 0))

    images = np.stack([s.image for s in samples])
    targets_np = hog_targets_batch(images, encoder_config.patch_size, hog_params)
    images_t = torch.as_tensor(images, dtype=torch.float64)
    targets_t = torch.as_tensor(targets_np, dtype=torch.float64)

    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = config.resolved_warmup_epochs * steps_per_epoch

    record = RunRecord(
        run_id=_run_id("pretrain", seed, n, config_hash(config.to_dict())),
        config_hash=config_hash(config.to_dict()),
    )
    num_patches = encoder_config.num_patches
    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(seed, epoch)
        order = rng.permutation(n)
        mask_seeds = rng.integers(0, 2**63 - 1, size=n)
        epoch_start = time.perf_counter()
        losses = []
        for step, batch in enumerate(_batches(order, config.batch_size)):
            masks = np.stack(
                [sample_mask(num_patches, config.mask_ratio, int(mask_seeds[i])).flags
                 for i in batch]
            )
            loss = pretrain_batch_forward(
                model, images_t[batch], masks, hog_params, targets=targets_t[batch]
            )
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite pretrain loss at epoch {epoch} step {step}")
            optimizer.zero_grad()
            loss.backward()
            _set_lr(optimizer, _lr_at(epoch * steps_per_epoch + step, total_steps,
                                      warmup_steps, config.base_lr))
            optimizer.step()
            losses.append(loss.item())
        record.append(
            {
                "epoch": epoch,
                "mim_loss": float(np.mean(losses)),
                "wall_s": time.perf_counter() - epoch_start,
            }
        )

    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        state = {**_module_state_arrays(model), **_optimizer_state_arrays(optimizer)}
        metadata = _pretrain_metadata(encoder_config, hog_params, config, config.epochs)
        checkpoint_path = save_checkpoint(state, metadata, out_dir / "pretrain.ckpt")
        record.save(out_dir / "pretrain_record.jsonl")
    return PretrainResult(model=model, record=record, checkpoint_path=checkpoint_path)


def load_pretrained_encoder(encoder: Encoder, path: str | Path) -> None:
    """Copy pretrained encoder weights in; the descriptor head is left behind."""
    state, meta = load_checkpoint(path)
    expected = config_hash(encoder.config.to_dict())
    if meta.get("config_hash") != expected:
        raise CheckpointError(
            "pretrain checkpoint encoder config is incompatible with this encoder "
            f"(hash {meta.get('config_hash')!r} != {expected!r})"
        )
    encoder_state = {
        k[len("model.encoder."):]: v for k, v in state.items() if k.startswith("model.encoder.")
    }
    wanted = encoder.state_dict()
    tensors = {}
    for k, ref in wanted.items():
        if k not in encoder_state:
            raise CheckpointError(f"pretrain checkpoint is missing encoder tensor {k}")
        tensors[k] = torch.as_tensor(encoder_state[k], dtype=ref.dtype)
    encoder.load_state_dict(tensors)


# ---------------------------------------------------------------------------
# fine-tuning (the disambiguation loop)
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    model: ExpressionModel
    store: ConfidenceStore
    record: RunRecord
    anchors: AnchorSet | None
    phi_final: np.ndarray  # (n, K) sigmoid responses, rows in store id order
    history: list[EpochSnapshot] = field(default_factory=list)
    checkpoint_path: Path | None = None


def train_step(
    images: torch.Tensor,
    ids: list[int],
    model: ExpressionModel,
    store: ConfidenceStore,
    anchors: AnchorSet | None,
    config: TrainConfig,
    optimizer: torch.optim.Optimizer,
    lr: float,
    masks: torch.Tensor | None = None,
) -> dict:
    """One batch: forward, revise stored confidences, partial-label loss, update.

    Returns the loss breakdown {pll, uniform, alignment, total}; the store and
    model are updated in place.
    """
    logits = model(images, mask=masks)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits in train_step")
    zeta = classifier_probs(logits)
    phi = confidence_response(logits.detach()).numpy()

    c_prev = store.get_batch(ids)
    c_new = revise_confidence_batch(c_prev, phi, config.revision)
    store.set_batch(ids, c_new)

    pll = pll_loss(zeta, torch.as_tensor(c_new, dtype=zeta.dtype))
    queries = model.queries
    if queries is not None and anchors is not None:
        uniform = uniform_loss(queries, config.tau)
        alignment = anchor_alignment_loss(queries, anchors)
    else:
        uniform = torch.zeros((), dtype=zeta.dtype)
        alignment = torch.zeros((), dtype=zeta.dtype)
    total = total_finetune_loss(pll, uniform, alignment,
                                config.lambda_uniform, config.lambda_align)
    if not torch.isfinite(total):
        raise NumericError("non-finite fine-tune loss")

    optimizer.zero_grad()
    total.backward()
    _set_lr(optimizer, lr)
    optimizer.step()
    return {
        "pll": pll.item(),
        "uniform": uniform.item(),
        "alignment": alignment.item(),
        "total": total.item(),
    }


def _phi_over_samples(model: ExpressionModel, images: torch.Tensor, batch_size: int) -> np.ndarray:
    rows = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            rows.append(confidence_response(model(images[lo : lo + batch_size])).numpy())
    return np.concatenate(rows, axis=0)


def finetune(
    train_partials: list[PartialSample],
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig,
    config: TrainConfig = TrainConfig(),
    test_samples: list[Sample] | None = None,
    checkpoint_path: str | Path | None = None,
    use_decoder: bool = True,
    anchors: AnchorSet | None = None,
    out_dir: str | Path | None = None,
    track_history: bool = False,
    on_step=None,
    on_epoch=None,
) -> FinetuneResult:
    """The disambiguation training loop over a partially labeled dataset.

    Confidence vectors start uniform over each candidate set and are revised
    every batch before the loss sees them. The encoder starts from a
    pretraining checkpoint when one is given, randomly otherwise.
    """
    if not train_partials:
        raise ValidationError("finetune requires a non-empty dataset")
    k = decoder_config.num_classes
    for p in train_partials:
        if p.candidates.shape[0] != k:
            raise ValidationError(
                f"sample {p.sample.id}: candidate vector length {p.candidates.shape[0]} "
                f"does not match num_classes {k}"
            )
    seed = resolve_seed(config)
    torch.manual_seed(seed)
    model = ExpressionModel(encoder_config, decoder_config, use_decoder=use_decoder)
    if checkpoint_path is not None:
        load_pretrained_encoder(model.encoder, checkpoint_path)

    if use_decoder:
        if anchors is None:
            anchors = optimal_anchor_positions(
                k, encoder_config.embed_dim, config.tau,
                steps=config.anchor_steps, seed=seed, restarts=config.anchor_restarts,
            )
        if anchors.anchors.shape != (k, encoder_config.embed_dim):
            raise ValidationError(
                f"anchor set shape {anchors.anchors.shape} does not match "
                f"(K={k}, d={encoder_config.embed_dim})"
            )
        model.decoder.set_queries(anchors.anchors)
    else:
        anchors = None

    store = ConfidenceStore.from_partial_samples(train_partials, k)
    images_t = torch.as_tensor(
        np.stack([p.sample.image for p in train_partials]), dtype=torch.float64
    )
    ids = np.asarray([p.sample.id for p in train_partials])

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.base_lr, betas=config.betas,
        weight_decay=config.weight_decay,
    )
    n = len(train_partials)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = config.resolved_warmup_epochs * steps_per_epoch

    cfg_hash = config_hash(
        {"train": config.to_dict(), "encoder": encoder_config.to_dict(),
         "decoder": decoder_config.to_dict(), "use_decoder": use_decoder}
    )
    record = RunRecord(run_id=_run_id("finetune", seed, n, cfg_hash), config_hash=cfg_hash)
    history: list[EpochSnapshot] = []

    num_patches = encoder_config.num_patches
    for epoch in range(config.epochs):
        rng = _epoch_rng(seed, epoch)
        order = rng.permutation(n)
        mask_seeds = (
            rng.integers(0, 2**63 - 1, size=n) if config.finetune_mask_ratio > 0 else None
        )
        epoch_start = time.perf_counter()
        sums = {"pll": 0.0, "uniform": 0.0, "alignment": 0.0, "total": 0.0}
        for step, batch_rows in enumerate(_batches(order, config.batch_size)):
            batch_ids = [int(i) for i in ids[batch_rows]]
            lr = _lr_at(epoch * steps_per_epoch + step, total_steps, warmup_steps,
                        config.base_lr)
            masks = None
            if mask_seeds is not None:
                masks = torch.as_tensor(
                    np.stack(
                        [sample_mask(num_patches, config.finetune_mask_ratio,
                                     int(mask_seeds[i])).flags for i in batch_rows]
                    )
                )
            try:
                breakdown = train_step(
                    images_t[batch_rows], batch_ids, model, store, anchors, config,
                    optimizer, lr, masks=masks,
                )
            except NumericError as e:
                raise NumericError(f"epoch {epoch} step {step}: {e}") from e
            for key in sums:
                sums[key] += breakdown[key]
            if on_step is not None:
                on_step(epoch * steps_per_epoch + step, breakdown, store)

        stats = store.collapse_stats()
        row = {
            "epoch": epoch,
            "train_loss": sums["total"] / steps_per_epoch,
            "pll": sums["pll"] / steps_per_epoch,
            "uniform": sums["uniform"] / steps_per_epoch,
            "alignment": sums["alignment"] / steps_per_epoch,
            "fraction_one_hot": stats.fraction_one_hot,
            "mean_entropy": stats.mean_entropy,
            "wall_s": time.perf_counter() - epoch_start,
        }
        if test_samples:
            row["test_accuracy"] = evaluate(model, test_samples, config.batch_size).accuracy
        record.append(row)
        if track_history:
            history.append(
                EpochSnapshot(
                    epoch=epoch,
                    confidences=store.snapshot(),
                    phi=_phi_over_samples(model, images_t, config.batch_size),
                )
            )
        if on_epoch is not None:
            on_epoch(epoch, row, store, model)

    phi_final = (
        history[-1].phi if track_history
        else _phi_over_samples(model, images_t, config.batch_size)
    )

    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metadata = {
            "stage": "finetune",
            "K": k,
            "use_decoder": use_decoder,
            "encoder_config": encoder_config.to_dict(),
            "decoder_config": decoder_config.to_dict(),
            "config_hash": cfg_hash,
        }
        checkpoint = save_checkpoint(_module_state_arrays(model), metadata,
                                     out_dir / "finetune.ckpt")
        record.save(out_dir / "finetune_record.jsonl")
        store.save_snapshot(out_dir / "confidence_final.jsonl")
        if anchors is not None:
            anchors.save(out_dir / "anchors.json")
    return FinetuneResult(
        model=model, store=store, record=record, anchors=anchors,
        phi_final=phi_final, history=history, checkpoint_path=checkpoint,
    )


def load_finetuned_model(path: str | Path) -> ExpressionModel:
    """Rebuild a fine-tuned model from its checkpoint pair."""
    state, meta = load_checkpoint(path)
    if meta.get("stage") != "finetune":
        raise CheckpointError(f"{path} is not a finetune checkpoint")
    enc = EncoderConfig(**meta["encoder_config"])
    dec = DecoderConfig(**meta["decoder_config"])
    model = ExpressionModel(enc, dec, use_decoder=bool(meta.get("use_decoder", True)))
    _load_module_state(model, state)
    return model
