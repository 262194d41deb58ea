"""Patch masking and the masked-prediction objective for pretraining.

Masked patches are swapped for a shared learned token at the encoder input;
a linear head regresses each masked position's oriented-gradient descriptor.
Only the encoder survives into fine-tuning, the head is throwaway.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, ValidationError
from .hog import HOGParams, descriptor_length, hog_targets_for_patches
from .model import Encoder, EncoderConfig


@dataclass(frozen=True)
class PatchMask:
    flags: np.ndarray  # bool, True = masked
    ratio: float

    def __post_init__(self):
        object.__setattr__(self, "flags", np.asarray(self.flags, dtype=bool))
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigurationError(f"mask ratio must be in [0,1), got {self.ratio}")
        expected = math.floor(self.ratio * self.flags.size)
        if int(self.flags.sum()) != expected:
            raise ValidationError(
                f"mask has {int(self.flags.sum())} set flags, expected {expected}"
            )

    @property
    def num_masked(self) -> int:
        return int(self.flags.sum())


def sample_mask(num_patches: int, ratio: float, seed: int) -> PatchMask:
    """Uniformly random mask over exactly floor(ratio * N) patches."""
    if num_patches < 1:
        raise ConfigurationError(f"num_patches must be >= 1, got {num_patches}")
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"mask ratio must be in [0,1), got {ratio}")
    count = math.floor(ratio * num_patches)
    rng = np.random.default_rng(seed)
    flags = np.zeros(num_patches, dtype=bool)
    flags[rng.choice(num_patches, size=count, replace=False)] = True
    return PatchMask(flags=flags, ratio=ratio)


def mim_loss(
    predictions: torch.Tensor, targets: torch.Tensor, mask: PatchMask | np.ndarray | torch.Tensor
) -> torch.Tensor:
    """Mean squared error over masked patches and descriptor dims only.

    Accepts (N, D) or (B, N, D) inputs; the mask may be a single length-N
    vector (shared across the batch) or a (B, N) matrix.
    """
    flags = mask.flags if isinstance(mask, PatchMask) else np.asarray(mask)
    m = torch.as_tensor(np.asarray(flags), dtype=torch.bool)
    if predictions.shape != targets.shape:
        raise ValidationError(
            f"predictions {tuple(predictions.shape)} != targets {tuple(targets.shape)}"
        )
    if m.shape[-1] != predictions.shape[-2]:
        raise ValidationError(
            f"mask length {m.shape[-1]} != patch count {predictions.shape[-2]}"
        )
    if predictions.ndim == 3 and m.ndim == 1:
        m = m.unsqueeze(0).expand(predictions.shape[0], -1)
    if int(m.sum()) == 0:
        raise ValidationError("mask selects zero patches; masked loss is undefined")
    diff = predictions[m] - targets[m]
    return diff.pow(2).mean()


class MaskedPretrainer(nn.Module):
    """Encoder plus the discardable per-patch descriptor regression head."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        hog_params: HOGParams = HOGParams(),
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if encoder_config.patch_size % hog_params.cell_size != 0:
            raise ConfigurationError(
                f"patch_size {encoder_config.patch_size} not divisible by "
                f"cell_size {hog_params.cell_size}"
            )
        self.encoder_config = encoder_config
        self.hog_params = hog_params
        self.target_dim = descriptor_length(encoder_config.patch_size, hog_params)
        self.encoder = Encoder(encoder_config, dtype=dtype)
        self.head = nn.Linear(encoder_config.embed_dim, self.target_dim).to(dtype)

    def forward(self, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        tokens = self.encoder(images, mask=masks)
        return self.head(tokens)


def hog_targets_batch(
    images: np.ndarray, patch_size: int, params: HOGParams
) -> np.ndarray:
    """Stack per-image patch descriptor targets: (B, N, D)."""
    return np.stack([hog_targets_for_patches(img, patch_size, params) for img in images])


def pretrain_batch_forward(
    model: MaskedPretrainer,
    images: torch.Tensor,
    masks: PatchMask | np.ndarray | torch.Tensor,
    hog_params: HOGParams | None = None,
    targets: torch.Tensor | None = None,
) -> torch.Tensor:
    """Masked descriptor-regression loss for one batch.

    Targets are computed from the unmasked originals unless precomputed ones
    are supplied (the trainer caches them, since images never change).
    """
    params = hog_params if hog_params is not None else model.hog_params
    if images.ndim == 2:
        images = images.unsqueeze(0)
    if targets is None:
        t = hog_targets_batch(
            images.detach().cpu().numpy(), model.encoder_config.patch_size, params
        )
        targets = torch.as_tensor(t, dtype=images.dtype)
    flags = masks.flags if isinstance(masks, PatchMask) else masks
    predictions = model(images, torch.as_tensor(np.asarray(flags), dtype=torch.bool))
    return mim_loss(predictions, targets, flags)
