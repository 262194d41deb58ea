"""Oriented-gradient histograms used as regression targets for masked pretraining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError


@dataclass(frozen=True)
class HOGParams:
    cell_size: int = 4
    bins: int = 9
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.cell_size < 2:
            raise ConfigurationError(f"cell_size must be >= 2, got {self.cell_size}")
        if self.bins < 2:
            raise ConfigurationError(f"bins must be >= 2, got {self.bins}")
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")


def _gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicated borders; returns (gx, gy)."""
    padded = np.pad(image, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gx, gy


def hog_descriptor(image: np.ndarray, params: HOGParams = HOGParams()) -> np.ndarray:
    """Per-cell orientation histograms of shape (H/cell, W/cell, bins).

    Unsigned orientation in [0, pi) is split into `bins` intervals with a node
    at the start of each interval; a gradient's magnitude is shared linearly
    between the two nearest nodes (wrapping at pi). Each cell's histogram is
    L2-normalized with guard epsilon, so constant regions stay exactly zero.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValidationError(f"expected a 2-D grayscale image, got shape {image.shape}")
    h, w = image.shape
    cs = params.cell_size
    if h % cs != 0 or w % cs != 0:
        raise ValidationError(f"image size {h}x{w} not divisible by cell_size {cs}")

    gx, gy = _gradients(image)
    magnitude = np.hypot(gx, gy)
    orientation = np.mod(np.arctan2(gy, gx), np.pi)  # unsigned, in [0, pi)

    bin_width = np.pi / params.bins
    position = orientation / bin_width
    lower = np.floor(position).astype(np.int64)
    frac = position - lower
    lower = np.mod(lower, params.bins)  # arctan2 rounding can land exactly on pi
    upper = np.mod(lower + 1, params.bins)

    n_cy, n_cx = h // cs, w // cs
    cell_y = np.repeat(np.arange(n_cy), cs)[:, None]
    cell_x = np.repeat(np.arange(n_cx), cs)[None, :]
    flat_cell = np.broadcast_to(cell_y * n_cx + cell_x, (h, w)).ravel()

    hist = np.zeros((n_cy * n_cx, params.bins))
    np.add.at(hist, (flat_cell, lower.ravel()), (magnitude * (1.0 - frac)).ravel())
    np.add.at(hist, (flat_cell, upper.ravel()), (magnitude * frac).ravel())
    hist = hist.reshape(n_cy, n_cx, params.bins)

    norms = np.sqrt(np.sum(hist**2, axis=-1, keepdims=True) + params.epsilon**2)
    return hist / norms


def hog_targets_for_patches(
    image: np.ndarray, patch_size: int, params: HOGParams = HOGParams()
) -> np.ndarray:
    """Regroup the cell grid so each patch owns its cells' concatenated histograms.

    Returns shape (num_patches, cells_per_patch**2 * bins) with patches in
    row-major order, matching the encoder's patch order.
    """
    if patch_size % params.cell_size != 0:
        raise ConfigurationError(
            f"patch_size {patch_size} not divisible by cell_size {params.cell_size}"
        )
    h, w = np.asarray(image).shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ConfigurationError(f"image size {h}x{w} not divisible by patch_size {patch_size}")

    grid = hog_descriptor(image, params)  # (n_cy, n_cx, bins)
    cpp = patch_size // params.cell_size
    n_py, n_px = h // patch_size, w // patch_size
    # (n_py, cpp, n_px, cpp, bins) -> (n_py, n_px, cpp, cpp, bins)
    per_patch = grid.reshape(n_py, cpp, n_px, cpp, params.bins).transpose(0, 2, 1, 3, 4)
    return per_patch.reshape(n_py * n_px, cpp * cpp * params.bins)


def descriptor_length(patch_size: int, params: HOGParams = HOGParams()) -> int:
    cpp = patch_size // params.cell_size
    return cpp * cpp * params.bins
