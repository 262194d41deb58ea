"""Training objectives: partial-label cross-entropy, hypersphere uniformity
with precomputed anchors, and the thresholded top-2 confidence revision rule.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, NumericError, ValidationError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class RevisionConfig:
    threshold: float = 0.5
    k_top: int = 2

    def __post_init__(self):
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigurationError(f"threshold must be in [0,1), got {self.threshold}")
        if self.k_top < 2:
            raise ConfigurationError(f"k_top must be >= 2, got {self.k_top}")


@dataclass
class AnchorSet:
    """K unit vectors on the d-sphere plus the temperature they were tuned for."""

    anchors: np.ndarray
    tau: float
    converged: bool = True
    residual_grad_norm: float = 0.0

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.anchors.ndim != 2 or self.anchors.shape[0] < 2:
            raise ValidationError(f"anchors must be (K>=2, d), got {self.anchors.shape}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        norms = np.linalg.norm(self.anchors, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValidationError("anchors must be unit vectors (within 1e-6)")

    @property
    def num_classes(self) -> int:
        return self.anchors.shape[0]

    def save(self, path: str | Path) -> None:
        payload = {
            "tau": self.tau,
            "anchors": [[float(v) for v in row] for row in self.anchors],
            "converged": self.converged,
            "residual_grad_norm": self.residual_grad_norm,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="ascii")

    @classmethod
    def load(cls, path: str | Path) -> "AnchorSet":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            anchors=np.asarray(payload["anchors"], dtype=np.float64),
            tau=float(payload["tau"]),
            converged=bool(payload.get("converged", True)),
            residual_grad_norm=float(payload.get("residual_grad_norm", 0.0)),
        )


def _check_simplex(v: torch.Tensor, name: str) -> None:
    sums = v.sum(dim=-1)
    if (v < -1e-9).any() or (sums - 1.0).abs().max() > 1e-6:
        raise ValidationError(f"{name} is not on the probability simplex (tolerance 1e-6)")


def pll_loss(probs: torch.Tensor, confidence: torch.Tensor) -> torch.Tensor:
    """Soft-target cross-entropy -sum_j C_j log p_j, averaged over a batch.

    Both arguments must be simplex vectors; probabilities are clamped at 1e-12
    before the log. The confidence weights are treated as constants.
    """
    probs = probs if isinstance(probs, torch.Tensor) else torch.as_tensor(probs)
    confidence = torch.as_tensor(confidence, dtype=probs.dtype)
    if probs.shape != confidence.shape:
        raise ValidationError(
            f"probs {tuple(probs.shape)} and confidence {tuple(confidence.shape)} differ"
        )
    _check_simplex(probs.detach(), "probs")
    _check_simplex(confidence, "confidence")
    log_p = torch.log(probs.clamp(min=PROB_FLOOR))
    per_sample = -(confidence.detach() * log_p).sum(dim=-1)
    return per_sample.mean()


def _normalize_rows(points: torch.Tensor) -> torch.Tensor:
    norms = points.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NumericError("cannot normalize a zero-norm row")
    return points / norms


def uniform_loss(points: torch.Tensor, tau: float) -> torch.Tensor:
    """Hypersphere energy (1/K) sum_i log sum_j exp(t_i . t_j / tau).

    Rows are L2-normalized internally; the log-sum-exp is max-stabilized, so
    1/tau up to ~1000 stays finite. Lower is more uniform.
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    points = points if isinstance(points, torch.Tensor) else torch.as_tensor(points)
    if points.ndim != 2:
        raise ValidationError(f"points must be (K, d), got {tuple(points.shape)}")
    t = _normalize_rows(points)
    gram = (t @ t.T) / tau
    return torch.logsumexp(gram, dim=1).mean()


def optimal_anchor_positions(
    num_classes: int,
    dim: int,
    tau: float,
    steps: int = 600,
    seed: int = 0,
    restarts: int = 8,
    lr: float = 0.05,
    grad_tol: float = 1e-3,
) -> AnchorSet:
    """Minimize the uniformity energy over unit vectors by projected descent.

    Runs ``restarts`` seeded starts of Adam with per-step renormalization,
    annealing from a coarser temperature, and returns the lowest-energy
    iterate visited anywhere. If the tangent gradient norm at that point
    still exceeds ``grad_tol``, a warning status is attached. Deterministic
    per seed.
    """
    if num_classes < 2 or dim < 2:
        raise ConfigurationError("need num_classes >= 2 and dim >= 2")
    if not tau > 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")

    # At small tau the energy around the optimum is nearly flat (neighbor terms
    # carry weight e^{(s-1)/tau}), which starves plain descent. Two remedies:
    # anneal from a coarse temperature whose gradients are healthy, and keep
    # the best iterate ever visited since Adam orbits sharp minima.
    coarse_tau = max(tau, 0.3)
    half = steps // 2
    decay_from = int(0.7 * steps)
    best_loss, best_points = np.inf, None
    for r in range(restarts):
        gen = torch.Generator().manual_seed(seed * 7919 + r)
        x = torch.randn(num_classes, dim, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            x /= x.norm(dim=1, keepdim=True)
        x.requires_grad_(True)
        opt = torch.optim.Adam([x], lr=lr)
        for step in range(steps + 1):
            current_tau = coarse_tau if step < half else tau
            objective = uniform_loss(x, current_tau)
            score = objective if current_tau == tau else uniform_loss(x, tau)
            if score.item() < best_loss:
                best_loss, best_points = score.item(), x.detach().clone()
            if step == steps:
                break
            opt.zero_grad()
            objective.backward()
            if step >= decay_from:
                progress = (step - decay_from) / max(1, steps - decay_from)
                for group in opt.param_groups:
                    group["lr"] = lr * 0.5 * (1.0 + np.cos(np.pi * progress))
            opt.step()
            with torch.no_grad():
                x /= x.norm(dim=1, keepdim=True)

    # residual tangent gradient at the winner
    x = best_points.clone().requires_grad_(True)
    loss = uniform_loss(x, tau)
    (grad,) = torch.autograd.grad(loss, x)
    radial = (grad * x.detach()).sum(dim=1, keepdim=True) * x.detach()
    grad_norm = float((grad - radial).norm())
    converged = grad_norm <= grad_tol
    if not converged:
        warnings.warn(
            f"anchor optimization left tangent gradient norm {grad_norm:.2e} > {grad_tol:.0e}",
            RuntimeWarning,
            stacklevel=2,
        )
    anchors = best_points.numpy()
    anchors = anchors / np.linalg.norm(anchors, axis=1, keepdims=True)
    return AnchorSet(
        anchors=anchors, tau=tau, converged=converged, residual_grad_norm=grad_norm
    )


def anchor_alignment_loss(queries: torch.Tensor, anchors: AnchorSet) -> torch.Tensor:
    """Mean squared distance between direction-normalized queries and anchors.

    Zero iff every normalized query equals its anchor; invariant to positive
    rescaling of query rows.
    """
    queries = queries if isinstance(queries, torch.Tensor) else torch.as_tensor(queries)
    targets = torch.as_tensor(anchors.anchors, dtype=queries.dtype)
    if queries.shape != targets.shape:
        raise ValidationError(
            f"queries {tuple(queries.shape)} do not match anchors {tuple(targets.shape)}"
        )
    q = _normalize_rows(queries)
    return (q - targets).pow(2).sum(dim=1).mean()


def _validate_revision_inputs(c_prev: np.ndarray, phi: np.ndarray) -> None:
    sums = c_prev.sum(axis=-1)
    if (c_prev < -1e-9).any() or np.abs(sums - 1.0).max() > 1e-6:
        raise ValidationError("confidence rows must lie on the simplex (tolerance 1e-6)")
    if not np.isfinite(phi).all() or (phi < 0).any() or (phi > 1).any():
        raise ValidationError("sigmoid responses must lie in [0, 1]")


def revise_confidence_batch(
    c_prev: np.ndarray, phi: np.ndarray, config: RevisionConfig
) -> np.ndarray:
    """Vectorized revision: collapse row i to one-hot at the argmax of
    phi * C when the gap between the largest and k-th largest weighted
    score exceeds the threshold; otherwise keep the row unchanged.

    Ties break toward the lower index. One-hot rows are fixed points.
    """
    c_prev = np.asarray(c_prev, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if c_prev.shape != phi.shape:
        raise ValidationError(f"shapes differ: {c_prev.shape} vs {phi.shape}")
    squeeze = c_prev.ndim == 1
    if squeeze:
        c_prev, phi = c_prev[None], phi[None]
    _validate_revision_inputs(c_prev, phi)
    k = config.k_top
    if k > c_prev.shape[1]:
        raise ConfigurationError(f"k_top {k} exceeds class count {c_prev.shape[1]}")

    s = phi * c_prev
    top1 = s.argmax(axis=1)  # first maximum -> lowest index on ties
    v1 = np.take_along_axis(s, top1[:, None], axis=1)[:, 0]
    vk = np.partition(s, -k, axis=1)[:, -k]
    collapse = (v1 - vk) > config.threshold

    out = c_prev.copy()
    rows = np.flatnonzero(collapse)
    out[rows] = 0.0
    out[rows, top1[rows]] = 1.0
    return out[0] if squeeze else out


def revise_confidence(
    c_prev: np.ndarray, phi: np.ndarray, config: RevisionConfig
) -> np.ndarray:
    """Single-vector form of :func:`revise_confidence_batch`."""
    return revise_confidence_batch(c_prev, phi, config)


def top_candidates(s: np.ndarray, k: int = 2) -> np.ndarray:
    """Indices of the k largest entries per row, ties broken by lower index."""
    s = np.asarray(s, dtype=np.float64)
    squeeze = s.ndim == 1
    if squeeze:
        s = s[None]
    # stable sort on (-value, index): argsort of -s with stable kind keeps low index first
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    return order[0] if squeeze else order


def total_finetune_loss(
    pll: torch.Tensor | float,
    uniform: torch.Tensor | float,
    alignment: torch.Tensor | float,
    lambda_uniform: float = 1.0,
    lambda_align: float = 1.0,
):
    """Weighted sum pll + lambda_u * uniform + lambda_a * alignment."""
    if lambda_uniform < 0 or lambda_align < 0:
        raise ConfigurationError("loss weights must be >= 0")
    return pll + lambda_uniform * uniform + lambda_align * alignment
