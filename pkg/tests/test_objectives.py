"""Objective functions: closed forms, invariances, gradients, revision rule."""

import math

import numpy as np
import pytest
import torch

from pllfer.errors import ConfigurationError, NumericError, ValidationError
from pllfer.model import classifier_probs
from pllfer.objectives import (
    AnchorSet,
    RevisionConfig,
    anchor_alignment_loss,
    optimal_anchor_positions,
    pll_loss,
    revise_confidence,
    revise_confidence_batch,
    total_finetune_loss,
    uniform_loss,
)


def rel_grad_error(f, x0, h=1e-6):
    """Max relative gap between autograd and central finite differences."""
    x = x0.clone().detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(x), x)
    grad = grad.reshape(-1)
    flat = x0.reshape(-1)
    numeric = torch.zeros_like(flat)
    for i in range(flat.numel()):
        bump = torch.zeros_like(flat)
        bump[i] = h
        hi = f((flat + bump).reshape(x0.shape))
        lo = f((flat - bump).reshape(x0.shape))
        numeric[i] = (hi - lo) / (2 * h)
    denom = max(float(numeric.norm()), 1e-12)
    return float((grad - numeric).norm()) / denom


# -- partial-label loss --------------------------------------------------------


def test_pll_one_hot_reduces_to_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        raw = rng.random(7) + 1e-3
        zeta = torch.as_tensor(raw / raw.sum())
        j = int(rng.integers(7))
        c = torch.zeros(7, dtype=torch.float64)
        c[j] = 1.0
        got = float(pll_loss(zeta, c))
        assert math.isclose(got, -math.log(float(zeta[j])), rel_tol=1e-12)


def test_pll_uniform_probs_equals_log_k():
    zeta = torch.full((7,), 1 / 7, dtype=torch.float64)
    c = torch.tensor([0.2, 0.8, 0, 0, 0, 0, 0], dtype=torch.float64)
    assert math.isclose(float(pll_loss(zeta, c)), math.log(7), rel_tol=1e-12)


def test_pll_hand_value():
    zeta = torch.tensor([0.7, 0.1, 0.2], dtype=torch.float64)
    c = torch.tensor([0.5, 0.5, 0.0], dtype=torch.float64)
    want = -0.5 * math.log(0.7) - 0.5 * math.log(0.1)
    assert math.isclose(float(pll_loss(zeta, c)), want, rel_tol=1e-12)


def test_pll_batch_is_mean_of_rows():
    zeta = torch.tensor([[0.7, 0.3], [0.4, 0.6]], dtype=torch.float64)
    c = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    want = (-math.log(0.7) - math.log(0.6)) / 2
    assert math.isclose(float(pll_loss(zeta, c)), want, rel_tol=1e-12)


def test_pll_rejects_off_simplex_inputs():
    with pytest.raises(ValidationError):
        pll_loss(torch.tensor([0.5, 0.4]), torch.tensor([1.0, 0.0]))
    with pytest.raises(ValidationError):
        pll_loss(torch.tensor([0.5, 0.5]), torch.tensor([0.8, 0.1]))


def test_pll_gradient_through_softmax_matches_finite_differences():
    rng = np.random.default_rng(1)
    c_np = rng.random(5)
    c = torch.as_tensor(c_np / c_np.sum())
    logits0 = torch.as_tensor(rng.normal(size=5))

    def f(logits):
        return pll_loss(classifier_probs(logits), c)

    assert rel_grad_error(f, logits0) < 1e-6


# -- uniformity energy ---------------------------------------------------------


def test_uniform_single_point_is_inverse_tau():
    one = torch.tensor([[0.3, -0.4]], dtype=torch.float64)
    assert math.isclose(float(uniform_loss(one, 0.25)), 4.0, rel_tol=1e-12)


def test_uniform_antipodal_pair_closed_form():
    pts = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    want = math.log(math.e + math.exp(-1.0))
    assert math.isclose(float(uniform_loss(pts, 1.0)), want, rel_tol=1e-12)


def test_uniform_permutation_invariant():
    rng = np.random.default_rng(2)
    pts = torch.as_tensor(rng.normal(size=(6, 4)))
    perm = torch.as_tensor(rng.permutation(6))
    a = float(uniform_loss(pts, 0.7))
    b = float(uniform_loss(pts[perm], 0.7))
    assert abs(a - b) < 1e-12


def test_uniform_rotation_invariant():
    rng = np.random.default_rng(3)
    pts = torch.as_tensor(rng.normal(size=(5, 4)))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    rotated = pts @ torch.as_tensor(q)
    assert abs(float(uniform_loss(pts, 0.3)) - float(uniform_loss(rotated, 0.3))) < 1e-9


def test_uniform_handles_tiny_tau_without_overflow():
    rng = np.random.default_rng(4)
    pts = torch.as_tensor(rng.normal(size=(7, 16)))
    val = float(uniform_loss(pts, 0.001))
    assert math.isfinite(val) and val >= 1000.0  # self term alone contributes 1/tau


def test_uniform_rejects_bad_tau_and_zero_rows():
    pts = torch.eye(3, dtype=torch.float64)
    with pytest.raises(ConfigurationError):
        uniform_loss(pts, 0.0)
    with pytest.raises(NumericError):
        uniform_loss(torch.zeros(2, 3, dtype=torch.float64), 1.0)


def test_uniform_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    pts = torch.as_tensor(rng.normal(size=(4, 3)))
    assert rel_grad_error(lambda p: uniform_loss(p, 0.5), pts) < 1e-4


# -- anchor geometry ------------------------------------------------------------


def test_two_anchors_are_antipodal():
    anchors = optimal_anchor_positions(2, 3, tau=0.1, steps=400, seed=0).anchors
    assert abs(float(anchors[0] @ anchors[1]) + 1.0) < 1e-3


def test_three_anchors_in_plane_form_triangle():
    anchors = optimal_anchor_positions(3, 2, tau=0.1, steps=400, seed=0).anchors
    gram = anchors @ anchors.T
    off = gram[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, -0.5, atol=1e-2)


def test_four_anchors_in_3d_form_tetrahedron():
    anchors = optimal_anchor_positions(4, 3, tau=0.1, steps=400, seed=0).anchors
    gram = anchors @ anchors.T
    off = gram[~np.eye(4, dtype=bool)]
    np.testing.assert_allclose(off, -1 / 3, atol=1e-2)


def test_anchor_optimization_deterministic_per_seed():
    a = optimal_anchor_positions(5, 8, tau=0.05, steps=150, seed=3, restarts=2).anchors
    b = optimal_anchor_positions(5, 8, tau=0.05, steps=150, seed=3, restarts=2).anchors
    np.testing.assert_array_equal(a, b)


def test_nonconvergence_sets_warning_status():
    with pytest.warns(RuntimeWarning):
        result = optimal_anchor_positions(6, 2, tau=0.05, steps=1, seed=0, restarts=1)
    assert not result.converged
    assert result.anchors.shape == (6, 2)


def test_anchor_set_json_round_trip(tmp_path):
    anchors = optimal_anchor_positions(3, 4, tau=0.1, steps=200, seed=1, restarts=2)
    path = tmp_path / "anchors.json"
    anchors.save(path)
    loaded = AnchorSet.load(path)
    np.testing.assert_array_equal(anchors.anchors, loaded.anchors)
    assert loaded.tau == anchors.tau
    loaded.save(tmp_path / "anchors2.json")
    assert path.read_bytes() == (tmp_path / "anchors2.json").read_bytes()


# -- anchor alignment -----------------------------------------------------------


def _unit_rows(rng, k, d):
    x = rng.normal(size=(k, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_alignment_zero_for_positively_scaled_queries():
    rng = np.random.default_rng(6)
    t = _unit_rows(rng, 4, 5)
    anchors = AnchorSet(anchors=t, tau=0.1)
    queries = torch.as_tensor(t * rng.uniform(0.1, 5.0, size=(4, 1)))
    assert float(anchor_alignment_loss(queries, anchors)) < 1e-24


def test_alignment_flipped_query_costs_four_over_k():
    rng = np.random.default_rng(7)
    t = _unit_rows(rng, 4, 5)
    anchors = AnchorSet(anchors=t, tau=0.1)
    q = t.copy()
    q[2] = -q[2]
    assert math.isclose(float(anchor_alignment_loss(torch.as_tensor(q), anchors)), 4 / 4,
                        rel_tol=1e-12)


def test_alignment_invariant_to_row_rescaling():
    rng = np.random.default_rng(8)
    t = _unit_rows(rng, 3, 6)
    anchors = AnchorSet(anchors=t, tau=0.1)
    q = torch.as_tensor(rng.normal(size=(3, 6)))
    a = float(anchor_alignment_loss(q, anchors))
    scaled = q * torch.as_tensor(rng.uniform(0.5, 3.0, size=(3, 1)))
    b = float(anchor_alignment_loss(scaled, anchors))
    assert abs(a - b) < 1e-12


def test_alignment_zero_norm_query_is_numeric_error():
    rng = np.random.default_rng(9)
    anchors = AnchorSet(anchors=_unit_rows(rng, 2, 3), tau=0.1)
    q = torch.zeros(2, 3, dtype=torch.float64)
    with pytest.raises(NumericError):
        anchor_alignment_loss(q, anchors)


# -- confidence revision ---------------------------------------------------------


def test_revision_hand_example_collapses():
    c = np.array([0.5, 0.5, 0, 0, 0, 0, 0.0])
    phi = np.array([0.9, 0.2, 0.8, 0.1, 0.1, 0.1, 0.1])
    out = revise_confidence(c, phi, RevisionConfig(threshold=0.2))
    np.testing.assert_array_equal(out, [1, 0, 0, 0, 0, 0, 0])


def test_revision_hand_example_keeps_below_threshold():
    c = np.array([0.5, 0.5, 0, 0, 0, 0, 0.0])
    phi = np.array([0.9, 0.2, 0.8, 0.1, 0.1, 0.1, 0.1])
    out = revise_confidence(c, phi, RevisionConfig(threshold=0.5))
    np.testing.assert_array_equal(out, c)


def test_one_hot_is_fixed_point_for_any_phi():
    rng = np.random.default_rng(10)
    c = np.zeros(7)
    c[3] = 1.0
    for _ in range(20):
        phi = rng.uniform(0.01, 0.99, size=7)
        for thr in (0.0, 0.3, 0.8):
            out = revise_confidence(c, phi, RevisionConfig(threshold=thr))
            np.testing.assert_array_equal(out, c)


def test_revision_property_sweep():
    # simplex-valid output, support containment, idempotence, one-hot fixed points
    rng = np.random.default_rng(11)
    n, k = 10_000, 7
    support = rng.random((n, k)) < 0.5
    support[np.arange(n), rng.integers(0, k, size=n)] = True
    raw = rng.random((n, k)) * support
    c = raw / raw.sum(axis=1, keepdims=True)
    phi = rng.uniform(1e-6, 1 - 1e-6, size=(n, k))

    for thr in (0.0, 0.05, 0.1, 0.2, 0.35, 0.5, 0.7, 0.9):
        cfg = RevisionConfig(threshold=thr)
        out = revise_confidence_batch(c, phi, cfg)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert (out >= 0).all()
        assert np.all((out > 1e-12) <= (c > 1e-12))  # supp(new) within supp(old)
        again = revise_confidence_batch(out, phi, cfg)
        np.testing.assert_array_equal(out, again)


def test_threshold_zero_collapses_unique_argmax():
    rng = np.random.default_rng(12)
    c = np.array([[0.4, 0.6, 0.0], [0.5, 0.25, 0.25]])
    phi = rng.uniform(0.05, 0.95, size=(2, 3))
    out = revise_confidence_batch(c, phi, RevisionConfig(threshold=0.0))
    s = phi * c
    for row_out, row_s in zip(out, s):
        expect = np.zeros(3)
        expect[row_s.argmax()] = 1.0
        np.testing.assert_array_equal(row_out, expect)


def test_revision_ties_break_toward_lower_index():
    c = np.array([0.5, 0.5, 0.0])
    phi = np.array([0.8, 0.8, 0.8])
    out = revise_confidence(c, phi, RevisionConfig(threshold=0.0))
    # v1 == v2 exactly: gap is zero, nothing collapses
    np.testing.assert_array_equal(out, c)
    phi = np.array([0.8, 0.2, 0.9])
    out = revise_confidence(c, phi, RevisionConfig(threshold=0.0))
    np.testing.assert_array_equal(out, [1, 0, 0])


def test_k_top_widens_the_gap_requirement():
    c = np.array([0.4, 0.35, 0.25])
    phi = np.array([0.9, 0.8, 0.1])
    # top-2 gap: 0.36 - 0.28 = 0.08; top-3 gap: 0.36 - 0.025 = 0.335
    out2 = revise_confidence(c, phi, RevisionConfig(threshold=0.1, k_top=2))
    np.testing.assert_array_equal(out2, c)
    out3 = revise_confidence(c, phi, RevisionConfig(threshold=0.1, k_top=3))
    np.testing.assert_array_equal(out3, [1, 0, 0])


def test_revision_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        revise_confidence(np.array([0.5, 0.4]), np.array([0.5, 0.5]), RevisionConfig())
    with pytest.raises(ValidationError):
        revise_confidence(np.array([0.5, 0.5]), np.array([1.5, 0.5]), RevisionConfig())
    with pytest.raises(ConfigurationError):
        RevisionConfig(threshold=1.0)
    with pytest.raises(ConfigurationError):
        RevisionConfig(k_top=1)


# -- total loss -------------------------------------------------------------------


def test_total_loss_reduces_to_pll_at_zero_weights():
    assert total_finetune_loss(1.3, 99.0, 55.0, 0.0, 0.0) == 1.3


def test_total_loss_is_linear_in_weights():
    base = total_finetune_loss(1.0, 0.5, 0.25, 1.0, 1.0)
    assert math.isclose(base, 1.75, rel_tol=1e-12)
    doubled = total_finetune_loss(1.0, 0.5, 0.25, 2.0, 1.0)
    assert math.isclose(doubled - base, 0.5, rel_tol=1e-12)


def test_total_loss_rejects_negative_weights():
    with pytest.raises(ConfigurationError):
        total_finetune_loss(1.0, 1.0, 1.0, -0.1, 0.0)
