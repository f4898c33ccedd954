import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semod.errors import ValidationError
from semod.hloss import (
    Logits3,
    LossValue,
    Prob3,
    argmax_label,
    batch_hierarchical_ce_from_logits,
    hierarchical_ce,
    hierarchical_ce_from_logits,
    hierarchical_ce_grad,
    project_fine_to_coarse,
    softmax,
)
from semod.taxonomy import FINE_INDEX, FineLabel

LABELS = list(FineLabel)


def fd_gradient(z: np.ndarray, target: FineLabel, alpha: float, h: float = 1e-5) -> np.ndarray:
    """Independent central-finite-difference oracle."""
    out = np.zeros(3)
    for i in range(3):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        out[i] = (
            hierarchical_ce_from_logits(Logits3(*zp), target, alpha).total
            - hierarchical_ce_from_logits(Logits3(*zm), target, alpha).total
        ) / (2 * h)
    return out


# -- projection ---------------------------------------------------------------


def test_project_one_hot_se_member():
    coarse = project_fine_to_coarse(Prob3(1.0, 0.0, 0.0))
    assert (coarse.p_se, coarse.p_ns) == (1.0, 0.0)


def test_project_one_hot_neutral():
    coarse = project_fine_to_coarse(Prob3(0.0, 0.0, 1.0))
    assert (coarse.p_se, coarse.p_ns) == (0.0, 1.0)


def test_project_component_sum():
    coarse = project_fine_to_coarse(Prob3(0.25, 0.35, 0.40))
    assert coarse.p_se == pytest.approx(0.60)
    assert coarse.p_ns == pytest.approx(0.40)


# -- loss values --------------------------------------------------------------


def test_one_hot_target_gives_zero_loss():
    for alpha in (0.0, 0.3, 1.0):
        value = hierarchical_ce(Prob3(0.0, 1.0, 0.0), FineLabel.SEXUAL_POSING, alpha)
        assert value.total == pytest.approx(0.0, abs=1e-9)


def test_zero_loss_only_at_one_hot_target():
    rng = np.random.default_rng(41)
    for _ in range(200):
        raw = rng.random(3) + 1e-6
        d = Prob3(*(raw / raw.sum()))
        for target in LABELS:
            if d[target] < 1.0 - 1e-9:
                assert hierarchical_ce(d, target, 0.3).total > 0.0


def test_uniform_distribution_activity_alpha_half():
    # Oracle: direct two-term evaluation, fine = ln 3, coarse = -ln(2/3).
    value = hierarchical_ce(Prob3(1 / 3, 1 / 3, 1 / 3), FineLabel.SEXUAL_ACTIVITY, 0.5)
    expected = 0.5 * (-math.log(2 / 3)) + 0.5 * math.log(3)
    assert value.total == pytest.approx(expected, abs=1e-9)
    assert value.total == pytest.approx(0.75204, abs=5e-6)


def test_alpha_one_is_binary_ce():
    value = hierarchical_ce(Prob3(0.5, 0.1, 0.4), FineLabel.SEXUAL_ACTIVITY, 1.0)
    assert value.total == pytest.approx(-math.log(0.6), abs=1e-9)
    assert value.total == pytest.approx(0.51083, abs=5e-6)


def test_loss_value_invariant_enforced():
    with pytest.raises(ValidationError):
        LossValue(total=1.0, coarse_term=0.2, fine_term=0.2, alpha=0.5)


def test_alpha_out_of_range_rejected():
    with pytest.raises(ValidationError):
        hierarchical_ce(Prob3(0.2, 0.3, 0.5), FineLabel.NEUTRAL, 1.5)
    with pytest.raises(ValidationError):
        hierarchical_ce(Prob3(0.2, 0.3, 0.5), FineLabel.NEUTRAL, -0.1)


def test_invalid_distribution_rejected():
    with pytest.raises(ValidationError):
        Prob3(0.5, 0.6, 0.2)
    with pytest.raises(ValidationError):
        Prob3(-0.1, 0.6, 0.5)


# -- logits route -------------------------------------------------------------


def test_uniform_logits_neutral_fine_only():
    value = hierarchical_ce_from_logits(Logits3(0.0, 0.0, 0.0), FineLabel.NEUTRAL, 0.0)
    assert value.total == pytest.approx(math.log(3), abs=1e-9)


def test_saturated_logits_near_zero_loss():
    value = hierarchical_ce_from_logits(
        Logits3(10.0, -10.0, -10.0), FineLabel.SEXUAL_ACTIVITY, 0.5
    )
    assert value.total < 1e-4


def test_uniform_logits_activity_coarse_only():
    value = hierarchical_ce_from_logits(Logits3(0.0, 0.0, 0.0), FineLabel.SEXUAL_ACTIVITY, 1.0)
    assert value.total == pytest.approx(-math.log(2 / 3), abs=1e-9)
    assert value.total == pytest.approx(0.40546, abs=1e-5)


def test_logits_match_explicit_softmax_route():
    z = Logits3(0.7, -1.2, 0.3)
    via_logits = hierarchical_ce_from_logits(z, FineLabel.SEXUAL_POSING, 0.5)
    via_probs = hierarchical_ce(softmax(z), FineLabel.SEXUAL_POSING, 0.5)
    assert via_logits.total == pytest.approx(via_probs.total, abs=1e-12)


def test_non_finite_logits_rejected():
    with pytest.raises(ValidationError):
        Logits3(float("nan"), 0.0, 0.0)
    with pytest.raises(ValidationError):
        batch_hierarchical_ce_from_logits(
            np.array([[np.inf, 0.0, 0.0]]), np.array([0]), 0.5
        )


# -- gradients ----------------------------------------------------------------


def test_grad_uniform_neutral_alpha_zero():
    # softmax - onehot at uniform softmax, verified by finite differences.
    grad = hierarchical_ce_grad(Logits3(0.0, 0.0, 0.0), FineLabel.NEUTRAL, 0.0)
    assert np.allclose(grad, [1 / 3, 1 / 3, -2 / 3], atol=1e-12)
    assert np.allclose(grad, fd_gradient(np.zeros(3), FineLabel.NEUTRAL, 0.0), atol=1e-6)


def test_grad_is_linear_in_alpha():
    rng = np.random.default_rng(5)
    for _ in range(25):
        z = Logits3(*rng.uniform(-4, 4, 3))
        for target in LABELS:
            blended = hierarchical_ce_grad(z, target, 0.5)
            coarse = hierarchical_ce_grad(z, target, 1.0)
            fine = hierarchical_ce_grad(z, target, 0.0)
            assert np.allclose(blended, 0.5 * coarse + 0.5 * fine, atol=1e-12)


def test_grad_matches_finite_differences_tagged_case():
    z = np.array([2.0, -1.0, 0.0])
    grad = hierarchical_ce_grad(Logits3(*z), FineLabel.SEXUAL_POSING, 1.0)
    assert np.allclose(grad, fd_gradient(z, FineLabel.SEXUAL_POSING, 1.0), atol=1e-5)


def test_grad_matches_finite_differences_random():
    rng = np.random.default_rng(17)
    for _ in range(100):
        z = rng.uniform(-5, 5, 3)
        alpha = float(rng.uniform(0, 1))
        target = LABELS[int(rng.integers(3))]
        grad = hierarchical_ce_grad(Logits3(*z), target, alpha)
        assert np.allclose(grad, fd_gradient(z, target, alpha), atol=1e-5)


def test_batch_route_matches_scalar_route():
    rng = np.random.default_rng(2)
    z = rng.uniform(-3, 3, (16, 3))
    targets = rng.integers(0, 3, 16)
    losses, grads = batch_hierarchical_ce_from_logits(z, targets, 0.4)
    for i in range(16):
        target = LABELS[targets[i]]
        assert losses[i] == pytest.approx(
            hierarchical_ce_from_logits(Logits3(*z[i]), target, 0.4).total, abs=1e-12
        )
        assert np.allclose(grads[i], hierarchical_ce_grad(Logits3(*z[i]), target, 0.4))


# -- invariants ---------------------------------------------------------------


@settings(max_examples=200)
@given(
    st.tuples(
        st.floats(0.0, 1.0, allow_nan=False),
        st.floats(0.0, 1.0, allow_nan=False),
        st.floats(0.0, 1.0, allow_nan=False),
    ).filter(lambda t: sum(t) > 1e-6),
    st.sampled_from(LABELS),
    st.floats(0.0, 1.0, allow_nan=False),
)
def test_loss_nonnegative_and_coarse_below_fine(raw, target, alpha):
    total = sum(raw)
    d = Prob3(raw[0] / total, raw[1] / total, raw[2] / total)
    value = hierarchical_ce(d, target, alpha)
    assert value.total >= 0.0
    assert value.coarse_term <= value.fine_term + 1e-12
    assert value.total <= value.fine_term + 1e-12


def test_alpha_extremes_reduce_exactly():
    rng = np.random.default_rng(23)
    for _ in range(200):
        raw = rng.random(3) + 1e-9
        d = Prob3(*(raw / raw.sum()))
        target = LABELS[int(rng.integers(3))]
        fine_only = hierarchical_ce(d, target, 0.0)
        coarse_only = hierarchical_ce(d, target, 1.0)
        assert fine_only.total == fine_only.fine_term
        assert coarse_only.total == coarse_only.coarse_term
        expected_fine = -math.log(max(d[target], 1e-12))
        assert fine_only.total == pytest.approx(expected_fine, abs=1e-12)


def test_projection_preserves_distribution_invariants():
    rng = np.random.default_rng(31)
    for _ in range(200):
        raw = rng.random(3)
        d = Prob3(*(raw / raw.sum()))
        coarse = project_fine_to_coarse(d)
        assert coarse.p_se >= 0.0 and coarse.p_ns >= 0.0
        assert coarse.p_se + coarse.p_ns == pytest.approx(1.0, abs=1e-9)


# -- argmax -------------------------------------------------------------------


def test_argmax_plain():
    assert argmax_label(Prob3(0.7, 0.2, 0.1)) is FineLabel.SEXUAL_ACTIVITY
    assert argmax_label(Prob3(0.2, 0.2, 0.6)) is FineLabel.NEUTRAL


def test_argmax_tie_goes_to_severity():
    assert argmax_label(Prob3(0.4, 0.4, 0.2)) is FineLabel.SEXUAL_ACTIVITY
    assert argmax_label(Prob3(0.1, 0.45, 0.45)) is FineLabel.SEXUAL_POSING


def test_fine_index_order_is_severity_descending():
    ordered = sorted(FINE_INDEX, key=FINE_INDEX.get)
    assert ordered == [
        FineLabel.SEXUAL_ACTIVITY,
        FineLabel.SEXUAL_POSING,
        FineLabel.NEUTRAL,
    ]
