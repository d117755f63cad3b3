import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from r2vpo import divergence as dv
from r2vpo.objective import (
    CLIP, R2VPO, SEQUENCE_MEAN, LossHyper, TokenBatch, clip_branch_table, finite_diff_loss_gradient,
    grpo_clip_loss, loss_gradient, r2vpo_loss, ratio, token_weights,
)
from r2vpo.policy import PolicyParams, softmax_rows


def batch_at(rhos, advs):
    """Single-row batch whose tokens have the given ratios (logp_theta fixed at log 0.5)."""
    rhos = np.asarray(rhos, dtype=float)
    n = len(rhos)
    lt = np.full(n, math.log(0.5))
    return TokenBatch(np.zeros(n, int), np.zeros(n, int), lt - np.log(rhos), np.asarray(advs, float),
                      np.arange(n), np.zeros(n, int), logp_theta=lt)


def branch_oracle(rho, adv, eps_low, eps_high, h=1e-7):
    """Enumerate both branches directly and differentiate the token objective in rho numerically."""
    def obj(r):
        return min(r * adv, min(max(r, 1 - eps_low), 1 + eps_high) * adv)
    val = obj(rho)
    slope = (obj(rho + h) - obj(rho - h)) / (2 * h)
    return val, slope * rho


def test_ratio_values():
    assert ratio(-1.3, -1.3) == (1.0, False)
    r, c = ratio(math.log(1.5), 0.0)
    assert r == pytest.approx(1.5, rel=1e-15) and not c
    r, c = ratio(50.0, 0.0)
    assert r == math.exp(20) and c
    r, c = ratio(np.array([0.0, -30.0]), np.zeros(2))
    assert r[1] == math.exp(-20) and c.tolist() == [False, True]


def test_clip_dead_zone_token():
    rep = grpo_clip_loss(batch_at([1.5], [1.0]), 0.2, 0.2)
    assert rep.loss_value == pytest.approx(1.2, abs=1e-12)
    assert rep.grad_coefficients[0] == 0.0
    assert rep.clipped_fraction == 1.0


def test_clip_interior_token():
    rep = grpo_clip_loss(batch_at([1.0], [-0.5]), 0.2, 0.2)
    assert rep.loss_value == pytest.approx(-0.5, abs=1e-15)
    assert rep.grad_coefficients[0] == pytest.approx(-0.5, abs=1e-15)
    assert rep.clipped_fraction == 0.0


def test_clip_low_side_negative_advantage():
    rep = grpo_clip_loss(batch_at([0.5], [-1.0]), 0.2, 0.2)
    val, coef = branch_oracle(0.5, -1.0, 0.2, 0.2)
    assert val == pytest.approx(-0.8, abs=1e-12)
    assert rep.loss_value == pytest.approx(val, abs=1e-12)
    assert rep.grad_coefficients[0] == pytest.approx(coef, abs=1e-6) == 0.0


@pytest.mark.parametrize("adv", [1.0, -1.0, 0.7, -2.5])
@pytest.mark.parametrize("rho", [0.3, 0.7, 0.95, 1.0, 1.1, 1.25, 1.6, 3.0])
@pytest.mark.parametrize("eps", [(0.2, 0.2), (0.2, 0.28)])
def test_clip_branch_table(adv, rho, eps):
    val, coef = branch_oracle(rho, adv, *eps)
    obj, c, _ = clip_branch_table(np.array([rho]), np.array([adv]), *eps)
    assert obj[0] == pytest.approx(val, abs=1e-12)
    assert c[0] == pytest.approx(coef, abs=1e-6)


def test_clip_kink_resolves_to_clipped_side():
    _, c, clipped = clip_branch_table(np.array([1.2, 0.8]), np.array([1.0, -1.0]), 0.2, 0.2)
    assert c.tolist() == [0.0, 0.0] and clipped.all()


def test_clip_high_variant_widens_upper_band():
    assert grpo_clip_loss(batch_at([1.25], [1.0]), 0.2, 0.2).clipped_fraction == 1.0
    assert grpo_clip_loss(batch_at([1.25], [1.0]), 0.2, 0.28).clipped_fraction == 0.0


def test_r2vpo_at_unit_ratio():
    rep = r2vpo_loss(batch_at([1.0, 1.0], [0.3, -0.9]), 0.04, 0.01)
    assert rep.loss_value == pytest.approx(np.mean([0.3, -0.9]) + 0.04 * 0.01, abs=1e-15)
    np.testing.assert_array_equal(rep.grad_coefficients, [0.3, -0.9])


def test_r2vpo_coefficient_substitution():
    rep = r2vpo_loss(batch_at([1.2], [1.0]), 0.04, 0.01)
    assert rep.grad_coefficients[0] == pytest.approx((1 - 2 * 0.04 * 0.2) * 1.2, abs=1e-12)
    assert rep.grad_coefficients[0] == pytest.approx(1.1808, abs=1e-12)


def test_r2vpo_lambda_zero_is_unclipped_surrogate():
    rhos, advs = [0.4, 1.0, 1.7, 2.2], [1.0, -0.5, 0.3, -1.2]
    rep = r2vpo_loss(batch_at(rhos, advs), 0.0, 0.01)
    b = batch_at(rhos, advs)
    rho, _ = ratio(b.logp_theta, b.logp_off)
    assert rep.loss_value == float(np.dot(np.full(4, 0.25), rho * b.advantage))


def test_r2vpo_rejects_negative_lambda():
    with pytest.raises(ValueError):
        r2vpo_loss(batch_at([1.0], [1.0]), -0.1, 0.01)


@given(st.floats(0, 0.99), st.floats(0, 5), st.floats(-3, 3))
def test_penalty_symmetric(x, lam, adv):
    up = r2vpo_loss(batch_at([1 + x], [0.0]), lam, 0.01).loss_value
    dn = r2vpo_loss(batch_at([1 - x], [0.0]), lam, 0.01).loss_value
    # (rho - 1)^2 is evaluated after exp/log round trips, so allow a few ulps
    assert up == pytest.approx(dn, rel=1e-12, abs=1e-15)


def test_sign_flip_reported():
    rep = r2vpo_loss(batch_at([3.0], [0.1]), 1.0, 0.01)
    assert rep.grad_coefficients[0] < 0
    assert rep.sign_flip_fraction == 1.0


def test_coefficient_continuity_vs_clip_jump():
    grid = np.linspace(0.5, 1.5, 20001)
    step = grid[1] - grid[0]
    adv = np.ones_like(grid)
    b = batch_at(grid, adv)
    rho, _ = ratio(b.logp_theta, b.logp_off)
    r2 = r2vpo_loss(b, 0.04, 0.01).grad_coefficients
    # |d coef / d rho| = |A - 4 lam (rho - 1) + 2 lam| <= 1.2 on this grid
    assert np.abs(np.diff(r2)).max() <= 1.2 * step * 1.01
    cl = grpo_clip_loss(b, 0.2, 0.2).grad_coefficients
    assert np.abs(np.diff(cl)).max() >= 1.19


def test_sequence_mean_weights():
    b = TokenBatch(np.zeros(4, int), np.zeros(4, int), np.zeros(4), np.zeros(4), np.array([0, 0, 0, 1]),
                   np.zeros(4, int))
    np.testing.assert_allclose(token_weights(b, SEQUENCE_MEAN), [1 / 6, 1 / 6, 1 / 6, 1 / 2])


def random_instance(rng, kind):
    k = int(rng.integers(2, 6))
    params = PolicyParams(rng.normal(size=(1, 2, 2, k)))
    behaviour = PolicyParams(params.logits + rng.normal(scale=0.25, size=params.logits.shape))
    n = int(rng.integers(1, 7))
    rows = rng.integers(0, 4, size=n)
    actions = rng.integers(0, k, size=n)
    _, lp = softmax_rows(behaviour.table[rows])
    logp_off = lp[np.arange(n), actions]
    adv = rng.normal(size=n)
    batch = TokenBatch(rows, actions, logp_off, adv, np.arange(n) // 2, np.zeros(n, int))
    hyper = LossHyper(kind, 0.2, 0.28, float(rng.uniform(0, 0.5)), 0.01)
    return params, batch, hyper


def away_from_kinks(params, batch, hyper, margin=1e-3):
    rho, _ = ratio(batch.evaluated(params).logp_theta, batch.logp_off)
    return np.all(np.abs(rho - (1 - hyper.eps_low)) > margin) and np.all(np.abs(rho - (1 + hyper.eps_high)) > margin)


@pytest.mark.parametrize("kind", [CLIP, R2VPO])
def test_loss_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(17)
    checked = 0
    while checked < 100:
        params, batch, hyper = random_instance(rng, kind)
        if not away_from_kinks(params, batch, hyper):
            continue
        an, _ = loss_gradient(batch, params, hyper)
        fd = finite_diff_loss_gradient(params, batch, hyper)
        scale = max(np.linalg.norm(an), np.linalg.norm(fd))
        if scale == 0:
            assert np.array_equal(an, fd)
        else:
            assert np.linalg.norm(an - fd) <= 1e-5 * scale
        checked += 1


def test_dead_zone_gradient_is_exactly_zero():
    params = PolicyParams(np.array([[[[0.4, -0.3, 1.1]]]]))
    _, lp = softmax_rows(params.table[[0]])
    rho = 1 + 0.2 + 0.1
    batch = TokenBatch.single(0, 1, lp[0, 1] - math.log(rho), 1.0)
    g, rep = loss_gradient(batch, params, LossHyper(CLIP, 0.2, 0.2))
    assert rep.ratios[0] == pytest.approx(rho, rel=1e-12)
    assert np.array_equal(g, np.zeros_like(g))
    g2, _ = loss_gradient(batch, params, LossHyper(R2VPO, lam=0.04, trust_delta=0.01))
    assert np.linalg.norm(g2) > 0


def test_first_step_identity_between_losses():
    rng = np.random.default_rng(8)
    params = PolicyParams(rng.normal(size=(1, 1, 3, 5)))
    rows = rng.integers(0, 3, 12)
    actions = rng.integers(0, 5, 12)
    _, lp = softmax_rows(params.table[rows])
    batch = TokenBatch(rows, actions, lp[np.arange(12), actions], rng.normal(size=12), np.arange(12),
                       np.zeros(12, int))
    g1, r1 = loss_gradient(batch, params, LossHyper(CLIP))
    g2, r2 = loss_gradient(batch, params, LossHyper(R2VPO, lam=0.04, trust_delta=0.01))
    assert np.array_equal(g1, g2)
    assert r1.loss_value == pytest.approx(r2.loss_value - 0.04 * 0.01, abs=1e-15)
    assert r1.loss_value == pytest.approx(batch.advantage.mean(), abs=1e-15)


def test_variance_estimate_matches_exact_proxy():
    # pi_off has rational probabilities, so a batch holding each action count_a times is an exact expectation
    rng = np.random.default_rng(2)
    counts = np.array([1, 2, 3, 4, 6])
    off = PolicyParams(np.log(counts, dtype=float).reshape(1, 1, 1, -1))
    theta = PolicyParams(off.logits + rng.normal(scale=0.2, size=off.logits.shape))
    p_off, lp_off = softmax_rows(off.table)
    p_theta, _ = softmax_rows(theta.table)
    actions = np.repeat(np.arange(5), counts)
    n = len(actions)
    batch = TokenBatch(np.zeros(n, int), actions, lp_off[0, actions], np.zeros(n), np.arange(n), np.zeros(n, int))
    rep = r2vpo_loss(batch.evaluated(theta), 0.04, 0.01)
    assert rep.ratio_variance_estimate == pytest.approx(dv.variance_proxy(p_theta[0], p_off[0]), abs=1e-10)


def test_batch_validation():
    with pytest.raises(ValueError):
        TokenBatch(np.zeros(2, int), np.zeros(1, int), np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        TokenBatch(np.zeros(1, int), np.zeros(1, int), np.array([np.nan]), np.zeros(1), np.zeros(1), np.zeros(1))
