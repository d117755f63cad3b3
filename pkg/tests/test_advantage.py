import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from r2vpo.advantage import GroupRollout, broadcast, group_advantage
from r2vpo.env import Episode, Prompt

rewards_st = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=32)


def eq3_by_hand(r, delta):
    r = [float(x) for x in r]
    mean = sum(r) / len(r)
    std = (sum((x - mean) ** 2 for x in r) / len(r)) ** 0.5
    return [(x - mean) / (std + delta) for x in r]


def test_single_success_group():
    adv = group_advantage([1, 0, 0, 0], 1e-6)
    np.testing.assert_allclose(adv, [1.73205, -0.57735, -0.57735, -0.57735], atol=1e-4)
    np.testing.assert_allclose(adv, eq3_by_hand([1, 0, 0, 0], 1e-6), atol=1e-12)


def test_pair():
    adv = group_advantage([1, 0], 1e-6)
    np.testing.assert_allclose(adv, [1, -1], atol=1e-5)
    assert adv[0] < 1


def test_all_equal_group_is_zero():
    assert np.array_equal(group_advantage([1, 1, 1, 1]), np.zeros(4))


def test_rejects_small_group():
    with pytest.raises(ValueError):
        group_advantage([1.0])
    with pytest.raises(ValueError):
        group_advantage([1.0, 0.0], 0.0)


@settings(max_examples=300)
@given(rewards_st)
def test_mean_zero(r):
    assert abs(group_advantage(r).mean()) <= 1e-12


@settings(max_examples=200)
@given(rewards_st, st.floats(-50, 50))
def test_shift_invariance(r, c):
    a = group_advantage(r)
    b = group_advantage(np.asarray(r) + c)
    np.testing.assert_allclose(a, b, atol=1e-6)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=16), st.floats(0.1, 10))
def test_scale_invariance_up_to_delta(bits, c):
    r = np.asarray(bits, dtype=float)
    a, b = group_advantage(r, 1e-6), group_advantage(c * r, 1e-6)
    # |A| <= sqrt(G), and the delta term perturbs each entry by at most G^0.5 * delta / min(std)
    bound = 1e-6 * np.sqrt(len(r)) * (1 / max(r.std(), 1e-12) + 1 / max((c * r).std(), 1e-12))
    assert np.all(np.abs(a - b) <= bound + 1e-12)
    np.testing.assert_allclose(group_advantage(r, 1e-300), group_advantage(c * r, 1e-300), atol=1e-12)


def test_broadcast():
    ep = Episode(Prompt(0, 6), [1, 2, 3], 1.0, [-1.0, -1.0, -1.0])
    assert broadcast(1.5, ep).tolist() == [1.5, 1.5, 1.5]
    assert broadcast(0.0, ep).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        broadcast(1.0, Episode(Prompt(0, 6), [], 0.0, []))


@given(st.integers(1, 20), st.floats(-3, 3))
def test_broadcast_preserves_length(n, a):
    ep = Episode(Prompt(0, 0), [0] * n, 0.0, [0.0] * n)
    assert len(broadcast(a, ep)) == n


def test_group_rollout():
    eps = [Episode(Prompt(0, 6), [6], r, [-1.0]) for r in (1.0, 0.0, 0.0, 0.0)]
    g = GroupRollout.from_episodes(Prompt(0, 6), eps)
    np.testing.assert_allclose(g.advantages, [1.73205, -0.57735, -0.57735, -0.57735], atol=1e-4)
