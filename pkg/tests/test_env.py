import itertools
import math

import numpy as np
import pytest

from r2vpo import env
from r2vpo.env import Prompt, TaskSpec, enumerate_rewards, make_rare_token_bandit, rollout, verify
from r2vpo.policy import PolicyParams, StateFeatures, dist


@pytest.fixture
def bandit():
    return make_rare_token_bandit(16, 7, 5.0)


@pytest.fixture
def seqsum():
    return env.make_sequence_sum(10, 3)


def test_bandit_rewards(bandit):
    task, _ = bandit
    prompt = Prompt(0, 7)
    assert verify(task, prompt, [7]) == 1.0
    for tok in range(16):
        if tok != 7:
            assert verify(task, prompt, [tok]) == 0.0


def test_bandit_rejects_wrong_length(bandit):
    task, _ = bandit
    with pytest.raises(ValueError):
        verify(task, Prompt(0, 7), [])
    with pytest.raises(ValueError):
        verify(task, Prompt(0, 7), [7, 7])


def test_sequence_sum_predicate(seqsum):
    assert verify(seqsum, Prompt(0, 6), [1, 2, 3]) == 1.0
    assert verify(seqsum, Prompt(0, 6), [1, 2, 4]) == 0.0
    assert verify(seqsum, Prompt(0, 0), [0, 0, 0]) == 1.0


def test_sequence_sum_max_target_brute_force(seqsum):
    winners = [seq for seq, r in enumerate_rewards(seqsum, Prompt(0, 27)).items() if r == 1.0]
    assert winners == [(9, 9, 9)]


@pytest.mark.parametrize("k,length", [(2, 1), (3, 2), (4, 3)])
def test_enumeration_matches_predicate(k, length):
    task = TaskSpec(env.SEQUENCE_SUM, k, length)
    for target in range(length * (k - 1) + 1):
        table = enumerate_rewards(task, Prompt(0, target))
        assert len(table) == k**length
        for seq in itertools.product(range(k), repeat=length):
            assert table[seq] == float(sum(seq) == target)


def test_verify_rejects_out_of_vocab(seqsum):
    with pytest.raises(ValueError):
        verify(seqsum, Prompt(0, 6), [1, 2, 10])


def test_bandit_prior_closed_form():
    _, params = make_rare_token_bandit(16, 7, 5.0)
    p = dist(params, StateFeatures(0, 0, 0)).probs[7]
    assert p == pytest.approx(math.exp(-5) / (15 + math.exp(-5)), rel=1e-12)
    assert p == pytest.approx(4.49e-4, rel=1e-3)
    _, params = make_rare_token_bandit(2, 0, 4.0)
    assert dist(params, StateFeatures(0, 0, 0)).probs[0] == pytest.approx(1 / (1 + math.exp(4)), rel=1e-12)
    assert 1 / (1 + math.exp(4)) == pytest.approx(0.0180, abs=5e-5)


def test_bandit_constructor_rejects():
    with pytest.raises(ValueError):
        make_rare_token_bandit(16, 16, 5.0)
    with pytest.raises(ValueError):
        make_rare_token_bandit(16, 7, 0.0)
    with pytest.raises(ValueError):
        make_rare_token_bandit(16, 7, 0.5)  # prior 0.04 > 0.02


def test_bandit_requires_single_step():
    with pytest.raises(ValueError):
        TaskSpec(env.RARE_TOKEN_BANDIT, 4, 2)


def test_rollout_reward_is_verified(seqsum):
    params = PolicyParams(np.random.default_rng(0).normal(size=(3, 3, 64, 10)))
    rng = np.random.default_rng(1)
    for pid, target in enumerate([3, 13, 20]):
        for _ in range(50):
            ep = rollout(seqsum, Prompt(pid, target), params, rng)
            assert len(ep.tokens) == len(ep.per_token_logp) == 3
            assert ep.reward == verify(seqsum, ep.prompt, ep.tokens)


def test_rollout_logp_matches_policy(seqsum):
    params = PolicyParams(np.random.default_rng(2).normal(size=(1, 3, 64, 10)))
    ep = rollout(seqsum, Prompt(0, 9), params, np.random.default_rng(3))
    rows = env.episode_states(params, 0, ep.tokens)
    for t, (row, tok) in enumerate(zip(rows, ep.tokens)):
        state = np.unravel_index(row, params.logits.shape[:3])
        assert state[1] == t
        assert ep.per_token_logp[t] == pytest.approx(math.log(dist(params, StateFeatures(*state)).probs[tok]),
                                                     abs=1e-12)


def test_rollout_deterministic(seqsum):
    params = PolicyParams(np.random.default_rng(2).normal(size=(1, 3, 64, 10)))
    a = rollout(seqsum, Prompt(0, 9), params, np.random.default_rng(11))
    b = rollout(seqsum, Prompt(0, 9), params, np.random.default_rng(11))
    assert a == b


def test_make_prompts_cycle_targets(seqsum):
    prompts = env.make_prompts(seqsum, 5, target_low=8, target_high=10)
    assert [p.target for p in prompts] == [8, 9, 10, 8, 9]
    assert len({p.id for p in prompts}) == 5
