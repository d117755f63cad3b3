"""Synthetic token tasks with exact 0/1 terminal rewards."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import PolicyParams, next_context_hash, sample_rows, softmax_rows

RARE_TOKEN_BANDIT = "rare_token_bandit"
SEQUENCE_SUM = "sequence_sum"
TASK_KINDS = (RARE_TOKEN_BANDIT, SEQUENCE_SUM)

EUREKA_MAX_PROB = 0.02


@dataclass(frozen=True)
class Prompt:
    id: int
    target: int


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab_size: int
    max_len: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.kind == RARE_TOKEN_BANDIT and self.max_len != 1:
            raise ValueError("rare_token_bandit requires max_len = 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    @property
    def eureka_index(self) -> int | None:
        return self.params.get("eureka_index") if self.kind == RARE_TOKEN_BANDIT else None


@dataclass
class Episode:
    prompt: Prompt
    tokens: list[int]
    reward: float
    per_token_logp: list[float]


def verify(task: TaskSpec, prompt: Prompt, tokens: Sequence[int]) -> float:
    tokens = [int(t) for t in tokens]
    if any(not 0 <= t < task.vocab_size for t in tokens):
        raise ValueError(f"tokens {tokens} outside vocab of size {task.vocab_size}")
    if task.kind == RARE_TOKEN_BANDIT:
        if len(tokens) != 1:
            raise ValueError(f"rare_token_bandit episodes have exactly one token, got {len(tokens)}")
        return 1.0 if tokens[0] == prompt.target else 0.0
    if len(tokens) != task.max_len:
        return 0.0
    return 1.0 if sum(tokens) == prompt.target else 0.0


def make_rare_token_bandit(
    vocab_size: int, eureka_index: int, initial_logit_gap: float, num_buckets: int = 1
) -> tuple[TaskSpec, PolicyParams]:
    """Single-step bandit where only a low-prior token pays off."""
    if not 0 <= eureka_index < vocab_size:
        raise ValueError(f"eureka_index {eureka_index} outside vocab of size {vocab_size}")
    if initial_logit_gap <= 0:
        raise ValueError("initial_logit_gap must be positive")
    p = math.exp(-initial_logit_gap) / (vocab_size - 1 + math.exp(-initial_logit_gap))
    if p > EUREKA_MAX_PROB:
        raise ValueError(f"initial eureka probability {p:.4g} exceeds {EUREKA_MAX_PROB}")
    task = TaskSpec(RARE_TOKEN_BANDIT, vocab_size, 1, {"eureka_index": eureka_index})
    params = PolicyParams.zeros(1, 1, num_buckets, vocab_size)
    params.logits[..., eureka_index] = -initial_logit_gap
    return task, params


def make_sequence_sum(vocab_size: int = 10, max_len: int = 3) -> TaskSpec:
    return TaskSpec(SEQUENCE_SUM, vocab_size, max_len)


def make_prompts(task: TaskSpec, num_prompts: int, rng: np.random.Generator | None = None,
                 target_low: int | None = None, target_high: int | None = None) -> list[Prompt]:
    if task.kind == RARE_TOKEN_BANDIT:
        return [Prompt(i, task.params["eureka_index"]) for i in range(num_prompts)]
    lo = 0 if target_low is None else target_low
    hi = task.max_len * (task.vocab_size - 1) if target_high is None else target_high
    if rng is None:
        targets = [lo + (i % (hi - lo + 1)) for i in range(num_prompts)]
    else:
        targets = rng.integers(lo, hi + 1, size=num_prompts).tolist()
    return [Prompt(i, int(t)) for i, t in enumerate(targets)]


def generate(task: TaskSpec, prompts: Sequence[Prompt], params: PolicyParams,
             rng: np.random.Generator) -> list[Episode]:
    """Sample one episode per entry of ``prompts`` (repeats allowed), vectorized over episodes."""
    n = len(prompts)
    pids = np.array([p.id for p in prompts], dtype=int)
    hashes = np.zeros(n, dtype=int)
    tokens = np.zeros((n, task.max_len), dtype=int)
    logps = np.zeros((n, task.max_len))
    for t in range(task.max_len):
        rows = params.row_indices(pids, np.full(n, t), hashes)
        probs, log_probs = softmax_rows(params.table[rows])
        acts = sample_rows(probs, rng)
        tokens[:, t] = acts
        logps[:, t] = log_probs[np.arange(n), acts]
        hashes = next_context_hash(hashes, acts, params.num_buckets)
    return [
        Episode(p, tokens[i].tolist(), verify(task, p, tokens[i]), logps[i].tolist())
        for i, p in enumerate(prompts)
    ]


def rollout(task: TaskSpec, prompt: Prompt, params: PolicyParams, rng: np.random.Generator) -> Episode:
    return generate(task, [prompt], params, rng)[0]


def episode_states(params: PolicyParams, prompt_id: int, tokens: Sequence[int]) -> np.ndarray:
    """Table rows visited while emitting ``tokens``."""
    rows = np.empty(len(tokens), dtype=int)
    h = 0
    for t, tok in enumerate(tokens):
        rows[t] = params.row_index((prompt_id, t, h))
        h = next_context_hash(h, int(tok), params.num_buckets)
    return rows


def enumerate_rewards(task: TaskSpec, prompt: Prompt) -> dict[tuple[int, ...], float]:
    """Brute-force reward table over every full-length sequence."""
    return {
        seq: verify(task, prompt, seq)
        for seq in itertools.product(range(task.vocab_size), repeat=task.max_len)
    }
