"""Tabular softmax sequence policy.

The policy keeps one logit row per (prompt, position, context bucket). The
context bucket is a rolling hash of the tokens emitted so far, so the table
size stays bounded while the policy can still condition on history.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

LOG_FLOOR = -745.0
PROB_FLOOR = 1e-300
HASH_MULT = 31


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")


class StateFeatures(NamedTuple):
    prompt_id: int
    position: int
    context_hash: int


@dataclass
class CategoricalDist:
    probs: np.ndarray
    log_probs: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "CategoricalDist":
        probs, log_probs = softmax_rows(np.asarray(logits, dtype=float)[None, :])
        return cls(probs[0], log_probs[0])

    @classmethod
    def from_probs(cls, probs) -> "CategoricalDist":
        probs = np.asarray(probs, dtype=float)
        with np.errstate(divide="ignore"):
            log_probs = np.where(probs > PROB_FLOOR, np.log(np.maximum(probs, PROB_FLOOR)), LOG_FLOOR)
        return cls(probs, log_probs)


def softmax_rows(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise max-subtracted softmax. Returns (probs, log_probs)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = np.maximum(shifted - log_z, LOG_FLOOR)
    probs = np.exp(shifted - log_z)
    probs = np.where(probs < PROB_FLOOR, 0.0, probs)
    return probs, log_probs


def next_context_hash(context_hash: int, token: int, num_buckets: int) -> int:
    return (context_hash * HASH_MULT + token + 1) % num_buckets


def context_hash_of(prefix: Sequence[int], num_buckets: int) -> int:
    h = 0
    for tok in prefix:
        h = next_context_hash(h, int(tok), num_buckets)
    return h


@dataclass
class PolicyParams:
    """Dense logit table of shape (num_prompts, max_len, num_buckets, K)."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.ndim != 4:
            raise ValueError("logits must have shape (num_prompts, max_len, num_buckets, K)")
        if self.logits.shape[-1] < 2:
            raise ValueError("vocab size must be >= 2")

    @classmethod
    def zeros(cls, num_prompts: int, max_len: int, num_buckets: int, vocab_size: int) -> "PolicyParams":
        return cls(np.zeros((num_prompts, max_len, num_buckets, vocab_size)))

    @property
    def num_prompts(self) -> int:
        return self.logits.shape[0]

    @property
    def max_len(self) -> int:
        return self.logits.shape[1]

    @property
    def num_buckets(self) -> int:
        return self.logits.shape[2]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[3]

    @property
    def table(self) -> np.ndarray:
        """(rows, K) view of the logits."""
        return self.logits.reshape(-1, self.vocab_size)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy())

    def row_index(self, state: StateFeatures) -> int:
        p, t, h = state
        if not (0 <= p < self.num_prompts and 0 <= t < self.max_len and 0 <= h < self.num_buckets):
            raise IndexError(f"state {tuple(state)} out of range for table {self.logits.shape[:3]}")
        return (p * self.max_len + t) * self.num_buckets + h

    def row_indices(self, prompt_ids, positions, hashes) -> np.ndarray:
        return np.ravel_multi_index(
            (np.asarray(prompt_ids), np.asarray(positions), np.asarray(hashes)), self.logits.shape[:3]
        )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "num_buckets": self.num_buckets,
            "max_len": self.max_len,
            "num_prompts": self.num_prompts,
            "logits": self.logits.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyParams":
        shape = (doc["num_prompts"], doc["max_len"], doc["num_buckets"], doc["vocab_size"])
        flat = np.asarray(doc["logits"], dtype=float)
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"logit count {flat.size} does not match header shape {shape}")
        return cls(flat.reshape(shape))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "PolicyParams":
        return cls.from_dict(json.loads(text))


class SparseRowGrad(NamedTuple):
    """Gradient that is zero outside one logit row."""

    row: int
    values: np.ndarray

    def to_dense(self, params: PolicyParams) -> np.ndarray:
        out = np.zeros_like(params.logits)
        out.reshape(-1, params.vocab_size)[self.row] = self.values
        return out


def dist(params: PolicyParams, state: StateFeatures) -> CategoricalDist:
    row = params.table[params.row_index(state)]
    return CategoricalDist.from_logits(row)


def log_prob(params: PolicyParams, state: StateFeatures, action: int) -> float:
    if not 0 <= action < params.vocab_size:
        raise IndexError(f"action {action} out of range for K={params.vocab_size}")
    return float(dist(params, state).log_probs[action])


def sample(d: CategoricalDist, rng: np.random.Generator) -> int:
    """Inverse-CDF draw consuming exactly one uniform from ``rng``."""
    return int(sample_rows(d.probs[None, :], rng)[0])


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= u[:, None] * cdf[:, -1:]).sum(axis=1)
    # guard against idx == K from round-off; fall back to the last nonzero cell
    over = idx >= probs.shape[1]
    if over.any():
        idx[over] = [np.flatnonzero(p)[-1] for p in probs[over]]
    return idx


def grad_log_prob(params: PolicyParams, state: StateFeatures, action: int) -> SparseRowGrad:
    row = params.row_index(state)
    d = CategoricalDist.from_logits(params.table[row])
    g = -d.probs.copy()
    g[action] += 1.0
    return SparseRowGrad(row, g)


def finite_diff_grad(params: PolicyParams, state: StateFeatures, action: int, h: float) -> SparseRowGrad:
    """Central-difference oracle for ``grad_log_prob`` over the active row."""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    row = params.row_index(state)
    base = params.table[row].copy()
    g = np.empty_like(base)
    for j in range(base.size):
        up = base.copy()
        up[j] += h
        dn = base.copy()
        dn[j] -= h
        g[j] = (_row_logp(up, action) - _row_logp(dn, action)) / (2 * h)
    return SparseRowGrad(row, g)


def _row_logp(row: np.ndarray, action: int) -> float:
    m = row.max()
    return float(row[action] - m - np.log(np.exp(row - m).sum()))


def token_log_probs(params: PolicyParams, rows: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """log pi(action | row) for aligned arrays of table rows and actions."""
    _, logp = softmax_rows(params.table[rows])
    return logp[np.arange(len(rows)), actions]
