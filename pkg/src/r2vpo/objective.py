"""Surrogate objectives and their exact parameter gradients.

Every loss here is written per token as a function of the policy ratio rho and
the frozen advantage A. Its derivative in theta is always
``coef * grad log pi(a|s)`` because d rho / d theta = rho * grad log pi, so a
loss only has to supply the per-token coefficient.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .policy import PolicyParams, softmax_rows, token_log_probs

LOG_RATIO_CLAMP = 20.0

CLIP = "clip"
R2VPO = "r2vpo"
TOKEN_MEAN = "token_mean"
SEQUENCE_MEAN = "sequence_mean"


@dataclass
class TokenBatch:
    """Flat per-token arrays. ``rows`` index the policy table, ``seq_ids`` group tokens into sequences."""

    rows: np.ndarray
    actions: np.ndarray
    logp_off: np.ndarray
    advantage: np.ndarray
    seq_ids: np.ndarray
    prompt_ids: np.ndarray
    logp_theta: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.rows)
        for name in ("actions", "logp_off", "advantage", "seq_ids", "prompt_ids"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"TokenBatch field {name} has length {len(getattr(self, name))}, expected {n}")
        if not (np.all(np.isfinite(self.logp_off)) and np.all(np.isfinite(self.advantage))):
            raise ValueError("TokenBatch contains non-finite values")

    def __len__(self):
        return len(self.rows)

    def evaluated(self, params: PolicyParams) -> "TokenBatch":
        return replace(self, logp_theta=token_log_probs(params, self.rows, self.actions))

    @classmethod
    def single(cls, row: int, action: int, logp_off: float, advantage: float) -> "TokenBatch":
        return cls(np.array([row]), np.array([action]), np.array([logp_off]),
                   np.array([advantage], dtype=float), np.array([0]), np.array([0]))


@dataclass
class LossHyper:
    kind: str = R2VPO
    eps_low: float = 0.2
    eps_high: float = 0.2
    lam: float = 0.04
    trust_delta: float = 0.01
    aggregation: str = TOKEN_MEAN


@dataclass
class LossReport:
    loss_value: float
    grad_coefficients: np.ndarray
    ratio_variance_estimate: float
    clipped_fraction: float
    clamp_events: int = 0
    sign_flip_fraction: float = 0.0
    clipped_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))


def ratio(logp_theta, logp_off):
    """exp of the clamped log-ratio. Returns (rho, clamped) with the same shape as the inputs."""
    d = np.asarray(logp_theta, dtype=float) - np.asarray(logp_off, dtype=float)
    clamped = np.abs(d) > LOG_RATIO_CLAMP
    rho = np.exp(np.clip(d, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    if rho.ndim == 0:
        return float(rho), bool(clamped)
    return rho, clamped


def token_weights(batch: TokenBatch, aggregation: str = TOKEN_MEAN) -> np.ndarray:
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if aggregation == TOKEN_MEAN:
        return np.full(n, 1.0 / n)
    if aggregation == SEQUENCE_MEAN:
        _, inverse, counts = np.unique(batch.seq_ids, return_inverse=True, return_counts=True)
        return 1.0 / (len(counts) * counts[inverse])
    raise ValueError(f"unknown aggregation {aggregation!r}")


def _require_logp(batch: TokenBatch) -> np.ndarray:
    if batch.logp_theta is None:
        raise ValueError("batch has no logp_theta; call batch.evaluated(params) first")
    return batch.logp_theta


def clip_branch_table(rho: np.ndarray, adv: np.ndarray, eps_low: float, eps_high: float):
    """Per-token objective and coefficient for min(rho A, clip(rho) A).

    Returns (objective, coef, clipped). A token is clipped when the clipped
    branch is the binding one; ties at the boundary count as clipped.
    """
    lo, hi = 1.0 - eps_low, 1.0 + eps_high
    unclipped = rho * adv
    clipped_obj = np.clip(rho, lo, hi) * adv
    objective = np.minimum(unclipped, clipped_obj)
    clipped = ((adv > 0) & (rho >= hi)) | ((adv < 0) & (rho <= lo))
    coef = np.where(clipped, 0.0, unclipped)
    return objective, coef, clipped


def grpo_clip_loss(batch: TokenBatch, eps_low: float = 0.2, eps_high: float = 0.2,
                   aggregation: str = TOKEN_MEAN) -> LossReport:
    if eps_low <= 0 or eps_high <= 0:
        raise ValueError("clip widths must be positive")
    rho, clamped = ratio(_require_logp(batch), batch.logp_off)
    adv = batch.advantage
    w = token_weights(batch, aggregation)
    objective, coef, clipped = clip_branch_table(rho, adv, eps_low, eps_high)
    coef = np.where(clamped, 0.0, coef)
    return LossReport(
        loss_value=float(np.dot(w, objective)),
        grad_coefficients=coef,
        ratio_variance_estimate=float(np.dot(w, (rho - 1.0) ** 2)),
        clipped_fraction=float(clipped.mean()),
        clamp_events=int(clamped.sum()),
        clipped_mask=clipped,
        ratios=rho,
    )


def r2vpo_loss(batch: TokenBatch, lam: float, trust_delta: float,
               aggregation: str = TOKEN_MEAN) -> LossReport:
    """Lagrangian rho A - lam((rho - 1)^2 - delta), token-averaged."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    rho, clamped = ratio(_require_logp(batch), batch.logp_off)
    adv = batch.advantage
    w = token_weights(batch, aggregation)
    dev = rho - 1.0
    objective = rho * adv - lam * (dev**2 - trust_delta)
    regularized = adv - 2.0 * lam * dev
    coef = np.where(clamped, 0.0, regularized * rho)
    flips = (np.sign(regularized) != np.sign(adv)) & (adv != 0)
    return LossReport(
        loss_value=float(np.dot(w, objective)),
        grad_coefficients=coef,
        ratio_variance_estimate=float(np.dot(w, dev**2)),
        clipped_fraction=0.0,
        clamp_events=int(clamped.sum()),
        sign_flip_fraction=float(flips.mean()),
        clipped_mask=np.zeros(len(batch), dtype=bool),
        ratios=rho,
    )


def compute_loss(batch: TokenBatch, hyper: LossHyper) -> LossReport:
    if hyper.kind == CLIP:
        return grpo_clip_loss(batch, hyper.eps_low, hyper.eps_high, hyper.aggregation)
    if hyper.kind == R2VPO:
        return r2vpo_loss(batch, hyper.lam, hyper.trust_delta, hyper.aggregation)
    raise ValueError(f"unknown loss kind {hyper.kind!r}")


def accumulate_gradient(params: PolicyParams, batch: TokenBatch, token_scale: np.ndarray) -> np.ndarray:
    """sum_t token_scale[t] * grad log pi(a_t|s_t), accumulated in batch order."""
    probs, _ = softmax_rows(params.table[batch.rows])
    contrib = -probs * token_scale[:, None]
    contrib[np.arange(len(batch)), batch.actions] += token_scale
    grad = np.zeros_like(params.table)
    np.add.at(grad, batch.rows, contrib)
    return grad.reshape(params.logits.shape)


def loss_gradient(batch: TokenBatch, params: PolicyParams, hyper: LossHyper) -> tuple[np.ndarray, LossReport]:
    """Gradient of the surrogate (to be ascended) with respect to the logit table."""
    batch = batch.evaluated(params)
    rep = compute_loss(batch, hyper)
    w = token_weights(batch, hyper.aggregation)
    return accumulate_gradient(params, batch, w * rep.grad_coefficients), rep


def surrogate_value(params: PolicyParams, batch: TokenBatch, hyper: LossHyper) -> float:
    return compute_loss(batch.evaluated(params), hyper).loss_value


def finite_diff_loss_gradient(params: PolicyParams, batch: TokenBatch, hyper: LossHyper,
                              h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar loss over every logit in the rows the batch touches."""
    grad = np.zeros_like(params.logits)
    flat = grad.reshape(-1, params.vocab_size)
    for row in np.unique(batch.rows):
        for j in range(params.vocab_size):
            up = params.copy()
            up.table[row, j] += h
            dn = params.copy()
            dn.table[row, j] -= h
            flat[row, j] = (surrogate_value(up, batch, hyper) - surrogate_value(dn, batch, hyper)) / (2 * h)
    return grad
