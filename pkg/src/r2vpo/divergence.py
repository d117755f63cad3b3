"""Exact divergences between categorical distributions and the ratio-variance proxy.

Everything here works on full probability vectors, so the quadratic
approximation JS ~ E[(rho - 1)^2] / 8 can be checked without sampling noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .policy import CategoricalDist

FORWARD = "forward"
REVERSE = "reverse"


class InfiniteRatioError(ValueError):
    """Behaviour probability is zero where the target policy has mass."""


@dataclass
class DivergenceReport:
    js_exact: float
    variance_proxy: float
    quadratic_estimate: float
    residual: float
    kl_forward: float
    kl_reverse: float
    half_variance: float
    max_ratio_dev: float = 0.0
    flags: tuple[str, ...] = field(default_factory=tuple)


def _probs(d) -> np.ndarray:
    return np.asarray(d.probs if isinstance(d, CategoricalDist) else d, dtype=float)


def _xlogy_ratio(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x * log(x / y) with 0 log 0 = 0.

    Cells where y underflowed to 0 while x is subnormal contribute ~1e-323 and are dropped.
    """
    out = np.zeros_like(x)
    m = (x > 0) & (y > 0)
    out[m] = x[m] * (np.log(x[m]) - np.log(y[m]))
    return out


def _entropy(p: np.ndarray) -> float:
    m = p > 0
    return float(-(p[m] * np.log(p[m])).sum())


def _check_pair(p: np.ndarray, q: np.ndarray):
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")


def js_exact(p, q) -> float:
    """Jensen-Shannon divergence by its two-KL-to-the-mixture definition (nats)."""
    p, q = _probs(p), _probs(q)
    _check_pair(p, q)
    m = 0.5 * (p + q)
    # summing the two halves in a fixed order keeps js(p, q) == js(q, p) bit-exactly
    a = _xlogy_ratio(p, m).sum()
    b = _xlogy_ratio(q, m).sum()
    val = 0.5 * (a + b)
    return float(min(max(val, 0.0), math.log(2)))


def js_mixture_entropy(p, q) -> float:
    """Second route to JS: H(m) - H(p)/2 - H(q)/2."""
    p, q = _probs(p), _probs(q)
    _check_pair(p, q)
    return _entropy(0.5 * (p + q)) - 0.5 * _entropy(p) - 0.5 * _entropy(q)


def kl(p, q, direction: str = FORWARD) -> float:
    """KL(p || q) for ``forward``, KL(q || p) for ``reverse``; +inf when support is violated."""
    p, q = _probs(p), _probs(q)
    _check_pair(p, q)
    if direction == REVERSE:
        p, q = q, p
    elif direction != FORWARD:
        raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")
    if np.any((p > 0) & (q <= 0)):
        return math.inf
    return float(max(_xlogy_ratio(p, q).sum(), 0.0))


def policy_ratio(p_theta, p_off) -> np.ndarray:
    pt, po = _probs(p_theta), _probs(p_off)
    _check_pair(pt, po)
    bad = (po <= 0) & (pt > 0)
    if bad.any():
        raise InfiniteRatioError(f"p_off is zero where p_theta > 0 at indices {np.flatnonzero(bad).tolist()}")
    rho = np.ones_like(pt)
    m = po > 0
    rho[m] = pt[m] / po[m]
    return rho


def variance_proxy(p_theta, p_off) -> float:
    """E_{a ~ p_off}[(rho(a) - 1)^2]."""
    rho = policy_ratio(p_theta, p_off)
    po = _probs(p_off)
    return float((po * (rho - 1.0) ** 2).sum())


def second_moment_minus_one(p_theta, p_off) -> float:
    """E[rho^2] - 1, which equals the proxy whenever E[rho] = 1."""
    rho = policy_ratio(p_theta, p_off)
    return float((_probs(p_off) * rho**2).sum() - 1.0)


def report(p_theta, p_off) -> DivergenceReport:
    js = js_exact(p_theta, p_off)
    var = variance_proxy(p_theta, p_off)
    kf = kl(p_theta, p_off, FORWARD)
    kr = kl(p_theta, p_off, REVERSE)
    flags = tuple(name for name, v in (("kl_forward_inf", kf), ("kl_reverse_inf", kr)) if math.isinf(v))
    rho = policy_ratio(p_theta, p_off)
    return DivergenceReport(
        js_exact=js,
        variance_proxy=var,
        quadratic_estimate=var / 8.0,
        residual=js - var / 8.0,
        kl_forward=kf,
        kl_reverse=kr,
        half_variance=var / 2.0,
        max_ratio_dev=float(np.abs(rho - 1.0).max()),
        flags=flags,
    )


def tilt(p_off: np.ndarray, direction: np.ndarray, t: float) -> np.ndarray:
    """Exponentially tilt p_off along ``direction`` with strength t and renormalize."""
    logits = np.log(p_off) + t * direction
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def perturb_to_scale(p_off: np.ndarray, direction: np.ndarray, scale: float, tol: float = 1e-13) -> np.ndarray:
    """Tilt p_off so that max|rho - 1| equals ``scale`` (bisection on the tilt strength)."""
    direction = direction - direction.mean()

    def dev(t):
        return np.abs(tilt(p_off, direction, t) / p_off - 1.0).max()

    hi = 1.0
    while dev(hi) < scale:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if dev(mid) < scale:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * hi:
            break
    return tilt(p_off, direction, lo)


def lemma_probe(p_off, perturbation_scale: float, trials: int,
                 rng: np.random.Generator) -> list[DivergenceReport]:
    """Compare exact JS with the quadratic ratio-variance estimate near ``p_off``.

    Each trial tilts the logits of ``p_off`` along a random Gaussian direction,
    with the tilt sized so that max|rho - 1| hits ``perturbation_scale``.
    """
    if perturbation_scale <= 0:
        raise ValueError("perturbation_scale must be positive")
    po = _probs(p_off)
    out = []
    for _ in range(trials):
        u = rng.standard_normal(po.size)
        pt = perturb_to_scale(po, u, perturbation_scale)
        out.append(report(pt, po))
    return out


def random_categorical(rng: np.random.Generator, k: int, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(k, concentration))


def js_generator(u: float) -> float:
    """f-divergence generator of JS: D_JS(p||q) = sum_a q(a) f(p(a)/q(a))."""
    if u == 0:
        return 0.5 * math.log(2.0)
    return 0.5 * u * math.log(u) + 0.5 * (u + 1.0) * math.log(2.0 / (u + 1.0))


def js_generator_check(h1: float = 1e-5, h2: float = 1e-4) -> dict[str, float]:
    """Value, slope and curvature of the JS generator at u = 1 by central differences."""
    f = js_generator
    return {
        "f(1)": f(1.0),
        "f'(1)": (f(1.0 + h1) - f(1.0 - h1)) / (2 * h1),
        "f''(1)": (f(1.0 + h2) - 2 * f(1.0) + f(1.0 - h2)) / h2**2,
    }


def probe_scales(scales, trials: int, seed: int, vocab_size: int = 8):
    """Run the probe at each scale over the same random (p_off, direction) draws.

    Returns {scale: [(p_off, p_theta, report), ...]}. Reusing the draws across
    scales makes the residual ratio between neighbouring scales a clean
    measurement of the expansion order.
    """
    out = {}
    for scale in scales:
        rng = np.random.default_rng(seed)
        rows = []
        for _ in range(trials):
            po = random_categorical(rng, vocab_size)
            u = rng.standard_normal(vocab_size)
            pt = perturb_to_scale(po, u, scale)
            rows.append((po, pt, report(pt, po)))
        out[scale] = rows
    return out
