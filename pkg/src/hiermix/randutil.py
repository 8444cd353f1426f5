"""Sampling helpers shared by the sampler and the trans-dimensional moves."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import log_ndtr, ndtri

from .model import ModelError


class NumericalError(RuntimeError):
    """Raised when a sampling routine cannot produce a finite draw."""


def log_normal_cdf_diff(a: float, b: float) -> float:
    """log(Phi(b) - Phi(a)) for a < b, stable in both tails."""
    if b <= a:
        return -math.inf
    if a == -math.inf and b == math.inf:
        return 0.0
    # reflect so the work happens in the lower tail, where log_ndtr is exact
    if a > 0.0:
        a, b = -b, -a
    la = log_ndtr(a) if a > -math.inf else -math.inf
    lb = log_ndtr(b)
    if la == -math.inf:
        return float(lb)
    diff = la - lb
    if diff >= 0.0:
        return -math.inf
    return float(lb + math.log1p(-math.exp(diff)))


def truncnorm_logpdf(x: float, mean: float, sd: float, lo: float, hi: float) -> float:
    if not lo < hi:
        return -math.inf
    if not lo <= x <= hi:
        return -math.inf
    a, b = (lo - mean) / sd, (hi - mean) / sd
    z = (x - mean) / sd
    log_norm = log_normal_cdf_diff(a, b)
    if log_norm == -math.inf:
        return -math.inf
    return -0.5 * (math.log(2.0 * math.pi) + z * z) - math.log(sd) - log_norm


def truncnorm_sample(rng: np.random.Generator, mean: float, sd: float,
                     lo: float, hi: float) -> float:
    """Inverse-CDF draw from N(mean, sd^2) restricted to (lo, hi)."""
    if not lo < hi:
        raise NumericalError(f"empty truncation interval ({lo}, {hi})")
    a, b = (lo - mean) / sd, (hi - mean) / sd
    # work on the side where the CDF has resolution
    flip = a > 0.0
    if flip:
        a, b = -b, -a
    fa = math.exp(log_ndtr(a)) if a > -math.inf else 0.0
    fb = math.exp(log_ndtr(b)) if b < math.inf else 1.0
    u = rng.uniform(fa, fb)
    if 0.0 < u < 1.0:
        z = float(ndtri(u))
    else:
        z = a if u <= 0.0 else b
    if flip:
        z = -z
    x = mean + sd * z
    # interval can collapse to ~zero width in extreme tails; clamp inside
    if not lo < x < hi:
        x = min(max(x, math.nextafter(lo, hi)), math.nextafter(hi, lo))
    if not math.isfinite(x):
        raise NumericalError("truncated-normal draw is not finite")
    return x


def categorical_from_logits(rng: np.random.Generator, logits: np.ndarray) -> tuple[int, float]:
    """Draw an index with P(k) prop. to exp(logits[k]); returns (k, log P(k))."""
    m = float(np.max(logits))
    if not math.isfinite(m):
        raise NumericalError("all-zero categorical weights (log-weights all -inf)")
    p = np.exp(logits - m)
    total = p.sum()
    p /= total
    k = int(rng.choice(p.shape[0], p=p))
    return k, float(math.log(p[k]))


def categorical_logprob(logits: np.ndarray, k: int) -> float:
    """log P(k) under the normalized exp(logits) distribution."""
    m = float(np.max(logits))
    if not math.isfinite(m):
        raise NumericalError("all-zero categorical weights")
    logz = m + math.log(np.exp(logits - m).sum())
    return float(logits[k] - logz)


def dirichlet_sample(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    """Dirichlet draw with strictly positive entries (retry on underflow)."""
    for _ in range(1000):
        x = rng.dirichlet(conc)
        if np.all(x > 0.0):
            return x
    raise NumericalError("Dirichlet sampler kept producing zero coordinates")


def spaced_ascending(rng: np.random.Generator, values: np.ndarray) -> np.ndarray:
    """Sort and minimally separate values so strict ascent holds."""
    out = np.sort(np.asarray(values, dtype=float))
    for i in range(1, out.shape[0]):
        if out[i] <= out[i - 1]:
            out[i] = math.nextafter(out[i - 1], math.inf)
    return out


def check_move_probabilities(probs) -> None:
    for name, p in probs.items():
        if not 0.0 <= p <= 1.0:
            raise ModelError(f"move probability {name}={p} outside [0, 1]")
