"""Probability of random correspondence (PRC) and posterior summaries.

The match count between two prints with m and n minutiae, drawn from group
densities q1 and q2, is approximated as Poisson with mean m*n*p(q1, q2),
where p is the probability that independent draws from q1 and q2 land
within the same axis-aligned square of side 2*r0. For mixtures of
independent normals p has a closed form: the density of the difference of
the two mixtures at zero times the square's area, mixed over component
pairs. The population mean PRC weights the Poisson tails of every ordered
group pair by their weight product.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc

from .model import GroupParams, HierParams, ModelError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PrcQuery:
    """One (w, m, n, r0) query: observed matches, minutiae counts, tolerance."""

    w: int
    m: int
    n: int
    r0: float

    def __post_init__(self):
        if self.r0 <= 0:
            raise ModelError("match radius r0 must be positive")
        if self.w < 0 or self.m < 0 or self.n < 0:
            raise ModelError("w, m, n must be non-negative")
        if self.w > min(self.m, self.n):
            warnings.warn(
                f"query w={self.w} exceeds min(m, n)={min(self.m, self.n)}; "
                "the PRC is still defined but the query is unusual",
                stacklevel=2,
            )


@dataclass(frozen=True)
class PrcSummary:
    """Posterior mean and HPD interval of the mean PRC for one query."""

    mean: float
    hpd_lo: float
    hpd_hi: float
    level: float
    n_samples: int
    values: np.ndarray


def _check_planar(group: GroupParams) -> None:
    if group.dim != 2:
        raise ModelError("PRC formulas require 2-d observations")


def match_probability(q1: GroupParams, q2: GroupParams, r0: float) -> float:
    """Closed-form small-r0 match probability between two group mixtures.

    4 r0^2 sum_k sum_k' p_k p_k' prod_b phi(0 | mu_k^b - mu_k'^b,
    var_k^b + var_k'^b), clamped to [0, 1]. The mixing factors do not
    appear in some textbook displays but are required for the expression
    to be the mixture integral; the Monte Carlo estimator confirms them.
    """
    if r0 <= 0:
        raise ModelError("match radius r0 must be positive")
    _check_planar(q1)
    _check_planar(q2)
    dmu = q1.means()[:, None, :] - q2.means()[None, :, :]      # (K1, K2, 2)
    svar = q1.variances()[:, None, :] + q2.variances()[None, :, :]
    log_phi = -0.5 * (np.log(TWO_PI * svar) + dmu * dmu / svar).sum(axis=2)
    logw = np.log(q1.mixing)[:, None] + np.log(q2.mixing)[None, :]
    m = float(np.max(log_phi + logw))
    total = math.exp(m) * float(np.exp(log_phi + logw - m).sum())
    p = 4.0 * r0 * r0 * total
    if p > 1.0:
        warnings.warn(
            f"closed-form match probability {p:.3g} exceeds 1; r0 is too "
            "large for the small-radius approximation, clamping",
            stacklevel=2,
        )
        return 1.0
    return max(p, 0.0)


def sample_group(rng: np.random.Generator, group: GroupParams,
                 size: int) -> np.ndarray:
    """Draw ``size`` points from a group mixture."""
    ks = rng.choice(group.n_components, size=size, p=group.mixing)
    means = group.means()[ks]
    sds = np.sqrt(group.variances()[ks])
    return means + sds * rng.standard_normal((size, group.dim))


def match_probability_mc(q1: GroupParams, q2: GroupParams, r0: float,
                         n_samples: int, rng: np.random.Generator
                         ) -> tuple[float, float]:
    """Monte Carlo estimate of the exact match integral, with its SE.

    Samples x ~ q1, y ~ q2 independently and counts |x - y| within the
    axis-aligned square of side 2 r0.
    """
    if n_samples < 1:
        raise ModelError("need at least one Monte Carlo sample")
    _check_planar(q1)
    _check_planar(q2)
    hits = 0
    chunk = 200_000
    done = 0
    while done < n_samples:
        take = min(chunk, n_samples - done)
        x = sample_group(rng, q1, take)
        y = sample_group(rng, q2, take)
        inside = np.all(np.abs(x - y) <= r0, axis=1)
        hits += int(inside.sum())
        done += take
    p_hat = hits / n_samples
    se = math.sqrt(max(p_hat * (1.0 - p_hat), 1.0 / n_samples) / n_samples)
    return p_hat, se


def expected_matches(q1: GroupParams, q2: GroupParams, m: int, n: int,
                     r0: float) -> float:
    """Poisson mean: m * n * match_probability."""
    if m < 0 or n < 0:
        raise ModelError("minutiae counts must be non-negative")
    if m == 0 or n == 0:
        return 0.0
    return m * n * match_probability(q1, q2, r0)


def poisson_tail(w: int, lam: float) -> float:
    """P(S >= w) for S ~ Poisson(lam), exact via the incomplete gamma."""
    if lam < 0:
        raise ModelError("Poisson mean must be non-negative")
    if w != int(w) or w < 0:
        raise ModelError("w must be a non-negative integer")
    w = int(w)
    if w == 0:
        return 1.0
    if lam == 0.0:
        return 0.0
    # P(S >= w) = P(Gamma(w) <= lam), the regularized lower incomplete gamma
    return float(gammainc(w, lam))


def _pair_lambdas(theta: HierParams, m: int, n: int, r0: float) -> np.ndarray:
    big_g = theta.n_groups
    lam = np.empty((big_g, big_g))
    for i in range(big_g):
        for j in range(i, big_g):
            lam[i, j] = expected_matches(theta.groups[i], theta.groups[j],
                                         m, n, r0)
            lam[j, i] = lam[i, j]
    return lam


def mean_prc(theta: HierParams, query: PrcQuery) -> float:
    """Population mean PRC: weight-squared mixture of per-pair Poisson tails.

    The double sum runs over all ordered group pairs including the diagonal
    (both prints may come from the same sub-population).
    """
    lam = _pair_lambdas(theta, query.m, query.n, query.r0)
    w = theta.weights
    if query.w == 0:
        tails = np.ones_like(lam)
    else:
        tails = gammainc(query.w, lam)
    return float((w[:, None] * w[None, :] * tails).sum())


def hpd_interval(samples, level: float) -> tuple[float, float]:
    """Shortest contiguous interval containing ceil(level * n) sorted points."""
    values = np.sort(np.asarray(samples, dtype=float))
    n = values.shape[0]
    if n == 0:
        raise ModelError("cannot compute an HPD interval of no samples")
    if not 0.0 < level < 1.0:
        raise ModelError("HPD level must be in (0, 1)")
    keep = int(math.ceil(level * n))
    if keep >= n:
        return float(values[0]), float(values[-1])
    widths = values[keep:] - values[:n - keep]
    start = int(np.argmin(widths))
    return float(values[start]), float(values[start + keep])


def posterior_prc(thetas, query: PrcQuery, level: float = 0.95) -> PrcSummary:
    """Evaluate the mean PRC at every posterior draw and summarize.

    ``thetas`` is any iterable of HierParams (for example the thetas of a
    chain trace). One trace supports any number of (w, m, n) queries with
    no re-sampling.
    """
    values = np.array([mean_prc(t, query) for t in thetas])
    if values.shape[0] == 0:
        raise ModelError("empty posterior sample")
    lo, hi = hpd_interval(values, level)
    return PrcSummary(mean=float(values.mean()), hpd_lo=lo, hpd_hi=hi,
                      level=level, n_samples=values.shape[0], values=values)
