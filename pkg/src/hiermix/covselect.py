"""Per-object Gaussian-mixture fits under four covariance structures,
ranked by BIC.

Structures: (i) diagonal, shared across components; (ii) diagonal, free;
(iii) full, shared; (iv) full, free. BIC here is log L - (nu/2) log n, so
higher is better and the most parsimonious adequate structure wins.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .model import ModelError

LOG_2PI = math.log(2.0 * math.pi)


class CovarianceStructure(enum.Enum):
    DIAG_TIED = "i"
    DIAG_FREE = "ii"
    FULL_TIED = "iii"
    FULL_FREE = "iv"


STRUCTURES = tuple(CovarianceStructure)


@dataclass(frozen=True)
class MixtureFit:
    structure: CovarianceStructure
    n_components: int
    weights: np.ndarray
    means: np.ndarray            # (K, d)
    covariances: np.ndarray      # (K, d, d), duplicated across K when tied
    log_likelihood: float
    n_parameters: int
    bic: float
    n_iterations: int
    converged: bool
    floored: bool


def n_parameters(structure: CovarianceStructure, k: int, d: int) -> int:
    """Free parameters: weights (K-1) + means (K d) + covariance block."""
    base = (k - 1) + k * d
    if structure is CovarianceStructure.DIAG_TIED:
        return base + d
    if structure is CovarianceStructure.DIAG_FREE:
        return base + k * d
    if structure is CovarianceStructure.FULL_TIED:
        return base + d * (d + 1) // 2
    return base + k * d * (d + 1) // 2


def bic(log_likelihood: float, structure: CovarianceStructure, k: int,
        d: int, sample_size: int) -> float:
    nu = n_parameters(structure, k, d)
    return log_likelihood - 0.5 * nu * math.log(sample_size)


def _kmeanspp_means(points: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min([np.sum((points - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(points[int(rng.integers(n))])
        else:
            centers.append(points[int(rng.choice(n, p=d2 / total))])
    return np.array(centers)


def _log_gaussians(points: np.ndarray, means: np.ndarray,
                   covs: np.ndarray) -> np.ndarray:
    """(n, K) matrix of multivariate normal log-densities."""
    n, d = points.shape
    k = means.shape[0]
    out = np.empty((n, k))
    for j in range(k):
        chol = np.linalg.cholesky(covs[j])
        sol = solve_triangular(chol, (points - means[j]).T, lower=True)
        maha = (sol ** 2).sum(axis=0)
        logdet = 2.0 * float(np.log(np.diag(chol)).sum())
        out[:, j] = -0.5 * (d * LOG_2PI + logdet + maha)
    return out


def _m_step_cov(points, resp, means, structure, floor):
    n, d = points.shape
    k = means.shape[0]
    nk = resp.sum(axis=0)
    covs = np.empty((k, d, d))
    if structure in (CovarianceStructure.DIAG_TIED, CovarianceStructure.DIAG_FREE):
        per = np.empty((k, d))
        for j in range(k):
            dev = points - means[j]
            per[j] = (resp[:, j, None] * dev * dev).sum(axis=0) / max(nk[j], 1e-300)
        if structure is CovarianceStructure.DIAG_TIED:
            pooled = (per * nk[:, None]).sum(axis=0) / n
            per = np.broadcast_to(pooled, (k, d)).copy()
        per = np.maximum(per, floor)
        for j in range(k):
            covs[j] = np.diag(per[j])
        floored = bool(np.any(per <= floor * (1 + 1e-12)))
        return covs, floored
    full = np.empty((k, d, d))
    for j in range(k):
        dev = points - means[j]
        full[j] = (resp[:, j, None, None] * dev[:, :, None] * dev[:, None, :]
                   ).sum(axis=0) / max(nk[j], 1e-300)
    if structure is CovarianceStructure.FULL_TIED:
        pooled = (full * nk[:, None, None]).sum(axis=0) / n
        full = np.broadcast_to(pooled, (k, d, d)).copy()
    floored = False
    for j in range(k):
        sym = 0.5 * (full[j] + full[j].T)
        vals, vecs = np.linalg.eigh(sym)
        if np.any(vals < floor):
            floored = True
            vals = np.maximum(vals, floor)
        covs[j] = (vecs * vals) @ vecs.T
    return covs, floored


def fit_em(points: np.ndarray, k: int, structure: CovarianceStructure,
           restarts: int = 10, rng: np.random.Generator | None = None,
           max_iter: int = 500, tol: float = 1e-8) -> MixtureFit:
    """Best-of-restarts EM fit with the covariance structure enforced
    at every M-step. Raises when every restart degenerates."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ModelError("points must be an (n, d) array")
    n, d = points.shape
    if k < 1:
        raise ModelError("need at least one component")
    if n <= k:
        raise ModelError(f"need more points ({n}) than components ({k})")
    if rng is None:
        rng = np.random.default_rng(0)
    floor = 1e-6 * float(np.maximum(points.var(axis=0).max(), 1e-12))

    best: MixtureFit | None = None
    failures: list[str] = []
    for _ in range(max(1, restarts)):
        try:
            fit = _fit_once(points, k, structure, rng, max_iter, tol, floor)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            failures.append(str(exc))
            continue
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    if best is None:
        raise ModelError(
            f"all {restarts} EM restarts degenerated: {failures[-1] if failures else ''}")
    return best


def _fit_once(points, k, structure, rng, max_iter, tol, floor):
    n, d = points.shape
    means = _kmeanspp_means(points, k, rng)
    means = means + rng.normal(0.0, 1e-8, size=means.shape)
    weights = np.full(k, 1.0 / k)
    base = np.diag(np.maximum(points.var(axis=0), floor))
    covs = np.broadcast_to(base, (k, d, d)).copy()
    prev = -math.inf
    floored = False
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        logp = _log_gaussians(points, means, covs) + np.log(weights)
        norm = logsumexp(logp, axis=1)
        loglik = float(norm.sum())
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-10):
            raise ValueError("degenerate (empty) component")
        weights = nk / n
        means = (resp.T @ points) / nk[:, None]
        covs, fl = _m_step_cov(points, resp, means, structure, floor)
        floored = floored or fl
        if loglik - prev < tol * max(1.0, abs(loglik)) and it > 1:
            converged = True
            prev = loglik
            break
        prev = loglik
    logp = _log_gaussians(points, means, covs) + np.log(weights)
    loglik = float(logsumexp(logp, axis=1).sum())
    order = np.argsort(means[:, 0], kind="stable")
    return MixtureFit(
        structure=structure, n_components=k,
        weights=weights[order], means=means[order], covariances=covs[order],
        log_likelihood=loglik,
        n_parameters=n_parameters(structure, k, d),
        bic=bic(loglik, structure, k, d, n),
        n_iterations=it, converged=converged, floored=floored,
    )


@dataclass(frozen=True)
class StructureRanking:
    """Best fit per structure plus the BIC ranking (best first)."""

    fits: dict
    ranking: tuple[CovarianceStructure, ...]

    @property
    def winner(self) -> CovarianceStructure:
        return self.ranking[0]


def select_structure(points: np.ndarray, k_range=range(1, 11),
                     restarts: int = 10,
                     rng: np.random.Generator | None = None) -> StructureRanking:
    """Maximize BIC over K for each structure, then rank the structures."""
    if rng is None:
        rng = np.random.default_rng(0)
    points = np.asarray(points, dtype=float)
    ks = [k for k in k_range if k < points.shape[0]]
    if not ks:
        raise ModelError("not enough points for any K in the range")
    fits: dict[CovarianceStructure, MixtureFit] = {}
    for structure in STRUCTURES:
        best = None
        for k in ks:
            try:
                fit = fit_em(points, k, structure, restarts=restarts, rng=rng)
            except ModelError:
                continue
            if best is None or fit.bic > best.bic:
                best = fit
        if best is None:
            raise ModelError(f"no K produced a usable fit for structure {structure}")
        fits[structure] = best
    ranking = tuple(sorted(
        fits, key=lambda s: (-fits[s].bic, STRUCTURES.index(s))))
    return StructureRanking(fits=fits, ranking=ranking)
