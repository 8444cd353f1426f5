"""Multi-chain convergence assessment via variance decompositions of the
log-likelihood sequence.

At each checkpoint, all draws up to that iteration are pooled across chains
and decomposed three ways: by chain, by visited model, and by chain-within-
model. Convergence shows up as the paired curves merging: the within-chain
variance approaches the total, within-chain-within-model approaches
within-model, and between-model-within-chain approaches between-model.

All variances use the total-sum-of-squares convention (divide by the pooled
draw count), so the one-way ANOVA identities hold exactly with cell-size
weighting: B_m = V - W_m and B_mW_c = W_c - W_mW_c.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError


@dataclass(frozen=True)
class DiagnosticRecord:
    iteration: int
    v_hat: float        # total variance of the pooled draws
    w_c: float          # mean within-chain variance
    w_m: float          # mean within-model variance
    w_m_w_c: float      # mean within-(chain x model) variance
    b_m: float          # between-model variance (v_hat - w_m)
    b_m_w_c: float      # between-model within-chain variance (w_c - w_m_w_c)
    singleton_cells: int


@dataclass(frozen=True)
class DiagnosticSeries:
    records: tuple[DiagnosticRecord, ...]
    n_chains: int
    group_by: str       # "model" (G and K-vector) or "g" (G only)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def _within_variance(values: np.ndarray, cells: np.ndarray,
                     n_cells: int) -> tuple[float, int]:
    """Cell-size-weighted mean within-cell variance (TSS convention).

    Cells with a single draw contribute zero within-variance; their count is
    reported so callers can flag them. ``cells`` must hold dense ids in
    [0, n_cells).
    """
    counts = np.bincount(cells, minlength=n_cells)
    sums = np.bincount(cells, weights=values, minlength=n_cells)
    sq = np.bincount(cells, weights=values * values, minlength=n_cells)
    occupied = counts > 0
    singles = int((counts == 1).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        ss = sq[occupied] - sums[occupied] ** 2 / counts[occupied]
    return float(np.maximum(ss, 0.0).sum()) / values.shape[0], singles


def compute_diagnostics(chains_loglik, chains_model, checkpoints=None,
                        group_by: str = "model") -> DiagnosticSeries:
    """Variance components of the log-likelihood at each checkpoint.

    ``chains_loglik``: one 1-d array per chain (truncated to the shortest);
    ``chains_model``: the per-iteration model indicators, one sequence per
    chain. ``group_by`` chooses the model-cell definition: the full
    (G, K-vector) tuple or G alone.
    """
    if len(chains_loglik) < 2:
        raise ModelError("need at least two chains for convergence diagnostics")
    if len(chains_loglik) != len(chains_model):
        raise ModelError("log-likelihood and model series count mismatch")
    length = min(len(c) for c in chains_loglik)
    if length == 0:
        raise ModelError("empty chains")
    lls = [np.asarray(c[:length], dtype=float) for c in chains_loglik]
    if group_by == "model":
        models = [[_hashable(m) for m in c[:length]] for c in chains_model]
    elif group_by == "g":
        models = [[_g_of(m) for m in c[:length]] for c in chains_model]
    else:
        raise ModelError(f"unknown group_by {group_by!r}")
    if checkpoints is None:
        step = max(1, length // 20)
        checkpoints = list(range(step, length + 1, step))
        if checkpoints[-1] != length:
            checkpoints.append(length)
    checkpoints = sorted(set(int(t) for t in checkpoints))
    if any(t < 1 or t > length for t in checkpoints):
        raise ModelError("checkpoints must lie in [1, chain length]")

    n_chains = len(lls)
    dense: dict = {}
    model_ids = [
        np.array([dense.setdefault(m, len(dense)) for m in c], dtype=np.int64)
        for c in models
    ]
    n_models = len(dense)
    records = []
    for t in checkpoints:
        pooled = np.concatenate([c[:t] for c in lls])
        chain_id = np.repeat(np.arange(n_chains), t)
        model_id = np.concatenate([m[:t] for m in model_ids])
        cell_id = chain_id * n_models + model_id

        mean = pooled.mean()
        v_hat = float(((pooled - mean) ** 2).mean())
        w_c, _ = _within_variance(pooled, chain_id, n_chains)
        w_m, singles_m = _within_variance(pooled, model_id, n_models)
        w_m_w_c, singles_mc = _within_variance(pooled, cell_id,
                                               n_chains * n_models)
        records.append(DiagnosticRecord(
            iteration=t, v_hat=v_hat, w_c=w_c, w_m=w_m, w_m_w_c=w_m_w_c,
            b_m=v_hat - w_m, b_m_w_c=w_c - w_m_w_c,
            singleton_cells=singles_m + singles_mc,
        ))
    return DiagnosticSeries(records=tuple(records), n_chains=n_chains,
                            group_by=group_by)


def _hashable(model) -> tuple:
    g, ks = model
    return int(g), tuple(int(k) for k in ks)


def _g_of(model) -> tuple:
    return (int(model[0]),)


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    window: int
    tol: float
    worst_ratio_error: float
    detail: tuple


def _ratio_merged(num: float, den: float, tol: float) -> tuple[bool, float]:
    if abs(den) < 1e-12 and abs(num) < 1e-12:
        return True, 0.0          # 0/0 counts as merged
    if abs(den) < 1e-12:
        return False, float("inf")
    err = abs(num / den - 1.0)
    return err <= tol, err


def converged(series: DiagnosticSeries, window: int = 5,
              tol: float = 0.05) -> ConvergenceReport:
    """Declare convergence when all three curve pairs stay merged over the
    trailing window of checkpoints."""
    if len(series.records) < window:
        raise ModelError(
            f"need at least {window} checkpoints, have {len(series.records)}")
    tail = series.records[-window:]
    detail = []
    ok_all = True
    worst = 0.0
    for rec in tail:
        for name, num, den in (
            ("w_c/v_hat", rec.w_c, rec.v_hat),
            ("w_m_w_c/w_m", rec.w_m_w_c, rec.w_m),
            ("b_m_w_c/b_m", rec.b_m_w_c, rec.b_m),
        ):
            ok, err = _ratio_merged(num, den, tol)
            detail.append((rec.iteration, name, err, ok))
            ok_all = ok_all and ok
            if err != float("inf"):
                worst = max(worst, err)
            else:
                worst = float("inf")
    return ConvergenceReport(converged=ok_all, window=window, tol=tol,
                             worst_ratio_error=worst, detail=tuple(detail))
