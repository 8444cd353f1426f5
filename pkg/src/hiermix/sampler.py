"""The reversible-jump sampler: one cycle = (1) group split/merge,
(2) component split/merge per group, (3) weights, (4) labels,
(5) component parameters, the last three as Gibbs draws.

A chain is strictly sequential and owns its RNG; run several chains with
independent streams (``seed_for_chain``) for convergence diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import moves
from .model import (
    ComponentParams,
    Dataset,
    GroupParams,
    HierParams,
    Labels,
    ModelError,
    augmented_log_likelihood,
    empty_labels,
    group_logpdf_many,
    log_likelihood,
    normal_logpdf_many,
    object_group_logliks,
    sort_groups,
    validate,
)
from .priors import Hyperparameters, log_prior, log_prior_labels
from .randutil import NumericalError, spaced_ascending, truncnorm_sample

MOVE_NAMES = ("g_split", "g_merge", "k_split", "k_merge")


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0
    r_g_split: float = 0.5
    r_g_merge: float = 0.5
    r_k_split: float = 0.5
    r_k_merge: float = 0.5
    sigma_split: float = 0.5        # proposal scale for mean/variance splits
    u_enumeration_cap: int = 1_000_000
    rejection_cap: int = 1000
    verify_every: int = 0           # recheck caches/validity every n kept samples
    progress_every: int = 10_000

    def __post_init__(self):
        if self.iterations < 0 or self.burn_in < 0:
            raise ModelError("iterations and burn_in must be non-negative")
        if self.thinning < 1:
            raise ModelError("thinning must be >= 1")
        for name in ("r_g_split", "r_g_merge", "r_k_split", "r_k_merge"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ModelError(f"{name}={p} outside [0, 1]")
        if self.r_g_split + self.r_g_merge > 1.0 + 1e-12:
            raise ModelError("r_g_split + r_g_merge must be <= 1")
        if self.r_k_split + self.r_k_merge > 1.0 + 1e-12:
            raise ModelError("r_k_split + r_k_merge must be <= 1")
        if self.sigma_split <= 0:
            raise ModelError("sigma_split must be positive")


@dataclass
class ChainState:
    theta: HierParams
    labels: Labels
    log_lik_aug: float          # label-conditional log-likelihood
    log_prior_theta: float
    log_prior_lab: float

    @property
    def log_post_aug(self) -> float:
        return self.log_lik_aug + self.log_prior_theta + self.log_prior_lab


def make_state(theta: HierParams, labels: Labels, data: Dataset,
               h: Hyperparameters) -> ChainState:
    return ChainState(
        theta=theta,
        labels=labels,
        log_lik_aug=augmented_log_likelihood(data, theta, labels),
        log_prior_theta=log_prior(theta, h),
        log_prior_lab=log_prior_labels(labels, theta),
    )


@dataclass(frozen=True)
class RetainedSample:
    iteration: int
    theta: HierParams
    log_likelihood: float       # marginal (labels integrated out)
    log_posterior: float        # marginal log-likelihood + parameter log-prior
    model: tuple


@dataclass
class ChainTrace:
    samples: list[RetainedSample]
    seed: int
    config: SamplerConfig
    loglik_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    model_series: list = field(default_factory=list)
    accept_counts: dict = field(default_factory=dict)
    propose_counts: dict = field(default_factory=dict)

    def loglik_values(self) -> np.ndarray:
        return np.array([s.log_likelihood for s in self.samples])


def seed_for_chain(master_seed: int, chain_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed).spawn(
        chain_index + 1)[chain_index])


# ---------------------------------------------------------------------------
# Gibbs steps


def gibbs_update_weights(state: ChainState, data: Dataset, h: Hyperparameters,
                         rng: np.random.Generator) -> ChainState:
    """Draw weights from the ordered-Dirichlet conditional.

    Draws from the unconstrained Dirichlet(delta + counts) and restores the
    ascending order by jointly relabeling groups and W; valid because the
    unconstrained posterior is permutation-symmetric in the group blocks.
    """
    theta = state.theta
    big_g = theta.n_groups
    counts = np.bincount(state.labels.w, minlength=big_g).astype(float)
    for _ in range(1000):
        w_new = rng.dirichlet(h.delta_omega + counts)
        if np.all(w_new > 0.0) and np.unique(w_new).shape[0] == big_g:
            break
    else:
        raise NumericalError("weight draw kept producing ties or zeros")
    groups = [replace_weight(g, float(w)) for g, w in zip(theta.groups, w_new)]
    sorted_groups, remap = sort_groups(groups)
    theta_new = HierParams(groups=sorted_groups)
    labels_new = Labels(w=remap[state.labels.w], z=state.labels.z)
    return make_state(theta_new, labels_new, data, h)


def replace_weight(group: GroupParams, weight: float) -> GroupParams:
    return GroupParams(weight=weight, mixing=group.mixing,
                       components=group.components)


def gibbs_update_labels(state: ChainState, data: Dataset, h: Hyperparameters,
                        rng: np.random.Generator) -> ChainState:
    """Joint draw of (W, Z) from their exact conditional."""
    theta = state.theta
    logw = np.log(theta.weights)
    w_new = np.empty(data.n_objects, dtype=np.int64)
    z_new: list[np.ndarray] = []
    for i, obj in enumerate(data.objects):
        logits = logw + object_group_logliks(obj, theta)
        g, _ = _draw_categorical(rng, logits)
        w_new[i] = g
        group = theta.groups[g]
        if obj.n_points == 0:
            z_new.append(np.zeros(0, dtype=np.int64))
            continue
        zmat = moves._z_alloc_logits(obj.points, group)
        pick = np.argmax(zmat + rng.gumbel(size=zmat.shape), axis=1)
        z_new.append(pick.astype(np.int64))
    labels_new = Labels(w=w_new, z=tuple(z_new))
    return make_state(theta, labels_new, data, h)


def _draw_categorical(rng, logits):
    m = float(np.max(logits))
    if not math.isfinite(m):
        raise NumericalError("all group weights numerically zero for an object")
    p = np.exp(logits - m)
    p /= p.sum()
    k = int(rng.choice(p.shape[0], p=p))
    return k, float(math.log(p[k]))


def gibbs_update_components(state: ChainState, data: Dataset,
                            h: Hyperparameters,
                            rng: np.random.Generator) -> ChainState:
    """Conjugate draws of (p, mu, sigma^2) given the labels.

    The first mean coordinate is drawn from its normal conditional truncated
    between the neighboring components' first coordinates, preserving the
    within-group ordering; empty components draw from the prior.
    """
    theta = state.theta
    d = theta.dim
    new_groups: list[GroupParams] = []
    for gi, group in enumerate(theta.groups):
        k_g = group.n_components
        member_pts = [data.objects[int(i)].points
                      for i in np.nonzero(state.labels.w == gi)[0]
                      if data.objects[int(i)].n_points > 0]
        member_z = [state.labels.z[int(i)]
                    for i in np.nonzero(state.labels.w == gi)[0]
                    if data.objects[int(i)].n_points > 0]
        if member_pts:
            pooled = np.concatenate(member_pts)
            pooled_z = np.concatenate(member_z)
            counts = np.bincount(pooled_z, minlength=k_g).astype(float)
            sums = np.zeros((k_g, d))
            np.add.at(sums, pooled_z, pooled)
        else:
            pooled = np.zeros((0, d))
            pooled_z = np.zeros(0, dtype=np.int64)
            counts = np.zeros(k_g)
            sums = np.zeros((k_g, d))
        mixing = rng.dirichlet(h.delta_p + counts)
        while np.any(mixing <= 0.0):
            mixing = rng.dirichlet(h.delta_p + counts)

        var_cur = group.variances()
        prec = 1.0 / h.tau2 + counts[:, None] / var_cur
        mu_post = (h.mu0[None, :] / h.tau2 + sums / var_cur) / prec
        sd_post = np.sqrt(1.0 / prec)
        means_new = mu_post + sd_post * rng.standard_normal((k_g, d))
        # the first coordinate keeps the ordering: sequential truncated draws
        old_first = group.means()[:, 0]
        for k in range(k_g):
            lo = means_new[k - 1, 0] if k > 0 else -math.inf
            hi = old_first[k + 1] if k + 1 < k_g else math.inf
            means_new[k, 0] = truncnorm_sample(
                rng, float(mu_post[k, 0]), float(sd_post[k, 0]), lo, hi)
        sq = np.zeros((k_g, d))
        if pooled.shape[0]:
            np.add.at(sq, pooled_z, (pooled - means_new[pooled_z]) ** 2)
        shape = h.alpha0 + 0.5 * counts
        scale = h.beta0 + 0.5 * sq
        vars_new = scale / rng.gamma(np.broadcast_to(shape[:, None], (k_g, d)),
                                     1.0)
        comps = tuple(ComponentParams(mean=means_new[k], var=vars_new[k])
                      for k in range(k_g))
        new_groups.append(GroupParams(weight=group.weight, mixing=mixing,
                                      components=comps))
    theta_new = HierParams(groups=tuple(new_groups))
    return make_state(theta_new, state.labels, data, h)


# ---------------------------------------------------------------------------
# trans-dimensional steps


def _try_move(state: ChainState, data: Dataset, h: Hyperparameters,
              cfg: SamplerConfig, rng: np.random.Generator,
              proposal: moves.MoveProposal | None, log_r_fwd: float,
              log_r_rev: float, counters: dict) -> ChainState:
    move = proposal.move if proposal is not None else None
    if proposal is None:
        return state
    counters["proposed"][move] += 1
    cand = make_state(proposal.theta, proposal.labels, data, h)
    if cand.log_post_aug == -math.inf:
        return state
    log_alpha = (
        cand.log_post_aug - state.log_post_aug
        + log_r_rev - log_r_fwd
        + proposal.log_reverse - proposal.log_forward
        + proposal.log_jacobian
    )
    if moves.accept(rng, log_alpha, context=f"{move} at G={state.theta.n_groups}"):
        counters["accepted"][move] += 1
        return cand
    return state


def g_move_step(state: ChainState, data: Dataset, h: Hyperparameters,
                cfg: SamplerConfig, rng: np.random.Generator,
                counters: dict) -> ChainState:
    if h.g_min == h.g_max:
        return state
    u = rng.uniform()
    if u < cfg.r_g_split:
        prop = moves.g_split_propose(state.theta, state.labels, data,
                                     h.k_min, h.k_max, h.g_max,
                                     cfg.sigma_split, cfg.u_enumeration_cap, rng)
        return _try_move(state, data, h, cfg, rng, prop,
                         math.log(cfg.r_g_split), math.log(cfg.r_g_merge),
                         counters)
    if u < cfg.r_g_split + cfg.r_g_merge:
        prop = moves.g_merge_propose(state.theta, state.labels, data,
                                     h.k_min, h.k_max, h.g_min,
                                     cfg.sigma_split, cfg.u_enumeration_cap, rng)
        return _try_move(state, data, h, cfg, rng, prop,
                         math.log(cfg.r_g_merge), math.log(cfg.r_g_split),
                         counters)
    return state


def k_move_step(state: ChainState, data: Dataset, h: Hyperparameters,
                cfg: SamplerConfig, rng: np.random.Generator,
                counters: dict) -> ChainState:
    if h.k_min == h.k_max:
        return state
    for gi in range(state.theta.n_groups):
        u = rng.uniform()
        if u < cfg.r_k_split:
            prop = moves.k_split_propose(state.theta, state.labels, data, gi,
                                         h.k_max, rng)
            state = _try_move(state, data, h, cfg, rng, prop,
                              math.log(cfg.r_k_split), math.log(cfg.r_k_merge),
                              counters)
        elif u < cfg.r_k_split + cfg.r_k_merge:
            prop = moves.k_merge_propose(state.theta, state.labels, data, gi,
                                         h.k_min, rng)
            state = _try_move(state, data, h, cfg, rng, prop,
                              math.log(cfg.r_k_merge), math.log(cfg.r_k_split),
                              counters)
    return state


# ---------------------------------------------------------------------------
# initialization


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
            iters: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Plain k-means with k-means++ seeding; returns (centers, assignment)."""
    n = points.shape[0]
    centers = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((points - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(points[int(rng.integers(n))])
            continue
        centers.append(points[int(rng.choice(n, p=d2 / total))])
    centers = np.array(centers)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for j in range(k):
            sel = new_assign == j
            if sel.any():
                centers[j] = points[sel].mean(axis=0)
            else:
                centers[j] = points[int(rng.integers(n))]
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centers, assign


def initial_state_from_prior(data: Dataset, h: Hyperparameters,
                             rng: np.random.Generator) -> ChainState:
    big_g = int(rng.integers(h.g_min, h.g_max + 1))
    weights = spaced_ascending(rng, rng.dirichlet(np.full(big_g, h.delta_omega)))
    weights = weights / weights.sum()
    groups = []
    for g in range(big_g):
        k_g = int(rng.integers(h.k_min, h.k_max + 1))
        mixing = rng.dirichlet(np.full(k_g, h.delta_p))
        first = spaced_ascending(rng, rng.normal(h.mu0[0], math.sqrt(h.tau2), k_g))
        comps = []
        for k in range(k_g):
            mean = np.empty(h.dim)
            mean[0] = first[k]
            if h.dim > 1:
                mean[1:] = rng.normal(h.mu0[1:], math.sqrt(h.tau2))
            var = h.beta0 / rng.gamma(h.alpha0, 1.0, size=h.dim)
            comps.append(ComponentParams(mean=mean, var=var))
        groups.append(GroupParams(weight=float(weights[g]), mixing=mixing,
                                  components=tuple(comps)))
    theta = HierParams(groups=tuple(groups))
    labels = empty_labels(data)
    if data.n_objects:
        # arbitrary-but-valid labels; the first Gibbs pass resamples them
        labels = Labels(
            w=np.zeros(data.n_objects, dtype=np.int64),
            z=tuple(np.zeros(o.n_points, dtype=np.int64) for o in data.objects),
        )
    return make_state(theta, labels, data, h)


def initial_state_from_data(data: Dataset, h: Hyperparameters,
                            rng: np.random.Generator) -> ChainState:
    """Cluster objects into groups and pooled points into components."""
    if data.total_points == 0:
        return initial_state_from_prior(data, h, rng)
    d = data.dimension
    g0 = min(max(2, h.g_min), h.g_max)
    summaries = np.array([
        np.concatenate([o.points.mean(axis=0), o.points.std(axis=0)])
        if o.n_points else np.zeros(2 * d)
        for o in data.objects
    ])
    if data.n_objects >= g0 > 1:
        _, obj_assign = _kmeans(summaries, g0, rng)
    else:
        g0 = 1
        obj_assign = np.zeros(data.n_objects, dtype=np.int64)
    # drop empty groups
    used = np.unique(obj_assign)
    remap = {int(g): i for i, g in enumerate(used)}
    obj_assign = np.array([remap[int(g)] for g in obj_assign], dtype=np.int64)
    g0 = len(used)

    groups = []
    z_all: list[np.ndarray | None] = [None] * data.n_objects
    counts = np.bincount(obj_assign, minlength=g0).astype(float)
    weights = spaced_ascending(rng, (counts + 1.0) / (counts + 1.0).sum())
    weights /= weights.sum()
    order = np.argsort(counts, kind="stable")  # align ascending weights with counts
    group_rank = np.empty(g0, dtype=np.int64)
    group_rank[order] = np.arange(g0)

    built: list[GroupParams | None] = [None] * g0
    for g in range(g0):
        members = np.nonzero(obj_assign == g)[0]
        pooled = np.concatenate(
            [data.objects[int(i)].points for i in members
             if data.objects[int(i)].n_points > 0]
        ) if members.size else np.zeros((0, d))
        k0 = min(max(2, h.k_min), h.k_max)
        if pooled.shape[0] < k0 * 2:
            k0 = max(h.k_min, 1)
        centers, point_assign = (_kmeans(pooled, k0, rng)
                                 if pooled.shape[0] >= k0 and k0 > 1
                                 else (pooled.mean(axis=0, keepdims=True)
                                       if pooled.shape[0] else h.mu0[None, :],
                                       np.zeros(pooled.shape[0], dtype=np.int64)))
        k0 = centers.shape[0]
        centers = centers + rng.normal(0.0, 1e-6, size=centers.shape)
        comp_order = np.argsort(centers[:, 0], kind="stable")
        rank = np.empty(k0, dtype=np.int64)
        rank[comp_order] = np.arange(k0)
        comps = []
        mix = np.zeros(k0)
        global_var = pooled.var(axis=0) if pooled.shape[0] > 1 else np.ones(d)
        global_var = np.maximum(global_var, 1e-6)
        for pos, ci in enumerate(comp_order):
            sel = point_assign == ci
            mix[pos] = sel.sum() + 1.0
            var = pooled[sel].var(axis=0) if sel.sum() > 1 else global_var
            var = np.maximum(var, 1e-8 * max(1.0, float(global_var.max())))
            mean = centers[ci].copy()
            comps.append(ComponentParams(mean=mean, var=var))
        first = spaced_ascending(rng, np.array([c.mean[0] for c in comps]))
        comps = [ComponentParams(np.concatenate([[first[i]], c.mean[1:]]), c.var)
                 for i, c in enumerate(comps)]
        built[int(group_rank[g])] = GroupParams(
            weight=float(weights[int(group_rank[g])]),
            mixing=mix / mix.sum(), components=tuple(comps))
        for i in members:
            obj = data.objects[int(i)]
            if obj.n_points == 0:
                z_all[int(i)] = np.zeros(0, dtype=np.int64)
            else:
                dists = ((obj.points[:, None, :]
                          - np.array([c.mean for c in comps])[None, :, :]) ** 2
                         ).sum(axis=2)
                z_all[int(i)] = dists.argmin(axis=1).astype(np.int64)
    theta = HierParams(groups=tuple(built))
    w = np.array([group_rank[int(g)] for g in obj_assign], dtype=np.int64)
    labels = Labels(w=w, z=tuple(z_all))
    state = make_state(theta, labels, data, h)
    if state.log_post_aug == -math.inf:
        return initial_state_from_prior(data, h, rng)
    return state


# ---------------------------------------------------------------------------
# the chain


def run_chain(data: Dataset, h: Hyperparameters, cfg: SamplerConfig,
              init: ChainState | None = None,
              rng: np.random.Generator | None = None,
              progress: Callable | None = None) -> ChainTrace:
    """Run one chain; deterministic given (seed, data, config)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if init is None:
        state = (initial_state_from_data(data, h, rng) if data.n_objects
                 else initial_state_from_prior(data, h, rng))
    else:
        state = init
    if state.log_post_aug == -math.inf or validate(state.theta):
        raise ModelError("initial state has zero posterior mass or is invalid")

    counters = {
        "proposed": {m: 0 for m in MOVE_NAMES},
        "accepted": {m: 0 for m in MOVE_NAMES},
    }
    samples: list[RetainedSample] = []
    loglik_series = np.empty(cfg.iterations)
    model_series: list[tuple] = []

    for it in range(cfg.iterations):
        state = g_move_step(state, data, h, cfg, rng, counters)
        state = k_move_step(state, data, h, cfg, rng, counters)
        state = gibbs_update_weights(state, data, h, rng)
        if data.n_objects:
            state = gibbs_update_labels(state, data, h, rng)
        state = gibbs_update_components(state, data, h, rng)

        marginal = log_likelihood(data, state.theta) if data.n_objects else 0.0
        model = (state.theta.n_groups, state.theta.k_vector)
        loglik_series[it] = marginal
        model_series.append(model)

        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thinning == 0:
            samples.append(RetainedSample(
                iteration=it,
                theta=state.theta,
                log_likelihood=marginal,
                log_posterior=marginal + state.log_prior_theta,
                model=model,
            ))
            if cfg.verify_every and len(samples) % cfg.verify_every == 0:
                _verify_state(state, data, h)
        if progress is not None and (it + 1) % cfg.progress_every == 0:
            progress({
                "iteration": it + 1,
                "n_groups": state.theta.n_groups,
                "k_vector": state.theta.k_vector,
                "log_likelihood": marginal,
                "accepted": dict(counters["accepted"]),
                "proposed": dict(counters["proposed"]),
            })

    return ChainTrace(
        samples=samples, seed=cfg.seed, config=cfg,
        loglik_series=loglik_series, model_series=model_series,
        accept_counts=counters["accepted"], propose_counts=counters["proposed"],
    )


def _verify_state(state: ChainState, data: Dataset, h: Hyperparameters) -> None:
    problems = validate(state.theta)
    if problems:
        raise NumericalError(f"retained state invalid: {problems}")
    lik = augmented_log_likelihood(data, state.theta, state.labels)
    pri = log_prior(state.theta, h)
    lab = log_prior_labels(state.labels, state.theta)
    for name, cached, fresh in (
        ("log_lik_aug", state.log_lik_aug, lik),
        ("log_prior_theta", state.log_prior_theta, pri),
        ("log_prior_lab", state.log_prior_lab, lab),
    ):
        if abs(cached - fresh) > 1e-8 * max(1.0, abs(fresh)):
            raise NumericalError(
                f"cache drift in {name}: cached={cached!r} fresh={fresh!r}")
