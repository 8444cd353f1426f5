"""Trans-dimensional moves: group split/merge and within-group component
split/merge, with exact proposal densities and Jacobians.

Group split/merge
-----------------
A group merge pools the two groups' components, sorts them by first mean
coordinate, and collapses adjacent pairs by mixing-weighted averages (one
component stays whole, at half weight, when the pooled count is odd). The
split is the exact inverse: every admissible split produces children whose
pooled sort pairs back to the parents, so merge(split(theta)) == theta and
both directions can evaluate each other's proposal density.

Conventions that make the split map one-to-one:

* the lower-weight child is child 1: the weight fraction u0 is drawn on
  (0, 1/2) with density 2;
* when both halves of a component land in the same child group, the drawn
  mean ``y`` is the left (smaller first-coordinate) half;
* child means are drawn left to right under truncation windows that force
  the pooled children of consecutive parents to stay disjoint, which is
  exactly the set of states the merge can invert.

Component (within-group) split/merge follows the classic moment-matching
construction: merging adjacent components preserves the mixture's first two
moments per coordinate, and the split draws (u1, u2, u3) to invert it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    ComponentParams,
    Dataset,
    GroupParams,
    HierParams,
    Labels,
    group_logpdf_many,
    normal_logpdf_many,
    sort_groups,
)
from .randutil import (
    NumericalError,
    categorical_from_logits,
    categorical_logprob,
    truncnorm_logpdf,
    truncnorm_sample,
)

INF = math.inf


@dataclass(frozen=True)
class USpec:
    """How the components of a split group distribute over the two children.

    ``codes[k]`` is the number of component k's halves that go to child 1
    (0, 1 or 2); the unsplit component of an odd-size split carries code -1
    and its side lives in ``whole_side`` (0 = child 1, 1 = child 2).
    """

    codes: tuple[int, ...]
    whole: int | None = None
    whole_side: int | None = None

    @property
    def splitting(self) -> tuple[int, ...]:
        return tuple(k for k, c in enumerate(self.codes) if c >= 0)

    @property
    def a1(self) -> tuple[int, ...]:
        return tuple(k for k, c in enumerate(self.codes) if c == 1)


@dataclass(frozen=True)
class SplitRecord:
    """Everything drawn by one group-split proposal (for audit and replay)."""

    group_index: int
    u0: float
    k_t: int
    k_pair: tuple[int, int]
    m0: int
    m1: int
    uspec: USpec
    v: np.ndarray
    y: np.ndarray
    z: np.ndarray
    log_proposal: float
    log_jacobian: float


@dataclass(frozen=True)
class MoveProposal:
    """A candidate next state plus the log-terms of its acceptance ratio.

    ``log_jacobian`` is pre-signed: add it to the log ratio as-is (positive
    Jacobian orientation for dimension-up moves, negated for down moves).
    """

    move: str
    theta: HierParams
    labels: Labels
    log_forward: float
    log_reverse: float
    log_jacobian: float
    record: SplitRecord | None = None


def accept(rng: np.random.Generator, log_alpha: float, context: str = "") -> bool:
    """Metropolis-Hastings coin flip on a log acceptance ratio."""
    if math.isnan(log_alpha):
        raise NumericalError(f"NaN acceptance ratio ({context})")
    if log_alpha >= 0.0:
        return True
    if log_alpha == -INF:
        return False
    u = rng.uniform()
    if u <= 0.0:
        return True
    return math.log(u) < log_alpha


# ---------------------------------------------------------------------------
# admissible K-pairs and u-vectors


def k_pairs(k_t: int, k_min: int, k_max: int) -> list[tuple[int, int]]:
    """Ordered pairs (a, b) within bounds with a + b = k_t."""
    return [
        (a, k_t - a)
        for a in range(max(k_min, k_t - k_max), min(k_max, k_t - k_min) + 1)
    ]


_CODES_CACHE: dict[int, np.ndarray] = {}


def _ternary_codes(n: int) -> np.ndarray:
    if n not in _CODES_CACHE:
        idx = np.arange(3 ** n)
        cols = [(idx // 3 ** i) % 3 for i in range(n)] if n else []
        codes = (
            np.stack(cols, axis=1).astype(np.int8) if n else np.zeros((1, 0), np.int8)
        )
        codes.flags.writeable = False
        _CODES_CACHE[n] = codes
    return _CODES_CACHE[n]


def _admissible_rows(rows: np.ndarray, p: np.ndarray, target: int,
                     extra1: float, extra2: float) -> np.ndarray:
    """Filter candidate code rows against the three split restrictions."""
    mask = rows.sum(axis=1) == target
    forced = p > 0.5
    if forced.any():
        mask &= np.all(rows[:, forced] == 1, axis=1)
    mass1 = ((rows == 2) * (2.0 * p)).sum(axis=1) + extra1
    mass2 = ((rows == 0) * (2.0 * p)).sum(axis=1) + extra2
    mask &= (mass1 < 1.0) & (mass2 < 1.0)
    mask &= (rows == 1).any(axis=1)
    return mask


def enumerate_usplits(p: np.ndarray, k_g1: int, k_t: int,
                      cap: int = 1_000_000) -> list[USpec]:
    """All admissible half-assignments for splitting a group with mixing p.

    Constraints: child-1 component count matches k_g1; any component with
    p > 1/2 must split across both children; the mass sent wholesale to
    either child stays below 1 (so at least one component splits across).
    """
    big = len(p)
    specs: list[USpec] = []
    if k_t == 2 * big:
        rows = _ternary_codes(big)
        if rows.shape[0] > cap:
            raise NumericalError(f"u-enumeration size {rows.shape[0]} exceeds cap {cap}")
        for row in rows[_admissible_rows(rows, p, k_g1, 0.0, 0.0)]:
            specs.append(USpec(codes=tuple(int(c) for c in row)))
    elif k_t == 2 * big - 1:
        sub = _ternary_codes(big - 1)
        if sub.shape[0] * 2 * big > cap:
            raise NumericalError("u-enumeration size exceeds cap")
        for k0 in range(big):
            pm = np.delete(p, k0)
            for side in (0, 1):
                extra1 = 2.0 * p[k0] if side == 0 else 0.0
                extra2 = 2.0 * p[k0] if side == 1 else 0.0
                target = k_g1 - (1 if side == 0 else 0)
                for row in sub[_admissible_rows(sub, pm, target, extra1, extra2)]:
                    codes = [int(c) for c in row]
                    codes.insert(k0, -1)
                    specs.append(USpec(tuple(codes), whole=k0, whole_side=side))
    else:
        raise ValueError(f"k_t={k_t} incompatible with group size {big}")
    return specs


# ---------------------------------------------------------------------------
# v: splitting the doubled mixing probabilities


def _fixed_mass(p: np.ndarray, uspec: USpec) -> tuple[float, float]:
    """Mass each child receives from non-crossing components."""
    f1 = sum(2.0 * p[k] for k, c in enumerate(uspec.codes) if c == 2)
    f2 = sum(2.0 * p[k] for k, c in enumerate(uspec.codes) if c == 0)
    if uspec.whole is not None:
        if uspec.whole_side == 0:
            f1 += 2.0 * p[uspec.whole]
        else:
            f2 += 2.0 * p[uspec.whole]
    return f1, f2


def _v_walk(a: np.ndarray, values: np.ndarray | None,
            rng: np.random.Generator | None):
    """Sequential interval-uniform draws for the constrained coordinates.

    sum_j a_j v_j = 1 with every v_j in (0, 1): each v_j is uniform on the
    interval that keeps the remaining budget feasible; the last one is
    determined. Returns (v over the a-indices, log-density) or None when the
    walk is infeasible (evaluation of an incompatible configuration).
    """
    r = 1.0
    n = a.shape[0]
    suffix = np.concatenate([np.cumsum(a[::-1])[::-1][1:], [0.0]])
    out = np.empty(n)
    logdens = 0.0
    for j in range(n - 1):
        lo = max(0.0, (r - suffix[j]) / a[j])
        hi = min(1.0, r / a[j])
        if not lo < hi:
            return None
        if values is None:
            vj = rng.uniform(lo, hi)
        else:
            vj = float(values[j])
            if not lo <= vj <= hi:
                return None
        logdens -= math.log(hi - lo)
        out[j] = vj
        r -= a[j] * vj
    v_last = r / a[n - 1]
    if not 0.0 < v_last < 1.0:
        return None
    if values is not None and abs(v_last - float(values[n - 1])) > 1e-8:
        return None
    out[n - 1] = v_last
    return out, logdens


def _v_sample_or_eval(p: np.ndarray, uspec: USpec, rng=None, values=None):
    """Draw (or evaluate the density of) the full v-vector.

    Free coordinates (codes 0 and 2) are Uniform(0,1); crossing coordinates
    satisfy the mass-balance constraint. Returns (v, logdensity) or None.
    """
    f1, _ = _fixed_mass(p, uspec)
    if f1 >= 1.0:
        return None
    a1 = list(uspec.a1)
    a = 2.0 * p[a1] / (1.0 - f1)
    walk = _v_walk(a, None if values is None else values[a1], rng)
    if walk is None:
        return None
    v_a1, logdens = walk
    v = np.full(len(p), np.nan)
    v[a1] = v_a1
    for k, c in enumerate(uspec.codes):
        if c in (0, 2):
            if values is None:
                v[k] = rng.uniform()
            else:
                v[k] = float(values[k])
                if not 0.0 < v[k] < 1.0:
                    return None
            # Uniform(0,1) contributes zero log-density
    return v, logdens


# ---------------------------------------------------------------------------
# child means and variances


def _child_windows(code: int, b_lo: float, mu_next: float, mu0: float,
                   pa: float, pb: float) -> tuple[float, float]:
    """Truncation interval for the drawn first coordinate y[0].

    Both children must land in (b_lo, mu_next); when both halves share a
    side, y is additionally the left half (y[0] < parent mean).
    """
    c = (pa + pb) * mu0
    lo = b_lo
    if mu_next < INF:
        lo = max(lo, (c - mu_next * pb) / pa)
    if code == 1:
        hi = mu_next
        if b_lo > -INF:
            hi = min(hi, (c - b_lo * pb) / pa)
    else:
        hi = mu0
    return lo, hi


def _children_walk(p: np.ndarray, means: np.ndarray, variances: np.ndarray,
                   uspec: USpec, v: np.ndarray, sigma_scale: float,
                   rng=None, y_values=None, z_values=None):
    """Construct the children of every parent left to right.

    In sampling mode (rng given) draws y and z; in evaluation mode consumes
    the given arrays and accumulates their proposal density. Returns
    (side1, side2, y, z, logdens) where side1/side2 are lists of
    (prob, mean, var) in ascending first-coordinate order, or None when the
    configuration is infeasible.
    """
    big, d = means.shape
    y = np.full((big, d), np.nan)
    z = np.full((big, d), np.nan)
    side1: list[tuple[float, np.ndarray, np.ndarray]] = []
    side2: list[tuple[float, np.ndarray, np.ndarray]] = []
    b_lo = -INF
    logdens = 0.0
    for k in range(big):
        mu_next = means[k + 1, 0] if k + 1 < big else INF
        code = uspec.codes[k]
        if code < 0:
            target = side1 if uspec.whole_side == 0 else side2
            if not b_lo < means[k, 0] < mu_next:
                return None
            target.append((2.0 * p[k], means[k].copy(), variances[k].copy()))
            b_lo = means[k, 0]
            continue
        pa = 2.0 * v[k] * p[k]
        pb = 2.0 * (1.0 - v[k]) * p[k]
        if pa <= 0.0 or pb <= 0.0:
            return None
        lo, hi = _child_windows(code, b_lo, mu_next, means[k, 0], pa, pb)
        if not lo < hi:
            return None
        sd0 = sigma_scale * math.sqrt(variances[k, 0])
        if rng is not None:
            y[k, 0] = truncnorm_sample(rng, means[k, 0], sd0, lo, hi)
        else:
            y[k, 0] = y_values[k, 0]
        lp = truncnorm_logpdf(y[k, 0], means[k, 0], sd0, lo, hi)
        if lp == -INF:
            return None
        logdens += lp
        for b in range(1, d):
            sdb = sigma_scale * math.sqrt(variances[k, b])
            if rng is not None:
                y[k, b] = rng.normal(means[k, b], sdb)
            else:
                y[k, b] = y_values[k, b]
            logdens += float(
                normal_logpdf_many(y[k, b:b + 1][None, :], means[k, b:b + 1],
                                   np.array([sdb ** 2]))[0]
            )
        for b in range(d):
            z_hi = variances[k, b] / v[k]
            sdz = sigma_scale * variances[k, b]
            if rng is not None:
                z[k, b] = truncnorm_sample(rng, variances[k, b], sdz, 0.0, z_hi)
            else:
                z[k, b] = z_values[k, b]
            lpz = truncnorm_logpdf(z[k, b], variances[k, b], sdz, 0.0, z_hi)
            if lpz == -INF:
                return None
            logdens += lpz
        y_t = (2.0 * p[k] * means[k] - pa * y[k]) / pb
        z_t = (2.0 * p[k] * variances[k] - pa * z[k]) / pb
        if np.any(z_t <= 0.0) or y_t[0] == y[k, 0]:
            return None
        first = (pa, y[k].copy(), z[k].copy())
        second = (pb, y_t, z_t)
        if code == 1:
            side1.append(first)
            side2.append(second)
        else:
            pair = [first, second] if y[k, 0] < y_t[0] else [second, first]
            (side1 if code == 2 else side2).extend(pair)
        b_lo = max(y[k, 0], y_t[0])
    return side1, side2, y, z, logdens


def g_split_log_jacobian(weight: float, p: np.ndarray, uspec: USpec,
                         v: np.ndarray, d: int) -> float:
    """log |det| of the split map on reduced (simplex-chart) coordinates.

    Factorizes as: weight block w_g; one 4 p_k factor per splitting
    component except the determined-v one; (1 - v_k)^(-2d) per splitting
    component from the mean/variance back-solves; an extra 2 when one
    component passes through whole.
    """
    splitting = uspec.splitting
    k_r = uspec.a1[-1]
    total = math.log(weight)
    if uspec.whole is not None:
        total += math.log(2.0)
    for k in splitting:
        if k != k_r:
            total += math.log(4.0 * p[k])
        total -= 2.0 * d * math.log(1.0 - v[k])
    return total


# ---------------------------------------------------------------------------
# label allocation


def _w_alloc_logits(obj_points: np.ndarray, g1: GroupParams,
                    g2: GroupParams) -> np.ndarray:
    l1 = math.log(g1.weight) + float(group_logpdf_many(obj_points, g1).sum()) \
        if obj_points.shape[0] else math.log(g1.weight)
    l2 = math.log(g2.weight) + float(group_logpdf_many(obj_points, g2).sum()) \
        if obj_points.shape[0] else math.log(g2.weight)
    return np.array([l1, l2])


def _z_alloc_logits(points: np.ndarray, group: GroupParams) -> np.ndarray:
    """(n, K) matrix of log p_k + log phi_d(x | comp k)."""
    n = points.shape[0]
    out = np.empty((n, group.n_components))
    for k, comp in enumerate(group.components):
        out[:, k] = normal_logpdf_many(points, comp.mean, comp.var)
    return out + np.log(group.mixing)


def _z_alloc_sample(rng: np.random.Generator, points: np.ndarray,
                    group: GroupParams) -> tuple[np.ndarray, float]:
    """Draw component labels for every point; returns (labels, log-prob)."""
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    logits = _z_alloc_logits(points, group)
    norm = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    gumb = rng.gumbel(size=norm.shape)
    zs = np.argmax(norm + gumb, axis=1)
    return zs.astype(np.int64), float(norm[np.arange(norm.shape[0]), zs].sum())


def _z_alloc_logprob(points: np.ndarray, group: GroupParams,
                     zs: np.ndarray) -> float:
    if points.shape[0] == 0:
        return 0.0
    logits = _z_alloc_logits(points, group)
    norm = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    return float(norm[np.arange(norm.shape[0]), zs].sum())


# ---------------------------------------------------------------------------
# group split proposal


def _build_group(weight: float, children) -> GroupParams:
    mix = np.array([c[0] for c in children])
    comps = tuple(ComponentParams(mean=c[1], var=c[2]) for c in children)
    return GroupParams(weight=weight, mixing=mix / mix.sum(), components=comps)


def g_split_propose(theta: HierParams, labels: Labels, data: Dataset,
                    k_min: int, k_max: int, g_max: int,
                    sigma_scale: float, u_cap: int,
                    rng: np.random.Generator) -> MoveProposal | None:
    """Propose splitting one group in two; None means auto-reject."""
    big_g = theta.n_groups
    if big_g >= g_max:
        return None
    gi = int(rng.integers(big_g))
    group = theta.groups[gi]
    k_g = group.n_components

    u0 = rng.uniform(0.0, 0.5)
    k_t = 2 * k_g - int(rng.uniform() < 0.5)
    pairs = k_pairs(k_t, k_min, k_max)
    m0 = len(pairs)
    if m0 == 0:
        return None
    k_g1, k_g2 = pairs[int(rng.integers(m0))]
    specs = enumerate_usplits(group.mixing, k_g1, k_t, cap=u_cap)
    m1 = len(specs)
    if m1 == 0:
        return None
    uspec = specs[int(rng.integers(m1))]

    drawn = _v_sample_or_eval(group.mixing, uspec, rng=rng)
    if drawn is None:
        return None
    v, log_v = drawn
    walk = _children_walk(group.mixing, group.means(), group.variances(),
                          uspec, v, sigma_scale, rng=rng)
    if walk is None:
        return None
    side1, side2, y, z, log_yz = walk
    if len(side1) != k_g1 or len(side2) != k_g2:
        return None
    w1 = u0 * group.weight
    w2 = group.weight - w1
    try:
        child1 = _build_group(w1, side1)
        child2 = _build_group(w2, side2)
    except Exception:
        return None

    # reassign labels of the affected objects
    log_alloc = 0.0
    log_rev_alloc = 0.0
    new_w = np.array(labels.w)
    new_z = [np.array(zi) for zi in labels.z]
    affected = np.nonzero(labels.w == gi)[0]
    for i in affected:
        pts = data.objects[int(i)].points
        side, lp = categorical_from_logits(rng, _w_alloc_logits(pts, child1, child2))
        log_alloc += lp
        target = child1 if side == 0 else child2
        zs, lpz = _z_alloc_sample(rng, pts, target)
        log_alloc += lpz
        new_w[int(i)] = -1 - side  # sentinel until the final remap
        new_z[int(i)] = zs
        # reverse merge reallocates every affected point under the original group
        log_rev_alloc += _z_alloc_logprob(pts, group, labels.z[int(i)])

    groups = list(theta.groups)
    groups[gi:gi + 1] = [child1, child2]
    sorted_groups, remap = sort_groups(groups)
    idx1, idx2 = int(remap[gi]), int(remap[gi + 1])
    for i in range(new_w.shape[0]):
        wv = int(new_w[i])
        if wv == -1:
            new_w[i] = idx1
        elif wv == -2:
            new_w[i] = idx2
        else:
            new_w[i] = remap[wv if wv < gi else wv + 1]
    try:
        theta_new = HierParams(groups=sorted_groups)
    except Exception:
        return None
    w_vals = theta_new.weights
    if np.any(np.diff(w_vals) <= 0.0):
        return None

    log_fwd = (
        -math.log(big_g)            # group choice
        + math.log(2.0)             # u0 ~ Uniform(0, 1/2)
        - math.log(2.0)             # K_t coin
        - math.log(m0)
        - math.log(m1)
        + log_v + log_yz + log_alloc
    )
    n_pairs_rev = (big_g + 1) * big_g // 2
    log_rev = -math.log(n_pairs_rev) + log_rev_alloc
    if k_t % 2 == 1:
        log_rev -= math.log((k_t + 1) // 2)  # choice of the unmerged index

    log_jac = g_split_log_jacobian(group.weight, group.mixing, uspec, v, theta.dim)
    record = SplitRecord(
        group_index=gi, u0=u0, k_t=k_t, k_pair=(k_g1, k_g2), m0=m0, m1=m1,
        uspec=uspec, v=v, y=y, z=z,
        log_proposal=log_fwd, log_jacobian=log_jac,
    )
    return MoveProposal(
        move="g_split", theta=theta_new,
        labels=Labels(w=new_w, z=tuple(new_z)),
        log_forward=log_fwd, log_reverse=log_rev, log_jacobian=log_jac,
        record=record,
    )


# ---------------------------------------------------------------------------
# group merge proposal


@dataclass(frozen=True)
class MergeStructure:
    """The merged group plus the reverse split's reconstructed randomness."""

    merged: GroupParams
    uspec: USpec
    v: np.ndarray
    y: np.ndarray
    z: np.ndarray
    k_t: int
    k_pair: tuple[int, int]


def merge_structure(g1: GroupParams, g2: GroupParams,
                    i0: int | None) -> MergeStructure | None:
    """Deterministically merge two groups (g1 the lighter one).

    ``i0`` is the pooled 0-based index of the component left unmerged when
    the pooled count is odd (it must be even so its neighbors pair up).
    Returns None on tied coordinates, which the caller rejects.
    """
    pool = [(p, c.mean, c.var, 0) for p, c in zip(g1.mixing, g1.components)]
    pool += [(p, c.mean, c.var, 1) for p, c in zip(g2.mixing, g2.components)]
    pool.sort(key=lambda t: t[1][0])
    k_t = len(pool)
    firsts = [t[1][0] for t in pool]
    if any(firsts[i] >= firsts[i + 1] for i in range(k_t - 1)):
        return None
    odd = k_t % 2 == 1
    if odd and (i0 is None or i0 % 2 == 1 or not 0 <= i0 < k_t):
        return None

    codes: list[int] = []
    whole = whole_side = None
    v_list: list[float] = []
    children_y: list[np.ndarray] = []
    children_z: list[np.ndarray] = []
    merged: list[tuple[float, np.ndarray, np.ndarray]] = []
    idx = 0
    while idx < k_t:
        if odd and idx == i0:
            p, mu, var, side = pool[idx]
            merged.append((p / 2.0, mu, var))
            codes.append(-1)
            whole, whole_side = len(codes) - 1, side
            v_list.append(math.nan)
            children_y.append(np.full(mu.shape, np.nan))
            children_z.append(np.full(mu.shape, np.nan))
            idx += 1
            continue
        pa_, mua, vara, sa = pool[idx]
        pb_, mub, varb, sb = pool[idx + 1]
        p_star = (pa_ + pb_) / 2.0
        mu_star = (pa_ * mua + pb_ * mub) / (pa_ + pb_)
        var_star = (pa_ * vara + pb_ * varb) / (pa_ + pb_)
        merged.append((p_star, mu_star, var_star))
        if sa != sb:
            codes.append(1)
            # y is the child-1 half
            if sa == 0:
                v_list.append(pa_ / (2.0 * p_star))
                children_y.append(mua)
                children_z.append(vara)
            else:
                v_list.append(pb_ / (2.0 * p_star))
                children_y.append(mub)
                children_z.append(varb)
        else:
            codes.append(2 if sa == 0 else 0)
            # y is the left half by convention
            v_list.append(pa_ / (2.0 * p_star))
            children_y.append(mua)
            children_z.append(vara)
        idx += 2
    uspec = USpec(tuple(codes), whole=whole, whole_side=whole_side)
    mix = np.array([m[0] for m in merged])
    merged_group = GroupParams(
        weight=g1.weight + g2.weight,
        mixing=mix / mix.sum(),
        components=tuple(ComponentParams(mean=m[1], var=m[2]) for m in merged),
    )
    return MergeStructure(
        merged=merged_group, uspec=uspec, v=np.array(v_list),
        y=np.array(children_y), z=np.array(children_z),
        k_t=k_t, k_pair=(g1.n_components, g2.n_components),
    )


def _reverse_split_logdensity(struct: MergeStructure, g_after: int,
                              k_min: int, k_max: int, sigma_scale: float,
                              u_cap: int) -> float:
    """Density of the split that would re-create the pre-merge state."""
    merged = struct.merged
    if merged.weight <= 0.0:
        return -INF
    pairs = k_pairs(struct.k_t, k_min, k_max)
    if struct.k_pair not in pairs:
        return -INF
    try:
        specs = enumerate_usplits(merged.mixing, struct.k_pair[0], struct.k_t, cap=u_cap)
    except NumericalError:
        return -INF
    if struct.uspec not in specs:
        return -INF
    drawn = _v_sample_or_eval(merged.mixing, struct.uspec, values=struct.v)
    if drawn is None:
        return -INF
    _, log_v = drawn
    walk = _children_walk(merged.mixing, merged.means(), merged.variances(),
                          struct.uspec, struct.v, sigma_scale,
                          y_values=struct.y, z_values=struct.z)
    if walk is None:
        return -INF
    _, _, _, _, log_yz = walk
    return (
        -math.log(g_after)
        + math.log(2.0) - math.log(2.0)   # u0 density and K_t coin
        - math.log(len(pairs))
        - math.log(len(specs))
        + log_v + log_yz
    )


def g_merge_propose(theta: HierParams, labels: Labels, data: Dataset,
                    k_min: int, k_max: int, g_min: int,
                    sigma_scale: float, u_cap: int,
                    rng: np.random.Generator) -> MoveProposal | None:
    """Propose merging a random pair of groups; None means auto-reject."""
    big_g = theta.n_groups
    if big_g < 2 or big_g - 1 < g_min:
        return None
    a, b = sorted(rng.choice(big_g, size=2, replace=False).tolist())
    ga, gb = theta.groups[a], theta.groups[b]
    k_t = ga.n_components + gb.n_components
    i0 = None
    n_odd = 0
    if k_t % 2 == 1:
        n_odd = (k_t + 1) // 2
        i0 = 2 * int(rng.integers(n_odd))
    struct = merge_structure(ga, gb, i0)
    if struct is None:
        return None
    if not struct.uspec.a1:
        # no component pairs across the two groups: the reverse split cannot
        # produce this pairing (its constraints force at least one crossing),
        # so the merge has zero reverse density and always rejects
        return None

    # reassign labels of every object in the merged group, deterministically
    # relabeling W and Bayes-allocating Z under the merged components
    log_alloc = 0.0
    log_rev_alloc = 0.0
    new_w = np.array(labels.w)
    new_z = [np.array(zi) for zi in labels.z]
    affected = np.nonzero((labels.w == a) | (labels.w == b))[0]
    for i in affected:
        pts = data.objects[int(i)].points
        zs, lpz = _z_alloc_sample(rng, pts, struct.merged)
        log_alloc += lpz
        orig_side = 0 if int(labels.w[int(i)]) == a else 1
        orig_group = ga if orig_side == 0 else gb
        logits = _w_alloc_logits(pts, ga, gb)
        log_rev_alloc += categorical_logprob(logits, orig_side)
        log_rev_alloc += _z_alloc_logprob(pts, orig_group, labels.z[int(i)])
        new_w[int(i)] = -1
        new_z[int(i)] = zs

    groups = [g for j, g in enumerate(theta.groups) if j not in (a, b)]
    groups.append(struct.merged)
    sorted_groups, remap = sort_groups(groups)
    merged_idx = int(remap[len(groups) - 1])
    old_to_tmp = {}
    pos = 0
    for j in range(big_g):
        if j in (a, b):
            continue
        old_to_tmp[j] = pos
        pos += 1
    for i in range(new_w.shape[0]):
        wv = int(new_w[i])
        if wv == -1:
            new_w[i] = merged_idx
        else:
            new_w[i] = remap[old_to_tmp[wv]]
    try:
        theta_new = HierParams(groups=sorted_groups)
    except Exception:
        return None
    if np.any(np.diff(theta_new.weights) <= 0.0):
        return None

    log_fwd = -math.log(big_g * (big_g - 1) // 2) + log_alloc
    if i0 is not None:
        log_fwd -= math.log(n_odd)
    log_rev = (
        _reverse_split_logdensity(struct, big_g - 1, k_min, k_max,
                                  sigma_scale, u_cap)
        + log_rev_alloc
    )
    log_jac = g_split_log_jacobian(struct.merged.weight, struct.merged.mixing,
                                   struct.uspec, struct.v, theta.dim)
    return MoveProposal(
        move="g_merge", theta=theta_new,
        labels=Labels(w=new_w, z=tuple(new_z)),
        log_forward=log_fwd, log_reverse=log_rev, log_jacobian=-log_jac,
    )


# ---------------------------------------------------------------------------
# within-group component split/merge (moment matching)


def _beta22_logpdf(u: float) -> float:
    if not 0.0 < u < 1.0:
        return -INF
    return math.log(6.0) + math.log(u) + math.log(1.0 - u)


def k_split_log_jacobian(p_star: float, p1: float, p2: float,
                         var_star: np.ndarray, u2: np.ndarray) -> float:
    """log |det| of the moment-matching component split (all coordinates)."""
    d = var_star.shape[0]
    total = (3.0 * d + 1.0) * math.log(p_star) - 1.5 * d * math.log(p1 * p2)
    total += float(1.5 * np.log(var_star).sum() + np.log(1.0 - u2 ** 2).sum())
    return total


def _split_component(p_star, mean, var, u1, u2, u3):
    p1, p2 = p_star * u1, p_star * (1.0 - u1)
    sd = np.sqrt(var)
    mu1 = mean - u2 * sd * math.sqrt(p2 / p1)
    mu2 = mean + u2 * sd * math.sqrt(p1 / p2)
    var1 = u3 * (1.0 - u2 ** 2) * var * p_star / p1
    var2 = (1.0 - u3) * (1.0 - u2 ** 2) * var * p_star / p2
    return p1, p2, mu1, mu2, var1, var2


def k_split_propose(theta: HierParams, labels: Labels, data: Dataset, gi: int,
                    k_max: int, rng: np.random.Generator) -> MoveProposal | None:
    group = theta.groups[gi]
    big_k = group.n_components
    if big_k >= k_max:
        return None
    j = int(rng.integers(big_k))
    d = theta.dim
    u1 = float(rng.beta(2.0, 2.0))
    u2 = np.empty(d)
    u2[0] = rng.beta(2.0, 2.0)
    if d > 1:
        u2[1:] = rng.uniform(-1.0, 1.0, size=d - 1)
    u3 = rng.uniform(0.0, 1.0, size=d)
    comp = group.components[j]
    p_star = float(group.mixing[j])
    p1, p2, mu1, mu2, var1, var2 = _split_component(p_star, comp.mean, comp.var,
                                                    u1, u2, u3)
    lo = group.components[j - 1].mean[0] if j > 0 else -INF
    hi = group.components[j + 1].mean[0] if j + 1 < big_k else INF
    if not lo < mu1[0] < mu2[0] < hi:
        return None
    if np.any(var1 <= 0.0) or np.any(var2 <= 0.0):
        return None

    mixing = np.concatenate([group.mixing[:j], [p1, p2], group.mixing[j + 1:]])
    comps = (group.components[:j]
             + (ComponentParams(mu1, var1), ComponentParams(mu2, var2))
             + group.components[j + 1:])
    try:
        new_group = GroupParams(group.weight, mixing / mixing.sum(), comps)
    except Exception:
        return None
    groups = list(theta.groups)
    groups[gi] = new_group
    theta_new = HierParams(tuple(groups))

    # points previously in component j choose between the two children;
    # labels above j shift up by one
    log_alloc = 0.0
    new_z = [np.array(zi) for zi in labels.z]
    for i in np.nonzero(labels.w == gi)[0]:
        orig = np.array(labels.z[int(i)])
        zi = orig.copy()
        zi[orig > j] += 1
        hit = orig == j
        if hit.any():
            pts = data.objects[int(i)].points[hit]
            logits = np.stack([
                math.log(p1) + normal_logpdf_many(pts, mu1, var1),
                math.log(p2) + normal_logpdf_many(pts, mu2, var2),
            ], axis=1)
            norm = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
            pick = np.argmax(norm + rng.gumbel(size=norm.shape), axis=1)
            log_alloc += float(norm[np.arange(norm.shape[0]), pick].sum())
            zi[hit] = j + pick
        new_z[int(i)] = zi

    log_fwd = (-math.log(big_k) + _beta22_logpdf(u1) + _beta22_logpdf(u2[0])
               - (d - 1) * math.log(2.0) + log_alloc)
    log_rev = -math.log(big_k)  # adjacent-pair choice in the (K+1)-group
    log_jac = k_split_log_jacobian(p_star, p1, p2, comp.var, u2)
    return MoveProposal(
        move="k_split", theta=theta_new,
        labels=Labels(w=np.array(labels.w), z=tuple(new_z)),
        log_forward=log_fwd, log_reverse=log_rev, log_jacobian=log_jac,
    )


def k_merge_propose(theta: HierParams, labels: Labels, data: Dataset, gi: int,
                    k_min: int, rng: np.random.Generator) -> MoveProposal | None:
    group = theta.groups[gi]
    big_k = group.n_components
    if big_k < 2 or big_k - 1 < k_min:
        return None
    j = int(rng.integers(big_k - 1))
    p1, p2 = float(group.mixing[j]), float(group.mixing[j + 1])
    ca, cb = group.components[j], group.components[j + 1]
    p_star = p1 + p2
    mu_star = (p1 * ca.mean + p2 * cb.mean) / p_star
    var_star = (p1 * (ca.var + ca.mean ** 2) + p2 * (cb.var + cb.mean ** 2)) / p_star \
        - mu_star ** 2
    if np.any(var_star <= 0.0):
        return None
    u1 = p1 / p_star
    sd_star = np.sqrt(var_star)
    u2 = (cb.mean - ca.mean) * math.sqrt(p1 * p2) / (sd_star * p_star)
    if not 0.0 < u2[0] < 1.0 or np.any(np.abs(u2) >= 1.0):
        return None
    u3 = ca.var * p1 / ((1.0 - u2 ** 2) * var_star * p_star)
    if np.any(u3 <= 0.0) or np.any(u3 >= 1.0):
        return None

    mixing = np.concatenate([group.mixing[:j], [p_star], group.mixing[j + 2:]])
    comps = (group.components[:j]
             + (ComponentParams(mu_star, var_star),)
             + group.components[j + 2:])
    try:
        new_group = GroupParams(group.weight, mixing / mixing.sum(), comps)
    except Exception:
        return None
    groups = list(theta.groups)
    groups[gi] = new_group
    theta_new = HierParams(tuple(groups))

    # both merged components collapse onto index j; labels above shift down
    d = theta.dim
    log_rev_alloc = 0.0
    new_z = [np.array(zi) for zi in labels.z]
    for i in np.nonzero(labels.w == gi)[0]:
        orig = np.array(labels.z[int(i)])
        zi = orig.copy()
        zi[orig > j + 1] -= 1
        hit = (orig == j) | (orig == j + 1)
        if hit.any():
            pts = data.objects[int(i)].points[hit]
            logits = np.stack([
                math.log(p1) + normal_logpdf_many(pts, ca.mean, ca.var),
                math.log(p2) + normal_logpdf_many(pts, cb.mean, cb.var),
            ], axis=1)
            norm = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
            picked = (orig[hit] - j).astype(int)
            log_rev_alloc += float(norm[np.arange(norm.shape[0]), picked].sum())
            zi[hit] = j
        new_z[int(i)] = zi

    log_fwd = -math.log(big_k - 1)
    log_rev = (-math.log(big_k - 1) + _beta22_logpdf(u1) + _beta22_logpdf(float(u2[0]))
               - (d - 1) * math.log(2.0) + log_rev_alloc)
    log_jac = k_split_log_jacobian(p_star, p1, p2, var_star, u2)
    return MoveProposal(
        move="k_merge", theta=theta_new,
        labels=Labels(w=np.array(labels.w), z=tuple(new_z)),
        log_forward=log_fwd, log_reverse=log_rev, log_jacobian=-log_jac,
    )


# ---------------------------------------------------------------------------
# Jacobian finite-difference checks


def g_split_reduced_map(group: GroupParams, uspec: USpec):
    """The split as a pure function on reduced coordinates, for FD checks.

    Returns (pack, fwd): ``pack(weight, u0, v, y, z)`` builds the input
    vector; ``fwd`` maps it to the reduced output coordinates.
    """
    p = np.array(group.mixing)
    means = group.means()
    variances = group.variances()
    big, d = means.shape
    splitting = list(uspec.splitting)
    k_r = uspec.a1[-1]
    free_p = [k for k in range(big) if k != k_r]
    free_v = [k for k in splitting if k != k_r]
    a1 = list(uspec.a1)

    def pack(weight, u0, v, y, z):
        parts = [np.array([weight, u0]), p[free_p], np.array([v[k] for k in free_v])]
        for k in range(big):
            parts.append(means[k])
            if k in splitting:
                parts.append(y[k])
        for k in range(big):
            parts.append(variances[k])
            if k in splitting:
                parts.append(z[k])
        return np.concatenate(parts)

    def fwd(x):
        pos = 0
        weight, u0 = x[pos], x[pos + 1]
        pos += 2
        pv = np.empty(big)
        for k in free_p:
            pv[k] = x[pos]
            pos += 1
        pv[k_r] = 1.0 - sum(pv[k] for k in free_p)
        vv = np.full(big, np.nan)
        for k in free_v:
            vv[k] = x[pos]
            pos += 1
        f1, _ = _fixed_mass(pv, uspec)
        budget = 1.0 - f1
        used = sum(2.0 * pv[k] * vv[k] for k in a1 if k != k_r)
        vv[k_r] = (budget - used) / (2.0 * pv[k_r])
        mu = np.empty((big, d))
        yy = np.full((big, d), np.nan)
        var = np.empty((big, d))
        zz = np.full((big, d), np.nan)
        for k in range(big):
            mu[k] = x[pos:pos + d]
            pos += d
            if k in splitting:
                yy[k] = x[pos:pos + d]
                pos += d
        for k in range(big):
            var[k] = x[pos:pos + d]
            pos += d
            if k in splitting:
                zz[k] = x[pos:pos + d]
                pos += d
        out = [np.array([u0 * weight, (1.0 - u0) * weight])]
        probs = []
        for k in range(big):
            if k == k_r:
                continue
            if uspec.codes[k] == -1:
                probs.append(2.0 * pv[k])
            else:
                probs.extend([2.0 * vv[k] * pv[k], 2.0 * (1.0 - vv[k]) * pv[k]])
        out.append(np.array(probs))
        for k in range(big):
            if uspec.codes[k] == -1:
                out.append(mu[k])
            else:
                pa = 2.0 * vv[k] * pv[k]
                pb = 2.0 * (1.0 - vv[k]) * pv[k]
                out.append(yy[k])
                out.append((2.0 * pv[k] * mu[k] - pa * yy[k]) / pb)
        for k in range(big):
            if uspec.codes[k] == -1:
                out.append(var[k])
            else:
                pa = 2.0 * vv[k] * pv[k]
                pb = 2.0 * (1.0 - vv[k]) * pv[k]
                out.append(zz[k])
                out.append((2.0 * pv[k] * var[k] - pa * zz[k]) / pb)
        return np.concatenate(out)

    return pack, fwd


def _fd_log_det(fwd, x0: np.ndarray, h: float = 1e-6) -> float:
    n = x0.shape[0]
    jac = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h * max(1.0, abs(x0[j]))
        jac[:, j] = (fwd(x0 + e) - fwd(x0 - e)) / (2.0 * e[j])
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0.0:
        raise NumericalError("degenerate Jacobian in finite-difference check")
    return float(logdet)


def jacobian_check_g_split(group: GroupParams, weight: float, u0: float,
                           uspec: USpec, v: np.ndarray, y: np.ndarray,
                           z: np.ndarray) -> float:
    """Relative deviation between analytic and finite-difference log|det J|."""
    if weight <= 0.0:
        raise NumericalError("degenerate point: zero group weight")
    pack, fwd = g_split_reduced_map(group, uspec)
    x0 = pack(weight, u0, v, y, z)
    fd = _fd_log_det(fwd, x0)
    analytic = g_split_log_jacobian(weight, group.mixing, uspec, v, group.dim)
    return abs(analytic - fd) / max(1.0, abs(fd))


def k_split_reduced_map(d: int):
    """Component split as a pure function of (p*, u1, mu, u2, var, u3)."""

    def fwd(x):
        p_star, u1 = x[0], x[1]
        mean = x[2:2 + d]
        u2 = x[2 + d:2 + 2 * d]
        var = x[2 + 2 * d:2 + 3 * d]
        u3 = x[2 + 3 * d:2 + 4 * d]
        p1, p2, mu1, mu2, var1, var2 = _split_component(p_star, mean, var, u1, u2, u3)
        return np.concatenate([[p1, p2], mu1, mu2, var1, var2])

    return fwd


def jacobian_check_k_split(p_star: float, mean: np.ndarray, var: np.ndarray,
                           u1: float, u2: np.ndarray, u3: np.ndarray) -> float:
    """Relative deviation between analytic and FD log|det J| for a K-split."""
    if p_star <= 0.0:
        raise NumericalError("degenerate point: zero component weight")
    d = mean.shape[0]
    fwd = k_split_reduced_map(d)
    x0 = np.concatenate([[p_star, u1], mean, u2, var, u3])
    fd = _fd_log_det(fwd, x0)
    analytic = k_split_log_jacobian(p_star, p_star * u1, p_star * (1 - u1), var, u2)
    return abs(analytic - fd) / max(1.0, abs(fd))
