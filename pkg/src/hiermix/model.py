"""Two-level hierarchical Gaussian mixture: domain types and log-densities.

A population is a mixture of G groups with ascending weights; each group is
itself a K_g-component mixture of axis-aligned (diagonal-covariance) normals
whose components are strictly ordered by the first coordinate of their means.
An observation point is a length-d float vector; an object carries an
(n_i, d) array of points.

All density work happens in log-space; probabilities are exponentiated only
at API boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

SIMPLEX_ATOL = 1e-12        # accepted deviation of simplex sums after normalization
SIMPLEX_RENORM_TOL = 1e-9   # inputs farther off than this are rejected

LOG_2PI = float(np.log(2.0 * np.pi))


class ModelError(ValueError):
    """Structurally invalid model input (shape, simplex, positivity...)."""


def _as_readonly(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


def _normalized_simplex(raw: np.ndarray, what: str) -> np.ndarray:
    if raw.ndim != 1 or raw.size == 0:
        raise ModelError(f"{what}: expected a nonempty 1-d probability vector")
    total = float(raw.sum())
    if not math.isfinite(total):
        raise ModelError(f"{what}: non-finite entries")
    if float(raw.min()) <= 0.0:
        raise ModelError(f"{what}: entries must be strictly positive")
    if abs(total - 1.0) > SIMPLEX_RENORM_TOL:
        raise ModelError(f"{what}: sums to {total!r}, outside renormalization tolerance")
    return raw / total


@dataclass(frozen=True)
class ComponentParams:
    """One normal component: mean vector and per-coordinate variances."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_readonly(self.mean))
        object.__setattr__(self, "var", _as_readonly(self.var))
        if self.mean.ndim != 1 or self.mean.shape != self.var.shape:
            raise ModelError("component mean/var must be 1-d vectors of equal length")
        if not np.isfinite(np.concatenate([self.mean, self.var])).all():
            raise ModelError("component parameters must be finite")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GroupParams:
    """One population group: weight, mixing probabilities, components.

    ``mixing`` is renormalized if within 1e-9 of the simplex. Ordering of
    components (strictly ascending first mean coordinate) is *reported* by
    :func:`validate`, not enforced here, so invalid states stay constructible
    for diagnostics and rejection tests.
    """

    weight: float
    mixing: np.ndarray
    components: tuple[ComponentParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        mix = _normalized_simplex(np.asarray(self.mixing, dtype=float), "group mixing")
        object.__setattr__(self, "mixing", _as_readonly(mix))
        if len(self.components) != self.mixing.shape[0]:
            raise ModelError("mixing length must match component count")
        if len(self.components) == 0:
            raise ModelError("group needs at least one component")
        d = self.components[0].dim
        if any(c.dim != d for c in self.components):
            raise ModelError("components must share one dimension")
        if not np.isfinite(self.weight):
            raise ModelError("group weight must be finite")
        object.__setattr__(
            self, "_means", _as_readonly([c.mean for c in self.components]))
        object.__setattr__(
            self, "_vars", _as_readonly([c.var for c in self.components]))

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def means(self) -> np.ndarray:
        """(K, d) matrix of component means (read-only view)."""
        return self._means

    def variances(self) -> np.ndarray:
        """(K, d) matrix of component variances (read-only view)."""
        return self._vars


@dataclass(frozen=True)
class HierParams:
    """Full model state theta: the ordered list of groups."""

    groups: tuple[GroupParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.groups) == 0:
            raise ModelError("model needs at least one group")
        w = np.array([g.weight for g in self.groups])
        total = float(w.sum())
        if abs(total - 1.0) > SIMPLEX_RENORM_TOL:
            raise ModelError(f"group weights sum to {total!r}")
        if np.any(w <= 0.0):
            raise ModelError("group weights must be strictly positive")
        d = self.groups[0].dim
        if any(g.dim != d for g in self.groups):
            raise ModelError("groups must share one dimension")
        w.flags.writeable = False
        object.__setattr__(self, "_weights", w)
        object.__setattr__(
            self, "_k_vector", tuple(g.n_components for g in self.groups))

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def dim(self) -> int:
        return self.groups[0].dim

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def k_vector(self) -> tuple[int, ...]:
        return self._k_vector


@dataclass(frozen=True)
class ObjectObservations:
    """Observations on one object: an (n_i, d) array, n_i >= 0."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise ModelError("object points must be a 2-d (n, d) array")
        if not np.all(np.isfinite(pts)):
            raise ModelError("object points must be finite")
        object.__setattr__(self, "points", _as_readonly(pts))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class Dataset:
    """N objects sharing one observation dimension d."""

    objects: tuple[ObjectObservations, ...]
    dimension: int
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.ids:
            object.__setattr__(self, "ids", tuple(self.ids))
            if len(self.ids) != len(self.objects):
                raise ModelError("ids must match object count")
        else:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(len(self.objects))))
        for obj in self.objects:
            if obj.dim != self.dimension and obj.n_points > 0:
                raise ModelError("all objects must share the dataset dimension")

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def total_points(self) -> int:
        return sum(o.n_points for o in self.objects)


@dataclass(frozen=True)
class Labels:
    """Augmented labels: group label per object, component label per point.

    Indices are 0-based: ``w[i]`` in ``range(G)``, ``z[i][j]`` in
    ``range(K_{w[i]})``.
    """

    w: np.ndarray
    z: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "w", _as_readonly(self.w, dtype=np.int64))
        object.__setattr__(self, "z", tuple(_as_readonly(zi, dtype=np.int64) for zi in self.z))
        if self.w.ndim != 1 or len(self.z) != self.w.shape[0]:
            raise ModelError("labels need one z-vector per object")

    @property
    def n_objects(self) -> int:
        return self.w.shape[0]

    def check_against(self, data: Dataset, theta: HierParams) -> None:
        if self.n_objects != data.n_objects:
            raise ModelError("label/object count mismatch")
        for i, zi in enumerate(self.z):
            g = int(self.w[i])
            if not 0 <= g < theta.n_groups:
                raise ModelError(f"object {i}: group label {g} out of range")
            if zi.shape[0] != data.objects[i].n_points:
                raise ModelError(f"object {i}: z length mismatch")
            if zi.size and (zi.min() < 0 or zi.max() >= theta.groups[g].n_components):
                raise ModelError(f"object {i}: component label out of range for group {g}")


def empty_labels(data: Dataset) -> Labels:
    return Labels(
        w=np.zeros(data.n_objects, dtype=np.int64),
        z=tuple(np.zeros(o.n_points, dtype=np.int64) for o in data.objects),
    )


# ---------------------------------------------------------------------------
# log-densities


def normal_logpdf_many(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Diagonal-normal log-density of rows of ``x`` (shape (n, d)) -> (n,)."""
    x = np.atleast_2d(x)
    dev = x - mean
    return -0.5 * np.sum(LOG_2PI + np.log(var) + dev * dev / var, axis=1)


def component_log_density(x, comp: ComponentParams) -> float:
    """log phi_d(x | mean, diag(var)) for a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != comp.dim:
        raise ModelError(f"point dimension {x.shape} does not match component dim {comp.dim}")
    if np.any(comp.var <= 0.0):
        raise ModelError("component variances must be strictly positive")
    return float(normal_logpdf_many(x[None, :], comp.mean, comp.var)[0])


def group_logpdf_many(x: np.ndarray, group: GroupParams) -> np.ndarray:
    """Group mixture log-density of each row of ``x`` -> (n,), stable."""
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        return np.zeros(0)
    logs = np.empty((x.shape[0], group.n_components))
    for k, comp in enumerate(group.components):
        logs[:, k] = normal_logpdf_many(x, comp.mean, comp.var)
    return logsumexp(logs + np.log(group.mixing), axis=1)


def group_log_density(x, group: GroupParams) -> float:
    """log sum_k p_k phi_d(x | ...) via log-sum-exp."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != group.dim:
        raise ModelError("point dimension does not match group dimension")
    return float(group_logpdf_many(x[None, :], group)[0])


def object_group_logliks(obj: ObjectObservations, theta: HierParams) -> np.ndarray:
    """(G,) vector of sum_j log q_g(x_ij); the per-group object log-likelihoods."""
    if obj.n_points == 0:
        return np.zeros(theta.n_groups)
    if obj.dim != theta.dim:
        raise ModelError("object dimension does not match model dimension")
    return np.array([group_logpdf_many(obj.points, g).sum() for g in theta.groups])


def object_log_density(obj: ObjectObservations, theta: HierParams) -> float:
    """log sum_g w_g prod_j q_g(x_ij); empty objects contribute log 1 = 0."""
    if obj.n_points == 0:
        return 0.0
    per_group = object_group_logliks(obj, theta)
    return float(logsumexp(per_group + np.log(theta.weights)))


def log_likelihood(data: Dataset, theta: HierParams) -> float:
    """Sum of per-object mixture log-densities."""
    return float(sum(object_log_density(o, theta) for o in data.objects))


def augmented_log_likelihood(data: Dataset, theta: HierParams, labels: Labels) -> float:
    """Label-conditional log-likelihood: sum_ij log phi_d(x_ij | comp(W_i, Z_ij)).

    Excludes the omega and p factors, which belong to the label prior.
    """
    labels.check_against(data, theta)
    total = 0.0
    for i, obj in enumerate(data.objects):
        if obj.n_points == 0:
            continue
        group = theta.groups[int(labels.w[i])]
        means = group.means()[labels.z[i]]
        variances = group.variances()[labels.z[i]]
        dev = obj.points - means
        total += float(-0.5 * np.sum(LOG_2PI + np.log(variances) + dev * dev / variances))
    return total


# ---------------------------------------------------------------------------
# validation


def validate(theta: HierParams) -> list[str]:
    """Report every violated invariant; an empty list means theta is valid."""
    problems: list[str] = []
    w = theta.weights
    if abs(float(w.sum()) - 1.0) > SIMPLEX_ATOL:
        problems.append(f"group weights sum to {w.sum()!r}, not 1")
    if np.any(np.diff(w) <= 0.0):
        problems.append(f"group weights not strictly ascending: {w.tolist()}")
    if np.any(w <= 0.0):
        problems.append("non-positive group weight")
    for gi, group in enumerate(theta.groups):
        if abs(float(group.mixing.sum()) - 1.0) > SIMPLEX_ATOL:
            problems.append(f"group {gi}: mixing sums to {group.mixing.sum()!r}")
        if np.any(group.mixing <= 0.0):
            problems.append(f"group {gi}: non-positive mixing probability")
        first = group.means()[:, 0]
        if np.any(np.diff(first) <= 0.0):
            problems.append(
                f"group {gi}: first mean coordinates not strictly ascending: {first.tolist()}"
            )
        for ki, comp in enumerate(group.components):
            if np.any(comp.var <= 0.0):
                problems.append(f"group {gi} component {ki}: non-positive variance")
    return problems


def is_valid(theta: HierParams) -> bool:
    return not validate(theta)


def sort_groups(groups: list[GroupParams]) -> tuple[tuple[GroupParams, ...], np.ndarray]:
    """Sort groups ascending by weight; also return old->new index map."""
    order = np.argsort([g.weight for g in groups], kind="stable")
    remap = np.empty(len(groups), dtype=np.int64)
    remap[order] = np.arange(len(groups))
    return tuple(groups[int(i)] for i in order), remap


def sorted_group(weight: float, mixing, components) -> GroupParams:
    """Build a group with components sorted by first mean coordinate."""
    comps = list(components)
    mix = np.asarray(mixing, dtype=float)
    order = np.argsort([c.mean[0] for c in comps], kind="stable")
    return GroupParams(
        weight=weight,
        mixing=mix[order],
        components=tuple(comps[int(i)] for i in order),
    )
