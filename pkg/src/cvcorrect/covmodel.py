"""Structural covariance models for correlated observations.

Every supported model is a sum of independent latent components (cluster
intercepts, subcluster intercept/slope pairs, a spatial field) plus an
observation-level noise term.  Storing the model that way makes the full
covariance, conditional covariances, and train/test cross covariances all
definitional: each one is just the sum of the contributions of a chosen
subset of components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

NOISE = "eps"

# Relative tolerance for the positive-semidefiniteness safety check.
PSD_RTOL = 1e-8


class NumericalError(RuntimeError):
    """A matrix factorization or solve failed beyond recovery."""


# ---------------------------------------------------------------------------
# Observation design: grouping labels, time values, coordinates
# ---------------------------------------------------------------------------


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ClusterDesign:
    """Per-observation grouping structure.

    Parameters
    ----------
    levels:
        Ordered grouping factor names, outermost first
        (e.g. ``("cluster", "subcluster")``).
    labels:
        One label array per level, aligned with ``levels``; labels at an
        inner level must be nested in the enclosing level (equal inner
        label implies equal outer label).
    time:
        Optional per-observation time value (random-slope covariate).
    coords:
        Optional (n, 2) coordinate array for spatial kernels.
    """

    levels: tuple[str, ...] = ()
    labels: tuple[np.ndarray, ...] = ()
    time: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.levels) != len(self.labels):
            raise ValueError("one label array required per level")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError("level names must be distinct")
        labels = tuple(_readonly(np.asarray(l)) for l in self.labels)
        object.__setattr__(self, "labels", labels)
        sizes = {l.shape[0] for l in labels}
        if self.time is not None:
            t = _readonly(np.asarray(self.time, dtype=float))
            if not np.all(np.isfinite(t)):
                raise ValueError("time values must be finite")
            object.__setattr__(self, "time", t)
            sizes.add(t.shape[0])
        if self.coords is not None:
            c = np.asarray(self.coords, dtype=float)
            if c.ndim != 2 or c.shape[1] != 2:
                raise ValueError("coords must be an (n, 2) array")
            if not np.all(np.isfinite(c)):
                raise ValueError("coordinates must be finite")
            object.__setattr__(self, "coords", _readonly(c))
            sizes.add(c.shape[0])
        if len(sizes) > 1:
            raise ValueError("design fields disagree on the number of observations")
        self._check_nesting()

    def _check_nesting(self):
        for outer, inner in zip(self.labels[:-1], self.labels[1:]):
            seen: dict = {}
            for o, i in zip(outer, inner):
                if i in seen and seen[i] != o:
                    raise ValueError(
                        f"label {i!r} appears under two distinct outer labels"
                    )
                seen[i] = o

    @property
    def n(self) -> int:
        if self.labels:
            return self.labels[0].shape[0]
        if self.time is not None:
            return self.time.shape[0]
        if self.coords is not None:
            return self.coords.shape[0]
        return 0

    def level_labels(self, name: str) -> np.ndarray:
        return self.labels[self.levels.index(name)]

    def subset(self, idx) -> "ClusterDesign":
        """Design restricted to the given observation indices."""
        idx = np.asarray(idx)
        return ClusterDesign(
            levels=self.levels,
            labels=tuple(l[idx] for l in self.labels),
            time=None if self.time is None else self.time[idx],
            coords=None if self.coords is None else self.coords[idx],
        )


def iid_design(n: int) -> ClusterDesign:
    """Design with no grouping structure (each observation its own unit)."""
    return ClusterDesign(levels=("unit",), labels=(np.arange(n),))


# ---------------------------------------------------------------------------
# Covariance specifications
# ---------------------------------------------------------------------------


def _check_var(name: str, value: float, strict: bool = False):
    v = float(value)
    if not np.isfinite(v):
        raise ValueError(f"{name} must be finite, got {value!r}")
    if strict and v <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and v < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")


@dataclass(frozen=True)
class Diagonal:
    """Independent observations: Cov = sigma2_eps * I."""

    sigma2_eps: float

    def __post_init__(self):
        _check_var("sigma2_eps", self.sigma2_eps, strict=True)


@dataclass(frozen=True)
class CompoundSymmetry:
    """Equicorrelated observations: Cov = sigma2_eps * I + rho * ones."""

    sigma2_eps: float
    rho: float

    def __post_init__(self):
        _check_var("sigma2_eps", self.sigma2_eps, strict=True)
        _check_var("rho", self.rho)


@dataclass(frozen=True)
class ClusteredRandomIntercept:
    """One random intercept per top-level cluster plus i.i.d. noise."""

    sigma2_b: float
    sigma2_eps: float

    def __post_init__(self):
        _check_var("sigma2_b", self.sigma2_b)
        _check_var("sigma2_eps", self.sigma2_eps, strict=True)


@dataclass(frozen=True)
class HierarchicalRandomSlope:
    """Cluster intercept plus subcluster intercept/slope on the time value.

    ``Sigma_b`` is the 2x2 covariance of the per-subcluster
    [intercept, slope] pair applied to the covariate (1, time).
    """

    sigma2_u: float
    Sigma_b: np.ndarray
    sigma2_eps: float

    def __post_init__(self):
        _check_var("sigma2_u", self.sigma2_u)
        _check_var("sigma2_eps", self.sigma2_eps, strict=True)
        S = np.asarray(self.Sigma_b, dtype=float)
        if S.shape != (2, 2):
            raise ValueError("Sigma_b must be a 2x2 matrix")
        if not np.all(np.isfinite(S)):
            raise ValueError("Sigma_b must be finite")
        if abs(S[0, 1] - S[1, 0]) > 1e-12 * (1.0 + abs(S[0, 1])):
            raise ValueError("Sigma_b must be symmetric")
        if np.linalg.eigvalsh(S)[0] < -1e-12 * max(1.0, abs(S).max()):
            raise ValueError("Sigma_b must be positive semidefinite")
        object.__setattr__(self, "Sigma_b", _readonly(S))


@dataclass(frozen=True)
class ExponentialKernelNugget:
    """Exponential spatial kernel with an observation-level nugget.

    Kernel: K(d) = amplitude * exp(-||d|| / lengthscale).
    """

    amplitude: float
    lengthscale: float
    sigma2_nugget: float

    def __post_init__(self):
        _check_var("amplitude", self.amplitude)
        _check_var("lengthscale", self.lengthscale, strict=True)
        _check_var("sigma2_nugget", self.sigma2_nugget, strict=True)


CovarianceSpec = Union[
    Diagonal,
    CompoundSymmetry,
    ClusteredRandomIntercept,
    HierarchicalRandomSlope,
    ExponentialKernelNugget,
]


def component_names(spec: CovarianceSpec) -> tuple[str, ...]:
    """Latent component names of ``spec``, noise term last."""
    if isinstance(spec, Diagonal):
        return (NOISE,)
    if isinstance(spec, (CompoundSymmetry, ClusteredRandomIntercept)):
        return ("b", NOISE)
    if isinstance(spec, HierarchicalRandomSlope):
        return ("u", "b", NOISE)
    if isinstance(spec, ExponentialKernelNugget):
        return ("s", NOISE)
    raise TypeError(f"not a covariance spec: {spec!r}")


def structure_names(spec: CovarianceSpec) -> tuple[str, ...]:
    """Component names excluding the noise term."""
    return component_names(spec)[:-1]


def noise_variance(spec: CovarianceSpec) -> float:
    if isinstance(spec, ExponentialKernelNugget):
        return spec.sigma2_nugget
    return spec.sigma2_eps


def _require(design: ClusterDesign, spec: CovarianceSpec, what: str, ok: bool):
    if not ok:
        raise ValueError(f"{type(spec).__name__} requires the design to carry {what}")


def _label_eq(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    return (left[:, None] == right[None, :]).astype(float)


def component_cross_matrix(
    spec: CovarianceSpec,
    left: ClusterDesign,
    right: ClusterDesign,
    name: str,
) -> np.ndarray:
    """Covariance contribution of one latent component between two designs.

    The noise component never contributes here: rows of ``left`` and
    ``right`` are distinct observations by convention, and noise is
    independent across observations.  Within-sample noise is handled by
    :func:`component_matrix`.
    """
    if name == NOISE:
        return np.zeros((left.n, right.n))
    if isinstance(spec, CompoundSymmetry) and name == "b":
        return np.full((left.n, right.n), spec.rho)
    if isinstance(spec, ClusteredRandomIntercept) and name == "b":
        _require(left, spec, "a grouping level", len(left.levels) >= 1)
        return spec.sigma2_b * _label_eq(left.labels[0], right.labels[0])
    if isinstance(spec, HierarchicalRandomSlope):
        _require(left, spec, "two grouping levels", len(left.levels) >= 2)
        if name == "u":
            return spec.sigma2_u * _label_eq(left.labels[0], right.labels[0])
        if name == "b":
            _require(left, spec, "time values", left.time is not None)
            _require(right, spec, "time values", right.time is not None)
            zl = np.column_stack([np.ones(left.n), left.time])
            zr = np.column_stack([np.ones(right.n), right.time])
            same = _label_eq(left.labels[1], right.labels[1])
            return same * (zl @ spec.Sigma_b @ zr.T)
    if isinstance(spec, ExponentialKernelNugget) and name == "s":
        _require(left, spec, "coordinates", left.coords is not None)
        _require(right, spec, "coordinates", right.coords is not None)
        diff = left.coords[:, None, :] - right.coords[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        return spec.amplitude * np.exp(-dist / spec.lengthscale)
    raise ValueError(f"unknown component {name!r} for {type(spec).__name__}")


def component_matrix(spec: CovarianceSpec, design: ClusterDesign, name: str) -> np.ndarray:
    """Within-sample covariance contribution of one latent component."""
    if name == NOISE:
        return noise_variance(spec) * np.eye(design.n)
    return component_cross_matrix(spec, design, design, name)


def _validate_components(spec: CovarianceSpec, names: Iterable[str]) -> frozenset:
    names = frozenset(names)
    known = set(component_names(spec))
    unknown = names - known
    if unknown:
        raise ValueError(
            f"components {sorted(unknown)} do not exist for {type(spec).__name__}; "
            f"available: {sorted(known)}"
        )
    return names


def contribution(spec: CovarianceSpec, design: ClusterDesign, names: Iterable[str]) -> np.ndarray:
    """Sum of the within-sample contributions of the named components."""
    names = _validate_components(spec, names)
    out = np.zeros((design.n, design.n))
    for name in component_names(spec):
        if name in names:
            out += component_matrix(spec, design, name)
    return out


def check_psd(V: np.ndarray, rtol: float = PSD_RTOL):
    """Raise if ``V`` is not symmetric positive semidefinite.

    Violations raise instead of being clamped so that specification bugs
    surface immediately.
    """
    if not np.array_equal(V, V.T):
        raise NumericalError("covariance matrix is not exactly symmetric")
    w = np.linalg.eigvalsh(V)
    if w[0] < -rtol * max(w[-1], 0.0):
        raise NumericalError(
            f"covariance matrix is not PSD: min eigenvalue {w[0]:.3e} "
            f"vs max {w[-1]:.3e}"
        )


def build_covariance(
    spec: CovarianceSpec, design: ClusterDesign, *, check: bool = True
) -> np.ndarray:
    """Full n x n covariance matrix of the observations under ``spec``."""
    V = contribution(spec, design, component_names(spec))
    if check:
        check_psd(V)
    return V


def conditional_covariance(
    spec: CovarianceSpec, design: ClusterDesign, condition_on: Iterable[str]
) -> np.ndarray:
    """Covariance left after conditioning on the named latent components.

    Conditioning removes a component's contribution, so the result is the
    sum over components *not* named.  Conditioning on nothing returns the
    full covariance; conditioning on everything returns zeros.

    For :class:`ExponentialKernelNugget` conditioned on ``{"s"}`` the
    result is instead the co-location plug-in estimate: co-located pairs
    get the kernel amplitude minus the average kernel value over all pairs
    at distinct locations, and everything else is zero.  That is the extra
    within-cluster covariance not explained by the smooth spatial field.
    """
    names = _validate_components(spec, condition_on)
    if isinstance(spec, ExponentialKernelNugget) and names == frozenset({"s"}):
        return _colocated_excess(spec, design)
    keep = [c for c in component_names(spec) if c not in names]
    return contribution(spec, design, keep)


def _colocated_excess(spec: ExponentialKernelNugget, design: ClusterDesign) -> np.ndarray:
    _require(design, spec, "coordinates", design.coords is not None)
    same = np.all(design.coords[:, None, :] == design.coords[None, :, :], axis=2)
    distinct = ~same
    iu = np.triu_indices(design.n, k=1)
    mask = distinct[iu]
    if not mask.any():
        raise ValueError("co-location plug-in needs at least two distinct locations")
    diff = design.coords[:, None, :] - design.coords[None, :, :]
    kvals = spec.amplitude * np.exp(
        -np.sqrt((diff**2).sum(axis=2)) / spec.lengthscale
    )
    # Unordered pairs; the kernel is symmetric so the ordered average is equal.
    excess = spec.amplitude - kvals[iu][mask].mean()
    return np.where(same, excess, 0.0)


# ---------------------------------------------------------------------------
# Prediction scenarios and cross covariances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionScenario:
    """Declares which training latent realizations persist at prediction time.

    ``shared=None`` means every latent component is shared (the prediction
    target behaves like another held-out training point); an empty set
    means all realizations are drawn fresh.  ``marginal_shift`` must be
    ``"none"``: train and test marginals are assumed identical, and other
    settings are refused.
    """

    shared: Optional[frozenset] = None
    marginal_shift: str = "none"

    def __post_init__(self):
        if self.marginal_shift != "none":
            raise ValueError(
                "only marginal_shift='none' is supported "
                "(train/test marginal distributions must coincide)"
            )
        if self.shared is not None:
            object.__setattr__(self, "shared", frozenset(self.shared))

    @classmethod
    def all_shared(cls) -> "PredictionScenario":
        return cls(shared=None)

    @classmethod
    def all_new(cls) -> "PredictionScenario":
        return cls(shared=frozenset())

    @classmethod
    def share(cls, *names: str) -> "PredictionScenario":
        return cls(shared=frozenset(names))

    @classmethod
    def parse(cls, tag: str) -> "PredictionScenario":
        tag = tag.strip()
        if tag == "all-shared":
            return cls.all_shared()
        if tag == "all-new":
            return cls.all_new()
        if tag.startswith("share:"):
            parts = [p.strip() for p in tag[len("share:"):].split(",") if p.strip()]
            if not parts:
                raise ValueError("share: scenario needs at least one component name")
            return cls.share(*parts)
        raise ValueError(
            f"unknown scenario {tag!r}; expected all-shared, all-new or share:<names>"
        )

    @property
    def tag(self) -> str:
        if self.shared is None:
            return "all-shared"
        if not self.shared:
            return "all-new"
        return "share:" + ",".join(sorted(self.shared))

    def resolve_shared(self, spec: CovarianceSpec) -> frozenset:
        """Shared structure components under ``spec`` (noise never counts)."""
        if self.shared is None:
            return frozenset(structure_names(spec))
        names = _validate_components(spec, self.shared)
        return names - {NOISE}


def cross_covariance_matrix(
    spec: CovarianceSpec,
    train: ClusterDesign,
    test: ClusterDesign,
    scenario: PredictionScenario,
) -> np.ndarray:
    """Cov(y_train, y_test) block when only shared components persist."""
    shared = scenario.resolve_shared(spec)
    out = np.zeros((train.n, test.n))
    for name in shared:
        out += component_cross_matrix(spec, train, test, name)
    return out


def cross_covariance(
    spec: CovarianceSpec,
    design: ClusterDesign,
    scenario: PredictionScenario,
    target_index: int,
) -> np.ndarray:
    """Covariance of the training rows with a prediction target.

    The target is a new observation carrying the grouping labels, time
    value, and coordinates of row ``target_index``; the remaining n-1 rows
    act as the training set.  Only components shared under ``scenario``
    contribute, so an all-new scenario returns the zero vector.
    """
    n = design.n
    if not 0 <= target_index < n:
        raise ValueError(f"target_index {target_index} out of range for n={n}")
    rest = np.flatnonzero(np.arange(n) != target_index)
    block = cross_covariance_matrix(
        spec, design.subset(rest), design.subset([target_index]), scenario
    )
    return block[:, 0]
