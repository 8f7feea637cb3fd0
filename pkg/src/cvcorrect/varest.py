"""Gaussian ML/REML estimation of covariance-model parameters.

Fixed effects are profiled out by GLS at every candidate parameter vector;
REML adds the usual -log det(X' V^-1 X) adjustment.  The optimizer is a
derivative-free simplex search in log-parameter space with deterministic
seeded restarts, which keeps fits reproducible and avoids gradient code.
The likelihood is evaluated blockwise over the independent groups implied
by the covariance structure, so clustered models scale linearly in the
number of clusters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize
from scipy.sparse.csgraph import connected_components

from .covmodel import (
    ClusterDesign,
    CompoundSymmetry,
    ClusteredRandomIntercept,
    CovarianceSpec,
    Diagonal,
    ExponentialKernelNugget,
    HierarchicalRandomSlope,
    build_covariance,
)
from .predictors import Dataset

_LOG_FLOOR = np.log(1e-12)
_LOG_CEIL = 60.0
_MAX_ITER = 2000
_N_RESTARTS = 3
_RESTART_SEED = 20160427  # deterministic perturbations for restarts
_NEVER_CLAMPED = ("lengthscale", "sigma2_eps", "sigma2_nugget")


@dataclass(frozen=True)
class FitResult:
    """Outcome of a variance-component fit."""

    spec: CovarianceSpec
    loglik: float
    converged: bool
    iterations: int
    method: str
    boundary: bool = False


def free_parameter_names(family: CovarianceSpec) -> tuple[str, ...]:
    """Fittable parameters of a covariance family.

    ``HierarchicalRandomSlope`` fits a diagonal Sigma_b, exposed as the
    intercept and slope variances.
    """
    if isinstance(family, Diagonal):
        return ("sigma2_eps",)
    if isinstance(family, CompoundSymmetry):
        return ("sigma2_eps", "rho")
    if isinstance(family, ClusteredRandomIntercept):
        return ("sigma2_b", "sigma2_eps")
    if isinstance(family, HierarchicalRandomSlope):
        return ("sigma2_u", "sb_intercept", "sb_slope", "sigma2_eps")
    if isinstance(family, ExponentialKernelNugget):
        return ("amplitude", "lengthscale", "sigma2_nugget")
    raise TypeError(f"not a covariance spec: {family!r}")


def _with_params(family: CovarianceSpec, names, values) -> CovarianceSpec:
    values = {k: float(v) for k, v in zip(names, values)}
    if isinstance(family, HierarchicalRandomSlope):
        sb = np.diag(
            [
                values.pop("sb_intercept", family.Sigma_b[0, 0]),
                values.pop("sb_slope", family.Sigma_b[1, 1]),
            ]
        )
        return dataclasses.replace(family, Sigma_b=sb, **values)
    return dataclasses.replace(family, **values)


def _param_values(family: CovarianceSpec, names) -> np.ndarray:
    out = []
    for name in names:
        if name == "sb_intercept":
            out.append(family.Sigma_b[0, 0])
        elif name == "sb_slope":
            out.append(family.Sigma_b[1, 1])
        else:
            out.append(getattr(family, name))
    return np.asarray(out, dtype=float)


def independence_blocks(family: CovarianceSpec, design: ClusterDesign) -> list[np.ndarray]:
    """Index groups with zero structural covariance between groups."""
    names = free_parameter_names(family)
    probe = _with_params(family, names, np.ones(len(names)))
    V = build_covariance(probe, design, check=False)
    n_blocks, labels = connected_components(np.abs(V) > 0, directed=False)
    return [np.flatnonzero(labels == b) for b in range(n_blocks)]


class _BlockLikelihood:
    """Blockwise profiled Gaussian likelihood with a cached linear path.

    All families except a free-lengthscale kernel have V(theta) linear in
    the parameters, so per-block unit-parameter basis matrices are cached
    once and each evaluation is a scaled sum plus Cholesky solves.  Blocks
    of equal size are stacked so the factorizations batch through LAPACK.
    """

    def __init__(self, data: Dataset, family: CovarianceSpec, method: str):
        self.data = data
        self.family = family
        self.method = method
        self.names = free_parameter_names(family)
        self.blocks = independence_blocks(family, data.design)
        self.designs = [data.design.subset(idx) for idx in self.blocks]
        self.linear = not isinstance(family, ExponentialKernelNugget)
        if self.linear:
            self.bases = [
                np.stack([self._unit_basis(name, d) for name in self.names])
                for d in self.designs
            ]
            self.groups = []  # (basis (q, nb, m, m), X (nb, m, p), y (nb, m))
            by_size: dict[int, list[int]] = {}
            for j, idx in enumerate(self.blocks):
                by_size.setdefault(idx.size, []).append(j)
            for size, members in sorted(by_size.items()):
                basis = np.stack([self.bases[j] for j in members], axis=1)
                X = np.stack([data.X[self.blocks[j]] for j in members])
                y = np.stack([data.y[self.blocks[j]] for j in members])
                self.groups.append((basis, X, y))

    def _unit_basis(self, name: str, design: ClusterDesign) -> np.ndarray:
        """dV/d(parameter) on one block, built from the model's own formulas."""
        from .covmodel import component_matrix

        fam = self.family
        if name in ("sigma2_eps", "sigma2_nugget"):
            return np.eye(design.n)
        if name == "rho":
            return component_matrix(dataclasses.replace(fam, rho=1.0), design, "b")
        if name == "sigma2_b":
            return component_matrix(dataclasses.replace(fam, sigma2_b=1.0), design, "b")
        if name == "sigma2_u":
            return component_matrix(dataclasses.replace(fam, sigma2_u=1.0), design, "u")
        if name == "sb_intercept":
            probe = dataclasses.replace(fam, Sigma_b=np.diag([1.0, 0.0]))
            return component_matrix(probe, design, "b")
        if name == "sb_slope":
            probe = dataclasses.replace(fam, Sigma_b=np.diag([0.0, 1.0]))
            return component_matrix(probe, design, "b")
        raise ValueError(f"no linear basis for parameter {name!r}")

    def loglik(self, theta: np.ndarray) -> float:
        if self.linear:
            return self._loglik_batched(theta)
        return self._loglik_generic(theta)

    def _loglik_batched(self, theta: np.ndarray) -> float:
        """Linear-parameter path: stacked blocks, batched factorizations.

        The residual quadratic form is assembled from y'V^-1 y, X'V^-1 y
        and X'V^-1 X, so each evaluation needs one batched Cholesky (for
        the log determinant) and one batched solve per block-size group.
        """
        n, p = self.data.n, self.data.p
        logdet = 0.0
        A = np.zeros((p, p))
        bvec = np.zeros(p)
        yviy = 0.0
        for basis, X, y in self.groups:
            V = np.tensordot(theta, basis, axes=(0, 0))
            try:
                chol = np.linalg.cholesky(V)
            except np.linalg.LinAlgError:
                return -np.inf
            diag = np.diagonal(chol, axis1=1, axis2=2)
            if np.any(diag <= 0):
                return -np.inf
            logdet += 2.0 * float(np.log(diag).sum())
            rhs = np.concatenate([X, y[:, :, None]], axis=2)
            sol = np.linalg.solve(V, rhs)
            Vi_X, Vi_y = sol[:, :, :p], sol[:, :, p]
            if p:
                A += np.einsum("bmp,bmq->pq", X, Vi_X)
                bvec += np.einsum("bmp,bm->p", X, Vi_y)
            yviy += float(np.einsum("bm,bm->", y, Vi_y))
        return self._assemble(logdet, A, bvec, yviy)

    def _loglik_generic(self, theta: np.ndarray) -> float:
        spec = _with_params(self.family, self.names, theta)
        n, p = self.data.n, self.data.p
        logdet = 0.0
        A = np.zeros((p, p))
        bvec = np.zeros(p)
        yviy = 0.0
        for idx, d in zip(self.blocks, self.designs):
            Vb = build_covariance(spec, d, check=False)
            try:
                fac = cho_factor(Vb, lower=True)
            except LinAlgError:
                return -np.inf
            logdet += 2.0 * float(np.sum(np.log(np.diag(fac[0]))))
            Xb, yb = self.data.X[idx], self.data.y[idx]
            sol = cho_solve(fac, np.column_stack([Xb, yb]))
            Vi_X, Vi_y = sol[:, :p], sol[:, p]
            if p:
                A += Xb.T @ Vi_X
                bvec += Xb.T @ Vi_y
            yviy += float(yb @ Vi_y)
        return self._assemble(logdet, A, bvec, yviy)

    def _assemble(self, logdet, A, bvec, yviy) -> float:
        n, p = self.data.n, self.data.p
        if p:
            try:
                afac = cho_factor(A, lower=True)
            except LinAlgError:
                return -np.inf
            beta = cho_solve(afac, bvec)
            quad = yviy - 2.0 * float(bvec @ beta) + float(beta @ A @ beta)
        else:
            quad = yviy
        ll = -0.5 * (n * np.log(2.0 * np.pi) + logdet + quad)
        if self.method == "REML" and p:
            ll -= float(np.sum(np.log(np.diag(afac[0]))))
        return ll


def gaussian_loglik(data: Dataset, spec: CovarianceSpec, method: str = "ML") -> float:
    """Profiled Gaussian log-likelihood of ``spec`` on ``data``.

    ``method="REML"`` subtracts (1/2) log det(X' V^-1 X); with no fixed
    effects the two criteria coincide.
    """
    if method not in ("ML", "REML"):
        raise ValueError("method must be 'ML' or 'REML'")
    ev = _BlockLikelihood(data, spec, method)
    return ev.loglik(_param_values(spec, ev.names))


def _initial_points(data: Dataset, family: CovarianceSpec, names) -> list[np.ndarray]:
    """Method-of-moments start plus seeded perturbations, all in log space."""
    y, X = data.y, data.X
    if data.p:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ beta
    else:
        resid = y
    total = max(float(np.var(resid)), 1e-8)
    n_var = sum(1 for nm in names if nm != "lengthscale")
    start = []
    for nm in names:
        if nm == "lengthscale":
            if data.design.coords is None:
                raise ValueError("fitting a lengthscale requires coordinates")
            d = data.design.coords[:, None, :] - data.design.coords[None, :, :]
            dist = np.sqrt((d**2).sum(axis=2))
            pos = dist[dist > 0]
            start.append(float(np.median(pos)) if pos.size else 1.0)
        else:
            start.append(total / max(n_var, 1))
    base = np.log(np.maximum(start, 1e-10))
    rng = np.random.default_rng(_RESTART_SEED)
    points = [base]
    for _ in range(_N_RESTARTS - 1):
        points.append(base + rng.normal(scale=1.0, size=base.shape))
    return points


def fit_variance_components(
    data: Dataset,
    family: CovarianceSpec,
    method: str = "REML",
    free: tuple[str, ...] | None = None,
) -> FitResult:
    """Fit the free parameters of ``family`` by Gaussian ML or REML.

    ``free=None`` fits every parameter of the family; pass an explicit
    tuple to pin a subset (an empty tuple returns the input spec
    unchanged).  Near-zero variance estimates are clamped to zero and
    flagged; the noise term is never clamped.  Non-convergence keeps the
    best iterate and reports ``converged=False``.
    """
    if method not in ("ML", "REML"):
        raise ValueError("method must be 'ML' or 'REML'")
    all_names = free_parameter_names(family)
    if free is None:
        free = all_names
    else:
        free = tuple(free)
        unknown = set(free) - set(all_names)
        if unknown:
            raise ValueError(f"unknown free parameters: {sorted(unknown)}")
    ev = _BlockLikelihood(data, family, method)
    pinned = _param_values(family, all_names)
    if not free:
        return FitResult(family, ev.loglik(pinned), True, 0, method)
    if data.n <= data.p + len(free):
        raise ValueError("need n > p + number of free parameters")
    slots = [all_names.index(nm) for nm in free]

    def objective(log_theta):
        theta = pinned.copy()
        theta[slots] = np.exp(log_theta)
        return -ev.loglik(theta)

    bounds = [(_LOG_FLOOR, _LOG_CEIL)] * len(free)
    best = None
    best_ok = False
    iterations = 0
    for x0 in _initial_points(data, family, free):
        x0 = np.clip(x0, _LOG_FLOOR, _LOG_CEIL)
        f0 = objective(x0)
        res = minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "maxiter": _MAX_ITER,
                "fatol": 1e-9 * max(1.0, abs(f0)),
                "xatol": 1e-8,
            },
        )
        iterations += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
            best_ok = bool(res.success)

    theta = np.exp(best.x)
    total_var = max(float(np.var(data.y)), 1e-12)
    boundary = False
    values = []
    for name, v in zip(free, theta):
        if name not in _NEVER_CLAMPED and v < 1e-8 * total_var:
            values.append(0.0)
            boundary = True
        else:
            values.append(float(v))
    fitted = _with_params(family, free, values)
    full = pinned.copy()
    full[slots] = values
    return FitResult(
        spec=fitted,
        loglik=ev.loglik(full),
        converged=best_ok,
        iterations=iterations,
        method=method,
        boundary=boundary,
    )
