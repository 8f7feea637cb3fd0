"""Cross-validation scores, the bias correction, and comparator estimators.

The centerpiece is the corrected score cv_c = cv + correction, where the
correction for a linear predictor is

    (2/n) * [ tr(H_cv Cov(y, y)) - n * avg(h_te . Cov(y_tr, y_te)) ]

with the average running over the per-observation target atoms.  When the
scenario shares a subset of latent components the correction collapses to
the equivalent conditional form (2/n) * tr(H_cv Cov(y, y | shared)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .covmodel import (
    CovarianceSpec,
    PredictionScenario,
    build_covariance,
    component_matrix,
    conditional_covariance,
    noise_variance,
    structure_names,
)
from .predictors import (
    CvHatMatrix,
    Dataset,
    FoldAssignment,
    HteAtom,
    PredictorSpec,
    cv_hat_matrix,
    h_te_rows,
    make_folds,
)


@dataclass(frozen=True)
class CvEstimate:
    """CV score, its bias correction, and the corrected estimate."""

    cv: float
    correction: float
    cv_c: float
    K: int
    scenario: str

    def __post_init__(self):
        if self.cv < 0:
            raise ValueError("cv must be nonnegative")
        if self.cv_c != self.cv + self.correction:
            raise ValueError("cv_c must equal cv + correction exactly")


def cv_score(H_cv: CvHatMatrix, y: np.ndarray) -> float:
    """Mean squared CV residual (1/n) * ||y - H_cv y||^2."""
    y = np.asarray(y, dtype=float)
    H = H_cv.matrix
    if y.shape != (H.shape[0],):
        raise ValueError("y length disagrees with the hat matrix")
    r = y - H @ y
    return float(r @ r / y.shape[0])


def _masked_trace(H: np.ndarray, V: np.ndarray) -> float:
    # tr(H V); H has exact zero fold blocks, so a diagonal V contributes
    # exactly 0.0 with no rounding.
    return float(np.einsum("ij,ji->", H, V))


def cvc_correction(H_cv: CvHatMatrix, V: np.ndarray, hte: list[list[HteAtom]]) -> float:
    """Bias correction (2/n) [tr(H_cv V) - sum of target atoms].

    Each held-out observation contributes one atom h_te . Cov(y_tr, y_te),
    so folds are weighted by their size and the leave-one-out case
    averages n identically distributed atoms.  The correction never looks
    at the responses.
    """
    H = H_cv.matrix
    n = H.shape[0]
    V = np.asarray(V, dtype=float)
    if V.shape != (n, n):
        raise ValueError("V shape disagrees with the hat matrix")
    atoms = 0.0
    count = 0
    for fold_atoms in hte:
        for atom in fold_atoms:
            atoms += float(atom.weights @ atom.cross)
            count += 1
    if count != n:
        raise ValueError("h_te rows must cover every observation exactly once")
    return (2.0 / n) * (_masked_trace(H, V) - atoms)


def cvc_score(
    data: Dataset,
    pred: PredictorSpec,
    folds: FoldAssignment,
    cov: CovarianceSpec,
    scenario: PredictionScenario,
) -> CvEstimate:
    """CV and corrected CV for one model under the declared scenario.

    The correction uses the conditional form
    (2/n) tr(H_cv Cov(y, y | shared components)), which evaluates to
    (2/n) tr(H_cv Cov(y, y)) in the all-new case and to exactly zero in
    the all-shared case.
    """
    H_cv = cv_hat_matrix(pred, data, folds, cov, scenario)
    cv = cv_score(H_cv, data.y)
    shared = scenario.resolve_shared(cov)
    C_cond = conditional_covariance(cov, data.design, shared)
    correction = (2.0 / data.n) * _masked_trace(H_cv.matrix, C_cond)
    return CvEstimate(
        cv=cv,
        correction=correction,
        cv_c=cv + correction,
        K=folds.K,
        scenario=scenario.tag,
    )


def wcv_gls_compound_symmetry(X: np.ndarray, sigma2_eps: float, rho: float) -> float:
    """Closed-form LOO GLS bias under compound symmetry, for the given X.

    Uses the all-ones inverse identity
    V_m^-1 (rho 1) = 1 * rho / (sigma2_eps + rho m) for an m-point block,
    so each leave-one-out term needs only the complement normal equations:

        (2/n) * sum_k  x_k' A_k^-1 X_-k' 1 * rho / (sigma2_eps + rho (n-1))

    The 2/n scaling matches the correction convention, so the result is
    directly comparable to the dense-matrix correction under LOO GLS with
    an all-new scenario.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if rho < 0 or sigma2_eps <= 0:
        raise ValueError("need rho >= 0 and sigma2_eps > 0")
    if rho == 0.0:
        return 0.0
    m = n - 1
    factor = rho / (sigma2_eps + rho * m)
    V_c = sigma2_eps * np.eye(m) + rho * np.ones((m, m))
    vfac = cho_factor(V_c, lower=True)
    total = 0.0
    for k in range(n):
        X_c = np.delete(X, k, axis=0)
        Vi_X = cho_solve(vfac, X_c)
        A = X_c.T @ Vi_X
        total += float(X[k] @ np.linalg.solve(A, X_c.T @ np.ones(m)))
    return (2.0 / n) * factor * total


def expected_optimism(H: np.ndarray, V: np.ndarray) -> float:
    """In-sample optimism (2/n) tr(H Cov(y, y)) for a full hat matrix."""
    H = np.asarray(H, dtype=float)
    V = np.asarray(V, dtype=float)
    if H.shape != V.shape or H.shape[0] != H.shape[1]:
        raise ValueError("H and V must be square with matching shapes")
    return (2.0 / H.shape[0]) * float(np.einsum("ij,ji->", H, V))


def altman_estimator(H: np.ndarray, V: np.ndarray, y: np.ndarray) -> float:
    """Comparator (||y - Hy||^2 / n) / (1 - tr(H V)/n)^2."""
    H = np.asarray(H, dtype=float)
    V = np.asarray(V, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    denom = 1.0 - float(np.einsum("ij,ji->", H, V)) / n
    if abs(denom) < 1e-12:
        raise ZeroDivisionError("degenerate denominator: tr(H V)/n is 1")
    r = y - H @ y
    return float(r @ r / n) / denom**2


def gcv(H: np.ndarray, y: np.ndarray) -> float:
    """Generalized CV (||y - Hy||^2 / n) / (1 - tr(H)/n)^2."""
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    denom = 1.0 - float(np.trace(H)) / n
    if abs(denom) < 1e-12:
        raise ZeroDivisionError("degenerate denominator: tr(H)/n is 1")
    r = y - H @ y
    return float(r @ r / n) / denom**2


def select_model(estimates: Sequence[CvEstimate]) -> int:
    """Index of the smallest cv_c; ties go to the smallest index."""
    if len(estimates) == 0:
        raise ValueError("select_model needs at least one estimate")
    values = [e.cv_c for e in estimates]
    return int(np.argmin(values))


# ---------------------------------------------------------------------------
# Monte Carlo oracle for the bias (test instrumentation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McEstimate:
    value: float
    se: float
    reps: int


def _component_samplers(cov, design):
    """Eigen factors for drawing each structure component's contribution."""
    factors = {}
    for name in structure_names(cov):
        C = component_matrix(cov, design, name)
        w, U = np.linalg.eigh(C)
        w = np.clip(w, 0.0, None)
        keep = w > 1e-12 * max(w.max(), 1.0)
        factors[name] = U[:, keep] * np.sqrt(w[keep])
    return factors


def mc_wcv_oracle(
    data: Dataset,
    pred: PredictorSpec,
    cov: CovarianceSpec,
    scenario: PredictionScenario,
    reps: int,
    seed: int,
    folds: Optional[FoldAssignment] = None,
    beta: Optional[np.ndarray] = None,
) -> McEstimate:
    """Simulation estimate of the CV bias for a fixed covariate matrix.

    Each replication draws the latent components and noise, forms the
    difference between the average squared target-prediction error (with
    shared components copied from the training draw and the rest redrawn)
    and the mean squared CV residual.  The mean over replications is an
    unbiased estimate of the bias the analytic correction targets.
    """
    if reps < 100:
        raise ValueError("need at least 100 replications")
    n = data.n
    if folds is None:
        folds = make_folds(n, n, seed=0)
    mu = np.zeros(n) if beta is None else data.X @ np.asarray(beta, dtype=float)

    H_cv = cv_hat_matrix(pred, data, folds, cov, scenario).matrix
    hte = h_te_rows(pred, data, folds, cov, scenario)
    H_te = np.zeros((n, n))
    for fold_atoms in hte:
        for atom in fold_atoms:
            H_te[atom.index, atom.train] = atom.weights

    shared = scenario.resolve_shared(cov)
    factors = _component_samplers(cov, data.design)
    diag_sd = {
        name: np.sqrt(np.diag(component_matrix(cov, data.design, name)))
        for name in structure_names(cov)
    }
    sd_noise = np.sqrt(noise_variance(cov))

    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    samples = np.empty(reps)
    for r in range(reps):
        parts = {name: L @ rng.standard_normal(L.shape[1]) for name, L in factors.items()}
        y = mu + sum(parts.values(), start=np.zeros(n)) + sd_noise * rng.standard_normal(n)
        cv_term = float(np.mean((y - H_cv @ y) ** 2))

        y_te = mu + sd_noise * rng.standard_normal(n)
        for name in structure_names(cov):
            if name in shared:
                y_te = y_te + parts[name]
            else:
                y_te = y_te + diag_sd[name] * rng.standard_normal(n)
        gen_term = float(np.mean((y_te - H_te @ y) ** 2))
        samples[r] = gen_term - cv_term

    value = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(reps))
    return McEstimate(value=value, se=se, reps=reps)
