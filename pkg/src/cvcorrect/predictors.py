"""Linear predictors as weight rows and cross-validation hat matrices.

Every supported predictor is linear in the response: a prediction is a
weight row times the training responses.  The cross-validation hat matrix
collects those rows with exact zero blocks on the fold diagonal, so no
observation participates in predicting itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .covmodel import (
    ClusterDesign,
    CovarianceSpec,
    NumericalError,
    PredictionScenario,
    build_covariance,
    cross_covariance_matrix,
)

PREDICTOR_KINDS = ("ols", "gls", "ridge", "blup", "gpr")
_NEEDS_COV = ("gls", "blup", "gpr")
_USES_CROSS = ("blup", "gpr")


@dataclass(frozen=True)
class Dataset:
    """Training data: response, fixed-effects design, grouping structure."""

    y: np.ndarray
    X: np.ndarray
    design: ClusterDesign

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be 2-dimensional")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("y and X disagree on the number of observations")
        if y.shape[0] < 2:
            raise ValueError("need at least 2 observations")
        if self.design.n != y.shape[0]:
            raise ValueError("design and y disagree on the number of observations")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("non-finite entries in y or X")
        y.flags.writeable = False
        X.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset_columns(self, cols) -> "Dataset":
        """Dataset restricted to a covariate subset (model sweep helper)."""
        return Dataset(self.y, self.X[:, list(cols)], self.design)


@dataclass(frozen=True)
class PredictorSpec:
    """Which linear predictor to build.

    ``ridge_lambda`` penalizes every column of the raw design, the
    intercept included; center the design first if the intercept should
    stay unpenalized.  ``gls``, ``blup`` and ``gpr`` require a covariance
    spec at solve time; ``blup`` and ``gpr`` share the same construction
    (posterior-mean weights with an explicit fixed-effects mean).
    """

    kind: str
    ridge_lambda: float = 0.0

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if not np.isfinite(self.ridge_lambda) or self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be finite and >= 0")

    @property
    def needs_covariance(self) -> bool:
        return self.kind in _NEEDS_COV

    @property
    def uses_cross_covariance(self) -> bool:
        return self.kind in _USES_CROSS


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of observations into K folds, deterministic in the seed."""

    K: int
    fold_of: np.ndarray
    seed: int

    def __post_init__(self):
        fold_of = np.asarray(self.fold_of, dtype=int)
        fold_of.flags.writeable = False
        object.__setattr__(self, "fold_of", fold_of)
        n = fold_of.shape[0]
        if not 2 <= self.K <= n:
            raise ValueError(f"K must be in [2, n]; got K={self.K}, n={n}")
        sizes = np.bincount(fold_of, minlength=self.K)
        if sizes.min() < 1:
            raise ValueError("every fold must be nonempty")
        if sizes.max() - sizes.min() > 1:
            raise ValueError("fold sizes must differ by at most 1")

    @property
    def n(self) -> int:
        return self.fold_of.shape[0]

    @property
    def is_loo(self) -> bool:
        return self.K == self.n

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def make_folds(n: int, K: int, seed: int) -> FoldAssignment:
    """Seeded balanced random partition of ``range(n)`` into K folds."""
    if not 2 <= K <= n:
        raise ValueError(f"K must be in [2, n]; got K={K}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    for k, chunk in enumerate(np.array_split(perm, K)):
        fold_of[chunk] = k
    return FoldAssignment(K=K, fold_of=fold_of, seed=seed)


@dataclass(frozen=True)
class CvHatMatrix:
    """CV prediction weights with exact zero blocks on the fold diagonal."""

    matrix: np.ndarray
    folds: FoldAssignment

    def __post_init__(self):
        H = np.asarray(self.matrix, dtype=float)
        n = self.folds.n
        if H.shape != (n, n):
            raise ValueError("hat matrix shape disagrees with the fold assignment")
        for k in range(self.folds.K):
            block = self.folds.members(k)
            if np.any(H[np.ix_(block, block)] != 0.0):
                raise ValueError("within-fold weights must be exactly zero")
        H.flags.writeable = False
        object.__setattr__(self, "matrix", H)

    @property
    def n(self) -> int:
        return self.folds.n


# ---------------------------------------------------------------------------
# Single weight rows
# ---------------------------------------------------------------------------


def _chol(M: np.ndarray, what: str):
    """SPD factorization with a single jitter retry, then a hard error."""
    try:
        return cho_factor(M, lower=True)
    except LinAlgError:
        jitter = 1e-10 * float(np.mean(np.diag(M))) if M.size else 0.0
        try:
            return cho_factor(M + jitter * np.eye(M.shape[0]), lower=True)
        except LinAlgError as exc:
            raise NumericalError(f"{what} is not positive definite") from exc


def predictor_row(
    pred: PredictorSpec,
    X_train: np.ndarray,
    V_train: Optional[np.ndarray],
    x_target: np.ndarray,
    c_target: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Weights h with h @ y_train predicting the target response.

    GLS weights are x' A^-1 X' V^-1 with A = X' V^-1 X; OLS and ridge use
    V = I (ridge adds lambda to A).  BLUP/GPR weights add the
    covariance-exploiting residual term c' V^-1 (I - X A^-1 X' V^-1),
    where ``c_target`` is the covariance of the target with the training
    responses (zero for mean-only prediction).
    """
    X = np.asarray(X_train, dtype=float)
    x = np.asarray(x_target, dtype=float)
    m, p = X.shape
    if x.shape != (p,):
        raise ValueError("x_target length disagrees with X_train columns")

    if pred.kind in ("ols", "ridge"):
        A = X.T @ X
        if pred.kind == "ridge":
            A = A + pred.ridge_lambda * np.eye(p)
        fac = _chol(A, "normal-equations matrix (rank-deficient X?)")
        return X @ cho_solve(fac, x)

    if V_train is None:
        raise ValueError(f"{pred.kind} requires a training covariance matrix")
    V = np.asarray(V_train, dtype=float)
    if V.shape != (m, m):
        raise ValueError("V_train shape disagrees with X_train")
    vfac = _chol(V, "training covariance")
    Vi_X = cho_solve(vfac, X)
    A = X.T @ Vi_X
    afac = _chol(A, "GLS normal-equations matrix (rank-deficient X?)") if p else None

    if pred.kind == "gls":
        return Vi_X @ cho_solve(afac, x) if p else np.zeros(m)

    # blup / gpr
    if c_target is None:
        c = np.zeros(m)
    else:
        c = np.asarray(c_target, dtype=float)
        if c.shape != (m,):
            raise ValueError("c_target length disagrees with X_train rows")
    d = cho_solve(vfac, c)
    if p:
        return Vi_X @ cho_solve(afac, x - X.T @ d) + d
    return d


# ---------------------------------------------------------------------------
# Hat matrices
# ---------------------------------------------------------------------------


def full_hat_matrix(
    pred: PredictorSpec, data: Dataset, cov: Optional[CovarianceSpec] = None
) -> np.ndarray:
    """In-sample hat matrix H with yhat = H y over all n observations.

    For BLUP/GPR the row for observation i predicts a new observation at
    i's position sharing every latent component, so the covariance input
    is column i of the structure part of V (noise excluded).
    """
    X, n = data.X, data.n
    if pred.kind in ("ols", "ridge"):
        A = X.T @ X
        if pred.kind == "ridge":
            A = A + pred.ridge_lambda * np.eye(data.p)
        fac = _chol(A, "normal-equations matrix")
        return X @ cho_solve(fac, X.T)
    if cov is None:
        raise ValueError(f"{pred.kind} requires a covariance spec")
    V = build_covariance(cov, data.design)
    vfac = _chol(V, "covariance matrix")
    Vi_X = cho_solve(vfac, X)
    A = X.T @ Vi_X
    afac = _chol(A, "GLS normal-equations matrix")
    H_gls = X @ cho_solve(afac, Vi_X.T)
    if pred.kind == "gls":
        return H_gls
    from .covmodel import contribution, structure_names

    C_struct = contribution(cov, data.design, structure_names(cov))
    W = cho_solve(vfac, np.eye(n))
    psi = W - Vi_X @ cho_solve(afac, Vi_X.T)
    return H_gls + C_struct @ psi


def _scenario_cross_full(
    cov: CovarianceSpec, design: ClusterDesign, scenario: PredictionScenario
) -> np.ndarray:
    """n x n matrix whose column i is the scenario covariance of a target
    at row i's position with all rows (entry [i, i] is unused)."""
    return cross_covariance_matrix(cov, design, design, scenario)


def cv_hat_matrix(
    pred: PredictorSpec,
    data: Dataset,
    folds: FoldAssignment,
    cov: Optional[CovarianceSpec] = None,
    scenario: Optional[PredictionScenario] = None,
) -> CvHatMatrix:
    """CV hat matrix: row a holds the weights predicting observation a from
    the complement of a's fold, zero elsewhere.

    For BLUP/GPR the covariance-exploiting term uses the cross covariance
    implied by ``scenario``: the predictor is matched to the declared
    prediction goal, and the default (all components shared) is the
    same-realization covariance, i.e. the corresponding column of V.
    """
    if folds.n != data.n:
        raise ValueError("fold assignment disagrees with data size")
    if pred.needs_covariance and cov is None:
        raise ValueError(f"{pred.kind} requires a covariance spec")
    if scenario is None:
        scenario = PredictionScenario.all_shared()

    V = build_covariance(cov, data.design) if pred.needs_covariance else None
    C_cross = None
    if pred.uses_cross_covariance:
        C_cross = _scenario_cross_full(cov, data.design, scenario)

    if folds.is_loo:
        if pred.kind in ("ols", "ridge"):
            W = None
        else:
            vfac = _chol(V, "covariance matrix")
            W = cho_solve(vfac, np.eye(data.n))
            W = 0.5 * (W + W.T)
        H = _loo_hat_rows(pred, data.X, W, C_cross)
    else:
        H = _kfold_hat_rows(pred, data.X, V, C_cross, folds)
    return CvHatMatrix(matrix=H, folds=folds)


def _kfold_hat_rows(pred, X, V, C_cross, folds):
    n = X.shape[0]
    H = np.zeros((n, n))
    for k in range(folds.K):
        test = folds.members(k)
        train = folds.complement(k)
        V_tr = V[np.ix_(train, train)] if V is not None else None
        for a in test:
            c = C_cross[train, a] if C_cross is not None else None
            H[a, train] = predictor_row(pred, X[train], V_tr, X[a], c)
    return H


def _loo_hat_rows(pred, X, W, C_cross):
    """All leave-one-out rows at once via rank-one complement identities.

    With W = V^-1 (identity for OLS/ridge, precomputed by the caller for
    the covariance-based predictors), G = X'WX, u_k = W[:, k] and
    s_k = (WX)[k, :], the deleted system satisfies
    A_k = G - s_k s_k'/W[kk], and every row reduces to matrix products of
    precomputed blocks.  Results match the per-row direct construction to
    machine precision.
    """
    n, p = X.shape
    if pred.kind in ("ols", "ridge"):
        W = np.eye(n)
        G = X.T @ X
        if pred.kind == "ridge":
            G = G + pred.ridge_lambda * np.eye(p)
    else:
        G = X.T @ W @ X
    B = W @ X                                  # row k is s_k
    gfac = _chol(G, "normal-equations matrix") if p else None
    w = np.diag(W).copy()

    if p:
        Ghat = cho_solve(gfac, X.T)            # columns G^-1 x_k
        Qhat = cho_solve(gfac, B.T)            # columns G^-1 s_k
        gamma = np.einsum("kp,pk->k", B, Qhat)
        denom = w - gamma                      # Schur complements, > 0
        if np.any(denom <= 0):
            raise NumericalError("leave-one-out system is singular")
    else:
        Ghat = Qhat = np.zeros((0, n))
        denom = w

    if pred.kind in ("ols", "ridge", "gls"):
        if p == 0:
            return np.zeros((n, n))
        alpha = np.einsum("kp,pk->k", B, Ghat)
        A_mat = Ghat + Qhat * (alpha / denom)[None, :]
        H = (B @ A_mat).T - (alpha / denom)[:, None] * W
        np.fill_diagonal(H, 0.0)
        return H

    # blup / gpr: residual term from the scenario cross covariance
    Z = C_cross.copy()
    np.fill_diagonal(Z, 0.0)
    WZ = W @ Z
    tau = np.diag(WZ) / w
    D = WZ - W * tau[None, :]                  # column k is the full-length d_k
    if p:
        T = cho_solve(gfac, X.T @ D)           # columns G^-1 X' d_k
        E = Ghat - T                           # columns G^-1 (x_k - X' d_k)
        alpha = np.einsum("kp,pk->k", B, E)
        A_mat = E + Qhat * (alpha / denom)[None, :]
        H = (B @ A_mat).T - (alpha / denom)[:, None] * W + D.T
    else:
        H = D.T
    np.fill_diagonal(H, 0.0)
    return H


@dataclass(frozen=True)
class HteAtom:
    """Target-prediction weights for one held-out observation's position."""

    index: int
    train: np.ndarray
    weights: np.ndarray
    cross: np.ndarray


def h_te_rows(
    pred: PredictorSpec,
    data: Dataset,
    folds: FoldAssignment,
    cov: CovarianceSpec,
    scenario: PredictionScenario,
) -> list[list[HteAtom]]:
    """Per-fold target weight rows under the declared scenario.

    For each fold k and each member observation, builds the weight row
    from the fold complement and the scenario cross covariance at that
    observation's position, paired with that cross-covariance vector.
    Downstream corrections average the resulting atoms over all folds.
    """
    if cov is None:
        raise ValueError("h_te_rows requires a covariance spec")
    V = build_covariance(cov, data.design)
    C_cross = _scenario_cross_full(cov, data.design, scenario)
    out: list[list[HteAtom]] = []
    for k in range(folds.K):
        train = folds.complement(k)
        V_tr = V[np.ix_(train, train)] if pred.needs_covariance else None
        atoms = []
        for a in folds.members(k):
            c = C_cross[train, a]
            h = predictor_row(pred, data.X[train], V_tr, data.X[a], c)
            atoms.append(HteAtom(index=int(a), train=train, weights=h, cross=c))
        out.append(atoms)
    return out
