"""Hierarchical-cluster simulation experiments at desk scale.

The generator draws a two-level clustered design: a random intercept per
high-level cluster and a random intercept/slope pair per subcluster, with
cluster-correlated covariates.  On top of it sit the experiments: Monte
Carlo approximation of the generalization error, estimator-density runs
comparing the plain and corrected CV scores under known and estimated
variance parameters, model-selection agreement runs, and a repeated
train/holdout protocol for real tabular data.

Every experiment is deterministic given its master seed: each replication
draws from its own seed-sequence substream keyed by (seed, role, index),
so results do not depend on evaluation order.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .covmodel import (
    ClusterDesign,
    CovarianceSpec,
    HierarchicalRandomSlope,
    NumericalError,
    PredictionScenario,
    build_covariance,
    conditional_covariance,
    cross_covariance_matrix,
)
from .estimators import altman_estimator, cvc_score, gcv
from .predictors import (
    Dataset,
    PredictorSpec,
    _chol,
    _loo_hat_rows,
    full_hat_matrix,
    make_folds,
)
from .varest import fit_variance_components


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by (master seed, stream role, index...)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

N_COVARIATES = 9  # intercept, time, and seven cluster-correlated covariates


@dataclass(frozen=True)
class SimDesign:
    """Two-level clustered design: I clusters x J subclusters x R points.

    Covariate 1 is the intercept, covariate 2 the within-subcluster time
    index 1..R, and covariates 3..9 are eta_i + delta_ijk with standard
    normal cluster effect eta and observation noise delta.  All nine carry
    coefficient 0.1.  The response adds a cluster intercept (variance
    sigma2_u), a subcluster [intercept, slope] pair with diagonal
    covariance (sb_intercept, sb_slope) on the covariate (1, time), and
    observation noise.
    """

    I: int
    J: int = 5
    R: int = 10
    beta: tuple = (0.1,) * N_COVARIATES
    sigma2_u: float = 9.0
    sb_intercept: float = 9.0
    sb_slope: float = 1.0
    sigma2_eps: float = 1.0

    def __post_init__(self):
        if min(self.I, self.J, self.R) < 1:
            raise ValueError("cluster counts must be positive")
        if len(self.beta) != N_COVARIATES:
            raise ValueError(f"beta must have {N_COVARIATES} coefficients")

    @property
    def n(self) -> int:
        return self.I * self.J * self.R

    def covariance_spec(self) -> HierarchicalRandomSlope:
        return HierarchicalRandomSlope(
            sigma2_u=self.sigma2_u,
            Sigma_b=np.diag([self.sb_intercept, self.sb_slope]),
            sigma2_eps=self.sigma2_eps,
        )

    def cluster_design(self) -> ClusterDesign:
        cluster = np.repeat(np.arange(self.I), self.J * self.R)
        sub = np.repeat(np.arange(self.I * self.J), self.R)
        time = np.tile(np.arange(1.0, self.R + 1.0), self.I * self.J)
        return ClusterDesign(
            levels=("cluster", "subcluster"), labels=(cluster, sub), time=time
        )


@dataclass(frozen=True)
class LatentRecord:
    """Realized latent draws, kept so test points can share or redraw them."""

    eta: np.ndarray  # (I, 7) covariate cluster effects
    u: np.ndarray    # (I,) cluster intercepts
    b: np.ndarray    # (I, J, 2) subcluster [intercept, slope]


def generate_hierarchical(design: SimDesign, seed) -> tuple[Dataset, LatentRecord]:
    """Draw one training sample and its latent realization record."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    I, J, R, n = design.I, design.J, design.R, design.n
    cd = design.cluster_design()
    cluster = cd.labels[0]
    sub = cd.labels[1]
    time = cd.time

    eta = rng.standard_normal((I, 7))
    delta = rng.standard_normal((n, 7))
    u = rng.normal(scale=np.sqrt(design.sigma2_u), size=I)
    b = np.column_stack(
        [
            rng.normal(scale=np.sqrt(design.sb_intercept), size=I * J),
            rng.normal(scale=np.sqrt(design.sb_slope), size=I * J),
        ]
    ).reshape(I, J, 2)
    eps = rng.normal(scale=np.sqrt(design.sigma2_eps), size=n)

    X = np.empty((n, N_COVARIATES))
    X[:, 0] = 1.0
    X[:, 1] = time
    X[:, 2:] = eta[cluster] + delta

    bflat = b.reshape(I * J, 2)
    y = (
        X @ np.asarray(design.beta)
        + u[cluster]
        + bflat[sub, 0]
        + time * bflat[sub, 1]
        + eps
    )
    return Dataset(y=y, X=X, design=cd), LatentRecord(eta=eta, u=u, b=b)


def _harness_shared(design: SimDesign, scenario: PredictionScenario) -> frozenset:
    shared = scenario.resolve_shared(design.covariance_spec())
    if "b" in shared and "u" not in shared:
        raise ValueError("sharing a subcluster effect implies sharing its cluster")
    return shared


def _draw_test_point(design: SimDesign, latents: LatentRecord, shared: frozenset, rng):
    """One test draw: covariates, response, and BLUP cross-covariance inputs.

    Shared components keep their training realizations (and the covariate
    cluster effect of the chosen cluster); everything else is redrawn from
    the same marginal distribution.
    """
    k_te = float(rng.integers(1, design.R + 1))
    delta = rng.standard_normal(7)
    share_u = "u" in shared
    share_b = "b" in shared

    if share_u:
        i = int(rng.integers(design.I))
        eta = latents.eta[i]
        u = latents.u[i]
    else:
        i = -1
        eta = rng.standard_normal(7)
        u = rng.normal(scale=np.sqrt(design.sigma2_u))
    if share_b:
        j = int(rng.integers(design.J))
        b1, b2 = latents.b[i, j]
        sub = i * design.J + j
    else:
        sub = -1
        b1 = rng.normal(scale=np.sqrt(design.sb_intercept))
        b2 = rng.normal(scale=np.sqrt(design.sb_slope))
    eps = rng.normal(scale=np.sqrt(design.sigma2_eps))

    x = np.empty(N_COVARIATES)
    x[0] = 1.0
    x[1] = k_te
    x[2:] = eta + delta
    y = float(x @ np.asarray(design.beta) + u + b1 + k_te * b2 + eps)
    return x, y, i, sub, k_te


def _test_cross_cov(design: SimDesign, cd: ClusterDesign, shared, i, sub, k_te):
    """Scenario covariance of one test point with the training rows."""
    c = np.zeros(cd.n)
    if "u" in shared and i >= 0:
        c += design.sigma2_u * (cd.labels[0] == i)
    if "b" in shared and sub >= 0:
        mask = cd.labels[1] == sub
        c += mask * (design.sb_intercept + design.sb_slope * k_te * cd.time)
    return c


# ---------------------------------------------------------------------------
# Generalization-error approximation
# ---------------------------------------------------------------------------


def _gen_error_sweep(
    design: SimDesign,
    model_sets: Sequence[Sequence[int]],
    preds: Sequence[PredictorSpec],
    scenario: PredictionScenario,
    reps: int,
    seed: int,
    n_te: int = 1,
    train_size: Optional[int] = None,
):
    """Per-(predictor, model) generalization error, sharing the MC draws.

    Each replication draws a fresh training sample (minus held-back rows
    so the training size matches the CV complements), factors the true
    covariance once, fits every model, and averages the squared error of
    ``n_te`` scenario test draws.  Returns mean and standard-error arrays
    of shape (len(preds), len(model_sets)).
    """
    if reps < 100:
        raise ValueError("need at least 100 replications")
    shared = _harness_shared(design, scenario)
    n = design.n
    train_size = n - 1 if train_size is None else int(train_size)
    if not 2 <= train_size <= n:
        raise ValueError("train_size out of range")
    spec = design.covariance_spec()
    rep_means = np.empty((reps, len(preds), len(model_sets)))
    failures = 0
    for r in range(reps):
        rng = substream(seed, 0, r)
        data, latents = generate_hierarchical(design, rng)
        keep = np.sort(rng.choice(n, size=train_size, replace=False))
        cd = data.design.subset(keep)
        X_tr, y_tr = data.X[keep], data.y[keep]
        try:
            V = build_covariance(spec, cd, check=False)
            vfac = cho_factor(V, lower=True)
            fits = []
            for cols in model_sets:
                Xm = X_tr[:, list(cols)]
                Vi_X = cho_solve(vfac, Xm)
                beta = np.linalg.solve(Xm.T @ Vi_X, Vi_X.T @ y_tr)
                resid_w = cho_solve(vfac, y_tr - Xm @ beta)
                fits.append((beta, resid_w))
        except (np.linalg.LinAlgError, NumericalError):
            failures += 1
            rep_means[r] = np.nan
            continue
        tests = [_draw_test_point(design, latents, shared, rng) for _ in range(n_te)]
        for t_idx, (x, y_te, i, sub, k_te) in enumerate(tests):
            c = _test_cross_cov(design, cd, shared, i, sub, k_te)
            for m, cols in enumerate(model_sets):
                beta, resid_w = fits[m]
                mean_part = float(x[list(cols)] @ beta)
                for q, pred in enumerate(preds):
                    yhat = mean_part
                    if pred.uses_cross_covariance:
                        yhat += float(c @ resid_w)
                    err = (y_te - yhat) ** 2
                    if t_idx == 0:
                        rep_means[r, q, m] = err / n_te
                    else:
                        rep_means[r, q, m] += err / n_te
    if failures > 0.01 * reps:
        raise NumericalError(f"{failures}/{reps} replications failed")
    good = ~np.isnan(rep_means[:, 0, 0])
    vals = rep_means[good]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0])
    return mean, se


def approximate_generalization_error(
    design: SimDesign,
    model_cols: Sequence[int],
    pred: PredictorSpec,
    scenario: PredictionScenario,
    reps: int,
    seed: int,
    n_te: int = 1,
    train_size: Optional[int] = None,
) -> tuple[float, float]:
    """Monte Carlo (mean, SE) of the squared prediction error for one model."""
    mean, se = _gen_error_sweep(
        design, [tuple(model_cols)], [pred], scenario, reps, seed, n_te, train_size
    )
    return float(mean[0, 0]), float(se[0, 0])


# ---------------------------------------------------------------------------
# Experiment report
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Per-replication estimator values plus Monte Carlo references."""

    kind: str
    config: dict
    seed: int
    model_labels: list[str]
    replications: int
    arrays: dict[str, np.ndarray]          # each (replications, n_models)
    gen_error: Optional[np.ndarray] = None  # (n_models,)
    gen_error_se: Optional[np.ndarray] = None
    agreement: Optional[dict] = None
    wall_clock: float = 0.0
    flags: dict = field(default_factory=dict)

    def mean(self, key: str) -> np.ndarray:
        return self.arrays[key].mean(axis=0)

    def se(self, key: str) -> np.ndarray:
        a = self.arrays[key]
        if a.shape[0] < 2:
            return np.full(a.shape[1], np.nan)
        return a.std(axis=0, ddof=1) / np.sqrt(a.shape[0])

    def to_dict(self, timestamp: bool = True) -> dict:
        out = {
            "kind": self.kind,
            "config": self.config,
            "seed": self.seed,
            "model_labels": self.model_labels,
            "replications": self.replications,
            "arrays": {k: v.tolist() for k, v in self.arrays.items()},
            "gen_error": None if self.gen_error is None else self.gen_error.tolist(),
            "gen_error_se": (
                None if self.gen_error_se is None else self.gen_error_se.tolist()
            ),
            "agreement": self.agreement,
            "wall_clock_seconds": self.wall_clock,
            "flags": self.flags,
        }
        if timestamp:
            out["timestamp"] = _time.strftime("%Y-%m-%dT%H:%M:%S")
        return out

    def write_json(self, path, timestamp: bool = True):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(timestamp=timestamp), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv_rows(self):
        """Flat rows with the fixed column set, one per replication x model."""
        cv = self.arrays.get("cv")
        corr = self.arrays.get("correction")
        cvc = self.arrays.get("cv_c")
        ge = self.gen_error
        ge_se = self.gen_error_se
        for r in range(self.replications):
            for m, label in enumerate(self.model_labels):
                yield {
                    "replication": r,
                    "model": label,
                    "cv": cv[r, m] if cv is not None else "",
                    "correction": corr[r, m] if corr is not None else "",
                    "cv_c": cvc[r, m] if cvc is not None else "",
                    "gen_error_mc": ge[m] if ge is not None else "",
                    "gen_error_se": ge_se[m] if ge_se is not None else "",
                }
        for extra in ("cv_est", "correction_est", "cv_c_est"):
            if extra in self.arrays:
                break
        else:
            return
        for r in range(self.replications):
            for m, label in enumerate(self.model_labels):
                yield {
                    "replication": r,
                    "model": f"{label}:est",
                    "cv": self.arrays["cv_est"][r, m],
                    "correction": self.arrays["correction_est"][r, m],
                    "cv_c": self.arrays["cv_c_est"][r, m],
                    "gen_error_mc": ge[m] if ge is not None else "",
                    "gen_error_se": ge_se[m] if ge_se is not None else "",
                }

    def write_csv(self, path):
        import csv as _csv

        columns = [
            "replication",
            "model",
            "cv",
            "correction",
            "cv_c",
            "gen_error_mc",
            "gen_error_se",
        ]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(
                "# config "
                + json.dumps(
                    {"config": self.config, "seed": self.seed}, sort_keys=True
                )
                + "\n"
            )
            writer = _csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for row in self.csv_rows():
                writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------------------
# Density experiment (estimator distributions vs generalization error)
# ---------------------------------------------------------------------------


def default_nested_models(n_models: int = 8) -> list[tuple[int, ...]]:
    """Nested sweep: model m uses the intercept, time, and m-1 extras."""
    if not 1 <= n_models <= N_COVARIATES - 1:
        raise ValueError("n_models must be in [1, 8]")
    return [tuple(range(m + 2)) for m in range(n_models)]


def run_density_experiment(
    design: SimDesign,
    models: Optional[Sequence[Sequence[int]]] = None,
    scenario: PredictionScenario = PredictionScenario.all_new(),
    replications: int = 200,
    seed: int = 0,
    pred: PredictorSpec = PredictorSpec("gls"),
    estimate_variance: bool = True,
    gen_reps: int = 200,
    gen_points: int = 200,
    include_comparators: bool = False,
) -> ExperimentReport:
    """Distributions of CV and corrected CV against the MC generalization error.

    Per replication the known-variance variant plugs in the true
    covariance; the estimated variant refits the variance parameters once
    (REML on the saturated model) and plugs the fit in everywhere, hat
    matrix and correction alike.  Leave-one-out throughout.
    """
    t0 = _time.perf_counter()
    if models is None:
        models = [default_nested_models(8)[-1]]
    models = [tuple(m) for m in models]
    labels = [f"m{len(cols) - 1}" for cols in models]
    shared = _harness_shared(design, scenario)
    spec = design.covariance_spec()
    cd = design.cluster_design()
    n = design.n
    folds = make_folds(n, n, seed=0)

    gen_mean, gen_se = _gen_error_sweep(
        design, models, [pred], scenario, gen_reps, seed, n_te=gen_points
    )

    V = build_covariance(spec, cd)
    W = np.linalg.inv(V)
    W = 0.5 * (W + W.T)
    C_cond = conditional_covariance(spec, cd, shared)
    C_cross = cross_covariance_matrix(spec, cd, cd, scenario)

    cols_order = ["cv", "correction", "cv_c"]
    arrays = {k: np.empty((replications, len(models))) for k in cols_order}
    if estimate_variance:
        for k in cols_order:
            arrays[k + "_est"] = np.empty((replications, len(models)))
    if include_comparators:
        arrays["altman"] = np.empty((replications, len(models)))
        arrays["gcv"] = np.empty((replications, len(models)))

    for r in range(replications):
        rng = substream(seed, 1, r)
        data, _ = generate_hierarchical(design, rng)
        for m, cols in enumerate(models):
            Xm = data.X[:, list(cols)]
            cv, corr = _loo_cv_and_correction(pred, Xm, data.y, W, C_cross, C_cond)
            arrays["cv"][r, m] = cv
            arrays["correction"][r, m] = corr
            arrays["cv_c"][r, m] = cv + corr
            if include_comparators:
                dm = Dataset(y=data.y, X=Xm, design=cd)
                H_full = full_hat_matrix(pred, dm, spec)
                arrays["altman"][r, m] = altman_estimator(H_full, V, data.y)
                arrays["gcv"][r, m] = gcv(H_full, data.y)
        if estimate_variance:
            fit = fit_variance_components(data, spec, method="REML")
            V_hat = build_covariance(fit.spec, cd, check=False)
            W_hat = np.linalg.inv(V_hat)
            W_hat = 0.5 * (W_hat + W_hat.T)
            C_cond_hat = conditional_covariance(fit.spec, cd, shared)
            C_cross_hat = cross_covariance_matrix(fit.spec, cd, cd, scenario)
            for m, cols in enumerate(models):
                Xm = data.X[:, list(cols)]
                cv, corr = _loo_cv_and_correction(
                    pred, Xm, data.y, W_hat, C_cross_hat, C_cond_hat
                )
                arrays["cv_est"][r, m] = cv
                arrays["correction_est"][r, m] = corr
                arrays["cv_c_est"][r, m] = cv + corr

    return ExperimentReport(
        kind="density",
        config={
            "design": {"I": design.I, "J": design.J, "R": design.R, "n": n},
            "scenario": scenario.tag,
            "predictor": pred.kind,
            "models": [list(m) for m in models],
            "replications": replications,
            "gen_reps": gen_reps,
            "gen_points": gen_points,
            "estimate_variance": estimate_variance,
            "K": "loo",
        },
        seed=seed,
        model_labels=labels,
        replications=replications,
        arrays=arrays,
        gen_error=gen_mean[0],
        gen_error_se=gen_se[0],
        wall_clock=_time.perf_counter() - t0,
    )


def _loo_cv_and_correction(pred, X, y, W, C_cross, C_cond):
    """LOO CV score and conditional-form correction from a precision matrix."""
    H = _loo_hat_rows(pred, X, W, C_cross if pred.uses_cross_covariance else None)
    n = y.shape[0]
    r = y - H @ y
    cv = float(r @ r / n)
    corr = (2.0 / n) * float(np.einsum("ij,ji->", H, C_cond))
    return cv, corr


# ---------------------------------------------------------------------------
# Model-selection experiment
# ---------------------------------------------------------------------------


def run_selection_experiment(
    design: SimDesign,
    models: Optional[Sequence[Sequence[int]]] = None,
    predictors: Sequence[PredictorSpec] = (PredictorSpec("blup"), PredictorSpec("gls")),
    scenario: PredictionScenario = PredictionScenario.share("u"),
    replications: int = 100,
    seed: int = 0,
    estimate_variance: bool = False,
    gen_reps: int = 200,
    gen_points: int = 200,
) -> ExperimentReport:
    """Agreement of argmin CV and argmin corrected CV with the MC oracle.

    The oracle is the model minimizing the Monte Carlo generalization
    error, computed once per predictor; agreement rates are fractions of
    replications whose argmin matches it.
    """
    t0 = _time.perf_counter()
    if models is None:
        models = default_nested_models(8)
    models = [tuple(m) for m in models]
    shared = _harness_shared(design, scenario)
    spec = design.covariance_spec()
    cd = design.cluster_design()
    n = design.n

    gen_mean, gen_se = _gen_error_sweep(
        design, models, predictors, scenario, gen_reps, seed, n_te=gen_points
    )
    oracle = gen_mean.argmin(axis=1)

    V = build_covariance(spec, cd)
    W = np.linalg.inv(V)
    W = 0.5 * (W + W.T)
    C_cond = conditional_covariance(spec, cd, shared)
    C_cross = cross_covariance_matrix(spec, cd, cd, scenario)

    n_p, n_m = len(predictors), len(models)
    arrays = {
        k: np.empty((replications, n_p * n_m)) for k in ("cv", "correction", "cv_c")
    }
    if estimate_variance:
        arrays.update(
            {
                k + "_est": np.empty((replications, n_p * n_m))
                for k in ("cv", "correction", "cv_c")
            }
        )
    hits = np.zeros((n_p, 2))       # [pred, criterion in (cv, cv_c)]
    hits_est = np.zeros((n_p, 2))

    for r in range(replications):
        rng = substream(seed, 1, r)
        data, _ = generate_hierarchical(design, rng)
        fit = None
        if estimate_variance:
            fit = fit_variance_components(data, spec, method="REML")
            V_hat = build_covariance(fit.spec, cd, check=False)
            W_hat = np.linalg.inv(V_hat)
            W_hat = 0.5 * (W_hat + W_hat.T)
            C_cond_hat = conditional_covariance(fit.spec, cd, shared)
            C_cross_hat = cross_covariance_matrix(fit.spec, cd, cd, scenario)
        for q, pred in enumerate(predictors):
            cvs = np.empty(n_m)
            cvcs = np.empty(n_m)
            for m, cols in enumerate(models):
                Xm = data.X[:, list(cols)]
                cv, corr = _loo_cv_and_correction(pred, Xm, data.y, W, C_cross, C_cond)
                cvs[m], cvcs[m] = cv, cv + corr
                col = q * n_m + m
                arrays["cv"][r, col] = cv
                arrays["correction"][r, col] = corr
                arrays["cv_c"][r, col] = cv + corr
            hits[q, 0] += int(np.argmin(cvs) == oracle[q])
            hits[q, 1] += int(np.argmin(cvcs) == oracle[q])
            if estimate_variance:
                cvs_e = np.empty(n_m)
                cvcs_e = np.empty(n_m)
                for m, cols in enumerate(models):
                    Xm = data.X[:, list(cols)]
                    cv, corr = _loo_cv_and_correction(
                        pred, Xm, data.y, W_hat, C_cross_hat, C_cond_hat
                    )
                    cvs_e[m], cvcs_e[m] = cv, cv + corr
                    col = q * n_m + m
                    arrays["cv_est"][r, col] = cv
                    arrays["correction_est"][r, col] = corr
                    arrays["cv_c_est"][r, col] = cv + corr
                hits_est[q, 0] += int(np.argmin(cvs_e) == oracle[q])
                hits_est[q, 1] += int(np.argmin(cvcs_e) == oracle[q])

    agreement = {}
    for q, pred in enumerate(predictors):
        agreement[pred.kind] = {
            "cv": hits[q, 0] / replications,
            "cv_c": hits[q, 1] / replications,
            "oracle_model": int(oracle[q]),
        }
        if estimate_variance:
            agreement[pred.kind]["cv_est"] = hits_est[q, 0] / replications
            agreement[pred.kind]["cv_c_est"] = hits_est[q, 1] / replications

    labels = [
        f"{pred.kind}:m{len(cols) - 1}" for pred in predictors for cols in models
    ]
    gen_flat = gen_mean.reshape(-1)
    gen_se_flat = gen_se.reshape(-1)
    return ExperimentReport(
        kind="selection",
        config={
            "design": {"I": design.I, "J": design.J, "R": design.R, "n": n},
            "scenario": scenario.tag,
            "predictors": [p.kind for p in predictors],
            "models": [list(m) for m in models],
            "replications": replications,
            "gen_reps": gen_reps,
            "gen_points": gen_points,
            "estimate_variance": estimate_variance,
            "K": "loo",
        },
        seed=seed,
        model_labels=labels,
        replications=replications,
        arrays=arrays,
        gen_error=gen_flat,
        gen_error_se=gen_se_flat,
        agreement=agreement,
        wall_clock=_time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Repeated holdout on tabular data
# ---------------------------------------------------------------------------


def _subset_dataset(data: Dataset, idx: np.ndarray) -> Dataset:
    return Dataset(y=data.y[idx], X=data.X[idx], design=data.design.subset(idx))


def repeated_holdout_evaluation(
    data: Dataset,
    models: Sequence[Sequence[int]],
    pred: PredictorSpec,
    cov_family: CovarianceSpec,
    scenario: PredictionScenario,
    n_train_clusters: int,
    runs: int,
    seed: int,
    K: Optional[int] = None,
    method: str = "REML",
) -> ExperimentReport:
    """Repeated whole-cluster train/holdout evaluation of CV and corrected CV.

    Each run draws ``n_train_clusters`` top-level clusters as the training
    set, fits the covariance family per model, computes CV and the
    corrected score on the training part, and measures the squared test
    error on the held-out clusters; means over runs approximate the
    generalization error, reported with two-standard-deviation confidence
    intervals of the mean.
    """
    t0 = _time.perf_counter()
    labels0 = data.design.labels[0]
    clusters = np.unique(labels0)
    if not 1 <= n_train_clusters < clusters.shape[0]:
        raise ValueError(
            f"need 1 <= n_train_clusters < {clusters.shape[0]} distinct clusters"
        )
    models = [tuple(m) for m in models]
    labels = [f"m{i + 1}" for i in range(len(models))]
    arrays = {
        k: np.empty((runs, len(models)))
        for k in ("cv", "correction", "cv_c", "test_error")
    }
    for r in range(runs):
        rng = substream(seed, 2, r)
        chosen = rng.choice(clusters, size=n_train_clusters, replace=False)
        train_mask = np.isin(labels0, chosen)
        train = _subset_dataset(data, np.flatnonzero(train_mask))
        test = _subset_dataset(data, np.flatnonzero(~train_mask))
        folds = make_folds(train.n, train.n if K is None else K, seed=int(rng.integers(2**63)))
        for m, cols in enumerate(models):
            tr_m = train.subset_columns(cols)
            fit = fit_variance_components(tr_m, cov_family, method=method)
            est = cvc_score(tr_m, pred, folds, fit.spec, scenario)
            arrays["cv"][r, m] = est.cv
            arrays["correction"][r, m] = est.correction
            arrays["cv_c"][r, m] = est.cv_c
            arrays["test_error"][r, m] = _holdout_error(
                tr_m, test.subset_columns(cols), pred, fit.spec, scenario
            )
    means = {k: arrays[k].mean(axis=0) for k in arrays}
    if runs >= 2:
        half = {
            k: 2.0 * arrays[k].std(axis=0, ddof=1) / np.sqrt(runs) for k in arrays
        }
        flags = {}
    else:
        half = {k: np.full(len(models), np.nan) for k in arrays}
        flags = {"ci_undefined": True}
    return ExperimentReport(
        kind="holdout",
        config={
            "predictor": pred.kind,
            "cov_family": type(cov_family).__name__,
            "scenario": scenario.tag,
            "models": [list(m) for m in models],
            "runs": runs,
            "n_train_clusters": int(n_train_clusters),
            "K": "loo" if K is None else K,
            "method": method,
        },
        seed=seed,
        model_labels=labels,
        replications=runs,
        arrays=arrays,
        gen_error=means["test_error"],
        gen_error_se=(half["test_error"] / 2.0 if runs >= 2 else half["test_error"]),
        agreement=None,
        wall_clock=_time.perf_counter() - t0,
        flags={**flags, "ci_halfwidth": {k: v.tolist() for k, v in half.items()}},
    )


def _holdout_error(train: Dataset, test: Dataset, pred, spec, scenario) -> float:
    V = build_covariance(spec, train.design, check=False)
    vfac = _chol(V, "training covariance")
    Vi_X = cho_solve(vfac, train.X)
    A = train.X.T @ Vi_X
    beta = np.linalg.solve(A, Vi_X.T @ train.y)
    yhat = test.X @ beta
    if pred.uses_cross_covariance:
        C = cross_covariance_matrix(spec, train.design, test.design, scenario)
        yhat = yhat + C.T @ cho_solve(vfac, train.y - train.X @ beta)
    return float(np.mean((test.y - yhat) ** 2))
