import numpy as np
import pytest

from cvcorrect.covmodel import (
    ClusterDesign,
    CompoundSymmetry,
    Diagonal,
    HierarchicalRandomSlope,
    PredictionScenario,
    build_covariance,
    cross_covariance_matrix,
)
from cvcorrect.predictors import (
    Dataset,
    FoldAssignment,
    PredictorSpec,
    cv_hat_matrix,
    full_hat_matrix,
    h_te_rows,
    make_folds,
    predictor_row,
)
from cvcorrect.covmodel import iid_design

HRS = HierarchicalRandomSlope(sigma2_u=9.0, Sigma_b=np.diag([9.0, 1.0]), sigma2_eps=1.0)


def hier_data(rng, I=2, J=2, R=3, p=3):
    n = I * J * R
    cluster = np.repeat(np.arange(I), J * R)
    sub = np.repeat(np.arange(I * J), R)
    time = np.tile(np.arange(1.0, R + 1.0), I * J)
    design = ClusterDesign(levels=("cluster", "sub"), labels=(cluster, sub), time=time)
    X = rng.standard_normal((n, p))
    X[:, 0] = 1.0
    y = rng.standard_normal(n)
    return Dataset(y=y, X=X, design=design)


class TestMakeFolds:
    def test_loo_partition(self):
        folds = make_folds(4, 4, seed=123)
        assert sorted(len(folds.members(k)) for k in range(4)) == [1, 1, 1, 1]

    def test_balanced_sizes(self):
        folds = make_folds(6, 3, seed=9)
        assert [len(folds.members(k)) for k in range(3)] == [2, 2, 2]
        folds = make_folds(7, 3, seed=9)
        sizes = sorted(len(folds.members(k)) for k in range(3))
        assert sizes == [2, 2, 3]

    def test_deterministic(self):
        a = make_folds(20, 4, seed=77)
        b = make_folds(20, 4, seed=77)
        assert np.array_equal(a.fold_of, b.fold_of)
        c = make_folds(20, 4, seed=78)
        assert not np.array_equal(a.fold_of, c.fold_of)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            make_folds(5, 1, seed=0)
        with pytest.raises(ValueError):
            make_folds(5, 6, seed=0)

    def test_fold_assignment_invariants(self):
        with pytest.raises(ValueError):
            FoldAssignment(K=2, fold_of=np.array([0, 0, 0]), seed=0)
        with pytest.raises(ValueError):
            FoldAssignment(K=2, fold_of=np.array([0, 0, 0, 1]), seed=0)


class TestPredictorRow:
    def test_intercept_only_ols_is_sample_mean(self):
        X = np.ones((5, 1))
        h = predictor_row(PredictorSpec("ols"), X, None, np.array([1.0]))
        assert np.allclose(h, np.full(5, 0.2), atol=1e-15)

    def test_gls_with_identity_matches_ols(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((8, 3))
        x = rng.standard_normal(3)
        h_ols = predictor_row(PredictorSpec("ols"), X, None, x)
        h_gls = predictor_row(PredictorSpec("gls"), X, np.eye(8), x)
        assert np.allclose(h_ols, h_gls, atol=1e-12)

    def test_blup_minimizes_expected_squared_error(self):
        # constrained minimizer of E(y_te - h y_tr)^2 s.t. unbiasedness,
        # solved directly from the joint covariance via the KKT system
        rng = np.random.default_rng(6)
        m, p = 5, 2
        X = rng.standard_normal((m, p))
        V = build_covariance(CompoundSymmetry(sigma2_eps=1.0, rho=0.7), iid_design(m))
        c = np.full(m, 0.7)  # shared equicorrelation component
        x = rng.standard_normal(p)
        h = predictor_row(PredictorSpec("blup"), X, V, x, c)
        kkt = np.block([[V, X], [X.T, np.zeros((p, p))]])
        rhs = np.concatenate([c, x])
        h_oracle = np.linalg.solve(kkt, rhs)[:m]
        assert np.allclose(h, h_oracle, atol=1e-10)

    def test_rank_deficiency_raises(self):
        from cvcorrect.covmodel import NumericalError

        X = np.ones((6, 2))  # duplicated column
        with pytest.raises(NumericalError):
            predictor_row(PredictorSpec("ols"), X, None, np.ones(2))


class TestCvHatMatrix:
    def test_two_point_loo_intercept(self):
        data = Dataset(
            y=np.array([1.0, 3.0]), X=np.ones((2, 1)), design=iid_design(2)
        )
        H = cv_hat_matrix(PredictorSpec("ols"), data, make_folds(2, 2, 0)).matrix
        assert np.array_equal(H, np.array([[0.0, 1.0], [1.0, 0.0]]))

    def test_zero_blocks_exact(self):
        rng = np.random.default_rng(7)
        data = hier_data(rng)
        for K in (2, 3, data.n):
            folds = make_folds(data.n, K, seed=K)
            for kind in ("ols", "gls", "blup"):
                H = cv_hat_matrix(PredictorSpec(kind), data, folds, HRS).matrix
                for k in range(K):
                    block = folds.members(k)
                    assert np.count_nonzero(H[np.ix_(block, block)]) == 0

    def test_kfold_rows_match_independent_predictor_row(self):
        rng = np.random.default_rng(8)
        data = hier_data(rng, I=1, J=2, R=3, p=2)  # n = 6
        spec = CompoundSymmetry(sigma2_eps=1.0, rho=0.6)
        V = build_covariance(spec, data.design)
        folds = make_folds(6, 3, seed=2)
        H = cv_hat_matrix(PredictorSpec("gls"), data, folds, spec).matrix
        for k in range(3):
            tr = folds.complement(k)
            for a in folds.members(k):
                row = predictor_row(
                    PredictorSpec("gls"), data.X[tr], V[np.ix_(tr, tr)], data.X[a]
                )
                assert np.allclose(H[a, tr], row, atol=1e-12)

    def test_loo_fast_path_matches_direct(self):
        rng = np.random.default_rng(9)
        data = hier_data(rng)
        n = data.n
        V = build_covariance(HRS, data.design)
        folds = make_folds(n, n, seed=4)
        scen = PredictionScenario.share("u")
        C_s = cross_covariance_matrix(HRS, data.design, data.design, scen)
        cases = [
            (PredictorSpec("ols"), None, None),
            (PredictorSpec("ridge", ridge_lambda=0.8), None, None),
            (PredictorSpec("gls"), HRS, None),
            (PredictorSpec("blup"), HRS, None),
            (PredictorSpec("gpr"), HRS, scen),
        ]
        for pred, cov, scenario in cases:
            H = cv_hat_matrix(pred, data, folds, cov, scenario).matrix
            for k in range(n):
                a = folds.members(k)[0]
                tr = folds.complement(k)
                if pred.uses_cross_covariance:
                    c = (C_s if scenario else V)[tr, a]
                else:
                    c = None
                Vtr = V[np.ix_(tr, tr)] if pred.needs_covariance else None
                row = predictor_row(pred, data.X[tr], Vtr, data.X[a], c)
                assert np.allclose(H[a, tr], row, atol=1e-11), pred.kind

    def test_requires_covariance(self):
        rng = np.random.default_rng(10)
        data = hier_data(rng)
        with pytest.raises(ValueError):
            cv_hat_matrix(PredictorSpec("gls"), data, make_folds(data.n, 2, 0))


class TestFullHatMatrix:
    def test_ols_intercept_only(self):
        data = Dataset(y=np.zeros(3), X=np.ones((3, 1)), design=iid_design(3))
        H = full_hat_matrix(PredictorSpec("ols"), data)
        assert np.allclose(H, np.full((3, 3), 1.0 / 3.0), atol=1e-15)

    def test_gls_projection_identity(self):
        rng = np.random.default_rng(11)
        data = hier_data(rng)
        H = full_hat_matrix(PredictorSpec("gls"), data, HRS)
        assert np.allclose(H @ data.X, data.X, atol=1e-10)

    def test_ridge_limit_is_ols(self):
        rng = np.random.default_rng(12)
        data = hier_data(rng)
        H0 = full_hat_matrix(PredictorSpec("ols"), data)
        H1 = full_hat_matrix(PredictorSpec("ridge", ridge_lambda=1e-10), data)
        assert np.allclose(H0, H1, atol=1e-6)

    def test_blup_fitted_values_match_mixed_model_form(self):
        # yhat = X beta + C_struct V^-1 (y - X beta), beta the GLS estimate
        rng = np.random.default_rng(13)
        data = hier_data(rng)
        V = build_covariance(HRS, data.design)
        H = full_hat_matrix(PredictorSpec("blup"), data, HRS)
        Vi = np.linalg.inv(V)
        A = data.X.T @ Vi @ data.X
        beta = np.linalg.solve(A, data.X.T @ Vi @ data.y)
        C_struct = V - np.eye(data.n)  # noise variance is 1
        direct = data.X @ beta + C_struct @ Vi @ (data.y - data.X @ beta)
        assert np.allclose(H @ data.y, direct, atol=1e-9)


class TestHteRows:
    def test_all_shared_equals_cv_rows(self):
        rng = np.random.default_rng(14)
        data = hier_data(rng)
        folds = make_folds(data.n, data.n, seed=1)
        scen = PredictionScenario.all_shared()
        for kind in ("gls", "blup"):
            H = cv_hat_matrix(PredictorSpec(kind), data, folds, HRS, scen).matrix
            atoms = h_te_rows(PredictorSpec(kind), data, folds, HRS, scen)
            for fold_atoms in atoms:
                for atom in fold_atoms:
                    assert np.allclose(
                        atom.weights, H[atom.index, atom.train], atol=1e-10
                    )

    def test_all_new_gls_rows_and_zero_cross(self):
        rng = np.random.default_rng(15)
        data = hier_data(rng)
        folds = make_folds(data.n, 3, seed=1)
        scen = PredictionScenario.all_new()
        atoms = h_te_rows(PredictorSpec("blup"), data, folds, HRS, scen)
        H_gls = cv_hat_matrix(PredictorSpec("gls"), data, folds, HRS).matrix
        for fold_atoms in atoms:
            for atom in fold_atoms:
                assert np.array_equal(atom.cross, np.zeros(atom.train.size))
                assert np.allclose(
                    atom.weights, H_gls[atom.index, atom.train], atol=1e-11
                )

    def test_share_u_cross_values(self):
        rng = np.random.default_rng(16)
        data = hier_data(rng)
        folds = make_folds(data.n, data.n, seed=3)
        atoms = h_te_rows(
            PredictorSpec("gls"), data, folds, HRS, PredictionScenario.share("u")
        )
        cl = data.design.labels[0]
        for fold_atoms in atoms:
            for atom in fold_atoms:
                expected = 9.0 * (cl[atom.train] == cl[atom.index])
                assert np.array_equal(atom.cross, expected)


class TestRowInvariants:
    def test_fixed_effect_reproduction(self):
        rng = np.random.default_rng(17)
        for trial in range(5):
            data = hier_data(rng, p=rng.integers(1, 4))
            folds = make_folds(data.n, data.n, seed=trial)
            for kind in ("ols", "gls"):
                H = cv_hat_matrix(PredictorSpec(kind), data, folds, HRS).matrix
                for k in range(data.n):
                    a = folds.members(k)[0]
                    tr = folds.complement(k)
                    assert np.allclose(
                        H[a, tr] @ data.X[tr], data.X[a], atol=1e-10
                    )

    def test_blup_cv_prediction_equals_conditional_mean_formula(self):
        rng = np.random.default_rng(18)
        data = hier_data(rng)
        V = build_covariance(HRS, data.design)
        folds = make_folds(data.n, data.n, seed=5)
        H = cv_hat_matrix(PredictorSpec("blup"), data, folds, HRS).matrix
        for k in (0, 4, 9):
            tr = np.flatnonzero(np.arange(data.n) != k)
            Vtr = V[np.ix_(tr, tr)]
            Xtr = data.X[tr]
            Vi = np.linalg.inv(Vtr)
            beta = np.linalg.solve(Xtr.T @ Vi @ Xtr, Xtr.T @ Vi @ data.y[tr])
            c = V[tr, k]
            direct = data.X[k] @ beta + c @ Vi @ (data.y[tr] - Xtr @ beta)
            assert abs(H[k] @ data.y - direct) < 1e-10

    def test_permutation_conjugation(self):
        rng = np.random.default_rng(19)
        data = hier_data(rng)
        n = data.n
        folds = make_folds(n, 4, seed=8)
        H = cv_hat_matrix(PredictorSpec("gls"), data, folds, HRS).matrix
        perm = rng.permutation(n)
        pdata = Dataset(
            y=data.y[perm], X=data.X[perm], design=data.design.subset(perm)
        )
        pfolds = FoldAssignment(K=4, fold_of=folds.fold_of[perm], seed=folds.seed)
        Hp = cv_hat_matrix(PredictorSpec("gls"), pdata, pfolds, HRS).matrix
        assert np.allclose(Hp, H[np.ix_(perm, perm)], atol=1e-12)

    def test_white_noise_collapses_all_predictors_to_ols(self):
        rng = np.random.default_rng(20)
        data = hier_data(rng)
        spec = Diagonal(sigma2_eps=2.3)
        folds = make_folds(data.n, data.n, seed=2)
        H_ols = cv_hat_matrix(PredictorSpec("ols"), data, folds).matrix
        for kind in ("gls", "blup", "gpr"):
            H = cv_hat_matrix(PredictorSpec(kind), data, folds, spec).matrix
            assert np.allclose(H, H_ols, atol=1e-12)


class TestDatasetValidation:
    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            Dataset(y=np.array([1.0]), X=np.ones((1, 1)), design=iid_design(1))

    def test_nonfinite(self):
        with pytest.raises(ValueError):
            Dataset(
                y=np.array([1.0, np.nan]), X=np.ones((2, 1)), design=iid_design(2)
            )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(y=np.ones(3), X=np.ones((2, 1)), design=iid_design(3))

    def test_subset_columns(self):
        rng = np.random.default_rng(21)
        d = hier_data(rng, p=3)
        s = d.subset_columns((0, 2))
        assert s.p == 2
        assert np.array_equal(s.X, d.X[:, [0, 2]])
