import itertools

import numpy as np
import pytest

from cvcorrect.covmodel import (
    ClusterDesign,
    ClusteredRandomIntercept,
    CompoundSymmetry,
    Diagonal,
    ExponentialKernelNugget,
    HierarchicalRandomSlope,
    NumericalError,
    PredictionScenario,
    build_covariance,
    check_psd,
    component_matrix,
    component_names,
    conditional_covariance,
    contribution,
    cross_covariance,
    cross_covariance_matrix,
    iid_design,
    structure_names,
)


def hier_design(I=2, J=2, R=3):
    n = I * J * R
    cluster = np.repeat(np.arange(I), J * R)
    sub = np.repeat(np.arange(I * J), R)
    time = np.tile(np.arange(1.0, R + 1.0), I * J)
    return ClusterDesign(levels=("cluster", "sub"), labels=(cluster, sub), time=time)


def spatial_design(rng, n=8, n_sites=4):
    sites = rng.uniform(0, 3, size=(n_sites, 2))
    which = rng.integers(0, n_sites, size=n)
    which[: n_sites] = np.arange(n_sites)  # every site used at least once
    return ClusterDesign(coords=sites[which]), which


HRS = HierarchicalRandomSlope(sigma2_u=9.0, Sigma_b=np.diag([9.0, 1.0]), sigma2_eps=1.0)


def all_specs_and_designs(rng):
    d_h = hier_design()
    d_s, _ = spatial_design(rng)
    return [
        (Diagonal(sigma2_eps=1.5), iid_design(6)),
        (CompoundSymmetry(sigma2_eps=2.0, rho=0.5), iid_design(5)),
        (ClusteredRandomIntercept(sigma2_b=3.0, sigma2_eps=1.0), d_h),
        (HRS, d_h),
        (ExponentialKernelNugget(amplitude=2.0, lengthscale=1.5, sigma2_nugget=0.3), d_s),
    ]


class TestBuildCovariance:
    def test_hierarchical_entry_formula(self):
        # two observations sharing cluster and subcluster at times 2 and 3
        d = hier_design()
        V = build_covariance(HRS, d)
        i, j = 1, 2  # same subcluster, times 2 and 3
        assert d.labels[1][i] == d.labels[1][j]
        assert V[i, j] == 9.0 + (9.0 + 1.0 * 2.0 * 3.0)

    def test_diagonal_identity(self):
        V = build_covariance(Diagonal(sigma2_eps=1.0), iid_design(4))
        assert np.array_equal(V, np.eye(4))

    def test_compound_symmetry_brute_force(self):
        # brute-force component sum: sigma2 * I + rho * ones
        spec = CompoundSymmetry(sigma2_eps=2.0, rho=0.5)
        d = iid_design(3)
        expected = np.zeros((3, 3))
        for name in component_names(spec):
            expected += component_matrix(spec, d, name)
        V = build_covariance(spec, d)
        assert np.array_equal(V, expected)
        assert np.all(np.diag(V) == 2.5)
        off = V[~np.eye(3, dtype=bool)]
        assert np.all(off == 0.5)

    def test_symmetry_exact_and_psd(self):
        from cvcorrect.covmodel import noise_variance

        rng = np.random.default_rng(0)
        for spec, d in all_specs_and_designs(rng):
            V = build_covariance(spec, d)
            assert np.array_equal(V, V.T)
            w = np.linalg.eigvalsh(V)
            assert w[0] >= -1e-8 * w[-1]
            assert np.all(np.diag(V) >= noise_variance(spec) - 1e-15)

    def test_missing_design_fields(self):
        with pytest.raises(ValueError):
            build_covariance(
                ExponentialKernelNugget(amplitude=1.0, lengthscale=1.0, sigma2_nugget=1.0),
                iid_design(4),
            )
        no_time = ClusterDesign(
            levels=("cluster", "sub"),
            labels=(np.zeros(4, dtype=int), np.arange(4) // 2),
        )
        with pytest.raises(ValueError):
            build_covariance(HRS, no_time)

    def test_nonfinite_parameters_rejected(self):
        with pytest.raises(ValueError):
            Diagonal(sigma2_eps=np.nan)
        with pytest.raises(ValueError):
            CompoundSymmetry(sigma2_eps=1.0, rho=-0.1)
        with pytest.raises(ValueError):
            Diagonal(sigma2_eps=0.0)
        with pytest.raises(ValueError):
            HierarchicalRandomSlope(
                sigma2_u=1.0, Sigma_b=np.array([[1.0, 2.0], [2.0, 1.0]]), sigma2_eps=1.0
            )

    def test_psd_check_raises(self):
        M = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
        with pytest.raises(NumericalError):
            check_psd(M)


class TestComponentAdditivity:
    def test_every_partition_sums_to_full(self):
        rng = np.random.default_rng(1)
        for spec, d in all_specs_and_designs(rng):
            names = component_names(spec)
            V = build_covariance(spec, d)
            for r in range(len(names) + 1):
                for subset in itertools.combinations(names, r):
                    A = contribution(spec, d, subset)
                    B = contribution(spec, d, set(names) - set(subset))
                    assert np.array_equal(A + B, V)


class TestConditionalCovariance:
    def test_condition_on_subcluster_and_noise_leaves_cluster_term(self):
        d = hier_design()
        C = conditional_covariance(HRS, d, {"b", "eps"})
        expected = 9.0 * (d.labels[0][:, None] == d.labels[0][None, :])
        assert np.array_equal(C, expected)

    def test_condition_on_nothing_is_full(self):
        rng = np.random.default_rng(2)
        for spec, d in all_specs_and_designs(rng):
            assert np.array_equal(
                conditional_covariance(spec, d, set()), build_covariance(spec, d)
            )

    def test_condition_on_everything_is_zero(self):
        d = hier_design()
        C = conditional_covariance(HRS, d, {"u", "b", "eps"})
        assert np.array_equal(C, np.zeros_like(C))

    def test_unknown_component_rejected(self):
        with pytest.raises(ValueError):
            conditional_covariance(HRS, hier_design(), {"s"})

    def test_colocated_plugin_by_enumeration(self):
        # four points, the first two co-located
        coords = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 2.0], [3.0, 1.0]])
        d = ClusterDesign(coords=coords)
        spec = ExponentialKernelNugget(amplitude=2.0, lengthscale=1.5, sigma2_nugget=0.4)
        C = conditional_covariance(spec, d, {"s"})

        def kexp(a, b):
            return 2.0 * np.exp(-np.linalg.norm(coords[a] - coords[b]) / 1.5)

        vals = []
        for a in range(4):
            for b in range(a + 1, 4):
                if not np.array_equal(coords[a], coords[b]):
                    vals.append(kexp(a, b))
        excess = 2.0 - np.mean(vals)
        expected = np.zeros((4, 4))
        for a in range(4):
            for b in range(4):
                if np.array_equal(coords[a], coords[b]):
                    expected[a, b] = excess
        assert np.allclose(C, expected, rtol=0, atol=1e-14)
        # dominance: V - plug-in stays PSD
        V = build_covariance(spec, d)
        assert np.linalg.eigvalsh(V - C)[0] >= -1e-10

    def test_dominance_for_component_conditioning(self):
        rng = np.random.default_rng(3)
        for spec, d in all_specs_and_designs(rng):
            V = build_covariance(spec, d)
            for name in structure_names(spec):
                C = conditional_covariance(spec, d, {name})
                if isinstance(spec, ExponentialKernelNugget):
                    continue  # the {s} case is the plug-in, checked above
                assert np.linalg.eigvalsh(C)[0] >= -1e-10
                assert np.linalg.eigvalsh(V - C)[0] >= -1e-10


class TestCrossCovariance:
    def test_all_new_is_zero(self):
        d = hier_design()
        c = cross_covariance(HRS, d, PredictionScenario.all_new(), target_index=3)
        assert np.array_equal(c, np.zeros(d.n - 1))

    def test_all_shared_reproduces_column(self):
        rng = np.random.default_rng(4)
        for spec, d in all_specs_and_designs(rng):
            V = build_covariance(spec, d)
            k = d.n // 2
            c = cross_covariance(spec, d, PredictionScenario.all_shared(), k)
            assert np.allclose(c, np.delete(V[:, k], k), rtol=0, atol=0)

    def test_share_u_matches_conditional_structure(self):
        d = hier_design()
        k = 5
        c = cross_covariance(HRS, d, PredictionScenario.share("u"), k)
        C_u = conditional_covariance(HRS, d, {"b", "eps"})
        assert np.array_equal(c, np.delete(C_u[:, k], k))

    def test_unknown_scenario_component(self):
        with pytest.raises(ValueError):
            cross_covariance(HRS, hier_design(), PredictionScenario.share("s"), 0)

    def test_diagonal_offdiagonals_zero_everywhere(self):
        d = iid_design(5)
        spec = Diagonal(sigma2_eps=2.0)
        V = build_covariance(spec, d)
        assert np.array_equal(V, 2.0 * np.eye(5))
        c = cross_covariance(spec, d, PredictionScenario.all_shared(), 2)
        assert np.array_equal(c, np.zeros(4))
        C = conditional_covariance(spec, d, set())
        assert np.count_nonzero(C - np.diag(np.diag(C))) == 0

    def test_cross_matrix_between_disjoint_designs(self):
        d = hier_design()
        test = d.subset([0, 7])
        block = cross_covariance_matrix(HRS, d, test, PredictionScenario.share("u"))
        expected = 9.0 * (d.labels[0][:, None] == test.labels[0][None, :])
        assert np.array_equal(block, expected)


class TestClusterDesign:
    def test_nesting_violation(self):
        with pytest.raises(ValueError):
            ClusterDesign(
                levels=("outer", "inner"),
                labels=(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 2])),
            )

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ClusterDesign(
                levels=("a", "b"), labels=(np.arange(4), np.arange(5))
            )

    def test_nonfinite_coords(self):
        with pytest.raises(ValueError):
            ClusterDesign(coords=np.array([[0.0, np.inf], [1.0, 2.0]]))

    def test_subset_preserves_structure(self):
        d = hier_design()
        s = d.subset([0, 1, 6])
        assert s.n == 3
        assert s.levels == d.levels
        assert np.array_equal(s.time, d.time[[0, 1, 6]])


class TestPredictionScenario:
    def test_parse_and_tag_round_trip(self):
        for tag in ("all-shared", "all-new", "share:u", "share:b,u"):
            assert PredictionScenario.parse(tag).tag == tag

    def test_bad_tags(self):
        with pytest.raises(ValueError):
            PredictionScenario.parse("half-shared")
        with pytest.raises(ValueError):
            PredictionScenario.parse("share:")

    def test_marginal_shift_refused(self):
        with pytest.raises(ValueError):
            PredictionScenario(shared=frozenset(), marginal_shift="covariate")

    def test_resolve_shared(self):
        assert PredictionScenario.all_shared().resolve_shared(HRS) == {"u", "b"}
        assert PredictionScenario.all_new().resolve_shared(HRS) == frozenset()
        assert PredictionScenario.share("u").resolve_shared(HRS) == {"u"}
        with pytest.raises(ValueError):
            PredictionScenario.share("nope").resolve_shared(HRS)
