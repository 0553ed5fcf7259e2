"""Core model: regression matrix, precision, means, likelihoods, priors, guards."""

import math

import numpy as np
import pytest

from modnet.errors import SingularModelError, StructureMismatchError
from modnet.model import (
    Dataset,
    ModelParameters,
    ModularStructure,
    PriorConfig,
    build_regression_matrix,
    check_identifiability,
    condition_means,
    context_coefficient,
    log_likelihood_network,
    log_likelihood_variables,
    log_module_count_prior,
    log_posterior,
    log_prior,
    mean_matrix,
    precision_from_W,
)

from helpers import (
    brute_force_network_loglik,
    brute_force_variables_loglik,
    random_state,
)


def _tiny_dataset(n=3, c=2, r=1, candidates=None):
    x = np.zeros((n, c))
    b = np.zeros((r, n), dtype=np.int8)
    if candidates is None:
        candidates = list(range(r))
    return Dataset(x, b, candidates)


def _structure(assign, parents):
    return ModularStructure(np.asarray(assign), parents, max(assign) + 1)


def _params(structure, n_candidates, n_conditions, weight=0.5):
    weights = {k: weight for k in range(structure.n_modules)}
    mix = {key: (1.0, 1.0) for key in structure.pair_keys()}
    split = {key: 0.0 for key in structure.pair_keys()}
    edge = {key: 0.5 for key in structure.pair_keys()}
    return ModelParameters(weights, np.zeros((n_candidates, n_conditions)), mix, split, edge)


class TestDatasetInvariants:
    def test_rejects_non_binary_network(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.array([[0, 2, 0]]), [0])

    def test_rejects_duplicate_candidates(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.zeros((2, 3)), [1, 1])

    def test_rejects_single_node(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 2)), np.zeros((1, 1)), [0])


class TestStructureInvariants:
    def test_rejects_empty_module(self):
        with pytest.raises(ValueError):
            ModularStructure(np.array([0, 0, 0]), {0: (), 1: ()}, 2)

    def test_rejects_missing_parent_key(self):
        with pytest.raises(ValueError):
            ModularStructure(np.array([0, 1, 1]), {0: ()}, 2)


class TestBuildRegressionMatrix:
    def test_no_parents_gives_zero_matrix(self):
        ds = _tiny_dataset()
        st = _structure([0, 0, 1], {0: (), 1: ()})
        pr = _params(st, 1, 2)
        w, mask = build_regression_matrix(st, pr, ds)
        assert not w.any()
        assert not mask.any()

    def test_hand_constructed_entries(self):
        # module {0,1} with parent node 2, weight 0.5
        ds = _tiny_dataset(candidates=[2])
        st = _structure([0, 0, 1], {0: (0,), 1: ()})
        pr = _params(st, 1, 2, weight=0.5)
        w, mask = build_regression_matrix(st, pr, ds)
        expect = np.zeros((3, 3))
        expect[0, 2] = expect[1, 2] = 0.5
        assert np.array_equal(w, expect)
        assert mask[0, 2] and mask[1, 2] and mask.sum() == 2

    def test_self_parent_two_node_instance(self):
        # node 0 is a candidate and a member of the module it drives:
        # diagonal entry appears, and the guard rejects the structure.
        ds = Dataset(np.zeros((2, 1)), np.zeros((1, 2), dtype=np.int8), [0])
        st = _structure([0, 0], {0: (0,)})
        pr = _params(st, 1, 1, weight=0.3)
        w, _ = build_regression_matrix(st, pr, ds)
        assert w[0, 0] == 0.3 and w[1, 0] == 0.3
        assert not check_identifiability(st, ds, w)

    def test_mismatched_keys_raise(self):
        ds = _tiny_dataset(candidates=[2])
        st = _structure([0, 0, 1], {0: (0,), 1: ()})
        pr = _params(st, 1, 2)
        pr.edge_probs = {}
        with pytest.raises(StructureMismatchError):
            build_regression_matrix(st, pr, ds)


class TestPrecisionFromW:
    def test_zero_regression_gives_identity(self):
        prec, logdet = precision_from_W(np.zeros((4, 4)))
        assert np.array_equal(prec, np.eye(4))
        assert logdet == 0.0

    def test_two_by_two_hand_product(self):
        w = np.array([[0.0, 0.5], [0.0, 0.0]])
        prec, logdet = precision_from_W(w)
        assert np.allclose(prec, [[1.0, -0.5], [-0.5, 1.25]])
        assert abs(logdet) < 1e-12  # det(I - W) = 1

    def test_identity_regression_is_singular(self):
        with pytest.raises(SingularModelError):
            precision_from_W(np.eye(3))

    def test_ill_conditioned_rejected(self):
        w = np.array([[0.0, 1.0 - 1e-12], [1.0 - 1e-12, 0.0]])
        with pytest.raises(SingularModelError):
            precision_from_W(w, cond_threshold=1e8)


class TestContextCoefficient:
    def test_below_split(self):
        assert context_coefficient(1.0, 2.0, 0.0, -1.0) == 1.0

    def test_above_split(self):
        assert context_coefficient(1.0, 2.0, 0.0, 1.0) == 2.0

    def test_tie_takes_high_branch(self):
        assert context_coefficient(1.0, 2.0, 0.0, 0.0) == 2.0

    def test_piecewise_constant_single_jump(self):
        grid = np.linspace(-3, 3, 601)
        vals = np.array([context_coefficient(-1.0, 4.0, 0.25, m) for m in grid])
        jumps = np.flatnonzero(np.diff(vals) != 0)
        assert len(jumps) == 1
        assert grid[jumps[0]] < 0.25 <= grid[jumps[0] + 1]


class TestConditionMeans:
    def test_single_parent_identity_mixture(self):
        ds = _tiny_dataset(n=4, c=2, r=1, candidates=[3])
        st = _structure([0, 0, 0, 1], {0: (0,), 1: ()})
        pr = _params(st, 1, 2)
        pr.parent_means = np.array([[2.0, -1.0]])
        pr.mix_coeffs[(0, 0)] = (1.0, 1.0)
        mu = condition_means(st, pr, ds, 0)
        assert mu[0] == mu[1] == mu[2] == 2.0
        assert mu[3] == 2.0  # parent keeps its own free mean

    def test_two_parent_hand_sum(self):
        ds = _tiny_dataset(n=5, c=1, r=2, candidates=[3, 4])
        st = _structure([0, 0, 0, 1, 1], {0: (0, 1), 1: ()})
        pr = _params(st, 2, 1)
        pr.parent_means = np.array([[2.0], [4.0]])
        pr.mix_coeffs[(0, 0)] = (0.5, 0.5)
        pr.mix_coeffs[(0, 1)] = (0.5, 0.5)
        mu = condition_means(st, pr, ds, 0)
        assert mu[0] == 3.0

    def test_empty_parent_set_zero_mean(self):
        ds = _tiny_dataset()
        st = _structure([0, 0, 1], {0: (), 1: ()})
        pr = _params(st, 1, 2)
        pr.parent_means = np.full((1, 2), 9.0)
        assert not condition_means(st, pr, ds, 1).any()

    def test_inactive_candidate_is_ordinary_node(self):
        # candidate node 3 not assigned anywhere: mean follows its module
        ds = _tiny_dataset(n=4, c=1, r=1, candidates=[3])
        st = _structure([0, 0, 0, 0], {0: ()})
        pr = _params(st, 1, 1)
        pr.parent_means = np.array([[5.0]])
        assert condition_means(st, pr, ds, 0)[3] == 0.0


class TestVariablesLikelihood:
    def test_standard_normal_at_origin(self):
        ds = Dataset(np.zeros((2, 1)), np.zeros((1, 2), dtype=np.int8), [0])
        st = _structure([0, 0], {0: ()})
        pr = _params(st, 1, 1)
        val = log_likelihood_variables(ds, st, pr)
        assert val == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
        assert val == pytest.approx(-1.8379, abs=1e-4)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            ds, st, pr = random_state(n_nodes=6, n_conditions=2, n_candidates=3, rng=rng)
            fast = log_likelihood_variables(ds, st, pr)
            slow = brute_force_variables_loglik(ds, st, pr)
            assert fast == pytest.approx(slow, abs=1e-10)

    def test_shift_changes_quadratic_form_only(self):
        rng = np.random.default_rng(11)
        ds, st, pr = random_state(n_nodes=5, n_conditions=3, n_candidates=2, rng=rng)
        base = log_likelihood_variables(ds, st, pr)
        w, _ = build_regression_matrix(st, pr, ds)
        a = np.eye(ds.n_nodes) - w
        mu = mean_matrix(st, pr, ds)
        delta = 0.37
        x2 = ds.X.copy()
        x2[2, 1] += delta
        ds2 = Dataset(x2, ds.B, ds.candidates)
        shifted = log_likelihood_variables(ds2, st, pr)
        q_old = a @ (ds.X[:, 1] - mu[:, 1])
        q_new = a @ (x2[:, 1] - mu[:, 1])
        expect = base - 0.5 * (q_new @ q_new - q_old @ q_old)
        assert shifted == pytest.approx(expect, abs=1e-10)


class TestNetworkLikelihood:
    def test_symmetric_probability(self):
        # one module of 2 nodes, one parent at 0.5 and one background
        # candidate at 0.5: every entry contributes log(1/2).
        b = np.array([[1, 0], [0, 1]], dtype=np.int8)
        ds = Dataset(np.zeros((2, 1)), b, [0, 1])
        st = _structure([0, 0], {0: (0,)})
        pr = _params(st, 2, 1)
        pr.edge_probs[(0, 0)] = 0.5
        pr.background_rate = 0.5
        assert log_likelihood_network(ds, st, pr) == pytest.approx(4 * math.log(0.5), abs=1e-12)
        assert log_likelihood_network(ds, st, pr) == pytest.approx(-2.7726, abs=1e-4)

    def test_saturated_parent_term(self):
        b = np.ones((1, 4), dtype=np.int8)
        ds = Dataset(np.zeros((4, 1)), b, [3])
        st = _structure([0, 0, 0, 0], {0: (0,)})
        pr = _params(st, 1, 1)
        pr.edge_probs[(0, 0)] = 0.8
        pr.background_rate = 0.8
        assert log_likelihood_network(ds, st, pr) == pytest.approx(4 * math.log(0.8), abs=1e-12)

    def test_matches_entrywise_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            ds, st, pr = random_state(n_nodes=4, n_conditions=1, n_candidates=2, rng=rng)
            fast = log_likelihood_network(ds, st, pr)
            slow = brute_force_network_loglik(ds, st, pr)
            assert fast == pytest.approx(slow, abs=1e-12)

    def test_depends_on_counts_only(self):
        # permuting network columns within a module leaves the value bit-identical
        rng = np.random.default_rng(9)
        ds, st, pr = random_state(n_nodes=8, n_conditions=1, n_candidates=3, rng=rng)
        base = log_likelihood_network(ds, st, pr)
        b2 = ds.B.copy()
        members = st.members(0)
        if len(members) >= 2:
            perm = rng.permutation(members)
            b2[:, members] = ds.B[:, perm]
        ds2 = Dataset(ds.X, b2, ds.candidates)
        assert log_likelihood_network(ds2, st, pr) == base


class TestPrior:
    def test_rate_one_empty_parent_sets_contribute_zero(self):
        ds = _tiny_dataset(n=4, c=1, r=1)
        st = _structure([0, 0, 1, 1], {0: (), 1: ()})
        pr = _params(st, 1, 1, weight=0.0)
        cfg = PriorConfig(parent_rate=1.0)
        val = log_prior(st, pr, cfg)
        # remaining terms: K-prior, weight and parent-mean gaussians
        expect = (
            log_module_count_prior(2, cfg)
            + 2 * (-0.5 * math.log(2 * math.pi) - math.log(10.0))
            + 1 * (-0.5 * math.log(2 * math.pi) - math.log(10.0))
        )
        assert val == pytest.approx(expect, abs=1e-12)

    def test_module_count_beyond_support(self):
        cfg = PriorConfig(max_modules=3)
        assert log_module_count_prior(4, cfg) == float("-inf")
        assert log_module_count_prior(0, cfg) == float("-inf")

    def test_flat_beta_contributes_zero(self):
        ds = _tiny_dataset(n=4, c=1, r=1, candidates=[3])
        st = _structure([0, 0, 0, 1], {0: (0,), 1: ()})
        pr = _params(st, 1, 1, weight=0.0)
        pr.edge_probs[(0, 0)] = 0.5
        cfg = PriorConfig(edge_prob_a=1.0, edge_prob_b=1.0)
        with_half = log_prior(st, pr, cfg)
        pr.edge_probs[(0, 0)] = 0.9
        with_other = log_prior(st, pr, cfg)
        assert with_half == pytest.approx(with_other, abs=1e-12)

    def test_geometric_module_count_normalised(self):
        cfg = PriorConfig(max_modules=6, module_count_prior="geometric", module_count_decay=0.3)
        total = sum(math.exp(log_module_count_prior(k, cfg)) for k in range(1, 7))
        assert total == pytest.approx(1.0, abs=1e-12)


class TestIdentifiability:
    def test_single_module_no_parents_true(self):
        ds = Dataset(np.zeros((5, 1)), np.zeros((1, 5), dtype=np.int8), [0])
        st = _structure([0] * 5, {0: ()})
        assert check_identifiability(st, ds)

    def test_module_of_active_parents_false(self):
        # module 1 = {3, 4}, both assigned as parents somewhere
        ds = Dataset(np.zeros((5, 1)), np.zeros((2, 5), dtype=np.int8), [3, 4])
        st = _structure([0, 0, 0, 1, 1], {0: (0, 1), 1: (0,)})
        assert not check_identifiability(st, ds)

    def test_total_parent_budget_boundary(self):
        # sum of parent-set sizes equal to N fails
        ds = Dataset(np.zeros((4, 1)), np.zeros((2, 4), dtype=np.int8), [0, 1])
        st = _structure([0, 0, 1, 1], {0: (0, 1), 1: (0, 1)})
        assert not check_identifiability(st, ds)

    def test_parentless_singleton_allowed(self):
        ds = Dataset(np.zeros((4, 1)), np.zeros((1, 4), dtype=np.int8), [0])
        st = _structure([0, 1, 1, 1], {0: (), 1: ()})
        assert check_identifiability(st, ds)


class TestLogPosterior:
    def test_component_sum(self):
        rng = np.random.default_rng(3)
        ds, st, pr = random_state(n_nodes=6, n_conditions=2, n_candidates=2, rng=rng)
        cfg = PriorConfig()
        total = log_posterior(ds, st, pr, cfg)
        parts = (
            log_prior(st, pr, cfg)
            + log_likelihood_variables(ds, st, pr, cfg.cond_threshold)
            + log_likelihood_network(ds, st, pr)
        )
        assert total == pytest.approx(parts, abs=1e-10)

    def test_guard_violation_is_neg_inf(self):
        ds = Dataset(np.zeros((4, 2)), np.zeros((2, 4), dtype=np.int8), [0, 1])
        st = _structure([0, 0, 1, 1], {0: (0, 1), 1: (0, 1)})
        pr = _params(st, 2, 2)
        assert log_posterior(ds, st, pr, PriorConfig()) == float("-inf")

    def test_mode_excludes_exactly_one_term(self):
        rng = np.random.default_rng(13)
        ds, st, pr = random_state(n_nodes=6, n_conditions=2, n_candidates=2, rng=rng)
        cfg = PriorConfig()
        full = log_posterior(ds, st, pr, cfg)
        no_net = log_posterior(ds, st, pr, cfg, mode="variables-only")
        no_var = log_posterior(ds, st, pr, cfg, mode="network-only")
        net = log_likelihood_network(ds, st, pr)
        var = log_likelihood_variables(ds, st, pr, cfg.cond_threshold)
        assert full == pytest.approx(no_net + net, abs=1e-10)
        assert full == pytest.approx(no_var + var, abs=1e-10)

    def test_random_guard_violations_all_rejected(self):
        rng = np.random.default_rng(17)
        ds = Dataset(
            rng.normal(size=(6, 2)),
            (rng.random((2, 6)) < 0.5).astype(np.int8),
            [0, 1],
        )
        cfg = PriorConfig()
        hits = 0
        for _ in range(200):
            assign = rng.integers(0, 2, size=6)
            if len(set(assign.tolist())) < 2:
                continue
            parents = {
                0: tuple(sorted(rng.choice(2, rng.integers(0, 3), replace=False).tolist())),
                1: tuple(sorted(rng.choice(2, rng.integers(0, 3), replace=False).tolist())),
            }
            st = ModularStructure(assign, parents, 2)
            pr = _params(st, 2, 2, weight=0.1)
            if not check_identifiability(st, ds):
                hits += 1
                assert log_posterior(ds, st, pr, cfg) == float("-inf")
        assert hits > 0
