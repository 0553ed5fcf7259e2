"""Shared builders and independent oracles for the test suite.

The oracles are deliberately naive: explicit Sigma inversion for the
variables likelihood and a per-entry Bernoulli loop for the network
likelihood, so they stay independent of the code paths they check.
"""

from __future__ import annotations

import math

import numpy as np

from modnet.model import (
    Dataset,
    ModelParameters,
    ModularStructure,
    PriorConfig,
    build_regression_matrix,
    check_identifiability,
    mean_matrix,
)


def random_structure(n_nodes, n_candidates, rng, n_modules=None, max_parents=2):
    """Random valid structure over a dataset with the given dimensions."""
    cand_nodes = np.arange(n_candidates)
    for _ in range(500):
        k = n_modules or int(rng.integers(1, max(2, n_nodes // 2)))
        assign = np.concatenate([np.arange(k), rng.integers(0, k, n_nodes - k)])
        rng.shuffle(assign)
        parents = {}
        for m in range(k):
            size = int(rng.integers(0, max_parents + 1))
            parents[m] = tuple(sorted(rng.choice(n_candidates, size=size, replace=False).tolist()))
        st = ModularStructure(assign, parents, k)
        ds = Dataset(
            np.zeros((n_nodes, 2)),
            np.zeros((n_candidates, n_nodes), dtype=np.int8),
            cand_nodes,
        )
        if check_identifiability(st, ds):
            return st
    raise RuntimeError("could not draw a valid structure")


def random_params(structure, n_candidates, n_conditions, rng, weight_scale=0.3):
    weights = {k: float(rng.uniform(-weight_scale, weight_scale)) for k in range(structure.n_modules)}
    mix = {}
    split = {}
    edge = {}
    for key in structure.pair_keys():
        mix[key] = (float(rng.normal()), float(rng.normal()))
        split[key] = float(rng.normal())
        edge[key] = float(rng.uniform(0.1, 0.9))
    means = rng.normal(size=(n_candidates, n_conditions))
    return ModelParameters(weights, means, mix, split, edge, background_rate=0.05)


def random_dataset(n_nodes, n_conditions, n_candidates, rng, candidates=None):
    x = rng.normal(size=(n_nodes, n_conditions))
    b = (rng.random((n_candidates, n_nodes)) < 0.3).astype(np.int8)
    if candidates is None:
        candidates = rng.choice(n_nodes, size=n_candidates, replace=False)
    return Dataset(x, b, candidates)


def random_state(n_nodes, n_conditions, n_candidates, rng, **kw):
    """(dataset, structure, params) triple that passes the guards."""
    ds = random_dataset(n_nodes, n_conditions, n_candidates, rng)
    for _ in range(200):
        st = random_structure(n_nodes, n_candidates, rng, **kw)
        pr = random_params(st, n_candidates, n_conditions, rng)
        w, _ = build_regression_matrix(st, pr, ds)
        if check_identifiability(st, ds, w):
            return ds, st, pr
    raise RuntimeError("could not draw a valid state")


def brute_force_variables_loglik(dataset, structure, params):
    """MVN log-density with Sigma formed and inverted explicitly."""
    w, _ = build_regression_matrix(structure, params, dataset)
    a = np.eye(dataset.n_nodes) - w
    a_inv = np.linalg.inv(a)
    sigma = a_inv @ a_inv.T
    sigma_inv = np.linalg.inv(sigma)
    sign, logdet = np.linalg.slogdet(sigma)
    assert sign > 0
    mu = mean_matrix(structure, params, dataset)
    n = dataset.n_nodes
    total = 0.0
    for c in range(dataset.n_conditions):
        d = dataset.X[:, c] - mu[:, c]
        total += -0.5 * n * math.log(2 * math.pi) - 0.5 * logdet - 0.5 * d @ sigma_inv @ d
    return total


def brute_force_network_loglik(dataset, structure, params):
    """Per-entry Bernoulli sum over all (candidate, node) pairs."""
    total = 0.0
    for r in range(dataset.n_candidates):
        for n in range(dataset.n_nodes):
            k = int(structure.assignment[n])
            p = params.edge_probs.get((k, r), params.background_rate)
            total += math.log(p) if dataset.B[r, n] else math.log1p(-p)
    return total
