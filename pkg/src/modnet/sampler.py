"""Within-model Metropolis-Hastings sweeps and chain initialisation.

One sweep runs the trans-dimensional assignment and structure moves (see
`rjmcmc`), then random-walk updates for each module's weight, split
points and edge probabilities, then per-condition parent-mean updates,
then per-(module, parent) mixture-coefficient updates. All proposals are
symmetric random walks, so acceptance only needs the posterior ratio.

Per-module and per-condition update blocks may run concurrently (opt-in):
each task works on a snapshot, acceptances are merged in deterministic
order, and the shared caches are rebuilt once at a barrier between the
phases. Sequential execution is the default.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .evaluator import PosteriorEvaluator
from .model import (
    NEG_INF,
    Dataset,
    ModelParameters,
    ModularStructure,
    PriorConfig,
)

__all__ = [
    "ChainState",
    "MoveStats",
    "mh_accept",
    "accept_log_ratio",
    "update_module_weight",
    "update_split_point",
    "update_edge_probability",
    "update_parent_means",
    "update_mix_coeffs",
    "gibbs_sweep",
    "run_chain",
    "init_assignments_kmeans",
    "initial_parameters",
]


@dataclass
class ChainState:
    """One posterior sample with its cached log-posterior.

    rng_path records (seed, sweep index) so the position in the random
    stream can be reproduced by re-running from the same seed.
    """

    structure: ModularStructure
    params: ModelParameters
    log_post: float
    iteration: int = 0
    rng_path: tuple[int, int] = (0, 0)


@dataclass
class MoveStats:
    """Proposal and acceptance counts per move type."""

    counts: dict[str, list[int]] = field(default_factory=dict)

    def record(self, move: str, accepted: bool) -> None:
        c = self.counts.setdefault(move, [0, 0])
        c[0] += 1
        if accepted:
            c[1] += 1

    def proposals(self, move: str) -> int:
        return self.counts.get(move, [0, 0])[0]

    def accepts(self, move: str) -> int:
        return self.counts.get(move, [0, 0])[1]

    def acceptance_rate(self, move: str) -> float:
        n, a = self.counts.get(move, [0, 0])
        return a / n if n else float("nan")

    def merge(self, other: "MoveStats") -> None:
        for move, (n, a) in other.counts.items():
            c = self.counts.setdefault(move, [0, 0])
            c[0] += n
            c[1] += a


def accept_log_ratio(log_ratio: float, rng) -> bool:
    """Accept with probability min(1, exp(log_ratio))."""
    if log_ratio == NEG_INF or math.isnan(log_ratio):
        return False
    if log_ratio >= 0.0:
        return True
    return math.log(rng.random()) < log_ratio


def mh_accept(log_post_new: float, log_post_old: float, rng) -> bool:
    """Metropolis acceptance for a symmetric proposal."""
    return accept_log_ratio(log_post_new - log_post_old, rng)


# ---------------------------------------------------------------------------
# Scalar updates (operate on a PosteriorEvaluator in place)
# ---------------------------------------------------------------------------


def _resolve(ev: PosteriorEvaluator, lp_new: float, rng, stats: MoveStats | None, move: str) -> bool:
    ok = mh_accept(lp_new, ev.log_post, rng)
    if ok:
        ev.commit()
    else:
        ev.discard()
    if stats is not None:
        stats.record(move, ok)
    return ok


def update_module_weight(ev, k, rng, stats=None) -> bool:
    w_new = ev.params.weights[k] + ev.prior.step_weight * rng.standard_normal()
    return _resolve(ev, ev.propose_weight(k, w_new), rng, stats, "weight")


def update_split_point(ev, k, r, rng, stats=None) -> bool:
    z_new = ev.params.split_points[(k, r)] + ev.prior.step_split * rng.standard_normal()
    return _resolve(ev, ev.propose_split_point(k, r, z_new), rng, stats, "split_point")


def update_edge_probability(ev, k, r, rng, stats=None) -> bool:
    p_new = ev.params.edge_probs[(k, r)] + ev.prior.step_edge_prob * rng.standard_normal()
    return _resolve(ev, ev.propose_edge_prob(k, r, p_new), rng, stats, "edge_prob")


def update_parent_means(ev, cond, rng, stats=None) -> bool:
    col = ev.params.parent_means[:, cond] + ev.prior.step_parent_mean * rng.standard_normal(
        ev.dataset.n_candidates
    )
    return _resolve(ev, ev.propose_parent_means(cond, col), rng, stats, "parent_means")


def update_mix_coeffs(ev, k, r, rng, stats=None) -> bool:
    low, high = ev.params.mix_coeffs[(k, r)]
    step = ev.prior.step_mix
    pair = (low + step * rng.standard_normal(), high + step * rng.standard_normal())
    return _resolve(ev, ev.propose_mix(k, r, *pair), rng, stats, "mix")


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _module_block(ev, k, rng, stats) -> None:
    update_module_weight(ev, k, rng, stats)
    for r in ev.structure.parents[k]:
        update_split_point(ev, k, r, rng, stats)
        update_edge_probability(ev, k, r, rng, stats)


def _sweep_inplace(ev, moves, rng, stats, *, seed=0, sweep_index=0, max_workers=1) -> None:
    from . import rjmcmc  # local import to avoid a cycle

    rjmcmc.sample_assignment_move(ev, moves, rng, stats)
    rjmcmc.sample_structure_move(ev, moves, rng, stats)

    k_total = ev.structure.n_modules
    if max_workers > 1 and k_total > 1:
        _parallel_module_phase(ev, rng=None, stats=stats, seed=seed, sweep_index=sweep_index,
                               max_workers=max_workers)
    else:
        for k in range(k_total):
            _module_block(ev, k, rng, stats)

    n_cond = ev.dataset.n_conditions
    if max_workers > 1 and n_cond > 1:
        _parallel_condition_phase(ev, stats=stats, seed=seed, sweep_index=sweep_index,
                                  max_workers=max_workers)
    else:
        for c in range(n_cond):
            update_parent_means(ev, c, rng, stats)

    for k in range(ev.structure.n_modules):
        for r in ev.structure.parents[k]:
            update_mix_coeffs(ev, k, r, rng, stats)


def _parallel_module_phase(ev, rng, stats, *, seed, sweep_index, max_workers) -> None:
    """Per-module blocks on snapshots; merge + single cache rebuild at the barrier."""
    k_total = ev.structure.n_modules

    def task(k):
        local = ev.copy()
        local_rng = np.random.default_rng([seed, sweep_index, 1, k])
        local_stats = MoveStats()
        _module_block(local, k, local_rng, local_stats)
        out = {
            "weight": local.params.weights[k],
            "split": {r: local.params.split_points[(k, r)] for r in local.structure.parents[k]},
            "edge": {r: local.params.edge_probs[(k, r)] for r in local.structure.parents[k]},
        }
        return k, out, local_stats

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(task, range(k_total)))
    for k, out, local_stats in sorted(results, key=lambda t: t[0]):
        ev.params.weights[k] = out["weight"]
        for r, v in out["split"].items():
            ev.params.split_points[(k, r)] = v
        for r, v in out["edge"].items():
            ev.params.edge_probs[(k, r)] = v
        if stats is not None:
            stats.merge(local_stats)
    ev.rebuild()


def _parallel_condition_phase(ev, stats, *, seed, sweep_index, max_workers) -> None:
    """Per-condition parent-mean updates; disjoint columns merge exactly."""
    n_cond = ev.dataset.n_conditions

    def task(c):
        local = ev.copy()
        local_rng = np.random.default_rng([seed, sweep_index, 2, c])
        local_stats = MoveStats()
        update_parent_means(local, c, local_rng, local_stats)
        return c, local.params.parent_means[:, c].copy(), local_stats

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(task, range(n_cond)))
    for c, col, local_stats in sorted(results, key=lambda t: t[0]):
        ev.params.parent_means[:, c] = col
        if stats is not None:
            stats.merge(local_stats)
    ev.rebuild()


def gibbs_sweep(
    state: ChainState,
    dataset: Dataset,
    prior: PriorConfig,
    moves,
    rng,
    mode: str = "integrated",
    stats: MoveStats | None = None,
    max_workers: int = 1,
) -> ChainState:
    """One full update sweep; returns the next ChainState."""
    ev = PosteriorEvaluator(dataset, prior, state.structure, state.params, mode)
    seed, _ = state.rng_path
    _sweep_inplace(ev, moves, rng, stats, seed=seed, sweep_index=state.iteration,
                   max_workers=max_workers)
    return ChainState(
        structure=ev.structure.copy(),
        params=ev.params.copy(),
        log_post=ev.log_post,
        iteration=state.iteration + 1,
        rng_path=(seed, state.iteration + 1),
    )


def run_chain(
    dataset: Dataset,
    prior: PriorConfig,
    moves,
    init_state: ChainState,
    iterations: int,
    seed: int,
    mode: str = "integrated",
    thinning: int = 1,
    max_workers: int = 1,
    sample_callback=None,
    stats: MoveStats | None = None,
) -> ChainState:
    """Run `iterations` sweeps, invoking sample_callback on retained states.

    Retains the state after sweep i whenever i is a multiple of thinning
    (1-based), giving iterations // thinning retained samples.
    """
    if thinning < 1:
        raise ConfigError("thinning must be >= 1")
    rng = np.random.default_rng(seed)
    ev = PosteriorEvaluator(dataset, prior, init_state.structure, init_state.params, mode)
    state = ChainState(
        ev.structure.copy(), ev.params.copy(), ev.log_post, init_state.iteration, (seed, 0)
    )
    for i in range(1, iterations + 1):
        _sweep_inplace(ev, moves, rng, stats, seed=seed, sweep_index=i, max_workers=max_workers)
        if i % thinning == 0:
            state = ChainState(
                ev.structure.copy(), ev.params.copy(), ev.log_post, i, (seed, i)
            )
            if sample_callback is not None:
                sample_callback(state)
    if iterations % thinning != 0 or iterations == 0:
        state = ChainState(
            ev.structure.copy(), ev.params.copy(), ev.log_post, iterations, (seed, iterations)
        )
    return state


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def init_assignments_kmeans(dataset: Dataset, k_init: int, rng) -> ModularStructure:
    """Cluster node rows of X with k-means and use clusters as modules.

    Lloyd's algorithm with k-means++ seeding, Euclidean distance, at most
    100 iterations. Empty clusters are dropped, so the returned module
    count can be below k_init. Parent sets start empty.
    """
    n = dataset.n_nodes
    if not 1 <= k_init <= n:
        raise ConfigError(f"k_init must be in [1, {n}], got {k_init}")
    x = dataset.X
    centers = _kmeans_pp_seed(x, k_init, rng)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for k in range(k_init):
            rows = assign == k
            if rows.any():
                centers[k] = x[rows].mean(axis=0)
    labels = np.unique(assign)
    remap = {int(old): new for new, old in enumerate(labels)}
    assign = np.array([remap[int(a)] for a in assign], dtype=np.int64)
    k_eff = len(labels)
    return ModularStructure(assign, {k: () for k in range(k_eff)}, k_eff)


def _kmeans_pp_seed(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def initial_parameters(
    structure: ModularStructure, dataset: Dataset, background_rate: float = 0.05
) -> ModelParameters:
    """Neutral starting parameters: zero weights, data-driven parent means."""
    weights = {k: 0.0 for k in range(structure.n_modules)}
    means = dataset.X[dataset.candidates].copy()
    mix = {key: (0.0, 0.0) for key in structure.pair_keys()}
    split = {key: 0.0 for key in structure.pair_keys()}
    edge = {key: 0.5 for key in structure.pair_keys()}
    return ModelParameters(weights, means, mix, split, edge, background_rate)
