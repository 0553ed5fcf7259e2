"""Domain types and the joint log-posterior.

Nodes carry an N x C matrix of variables and an R x N binary matrix of
directed edges from R candidate parents. A hard assignment groups nodes
into modules; each module owns a parent set, a shared regression weight,
and per-parent (low, high) mixture coefficients gated by a split point on
the parent's mean. The variables likelihood is multivariate normal with
precision (I - W)^T (I - W); the network likelihood is Bernoulli per
(parent, node) pair with per-(module, parent) edge probabilities against
a global background rate.

All indices are 0-based: modules are 0..K-1, candidates 0..R-1, nodes
0..N-1. The functions here are pure; the samplers keep incremental caches
that are cross-checked against these in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SingularModelError, StructureMismatchError

LOG_2PI = math.log(2.0 * math.pi)

NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Observed node variables plus directed network data.

    X: (n_nodes, n_conditions) float matrix of node variables.
    B: (n_candidates, n_nodes) 0/1 matrix, B[r, n] = 1 when candidate r has
       a directed edge to node n.
    candidates: node index of each candidate row of B; distinct.
    node_ids / candidate_ids: optional external identifiers kept for I/O.
    """

    X: np.ndarray
    B: np.ndarray
    candidates: np.ndarray
    node_ids: list[str] | None = None
    candidate_ids: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.B = np.asarray(self.B, dtype=np.int8)
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-d matrix")
        n, c = self.X.shape
        if n < 2 or c < 1:
            raise ValueError(f"need at least 2 nodes and 1 condition, got {n}x{c}")
        if self.B.ndim != 2 or self.B.shape[1] != n:
            raise ValueError("B must be (n_candidates, n_nodes)")
        r = self.B.shape[0]
        if not 1 <= r <= n:
            raise ValueError(f"need 1 <= n_candidates <= n_nodes, got {r}")
        vals = np.unique(self.B)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("B entries must be 0 or 1")
        if self.candidates.shape != (r,):
            raise ValueError("candidates must list one node per row of B")
        if len(set(self.candidates.tolist())) != r:
            raise ValueError("candidate node indices must be distinct")
        if self.candidates.min() < 0 or self.candidates.max() >= n:
            raise ValueError("candidate node index out of range")

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def n_conditions(self) -> int:
        return self.X.shape[1]

    @property
    def n_candidates(self) -> int:
        return self.B.shape[0]


@dataclass
class ModularStructure:
    """Hard node-to-module assignment plus per-module parent sets.

    assignment: (n_nodes,) module label per node, labels contiguous in
        [0, n_modules).
    parents: module label -> sorted tuple of candidate indices.
    """

    assignment: np.ndarray
    parents: dict[int, tuple[int, ...]]
    n_modules: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.parents = {int(k): tuple(sorted(int(r) for r in v)) for k, v in self.parents.items()}
        k = self.n_modules
        if k < 1:
            raise ValueError("need at least one module")
        if set(self.parents.keys()) != set(range(k)):
            raise ValueError("parents must be keyed by every module label")
        counts = np.bincount(self.assignment, minlength=k)
        if self.assignment.min(initial=0) < 0 or self.assignment.max(initial=0) >= k:
            raise ValueError("assignment label out of range")
        if np.any(counts == 0):
            raise ValueError("every module must have at least one member")
        for k_, pa in self.parents.items():
            if len(set(pa)) != len(pa):
                raise ValueError(f"duplicate parent in module {k_}")

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def module_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_modules)

    def active_candidates(self) -> set[int]:
        """Candidate indices assigned as a parent of at least one module."""
        out: set[int] = set()
        for pa in self.parents.values():
            out.update(pa)
        return out

    def total_parents(self) -> int:
        return sum(len(pa) for pa in self.parents.values())

    def pair_keys(self) -> list[tuple[int, int]]:
        return [(k, r) for k in range(self.n_modules) for r in self.parents[k]]

    def copy(self) -> "ModularStructure":
        return ModularStructure(self.assignment.copy(), dict(self.parents), self.n_modules)


@dataclass
class ModelParameters:
    """Continuous parameters companion to a ModularStructure.

    weights: module -> shared regression weight for every parent->member
        pair of that module.
    parent_means: (n_candidates, n_conditions) free means of candidates.
    mix_coeffs: (module, candidate) -> (low, high) mixture coefficients.
    split_points: (module, candidate) -> split point on the parent mean.
    edge_probs: (module, candidate) -> edge probability in (0, 1).
    background_rate: edge probability for unassigned candidates (fixed
        hyperparameter, not sampled).
    """

    weights: dict[int, float]
    parent_means: np.ndarray
    mix_coeffs: dict[tuple[int, int], tuple[float, float]]
    split_points: dict[tuple[int, int], float]
    edge_probs: dict[tuple[int, int], float]
    background_rate: float = 0.05

    def __post_init__(self):
        self.parent_means = np.asarray(self.parent_means, dtype=float)
        if not 0.0 < self.background_rate < 1.0:
            raise ValueError("background_rate must be inside (0, 1)")

    def validate_against(self, structure: ModularStructure) -> None:
        """Raise StructureMismatchError unless keyed exactly by the structure."""
        keys = set(structure.pair_keys())
        if set(self.weights.keys()) != set(range(structure.n_modules)):
            raise StructureMismatchError("weights must be keyed by every module")
        for name, d in (
            ("mix_coeffs", self.mix_coeffs),
            ("split_points", self.split_points),
            ("edge_probs", self.edge_probs),
        ):
            if set(d.keys()) != keys:
                raise StructureMismatchError(f"{name} keys do not match (module, parent) pairs")

    def edge_probs_valid(self) -> bool:
        return all(0.0 < p < 1.0 for p in self.edge_probs.values())

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            dict(self.weights),
            self.parent_means.copy(),
            dict(self.mix_coeffs),
            dict(self.split_points),
            dict(self.edge_probs),
            self.background_rate,
        )


@dataclass
class PriorConfig:
    """Priors and proposal scales for the samplers.

    parent_rate: rate of the exponential prior on per-module parent-set
        size (density evaluated at the integer count).
    module_count_prior: "uniform" on [1, max_modules] or truncated
        "geometric" with parameter module_count_decay.
    step_*: random-walk proposal standard deviations.
    scale_*: standard deviations of the zero-mean Gaussian priors on the
        continuous parameters.
    cond_threshold: maximum admissible 1-norm condition number of I - W.
    """

    parent_rate: float = 1.0
    max_modules: int = 50
    module_count_prior: str = "uniform"
    module_count_decay: float = 0.5
    step_weight: float = 0.1
    step_parent_mean: float = 0.5
    step_mix: float = 0.2
    step_split: float = 0.5
    step_edge_prob: float = 0.05
    edge_prob_a: float = 1.0
    edge_prob_b: float = 1.0
    cond_threshold: float = 1e8
    scale_weight: float = 10.0
    scale_parent_mean: float = 10.0
    scale_mix: float = 10.0
    scale_split: float = 10.0

    def __post_init__(self):
        positive = (
            self.parent_rate,
            self.module_count_decay,
            self.step_weight,
            self.step_parent_mean,
            self.step_mix,
            self.step_split,
            self.step_edge_prob,
            self.edge_prob_a,
            self.edge_prob_b,
            self.scale_weight,
            self.scale_parent_mean,
            self.scale_mix,
            self.scale_split,
        )
        if any(v <= 0 for v in positive):
            raise ValueError("rates, scales and proposal steps must be positive")
        if self.max_modules < 1:
            raise ValueError("max_modules must be >= 1")
        if self.cond_threshold <= 1:
            raise ValueError("cond_threshold must exceed 1")
        if self.module_count_prior not in ("uniform", "geometric"):
            raise ValueError("module_count_prior must be 'uniform' or 'geometric'")
        if not self.module_count_decay < 1.0:
            raise ValueError("module_count_decay must be inside (0, 1)")


# ---------------------------------------------------------------------------
# Regression matrix and precision
# ---------------------------------------------------------------------------


def build_regression_matrix(
    structure: ModularStructure, params: ModelParameters, dataset: Dataset
) -> tuple[np.ndarray, np.ndarray]:
    """Dense N x N regression matrix and its boolean sparsity pattern.

    W[n, j] = weights[k] exactly when node n is in module k and j is the
    node of some candidate in module k's parent set.
    """
    params.validate_against(structure)
    n = dataset.n_nodes
    w = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    for k in range(structure.n_modules):
        pa = structure.parents[k]
        if not pa:
            continue
        rows = structure.members(k)
        cols = dataset.candidates[list(pa)]
        w[np.ix_(rows, cols)] = params.weights[k]
        mask[np.ix_(rows, cols)] = True
    return w, mask


def precision_from_W(w: np.ndarray, cond_threshold: float = 1e8) -> tuple[np.ndarray, float]:
    """Precision (I-W)^T (I-W) and log|Sigma| = -2 log|det(I-W)|.

    Raises SingularModelError when I - W is singular or its 1-norm
    condition number reaches cond_threshold.
    """
    a = np.eye(w.shape[0]) - w
    try:
        cond = np.linalg.cond(a, 1)
    except np.linalg.LinAlgError as exc:
        raise SingularModelError("I - W is singular") from exc
    if not np.isfinite(cond) or cond >= cond_threshold:
        raise SingularModelError(f"condition number {cond:.3g} exceeds threshold")
    sign, logabsdet = np.linalg.slogdet(a)
    if sign == 0:
        raise SingularModelError("I - W is singular")
    return a.T @ a, -2.0 * logabsdet


# ---------------------------------------------------------------------------
# Means
# ---------------------------------------------------------------------------


def context_coefficient(mix_low: float, mix_high: float, split: float, parent_mean: float) -> float:
    """Mixture coefficient selected by the parent's mean against the split.

    Ties (parent_mean == split) take the high branch.
    """
    return mix_low if parent_mean < split else mix_high


def mean_matrix(
    structure: ModularStructure, params: ModelParameters, dataset: Dataset
) -> np.ndarray:
    """(N, C) matrix of per-condition means.

    Members of a module mix their parents' free means through the
    low/high coefficients; candidates currently assigned as a parent
    anywhere keep their own free mean row; members of parentless modules
    sit at zero.
    """
    n, c = dataset.X.shape
    mu = np.zeros((n, c))
    for k in range(structure.n_modules):
        pa = structure.parents[k]
        if not pa:
            continue
        mk = np.zeros(c)
        for r in pa:
            low, high = params.mix_coeffs[(k, r)]
            z = params.split_points[(k, r)]
            coeff = np.where(params.parent_means[r] < z, low, high)
            mk += coeff * params.parent_means[r]
        mu[structure.members(k)] = mk
    for r in sorted(structure.active_candidates()):
        mu[dataset.candidates[r]] = params.parent_means[r]
    return mu


def condition_means(
    structure: ModularStructure, params: ModelParameters, dataset: Dataset, c: int
) -> np.ndarray:
    """Mean vector for one condition; see mean_matrix."""
    return mean_matrix(structure, params, dataset)[:, c]


# ---------------------------------------------------------------------------
# Likelihoods, prior, posterior
# ---------------------------------------------------------------------------


def log_likelihood_variables(
    dataset: Dataset,
    structure: ModularStructure,
    params: ModelParameters,
    cond_threshold: float = 1e8,
) -> float:
    """Gaussian log-likelihood of X under the structured precision.

    Never forms Sigma; evaluates residuals through I - W and reuses the
    log-determinant across conditions. Propagates SingularModelError.
    """
    w, _ = build_regression_matrix(structure, params, dataset)
    _, log_det_sigma = precision_from_W(w, cond_threshold)
    a = np.eye(dataset.n_nodes) - w
    resid = dataset.X - mean_matrix(structure, params, dataset)
    e = a @ resid
    quad = float(np.sum(e * e))
    n, c = dataset.X.shape
    return -0.5 * n * c * LOG_2PI - 0.5 * c * log_det_sigma - 0.5 * quad


def network_sufficient_statistics(dataset: Dataset, structure: ModularStructure) -> np.ndarray:
    """(R, K) counts of edges from each candidate into each module."""
    k = structure.n_modules
    onehot = np.zeros((dataset.n_nodes, k))
    onehot[np.arange(dataset.n_nodes), structure.assignment] = 1.0
    return dataset.B.astype(float) @ onehot


def log_likelihood_network(
    dataset: Dataset, structure: ModularStructure, params: ModelParameters
) -> float:
    """Bernoulli log-likelihood of B through the per-module edge counts."""
    s = network_sufficient_statistics(dataset, structure)
    sizes = structure.module_sizes().astype(float)
    p0 = params.background_rate
    total = float(np.sum(s * math.log(p0)) + np.sum((sizes[None, :] - s) * math.log1p(-p0)))
    for (k, r), p in params.edge_probs.items():
        srk = s[r, k]
        mk = sizes[k]
        total += srk * (math.log(p) - math.log(p0))
        total += (mk - srk) * (math.log1p(-p) - math.log1p(-p0))
    return total


def _normal_logpdf(x: float, scale: float) -> float:
    return -0.5 * LOG_2PI - math.log(scale) - 0.5 * (x / scale) ** 2


def _beta_logpdf(x: float, a: float, b: float) -> float:
    return (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + (a - 1.0) * math.log(x)
        + (b - 1.0) * math.log1p(-x)
    )


def log_module_count_prior(k: int, prior: PriorConfig) -> float:
    """Log-mass of the module-count prior; -inf outside support."""
    if k < 1 or k > prior.max_modules:
        return NEG_INF
    if prior.module_count_prior == "uniform":
        return -math.log(prior.max_modules)
    q = prior.module_count_decay
    norm = (1.0 - (1.0 - q) ** prior.max_modules)
    return (k - 1) * math.log1p(-q) + math.log(q) - math.log(norm)


def log_prior(structure: ModularStructure, params: ModelParameters, prior: PriorConfig) -> float:
    """Joint log-prior over structure and continuous parameters.

    Exponential density on each parent-set size, the module-count prior,
    Beta on edge probabilities, and zero-mean Gaussians on weights,
    mixture coefficients, split points, and parent means.
    """
    total = log_module_count_prior(structure.n_modules, prior)
    if total == NEG_INF:
        return NEG_INF
    lam = prior.parent_rate
    for k in range(structure.n_modules):
        total += math.log(lam) - lam * len(structure.parents[k])
        total += _normal_logpdf(params.weights[k], prior.scale_weight)
    for key in structure.pair_keys():
        p = params.edge_probs[key]
        if not 0.0 < p < 1.0:
            return NEG_INF
        total += _beta_logpdf(p, prior.edge_prob_a, prior.edge_prob_b)
        low, high = params.mix_coeffs[key]
        total += _normal_logpdf(low, prior.scale_mix) + _normal_logpdf(high, prior.scale_mix)
        total += _normal_logpdf(params.split_points[key], prior.scale_split)
    total += float(
        np.sum(
            -0.5 * LOG_2PI
            - math.log(prior.scale_parent_mean)
            - 0.5 * (params.parent_means / prior.scale_parent_mean) ** 2
        )
    )
    return total


def check_identifiability(
    structure: ModularStructure,
    dataset: Dataset,
    w: np.ndarray | None = None,
    cond_threshold: float = 1e8,
) -> bool:
    """Structural conditions under which the model is identifiable.

    (a) every module with a non-empty parent set keeps at least two
        members that are not assigned as a parent of any module,
    (b) the total number of assigned parents is below the node count,
    (c) when W is supplied, I - W stays invertible within cond_threshold.

    Parentless modules are exempt from (a): they contribute no regression
    or mixture parameters, so there is nothing for those two anchor nodes
    to pin down, and exempting them keeps single-node module births
    reachable for the trans-dimensional sampler.
    """
    if structure.total_parents() >= dataset.n_nodes:
        return False
    active_nodes = {int(dataset.candidates[r]) for r in structure.active_candidates()}
    for k in range(structure.n_modules):
        if not structure.parents[k]:
            continue
        free = sum(1 for n in structure.members(k).tolist() if n not in active_nodes)
        if free < 2:
            return False
    if w is not None:
        try:
            precision_from_W(w, cond_threshold)
        except SingularModelError:
            return False
    return True


def log_posterior(
    dataset: Dataset,
    structure: ModularStructure,
    params: ModelParameters,
    prior: PriorConfig,
    mode: str = "integrated",
) -> float:
    """log P(structure, params | data) up to the normalising constant.

    Guard failures (key mismatch, identifiability, singular I - W, edge
    probabilities outside (0, 1)) map to -inf rather than raising. The
    mode drops the variables or network term for the sub-models.
    """
    if mode not in ("integrated", "variables-only", "network-only"):
        raise ValueError(f"unknown mode {mode!r}")
    try:
        params.validate_against(structure)
    except StructureMismatchError:
        return NEG_INF
    if not params.edge_probs_valid():
        return NEG_INF
    w, _ = build_regression_matrix(structure, params, dataset)
    if not check_identifiability(structure, dataset, w, prior.cond_threshold):
        return NEG_INF
    total = log_prior(structure, params, prior)
    if total == NEG_INF:
        return NEG_INF
    try:
        if mode != "network-only":
            total += log_likelihood_variables(dataset, structure, params, prior.cond_threshold)
    except SingularModelError:
        return NEG_INF
    if mode != "variables-only":
        total += log_likelihood_network(dataset, structure, params)
    return total
