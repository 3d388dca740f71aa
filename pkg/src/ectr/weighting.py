"""Tail weights: score adversary, environment-conditioned softmax, KL-to-uniform, Gibbs oracle."""

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import chain, combinations, product
from math import comb
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp, rel_entr, softmax

from .errors import InputError, NumericError, ShapeError
from .numerics import ForwardCache, PredictorParams, backprop, forward

SIMPLEX_TOL = 1e-9
DEGENERATE_FACTOR = 10.0

# brute-force search limits
_LATTICE_BUDGET = 2_000_000
_MAX_ORACLE_SIZE = 6
_MIN_RESOLUTION = 200


@dataclass
class EnvAssignment:
    """Hard or soft membership of each sample in E environments."""
    mode: Literal["hard", "soft"]
    mass: np.ndarray
    hard_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float)
        if self.mass.ndim != 2 or self.mass.shape[1] == 0:
            raise ShapeError(f"assignment matrix must be N x E with E >= 1, got {self.mass.shape}")
        if np.any(self.mass < 0.0) or np.any(self.mass > 1.0):
            raise InputError("assignment entries must lie in [0, 1]")
        if np.any(np.abs(self.mass.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise InputError("assignment rows must sum to 1")
        if self.mode == "hard" and not np.all((self.mass == 0.0) | (self.mass == 1.0)):
            raise InputError("hard assignments must be one-hot")

    @classmethod
    def hard(cls, ids: np.ndarray, n_envs: int) -> "EnvAssignment":
        ids = np.asarray(ids, dtype=int)
        if ids.ndim != 1:
            raise ShapeError("environment ids must be a vector")
        if np.any((ids < 0) | (ids >= n_envs)):
            raise InputError(f"environment ids must lie in [0, {n_envs})")
        mass = np.zeros((ids.size, n_envs))
        mass[np.arange(ids.size), ids] = 1.0
        return cls(mode="hard", mass=mass, hard_ids=ids)

    @classmethod
    def soft(cls, mass: np.ndarray) -> "EnvAssignment":
        return cls(mode="soft", mass=mass)

    @property
    def n_samples(self) -> int:
        return self.mass.shape[0]

    @property
    def n_envs(self) -> int:
        return self.mass.shape[1]

    def uniform_base(self) -> np.ndarray:
        """Unif_e(i) = m_ie / sum_j m_je, zero columns left at zero."""
        totals = self.mass.sum(axis=0)
        return np.divide(self.mass, totals, out=np.zeros_like(self.mass), where=totals > 0)


@dataclass(frozen=True)
class WeightState:
    """Global tail weights and their per-environment conditionals."""
    pi_global: np.ndarray
    mass: np.ndarray
    pi_cond: np.ndarray
    epsilon: float
    active: np.ndarray

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def degenerate_envs(self) -> List[int]:
        return [int(e) for e in np.flatnonzero(~self.active)]


@dataclass(frozen=True)
class KLResult:
    """Environment-wise KL-to-uniform with its gradients."""
    value: float
    per_env: np.ndarray
    grad_cond: np.ndarray
    grad_assign: np.ndarray


def global_softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1:
        raise ShapeError("scores must be a vector")
    if s.size == 0:
        raise InputError("cannot weight an empty batch")
    if not np.all(np.isfinite(s)):
        raise InputError("scores must be finite")
    return softmax(s)


def _check_simplex(pi: np.ndarray, name: str) -> None:
    if np.any(pi < 0.0) or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
        raise InputError(f"{name} must lie on the probability simplex")


def condition_on_envs(pi: np.ndarray, assign: EnvAssignment, epsilon: float = 1e-8) -> WeightState:
    """pi(i|e) = pi(i) m_ie / (mass_e + eps), then renormalized exactly per column.

    Environments whose mass falls below ``10 * epsilon`` are marked inactive.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (assign.n_samples,):
        raise ShapeError(f"weights of length {pi.size} for {assign.n_samples} assigned samples")
    _check_simplex(pi, "global weights")
    if epsilon <= 0:
        raise InputError("epsilon must be positive")

    joint = pi[:, None] * assign.mass
    mass = joint.sum(axis=0)
    raw = joint / (mass + epsilon)
    colsum = raw.sum(axis=0)
    cond = np.divide(raw, colsum, out=np.zeros_like(raw), where=colsum > 0)
    active = mass >= DEGENERATE_FACTOR * epsilon
    return WeightState(pi_global=pi, mass=mass, pi_cond=cond, epsilon=epsilon, active=active)


def env_mean_weights(weights: WeightState) -> np.ndarray:
    """1/E_active on active environments, zero elsewhere."""
    n = weights.n_active
    if n == 0:
        raise NumericError("every environment has degenerate mass", player="theta")
    return np.where(weights.active, 1.0 / n, 0.0)


def assignment_gradient(weights: WeightState, dL_dcond: np.ndarray) -> np.ndarray:
    """dL/dm through the conditionals: (pi_k / M_e)(G_ke - sum_i c_ie G_ie)."""
    G = np.asarray(dL_dcond, dtype=float)
    if G.shape != weights.pi_cond.shape:
        raise ShapeError(f"gradient shape {G.shape} != conditional shape {weights.pi_cond.shape}")
    centred = G - (weights.pi_cond * G).sum(axis=0)
    scale = np.divide(
        weights.pi_global[:, None],
        weights.mass[None, :],
        out=np.zeros_like(G),
        where=weights.active[None, :],
    )
    return scale * centred


def tail_score_gradient(weights: WeightState, assign: EnvAssignment, dL_dcond: np.ndarray) -> np.ndarray:
    """dL/ds for scores s feeding the global softmax and then the conditionals."""
    G = np.asarray(dL_dcond, dtype=float)
    if G.shape != weights.pi_cond.shape:
        raise ShapeError(f"gradient shape {G.shape} != conditional shape {weights.pi_cond.shape}")
    centred = G - (weights.pi_cond * G).sum(axis=0)
    ratio = np.divide(
        assign.mass,
        weights.mass[None, :],
        out=np.zeros_like(G),
        where=weights.active[None, :],
    )
    dL_dpi = (ratio * centred).sum(axis=1)
    pi = weights.pi_global
    return pi * (dL_dpi - pi @ dL_dpi)


def kl_env(weights: WeightState, assign: EnvAssignment, detach_assignment: bool = False) -> KLResult:
    """Mean over active environments of KL(pi(.|e) || Unif_e), with 0 log 0 = 0.

    With ``detach_assignment`` the gradient with respect to the assignment matrix
    is identically zero.
    """
    if weights.pi_cond.shape != assign.mass.shape:
        raise ShapeError("weights and assignment disagree on N x E")
    cond = weights.pi_cond
    base = assign.uniform_base()
    if np.any((cond > 0.0) & (base == 0.0)):
        raise NumericError("conditional weight outside the environment's support", player="theta")

    # rounding can leave a -1e-17 residue at uniform conditionals
    per_env = np.maximum(rel_entr(cond, base).sum(axis=0), 0.0)
    per_env = np.where(weights.active, per_env, 0.0)
    slopes = env_mean_weights(weights)
    value = float(per_env @ slopes)

    # log(c/u) = log(pi_k S_e / M_e), finite even where m_ke = 0
    totals = assign.mass.sum(axis=0)
    ratio = np.divide(
        weights.pi_global[:, None] * totals[None, :],
        weights.mass[None, :],
        out=np.zeros_like(cond),
        where=weights.active[None, :],
    )
    log_ratio = np.log(ratio, out=np.zeros_like(ratio), where=ratio > 0)
    grad_cond = slopes[None, :] * (log_ratio + 1.0)

    if detach_assignment:
        grad_assign = np.zeros_like(cond)
    else:
        via_cond = assignment_gradient(weights, grad_cond)
        inv_totals = np.divide(1.0, totals, out=np.zeros_like(totals), where=totals > 0)
        pi_over_mass = np.divide(
            weights.pi_global[:, None],
            weights.mass[None, :],
            out=np.zeros_like(cond),
            where=weights.active[None, :],
        )
        via_base = slopes[None, :] * (inv_totals[None, :] - pi_over_mass)
        grad_assign = via_cond + via_base

    return KLResult(value=value, per_env=per_env, grad_cond=grad_cond, grad_assign=grad_assign)


def gibbs_tail_distribution(losses: np.ndarray, base: np.ndarray, beta: float) -> np.ndarray:
    """Closed-form maximizer of sum pi l - beta KL(pi || base): pi* ∝ base exp(l / beta)."""
    if beta <= 0:
        raise InputError("beta must be positive")
    losses = np.asarray(losses, dtype=float)
    base = np.asarray(base, dtype=float)
    if losses.shape != base.shape or losses.ndim != 1:
        raise ShapeError("losses and base must be vectors of equal length")
    _check_simplex(base, "base distribution")
    log_base = np.log(base, out=np.full_like(base, -np.inf), where=base > 0)
    return softmax(log_base + losses / beta)


def gibbs_objective_value(losses: np.ndarray, base: np.ndarray, beta: float) -> float:
    """beta log sum base exp(l / beta), the optimal objective value."""
    base = np.asarray(base, dtype=float)
    return float(beta * logsumexp(np.asarray(losses, dtype=float) / beta, b=base))


def _dro_objective(points: np.ndarray, losses: np.ndarray, base: np.ndarray, beta: float) -> np.ndarray:
    return points @ losses - beta * rel_entr(points, base).sum(axis=1)


@lru_cache(maxsize=16)
def _simplex_lattice(n: int, resolution: int) -> np.ndarray:
    """All points of the simplex with coordinates k / resolution (stars and bars)."""
    slots = resolution + n - 1
    bars = np.fromiter(
        chain.from_iterable(combinations(range(slots), n - 1)), dtype=np.int64
    ).reshape(-1, n - 1)
    padded = np.hstack(
        [np.full((bars.shape[0], 1), -1), bars, np.full((bars.shape[0], 1), slots)]
    )
    points = (np.diff(padded, axis=1) - 1) / resolution
    points.setflags(write=False)
    return points


def _lattice_size(n: int, resolution: int) -> int:
    return comb(resolution + n - 1, n - 1)


def brute_force_kl_dro(
    losses: np.ndarray,
    base: np.ndarray,
    beta: float,
    grid_resolution: int = _MIN_RESOLUTION,
) -> Tuple[np.ndarray, float]:
    """Search maximizer of sum pi l - beta KL(pi || base) over the simplex.

    A lattice scan locates the basin, then a shrinking local grid refines it.
    Intended for N <= 6.
    """
    losses = np.asarray(losses, dtype=float)
    base = np.asarray(base, dtype=float)
    n = losses.size
    if n > _MAX_ORACLE_SIZE:
        raise InputError(f"brute force search supports at most {_MAX_ORACLE_SIZE} samples, got {n}")
    if n == 0 or base.shape != losses.shape:
        raise ShapeError("losses and base must be non-empty vectors of equal length")
    if grid_resolution < _MIN_RESOLUTION:
        raise InputError(f"grid resolution must be at least {_MIN_RESOLUTION}")
    if beta <= 0:
        raise InputError("beta must be positive")
    _check_simplex(base, "base distribution")

    if n == 1:
        return np.ones(1), float(losses[0])

    resolution = grid_resolution
    while _lattice_size(n, resolution) > _LATTICE_BUDGET:
        resolution = int(resolution * 0.8)
    points = _simplex_lattice(n, resolution)
    values = _dro_objective(points, losses, base, beta)
    best = points[int(np.argmax(values))].copy()
    best_value = float(values.max())

    dim = n - 1
    k = 4 if dim <= 3 else 2
    offsets = np.array(list(product(range(-k, k + 1), repeat=dim)), dtype=float) / k
    width = 2.0 / resolution
    while width > 1e-12:
        head = best[:-1] + offsets * width
        full = np.hstack([head, (1.0 - head.sum(axis=1))[:, None]])
        full = full[np.all(full >= 0.0, axis=1)]
        vals = _dro_objective(full, losses, base, beta)
        i = int(np.argmax(vals))
        if vals[i] >= best_value:
            best, best_value = full[i], float(vals[i])
        width *= 0.7
    return best, best_value


@dataclass
class TailAdversary:
    """Scores s_i for the global tail distribution.

    ``score_network`` maps features (optionally with the detached per-sample
    loss appended) to one score; ``free_scores`` keeps one score per training
    sample, indexed by the batch's global sample index.
    """
    mode: Literal["score_network", "free_scores"] = "score_network"
    inputs: Literal["features", "features_plus_detached_loss"] = "features"
    network: Optional[PredictorParams] = None
    free_scores: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.mode == "score_network":
            if self.network is None or self.network.out_dim != 1:
                raise ShapeError("score network must emit one score per sample")
        elif self.free_scores is None or np.ndim(self.free_scores) != 1:
            raise ShapeError("free scores must be a vector over the training pool")

    def scores(
        self, x: np.ndarray, losses: np.ndarray, index: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, Union[ForwardCache, np.ndarray]]:
        if self.mode == "score_network":
            inp = np.asarray(x, dtype=float)
            if self.inputs == "features_plus_detached_loss":
                inp = np.hstack([inp, np.array(losses, dtype=float).reshape(-1, 1)])
            out, cache = forward(self.network, inp)
            s = out[:, 0]
        else:
            idx = np.arange(self.free_scores.size) if index is None else np.asarray(index, dtype=int)
            if idx.size != np.shape(x)[0]:
                raise ShapeError("free scores need a global index for every batch sample")
            s, cache = self.free_scores[idx], idx
        if not np.all(np.isfinite(s)):
            raise NumericError("non-finite tail score", player="theta")
        return s, cache

    def gradients(self, cache: Union[ForwardCache, np.ndarray], ds: np.ndarray) -> List[np.ndarray]:
        if self.mode == "score_network":
            return backprop(cache, np.asarray(ds, dtype=float)[:, None])
        grad = np.zeros_like(self.free_scores)
        np.add.at(grad, cache, ds)
        return [grad]

    def tensors(self) -> List[np.ndarray]:
        if self.mode == "score_network":
            return self.network.tensors()
        return [self.free_scores]

    def replace_tensors(self, tensors: List[np.ndarray]) -> "TailAdversary":
        if self.mode == "score_network":
            return TailAdversary(mode=self.mode, inputs=self.inputs, network=self.network.replace_tensors(tensors))
        return TailAdversary(mode=self.mode, inputs=self.inputs, free_scores=np.array(tensors[0], dtype=float))
