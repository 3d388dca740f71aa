"""Latent environment inference q_eta(e|i) and its ascent on the TV penalty."""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from .errors import InputError, ShapeError
from .invariance import ProbeRecord, Variant, tv_penalty
from .logutil import logger
from .numerics import (
    ForwardCache,
    OptimizerState,
    PredictorParams,
    backprop,
    forward,
    init_predictor,
    optimizer_step,
)
from .weighting import EnvAssignment, assignment_gradient, condition_on_envs


@dataclass
class EnvInferenceNet:
    """Feed-forward map from auxiliary inputs to E environment logits."""
    network: PredictorParams
    temperature: float = 1.0

    def __post_init__(self):
        if self.network.out_dim < 2:
            raise InputError("environment inference needs at least two latent environments")
        if self.temperature <= 0:
            raise InputError("temperature must be positive")

    @property
    def n_envs(self) -> int:
        return self.network.out_dim

    def replace_tensors(self, tensors: Sequence[np.ndarray]) -> "EnvInferenceNet":
        return EnvInferenceNet(network=self.network.replace_tensors(tensors), temperature=self.temperature)


def init_inference_net(
    aux_dim: int,
    n_envs: int,
    hidden: Sequence[int],
    rng: np.random.Generator,
    scale: float = 0.5,
    temperature: float = 1.0,
) -> EnvInferenceNet:
    dims = [aux_dim, *hidden, n_envs]
    return EnvInferenceNet(network=init_predictor(dims, "tanh", rng, scale), temperature=temperature)


def soft_assignments(net: EnvInferenceNet, aux: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    aux = np.asarray(aux, dtype=float)
    if aux.ndim != 2 or aux.shape[0] == 0:
        raise InputError("environment inference needs a non-empty auxiliary matrix")
    logits, cache = forward(net.network, aux)
    return softmax(logits / net.temperature, axis=1), cache


def infer_assignments(net: EnvInferenceNet, aux: np.ndarray) -> EnvAssignment:
    mass, _ = soft_assignments(net, aux)
    return EnvAssignment.soft(mass)


def assignment_backprop(
    net: EnvInferenceNet, cache: ForwardCache, mass: np.ndarray, dL_dmass: np.ndarray
) -> List[np.ndarray]:
    """Chain dL/dm through the tempered softmax and the network."""
    if dL_dmass.shape != mass.shape:
        raise ShapeError("assignment gradient does not match assignment matrix")
    centred = dL_dmass - (mass * dL_dmass).sum(axis=1, keepdims=True)
    return backprop(cache, mass * centred / net.temperature)


def inner_objective(
    net: EnvInferenceNet,
    aux: np.ndarray,
    pi_global: np.ndarray,
    probes: ProbeRecord,
    variant: Variant = "l1",
    epsilon: float = 1e-8,
) -> Tuple[float, List[np.ndarray]]:
    """P_TV under the inferred partition and its gradient in the network tensors.

    The KL stabilizer is absent here: assignments are detached inside it.
    """
    mass, cache = soft_assignments(net, aux)
    assign = EnvAssignment.soft(mass)
    weights = condition_on_envs(pi_global, assign, epsilon)
    penalty = tv_penalty(weights.pi_cond, probes, variant, weights.active)
    dP_dcond = probes.d[:, None] * penalty.slopes[None, :]
    dP_dmass = assignment_gradient(weights, dP_dcond)
    return penalty.value, assignment_backprop(net, cache, mass, dP_dmass)


def inner_step(
    net: EnvInferenceNet,
    aux: np.ndarray,
    pi_global: np.ndarray,
    probes: ProbeRecord,
    variant: Variant,
    optimizer: OptimizerState,
    epsilon: float = 1e-8,
) -> Tuple[EnvInferenceNet, float]:
    """One ascent step on P_TV for eta; returns the new net and the pre-step penalty."""
    value, grads = inner_objective(net, aux, pi_global, probes, variant, epsilon)
    updated = optimizer_step(optimizer, net.network.tensors(), grads, "ascent")
    logger.debug("inner step: P_TV %.6g", value)
    return net.replace_tensors(updated), value
