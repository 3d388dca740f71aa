"""Dense numerics: feed-forward predictor with exact backprop, losses, optimizers, RNG.

Matrices are float64 numpy arrays in row-major order. A layer computes
``z = a @ W + b`` with ``W`` of shape (in_dim, out_dim).
"""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .errors import InputError, NumericError, ShapeError

RNG_ALGORITHM = "PCG64"

Activation = Literal["tanh", "relu", "identity"]
Direction = Literal["descent", "ascent"]

LOSS_KINDS = ("mse", "binary_cross_entropy_with_logit", "multiclass_cross_entropy")
OPTIMIZER_KINDS = ("sgd", "sgd_momentum", "adam")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator over the portable PCG64 bit generator."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class PredictorParams:
    """Weights of a small feed-forward network plus the fixed scalar probe."""
    layers: List[Layer]
    activation: Activation = "tanh"
    probe_w: float = field(default=1.0, init=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a predictor needs at least one layer")
        if self.activation not in ("tanh", "relu", "identity"):
            raise InputError(f"unknown activation '{self.activation}'")
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise ShapeError(f"layer {i}: bias does not match weight columns")
            if i > 0 and self.layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ShapeError(f"layer {i}: input width does not chain from layer {i - 1}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def tensors(self) -> List[np.ndarray]:
        """Trainable tensors as [W0, b0, W1, b1, ...]; the probe is not among them."""
        out: List[np.ndarray] = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def replace_tensors(self, tensors: Sequence[np.ndarray]) -> "PredictorParams":
        if len(tensors) != 2 * len(self.layers):
            raise ShapeError("tensor list does not match layer count")
        layers = [
            Layer(weight=np.array(tensors[2 * i], dtype=float), bias=np.array(tensors[2 * i + 1], dtype=float))
            for i in range(len(self.layers))
        ]
        return PredictorParams(layers=layers, activation=self.activation)

    def copy(self) -> "PredictorParams":
        return self.replace_tensors(self.tensors())


def init_predictor(
    dims: Sequence[int],
    activation: Activation,
    rng: np.random.Generator,
    scale: float = 0.5,
) -> PredictorParams:
    """Gaussian weights with std ``scale / sqrt(fan_in)`` and zero biases."""
    if len(dims) < 2:
        raise ShapeError("dims must list input and output widths")
    layers = [
        Layer(
            weight=rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out)),
            bias=np.zeros(fan_out),
        )
        for fan_in, fan_out in zip(dims[:-1], dims[1:])
    ]
    return PredictorParams(layers=layers, activation=activation)


def zero_predictor(dims: Sequence[int], activation: Activation = "tanh") -> PredictorParams:
    layers = [
        Layer(weight=np.zeros((fan_in, fan_out)), bias=np.zeros(fan_out))
        for fan_in, fan_out in zip(dims[:-1], dims[1:])
    ]
    return PredictorParams(layers=layers, activation=activation)


@dataclass
class ForwardCache:
    """Activation record of one forward pass."""
    params: PredictorParams
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    out_shape: Tuple[int, int]


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_slope(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0.0).astype(float)
    return np.ones_like(z)


def forward(params: PredictorParams, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Logits of shape (batch, out_dim) and the cache needed by backprop."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match predictor input width {params.in_dim}")

    inputs: List[np.ndarray] = []
    preacts: List[np.ndarray] = []
    a = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        inputs.append(a)
        z = a @ layer.weight + layer.bias
        if i < last:
            preacts.append(z)
            a = _activate(params.activation, z)
        else:
            a = z
    return a, ForwardCache(params=params, inputs=inputs, preacts=preacts, out_shape=a.shape)


def backprop(cache: ForwardCache, upstream: np.ndarray) -> List[np.ndarray]:
    """Exact gradients of ``sum(upstream * logits)``, in ``tensors()`` order."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != cache.out_shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match logits {cache.out_shape}")

    layers = cache.params.layers
    grads: List[Optional[np.ndarray]] = [None] * (2 * len(layers))
    delta = upstream
    for i in range(len(layers) - 1, -1, -1):
        grads[2 * i] = cache.inputs[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            slope = _activation_slope(cache.params.activation, cache.preacts[i - 1], cache.inputs[i])
            delta = (delta @ layers[i].weight.T) * slope
    return grads  # type: ignore[return-value]


@dataclass(frozen=True)
class LossSpec:
    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InputError(f"unknown loss '{self.kind}'; valid: {', '.join(LOSS_KINDS)}")

    def check_out_dim(self, out_dim: int) -> None:
        if self.kind == "multiclass_cross_entropy":
            if out_dim < 2:
                raise ShapeError("multiclass cross-entropy needs at least two logits")
        elif out_dim != 1:
            raise ShapeError(f"{self.kind} needs a single logit, got {out_dim}")


def _batched_loss(
    spec: LossSpec, z: np.ndarray, y: np.ndarray, v: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    spec.check_out_dim(z.shape[1])
    if y.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch of {z.shape[0]}")

    if spec.kind == "mse":
        r = z[:, 0] - y
        return r * r, 2.0 * r[:, None], 2.0 * v

    if spec.kind == "binary_cross_entropy_with_logit":
        if np.any((y < 0.0) | (y > 1.0)):
            raise InputError("binary labels must lie in [0, 1]")
        s = z[:, 0]
        p = expit(s)
        value = np.logaddexp(0.0, s) - y * s
        return value, (p - y)[:, None], (p * (1.0 - p))[:, None] * v

    labels = y.astype(int)
    if np.any(labels != y) or np.any((labels < 0) | (labels >= z.shape[1])):
        raise InputError(f"class labels must be integers in [0, {z.shape[1]})")
    rows = np.arange(z.shape[0])
    value = logsumexp(z, axis=1) - z[rows, labels]
    p = softmax(z, axis=1)
    grad = p.copy()
    grad[rows, labels] -= 1.0
    pv = p * v
    hvp = pv - p * pv.sum(axis=1, keepdims=True)
    return value, grad, hvp


def loss_value_grad_hvp(
    spec: LossSpec,
    logits: np.ndarray,
    label: Union[float, np.ndarray],
    v: np.ndarray,
) -> Tuple[Union[float, np.ndarray], np.ndarray, np.ndarray]:
    """Loss value, gradient and Hessian-vector product with respect to the logits.

    Accepts a single logit vector with a scalar label, or a (batch, K) matrix
    with a label vector; results follow the input's batching.
    """
    z = np.asarray(logits, dtype=float)
    vv = np.asarray(v, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None, :]
        vv = vv[None, :]
        y = np.atleast_1d(np.asarray(label, dtype=float))
    else:
        y = np.asarray(label, dtype=float)
    if z.ndim != 2 or vv.shape != z.shape:
        raise ShapeError(f"direction shape {vv.shape} does not match logits {z.shape}")

    value, grad, hvp = _batched_loss(spec, z, y, vv)
    if single:
        return float(value[0]), grad[0], hvp[0]
    return value, grad, hvp


@dataclass
class OptimizerState:
    """Step size and moment buffers of one player's optimizer."""
    kind: str
    lr: float
    player: str
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first: Optional[List[np.ndarray]] = None
    second: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise InputError(f"unknown optimizer '{self.kind}'; valid: {', '.join(OPTIMIZER_KINDS)}")
        if self.lr < 0:
            raise InputError(f"step size for {self.player} must be non-negative")


def make_optimizer(kind: str, lr: float, player: str) -> OptimizerState:
    return OptimizerState(kind=kind, lr=lr, player=player)


def optimizer_step(
    state: OptimizerState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    direction: Direction = "descent",
) -> List[np.ndarray]:
    """Return updated copies of ``params``; moment buffers in ``state`` advance in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{state.player}: {len(grads)} gradients for {len(params)} tensors")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"{state.player}: gradient shape {np.shape(g)} != parameter {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", player=state.player)

    sign = -1.0 if direction == "descent" else 1.0

    if state.kind == "sgd":
        return [np.asarray(p, dtype=float) + sign * state.lr * np.asarray(g) for p, g in zip(params, grads)]

    if state.first is None:
        state.first = [np.zeros(np.shape(p)) for p in params]
        state.second = [np.zeros(np.shape(p)) for p in params]

    if state.kind == "sgd_momentum":
        updated = []
        for i, (p, g) in enumerate(zip(params, grads)):
            state.first[i] = state.momentum * state.first[i] + g
            updated.append(np.asarray(p, dtype=float) + sign * state.lr * state.first[i])
        return updated

    state.step_count += 1
    t = state.step_count
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.first[i] = state.beta1 * state.first[i] + (1.0 - state.beta1) * g
        state.second[i] = state.beta2 * state.second[i] + (1.0 - state.beta2) * g * g
        m_hat = state.first[i] / (1.0 - state.beta1**t)
        v_hat = state.second[i] / (1.0 - state.beta2**t)
        updated.append(np.asarray(p, dtype=float) + sign * state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated
