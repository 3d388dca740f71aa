"""Stationarity probe, TV penalties and the softplus invariance dual."""

from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from scipy.special import expit

from .errors import InputError, ShapeError
from .numerics import LossSpec, loss_value_grad_hvp

Variant = Literal["l1", "l2"]


@dataclass(frozen=True)
class ProbeRecord:
    """d_i = <f_i, grad_z l(f_i, y_i)> and its derivative with respect to f_i."""
    d: np.ndarray
    dgrad_f: np.ndarray

    @classmethod
    def from_derivatives(cls, logits: np.ndarray, grad: np.ndarray, hvp: np.ndarray) -> "ProbeRecord":
        return cls(d=np.sum(logits * grad, axis=-1), dgrad_f=grad + hvp)

    def __len__(self) -> int:
        return int(np.size(self.d))


def probe(loss: LossSpec, logits: np.ndarray, labels: Union[float, np.ndarray]) -> ProbeRecord:
    """Probe at w = 1; the Hessian-vector product is taken along the logits themselves."""
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InputError("logits must be finite")
    _, grad, hvp = loss_value_grad_hvp(loss, z, labels, z)
    return ProbeRecord.from_derivatives(z, grad, hvp)


@dataclass(frozen=True)
class TVPenalty:
    variant: Variant
    per_env_g: np.ndarray
    value: float
    active: np.ndarray

    @property
    def slopes(self) -> np.ndarray:
        """dP/dg_e: sign(g_e)/E (l1, sign(0) = 0) or 2 g_e / E (l2); zero on inactive envs."""
        n = int(self.active.sum())
        if self.variant == "l1":
            raw = np.sign(self.per_env_g)
        else:
            raw = 2.0 * self.per_env_g
        return np.where(self.active, raw / n, 0.0)


def _check_inputs(pi_cond: np.ndarray, probes: ProbeRecord, active: Optional[np.ndarray]) -> np.ndarray:
    if pi_cond.ndim != 2:
        raise ShapeError("conditional weights must be an N x E matrix")
    if pi_cond.shape[1] == 0:
        raise InputError("no environments to penalize")
    if pi_cond.shape[0] != len(probes):
        raise ShapeError(f"{len(probes)} probes for {pi_cond.shape[0]} weighted samples")
    if active is None:
        active = np.ones(pi_cond.shape[1], dtype=bool)
    if not active.any():
        raise InputError("no active environment to penalize")
    return active


def tv_penalty(
    pi_cond: np.ndarray,
    probes: ProbeRecord,
    variant: Variant = "l1",
    active: Optional[np.ndarray] = None,
) -> TVPenalty:
    pi_cond = np.asarray(pi_cond, dtype=float)
    active = _check_inputs(pi_cond, probes, active)
    if variant not in ("l1", "l2"):
        raise InputError(f"unknown TV variant '{variant}'")

    g = pi_cond.T @ probes.d
    per_env = np.abs(g) if variant == "l1" else g * g
    value = float(per_env[active].mean())
    return TVPenalty(variant=variant, per_env_g=g, value=value, active=active)


def tv_grad_wrt_logits(
    pi_cond: np.ndarray,
    probes: ProbeRecord,
    variant: Variant = "l1",
    active: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Upstream dP/df_i = sum_e slope_e pi(i|e) dgrad_f(i)."""
    penalty = tv_penalty(pi_cond, probes, variant, active)
    weights = np.asarray(pi_cond, dtype=float) @ penalty.slopes
    return weights[:, None] * probes.dgrad_f


def unweighted_tv_penalty(
    probes: ProbeRecord, env_ids: np.ndarray, n_envs: int, variant: Variant = "l1"
) -> float:
    """Penalty on plain per-environment mean risks, g_e = mean of d over env e."""
    env_ids = np.asarray(env_ids, dtype=int)
    values = []
    for e in range(n_envs):
        members = probes.d[env_ids == e]
        if members.size == 0:
            continue
        g = members.mean()
        values.append(abs(g) if variant == "l1" else g * g)
    if not values:
        raise InputError("no populated environment")
    return float(np.mean(values))


def lambda_of(psi: float) -> float:
    """softplus(psi), stable for large |psi|."""
    return float(np.logaddexp(0.0, psi))


def lambda_slope(psi: float) -> float:
    return float(expit(psi))


@dataclass
class InvarianceDual:
    """lambda = softplus(psi), or a pinned constant when ``fixed`` is set."""
    psi: float = 0.0
    fixed: Optional[float] = None

    @property
    def lambda_(self) -> float:
        return self.fixed if self.fixed is not None else lambda_of(self.psi)

    @property
    def trainable(self) -> bool:
        return self.fixed is None

    def ascent_gradient(self, p_tv: float) -> float:
        """dL/dpsi = softplus'(psi) P_TV, zero when pinned."""
        return lambda_slope(self.psi) * p_tv if self.trainable else 0.0
