"""Oracle and invariant suites run by ``ectr verify``."""

from dataclasses import replace
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np

from .config import config
from .data import Batch
from .envinfer import assignment_backprop, inner_objective, soft_assignments
from .errors import EctrError, InputError
from .gradcheck import central_difference, flatten, relative_error, unflatten
from .invariance import InvarianceDual, probe, tv_penalty, unweighted_tv_penalty
from .logutil import logger
from .models import CheckResult, TrainConfig, VerifySummary
from .numerics import LossSpec, backprop, forward, loss_value_grad_hvp, make_rng
from .trainer import GameState, evaluate_outer, fit_tail_weights, init_game_state, outer_step, player_gradients
from .weighting import (
    EnvAssignment,
    brute_force_kl_dro,
    condition_on_envs,
    gibbs_objective_value,
    gibbs_tail_distribution,
    global_softmax,
    kl_env,
)

INJECTIONS = ("kl-sign-flip",)

FD_POINTS = 20
KINK_MARGIN = 1e-3
VERIFY_SEED = 20240611


def _gradcheck_config(method: str) -> TrainConfig:
    return TrainConfig(
        method=method,
        hidden=[4],
        tail_hidden=[4],
        infer_hidden=[4],
        beta=0.5,
        init_scale=1.5,
        epochs=1,
        batch_size=8,
    )


def _gradcheck_batch(rng: np.random.Generator) -> Batch:
    """Two environments of four samples each."""
    return Batch(
        x=rng.normal(size=(8, 2)),
        y=rng.integers(0, 2, size=8).astype(float),
        env=np.repeat([0, 1], 4),
        aux=rng.uniform(size=(8, 1)),
        index=np.arange(8),
    )


def _gradcheck_point(rng: np.random.Generator, method: str) -> Tuple[GameState, Batch, TrainConfig]:
    """A random state and batch whose per-environment probe sums stay clear of zero."""
    cfg = _gradcheck_config(method)
    for _ in range(200):
        batch = _gradcheck_batch(rng)
        state = init_game_state(cfg, 2, 2, 8, rng, aux_dim=1)
        state = replace(state, dual=InvarianceDual(psi=float(rng.normal())))
        ev = evaluate_outer(state, batch, cfg)
        if np.min(np.abs(ev.penalty.per_env_g)) > KINK_MARGIN:
            return state, batch, cfg
    raise InputError("could not sample a gradient-check point away from the l1 kinks")


def _phi_error(state: GameState, batch: Batch, cfg: TrainConfig) -> float:
    base = state.predictor.tensors()

    def total(vec: np.ndarray) -> float:
        st = replace(state, predictor=state.predictor.replace_tensors(unflatten(vec, base)))
        return evaluate_outer(st, batch, cfg).breakdown.total

    analytic = flatten(player_gradients(evaluate_outer(state, batch, cfg), state, cfg).phi)
    return relative_error(analytic, central_difference(total, flatten(base)))


def _theta_error(
    state: GameState, batch: Batch, cfg: TrainConfig, kl_coefficient: Optional[float] = None
) -> float:
    base = state.tail.tensors()

    def total(vec: np.ndarray) -> float:
        st = replace(state, tail=state.tail.replace_tensors(unflatten(vec, base)))
        return evaluate_outer(st, batch, cfg).breakdown.total

    ev = evaluate_outer(state, batch, cfg)
    analytic = flatten(player_gradients(ev, state, cfg, kl_coefficient=kl_coefficient).theta)
    return relative_error(analytic, central_difference(total, flatten(base)))


def _psi_error(state: GameState, batch: Batch, cfg: TrainConfig) -> float:
    def total(vec: np.ndarray) -> float:
        st = replace(state, dual=InvarianceDual(psi=float(vec[0])))
        return evaluate_outer(st, batch, cfg).breakdown.total

    analytic = player_gradients(evaluate_outer(state, batch, cfg), state, cfg).psi
    return relative_error(np.array([analytic]), central_difference(total, np.array([state.dual.psi])))


def _eta_error(state: GameState, batch: Batch, cfg: TrainConfig) -> float:
    ev = evaluate_outer(state, batch, cfg)
    net = state.envnet
    base = net.network.tensors()
    pi, probes = ev.weights.pi_global, ev.probes

    def penalty(vec: np.ndarray) -> float:
        value, _ = inner_objective(net.replace_tensors(unflatten(vec, base)), batch.aux, pi, probes, "l1", cfg.epsilon)
        return value

    _, grads = inner_objective(net, batch.aux, pi, probes, "l1", cfg.epsilon)
    return relative_error(flatten(grads), central_difference(penalty, flatten(base)))


def _fd_check(name: str, method: str, error: Callable, tolerance: float, seed: int) -> CheckResult:
    rng = make_rng(seed)
    worst = max(error(*_gradcheck_point(rng, method)) for _ in range(FD_POINTS))
    return CheckResult(
        name=name,
        passed=worst <= tolerance,
        detail=f"{FD_POINTS} points, 2 environments x 4 samples",
        worst_error=worst,
    )


def check_gibbs_oracle(seed: int = VERIFY_SEED) -> CheckResult:
    """Closed-form tail distribution against brute-force search."""
    rng = make_rng(seed)
    worst_pi, worst_obj = 0.0, 0.0
    for i in range(50):
        n = (2, 3, 4)[i % 3]
        beta = (0.1, 1.0, 10.0)[(i // 3) % 3]
        losses = rng.uniform(0.0, 2.0, size=n)
        base = rng.dirichlet(np.ones(n))
        closed = gibbs_tail_distribution(losses, base, beta)
        searched, value = brute_force_kl_dro(losses, base, beta)
        worst_pi = max(worst_pi, float(np.max(np.abs(closed - searched))))
        worst_obj = max(worst_obj, abs(value - gibbs_objective_value(losses, base, beta)))
    return CheckResult(
        name="gibbs_oracle",
        passed=worst_pi <= 1e-3 and worst_obj <= 1e-6,
        detail=f"50 instances; max |pi diff| {worst_pi:.3g}, max objective gap {worst_obj:.3g}",
        worst_error=worst_pi,
    )


def _random_weight_state(rng: np.random.Generator):
    n = int(rng.integers(2, 13))
    e = int(rng.integers(1, 5))
    scores = rng.normal(scale=3.0, size=n)
    if rng.random() < 0.5:
        assign = EnvAssignment.hard(rng.integers(0, e, size=n), e)
    else:
        assign = EnvAssignment.soft(rng.dirichlet(np.ones(e), size=n))
    return scores, assign, condition_on_envs(global_softmax(scores), assign)


def check_normalization(seed: int = VERIFY_SEED) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(1000):
        _, _, w = _random_weight_state(rng)
        sums = w.pi_cond[:, w.active].sum(axis=0)
        worst = max(worst, float(np.max(np.abs(sums - 1.0), initial=0.0)), abs(w.pi_global.sum() - 1.0))
        if np.any(w.pi_cond < 0):
            worst = np.inf
    return CheckResult(name="normalization", passed=worst <= 1e-9, detail="1000 random weight states", worst_error=worst)


def check_kl_nonnegative(seed: int = VERIFY_SEED) -> CheckResult:
    rng = make_rng(seed)
    lowest = np.inf
    for _ in range(1000):
        _, assign, w = _random_weight_state(rng)
        lowest = min(lowest, kl_env(w, assign).value)

    uniform_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 13))
        e = int(rng.integers(1, 4))
        assign = EnvAssignment.hard(rng.integers(0, e, size=n), e)
        w = condition_on_envs(np.full(n, 1.0 / n), assign)
        uniform_worst = max(uniform_worst, kl_env(w, assign).value)
    return CheckResult(
        name="kl_nonnegative",
        passed=lowest >= 0.0 and uniform_worst <= 1e-12,
        detail=f"min KL {lowest:.3g}; max KL at uniform conditionals {uniform_worst:.3g}",
        worst_error=uniform_worst,
    )


def check_env_isolation(seed: int = VERIFY_SEED) -> CheckResult:
    """Scores of other environments do not move pi(.|e) under hard assignments."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 13))
        ids = np.concatenate([[0, 1], rng.integers(0, 2, size=n - 2)])
        assign = EnvAssignment.hard(ids, 2)
        scores = rng.normal(size=n)
        before = condition_on_envs(global_softmax(scores), assign)
        moved = scores + np.where(ids == 1, rng.normal(scale=2.0, size=n), 0.0)
        after = condition_on_envs(global_softmax(moved), assign)
        worst = max(worst, float(np.max(np.abs(before.pi_cond[:, 0] - after.pi_cond[:, 0]))))
    return CheckResult(name="env_isolation", passed=worst <= 1e-9, detail="200 perturbations", worst_error=worst)


def check_detach(tolerance: float, inject: Iterable[str] = (), seed: int = VERIFY_SEED) -> CheckResult:
    """KL reaches the tail adversary with the right sign and never the inference network."""
    rng = make_rng(seed + 1)
    flip = "kl-sign-flip" in set(inject)
    worst_theta, leaked, live = 0.0, 0.0, 0.0
    for _ in range(5):
        state, batch, cfg = _gradcheck_point(rng, "ectr_inferred")
        klc = cfg.beta if flip else None
        worst_theta = max(worst_theta, _theta_error(state, batch, cfg, kl_coefficient=klc))

        mass, cache = soft_assignments(state.envnet, batch.aux)
        ev = evaluate_outer(state, batch, cfg)
        detached = kl_env(ev.weights, ev.assign, detach_assignment=True)
        attached = kl_env(ev.weights, ev.assign, detach_assignment=False)
        leaked = max(leaked, float(np.max(np.abs(flatten(assignment_backprop(state.envnet, cache, mass, detached.grad_assign))))))
        live = max(live, float(np.max(np.abs(attached.grad_assign))))

    passed = worst_theta <= tolerance and leaked == 0.0 and live > 0.0
    return CheckResult(
        name="detach",
        passed=passed,
        detail=f"theta gradient error {worst_theta:.3g}; eta KL gradient {leaked:.3g}",
        worst_error=worst_theta,
    )


def _reduction_data(rng: np.random.Generator) -> Batch:
    sizes = (6, 10)
    n = sum(sizes)
    return Batch(
        x=rng.normal(size=(n, 2)),
        y=rng.integers(0, 2, size=n).astype(float),
        env=np.repeat([0, 1], sizes),
        aux=rng.uniform(size=(n, 1)),
        index=np.arange(n),
    )


def erm_reduction_gap(seed: int = VERIFY_SEED, steps: int = 5) -> float:
    """ectr_known with frozen uniform free scores and lambda = 0 against environment-mean ERM."""
    rng = make_rng(seed)
    batch = _reduction_data(rng)
    cfg = TrainConfig(
        method="ectr_known",
        tail_mode="free_scores",
        lr_theta=0.0,
        lambda_fixed=0.0,
        beta=1e6,
        optimizer_phi="sgd",
        lr_phi=0.1,
        hidden=[4],
    )
    state = init_game_state(cfg, 2, 2, len(batch), rng)
    reference = state.predictor.copy()
    counts = np.bincount(batch.env)
    share = 1.0 / (len(counts) * counts[batch.env])
    loss = LossSpec(cfg.loss)

    worst = 0.0
    for _ in range(steps):
        state, _ = outer_step(state, batch, cfg)
        logits, cache = forward(reference, batch.x)
        _, grads, _ = loss_value_grad_hvp(loss, logits, batch.y, logits)
        step = backprop(cache, share[:, None] * grads)
        reference = reference.replace_tensors([p - cfg.lr_phi * g for p, g in zip(reference.tensors(), step)])
        gap = max(float(np.max(np.abs(a - b))) for a, b in zip(state.predictor.tensors(), reference.tensors()))
        worst = max(worst, gap)
    return worst


def known_inferred_gap(seed: int = VERIFY_SEED, steps: int = 5) -> float:
    """ectr_inferred fed the true one-hot assignment against ectr_known, per step."""
    rng = make_rng(seed)
    batch = _reduction_data(rng)
    known_cfg = TrainConfig(method="ectr_known", hidden=[4], tail_hidden=[4], optimizer_phi="sgd", lr_phi=0.1)
    inferred_cfg = known_cfg.model_copy(update={"method": "ectr_inferred"})

    known = init_game_state(known_cfg, 2, 2, len(batch), rng)
    inferred = init_game_state(inferred_cfg, 2, 2, len(batch), rng, aux_dim=1)
    inferred = replace(inferred, predictor=known.predictor.copy(), tail=known.tail.replace_tensors(known.tail.tensors()))
    onehot = EnvAssignment.soft(EnvAssignment.hard(batch.env, 2).mass)

    worst = 0.0
    for _ in range(steps):
        known, ev_k = outer_step(known, batch, known_cfg)
        inferred, ev_i = outer_step(inferred, batch, inferred_cfg, assign=onehot)
        pairs = list(zip(known.predictor.tensors(), inferred.predictor.tensors()))
        pairs += list(zip(known.tail.tensors(), inferred.tail.tensors()))
        gap = max(float(np.max(np.abs(a - b))) for a, b in pairs)
        worst = max(worst, gap, abs(ev_k.breakdown.total - ev_i.breakdown.total), abs(known.dual.psi - inferred.dual.psi))
    return worst


def uniform_tv_gap(seed: int = VERIFY_SEED, instances: int = 100) -> float:
    """Uniform-weight tv_penalty against the penalty on plain environment means."""
    rng = make_rng(seed)
    loss = LossSpec("binary_cross_entropy_with_logit")
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(4, 20))
        ids = np.concatenate([[0, 1], rng.integers(0, 3, size=n - 2)])
        e = int(ids.max()) + 1
        probes = probe(loss, rng.normal(size=(n, 1)), rng.integers(0, 2, size=n).astype(float))
        w = condition_on_envs(np.full(n, 1.0 / n), EnvAssignment.hard(ids, e))
        weighted = tv_penalty(w.pi_cond, probes, "l1", w.active).value
        worst = max(worst, abs(weighted - unweighted_tv_penalty(probes, ids, e, "l1")))
    return worst


def check_reductions(seed: int = VERIFY_SEED) -> CheckResult:
    erm = erm_reduction_gap(seed)
    frozen = known_inferred_gap(seed)
    tv = uniform_tv_gap(seed)
    return CheckResult(
        name="reductions",
        passed=erm <= 1e-10 and frozen <= 1e-10 and tv <= 1e-12,
        detail=f"erm {erm:.3g}; known/inferred {frozen:.3g}; uniform tv {tv:.3g}",
        worst_error=max(erm, frozen, tv),
    )


def check_tail_endpoints(seed: int = VERIFY_SEED) -> CheckResult:
    """Large beta keeps environment means, small beta reaches environment maxima."""
    rng = make_rng(seed)
    ids = np.repeat([0, 1], 4)
    assign = EnvAssignment.hard(ids, 2)
    losses = rng.uniform(0.0, 1.0, size=8)
    means = np.array([losses[ids == e].mean() for e in range(2)])
    maxima = np.array([losses[ids == e].max() for e in range(2)])

    flat = fit_tail_weights(losses, assign, beta=1e6, steps=200, lr=1e-7)
    sharp = fit_tail_weights(losses, assign, beta=1e-6, steps=20000, lr=2.0)
    gap_mean = float(np.max(np.abs(flat.risks - means)))
    gap_max = float(np.max(np.abs(sharp.risks - maxima)))
    return CheckResult(
        name="tail_endpoints",
        passed=gap_mean <= 1e-4 and gap_max <= 1e-3,
        detail=f"beta=1e6 gap to mean {gap_mean:.3g}; beta=1e-6 gap to max {gap_max:.3g}",
        worst_error=max(gap_mean, gap_max),
    )


def run_checks(tolerance: Optional[float] = None, inject: Iterable[str] = ()) -> VerifySummary:
    """Run every suite; a raised error counts as a failed check."""
    tol = config.tolerance if tolerance is None else tolerance
    inject = set(inject)
    unknown = inject - set(INJECTIONS)
    if unknown:
        raise InputError(f"unknown injection(s) {sorted(unknown)}; valid: {', '.join(INJECTIONS)}")

    suites: List[Tuple[str, Callable[[], CheckResult]]] = [
        ("gibbs_oracle", check_gibbs_oracle),
        ("fd_phi", lambda: _fd_check("fd_phi", "ectr_known", _phi_error, tol, VERIFY_SEED)),
        ("fd_theta", lambda: _fd_check("fd_theta", "ectr_known", _theta_error, tol, VERIFY_SEED + 2)),
        ("fd_psi", lambda: _fd_check("fd_psi", "ectr_known", _psi_error, tol, VERIFY_SEED + 3)),
        ("fd_eta", lambda: _fd_check("fd_eta", "ectr_inferred", _eta_error, tol, VERIFY_SEED + 4)),
        ("normalization", check_normalization),
        ("kl_nonnegative", check_kl_nonnegative),
        ("env_isolation", check_env_isolation),
        ("detach", lambda: check_detach(tol, inject)),
        ("reductions", check_reductions),
        ("tail_endpoints", check_tail_endpoints),
    ]

    summary = VerifySummary(tolerance=tol)
    for name, suite in suites:
        try:
            result = suite()
        except EctrError as exc:
            result = CheckResult(name=name, passed=False, detail=f"raised {type(exc).__name__}: {exc}")
        summary.checks.append(result)
        if result.passed:
            logger.info("check %s passed", name)
        else:
            logger.error("check %s failed: %s", name, result.detail)
    return summary
