"""Outer objective, player updates and the training loop for every method."""

from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from .data import Batch, Dataset
from .envinfer import EnvInferenceNet, infer_assignments, init_inference_net, inner_step
from .errors import ConfigError, InputError, NumericError, ShapeError
from .invariance import InvarianceDual, ProbeRecord, TVPenalty, Variant, lambda_of, tv_penalty
from .logutil import logger
from .models import (
    METHODS,
    DegenerateEvent,
    EnvMetric,
    EpochRecord,
    OuterLossBreakdown,
    RunReport,
    TrainConfig,
)
from .numerics import (
    ForwardCache,
    LossSpec,
    OptimizerState,
    PredictorParams,
    backprop,
    forward,
    init_predictor,
    loss_value_grad_hvp,
    make_optimizer,
    make_rng,
    optimizer_step,
)
from .weighting import (
    EnvAssignment,
    KLResult,
    TailAdversary,
    WeightState,
    condition_on_envs,
    env_mean_weights,
    global_softmax,
    kl_env,
    tail_score_gradient,
)


@dataclass(frozen=True)
class MethodProfile:
    """Which players a method trains and how it sees environments."""
    env_source: Literal["pooled", "known", "inferred"]
    tail_weights: bool = False
    penalty: bool = False
    dual: bool = False
    variant: Optional[Variant] = None
    group_dro: bool = False


PROFILES: Dict[str, MethodProfile] = {
    "erm": MethodProfile("pooled"),
    "irmv1": MethodProfile("known", penalty=True, variant="l2"),
    "group_dro": MethodProfile("known", group_dro=True),
    "irm_tv_l1": MethodProfile("known", penalty=True, variant="l1"),
    "ood_tv_irm_l1": MethodProfile("known", penalty=True, dual=True, variant="l1"),
    "ectr_known": MethodProfile("known", tail_weights=True, penalty=True, dual=True),
    "ectr_inferred": MethodProfile("inferred", tail_weights=True, penalty=True, dual=True),
    "minimax_tv_l1": MethodProfile("inferred", penalty=True, variant="l1"),
    "ood_tv_minimax_l1": MethodProfile("inferred", penalty=True, dual=True, variant="l1"),
}


def method_profile(method: str) -> MethodProfile:
    try:
        return PROFILES[method]
    except KeyError:
        raise ConfigError(f"unknown method '{method}'; valid methods: {', '.join(METHODS)}") from None


@dataclass
class GameState:
    """Parameters of every player plus their optimizer buffers."""
    predictor: PredictorParams
    tail: Optional[TailAdversary]
    dual: InvarianceDual
    envnet: Optional[EnvInferenceNet]
    n_envs: int
    group_q: Optional[np.ndarray]
    optimizers: Dict[str, OptimizerState]


def _env_count(profile: MethodProfile, config: TrainConfig, n_train_envs: int) -> int:
    if profile.env_source == "pooled":
        return 1
    if profile.env_source == "known":
        return n_train_envs
    return config.n_latent_envs


def init_game_state(
    config: TrainConfig,
    in_dim: int,
    n_envs: int,
    n_train: int,
    rng: np.random.Generator,
    aux_dim: int = 0,
) -> GameState:
    profile = method_profile(config.method)
    dims = [in_dim, *config.hidden, config.out_dim]
    predictor = init_predictor(dims, config.activation, rng, config.init_scale)

    tail = None
    if profile.tail_weights:
        if config.tail_mode == "free_scores":
            tail = TailAdversary(mode="free_scores", inputs=config.tail_inputs, free_scores=np.zeros(n_train))
        else:
            width = in_dim + (1 if config.tail_inputs == "features_plus_detached_loss" else 0)
            network = init_predictor([width, *config.tail_hidden, 1], "tanh", rng, config.init_scale)
            tail = TailAdversary(mode="score_network", inputs=config.tail_inputs, network=network)

    envnet = None
    if profile.env_source == "inferred":
        envnet = init_inference_net(
            aux_dim or in_dim, n_envs, config.infer_hidden, rng, config.init_scale, config.infer_temperature
        )

    if config.method == "irmv1":
        dual = InvarianceDual(psi=config.psi_init, fixed=config.gamma)
    elif profile.penalty and (config.lambda_fixed is not None or not profile.dual):
        fixed = config.lambda_fixed if config.lambda_fixed is not None else lambda_of(config.psi_init)
        dual = InvarianceDual(psi=config.psi_init, fixed=fixed)
    elif profile.penalty:
        dual = InvarianceDual(psi=config.psi_init)
    else:
        dual = InvarianceDual(psi=config.psi_init, fixed=0.0)

    return GameState(
        predictor=predictor,
        tail=tail,
        dual=dual,
        envnet=envnet,
        n_envs=n_envs,
        group_q=np.full(n_envs, 1.0 / n_envs) if profile.group_dro else None,
        optimizers={
            "phi": make_optimizer(config.optimizer_phi, config.lr_phi, "phi"),
            "theta": make_optimizer(config.optimizer_adversary, config.lr_theta, "theta"),
            "psi": make_optimizer(config.optimizer_adversary, config.lr_psi, "psi"),
            "eta": make_optimizer(config.optimizer_adversary, config.lr_eta, "eta"),
        },
    )


@dataclass
class OuterEvaluation:
    """Everything computed for one outer objective evaluation on a batch."""
    profile: MethodProfile
    cache: ForwardCache
    losses: np.ndarray
    loss_grads: np.ndarray
    probes: ProbeRecord
    assign: EnvAssignment
    weights: WeightState
    penalty: TVPenalty
    kl: KLResult
    risks: np.ndarray
    risk_weights: np.ndarray
    lam: float
    breakdown: OuterLossBreakdown
    tail_cache: object = None
    group_q: Optional[np.ndarray] = None


def tail_risks(
    losses: np.ndarray, pi_cond: np.ndarray, active: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, float]:
    """R_e = sum_i pi(i|e) l_i and their mean over active environments."""
    losses = np.asarray(losses, dtype=float)
    pi_cond = np.asarray(pi_cond, dtype=float)
    if pi_cond.shape[0] != losses.size:
        raise ShapeError(f"{losses.size} losses for {pi_cond.shape[0]} weighted samples")
    if active is None:
        active = np.ones(pi_cond.shape[1], dtype=bool)
    risks = np.where(active, pi_cond.T @ losses, 0.0)
    return risks, float(risks[active].mean())


def _group_dro_weights(q: np.ndarray, risks: np.ndarray, active: np.ndarray, step: float) -> np.ndarray:
    """Exponentiated-gradient step q_e <- q_e exp(step R_e), renormalized."""
    logq = np.log(q) + step * np.where(active, risks, 0.0)
    updated = np.exp(logq - logq.max())
    return updated / updated.sum()


def _batch_assignment(state: GameState, batch: Batch, profile: MethodProfile) -> EnvAssignment:
    if profile.env_source == "pooled":
        return EnvAssignment.hard(np.zeros(len(batch), dtype=int), 1)
    if profile.env_source == "known":
        if batch.env is None:
            raise ConfigError("known-environment method received a batch without environment ids")
        return EnvAssignment.hard(batch.env, state.n_envs)
    return infer_assignments(state.envnet, batch.inference_inputs)


def evaluate_outer(
    state: GameState,
    batch: Batch,
    config: TrainConfig,
    assign: Optional[EnvAssignment] = None,
) -> OuterEvaluation:
    """L = R_main + lambda P_TV - beta KL_env on ``batch`` at the current parameters.

    ``assign`` replaces the method's own environment assignment when given.
    """
    if len(batch) == 0:
        raise InputError("cannot evaluate an empty batch")
    profile = method_profile(config.method)
    loss = LossSpec(config.loss)

    logits, cache = forward(state.predictor, batch.x)
    losses, grads, hvps = loss_value_grad_hvp(loss, logits, batch.y, logits)
    probes = ProbeRecord.from_derivatives(logits, grads, hvps)
    if assign is None:
        assign = _batch_assignment(state, batch, profile)

    tail_cache = None
    if profile.tail_weights:
        scores, tail_cache = state.tail.scores(batch.x, losses, batch.index)
        pi = global_softmax(scores)
    else:
        pi = np.full(len(batch), 1.0 / len(batch))

    weights = condition_on_envs(pi, assign, config.epsilon)
    risks, _ = tail_risks(losses, weights.pi_cond, weights.active)

    group_q = None
    if profile.group_dro:
        group_q = _group_dro_weights(state.group_q, risks, weights.active, config.group_dro_step)
        risk_weights = np.where(weights.active, group_q, 0.0)
        risk_weights = risk_weights / risk_weights.sum()
    else:
        risk_weights = env_mean_weights(weights)

    penalty = tv_penalty(weights.pi_cond, probes, profile.variant or config.tv_variant, weights.active)
    kl = kl_env(weights, assign, detach_assignment=profile.env_source == "inferred")
    lam = state.dual.lambda_

    breakdown = OuterLossBreakdown.compose(
        float(risk_weights @ risks),
        penalty.value,
        kl.value,
        lam,
        config.beta,
        env_risks=risks.tolist(),
        env_weights=risk_weights.tolist(),
    )
    if not np.isfinite(breakdown.total):
        raise NumericError("non-finite outer objective", player="phi", snapshot=breakdown)

    return OuterEvaluation(
        profile=profile,
        cache=cache,
        losses=losses,
        loss_grads=grads,
        probes=probes,
        assign=assign,
        weights=weights,
        penalty=penalty,
        kl=kl,
        risks=risks,
        risk_weights=risk_weights,
        lam=lam,
        breakdown=breakdown,
        tail_cache=tail_cache,
        group_q=group_q,
    )


@dataclass
class PlayerGradients:
    phi: List[np.ndarray]
    theta: Optional[List[np.ndarray]]
    psi: float


def player_gradients(
    ev: OuterEvaluation,
    state: GameState,
    config: TrainConfig,
    kl_coefficient: Optional[float] = None,
) -> PlayerGradients:
    """Gradients of the outer objective for phi, theta and psi from one evaluation.

    ``kl_coefficient`` is the multiplier of KL_env in L and defaults to -beta.
    """
    klc = -config.beta if kl_coefficient is None else kl_coefficient
    cond = ev.weights.pi_cond

    upstream = (cond @ ev.risk_weights)[:, None] * ev.loss_grads
    if ev.lam != 0.0:
        upstream = upstream + ev.lam * (cond @ ev.penalty.slopes)[:, None] * ev.probes.dgrad_f
    phi = backprop(ev.cache, upstream)

    theta = None
    if ev.profile.tail_weights:
        dL_dcond = (
            ev.losses[:, None] * ev.risk_weights[None, :]
            + ev.lam * ev.probes.d[:, None] * ev.penalty.slopes[None, :]
            + klc * ev.kl.grad_cond
        )
        ds = tail_score_gradient(ev.weights, ev.assign, dL_dcond)
        theta = state.tail.gradients(ev.tail_cache, ds)

    return PlayerGradients(phi=phi, theta=theta, psi=state.dual.ascent_gradient(ev.penalty.value))


def theta_step_scale(beta: float) -> float:
    """Multiplier of the tail adversary's ascent step.

    For beta > 1 theta ascends L / beta. The direction and stationary points are those of L,
    but the KL curvature seen by the step no longer grows with beta.
    """
    return 1.0 / max(1.0, beta)


def outer_step(
    state: GameState,
    batch: Batch,
    config: TrainConfig,
    assign: Optional[EnvAssignment] = None,
) -> Tuple[GameState, OuterEvaluation]:
    """Descent on phi, ascent on theta and psi, all from the same pre-update gradients.

    Optimizer buffers in ``state.optimizers`` advance in place.
    """
    ev = evaluate_outer(state, batch, config, assign)
    grads = player_gradients(ev, state, config)
    opt = state.optimizers

    predictor = state.predictor.replace_tensors(
        optimizer_step(opt["phi"], state.predictor.tensors(), grads.phi, "descent")
    )
    tail = state.tail
    if grads.theta is not None:
        scale = theta_step_scale(config.beta)
        theta = [scale * g for g in grads.theta]
        tail = tail.replace_tensors(optimizer_step(opt["theta"], tail.tensors(), theta, "ascent"))
    dual = state.dual
    if dual.trainable:
        (psi,) = optimizer_step(opt["psi"], [np.array([dual.psi])], [np.array([grads.psi])], "ascent")
        dual = InvarianceDual(psi=float(psi[0]))

    return (
        replace(
            state,
            predictor=predictor,
            tail=tail,
            dual=dual,
            group_q=ev.group_q if ev.group_q is not None else state.group_q,
        ),
        ev,
    )


def inner_updates(state: GameState, batch: Batch, ev: OuterEvaluation, config: TrainConfig) -> GameState:
    """k_inner ascent steps of eta on P_TV using the outer evaluation's weights and probes."""
    variant = ev.profile.variant or config.tv_variant
    net = state.envnet
    for _ in range(config.k_inner):
        net, _ = inner_step(
            net,
            batch.inference_inputs,
            ev.weights.pi_global,
            ev.probes,
            variant,
            state.optimizers["eta"],
            config.epsilon,
        )
    return replace(state, envnet=net)


@dataclass(frozen=True)
class TailFit:
    scores: np.ndarray
    weights: WeightState
    risks: np.ndarray


def fit_tail_weights(
    losses: np.ndarray,
    assign: EnvAssignment,
    beta: float,
    steps: int,
    lr: float,
    epsilon: float = 1e-8,
) -> TailFit:
    """Train free scores alone to maximize R_main - beta KL_env on fixed losses."""
    losses = np.asarray(losses, dtype=float)
    optimizer = make_optimizer("sgd", lr, "theta")
    scores = np.zeros(losses.size)
    for _ in range(steps):
        weights = condition_on_envs(global_softmax(scores), assign, epsilon)
        kl = kl_env(weights, assign, detach_assignment=True)
        dL_dcond = losses[:, None] * env_mean_weights(weights)[None, :] - beta * kl.grad_cond
        ds = tail_score_gradient(weights, assign, dL_dcond)
        (scores,) = optimizer_step(optimizer, [scores], [ds], "ascent")
    weights = condition_on_envs(global_softmax(scores), assign, epsilon)
    risks, _ = tail_risks(losses, weights.pi_cond, weights.active)
    return TailFit(scores=scores, weights=weights, risks=risks)


def iterate_batches(
    pool: Batch,
    method: str,
    batch_size: int,
    rng: np.random.Generator,
    n_envs: int = 1,
) -> Iterator[Batch]:
    """One epoch of minibatches.

    Known-environment methods draw an equal share of every environment per batch;
    the others shuffle the pool. A batch size covering the pool yields it whole.
    """
    n = len(pool)
    if batch_size >= n:
        yield pool
        return

    profile = method_profile(method)
    if profile.env_source == "known" and pool.env is not None:
        per_env = max(1, batch_size // n_envs)
        members = [rng.permutation(np.flatnonzero(pool.env == e)) for e in range(n_envs)]
        n_batches = max(1, min(m.size for m in members) // per_env)
        for b in range(n_batches):
            rows = np.concatenate([m[b * per_env:(b + 1) * per_env] for m in members])
            yield pool.take(rows)
        return

    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        rows = order[start:start + batch_size]
        # a trailing single row cannot carry a stationarity signal
        if rows.size >= 2:
            yield pool.take(rows)


def evaluate(
    params: PredictorParams,
    test_splits: Sequence[Batch],
    loss: Union[str, LossSpec],
) -> Tuple[List[EnvMetric], float, float]:
    """Per-environment accuracy (or MSE), their mean and the worst one."""
    spec = loss if isinstance(loss, LossSpec) else LossSpec(loss)
    metrics = []
    for k, split in enumerate(test_splits):
        if len(split) == 0:
            logger.warning("test environment %d is empty; excluded from evaluation", k)
            continue
        logits, _ = forward(params, split.x)
        if spec.kind == "mse":
            value = float(np.mean((logits[:, 0] - split.y) ** 2))
        elif spec.kind == "binary_cross_entropy_with_logit":
            value = float(np.mean((logits[:, 0] > 0.0) == (split.y > 0.5)))
        else:
            value = float(np.mean(np.argmax(logits, axis=1) == split.y.astype(int)))
        metrics.append(EnvMetric(env=k, n=len(split), metric=value))

    if not metrics:
        raise ConfigError("no non-empty test environment to evaluate")
    values = np.array([m.metric for m in metrics])
    worst = values.max() if spec.kind == "mse" else values.min()
    return metrics, float(values.mean()), float(worst)


def _epoch_breakdown(steps: List[OuterLossBreakdown], beta: float) -> OuterLossBreakdown:
    """Average the terms over an epoch and compose the total from the averages."""
    def mean(name: str) -> float:
        return float(np.mean([getattr(b, name) for b in steps]))

    return OuterLossBreakdown.compose(
        mean("r_main"),
        mean("p_tv"),
        mean("kl_env"),
        mean("lambda_"),
        beta,
        env_risks=np.mean([b.env_risks for b in steps], axis=0).tolist(),
        env_weights=np.mean([b.env_weights for b in steps], axis=0).tolist(),
    )


def _check_compatible(dataset: Dataset, config: TrainConfig, profile: MethodProfile) -> None:
    try:
        LossSpec(config.loss).check_out_dim(config.out_dim)
    except ShapeError as exc:
        raise ConfigError(f"loss and output width disagree: {exc}") from exc
    if profile.env_source == "known" and not dataset.has_env_ids:
        raise ConfigError(f"method '{config.method}' needs environment ids but the dataset has none")
    if not any(len(b) for b in dataset.test):
        raise ConfigError("dataset has no non-empty test environment")


def train(dataset: Dataset, config: TrainConfig, method: Optional[str] = None) -> RunReport:
    """Full training run; ``method`` overrides ``config.method`` when given."""
    if method is not None:
        method_profile(method)
        config = config.model_copy(update={"method": method})
    profile = method_profile(config.method)
    _check_compatible(dataset, config, profile)

    rng = make_rng(config.seed)
    pool = dataset.pooled_train()
    n_envs = _env_count(profile, config, dataset.n_train_envs)
    state = init_game_state(config, dataset.n_features, n_envs, len(pool), rng, dataset.aux_dim)
    if config.batch_size < 2 * n_envs:
        logger.warning("batch size %d is below twice the %d environments", config.batch_size, n_envs)

    logger.info(
        "training %s on %d rows, %d environments, seed %d", config.method, len(pool), n_envs, config.seed
    )
    epochs: List[EpochRecord] = []
    events: List[DegenerateEvent] = []
    for epoch in range(1, config.epochs + 1):
        steps = []
        for step, batch in enumerate(iterate_batches(pool, config.method, config.batch_size, rng, n_envs)):
            state, ev = outer_step(state, batch, config)
            for e in ev.weights.degenerate_envs:
                mass = float(ev.weights.mass[e])
                events.append(DegenerateEvent(epoch=epoch, step=step, env=e, mass=mass))
                logger.warning("epoch %d step %d: environment %d has degenerate mass %.3g", epoch, step, e, mass)
            if profile.env_source == "inferred":
                state = inner_updates(state, batch, ev, config)
            steps.append(ev.breakdown)

        record = EpochRecord(epoch=epoch, breakdown=_epoch_breakdown(steps, config.beta))
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            _, record.test_mean, record.test_worst = evaluate(state.predictor, dataset.test, config.loss)
        epochs.append(record)
        logger.debug(
            "epoch %d: total %.6g r_main %.6g p_tv %.6g kl %.6g lambda %.6g",
            epoch,
            record.breakdown.total,
            record.breakdown.r_main,
            record.breakdown.p_tv,
            record.breakdown.kl_env,
            record.breakdown.lambda_,
        )

    metrics, mean, worst = evaluate(state.predictor, dataset.test, config.loss)
    final_train = evaluate_outer(state, pool, config).breakdown
    logger.info("finished %s: mean %.4f worst %.4f", config.method, mean, worst)

    return RunReport(
        method=config.method,
        metric="mse" if config.loss == "mse" else "accuracy",
        seed=config.seed,
        epochs=epochs,
        test_metrics=metrics,
        mean=mean,
        worst=worst,
        final_train=final_train,
        degenerate_events=events,
        config=config.model_dump(mode="json"),
        notes=list(dataset.provenance),
    )
