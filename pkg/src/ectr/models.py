"""Pydantic models for run configuration and report records."""

from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

METHODS = (
    "erm",
    "irmv1",
    "group_dro",
    "irm_tv_l1",
    "ood_tv_irm_l1",
    "ectr_known",
    "ectr_inferred",
    "minimax_tv_l1",
    "ood_tv_minimax_l1",
)

Method = Literal[
    "erm",
    "irmv1",
    "group_dro",
    "irm_tv_l1",
    "ood_tv_irm_l1",
    "ectr_known",
    "ectr_inferred",
    "minimax_tv_l1",
    "ood_tv_minimax_l1",
]
LossKind = Literal["mse", "binary_cross_entropy_with_logit", "multiclass_cross_entropy"]
ColumnRole = Literal["feature", "label", "env_id", "aux", "ignore"]


def _split_commas(value: Any) -> Any:
    """Accept comma-separated strings for list fields of the flat config format."""
    if isinstance(value, str):
        parts = [part.strip() for part in value.split(",")]
        return [part for part in parts if part]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SimulationSpec(_Section):
    """Generator settings for the temporal mixed-shift benchmark."""
    n_per_env: int = Field(5000, gt=0)
    p_v: float = Field(0.8, gt=0.5, le=1.0)
    p_s_train: Tuple[float, float] = (0.999, 0.9)
    p_s_test: List[float] = Field(default_factory=lambda: [0.9, 0.7, 0.5, 0.3, 0.1])
    feature_scale: Tuple[float, float] = (1.0, 1.0)
    noise_std: float = Field(0.1, ge=0.0)
    seed: int = Field(0, ge=0)

    @field_validator("p_s_train", "p_s_test", "feature_scale", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_commas(value)

    @field_validator("p_s_train", "p_s_test")
    @classmethod
    def check_probabilities(cls, value):
        if any(not 0.0 <= p <= 1.0 for p in value):
            raise ValueError("spurious agreement probabilities must lie in [0, 1]")
        return value

    @field_validator("p_s_test")
    @classmethod
    def check_nonempty(cls, value):
        if not value:
            raise ValueError("at least one test environment is required")
        return value

    @field_validator("feature_scale")
    @classmethod
    def check_positive_scale(cls, value):
        if any(s <= 0 for s in value):
            raise ValueError("feature scales must be positive")
        return value


class DataSpec(_Section):
    """Where training data comes from and how its columns are read."""
    path: Optional[str] = None
    delimiter: Literal[",", "\t", "tab"] = ","
    columns: Dict[str, ColumnRole] = Field(
        default_factory=lambda: {
            "x_inv": "feature",
            "x_sp": "feature",
            "y": "label",
            "env_id": "env_id",
            "t": "aux",
        }
    )
    test_envs: List[int] = Field(default_factory=list)
    standardize: bool = True

    @field_validator("test_envs", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_commas(value)

    @field_validator("columns", mode="before")
    @classmethod
    def parse_columns(cls, value):
        # "name:role, name:role" in the flat format
        if isinstance(value, str):
            pairs = {}
            for item in _split_commas(value):
                name, _, role = item.partition(":")
                pairs[name.strip()] = role.strip()
            return pairs
        return value

    @property
    def separator(self) -> str:
        return "\t" if self.delimiter in ("\t", "tab") else ","


class TrainConfig(_Section):
    """Hyperparameters of one training run."""
    method: Method = "ectr_known"
    loss: LossKind = "binary_cross_entropy_with_logit"
    beta: float = Field(0.5, ge=0.0)
    gamma: float = Field(1.0, ge=0.0)
    tv_variant: Literal["l1", "l2"] = "l1"
    lambda_fixed: Optional[float] = Field(None, ge=0.0)
    psi_init: float = 0.0
    epochs: int = Field(500, gt=0)
    batch_size: int = Field(500, gt=0)
    lr_phi: float = Field(0.005, gt=0.0)
    lr_theta: float = Field(0.05, ge=0.0)
    lr_psi: float = Field(0.05, ge=0.0)
    lr_eta: float = Field(0.05, ge=0.0)
    optimizer_phi: Literal["sgd", "sgd_momentum", "adam"] = "adam"
    optimizer_adversary: Literal["sgd", "sgd_momentum", "adam"] = "sgd"
    hidden: List[int] = Field(default_factory=lambda: [16])
    activation: Literal["tanh", "relu", "identity"] = "tanh"
    out_dim: int = Field(1, gt=0)
    tail_mode: Literal["score_network", "free_scores"] = "score_network"
    tail_inputs: Literal["features", "features_plus_detached_loss"] = "features"
    tail_hidden: List[int] = Field(default_factory=lambda: [8])
    n_latent_envs: int = Field(2, ge=2)
    infer_hidden: List[int] = Field(default_factory=lambda: [8])
    infer_temperature: float = Field(1.0, gt=0.0)
    k_inner: int = Field(1, ge=1)
    group_dro_step: float = Field(0.01, gt=0.0)
    epsilon: float = Field(1e-8, gt=0.0)
    init_scale: float = Field(0.5, gt=0.0)
    eval_every: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)

    @field_validator("hidden", "tail_hidden", "infer_hidden", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_commas(value)

    @field_validator("hidden", "tail_hidden", "infer_hidden")
    @classmethod
    def check_widths(cls, value):
        if any(w <= 0 for w in value):
            raise ValueError("layer widths must be positive")
        return value


class SweepSpec(_Section):
    """Grid for cmd_sweep; every non-empty list is one axis of the product."""
    beta: List[float] = Field(default_factory=list)
    lr_phi: List[float] = Field(default_factory=list)
    lr_theta: List[float] = Field(default_factory=list)
    lr_psi: List[float] = Field(default_factory=list)
    lr_eta: List[float] = Field(default_factory=list)
    seed: List[int] = Field(default_factory=list)
    max_runs: Optional[int] = Field(None, gt=0)

    @field_validator(
        "beta", "lr_phi", "lr_theta", "lr_psi", "lr_eta", "seed", mode="before"
    )
    @classmethod
    def split_lists(cls, value):
        return _split_commas(value)

    def axes(self) -> Dict[str, List[Any]]:
        """Non-seed axes in declaration order."""
        names = ("beta", "lr_phi", "lr_theta", "lr_psi", "lr_eta")
        return {name: getattr(self, name) for name in names if getattr(self, name)}


class RunConfig(_Section):
    """Everything one CLI invocation needs."""
    simulation: SimulationSpec = Field(default_factory=SimulationSpec)
    data: DataSpec = Field(default_factory=DataSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepSpec = Field(default_factory=SweepSpec)


class OuterLossBreakdown(BaseModel):
    """Decomposition of one outer objective evaluation."""
    r_main: float
    p_tv: float
    kl_env: float
    lambda_: float = Field(alias="lambda")
    total: float
    env_risks: List[float] = Field(default_factory=list)
    env_weights: List[float] = Field(default_factory=list)

    model_config = ConfigDict(populate_by_name=True)

    @classmethod
    def compose(
        cls,
        r_main: float,
        p_tv: float,
        kl_env: float,
        lam: float,
        beta: float,
        **extra: Any,
    ) -> "OuterLossBreakdown":
        """Build a breakdown whose total is r_main + lambda * p_tv - beta * kl_env."""
        total = r_main + lam * p_tv - beta * kl_env
        return cls(r_main=r_main, p_tv=p_tv, kl_env=kl_env, lambda_=lam, total=total, **extra)


class EnvMetric(BaseModel):
    """Metric of one test environment."""
    env: int
    n: int
    metric: float


class EpochRecord(BaseModel):
    """Averaged breakdown of one epoch plus optional test evaluation."""
    epoch: int
    breakdown: OuterLossBreakdown
    test_mean: Optional[float] = None
    test_worst: Optional[float] = None


class DegenerateEvent(BaseModel):
    """An environment whose batch mass fell below the degeneracy threshold."""
    epoch: int
    step: int
    env: int
    mass: float


class RunReport(BaseModel):
    """Complete record of one training run."""
    method: str
    metric: Literal["accuracy", "mse"]
    seed: int
    epochs: List[EpochRecord] = Field(default_factory=list)
    test_metrics: List[EnvMetric] = Field(default_factory=list)
    mean: float
    worst: float
    final_train: Optional[OuterLossBreakdown] = None
    degenerate_events: List[DegenerateEvent] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)


class RunManifest(BaseModel):
    """Provenance accompanying every output directory."""
    command: str
    config: Dict[str, Any]
    rng_algorithm: str
    seed: int
    started_at: str
    finished_at: Optional[str] = None
    artifact_version: str
    outputs: List[str] = Field(default_factory=list)


class SweepRow(BaseModel):
    """One (grid point, seed) result."""
    point: int
    params: Dict[str, float]
    seed: int
    mean: float
    worst: float
    final_kl_env: float
    final_p_tv: float


class SweepAggregate(BaseModel):
    """Mean and standard deviation over seeds at one grid point."""
    point: int
    params: Dict[str, float]
    n_seeds: int
    mean_mean: float
    mean_std: float
    worst_mean: float
    worst_std: float
    final_kl_env_mean: float


class CheckResult(BaseModel):
    """Outcome of one oracle or invariant check."""
    name: str
    passed: bool
    detail: str = ""
    worst_error: Optional[float] = None


class VerifySummary(BaseModel):
    """All check outcomes of one verify invocation."""
    tolerance: float
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @model_validator(mode="after")
    def check_positive_tolerance(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        return self
