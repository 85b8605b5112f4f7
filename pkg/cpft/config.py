try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .core import UnknownConfigKey


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="CPFT_", env_file=".env", env_file_encoding="utf-8", extra="ignore")

    # Where per-run directories are created (CPFT_OUTPUT_DIR)
    output_dir: Path = Path("runs")

    # Run ledger
    database_url: str = "sqlite:///./cpft_runs.db"
    record_runs: bool = True


settings = Settings()


LossConfig = Literal["ce", "cps", "ce_cps", "cps_cpd", "ce_cps_cpd"]

# (uses CE, uses CPS, uses CPD) per ablation configuration
LOSS_CONFIGS: Dict[str, Tuple[bool, bool, bool]] = {
    "ce": (True, False, False),
    "cps": (False, True, False),
    "ce_cps": (True, True, False),
    "cps_cpd": (False, True, True),
    "ce_cps_cpd": (True, True, True),
}


class TrainConfig(BaseModel):
    """Every knob of the two-stage pipeline. Defaults follow the best reported settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # Conformal fine-tuning objective
    alpha: float = Field(0.3, gt=0.0, lt=1.0)
    beta: float = Field(10.0, ge=0.0)
    gamma: float = Field(1.0, ge=0.0)
    top_k_closest: int = Field(10, ge=1)
    tau: float = Field(1e-2, gt=0.0)
    tau_final: Optional[float] = Field(None, gt=0.0)
    loss_config: LossConfig = "ce_cps_cpd"
    qhat_mode: Literal["batch", "epoch"] = "batch"
    freeze_truth_embedding: bool = False
    use_validation_in_finetune: bool = True

    # Optimisation
    learning_rate: float = Field(5e-4, gt=0.0)
    pretrain_learning_rate: float = Field(5e-3, gt=0.0)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(20, ge=1)
    pretrain_epochs: int = Field(5, ge=1)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    early_stopping_patience: int = Field(5, ge=0)  # 0 disables
    seed: int = 0

    # Model
    encoder: Literal["gru", "mean"] = "gru"
    d: int = Field(32, ge=1)
    init_scale: float = Field(0.1, gt=0.0)
    max_seq_len: int = Field(50, ge=1)
    ce_positions: Literal["final", "all"] = "final"

    # Evaluation
    ks: Tuple[int, ...] = (10, 50)
    mask_history: bool = False

    @field_validator("ks", mode="before")
    @classmethod
    def _parse_ks(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(int(part) for part in value.split(",") if part.strip())
        return value

    @model_validator(mode="after")
    def _check_ks(self) -> "TrainConfig":
        if not self.ks or any(k < 1 for k in self.ks):
            raise ValueError("ks must be a non-empty list of positive integers")
        return self

    def loss_weights(self) -> Tuple[float, float, float]:
        """(ce_weight, beta, gamma) for the configured ablation."""
        use_ce, use_cps, use_cpd = LOSS_CONFIGS[self.loss_config]
        return (
            1.0 if use_ce else 0.0,
            self.beta if use_cps else 0.0,
            self.gamma if use_cpd else 0.0,
        )

    def tau_at(self, epoch: int) -> float:
        """Relaxation temperature for a 0-based fine-tuning epoch."""
        if self.tau_final is None or self.epochs <= 1:
            return self.tau
        decay = (self.tau_final / self.tau) ** (1.0 / (self.epochs - 1))
        return self.tau * decay ** epoch


CONFIG_KEYS = frozenset(TrainConfig.model_fields)


def load_config(path: Optional[Path]) -> TrainConfig:
    """Read a flat TOML key-value document; missing keys fall back to defaults."""
    if path is None:
        return TrainConfig()
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise UnknownConfigKey(", ".join(sorted(unknown)))
    return TrainConfig.model_validate(data)


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise UnknownConfigKey(f"override '{pair}' is not key=value")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise UnknownConfigKey(key)
        out[key] = value.strip()
    return out


def apply_overrides(config: TrainConfig, pairs: Iterable[str]) -> TrainConfig:
    """Overrides beat the file, the file beats defaults. Values are coerced by pydantic."""
    overrides = parse_overrides(pairs)
    if not overrides:
        return config
    merged = config.model_dump()
    merged.update(overrides)
    return TrainConfig.model_validate(merged)
