import hashlib
import json
import os
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveInt, ValidationError, field_validator

from utils.errors import ConfigError

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
PRESET_DIR = os.path.join(REPO_ROOT, "configs")

ABLATIONS = ("era", "experts", "intent_twice", "emu")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticConfig(_Section):
    n_dialogues: PositiveInt = 500
    n_emotions: int = Field(4, ge=1, le=32)
    n_intents: int = Field(4, ge=1, le=9)
    emotion_noise: float = Field(0.0, ge=0.0, le=1.0)


class DataConfig(_Section):
    max_context_len: int = Field(128, ge=2)
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    vocab_min_count: PositiveInt = 1
    synthetic: SyntheticConfig = SyntheticConfig()

    @field_validator("split")
    @classmethod
    def _fractions(cls, value):
        if any(f < 0 for f in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split fractions must be nonnegative and sum to 1")
        return value


class ModelConfig(_Section):
    d_model: PositiveInt = 64
    n_layers: PositiveInt = 2
    n_heads: PositiveInt = 2
    ff_mult: PositiveInt = 4
    dtype: Literal["float64", "float32"] = "float64"
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    max_response_len: PositiveInt = 32
    ablate: List[Literal["era", "experts", "intent_twice", "emu"]] = []

    @field_validator("n_heads")
    @classmethod
    def _divides(cls, value, info):
        d_model = info.data.get("d_model")
        if d_model is not None and d_model % value:
            raise ValueError(f"n_heads={value} must divide d_model={d_model}")
        return value


class TrainConfig(_Section):
    delta: NonNegativeFloat = 1.0
    zeta: NonNegativeFloat = 1.0
    eta: NonNegativeFloat = 1.0
    era_weight: NonNegativeFloat = 1.0
    batch_size: PositiveInt = 32
    warmup_steps: PositiveInt = 6000
    lr_decay: float = Field(0.01, gt=0.0, le=1.0)
    max_iters: int = Field(3000, ge=0)
    patience: PositiveInt = 5
    eval_every: PositiveInt = 200
    seed: int = 0
    adam_betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = Field(1e-9, gt=0.0)
    snapshot_every: PositiveInt = 50
    ratio_clip: Tuple[float, float] = (0.1, 10.0)
    temperature: float = Field(0.5, gt=0.0)

    @field_validator("ratio_clip")
    @classmethod
    def _clip_range(cls, value):
        if not 0 < value[0] <= 1.0 <= value[1]:
            raise ValueError("ratio_clip must satisfy 0 < low <= 1 <= high")
        return value


class DiffusionConfig(_Section):
    T: PositiveInt = 1000
    beta_start: float = Field(1e-5, ge=1e-5, le=5e-2)
    beta_end: float = Field(5e-2, ge=1e-5, le=5e-2)
    variance_form: Literal["product", "sum"] = "product"
    emu_steps: int = Field(5, ge=0)
    hidden: PositiveInt = 128
    time_dim: PositiveInt = 16


class IntentConfig(_Section):
    alpha: NonNegativeFloat = 1.0
    top_k: Literal[3] = 3


class EvalConfig(_Section):
    decode_mode: Literal["greedy", "topk"] = "greedy"
    top_k: PositiveInt = 5
    seed: int = 0


class RunConfig(_Section):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    intent: IntentConfig = IntentConfig()
    eval: EvalConfig = EvalConfig()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def ablated(self, component: str) -> bool:
        return component in self.model.ablate


def _field_path(error: ValidationError) -> str:
    first = error.errors()[0]
    path = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"{path}: {first['msg']}"


def parse_run_config(document: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid config at {_field_path(e)}") from e


def read_run_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return parse_run_config(document)


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


class Config:
    def __init__(self):
        load_dotenv()  # Load environment variables from .env file

        # Run settings
        self.CONFIG_PATH = os.getenv("REFLECT_CONFIG", os.path.join(PRESET_DIR, "desk.json"))
        self.LOG_LEVEL = os.getenv("REFLECT_LOG_LEVEL", "INFO").upper()
        self.DTYPE = os.getenv("REFLECT_DTYPE")
        seed = os.getenv("REFLECT_SEED")
        self.SEED = int(seed) if seed not in (None, "") else None
        self.STRICT = _env_bool("REFLECT_STRICT", True)

    def __repr__(self):
        return (f"Config("
                f"CONFIG_PATH={self.CONFIG_PATH}, "
                f"LOG_LEVEL={self.LOG_LEVEL}, "
                f"DTYPE={self.DTYPE}, "
                f"SEED={self.SEED}, "
                f"STRICT={self.STRICT})")

    def load_run_config(self, path: Optional[str] = None) -> RunConfig:
        """Validated RunConfig from `path` (or the configured preset) with environment overrides applied."""
        config = read_run_config(path or self.CONFIG_PATH)
        document = config.model_dump(mode="json")
        if self.DTYPE:
            document["model"]["dtype"] = self.DTYPE
        if self.SEED is not None:
            document["train"]["seed"] = self.SEED
        return parse_run_config(document)
