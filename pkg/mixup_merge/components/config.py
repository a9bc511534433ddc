import logging
import tomllib
from pathlib import Path
from typing import TYPE_CHECKING, Any

import tomli_w
from hydromt import hydromt_step
from hydromt.model.components.config import ConfigComponent
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from mixup_merge import DATA_DIR
from mixup_merge.checkpoint import atomic_write
from mixup_merge.errors import MixupMergeError
from mixup_merge.prng import MASK64
from mixup_merge.sampler import DEFAULT_ALPHAS

if TYPE_CHECKING:
    from mixup_merge.workspace import MergeWorkspace

__all__ = ["LabConfig", "TiesPreset", "ToolkitConfig", "ToolkitConfigComponent"]

logger = logging.getLogger(__name__)

DEFAULTS_FILE = DATA_DIR / "defaults.toml"


class TiesPreset(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scaling_term: float = Field(default=..., description="Scaling term of the merged offsets")
    retain_ratio: float = Field(
        default=..., description="Fraction of offsets kept per tensor", gt=0, le=1
    )


class LabConfig(BaseModel):
    """Size and schedule of the desk-scale lab."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_inputs: int = Field(default=4, description="Input dimension of the synthetic tasks", ge=4)
    hidden: tuple[int, int] = Field(
        default=(32, 32), description="Widths of the two hidden layers"
    )
    n_train: int = Field(default=256, description="Training samples per task", ge=8)
    n_test: int = Field(default=256, description="Held-out samples per task", ge=8)
    pretext_steps: int = Field(
        default=500, description="Full-batch steps on the shared pretext objective", ge=1
    )
    task1_steps: int = Field(default=600, description="Fine-tuning steps on task 1", ge=1)
    task2_steps: int = Field(default=300, description="Fine-tuning steps on task 2", ge=1)
    learning_rate: float = Field(default=0.1, description="Gradient descent step size", gt=0)

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, v: tuple[int, int]) -> tuple[int, int]:
        if min(v) < 1:
            raise ValueError("hidden widths must be positive")
        return v


class ToolkitConfig(BaseModel):
    """Defaults of the command line and the lab.

    The packaged ``data/defaults.toml`` holds the shipped values; a user file
    overrides individual keys.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(default=0, description="Default 64-bit seed", ge=0, le=MASK64)
    decimals: int = Field(default=6, description="Rounding of scores and losses in CSV tables", ge=0)
    scan_grid: int = Field(default=11, description="Number of points of a path scan", ge=2)
    alphas: tuple[float, ...] = Field(
        default=DEFAULT_ALPHAS, description="Beta shapes, one coefficient per value", min_length=1
    )
    dare_drop_rate: float = Field(
        default=0.2, description="Drop rate used when DARE is switched on", ge=0, lt=1
    )
    ties_presets: dict[str, TiesPreset] = Field(
        default_factory=dict, description="Named TIES hyperparameters"
    )
    lab: LabConfig = Field(default_factory=LabConfig, description="Lab settings")

    @field_validator("alphas")
    @classmethod
    def _positive_alphas(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if any(a <= 0 for a in v):
            raise ValueError("every alpha must be positive")
        return v

    def to_toml(self) -> str:
        return tomli_w.dumps(self.model_dump(mode="json"))

    @staticmethod
    def from_file(path: Path | str | None = None) -> "ToolkitConfig":
        """Read the packaged defaults, then apply the overrides in ``path``."""
        with open(DEFAULTS_FILE, "rb") as f:
            data = tomllib.load(f)
        if path is not None:
            with open(path, "rb") as f:
                data = _deep_update(data, tomllib.load(f))
        return ToolkitConfig.create(data)

    @staticmethod
    def create(data: dict) -> "ToolkitConfig":
        """Validate a config dict and report invalid and unknown keys in one message."""
        try:
            return ToolkitConfig(**data)
        except ValidationError as e:
            unknown: list[str] = []
            invalid: list[str] = []
            for err in e.errors():
                loc = err.get("loc", ())
                if not loc:
                    continue
                key = ".".join(str(p) for p in loc)
                if err.get("type") == "extra_forbidden":
                    unknown.append(key)
                    continue
                top = loc[0]
                desc = (
                    ToolkitConfig.model_fields[top].description
                    if top in ToolkitConfig.model_fields
                    else None
                )
                value = _lookup(data, loc)
                invalid.append(f"{key}: {value=}, msg={err.get('msg', '')!r}, {desc=}")

            msg_lines = []
            if invalid:
                msg_lines.append("Invalid/missing parameters:\n  " + "\n  ".join(invalid))
            if unknown:
                msg_lines.append("Unknown parameters:\n  " + "\n  ".join(unknown))
                msg_lines.append("Please remove these parameters and retry.")
            if not msg_lines:
                raise
            raise MixupMergeError("\n\n".join(msg_lines)) from e


def _deep_update(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def _lookup(data: Any, loc: tuple) -> Any:
    for part in loc:
        try:
            data = data[part]
        except (KeyError, IndexError, TypeError):
            return None
    return data


class ToolkitConfigComponent(ConfigComponent):
    """The effective configuration, written as a TOML snapshot."""

    model: "MergeWorkspace"

    def __init__(self, model: "MergeWorkspace", filename: str = "config.toml"):
        super().__init__(
            model, filename=filename, default_template_filename=DEFAULTS_FILE.as_posix()
        )
        self._settings: ToolkitConfig | None = None

    @property
    def settings(self) -> ToolkitConfig:
        """Validated view of the config data, the packaged defaults when empty."""
        if self._settings is None:
            if self.data:
                self._settings = ToolkitConfig.create(self.data)
            else:
                self._settings = ToolkitConfig.from_file()
        return self._settings

    def use(self, config: ToolkitConfig) -> None:
        """Replace the config data by ``config``."""
        for key, value in config.model_dump(mode="json").items():
            self.set(key, value)
        self._settings = config

    @hydromt_step
    def write(self, file_path: str | None = None) -> None:
        """Write the configuration snapshot."""
        self.root._assert_write_mode()
        if not self.data:
            logger.info(
                f"{self.model.name}.{self.name_in_model}: No config data found, skip writing."
            )
            return
        path = Path(self.root.path, file_path or self._filename)
        logger.info(
            f"{self.model.name}.{self.name_in_model}: Writing configuration snapshot to {path}."
        )
        config = ToolkitConfig.create(self.data)
        atomic_write(path, config.to_toml())
