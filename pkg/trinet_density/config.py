"""Run configuration shared by the batch CLI and the OpenHEXA pipeline."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

from errors import ConfigError
from preprocess import LAMBDA_PRESETS
from pydantic import Field, ValidationError, field_validator, model_validator
from tri_core import Nonlinearity
from trainer import TrainConfig
from utils import default_run_name

COMMANDS = ("train", "eval", "sample", "check", "grid")
DEFAULT_LAMBDA_PRESET = {"idx": "mnist", "cifar": "cifar"}


def parse_lambda(value: str | float | None) -> float | None:
    """Read ``--lambda``: a preset name (``mnist``, ``cifar``), a number, or ``none``.

    Args:
        value (str | float | None): Raw option value.

    Returns:
        float | None: The squeeze factor, None for no dequantization.

    Raises:
        ConfigError: If the value is neither a preset nor a number in [0, 0.5).
    """
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
        return None
    if isinstance(value, str) and value.strip().lower() in LAMBDA_PRESETS:
        return LAMBDA_PRESETS[value.strip().lower()]
    try:
        lambda_ = float(value)
    except ValueError as exc:
        raise ConfigError(
            f"Invalid lambda {value!r}: use a number or one of {sorted(LAMBDA_PRESETS)}"
        ) from exc
    if not 0.0 <= lambda_ < 0.5:
        raise ConfigError(f"lambda must lie in [0, 0.5), got {lambda_}")
    return lambda_


class RunConfig(TrainConfig):
    """Everything a subcommand needs: data, architecture, preprocessing, training and outputs."""

    command: Literal["train", "eval", "sample", "check", "grid"] = "train"
    data: list[Path] = Field(default_factory=list)
    data_format: Literal["csv", "idx", "cifar"] = "csv"
    header: bool = False
    n_take: int | None = Field(default=None, ge=1)
    validation_frac: float = Field(default=0.1, ge=0, lt=1)
    test_frac: float = Field(default=0.1, ge=0, lt=1)

    block_size: int = Field(default=4, ge=1)
    n_layers: int = Field(default=4, ge=1)
    nonlinearity: Nonlinearity = Nonlinearity.LOG_SYM
    flip: bool = True
    resume: Path | None = None

    lambda_: float | None = None
    dequant_seed: int = 0

    model: Path | None = None
    out: Path | None = None
    eval_split: Literal["train", "validation", "test"] = "test"
    count: int = Field(default=100, ge=0)
    tol: float = Field(default=1e-10, gt=0)
    grid_range: list[float] = Field(default_factory=list)
    resolution: int = Field(default=100, ge=1)
    check_eps: float = Field(default=1e-5, gt=0)
    check_max_coords: int = Field(default=2000, ge=1)
    check_max_dim: int = Field(default=64, ge=1)

    @field_validator("lambda_", mode="before")
    @classmethod
    def _read_lambda(cls, value: str | float | None) -> float | None:
        return parse_lambda(value)

    @model_validator(mode="after")
    def _check_command_inputs(self) -> RunConfig:
        if self.command in ("train", "eval") and not self.data:
            raise ValueError(f"'{self.command}' needs at least one --data file")
        if self.command != "train" and self.model is None:
            raise ValueError(f"'{self.command}' needs --model")
        if self.validation_frac + self.test_frac >= 1:
            raise ValueError("validation and test fractions must leave training rows")
        if self.grid_range and len(self.grid_range) not in (2, 4):
            raise ValueError("--range takes 2 values (1D) or 4 values (2D)")
        return self

    def dequantization_lambda(self) -> float | None:
        """The explicit lambda, or the preset of the data format.

        Returns:
            float | None: Squeeze factor; None for CSV data without ``--lambda``.
        """
        if self.lambda_ is not None or "lambda_" in self.model_fields_set:
            return self.lambda_
        preset = DEFAULT_LAMBDA_PRESET.get(self.data_format)
        return LAMBDA_PRESETS[preset] if preset else None

    def output_dir(self) -> Path:
        """Training output directory.

        Returns:
            Path: ``--out``, or ``runs/<data file stem>``.
        """
        if self.out is not None:
            return self.out
        return Path("runs") / default_run_name(self.data[0])


def build_run_config(**values: object) -> RunConfig:
    """Validate raw values into a :class:`RunConfig`.

    Args:
        **values (object): Field values keyed by :class:`RunConfig` field name.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        ConfigError: If validation fails; the pydantic messages are joined into one line.
    """
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        messages = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}"
            for err in exc.errors()
        )
        raise ConfigError(messages) from exc
