"""Subcommands: train, eval, sample, check and grid.

Each command takes a validated :class:`config.RunConfig` and returns a :class:`CommandReport`
whose values the front ends print as ``key=value`` lines.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from config import RunConfig
from errors import CheckFailedError, ConfigError, TriNetError
from flow_io import Dataset, SplitRanges, load_dataset, write_matrix_csv
from model_file import ModelFile, header_extra, load_model_file, save_model_file
from openhexa.sdk import current_run
from preprocess import (
    Normalizer,
    absorb_normalizer,
    bpd,
    dequantize_dataset,
    fit_normalizer,
    logit_to_pixels,
    shift_batch,
)
from pydantic import BaseModel
from tri_core import FlowModel, flow_forward, init_flow, log_density, unit_forward
from tri_grad import finite_diff_check, numerical_logdet, relative_error
from tri_invert import invert_flow, sample
from trainer import evaluate, fit
from utils import sha256_of_file

GRADIENT_THRESHOLD = 1e-4
LOGDET_THRESHOLD = 1e-4
ROUND_TRIP_THRESHOLD = 1e-6
CHECK_POINTS = 3
DEFAULT_GRID_HALF_WIDTH = 4.0
GRID_CHUNK = 65536


@dataclass
class CommandReport:
    """Ordered report values."""

    values: dict[str, object] = field(default_factory=dict)


class RunMetadata(BaseModel):
    """Contents of ``run.json`` written next to a trained model."""

    seed: int
    split: SplitRanges
    config: dict
    best_epoch: int
    best_val_nll: float
    test_nll: float | None
    test_std_err: float | None
    normalization_offset: float
    lambda_: float | None
    model_sha256: str


def _prepare_data(cfg: RunConfig, lambda_: float | None) -> Dataset:
    dataset = load_dataset(
        cfg.data, cfg.data_format, cfg.header, cfg.n_take, cfg.validation_frac, cfg.test_frac
    )
    if lambda_ is not None:
        dataset = dequantize_dataset(dataset, lambda_, cfg.dequant_seed)
    return dataset


def _initial_model(cfg: RunConfig, n_dim: int) -> FlowModel:
    if cfg.resume is None:
        return init_flow(
            n_dim, cfg.block_size, cfg.n_layers, cfg.nonlinearity, cfg.flip, seed=cfg.seed
        )
    model = load_model_file(cfg.resume).model
    expected = (n_dim, cfg.block_size, cfg.n_layers, cfg.nonlinearity)
    found = (model.n_dim, model.block_size, model.n_layers, model.nonlinearity)
    if found != expected:
        raise ConfigError(
            f"Resumed model has (N, B, L, nonlinearity) = {found}, configuration needs {expected}"
        )
    current_run.log_info(f"Resuming from {cfg.resume}")
    return model


def _shift_augmentation(
    norm: Normalizer, dataset: Dataset, max_frac: float
) -> Callable[[np.ndarray, np.random.Generator], np.ndarray]:
    if dataset.image_geom is None:
        raise ConfigError("--augment-shift needs image data (idx or cifar)")
    geom = dataset.image_geom

    def transform(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return norm.transform(shift_batch(norm.inverse_transform(batch), geom, max_frac, rng))

    return transform


def _split_metrics(model: FlowModel, dataset: Dataset, name: str) -> dict[str, object]:
    result = evaluate(model, dataset.split_samples(name))
    values: dict[str, object] = {
        f"{name}_nll": result.mean_nll,
        f"{name}_std_err": result.std_err,
    }
    if result.degenerate:
        values[f"{name}_std_err_degenerate"] = True
    correction = dataset.split_correction(name)
    if correction is not None:
        values[f"{name}_bpd"] = bpd(result.mean_nll, float(correction.mean()), dataset.n_dim)
    return values


def cmd_train(cfg: RunConfig) -> CommandReport:
    """Load, preprocess, normalize, fit, absorb the normalizer and save.

    Writes ``model.trin``, ``history.csv`` and ``run.json`` into the output directory.

    Args:
        cfg (RunConfig): Validated ``train`` configuration.

    Returns:
        CommandReport: Best validation and test metrics with the output paths.

    Raises:
        ConfigError: If the training split has fewer than 2 samples.
    """
    lambda_ = cfg.dequantization_lambda()
    dataset = _prepare_data(cfg, lambda_)
    model = _initial_model(cfg, dataset.n_dim)

    if dataset.split.size("train") < 2:
        raise ConfigError(
            f"Training needs at least 2 samples, the split leaves {dataset.split.size('train')}"
        )
    if model.norm_absorbed:
        norm = Normalizer.identity(dataset.n_dim)
    else:
        norm = fit_normalizer(dataset.split_samples("train"))
    normalized = dataset.with_samples(norm.transform(dataset.samples))
    transform = None
    if cfg.augment_shift > 0:
        transform = _shift_augmentation(norm, dataset, cfg.augment_shift)

    best, history = fit(model, normalized, cfg, input_transform=transform)
    final = best if best.norm_absorbed else absorb_normalizer(best, norm)
    history = history.with_offset(-norm.logdet())

    out_dir = cfg.output_dir()
    model_path = save_model_file(
        out_dir / "model.trin",
        ModelFile(model=final, seed=cfg.seed, extra=header_extra(lambda_, dataset.image_geom)),
    )
    history_path = history.write_csv(out_dir / "history.csv")

    values: dict[str, object] = {
        "best_epoch": history.best_epoch,
        "best_val_nll": history.best_val_nll,
    }
    test: dict[str, object] = {}
    if dataset.split.size("test"):
        test = _split_metrics(final, dataset, "test")
        values.update(test)

    metadata = RunMetadata(
        seed=cfg.seed,
        split=dataset.split,
        config=cfg.model_dump(mode="json"),
        best_epoch=history.best_epoch,
        best_val_nll=history.best_val_nll,
        test_nll=test.get("test_nll"),
        test_std_err=test.get("test_std_err"),
        normalization_offset=-norm.logdet(),
        lambda_=lambda_,
        model_sha256=sha256_of_file(model_path),
    )
    run_path = out_dir / "run.json"
    run_path.write_text(metadata.model_dump_json(indent=2) + "\n", encoding="utf-8")

    for path in (model_path, history_path, run_path):
        current_run.add_file_output(str(path))
    values.update({"model": str(model_path), "history": str(history_path), "run": str(run_path)})
    return CommandReport(values)


def _eval_lambda(cfg: RunConfig, model_file: ModelFile) -> float | None:
    if "lambda_" in cfg.model_fields_set:
        return cfg.lambda_
    return model_file.lambda_ if model_file.preprocess == "logit" else None


def cmd_eval(cfg: RunConfig) -> CommandReport:
    """Mean NLL (and bpd for dequantized images) on the train split and the requested split.

    Args:
        cfg (RunConfig): Validated ``eval`` configuration.

    Returns:
        CommandReport: ``<split>_nll``, ``<split>_std_err`` and ``<split>_bpd`` values.

    Raises:
        ConfigError: If the data dimension differs from the model's.
    """
    model_file = load_model_file(cfg.model)
    dataset = _prepare_data(cfg, _eval_lambda(cfg, model_file))
    if dataset.n_dim != model_file.model.n_dim:
        raise ConfigError(
            f"Data has {dataset.n_dim} columns, model expects {model_file.model.n_dim}"
        )

    values: dict[str, object] = {}
    for name in dict.fromkeys(("train", cfg.eval_split)):
        if dataset.split.size(name):
            values.update(_split_metrics(model_file.model, dataset, name))
    return CommandReport(values)


def cmd_sample(cfg: RunConfig) -> CommandReport:
    """Draw samples and write them as CSV, plus a pixel-space copy for logit-space models.

    Args:
        cfg (RunConfig): Validated ``sample`` configuration.

    Returns:
        CommandReport: Sample count, rejections and output paths.
    """
    model_file = load_model_file(cfg.model)
    samples, rejected = sample(model_file.model, cfg.count, cfg.seed, tol=cfg.tol)
    out = cfg.out or Path("samples.csv")
    paths = [write_matrix_csv(out, samples)]
    if model_file.preprocess == "logit" and model_file.lambda_ is not None:
        pixels = logit_to_pixels(samples, model_file.lambda_)
        paths.append(write_matrix_csv(out.with_name(f"{out.stem}_pixels.csv"), pixels))

    for path in paths:
        current_run.add_file_output(str(path))
    values: dict[str, object] = {"samples": cfg.count, "rejected": rejected, "out": str(paths[0])}
    if len(paths) > 1:
        values["pixels_out"] = str(paths[1])
    return CommandReport(values)


def _diagonal_check(model: FlowModel, x: np.ndarray, coords: np.ndarray, eps: float) -> float:
    """Worst relative error of per-layer Jacobian diagonals against central differences.

    Returns:
        float: Largest relative error over the layers and coordinates.
    """
    worst, h = 0.0, x
    for unit, flipped in zip(model.layers, model.flip_after, strict=True):
        y, log_diag, _ = unit_forward(unit, h)
        steps = np.zeros((coords.size, h.size))
        steps[np.arange(coords.size), coords] = eps
        plus, _, _ = unit_forward(unit, h + steps)
        minus, _, _ = unit_forward(unit, h - steps)
        rows = np.arange(coords.size)
        numeric = (plus[rows, coords] - minus[rows, coords]) / (2 * eps)
        for value, exact in zip(numeric, np.exp(log_diag[coords]), strict=True):
            worst = max(worst, relative_error(float(value), float(exact)))
        h = y[::-1].copy() if flipped else y
    return worst


def cmd_check(cfg: RunConfig) -> CommandReport:
    """Gradient, log-determinant and round-trip inversion checks on a saved model.

    Large models are checked on a deterministic subset of parameters or coordinates and the
    corresponding check is reported as partial.

    Args:
        cfg (RunConfig): Validated ``check`` configuration.

    Returns:
        CommandReport: Measured error, threshold and verdict per check.

    Raises:
        CheckFailedError: If any check exceeds its threshold; it carries the full report.
    """
    model_file = load_model_file(cfg.model)
    model = model_file.model
    rng = np.random.default_rng(cfg.seed)
    points = rng.standard_normal((CHECK_POINTS, model.n_dim))
    values: dict[str, object] = {"model_sha256": sha256_of_file(cfg.model)}
    failures = []

    def record(name: str, error: float, threshold: float, partial: bool) -> None:
        passed = bool(error < threshold)
        values.update({
            f"{name}_error": error,
            f"{name}_threshold": threshold,
            f"{name}_partial": partial,
            f"{name}_passed": passed,
        })
        if not passed:
            failures.append(f"{name}_error={error:.3e}")

    partial = model.parameter_count() > cfg.check_max_coords
    gradient_error = max(
        finite_diff_check(model, x, cfg.check_eps, max_coords=cfg.check_max_coords) for x in points
    )
    record("gradient", gradient_error, GRADIENT_THRESHOLD, partial)

    if model.n_dim <= cfg.check_max_dim:
        logdet_error = 0.0
        for x in points:
            _, logdet, _ = flow_forward(model, x)
            numeric = numerical_logdet(model, x, cfg.check_eps)
            logdet_error = max(logdet_error, relative_error(numeric, logdet))
        record("logdet", logdet_error, LOGDET_THRESHOLD, False)
    else:
        coords = np.sort(rng.choice(model.n_dim, size=cfg.check_max_dim, replace=False))
        logdet_error = max(_diagonal_check(model, x, coords, cfg.check_eps) for x in points)
        record("logdet", logdet_error, LOGDET_THRESHOLD, True)

    y, _, _ = flow_forward(model, points)
    recovered = invert_flow(model, y, tol=cfg.tol)
    record("round_trip", float(np.max(np.abs(recovered - points))), ROUND_TRIP_THRESHOLD, False)

    if failures:
        raise CheckFailedError(", ".join(failures), values)
    current_run.log_info("All model checks passed")
    return CommandReport(values)


def _grid_axes(cfg: RunConfig, n_dim: int) -> tuple[list[np.ndarray], float]:
    bounds = cfg.grid_range or [-DEFAULT_GRID_HALF_WIDTH, DEFAULT_GRID_HALF_WIDTH]
    if len(bounds) == 2:
        # one range for every axis
        bounds = list(bounds) * n_dim
    if len(bounds) != 2 * n_dim:
        raise ConfigError(f"A {n_dim}D grid needs {2 * n_dim} range values, got {len(bounds)}")
    axes, cell = [], 1.0
    for lo, hi in zip(bounds[::2], bounds[1::2], strict=True):
        if not hi > lo:
            raise ConfigError(f"Empty grid range [{lo}, {hi}]")
        step = (hi - lo) / cfg.resolution
        axes.append(lo + (np.arange(cfg.resolution) + 0.5) * step)
        cell *= step
    return axes, cell


def cmd_grid(cfg: RunConfig) -> CommandReport:
    """Log-density on the cell centres of a regular lattice (1D or 2D models).

    Args:
        cfg (RunConfig): Validated ``grid`` configuration.

    Returns:
        CommandReport: Row count, the Riemann-sum mass of the grid and the output path.

    Raises:
        ConfigError: If the model has more than two dimensions.
    """
    model = load_model_file(cfg.model).model
    if model.n_dim > 2:
        raise ConfigError(
            f"Density grids need a 1D or 2D model, got N={model.n_dim}; evaluate marginal "
            "slices of the data instead"
        )
    axes, cell = _grid_axes(cfg, model.n_dim)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.reshape(-1) for m in mesh])
    log_p = np.concatenate([
        np.atleast_1d(log_density(model, points[start : start + GRID_CHUNK]))
        for start in range(0, points.shape[0], GRID_CHUNK)
    ])

    columns = ["x", "y"][: model.n_dim] + ["log_density"]
    out = cfg.out or Path("grid.csv")
    path = write_matrix_csv(out, np.column_stack([points, log_p]), columns)
    current_run.add_file_output(str(path))
    mass = float(np.exp(log_p).sum() * cell)
    return CommandReport({"rows": points.shape[0], "mass": mass, "out": str(path)})


COMMAND_HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "check": cmd_check,
    "grid": cmd_grid,
}


def run_command(cfg: RunConfig) -> CommandReport:
    """Dispatch ``cfg.command``, logging failures before re-raising them.

    Args:
        cfg (RunConfig): Validated configuration naming the command.

    Returns:
        CommandReport: Report of the command.

    Raises:
        TriNetError: Any categorized failure of the command.
    """
    current_run.log_info(f"Running '{cfg.command}'")
    try:
        return COMMAND_HANDLERS[cfg.command](cfg)
    except TriNetError as exc:
        current_run.log_error(f"'{cfg.command}' failed ({exc.category}): {exc}")
        raise
