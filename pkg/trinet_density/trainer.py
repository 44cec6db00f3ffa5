"""Maximum-likelihood training with Adam, a plateau learning-rate schedule and L1 penalties."""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import polars as pl
from errors import ConfigError, DivergenceError
from flow_io import Dataset
from openhexa.sdk import current_run
from pydantic import BaseModel, Field, model_validator
from scipy.optimize import nnls
from tri_core import FlowModel, Nonlinearity, TriUnit, flow_forward, nll, nonlinearity_eval, pack
from tri_grad import GradientSet, backward, batch_nll_gradient, l1_subgradient

HISTORY_COLUMNS = ["epoch", "train_nll", "val_nll", "lr", "seconds"]
LSQ_SLOPES = (0.5, 1.0, 2.0, 4.0)
LSQ_MIN_WEIGHT = 1e-12


class TrainConfig(BaseModel):
    """Optimizer, schedule and stopping settings."""

    lr0: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=64, ge=1)
    l1_eta: float = Field(default=0.0, ge=0)
    patience_epochs: int = Field(default=10, ge=1)
    lr_decay: float = Field(default=0.1, gt=0, lt=1)
    min_lr: float = Field(default=1e-7, gt=0)
    max_epochs: int = Field(default=100, ge=1)
    seed: int = 0
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    deterministic_reduction: bool = True
    workers: int = Field(default=1, ge=1)
    augment_shift: float = Field(default=0.0, ge=0, lt=0.5)
    max_divergences: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _check_schedule(self) -> TrainConfig:
        if not self.lr0 > self.min_lr:
            raise ValueError(f"lr0 ({self.lr0}) must be greater than min_lr ({self.min_lr})")
        return self


@dataclass
class AdamState:
    """First and second moments per raw parameter array, and the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, model: FlowModel) -> AdamState:
        """Fresh state for the parameters of ``model``.

        Returns:
            AdamState: Zero moments, step 0.
        """
        params = model.parameters()
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    state: AdamState,
    params: list[np.ndarray],
    grads: GradientSet,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One bias-corrected Adam update; ``state`` is advanced in place.

    Args:
        state (AdamState): Moments, advanced in place.
        params (list[np.ndarray]): Raw parameter arrays.
        grads (GradientSet): Gradients matching ``params``.
        lr (float): Step size.
        beta1 (float): First-moment decay.
        beta2 (float): Second-moment decay.
        eps (float): Denominator floor.

    Returns:
        list[np.ndarray]: Updated parameter arrays (new arrays, inputs untouched).

    Raises:
        DivergenceError: If the update is not finite.
    """
    state.t += 1
    bias1 = 1.0 - beta1**state.t
    bias2 = 1.0 - beta2**state.t
    updated = []
    for idx, (param, grad) in enumerate(zip(params, grads.arrays(), strict=True)):
        state.m[idx] = beta1 * state.m[idx] + (1.0 - beta1) * grad
        state.v[idx] = beta2 * state.v[idx] + (1.0 - beta2) * (grad * grad)
        step = lr * (state.m[idx] / bias1) / (np.sqrt(state.v[idx] / bias2) + eps)
        updated.append(param - step)
    if not all(np.all(np.isfinite(p)) for p in updated):
        raise DivergenceError("Adam produced a non-finite parameter update")
    return updated


@dataclass(frozen=True)
class EpochRecord:
    """One row of the training history."""

    epoch: int
    train_nll: float
    val_nll: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    """Per-epoch metrics and the best validation checkpoint."""

    records: list[EpochRecord] = field(default_factory=list)
    best_val_nll: float = float("inf")
    best_epoch: int = 0

    def append(self, record: EpochRecord) -> None:
        """Add an epoch; epoch indices must increase."""
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("Epoch index must increase")
        self.records.append(record)

    def to_frame(self) -> pl.DataFrame:
        """History as a table.

        Returns:
            pl.DataFrame: One row per recorded epoch.
        """
        schema = {name: pl.Float64 for name in HISTORY_COLUMNS} | {"epoch": pl.Int64}
        return pl.DataFrame(
            [(r.epoch, r.train_nll, r.val_nll, r.lr, r.seconds) for r in self.records],
            schema=schema,
            orient="row",
        )

    def write_csv(self, path: Path) -> Path:
        """Write the history with columns ``epoch,train_nll,val_nll,lr,seconds``.

        Args:
            path (Path): Destination CSV.

        Returns:
            Path: The written file.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().write_csv(path)
        return path

    def with_offset(self, offset: float) -> TrainHistory:
        """Shift every recorded NLL by ``offset``, for instance a normalizer's ``-logdet``.

        Args:
            offset (float): Nats added to each NLL.

        Returns:
            TrainHistory: Shifted copy.
        """
        return TrainHistory(
            records=[
                replace(r, train_nll=r.train_nll + offset, val_nll=r.val_nll + offset)
                for r in self.records
            ],
            best_val_nll=self.best_val_nll + offset,
            best_epoch=self.best_epoch,
        )


@dataclass(frozen=True)
class EvalResult:
    """Mean per-sample NLL (nats) and its standard error.

    ``degenerate`` is set for a single sample, whose standard error is reported as 0.
    """

    mean_nll: float
    std_err: float
    count: int
    degenerate: bool = False


def evaluate(model: FlowModel, samples: np.ndarray, chunk_size: int = 1024) -> EvalResult:
    """Stream a split through the model in chunks, merging chunk means and variances.

    Args:
        model (FlowModel): Model to score.
        samples (np.ndarray): Split rows.
        chunk_size (int): Rows per forward pass.

    Returns:
        EvalResult: Mean NLL and standard error of the mean.

    Raises:
        ValueError: If the split is empty.
    """
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise ValueError("Cannot evaluate an empty split")
    count, mean, m2 = 0, 0.0, 0.0
    for start in range(0, samples.shape[0], chunk_size):
        y, logdet, _ = flow_forward(model, samples[start : start + chunk_size])
        values = np.asarray(nll(y, logdet))
        n_chunk = values.shape[0]
        chunk_mean = float(values.mean())
        delta = chunk_mean - mean
        total = count + n_chunk
        mean += delta * n_chunk / total
        m2 += float(np.sum((values - chunk_mean) ** 2)) + delta * delta * count * n_chunk / total
        count = total
    if count == 1:
        return EvalResult(mean_nll=mean, std_err=0.0, count=1, degenerate=True)
    std_err = float(np.sqrt(m2 / (count - 1) / count))
    return EvalResult(mean_nll=mean, std_err=std_err, count=count)


def _train_epoch(
    model: FlowModel,
    state: AdamState,
    train: np.ndarray,
    lr: float,
    cfg: TrainConfig,
    rng: np.random.Generator,
    input_transform: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None,
) -> FlowModel:
    order = rng.permutation(train.shape[0])
    for start in range(0, train.shape[0], cfg.batch_size):
        batch = train[order[start : start + cfg.batch_size]]
        if input_transform is not None:
            batch = input_transform(batch, rng)
        loss, grads = batch_nll_gradient(
            model, batch, workers=cfg.workers, deterministic=cfg.deterministic_reduction
        )
        if cfg.l1_eta > 0:
            penalty, l1_grads = l1_subgradient(model, cfg.l1_eta)
            loss += penalty
            grads = grads + l1_grads
        if not np.isfinite(loss):
            raise DivergenceError(f"Non-finite training loss {loss}")
        params = adam_step(
            state, model.parameters(), grads, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        )
        model = model.with_parameters(params)
    return model


def fit(
    model: FlowModel,
    data: Dataset,
    cfg: TrainConfig,
    input_transform: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
) -> tuple[FlowModel, TrainHistory]:
    """Minimize the mean NLL (plus the L1 penalty) over shuffled mini-batches.

    After ``patience_epochs`` epochs without a validation improvement the best checkpoint is
    restored and the learning rate decays; training stops once it falls below ``min_lr`` or
    after ``max_epochs``. A diverging epoch restores the checkpoint and decays the learning
    rate as well; ``max_divergences`` consecutive ones abort the fit. Adam moments are reset
    whenever the checkpoint is restored.

    Args:
        model (FlowModel): Starting model.
        data (Dataset): Dataset whose train and validation splits are used as given.
        cfg (TrainConfig): Training settings.
        input_transform (Callable | None): Per-batch augmentation ``(batch, rng) -> batch``.

    Returns:
        tuple[FlowModel, TrainHistory]: ``(best_model, history)``.

    Raises:
        ConfigError: If the train or validation split is empty.
        DivergenceError: After too many consecutive divergences.
    """
    train = data.split_samples("train")
    val = data.split_samples("validation")
    if train.shape[0] == 0 or val.shape[0] == 0:
        raise ConfigError("Training needs non-empty train and validation splits")

    rng = np.random.default_rng(cfg.seed)
    lr = cfg.lr0
    state = AdamState.zeros(model)
    history = TrainHistory()
    best_model, current = model, model
    stale, divergences = 0, 0
    current_run.log_info(
        f"Training {model.parameter_count()} parameters on {train.shape[0]} samples "
        f"(validation {val.shape[0]}), lr={lr:g}, batch={cfg.batch_size}"
    )

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        try:
            current = _train_epoch(current, state, train, lr, cfg, rng, input_transform)
            train_nll = evaluate(current, train).mean_nll
            val_nll = evaluate(current, val).mean_nll
            if not (np.isfinite(train_nll) and np.isfinite(val_nll)):
                raise DivergenceError("Non-finite NLL after epoch")
        except DivergenceError as exc:
            divergences += 1
            if divergences >= cfg.max_divergences:
                current_run.log_critical(
                    f"Training aborted after {divergences} divergences: {exc}"
                )
                raise
            lr *= cfg.lr_decay
            current, state, stale = best_model, AdamState.zeros(best_model), 0
            current_run.log_warning(
                f"Epoch {epoch} diverged ({exc}); checkpoint restored, lr decayed to {lr:g}"
            )
            if lr < cfg.min_lr:
                break
            continue

        divergences = 0
        history.append(EpochRecord(epoch, train_nll, val_nll, lr, time.perf_counter() - started))
        current_run.log_info(
            f"Epoch {epoch}: train NLL {train_nll:.6f}, validation NLL {val_nll:.6f}, lr {lr:g}"
        )
        if val_nll < history.best_val_nll:
            history.best_val_nll, history.best_epoch = val_nll, epoch
            best_model, stale = current, 0
            continue

        stale += 1
        if stale >= cfg.patience_epochs:
            lr *= cfg.lr_decay
            current, state, stale = best_model, AdamState.zeros(best_model), 0
            current_run.log_info(
                f"No validation gain for {cfg.patience_epochs} epochs: best checkpoint "
                f"(epoch {history.best_epoch}) restored, lr decayed to {lr:g}"
            )
            if lr < cfg.min_lr:
                current_run.log_info(f"Learning rate below {cfg.min_lr:g}, stopping")
                break

    return best_model, history


def fit_unit_least_squares(
    target: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    block_size: int = 64,
    nonlinearity: Nonlinearity | str = Nonlinearity.TANH,
    n_points: int = 2001,
    refine_steps: int = 0,
    refine_lr: float = 1e-4,
) -> tuple[TriUnit, float]:
    """Fit a one-dimensional unit to a monotone target by least squares.

    The hidden layer is fixed to a grid of slopes and centres covering ``[lo, hi]``;
    non-negative least squares then picks the output weights (kept positive) and the
    output bias. Optional Adam steps on the squared error refine all parameters and are kept
    only if they lower it.

    Args:
        target (Callable): Monotone increasing function of a vector.
        lo (float): Left end of the fit interval.
        hi (float): Right end of the fit interval.
        block_size (int): Hidden units, a multiple of the number of slopes.
        nonlinearity (Nonlinearity | str): Hidden activation.
        n_points (int): Fit points on ``[lo, hi]``.
        refine_steps (int): Adam steps on the mean squared error.
        refine_lr (float): Adam step size for the refinement.

    Returns:
        tuple[TriUnit, float]: ``(unit, sup_error)``, the sup error measured on a grid
        twice as dense.
    """
    kind = Nonlinearity(nonlinearity)
    if block_size % len(LSQ_SLOPES):
        raise ValueError(f"block_size must be a multiple of {len(LSQ_SLOPES)}, got {block_size}")
    margin = 0.5 * (hi - lo) / 6.0
    centres = np.linspace(lo - margin, hi + margin, block_size // len(LSQ_SLOPES))
    slopes = np.repeat(LSQ_SLOPES, centres.size)
    offsets = -slopes * np.tile(centres, len(LSQ_SLOPES))

    t = np.linspace(lo, hi, n_points)
    goal = np.asarray(target(t), dtype=np.float64)
    features = nonlinearity_eval(kind, np.outer(t, slopes) + offsets)[0]
    design = np.hstack([features, np.ones((n_points, 1)), -np.ones((n_points, 1))])
    coef, _ = nnls(design, goal)
    weights = np.maximum(coef[:block_size], LSQ_MIN_WEIGHT)

    packed, v_diag_raw = pack(slopes[:, None], weights[None, :])
    unit = TriUnit(packed, v_diag_raw, offsets, [coef[block_size] - coef[block_size + 1]], kind)
    model = FlowModel(layers=(unit,), flip_after=(False,))

    def mse(candidate: FlowModel) -> float:
        y, _, _ = flow_forward(candidate, t[:, None])
        return float(np.mean((y[:, 0] - goal) ** 2))

    if refine_steps:
        state, refined = AdamState.zeros(model), model
        for _ in range(refine_steps):
            y, _, trace = flow_forward(refined, t[:, None])
            grads, _ = backward(refined, trace, y - goal[:, None], logdet_weight=0.0)
            params = adam_step(state, refined.parameters(), grads, refine_lr)
            refined = refined.with_parameters(params)
        if mse(refined) < mse(model):
            model = refined

    check = np.linspace(lo, hi, 2 * n_points - 1)
    y, _, _ = flow_forward(model, check[:, None])
    sup_error = float(np.max(np.abs(y[:, 0] - np.asarray(target(check), dtype=np.float64))))
    return model.layers[0], sup_error
