"""Inversion of flows by backward substitution and sampling through the inverse.

Within one unit ``y_n`` depends only on ``x_1..x_n`` and is strictly increasing in ``x_n``, so
the unit is inverted one coordinate at a time: with ``x_<n`` known,

    y_n(t) = const_n + sum_i v_{n,i} phi(c_i + u_{n,i} t)

is a monotone scalar map that is bracketed and solved by bisection (or a safeguarded Newton
step). All rows of a batch are solved together, dimension by dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from errors import NotInvertibleError, SampleRejectionError, ToleranceNotReachedError
from openhexa.sdk import current_run
from tri_core import (
    FlowModel,
    Nonlinearity,
    TriUnit,
    flip,
    flow_forward,
    materialize,
    nonlinearity_eval,
)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
BRACKET_CAP = 1e12


class SolveStatus(IntEnum):
    """Per-row outcome of a batch inversion."""

    OK = 0
    NOT_INVERTIBLE = 1
    TOLERANCE_NOT_REACHED = 2


@dataclass(frozen=True, eq=False)
class InversionResult:
    """Batch inversion outcome.

    Attributes:
        x: Recovered inputs (M, N); rows that failed are NaN.
        status: :class:`SolveStatus` code per row.
        failed_layer: Layer index of the first failure per row, -1 when the row succeeded.
        failed_dim: Dimension of the first failure per row, -1 when the row succeeded.
        iterations: Root-finding iterations after bracketing, shape (M, L, N).
        bracket_width: Width of the initial bracket, shape (M, L, N).
        residual: ``max |flow_forward(x) - y|`` per row (NaN for failed rows).
    """

    x: np.ndarray
    status: np.ndarray
    failed_layer: np.ndarray
    failed_dim: np.ndarray
    iterations: np.ndarray
    bracket_width: np.ndarray
    residual: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        """Boolean mask of solved rows."""
        return self.status == SolveStatus.OK


def _scalar_map(
    kind: Nonlinearity,
    offset: np.ndarray,
    slope: np.ndarray,
    weight: np.ndarray,
    t: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Scalar map of one dimension for every row.

    Returns:
        tuple[np.ndarray, np.ndarray]: ``sum_i w_i phi(c_i + s_i t)`` and its derivative in
        ``t``.
    """
    phi, dphi, _ = nonlinearity_eval(kind, offset + slope * t[:, None])
    return phi @ weight, dphi @ (weight * slope)


def _solve_unit(
    unit: TriUnit,
    y: np.ndarray,
    tol: float,
    max_iter: int,
    newton: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Invert one unit for a batch of targets.

    Returns:
        tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]: ``(x, status,
        failed_dim, iterations, bracket_width)``; the last two have shape (M, N).
    """
    n_rows = y.shape[0]
    n_dim, block_size = unit.n_dim, unit.block_size
    kind = unit.nonlinearity
    u_mat, v_mat = materialize(unit)

    x = np.zeros((n_rows, n_dim))
    phi_cache = np.zeros((n_rows, n_dim * block_size))
    status = np.full(n_rows, SolveStatus.OK, dtype=np.int8)
    failed_dim = np.full(n_rows, -1)
    iterations = np.zeros((n_rows, n_dim), dtype=np.int64)
    widths = np.zeros((n_rows, n_dim))

    for n in range(n_dim):
        blk = slice(n * block_size, (n + 1) * block_size)
        offset = x[:, :n] @ u_mat[blk, :n].T + unit.a[blk]
        slope = u_mat[blk, n]
        weight = v_mat[n, blk]
        target = y[:, n] - unit.b[n] - phi_cache[:, : n * block_size] @ v_mat[n, : n * block_size]
        alive = status == SolveStatus.OK

        if kind is Nonlinearity.TANH:
            # tanh units only reach the open interval (-sum v, sum v)
            out_of_range = alive & (np.abs(target) >= weight.sum())
            status[out_of_range] = SolveStatus.NOT_INVERTIBLE
            failed_dim[out_of_range] = n
            alive &= ~out_of_range
        target = np.where(alive, target, 0.0)

        def residual(
            t: np.ndarray,
            offset: np.ndarray = offset,
            slope: np.ndarray = slope,
            weight: np.ndarray = weight,
            target: np.ndarray = target,
        ) -> tuple[np.ndarray, np.ndarray]:
            value, deriv = _scalar_map(kind, offset, slope, weight, t)
            return value - target, deriv

        # bracket around the warm start 0 by doubling the half-width
        half = np.ones(n_rows)
        lo, hi = -half, half.copy()
        while True:
            f_lo, _ = residual(lo)
            f_hi, _ = residual(hi)
            grow_lo = alive & (f_lo > 0)
            grow_hi = alive & (f_hi < 0)
            if not (grow_lo.any() or grow_hi.any()):
                break
            half = np.where(grow_lo | grow_hi, 2.0 * half, half)
            lost = (grow_lo | grow_hi) & (half > BRACKET_CAP)
            if lost.any():
                status[lost] = SolveStatus.NOT_INVERTIBLE
                failed_dim[lost] = n
                alive &= ~lost
            lo = np.where(grow_lo & alive, -half, lo)
            hi = np.where(grow_hi & alive, half, hi)
        widths[:, n] = hi - lo

        t = 0.5 * (lo + hi)
        active = alive.copy()
        for _ in range(max_iter):
            if not active.any():
                break
            f_t, df_t = residual(t)
            iterations[active, n] += 1
            below = f_t < 0
            lo = np.where(active & below, t, lo)
            hi = np.where(active & ~below, t, hi)
            exact = active & (f_t == 0)
            lo = np.where(exact, t, lo)
            hi = np.where(exact, t, hi)

            mid = 0.5 * (lo + hi)
            stalled = (mid <= lo) | (mid >= hi)
            done = stalled | ((np.abs(f_t) <= tol) & (hi - lo <= 2.0 * tol))
            x[:, n] = np.where(active, t, x[:, n])
            active &= ~done
            if newton:
                with np.errstate(divide="ignore", invalid="ignore"):
                    step = t - f_t / df_t
                inside = np.isfinite(step) & (step > lo) & (step < hi)
                t = np.where(inside, step, mid)
            else:
                t = mid
        else:
            missed = active
            status[missed] = SolveStatus.TOLERANCE_NOT_REACHED
            failed_dim[missed] = n
            alive &= ~missed

        x[~alive, n] = 0.0
        phi_cache[:, blk] = nonlinearity_eval(kind, offset + slope * x[:, n : n + 1])[0]

    x[status != SolveStatus.OK] = np.nan
    return x, status, failed_dim, iterations, widths


def invert_flow_batch(
    model: FlowModel,
    y: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    newton: bool = False,
) -> InversionResult:
    """Invert a model row by row without raising on failed rows.

    Layers are undone from the top: the flip (its own inverse) first, then the unit.

    Args:
        model (FlowModel): Flow to invert.
        y (np.ndarray): Targets (M, N) or (N,).
        tol (float): Per-coordinate tolerance on both bracket width and residual.
        max_iter (int): Iteration cap per scalar solve.
        newton (bool): Use safeguarded Newton steps inside the bisection bracket.

    Returns:
        InversionResult: Per-row solutions and diagnostics.

    Raises:
        ValueError: If ``tol`` is not positive.
    """
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    target = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n_rows, n_dim, n_layers = target.shape[0], model.n_dim, model.n_layers

    status = np.full(n_rows, SolveStatus.OK, dtype=np.int8)
    failed_layer = np.full(n_rows, -1)
    failed_dim = np.full(n_rows, -1)
    iterations = np.zeros((n_rows, n_layers, n_dim), dtype=np.int64)
    widths = np.zeros((n_rows, n_layers, n_dim))

    h = target
    for idx in reversed(range(n_layers)):
        if model.flip_after[idx]:
            h = flip(h)
        h, unit_status, unit_dim, iterations[:, idx], widths[:, idx] = _solve_unit(
            model.layers[idx], np.nan_to_num(h), tol, max_iter, newton
        )
        first = (status == SolveStatus.OK) & (unit_status != SolveStatus.OK)
        status[first] = unit_status[first]
        failed_layer[first] = idx
        failed_dim[first] = unit_dim[first]

    ok = status == SolveStatus.OK
    h[~ok] = np.nan
    residual = np.full(n_rows, np.nan)
    if ok.any():
        forward, _, _ = flow_forward(model, h[ok])
        residual[ok] = np.max(np.abs(forward - target[ok]), axis=1)
    return InversionResult(
        x=h,
        status=status,
        failed_layer=failed_layer,
        failed_dim=failed_dim,
        iterations=iterations,
        bracket_width=widths,
        residual=residual,
    )


def _raise_for_row(result: InversionResult, row: int) -> None:
    layer = int(result.failed_layer[row])
    dim = int(result.failed_dim[row])
    if result.status[row] == SolveStatus.NOT_INVERTIBLE:
        raise NotInvertibleError(
            f"target of dimension {dim} is outside the unit's range", layer, dim
        )
    if result.status[row] == SolveStatus.TOLERANCE_NOT_REACHED:
        raise ToleranceNotReachedError(f"dimension {dim} did not reach the tolerance", layer, dim)


def invert_unit(
    unit: TriUnit, y: np.ndarray, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> np.ndarray:
    """Solve ``unit_forward(unit, x) = y`` for ``x``.

    Args:
        unit (TriUnit): Unit to invert.
        y (np.ndarray): Target vector (N,) or batch (M, N).
        tol (float): Per-coordinate tolerance.
        max_iter (int): Iteration cap per scalar solve.

    Returns:
        np.ndarray: ``x`` with the shape of ``y``.

    Raises:
        NotInvertibleError: If a tanh target lies outside the attainable range.
        ToleranceNotReachedError: If bisection hits ``max_iter``.
    """
    model = FlowModel(layers=(unit,), flip_after=(False,))
    return invert_flow(model, y, tol=tol, max_iter=max_iter)


def invert_flow(
    model: FlowModel, y: np.ndarray, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> np.ndarray:
    """Invert every layer of a model, top to bottom.

    Args:
        model (FlowModel): Flow to invert.
        y (np.ndarray): Target vector (N,) or batch (M, N).
        tol (float): Per-coordinate tolerance.
        max_iter (int): Iteration cap per scalar solve.

    Returns:
        np.ndarray: ``x`` with the shape of ``y``.

    Raises:
        NotInvertibleError: Tagged with the failing layer index.
        ToleranceNotReachedError: Tagged with the failing layer index.
    """
    y = np.asarray(y, dtype=np.float64)
    result = invert_flow_batch(model, y, tol=tol, max_iter=max_iter)
    failed = np.flatnonzero(~result.ok)
    if failed.size:
        _raise_for_row(result, int(failed[0]))
    return result.x[0] if y.ndim == 1 else result.x


def sample(
    model: FlowModel,
    count: int,
    seed: int,
    tol: float = DEFAULT_TOL,
    max_reject_rate: float = 0.5,
    reject_window: int = 100,
) -> tuple[np.ndarray, int]:
    """Draw samples by inverting standard normal base draws.

    Draw ``i`` uses its own generator seeded from ``(seed, i)``, so the output does not depend on
    batching. Base draws that a tanh model cannot invert are redrawn from the same stream.

    Args:
        model (FlowModel): Flow to sample from.
        count (int): Number of samples.
        seed (int): Run seed.
        tol (float): Inversion tolerance.
        max_reject_rate (float): Abort once this fraction of attempts was rejected.
        reject_window (int): Attempts made before the rejection rate is enforced.

    Returns:
        tuple[np.ndarray, int]: ``(samples, rejected)`` with ``samples`` of shape (count, N).

    Raises:
        SampleRejectionError: If the rejection rate exceeds ``max_reject_rate``.
        ToleranceNotReachedError: If a draw fails to converge.
    """
    if count < 0:
        raise ValueError(f"Sample count must be non-negative, got {count}")
    n_dim = model.n_dim
    samples = np.empty((count, n_dim))
    streams = [np.random.default_rng([seed, i]) for i in range(count)]
    pending = np.arange(count)
    attempts = 0
    rejected = 0

    while pending.size:
        draws = np.vstack([streams[i].standard_normal(n_dim) for i in pending])
        result = invert_flow_batch(model, draws, tol=tol)
        attempts += pending.size

        unresolved = result.status == SolveStatus.TOLERANCE_NOT_REACHED
        if unresolved.any():
            _raise_for_row(result, int(np.flatnonzero(unresolved)[0]))
        samples[pending[result.ok]] = result.x[result.ok]
        pending = pending[~result.ok]
        rejected += pending.size

        if attempts >= reject_window and rejected > max_reject_rate * attempts:
            current_run.log_error(f"Sampling aborted: {rejected} of {attempts} draws rejected")
            raise SampleRejectionError(
                f"{rejected} of {attempts} base draws were not invertible; the model's tanh "
                "ranges are too tight for its base density"
            )

    if rejected:
        current_run.log_warning(f"Rejected and redrew {rejected} non-invertible base draws")
    return samples, rejected
