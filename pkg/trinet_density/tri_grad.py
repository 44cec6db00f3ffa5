"""Reverse-mode gradients of the flow NLL with respect to raw (pre-softplus) parameters.

The backward pass replays a :class:`tri_core.ForwardTrace`. For one unit with output adjoint
``gy`` and the log-determinant term ``-w * sum_n log d_n``:

    gz = (V^T gy) * phi'(z) - w / d_n * u_{n,i} v_{n,i} phi''(z)     (per hidden entry)
    gU = gz x^T,  gV = gy phi(z)^T,  ga = gz,  gb = gy,  gx = U^T gz

plus the direct dependence of ``d_n`` on the diagonal entries, and the softplus factor
``sigmoid(raw)`` on every block-diagonal raw value.
"""

from __future__ import annotations

import itertools
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass

import numpy as np
from errors import DivergenceError
from scipy.special import expit
from tri_core import (
    FlowModel,
    ForwardTrace,
    TriUnit,
    UnitTrace,
    build_masks,
    diag_positions,
    flow_forward,
    nll,
)

# central differences: relative error with an absolute floor at this gradient magnitude,
# i.e. "relative 1e-4 or absolute 1e-7"
GRADIENT_SCALE_FLOOR = 1e-3


@dataclass
class LayerGradient:
    """Gradients of one unit's raw parameters."""

    d_packed: np.ndarray
    d_v_diag_raw: np.ndarray
    d_a: np.ndarray
    d_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        """Gradients in parameter storage order.

        Returns:
            list[np.ndarray]: ``[d_packed, d_v_diag_raw, d_a, d_b]``.
        """
        return [self.d_packed, self.d_v_diag_raw, self.d_a, self.d_b]


@dataclass
class GradientSet:
    """Gradients for every layer, mirroring :meth:`FlowModel.parameters` order."""

    layers: list[LayerGradient]

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> GradientSet:
        """Group a flat array list four per layer.

        Args:
            arrays (list[np.ndarray]): Arrays in :meth:`FlowModel.parameters` order.

        Returns:
            GradientSet: One :class:`LayerGradient` per four arrays.
        """
        return cls([
            LayerGradient(*arrays[idx : idx + 4]) for idx in range(0, len(arrays), 4)
        ])

    @classmethod
    def zeros_like(cls, model: FlowModel) -> GradientSet:
        """Zero gradients shaped like the parameters of ``model``.

        Returns:
            GradientSet: All-zero arrays.
        """
        return cls.from_arrays([np.zeros_like(array) for array in model.parameters()])

    def arrays(self) -> list[np.ndarray]:
        """Flat list of every layer's gradients.

        Returns:
            list[np.ndarray]: Arrays in :meth:`FlowModel.parameters` order.
        """
        return [array for layer in self.layers for array in layer.arrays()]

    def __add__(self, other: GradientSet) -> GradientSet:
        return GradientSet.from_arrays([
            mine + theirs for mine, theirs in zip(self.arrays(), other.arrays(), strict=True)
        ])

    def scaled(self, factor: float) -> GradientSet:
        """Multiply every gradient by ``factor``.

        Returns:
            GradientSet: Scaled copy.
        """
        return GradientSet.from_arrays([factor * array for array in self.arrays()])

    def is_finite(self) -> bool:
        """Whether every entry is finite.

        Returns:
            bool: False if any entry is NaN or infinite.
        """
        return all(np.all(np.isfinite(array)) for array in self.arrays())

    def max_abs(self) -> float:
        """Largest absolute entry.

        Returns:
            float: Maximum over all layers.
        """
        return max(float(np.max(np.abs(array))) for array in self.arrays())


def _unit_backward(
    unit: TriUnit, trace: UnitTrace, gy: np.ndarray, logdet_weight: float
) -> tuple[LayerGradient, np.ndarray]:
    """Backward pass through one unit; parameter gradients are summed over the batch.

    Returns:
        tuple[LayerGradient, np.ndarray]: ``(layer_gradient, gx)`` with ``gx`` the per-row
        input adjoint.
    """
    n_dim, block_size = unit.n_dim, unit.block_size
    rows, cols = diag_positions(n_dim, block_size)
    u_mask, _ = build_masks(n_dim, block_size)
    u_mat, v_mat = trace.u, trace.v
    u_diag = u_mat[rows, cols].reshape(n_dim, block_size)
    v_diag = v_mat[cols, rows].reshape(n_dim, block_size)
    dphi = trace.dphi.reshape(-1, n_dim, block_size)

    g_diag = -logdet_weight / trace.diag
    g_z = (gy @ v_mat) * trace.dphi
    g_z += (g_diag[:, :, None] * (u_diag * v_diag) * trace.ddphi.reshape(dphi.shape)).reshape(
        g_z.shape
    )

    g_u = g_z.T @ trace.x
    g_v = gy.T @ trace.phi
    g_diag_dphi = (g_diag[:, :, None] * dphi).sum(axis=0)
    g_u_diag = g_u[rows, cols] + (g_diag_dphi * v_diag).reshape(-1)
    g_v_diag = g_v[cols, rows] + (g_diag_dphi * u_diag).reshape(-1)

    d_packed = np.where(u_mask, g_u, g_v.T)
    d_packed[rows, cols] = g_u_diag * expit(unit.packed[rows, cols])
    layer = LayerGradient(
        d_packed=d_packed,
        d_v_diag_raw=g_v_diag * expit(unit.v_diag_raw),
        d_a=g_z.sum(axis=0),
        d_b=gy.sum(axis=0),
    )
    return layer, g_z @ u_mat


def backward(
    model: FlowModel, trace: ForwardTrace, gy: np.ndarray, logdet_weight: float = 1.0
) -> tuple[GradientSet, np.ndarray]:
    """Generic adjoint pass for ``mean(gy . y) - logdet_weight * mean(logdet)``.

    Args:
        model (FlowModel): Model that produced ``trace``.
        trace (ForwardTrace): Trace from :func:`tri_core.flow_forward` on the same model.
        gy (np.ndarray): Adjoint of the model output, (N,) or (M, N).
        logdet_weight (float): Weight of the log-determinant path (1 for the NLL, 0 for a pure
            output loss).

    Returns:
        tuple[GradientSet, np.ndarray]: ``(grads, gx)``, batch-mean parameter gradients
        and per-row input adjoints.

    Raises:
        DivergenceError: If an adjoint is not finite.
    """
    g = np.atleast_2d(np.asarray(gy, dtype=np.float64))
    layers: list[LayerGradient] = [None] * model.n_layers  # type: ignore[list-item]
    with np.errstate(over="ignore", invalid="ignore"):
        for idx in reversed(range(model.n_layers)):
            if trace.flip_after[idx]:
                g = g[:, ::-1]
            layers[idx], g = _unit_backward(model.layers[idx], trace.units[idx], g, logdet_weight)
    grads = GradientSet(layers).scaled(1.0 / g.shape[0])
    if not grads.is_finite() or not np.all(np.isfinite(g)):
        raise DivergenceError("Non-finite adjoint in backward pass")
    return grads, g


def nll_backward(model: FlowModel, trace: ForwardTrace, y: np.ndarray) -> GradientSet:
    """Gradient of the (batch-mean) NLL with respect to every raw parameter.

    Args:
        model (FlowModel): Model that produced ``trace``.
        trace (ForwardTrace): Forward trace of the batch.
        y (np.ndarray): Model outputs, the NLL adjoint of a standard normal base.

    Returns:
        GradientSet: Shapes mirror ``model.parameters()``.
    """
    return backward(model, trace, y, logdet_weight=1.0)[0]


def _chunks(n_rows: int, n_chunks: int) -> Iterator[slice]:
    bounds = np.linspace(0, n_rows, min(n_chunks, n_rows) + 1).astype(int)
    for start, stop in itertools.pairwise(bounds):
        yield slice(int(start), int(stop))


def _chunk_gradient(model: FlowModel, batch: np.ndarray) -> tuple[float, GradientSet]:
    y, logdet, trace = flow_forward(model, batch)
    grads = nll_backward(model, trace, y)
    n_rows = batch.shape[0]
    return float(np.sum(nll(y, logdet))), grads.scaled(n_rows)


def batch_nll_gradient(
    model: FlowModel, batch: np.ndarray, workers: int = 1, deterministic: bool = True
) -> tuple[float, GradientSet]:
    """Mean NLL of a mini-batch and its gradient.

    The batch is cut into ``workers`` chunks evaluated on a thread pool. With
    ``deterministic`` the chunk sums are reduced in chunk order, so results do not depend on
    thread scheduling; otherwise they are reduced as they complete.

    Args:
        model (FlowModel): Model to differentiate.
        batch (np.ndarray): Mini-batch rows.
        workers (int): Thread count; 1 evaluates in the calling thread.
        deterministic (bool): Reduce chunk results in chunk order.

    Returns:
        tuple[float, GradientSet]: ``(mean_nll, grads)``.
    """
    batch = np.atleast_2d(batch)
    n_rows = batch.shape[0]
    if workers <= 1:
        total, grads = _chunk_gradient(model, batch)
        return total / n_rows, grads.scaled(1.0 / n_rows)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_chunk_gradient, model, batch[part]) for part in _chunks(n_rows, workers)
        ]
        results = (
            [future.result() for future in futures]
            if deterministic
            else [future.result() for future in as_completed(futures)]
        )
    total = 0.0
    grads = GradientSet.zeros_like(model)
    for part_total, part_grads in results:
        total += part_total
        grads = grads + part_grads
    return total / n_rows, grads.scaled(1.0 / n_rows)


def l1_subgradient(model: FlowModel, eta: float) -> tuple[float, GradientSet]:
    """L1 penalty on every raw parameter (packed, v_diag_raw, a, b) and its subgradient.

    Args:
        model (FlowModel): Penalized model.
        eta (float): Penalty weight.

    Returns:
        tuple[float, GradientSet]: ``(eta * sum|theta|, eta * sign(theta))`` with ``sign(0) = 0``.

    Raises:
        ValueError: If ``eta`` is negative.
    """
    if eta < 0:
        raise ValueError(f"L1 weight must be non-negative, got {eta}")
    arrays = model.parameters()
    penalty = eta * sum(float(np.sum(np.abs(array))) for array in arrays)
    return penalty, GradientSet.from_arrays([eta * np.sign(array) for array in arrays])


def relative_error(numeric: float, analytic: float) -> float:
    """Relative difference with an absolute floor on the magnitude.

    Args:
        numeric (float): Finite-difference estimate.
        analytic (float): Exact value.

    Returns:
        float: ``|numeric - analytic| / max(|numeric|, |analytic|, GRADIENT_SCALE_FLOOR)``.
    """
    scale = max(abs(numeric), abs(analytic), GRADIENT_SCALE_FLOOR)
    return abs(numeric - analytic) / scale


def _selected_coordinates(
    arrays: list[np.ndarray], max_coords: int | None
) -> list[tuple[int, tuple[int, ...]]]:
    coords = [(k, idx) for k, array in enumerate(arrays) for idx in np.ndindex(array.shape)]
    if max_coords is None or len(coords) <= max_coords:
        return coords
    picked = np.random.default_rng(0).choice(len(coords), size=max_coords, replace=False)
    return [coords[i] for i in np.sort(picked)]


def finite_diff_check(
    model: FlowModel, x: np.ndarray, eps: float = 1e-5, max_coords: int | None = None
) -> float:
    """Compare :func:`nll_backward` against central differences of the NLL.

    Args:
        model (FlowModel): Model under test.
        x (np.ndarray): One input vector (N,) or a batch; the batch-mean NLL is differentiated.
        eps (float): Perturbation of each raw parameter.
        max_coords (int | None): Check at most this many coordinates, chosen deterministically; all
            coordinates are checked when None.

    Returns:
        float: Worst :func:`relative_error` over the checked coordinates.
    """
    def mean_nll(candidate: FlowModel) -> float:
        y, logdet, _ = flow_forward(candidate, x)
        return float(np.mean(nll(y, logdet)))

    y, _, trace = flow_forward(model, x)
    analytic = nll_backward(model, trace, y).arrays()
    params = model.parameters()

    worst = 0.0
    for k, idx in _selected_coordinates(params, max_coords):
        shifted = []
        for sign in (1.0, -1.0):
            arrays = list(params)
            arrays[k] = params[k].copy()
            arrays[k][idx] += sign * eps
            shifted.append(mean_nll(model.with_parameters(arrays)))
        numeric = (shifted[0] - shifted[1]) / (2.0 * eps)
        worst = max(worst, relative_error(numeric, float(analytic[k][idx])))
    return worst


def numerical_jacobian(model: FlowModel, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Dense Jacobian of the flow output at one point by central differences.

    Args:
        model (FlowModel): Flow to differentiate.
        x (np.ndarray): Point (N,).
        eps (float): Step of each central difference.

    Returns:
        np.ndarray: N x N matrix ``J[i, j] = dy_i / dx_j``.
    """
    x = np.asarray(x, dtype=np.float64)
    n_dim = x.shape[0]
    steps = eps * np.eye(n_dim)
    outputs, _, _ = flow_forward(model, np.vstack([x + steps, x - steps]))
    return ((outputs[:n_dim] - outputs[n_dim:]) / (2.0 * eps)).T


def numerical_logdet(model: FlowModel, x: np.ndarray, eps: float = 1e-5) -> float:
    """``ln|det J|`` of :func:`numerical_jacobian`.

    Args:
        model (FlowModel): Flow to differentiate.
        x (np.ndarray): Point (N,).
        eps (float): Step of each central difference.

    Returns:
        float: Log absolute determinant.
    """
    _, value = np.linalg.slogdet(numerical_jacobian(model, x, eps))
    return float(value)
