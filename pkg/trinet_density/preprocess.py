"""Preprocessing with exact density bookkeeping.

Images are dequantized and moved to logit space; the log|det| of that map is kept per sample
so densities can be reported as bits per dimension of the 8-bit pixels. Inputs are decorrelated
by a Cholesky normalizer ``x <- Gamma (x - m)`` that is folded into the first unit before a
model is saved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from errors import ConfigError, NormalizerError
from flow_io import Dataset, ImageGeometry, PreprocessMeta
from openhexa.sdk import current_run
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import expit, logit
from tri_core import FlowModel, diag_positions, join_packed, materialize, softplus_inverse

LAMBDA_PRESETS = {"mnist": 1e-6, "cifar": 0.05}
PIXEL_LEVELS = 256
RIDGE_START = 1e-6
RIDGE_MAX = 1e-2


def _check_lambda(lambda_: float) -> None:
    if not 0.0 <= lambda_ < 0.5:
        raise ValueError(f"lambda must lie in [0, 0.5), got {lambda_}")


def logit_transform(scaled: np.ndarray, lambda_: float) -> tuple[np.ndarray, np.ndarray]:
    """Map values in (0, 1) to ``logit(lambda + (1 - 2 lambda) s)``.

    Args:
        scaled (np.ndarray): Values in (0, 1).
        lambda_ (float): Squeeze towards 0.5, in [0, 0.5).

    Returns:
        tuple: ``(z, log_derivative)`` elementwise, where ``log_derivative`` is
        ``ln dz/ds = ln(1 - 2 lambda) - ln t - ln(1 - t)``.
    """
    _check_lambda(lambda_)
    t = lambda_ + (1.0 - 2.0 * lambda_) * np.asarray(scaled, dtype=np.float64)
    log_derivative = np.log1p(-2.0 * lambda_) - np.log(t) - np.log1p(-t)
    return logit(t), log_derivative


def dequantize_logit(
    pixels: np.ndarray, lambda_: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray | float]:
    """Dequantize 8-bit pixels with uniform noise and move them to logit space.

    ``s = (pixel + u) / 256`` with ``u ~ U(0, 1)``, then :func:`logit_transform`.

    Args:
        pixels (np.ndarray): Integer-valued pixels in 0..255, one vector (N,) or a batch (M, N).
        lambda_ (float): Squeeze towards 0.5 that keeps the logit finite.
        rng (np.random.Generator): Source of the dequantization noise.

    Returns:
        tuple: ``(z, correction)``; ``correction`` is the log|det| of the full pixel -> z map
        per sample, including ``-ln 256`` per dimension.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    noise = rng.random(pixels.shape)
    z, log_derivative = logit_transform((pixels + noise) / PIXEL_LEVELS, lambda_)
    correction = np.sum(log_derivative - np.log(PIXEL_LEVELS), axis=-1)
    return z, float(correction) if np.ndim(correction) == 0 else correction


def dequantize_dataset(dataset: Dataset, lambda_: float, seed: int) -> Dataset:
    """Dequantize every record with its own generator seeded from ``(seed, record index)``.

    Args:
        dataset (Dataset): Pixel-valued samples.
        lambda_ (float): Logit squeeze.
        seed (int): Base seed of the per-record noise streams.

    Returns:
        Dataset: Logit-space samples with ``preprocess_meta`` filled.
    """
    records = [
        dequantize_logit(row, lambda_, np.random.default_rng([seed, i]))
        for i, row in enumerate(dataset.samples)
    ]
    z = np.vstack([values for values, _ in records])
    correction = np.array([value for _, value in records])
    current_run.log_info(
        f"Dequantized {dataset.n_samples} records to logit space (lambda={lambda_:g})"
    )
    return dataset.with_samples(z, PreprocessMeta(lambda_=lambda_, correction=correction))


def logit_to_pixels(z: np.ndarray, lambda_: float) -> np.ndarray:
    """Map logit-space values back to the 0..255 pixel range.

    Args:
        z (np.ndarray): Logit-space values.
        lambda_ (float): Squeeze the values were produced with.

    Returns:
        np.ndarray: ``clip(floor(256 s), 0, 255)`` with ``s`` the un-squeezed sigmoid.
    """
    _check_lambda(lambda_)
    scaled = (expit(np.asarray(z, dtype=np.float64)) - lambda_) / (1.0 - 2.0 * lambda_)
    return np.clip(np.floor(PIXEL_LEVELS * scaled), 0, PIXEL_LEVELS - 1)


def bpd(mean_nll_z: float, mean_correction: float, n_dim: int) -> float:
    """Bits per dimension of the discrete pixels from a logit-space NLL.

    Args:
        mean_nll_z (float): Mean negative log-likelihood in logit space, in nats.
        mean_correction (float): Mean log|det| of the pixel -> logit map.
        n_dim (int): Pixels per sample.

    Returns:
        float: ``(mean_nll_z - mean_correction) / (n_dim ln 2)``.
    """
    if n_dim < 1:
        raise ValueError(f"n_dim must be >= 1, got {n_dim}")
    return (mean_nll_z - mean_correction) / (n_dim * np.log(2.0))


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Affine decorrelation ``x -> Gamma (x - mean)`` with lower-triangular ``Gamma``."""

    mean: np.ndarray
    gamma: np.ndarray

    @property
    def n_dim(self) -> int:
        """Input dimension."""
        return self.mean.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Apply ``Gamma (x - mean)`` row-wise.

        Args:
            x (np.ndarray): One vector or a batch of rows.

        Returns:
            np.ndarray: Normalized rows.
        """
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.gamma.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        """Undo :meth:`transform` by triangular solve.

        Returns:
            np.ndarray: Rows in the original space, always 2D.
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return solve_triangular(self.gamma, z.T, lower=True).T + self.mean

    def logdet(self) -> float:
        """Log|det| of :meth:`transform`.

        Returns:
            float: ``sum_n ln Gamma_nn``.
        """
        return float(np.sum(np.log(np.diag(self.gamma))))

    @classmethod
    def identity(cls, n_dim: int) -> Normalizer:
        """Normalizer that leaves inputs unchanged.

        Returns:
            Normalizer: Zero mean and identity ``Gamma``.
        """
        return cls(mean=np.zeros(n_dim), gamma=np.eye(n_dim))


def fit_normalizer(samples: np.ndarray) -> Normalizer:
    """Fit ``Gamma = L^-1`` from the Cholesky factor of the sample covariance ``C = L L^T``.

    The covariance uses the population (``ddof=0``) estimate. When ``C`` is not positive
    definite a ridge of ``1e-6 trace(C)/N`` is added and doubled up to ``1e-2 trace(C)/N``.

    Args:
        samples (np.ndarray): Training matrix (M, N) with M >= 2.

    Returns:
        Normalizer: Fitted mean and lower-triangular ``Gamma``.

    Raises:
        ConfigError: If fewer than 2 samples are given.
        NormalizerError: If the covariance stays singular at the largest ridge.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ConfigError(
            f"Need at least 2 training samples to fit a normalizer, got shape {samples.shape}"
        )
    n_dim = samples.shape[1]
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / samples.shape[0]
    scale = float(np.trace(cov)) / n_dim or 1.0

    ridge, factor = 0.0, RIDGE_START
    while True:
        try:
            lower = cholesky(cov + ridge * np.eye(n_dim), lower=True)
            if np.all(np.diag(lower) > 0):
                break
        except LinAlgError:
            pass
        if factor > RIDGE_MAX:
            current_run.log_error("Covariance is singular even with the largest ridge")
            raise NormalizerError(
                "Input covariance is not positive definite; reduce the dimension or drop "
                "constant and collinear columns"
            )
        ridge = factor * scale
        factor *= 2.0
    if ridge:
        current_run.log_warning(f"Covariance regularized with ridge {ridge:.3g}")

    gamma = solve_triangular(lower, np.eye(n_dim), lower=True)
    return Normalizer(mean=mean, gamma=np.tril(gamma))


def absorb_normalizer(model: FlowModel, norm: Normalizer) -> FlowModel:
    """Fold a normalizer into the first unit: ``U <- U Gamma`` and ``a <- a - U Gamma m``.

    ``U Gamma`` keeps the block lower-triangular structure. Block-diagonal entries that change
    are re-encoded through the softplus inverse; unchanged ones keep their raw values, so the
    identity normalizer leaves the model bit-exact.

    Args:
        model (FlowModel): Model trained on normalized inputs.
        norm (Normalizer): Normalizer the model was trained behind.

    Returns:
        FlowModel: Model with ``norm_absorbed`` set.

    Raises:
        ConfigError: If the model already absorbed a normalizer or sizes differ.
        NormalizerError: If an absorbed block-diagonal entry is not positive.
    """
    if model.norm_absorbed:
        raise ConfigError("Model already has a normalizer absorbed")
    if norm.n_dim != model.n_dim:
        raise ConfigError(f"Normalizer has dimension {norm.n_dim}, model has {model.n_dim}")

    first = model.layers[0]
    rows, cols = diag_positions(first.n_dim, first.block_size)
    u_mat, v_mat = materialize(first)
    u_new = u_mat @ norm.gamma
    a_new = first.a - u_new @ norm.mean

    old_diag, new_diag = u_mat[rows, cols], u_new[rows, cols]
    if np.any(new_diag <= 0):
        raise NormalizerError("Absorbed block-diagonal entry of U is not positive")
    changed = new_diag != old_diag
    raw_diag = first.packed[rows, cols].copy()
    raw_diag[changed] = softplus_inverse(new_diag[changed])

    packed = join_packed(u_new, v_mat)
    packed[rows, cols] = raw_diag
    unit = first.with_parameters([packed, first.v_diag_raw, a_new, first.b])
    absorbed = model.with_layer(0, unit)
    return FlowModel(absorbed.layers, absorbed.flip_after, norm_absorbed=True)


def shift_images(images: np.ndarray, geom: ImageGeometry, shifts: np.ndarray) -> np.ndarray:
    """Circularly shift flattened channel-major images.

    Args:
        images (np.ndarray): Matrix (M, C*H*W).
        geom (ImageGeometry): Image layout.
        shifts (np.ndarray): Integer (dy, dx) per image, shape (M, 2).

    Returns:
        np.ndarray: Shifted copy of ``images``.
    """
    stack = np.asarray(images).reshape(-1, geom.channels, geom.height, geom.width)
    out = np.empty_like(stack)
    for idx, (dy, dx) in enumerate(np.asarray(shifts, dtype=int)):
        out[idx] = np.roll(stack[idx], (dy, dx), axis=(1, 2))
    return out.reshape(stack.shape[0], -1)


def max_shift(geom: ImageGeometry, max_frac: float) -> tuple[int, int]:
    """Largest vertical and horizontal shift, ``floor(max_frac * side)``.

    Returns:
        tuple[int, int]: Vertical and horizontal bounds.
    """
    return int(np.floor(max_frac * geom.height)), int(np.floor(max_frac * geom.width))


def augment_shift(images: Dataset, max_frac: float, rng: np.random.Generator) -> Dataset:
    """Shift every image independently by up to ``floor(max_frac * side)`` pixels each way.

    Args:
        images (Dataset): Image dataset.
        max_frac (float): Largest shift as a fraction of the side.
        rng (np.random.Generator): Source of the shifts.

    Returns:
        Dataset: Same metadata, shifted samples.

    Raises:
        ConfigError: If the dataset has no image geometry.
    """
    if images.image_geom is None:
        raise ConfigError("Shift augmentation needs image data")
    return images.with_samples(shift_batch(images.samples, images.image_geom, max_frac, rng))


def shift_batch(
    batch: np.ndarray, geom: ImageGeometry, max_frac: float, rng: np.random.Generator
) -> np.ndarray:
    """Random circular shifts drawn uniformly from ``[-k, k]`` per axis for each row.

    Args:
        batch (np.ndarray): Flattened images, one per row.
        geom (ImageGeometry): Image layout.
        max_frac (float): Largest shift as a fraction of the side.
        rng (np.random.Generator): Source of the shifts.

    Returns:
        np.ndarray: Shifted rows.
    """
    k_y, k_x = max_shift(geom, max_frac)
    shifts = np.column_stack([
        rng.integers(-k_y, k_y + 1, size=batch.shape[0]),
        rng.integers(-k_x, k_x + 1, size=batch.shape[0]),
    ])
    return shift_images(batch, geom, shifts)
