"""Binary model files.

Layout (little-endian)::

    b"TRIN" | u32 version | u32 header length | header text | payload

The header is UTF-8 ``key=value`` lines. The payload holds, per layer, the float64 arrays
``packed`` (row-major, N*B x N), ``v_diag_raw`` (N*B), ``a`` (N*B) and ``b`` (N). The packed
storage is the on-disk layout; masks are rebuilt from (N, B) on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from errors import DataIOError, ModelFileError
from flow_io import ImageGeometry
from openhexa.sdk import current_run
from tri_core import FlowModel, Nonlinearity, TriUnit

MAGIC = b"TRIN"
FORMAT_VERSION = 1
PREFIX = struct.Struct("<4sII")
PAYLOAD_DTYPE = np.dtype("<f8")
REQUIRED_KEYS = (
    "n_dim",
    "block_size",
    "n_layers",
    "nonlinearity",
    "flip_after",
    "norm_absorbed",
    "seed",
)
CREATED_BY = "trinet_density"


def payload_float_count(n_dim: int, block_size: int, n_layers: int = 1) -> int:
    """Floats stored in a model payload.

    Args:
        n_dim (int): Dimension N.
        block_size (int): Hidden units per dimension B.
        n_layers (int): Number of units L.

    Returns:
        int: ``L (N B N + 2 N B + N)``.
    """
    return n_layers * (n_dim * block_size * n_dim + 2 * n_dim * block_size + n_dim)


def naive_float_count(n_dim: int, block_size: int, n_layers: int = 1) -> int:
    """Floats of a naive layout: dense ``U`` and ``V``, two float masks, ``a`` and ``b``.

    Returns:
        int: ``L (4 N B N + N B + N)``.
    """
    return n_layers * (4 * n_dim * block_size * n_dim + n_dim * block_size + n_dim)


@dataclass(frozen=True, eq=False)
class ModelFile:
    """A model with the metadata saved next to it.

    ``extra`` holds optional header keys (``preprocess``, ``lambda``, ``image_geom``,
    ``created_by`` and any unknown key read from a file) as raw strings, in file order.
    """

    model: FlowModel
    seed: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def preprocess(self) -> str:
        """``logit`` for dequantized image models, ``none`` otherwise."""
        return self.extra.get("preprocess", "none")

    @property
    def lambda_(self) -> float | None:
        """Logit squeeze the model was trained with."""
        value = self.extra.get("lambda")
        return None if value in (None, "none") else float(value)

    @property
    def image_geom(self) -> ImageGeometry | None:
        """Image layout of the training data, if any."""
        value = self.extra.get("image_geom", "none")
        if value == "none":
            return None
        height, width, channels = (int(part) for part in value.split("x"))
        return ImageGeometry(height=height, width=width, channels=channels)


def header_extra(
    lambda_: float | None = None, image_geom: ImageGeometry | None = None
) -> dict[str, str]:
    """Optional header keys describing the preprocessing a model was trained with.

    Args:
        lambda_ (float | None): Logit squeeze, None when the data was not dequantized.
        image_geom (ImageGeometry | None): Image layout of the training data.

    Returns:
        dict[str, str]: Header entries in file order.
    """
    geom = "none"
    if image_geom is not None:
        geom = f"{image_geom.height}x{image_geom.width}x{image_geom.channels}"
    return {
        "preprocess": "none" if lambda_ is None else "logit",
        "lambda": "none" if lambda_ is None else repr(float(lambda_)),
        "image_geom": geom,
        "created_by": CREATED_BY,
    }


def serialize_model(model_file: ModelFile) -> bytes:
    """Encode a model file.

    Args:
        model_file (ModelFile): Model and metadata.

    Returns:
        bytes: The complete file contents.
    """
    model = model_file.model
    header = {
        "n_dim": str(model.n_dim),
        "block_size": str(model.block_size),
        "n_layers": str(model.n_layers),
        "nonlinearity": model.nonlinearity.value,
        "flip_after": ",".join("1" if f else "0" for f in model.flip_after),
        "norm_absorbed": "1" if model.norm_absorbed else "0",
        "seed": str(model_file.seed),
    }
    header.update({k: v for k, v in model_file.extra.items() if k not in header})
    for key, value in header.items():
        if "=" in key or "\n" in key or "\n" in value:
            raise ModelFileError(f"Header entry {key!r} cannot be encoded")
    text = "".join(f"{key}={value}\n" for key, value in header.items()).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes() for array in model.parameters()
    )
    return PREFIX.pack(MAGIC, FORMAT_VERSION, len(text)) + text + payload


def _parse_header(text: bytes) -> dict[str, str]:
    try:
        lines = text.decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise ModelFileError(f"Header is not valid UTF-8: {exc}") from exc
    header = {}
    for line in lines:
        key, sep, value = line.partition("=")
        if not sep:
            raise ModelFileError(f"Malformed header line {line!r}")
        header[key] = value
    missing = [key for key in REQUIRED_KEYS if key not in header]
    if missing:
        raise ModelFileError(f"Header is missing keys: {', '.join(missing)}")
    return header


def parse_model(data: bytes) -> ModelFile:
    """Decode a model file, enforcing the payload size.

    Args:
        data (bytes): Complete file contents.

    Returns:
        ModelFile: The model with its seed and optional header keys.

    Raises:
        ModelFileError: On a bad magic, unsupported version, malformed header or a payload of
            the wrong size.
    """
    if len(data) < PREFIX.size:
        raise ModelFileError(f"File too short for a model header ({len(data)} bytes)")
    magic, version, header_len = PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFileError(f"Bad magic: expected {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"Unsupported model format version {version}")
    header_end = PREFIX.size + header_len
    if header_end > len(data):
        raise ModelFileError("Header length exceeds file size")
    header = _parse_header(data[PREFIX.size : header_end])

    try:
        n_dim, block_size, n_layers = (
            int(header[k]) for k in ("n_dim", "block_size", "n_layers")
        )
        nonlinearity = Nonlinearity(header["nonlinearity"])
        flips = tuple(flag == "1" for flag in header["flip_after"].split(","))
        seed = int(header["seed"])
    except ValueError as exc:
        raise ModelFileError(f"Invalid header value: {exc}") from exc
    if min(n_dim, block_size, n_layers) < 1 or len(flips) != n_layers:
        raise ModelFileError(f"Inconsistent architecture in header: {header}")

    expected = 8 * payload_float_count(n_dim, block_size, n_layers)
    payload = data[header_end:]
    if len(payload) != expected:
        raise ModelFileError(f"Payload has {len(payload)} bytes, expected {expected}")

    values = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).astype(np.float64)
    n_hidden = n_dim * block_size
    sizes = [n_hidden * n_dim, n_hidden, n_hidden, n_dim]
    layers, position = [], 0
    for _ in range(n_layers):
        arrays = []
        for size in sizes:
            arrays.append(values[position : position + size])
            position += size
        arrays[0] = arrays[0].reshape(n_hidden, n_dim)
        layers.append(TriUnit(*arrays, nonlinearity=nonlinearity))

    extra = {k: v for k, v in header.items() if k not in REQUIRED_KEYS}
    model = FlowModel(tuple(layers), flips, norm_absorbed=header["norm_absorbed"] == "1")
    return ModelFile(model=model, seed=seed, extra=extra)


def save_model_file(path: Path, model_file: ModelFile) -> Path:
    """Write a model file, creating parent directories.

    Args:
        path (Path): Destination file.
        model_file (ModelFile): Model and metadata.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_model(model_file))
    current_run.log_info(f"Model saved to {path}")
    return path


def load_model_file(path: Path) -> ModelFile:
    """Read and parse a model file.

    Args:
        path (Path): Model file.

    Returns:
        ModelFile: The decoded model.

    Raises:
        DataIOError: If the file does not exist.
        ModelFileError: If it is not a valid model file.
    """
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"Model file {path} does not exist")
    return parse_model(path.read_bytes())
