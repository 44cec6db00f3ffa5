"""Dataset ingestion: CSV matrices, IDX image files and CIFAR-10 binary batches."""

from __future__ import annotations

import gzip
import itertools
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import polars as pl
from errors import ConfigError, DataFormatError, DataIOError
from openhexa.sdk import current_run
from pydantic import BaseModel, model_validator

IDX_IMAGE_MAGIC = 0x00000803
IDX_HEADER = struct.Struct(">IIII")
CIFAR_RECORD_BYTES = 3073
CIFAR_GEOMETRY = (32, 32, 3)
SPLIT_NAMES = ("train", "validation", "test")


class SplitRanges(BaseModel):
    """Half-open ``[start, stop)`` row ranges of the three splits."""

    train: tuple[int, int]
    validation: tuple[int, int]
    test: tuple[int, int]

    @model_validator(mode="after")
    def _check_ranges(self) -> SplitRanges:
        for start, stop in (self.train, self.validation, self.test):
            if not 0 <= start <= stop:
                raise ValueError(f"Invalid split range [{start}, {stop})")
        ranges = sorted(r for r in (self.train, self.validation, self.test) if r[0] < r[1])
        for (_, prev_stop), (start, _) in itertools.pairwise(ranges):
            if start < prev_stop:
                raise ValueError("Split ranges overlap")
        return self

    @classmethod
    def tail(
        cls, n_samples: int, validation_frac: float = 0.1, test_frac: float = 0.1
    ) -> SplitRanges:
        """Train on the head of the data, validate and test on its tail.

        A non-zero fraction always yields at least one row.

        Args:
            n_samples (int): Number of rows to split.
            validation_frac (float): Fraction of rows used for validation.
            test_frac (float): Fraction of rows used for testing.

        Returns:
            SplitRanges: Train, validation and test ranges, in that order.

        Raises:
            ConfigError: If the fractions leave no training rows.
        """

        def size(frac: float) -> int:
            return max(1, round(n_samples * frac)) if frac > 0 else 0

        n_test, n_val = size(test_frac), size(validation_frac)
        n_train = n_samples - n_val - n_test
        if n_train < 1:
            raise ConfigError(
                f"{n_samples} samples cannot be split with validation={validation_frac}, "
                f"test={test_frac}"
            )
        return cls(
            train=(0, n_train),
            validation=(n_train, n_train + n_val),
            test=(n_train + n_val, n_samples),
        )

    def stop(self) -> int:
        """End of the last non-empty range.

        Returns:
            int: Number of rows the ranges cover.
        """
        return max(self.train[1], self.validation[1], self.test[1])

    def size(self, name: str) -> int:
        """Row count of one split.

        Args:
            name (str): ``train``, ``validation`` or ``test``.

        Returns:
            int: Number of rows in the split.
        """
        start, stop = getattr(self, name)
        return stop - start


class ImageGeometry(BaseModel):
    """Image layout of a flattened, channel-major ``(channels, height, width)`` sample."""

    height: int
    width: int
    channels: int = 1

    @property
    def n_dim(self) -> int:
        """Pixels per sample."""
        return self.height * self.width * self.channels


@dataclass(frozen=True, eq=False)
class PreprocessMeta:
    """Dequantization record: lambda and the per-sample log|det| of the pixel -> logit map."""

    lambda_: float
    correction: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples with their split ranges and optional image/preprocessing metadata."""

    samples: np.ndarray
    split: SplitRanges
    image_geom: ImageGeometry | None = None
    preprocess_meta: PreprocessMeta | None = None
    source: str = ""

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError(f"Samples must be a matrix, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)
        if self.split.stop() > samples.shape[0]:
            raise ValueError(f"Split ranges exceed the {samples.shape[0]} available samples")
        if self.image_geom is not None and self.image_geom.n_dim != samples.shape[1]:
            raise ValueError(
                f"Image geometry {self.image_geom} does not match {samples.shape[1]} columns"
            )
        meta = self.preprocess_meta
        if meta is not None and meta.correction.shape != (samples.shape[0],):
            raise ValueError("Correction vector length must equal the number of samples")

    @property
    def n_samples(self) -> int:
        """Number of rows."""
        return self.samples.shape[0]

    @property
    def n_dim(self) -> int:
        """Number of columns."""
        return self.samples.shape[1]

    def split_samples(self, name: str) -> np.ndarray:
        """Rows of one split.

        Args:
            name (str): ``train``, ``validation`` or ``test``.

        Returns:
            np.ndarray: View into the sample matrix.
        """
        if name not in SPLIT_NAMES:
            raise ValueError(f"Unknown split '{name}', expected one of {SPLIT_NAMES}")
        start, stop = getattr(self.split, name)
        return self.samples[start:stop]

    def split_correction(self, name: str) -> np.ndarray | None:
        """Dequantization corrections of one split.

        Args:
            name (str): ``train``, ``validation`` or ``test``.

        Returns:
            np.ndarray | None: Per-sample corrections, or None for data that was not dequantized.
        """
        if self.preprocess_meta is None:
            return None
        start, stop = getattr(self.split, name)
        return self.preprocess_meta.correction[start:stop]

    def with_samples(
        self, samples: np.ndarray, preprocess_meta: PreprocessMeta | None = None
    ) -> Dataset:
        """Same splits and metadata over new samples.

        Args:
            samples (np.ndarray): Replacement sample matrix with the same row count.
            preprocess_meta (PreprocessMeta | None): Replacement metadata; kept when None.

        Returns:
            Dataset: The new dataset.
        """
        meta = preprocess_meta or self.preprocess_meta
        return replace(self, samples=samples, preprocess_meta=meta)


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise DataIOError(f"File {path} does not exist")
    try:
        raw = path.read_bytes()
        if raw[:2] == b"\x1f\x8b":
            raw = gzip.decompress(raw)
    except OSError as exc:
        raise DataIOError(f"Cannot read {path}: {exc}") from exc
    return raw


def _line_offsets(raw: bytes) -> tuple[list[bytes], list[int]]:
    """Split CSV bytes into non-empty lines with the byte offset of each line.

    Returns:
        tuple[list[bytes], list[int]]: Lines without their terminators, and their offsets.
    """
    lines, offsets = [], []
    position = 0
    for line in raw.split(b"\n"):
        stripped = line.rstrip(b"\r")
        if stripped.strip():
            lines.append(stripped)
            offsets.append(position)
        position += len(line) + 1
    return lines, offsets


def load_csv(
    path: Path,
    header: bool = False,
    validation_frac: float = 0.1,
    test_frac: float = 0.1,
) -> Dataset:
    """Read a comma-separated matrix, one sample per row.

    Args:
        path (Path): CSV file, plain or gzipped.
        header (bool): Skip the first line.
        validation_frac (float): Tail fraction used for validation.
        test_frac (float): Tail fraction used for testing.

    Returns:
        Dataset: Samples as float64 with a tail split.

    Raises:
        DataIOError: If the file is missing.
        DataFormatError: On ragged rows, non-numeric or non-finite cells, with the byte offset.
    """
    path = Path(path)
    raw = _read_bytes(path)
    lines, offsets = _line_offsets(raw)
    if header:
        lines, offsets = lines[1:], offsets[1:]
    if not lines:
        raise DataFormatError(f"CSV file {path} has no data rows", offset=0)

    width = lines[0].count(b",") + 1
    for line, offset in zip(lines, offsets, strict=True):
        if line.count(b",") + 1 != width:
            raise DataFormatError(
                f"Row has {line.count(b',') + 1} fields, expected {width}", offset=offset
            )

    current_run.log_info(f"Reading CSV data: {path}")
    frame = pl.read_csv(
        b"\n".join(lines), has_header=False, infer_schema_length=0, truncate_ragged_lines=False
    )
    numeric = frame.select(pl.all().str.strip_chars().cast(pl.Float64, strict=False))
    invalid = numeric.select(~pl.all().is_finite().fill_null(value=False))
    bad_rows = invalid.select(pl.any_horizontal(pl.all()).arg_true()).to_series()
    if len(bad_rows):
        row = int(bad_rows[0])
        col = invalid.row(row).index(True)
        fields = lines[row].split(b",")
        cell_start = sum(len(field) + 1 for field in fields[:col])
        kind = "Non-numeric" if numeric.row(row)[col] is None else "Non-finite"
        raise DataFormatError(
            f"{kind} cell '{fields[col].decode(errors='replace')}' at row {row + 1}, "
            f"column {col + 1}",
            offset=offsets[row] + cell_start,
        )

    samples = numeric.to_numpy().astype(np.float64)
    current_run.log_info(f"Loaded {samples.shape[0]} samples of dimension {samples.shape[1]}")
    return Dataset(
        samples=samples,
        split=SplitRanges.tail(samples.shape[0], validation_frac, test_frac),
        source=str(path),
    )


def load_idx(
    images_path: Path,
    n_take: int | None = None,
    validation_frac: float = 0.1,
    test_frac: float = 0.1,
) -> Dataset:
    """Read an IDX image file (plain or gzipped), flattening each image to a row of 0..255.

    Args:
        images_path (Path): IDX3 image file.
        n_take (int | None): Keep only the first ``n_take`` images.
        validation_frac (float): Tail fraction used for validation.
        test_frac (float): Tail fraction used for testing.

    Returns:
        Dataset: Pixel values as float64, with the image geometry.

    Raises:
        DataIOError: If the file is missing.
        DataFormatError: On a wrong magic number or a truncated file.
    """
    images_path = Path(images_path)
    raw = _read_bytes(images_path)
    if len(raw) < IDX_HEADER.size:
        raise DataFormatError(f"IDX header truncated in {images_path}", offset=len(raw))
    magic, count, rows, cols = IDX_HEADER.unpack_from(raw)
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(
            f"Bad IDX magic in {images_path}: expected 0x{IDX_IMAGE_MAGIC:08x}, "
            f"found 0x{magic:08x}",
            offset=0,
        )
    expected = IDX_HEADER.size + count * rows * cols
    if len(raw) < expected:
        raise DataFormatError(
            f"IDX file {images_path} truncated: {count} images of {rows}x{cols} "
            f"need {expected} bytes",
            offset=len(raw),
        )

    n_take = count if n_take is None else min(n_take, count)
    current_run.log_info(
        f"Reading {n_take} of {count} IDX images ({rows}x{cols}) from {images_path}"
    )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n_take * rows * cols, offset=IDX_HEADER.size)
    return Dataset(
        samples=pixels.reshape(n_take, rows * cols).astype(np.float64),
        split=SplitRanges.tail(n_take, validation_frac, test_frac),
        image_geom=ImageGeometry(height=rows, width=cols, channels=1),
        source=str(images_path),
    )


def load_cifar_bin(
    paths: list[Path],
    n_take: int | None = None,
    validation_frac: float = 0.1,
    test_frac: float = 0.1,
) -> Dataset:
    """Read CIFAR-10 binary batches; the label byte of each 3073-byte record is discarded.

    Args:
        paths (list[Path]): Batch files, read in order.
        n_take (int | None): Keep only the first ``n_take`` records.
        validation_frac (float): Tail fraction used for validation.
        test_frac (float): Tail fraction used for testing.

    Returns:
        Dataset: Channel-major pixel rows of length 3072.

    Raises:
        DataIOError: If a file is missing.
        DataFormatError: If a file ends inside a record.
    """
    blocks = []
    for path in map(Path, paths):
        raw = _read_bytes(path)
        partial = len(raw) % CIFAR_RECORD_BYTES
        if partial or not raw:
            raise DataFormatError(
                f"CIFAR file {path} is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                offset=len(raw) - partial,
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        blocks.append(records[:, 1:])
        current_run.log_info(f"Read {records.shape[0]} CIFAR records from {path}")

    pixels = np.concatenate(blocks, axis=0)
    if n_take is not None:
        pixels = pixels[:n_take]
    height, width, channels = CIFAR_GEOMETRY
    return Dataset(
        samples=pixels.astype(np.float64),
        split=SplitRanges.tail(pixels.shape[0], validation_frac, test_frac),
        image_geom=ImageGeometry(height=height, width=width, channels=channels),
        source=",".join(str(p) for p in paths),
    )


def load_dataset(
    paths: list[Path],
    data_format: str,
    header: bool = False,
    n_take: int | None = None,
    validation_frac: float = 0.1,
    test_frac: float = 0.1,
) -> Dataset:
    """Dispatch to the loader of ``data_format``.

    Args:
        paths (list[Path]): Data files; exactly one unless the format is ``cifar``.
        data_format (str): ``csv``, ``idx`` or ``cifar``.
        header (bool): Skip the first CSV line.
        n_take (int | None): Keep only the first ``n_take`` records.
        validation_frac (float): Tail fraction used for validation.
        test_frac (float): Tail fraction used for testing.

    Returns:
        Dataset: Loaded samples.

    Raises:
        ConfigError: On an unknown format or a file count the format does not accept.
    """
    if data_format == "cifar":
        return load_cifar_bin(paths, n_take, validation_frac, test_frac)
    if len(paths) != 1:
        raise ConfigError(f"Format '{data_format}' takes exactly one data file, got {len(paths)}")
    if data_format == "csv":
        dataset = load_csv(paths[0], header, validation_frac, test_frac)
        if n_take is not None and n_take < dataset.n_samples:
            split = SplitRanges.tail(n_take, validation_frac, test_frac)
            return Dataset(dataset.samples[:n_take], split, source=dataset.source)
        return dataset
    if data_format == "idx":
        return load_idx(paths[0], n_take, validation_frac, test_frac)
    raise ConfigError(f"Unknown data format '{data_format}', expected csv, idx or cifar")


def write_matrix_csv(path: Path, matrix: np.ndarray, columns: list[str] | None = None) -> Path:
    """Write a float matrix as CSV with a header row (the header is written even for 0 rows).

    Args:
        path (Path): Output file; parent directories are created.
        matrix (np.ndarray): Rows to write; a vector is written as one column.
        columns (list[str] | None): Column names, ``x0``, ``x1``, ... by default.

    Returns:
        Path: The written file.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    columns = columns or [f"x{j}" for j in range(matrix.shape[1])]
    frame = pl.DataFrame(
        {name: matrix[:, j] for j, name in enumerate(columns)},
        schema=dict.fromkeys(columns, pl.Float64),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.write_csv(path)
    return path
