"""File helpers shared by the commands and the pipeline."""

import hashlib
import re
import unicodedata
from pathlib import Path

NAME_UNSAFE = re.compile(r"[^\w-]+")
HASH_CHUNK = 1 << 16


def sha256_of_file(file_path: Path) -> str:
    """Hex SHA-256 of a file's bytes.

    Args:
        file_path (Path): File to hash.

    Returns:
        str: 64 hex characters.
    """
    hasher = hashlib.sha256()
    with Path(file_path).open("rb") as f:
        while chunk := f.read(HASH_CHUNK):
            hasher.update(chunk)
    return hasher.hexdigest()


def default_run_name(data_path: Path) -> str:
    """Run directory name derived from a data file name.

    Accents are stripped and any run of characters other than letters, digits and underscores
    becomes one underscore, so ``Train-Images.idx3-ubyte`` gives ``train_images``.

    Args:
        data_path (Path): Data file the run trains on.

    Returns:
        str: The cleaned stem, or ``run`` when nothing is left.
    """
    stem = Path(data_path).name.split(".")[0].replace("-", "_")
    plain = "".join(c for c in unicodedata.normalize("NFD", stem) if not unicodedata.combining(c))
    return NAME_UNSAFE.sub("_", plain).strip("_").lower() or "run"
