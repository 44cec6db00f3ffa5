"""OpenHEXA pipeline running the density-estimation subcommands on workspace files."""

from pathlib import Path

from commands import run_command
from config import COMMANDS, build_run_config
from errors import CheckFailedError, TriNetError
from openhexa.sdk import current_run, parameter, pipeline, workspace
from utils import default_run_name


@pipeline("trinet_density")
@parameter(
    "command",
    name="Command",
    type=str,
    choices=list(COMMANDS),
    default="train",
    help=(
        "train: fit and save a model; eval: NLL/bpd; sample; "
        "check: gradient/logdet/inversion; grid"
    ),
    required=True,
)
@parameter(
    "data_files",
    name="Data files",
    type=str,
    multiple=True,
    help="Paths relative to the workspace files directory (several only for CIFAR batches)",
    required=False,
)
@parameter(
    "data_format",
    name="Data format",
    type=str,
    choices=["csv", "idx", "cifar"],
    default="csv",
    required=False,
)
@parameter(
    "model_file",
    name="Model file",
    type=str,
    help="Model to evaluate, sample from or check (relative to the workspace files directory)",
    required=False,
)
@parameter(
    "output_path",
    name="Output path",
    type=str,
    help=(
        "Output directory for train, output CSV for sample and grid "
        "(default: `trinet-density/<data file name>`)"
    ),
    required=False,
)
@parameter("block_size", name="Block size", type=int, default=4, required=False)
@parameter("n_layers", name="Layers", type=int, default=4, required=False)
@parameter(
    "nonlinearity",
    name="Nonlinearity",
    type=str,
    choices=["log", "tanh"],
    default="log",
    required=False,
)
@parameter("flip", name="Flip between layers", type=bool, default=True, required=False)
@parameter("lr", name="Initial learning rate", type=float, default=1e-4, required=False)
@parameter("batch_size", name="Batch size", type=int, default=64, required=False)
@parameter("l1_eta", name="L1 weight", type=float, default=0.0, required=False)
@parameter("max_epochs", name="Maximum epochs", type=int, default=100, required=False)
@parameter(
    "augment_shift",
    name="Shift augmentation",
    type=float,
    default=0.0,
    help="Largest circular image shift as a fraction of the side (images only)",
    required=False,
)
@parameter(
    "lambda_preset",
    name="Logit lambda",
    type=str,
    help="A number, 'mnist', 'cifar' or 'none' (default follows the data format)",
    required=False,
)
@parameter("seed", name="Seed", type=int, default=0, required=False)
@parameter("count", name="Sample count", type=int, default=100, required=False)
@parameter("resolution", name="Grid resolution", type=int, default=100, required=False)
def trinet_density(
    command: str,
    data_files: list[str],
    data_format: str,
    model_file: str,
    output_path: str,
    block_size: int,
    n_layers: int,
    nonlinearity: str,
    flip: bool,
    lr: float,
    batch_size: int,
    l1_eta: float,
    max_epochs: int,
    augment_shift: float,
    lambda_preset: str,
    seed: int,
    count: int,
    resolution: int,
):
    """Resolve workspace paths, validate the configuration and run one command."""
    root = Path(workspace.files_path)
    values = {
        "command": command,
        "data": [root / path for path in data_files or []],
        "data_format": data_format,
        "block_size": block_size,
        "n_layers": n_layers,
        "nonlinearity": nonlinearity,
        "flip": flip,
        "lr0": lr,
        "batch_size": batch_size,
        "l1_eta": l1_eta,
        "max_epochs": max_epochs,
        "augment_shift": augment_shift,
        "seed": seed,
        "count": count,
        "resolution": resolution,
    }
    if model_file:
        values["model"] = root / model_file
    if lambda_preset:
        values["lambda_"] = lambda_preset
    values["out"] = root / (output_path or default_output(command, data_files))

    try:
        cfg = build_run_config(**values)
        report = run_command(cfg)
    except CheckFailedError as exc:
        for key, value in exc.values.items():
            current_run.log_info(f"{key}={value}")
        current_run.log_critical(f"error category={exc.category} {exc}")
        raise
    except TriNetError as exc:
        current_run.log_critical(f"error category={exc.category} {exc}")
        raise

    for key, value in report.values.items():
        current_run.log_info(f"{key}={value}")


def default_output(command: str, data_files: list[str] | None) -> str:
    """Default workspace-relative output location of a command.

    Args:
        command (str): Subcommand name.
        data_files (list[str] | None): Workspace-relative data files of the run.

    Returns:
        str: ``trinet-density/<name>`` for training, a CSV file name otherwise.
    """
    if command == "train":
        name = default_run_name(Path(data_files[0])) if data_files else "run"
        return f"trinet-density/{name}"
    return f"trinet-density/{command}.csv"


if __name__ == "__main__":
    trinet_density()
