from pathlib import Path

import pytest
from config import build_run_config, parse_lambda
from errors import ConfigError
from tri_core import Nonlinearity


class TestParseLambda:
    @pytest.mark.parametrize(
        ("value", "expected"), [("mnist", 1e-6), ("CIFAR", 0.05), ("0.01", 0.01), (0.2, 0.2)]
    )
    def test_values(self, value, expected):
        assert parse_lambda(value) == expected

    @pytest.mark.parametrize("value", [None, "none", "", " None "])
    def test_disabled(self, value):
        assert parse_lambda(value) is None

    @pytest.mark.parametrize("value", ["imagenet", "0.5", "-1"])
    def test_invalid(self, value):
        with pytest.raises(ConfigError):
            parse_lambda(value)


class TestRunConfig:
    def test_train_defaults(self):
        cfg = build_run_config(command="train", data=["data.csv"])
        assert cfg.data == [Path("data.csv")]
        assert cfg.nonlinearity is Nonlinearity.LOG_SYM
        assert cfg.block_size == 4
        assert cfg.n_layers == 4
        assert cfg.flip
        assert cfg.output_dir() == Path("runs") / "data"

    def test_train_needs_data(self):
        with pytest.raises(ConfigError, match="--data"):
            build_run_config(command="train")

    @pytest.mark.parametrize("command", ["eval", "sample", "check", "grid"])
    def test_model_required(self, command):
        with pytest.raises(ConfigError, match="--model"):
            build_run_config(command=command, data=["data.csv"])

    def test_fractions_leave_training_rows(self):
        with pytest.raises(ConfigError, match="fractions"):
            build_run_config(data=["d.csv"], validation_frac=0.6, test_frac=0.4)

    def test_grid_range_arity(self):
        with pytest.raises(ConfigError, match="range"):
            build_run_config(command="grid", model="m.trin", grid_range=[0.0, 1.0, 2.0])

    def test_messages_joined(self):
        with pytest.raises(ConfigError) as info:
            build_run_config(data=["d.csv"], block_size=0, batch_size=0)
        assert "block_size" in str(info.value)
        assert "batch_size" in str(info.value)
        assert info.value.exit_code == 3

    def test_unknown_command(self):
        with pytest.raises(ConfigError, match="command"):
            build_run_config(command="plot", model="m.trin")


class TestDequantizationLambda:
    @pytest.mark.parametrize(
        ("data_format", "expected"), [("csv", None), ("idx", 1e-6), ("cifar", 0.05)]
    )
    def test_format_defaults(self, data_format, expected):
        cfg = build_run_config(data=["x"], data_format=data_format)
        assert cfg.dequantization_lambda() == expected

    def test_explicit_value(self):
        cfg = build_run_config(data=["x"], data_format="idx", lambda_="cifar")
        assert cfg.dequantization_lambda() == 0.05

    def test_explicit_none(self):
        cfg = build_run_config(data=["x"], data_format="idx", lambda_="none")
        assert cfg.dequantization_lambda() is None

    def test_csv_with_lambda(self):
        cfg = build_run_config(data=["x"], lambda_=0.01)
        assert cfg.dequantization_lambda() == 0.01
