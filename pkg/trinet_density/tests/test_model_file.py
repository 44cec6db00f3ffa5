import struct

import numpy as np
import pytest
from errors import DataIOError, ModelFileError
from flow_io import ImageGeometry
from model_file import (
    MAGIC,
    PREFIX,
    ModelFile,
    header_extra,
    load_model_file,
    naive_float_count,
    parse_model,
    payload_float_count,
    save_model_file,
    serialize_model,
)
from preprocess import Normalizer, absorb_normalizer
from tri_core import flow_forward


def header_of(data: bytes) -> dict[str, str]:
    _, _, length = PREFIX.unpack_from(data)
    text = data[PREFIX.size : PREFIX.size + length].decode()
    return dict(line.split("=", 1) for line in text.splitlines())


class TestSerialize:
    def test_round_trip_is_bit_identical(self, make_flow):
        model = make_flow(3, 2, n_layers=3, nonlinearity="tanh", flip=False, seed=4)
        extra = header_extra(0.05, ImageGeometry(height=1, width=3))
        data = serialize_model(ModelFile(model, seed=17, extra=extra))
        parsed = parse_model(data)
        assert serialize_model(parsed) == data
        for before, after in zip(model.parameters(), parsed.model.parameters(), strict=True):
            np.testing.assert_array_equal(before, after)
        assert parsed.model.flip_after == (False, False, False)
        assert parsed.model.nonlinearity == model.nonlinearity
        assert parsed.seed == 17

    def test_layout(self, make_flow):
        model = make_flow(2, 3, n_layers=2)
        data = serialize_model(ModelFile(model))
        magic, version, length = PREFIX.unpack_from(data)
        assert magic == MAGIC == b"TRIN"
        assert version == 1
        payload = data[PREFIX.size + length :]
        assert len(payload) == 8 * 2 * (2 * 3 * 2 + 2 * 2 * 3 + 2)
        first = struct.unpack_from("<d", payload)[0]
        assert first == model.layers[0].packed[0, 0]

    def test_header_keys(self, make_flow):
        model = absorb_normalizer(make_flow(2, 2, n_layers=2), Normalizer.identity(2))
        header = header_of(serialize_model(ModelFile(model, seed=3, extra=header_extra())))
        assert header["n_dim"] == "2"
        assert header["block_size"] == "2"
        assert header["n_layers"] == "2"
        assert header["nonlinearity"] == "log"
        assert header["flip_after"] == "1,1"
        assert header["norm_absorbed"] == "1"
        assert header["seed"] == "3"
        assert header["preprocess"] == "none"
        assert header["created_by"] == "trinet_density"

    def test_preprocessing_metadata(self, make_flow):
        extra = header_extra(1e-6, ImageGeometry(height=2, width=2, channels=1))
        parsed = parse_model(serialize_model(ModelFile(make_flow(4, 1), extra=extra)))
        assert parsed.preprocess == "logit"
        assert parsed.lambda_ == 1e-6
        assert parsed.image_geom == ImageGeometry(height=2, width=2, channels=1)

    def test_unknown_keys_are_kept(self, make_flow):
        model_file = ModelFile(make_flow(2, 2), extra={"note": "first run"})
        parsed = parse_model(serialize_model(model_file))
        assert parsed.extra["note"] == "first run"
        assert parsed.lambda_ is None
        assert parsed.image_geom is None

    def test_newline_in_value(self, make_flow):
        with pytest.raises(ModelFileError):
            serialize_model(ModelFile(make_flow(2, 2), extra={"note": "two\nlines"}))

    def test_same_density_after_reload(self, make_flow, rng, tmp_path):
        model = make_flow(3, 2, n_layers=2)
        path = save_model_file(tmp_path / "nested" / "model.trin", ModelFile(model))
        reloaded = load_model_file(path).model
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(flow_forward(model, x)[1], flow_forward(reloaded, x)[1])


class TestParseErrors:
    def test_bad_magic(self, make_flow):
        data = b"NOPE" + serialize_model(ModelFile(make_flow(2, 2)))[4:]
        with pytest.raises(ModelFileError, match="Bad magic"):
            parse_model(data)

    def test_version(self, make_flow):
        data = bytearray(serialize_model(ModelFile(make_flow(2, 2))))
        data[4:8] = struct.pack("<I", 9)
        with pytest.raises(ModelFileError, match="version 9"):
            parse_model(bytes(data))

    @pytest.mark.parametrize("delta", [-8, -1, 8])
    def test_payload_size(self, make_flow, delta):
        data = serialize_model(ModelFile(make_flow(2, 2)))
        data = data[:delta] if delta < 0 else data + bytes(delta)
        with pytest.raises(ModelFileError, match="Payload has"):
            parse_model(data)

    def test_missing_key(self):
        text = b"n_dim=1\nblock_size=1\n"
        with pytest.raises(ModelFileError, match="missing keys"):
            parse_model(PREFIX.pack(MAGIC, 1, len(text)) + text)

    def test_short_file(self):
        with pytest.raises(ModelFileError, match="too short"):
            parse_model(b"TRIN")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError):
            load_model_file(tmp_path / "absent.trin")


class TestStorage:
    def test_float_count(self):
        assert payload_float_count(3, 2) == 3 * 2 * 3 + 2 * 3 * 2 + 3
        assert payload_float_count(3, 2, n_layers=4) == 4 * payload_float_count(3, 2)

    @pytest.mark.parametrize("n_dim", [16, 32, 100])
    @pytest.mark.parametrize("block_size", [1, 4, 16])
    def test_about_a_quarter_of_naive(self, n_dim, block_size):
        ratio = payload_float_count(n_dim, block_size) / naive_float_count(n_dim, block_size)
        assert ratio < 0.3

    def test_matches_parameters(self, make_flow):
        model = make_flow(5, 3, n_layers=2)
        assert model.parameter_count() == payload_float_count(5, 3, 2)
