import gzip

import numpy as np
import polars as pl
import pytest
from errors import ConfigError, DataFormatError, DataIOError
from flow_io import (
    Dataset,
    ImageGeometry,
    PreprocessMeta,
    SplitRanges,
    load_cifar_bin,
    load_csv,
    load_dataset,
    load_idx,
    write_matrix_csv,
)
from pydantic import ValidationError


class TestSplitRanges:
    def test_tail_split(self):
        split = SplitRanges.tail(100, 0.1, 0.2)
        assert split.train == (0, 70)
        assert split.validation == (70, 80)
        assert split.test == (80, 100)
        assert split.size("test") == 20

    def test_small_fractions_keep_one_row(self):
        split = SplitRanges.tail(5, 0.01, 0.01)
        assert split.size("validation") == 1
        assert split.size("test") == 1
        assert split.size("train") == 3

    def test_zero_fractions(self):
        split = SplitRanges.tail(4, 0.0, 0.0)
        assert split.train == (0, 4)
        assert split.size("validation") == 0

    def test_no_training_rows(self):
        with pytest.raises(ConfigError):
            SplitRanges.tail(2, 0.5, 0.5)

    def test_overlap_rejected(self):
        with pytest.raises(ValidationError, match="overlap"):
            SplitRanges(train=(0, 10), validation=(5, 12), test=(12, 14))


class TestDataset:
    def test_split_views(self):
        data = Dataset(np.arange(20.0).reshape(10, 2), SplitRanges.tail(10, 0.2, 0.2))
        np.testing.assert_array_equal(data.split_samples("test"), [[16, 17], [18, 19]])
        assert data.split_correction("test") is None

    def test_ranges_must_fit(self):
        with pytest.raises(ValueError, match="exceed"):
            Dataset(np.zeros((3, 2)), SplitRanges(train=(0, 3), validation=(3, 4), test=(4, 4)))

    def test_correction_length(self):
        with pytest.raises(ValueError, match="Correction"):
            Dataset(
                np.zeros((3, 1)),
                SplitRanges.tail(3, 0.0, 0.0),
                preprocess_meta=PreprocessMeta(lambda_=0.05, correction=np.zeros(2)),
            )

    def test_geometry_must_match(self):
        with pytest.raises(ValueError, match="geometry"):
            Dataset(
                np.zeros((2, 5)), SplitRanges.tail(2, 0.0, 0.0), ImageGeometry(height=2, width=2)
            )

    def test_unknown_split(self):
        data = Dataset(np.zeros((3, 1)), SplitRanges.tail(3, 0.0, 0.0))
        with pytest.raises(ValueError, match="Unknown split"):
            data.split_samples("holdout")


class TestLoadCsv:
    def test_plain_matrix(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("1,2\n3,4\n", encoding="utf-8")
        data = load_csv(path, validation_frac=0.0, test_frac=0.0)
        np.testing.assert_array_equal(data.samples, [[1.0, 2.0], [3.0, 4.0]])
        assert data.samples.dtype == np.float64
        assert data.split.train == (0, 2)

    def test_header_and_blank_lines(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,b\r\n1.5, -2e-3\r\n\n3,4\r\n", encoding="utf-8")
        data = load_csv(path, header=True, validation_frac=0.0, test_frac=0.0)
        np.testing.assert_allclose(data.samples, [[1.5, -2e-3], [3.0, 4.0]])

    def test_gzipped(self, tmp_path):
        path = tmp_path / "data.csv.gz"
        path.write_bytes(gzip.compress(b"1,2\n3,4\n5,6\n"))
        data = load_csv(path, validation_frac=0.0, test_frac=0.0)
        assert data.samples.shape == (3, 2)

    def test_fixture_file(self, gmm_csv):
        data = load_csv(gmm_csv)
        assert data.samples.shape == (600, 2)
        assert data.split.size("validation") == 60
        assert data.split.size("test") == 60

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("1,2\n3,x\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="row 2, column 2") as info:
            load_csv(path, validation_frac=0.0, test_frac=0.0)
        assert info.value.offset == 6

    @pytest.mark.parametrize("cell", ["nan", "inf", "-inf"])
    def test_non_finite_cell(self, tmp_path, cell):
        path = tmp_path / "data.csv"
        path.write_text(f"1,2\n3,{cell}\n5,6\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="Non-finite cell") as info:
            load_csv(path, validation_frac=0.0, test_frac=0.0)
        assert info.value.offset == 6

    def test_first_bad_cell_wins(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("1,2\nnan,x\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="Non-finite cell .nan. at row 2, column 1"):
            load_csv(path, validation_frac=0.0, test_frac=0.0)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("1,2\n3\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="1 fields, expected 2") as info:
            load_csv(path, validation_frac=0.0, test_frac=0.0)
        assert info.value.offset == 4

    def test_empty_file(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("\n", encoding="utf-8")
        with pytest.raises(DataFormatError):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError):
            load_csv(tmp_path / "absent.csv")


class TestLoadIdx:
    def test_pixels_and_geometry(self, idx_file):
        images = np.array([[[0, 127], [128, 255]]], dtype=np.uint8)
        data = load_idx(idx_file(images), validation_frac=0.0, test_frac=0.0)
        np.testing.assert_array_equal(data.samples, [[0.0, 127.0, 128.0, 255.0]])
        assert data.image_geom == ImageGeometry(height=2, width=2, channels=1)

    def test_gzipped(self, idx_file):
        images = np.arange(3 * 4 * 5, dtype=np.uint8).reshape(3, 4, 5)
        path = idx_file(images, name="images.gz", gz=True)
        data = load_idx(path, validation_frac=0.0, test_frac=0.0)
        np.testing.assert_array_equal(data.samples, images.reshape(3, 20))

    def test_take(self, idx_file):
        images = np.zeros((10, 2, 2), dtype=np.uint8)
        data = load_idx(idx_file(images), n_take=4, validation_frac=0.0, test_frac=0.25)
        assert data.n_samples == 4
        assert data.split.size("test") == 1

    def test_label_file_magic(self, idx_file):
        with pytest.raises(DataFormatError, match="found 0x00000801") as info:
            load_idx(idx_file(np.zeros((1, 2, 2), dtype=np.uint8), magic=0x00000801))
        assert info.value.offset == 0

    def test_truncated(self, idx_file):
        path = idx_file(np.zeros((3, 4, 4), dtype=np.uint8))
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(DataFormatError, match="truncated") as info:
            load_idx(path)
        assert info.value.offset == len(raw) - 5


class TestLoadCifar:
    def test_labels_dropped(self, cifar_file):
        pixels = np.random.default_rng(0).integers(0, 256, size=(3, 3072))
        path = cifar_file([7, 0, 9], pixels)
        data = load_cifar_bin([path], validation_frac=0.0, test_frac=0.0)
        np.testing.assert_array_equal(data.samples, pixels)
        assert data.image_geom.n_dim == 3072
        assert data.image_geom.channels == 3

    def test_several_batches(self, cifar_file):
        pixels = np.zeros((2, 3072))
        paths = [
            cifar_file([1, 2], pixels, name="a.bin"),
            cifar_file([3, 4], pixels + 1, name="b.bin"),
        ]
        data = load_cifar_bin(paths, validation_frac=0.0, test_frac=0.0)
        assert data.n_samples == 4
        np.testing.assert_array_equal(data.samples[2:], 1.0)

    def test_partial_record(self, cifar_file):
        path = cifar_file([1], np.zeros((1, 3072)))
        path.write_bytes(path.read_bytes() + bytes(10))
        with pytest.raises(DataFormatError, match="3073-byte records") as info:
            load_cifar_bin([path])
        assert info.value.offset == 3073


class TestLoadDataset:
    def test_csv_take(self, gmm_csv):
        data = load_dataset([gmm_csv], "csv", n_take=100)
        assert data.n_samples == 100
        assert data.split.size("test") == 10

    def test_one_file_for_csv(self, gmm_csv):
        with pytest.raises(ConfigError, match="exactly one"):
            load_dataset([gmm_csv, gmm_csv], "csv")

    def test_unknown_format(self, gmm_csv):
        with pytest.raises(ConfigError, match="Unknown data format"):
            load_dataset([gmm_csv], "parquet")


class TestWriteMatrixCsv:
    def test_default_columns(self, tmp_path):
        path = write_matrix_csv(tmp_path / "out" / "m.csv", np.array([[1.0, 2.0], [3.0, 4.0]]))
        frame = pl.read_csv(path)
        assert frame.columns == ["x0", "x1"]
        assert frame.to_numpy().tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_header_only(self, tmp_path):
        path = write_matrix_csv(tmp_path / "empty.csv", np.zeros((0, 3)))
        assert path.read_text(encoding="utf-8").strip() == "x0,x1,x2"
