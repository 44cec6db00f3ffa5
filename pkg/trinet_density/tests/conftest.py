import gzip

import numpy as np
import pytest
from synthetic import cifar_bytes, gmm_2d, idx_bytes, perturbed_flow


@pytest.fixture
def make_flow():
    return perturbed_flow


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def gmm_csv(tmp_path):
    path = tmp_path / "gmm.csv"
    np.savetxt(path, gmm_2d(600, seed=3), delimiter=",")
    return path


@pytest.fixture
def idx_file(tmp_path):
    def write(images, name="images.idx3-ubyte", magic=0x00000803, gz=False):
        raw = idx_bytes(images, magic)
        path = tmp_path / name
        path.write_bytes(gzip.compress(raw) if gz else raw)
        return path

    return write


@pytest.fixture
def cifar_file(tmp_path):
    def write(labels, pixels, name="data_batch_1.bin"):
        path = tmp_path / name
        path.write_bytes(cifar_bytes(labels, pixels))
        return path

    return write
