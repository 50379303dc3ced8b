import numpy as np
import pytest

from cdep import data as D


@pytest.fixture(scope="session")
def digits_root(tmp_path_factory):
    """Small cached digit corpus shared by harness tests."""
    root = tmp_path_factory.mktemp("digits")
    train, test = D.make_digit_corpus(600, 150, seed=7)
    D.write_mnist_idx(str(root / "train-images-idx3-ubyte"),
                      str(root / "train-labels-idx1-ubyte"),
                      train.inputs, train.labels)
    D.write_mnist_idx(str(root / "t10k-images-idx3-ubyte"),
                      str(root / "t10k-labels-idx1-ubyte"),
                      test.inputs, test.labels)
    return str(root)
