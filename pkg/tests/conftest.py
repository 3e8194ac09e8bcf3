import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parent.parent


def dataset_dir(name, marker):
    """First existing candidate directory for a dataset, or None."""
    env = os.environ.get(f"MSNN_{name.upper()}_DIR")
    candidates = [Path(env)] if env else []
    candidates += [ROOT / "data" / name, Path.home() / "data" / name]
    for c in candidates:
        if (c / marker).exists():
            return c
    return None


MNIST_DIR = dataset_dir("mnist", "train-images-idx3-ubyte")
COIL_DIR = dataset_dir("coil20", "obj1__0.png") or dataset_dir("coil20", "obj1__0.pgm")


@pytest.fixture(scope="session")
def mnist_dir():
    if MNIST_DIR is None:
        pytest.fail("MNIST IDX files not found; set MSNN_MNIST_DIR")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    from msnn.data import load_mnist_dir
    return load_mnist_dir(mnist_dir, "train")


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    from msnn.data import load_mnist_dir
    return load_mnist_dir(mnist_dir, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def reproducible_bytes(path):
    """File contents with the wall-clock column of metrics.csv removed."""
    path = Path(path)
    if path.name != "metrics.csv":
        return path.read_bytes()
    rows = path.read_text().splitlines()
    return "\n".join(r.rsplit(",", 1)[0] for r in rows).encode()


# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if passed else 'FAIL'} - {detail}")
