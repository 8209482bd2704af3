import os
from pathlib import Path

import numpy as np
import pytest
import torch

from capsosr.datasets import DATA_DIR_ENV, write_idx

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@pytest.fixture
def double_precision():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


def _has_mnist(root: Path) -> bool:
    folder = root / "mnist"
    return all((folder / f).exists() or (folder / f"{f}.gz").exists() for f in MNIST_FILES)


def build_desk_mnist(root: Path, per_class_train: int = 400) -> Path:
    """Write IDX files from the 5000-digit MNIST sample bundled with mlxtend.

    Each class contributes ``per_class_train`` training images; the rest form the test set.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    rng = np.random.default_rng(0)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        train += list(idx[:per_class_train])
        test += list(idx[per_class_train:])
    train, test = np.sort(train), np.sort(test)
    folder = root / "mnist"
    write_idx(folder / "train-images-idx3-ubyte.gz", X[train].reshape(-1, 28, 28).astype(np.uint8))
    write_idx(folder / "train-labels-idx1-ubyte.gz", y[train].astype(np.uint8))
    write_idx(folder / "t10k-images-idx3-ubyte.gz", X[test].reshape(-1, 28, 28).astype(np.uint8))
    write_idx(folder / "t10k-labels-idx1-ubyte.gz", y[test].astype(np.uint8))
    return root


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    """A data root holding MNIST: $CAPSOSR_DATA_DIR when it has it, else the bundled sample."""
    env = os.environ.get(DATA_DIR_ENV)
    if env and _has_mnist(Path(env)):
        return Path(env)
    pytest.importorskip("mlxtend")
    return build_desk_mnist(tmp_path_factory.mktemp("data"))


def toy_open_set(n_per_class=12, K=3, size=8, seed=0):
    """Known classes are bright quadrant patterns; unknowns light the whole image."""
    from capsosr.training import OpenSetData

    rng = np.random.default_rng(seed)

    def images(label, n):
        x = rng.random((n, 1, size, size)).astype(np.float32) * 0.2
        if label < K:
            h = size // 2
            r, c = divmod(label, 2)
            x[:, :, r * h:(r + 1) * h, c * h:(c + 1) * h] += 0.8
        else:
            x += 0.5
        return np.clip(x, 0, 1)

    def block(n):
        xs = np.concatenate([images(k, n) for k in range(K)])
        ys = np.repeat(np.arange(K), n)
        return xs, ys

    tx, ty = block(n_per_class)
    cx, cy = block(4)
    ex, ey = block(6)
    ux = images(K, 6)
    return OpenSetData(
        known_classes=list(range(K)),
        train_x=tx, train_y=ty, calib_x=cx, calib_y=cy,
        test_x=np.concatenate([ex, ux]), test_y=np.concatenate([ey, np.full(6, K)]),
    )


TOY_CONFIG = dict(
    width=4, primary_channels=2, primary_dim=4, class_dim=4, latent_dim=4, decoder_width=4,
    batch_size=8, epochs=2, lr=1e-2,
)


@pytest.fixture
def toy_data():
    return toy_open_set()


@pytest.fixture
def toy_config():
    from capsosr.config import ExperimentConfig

    return ExperimentConfig(**TOY_CONFIG)


# --- acceptance summary -------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail" and rep.when == "call"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"criterion {number:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
