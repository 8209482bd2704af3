"""Dataset readers. Images come back as float32 arrays [N, C, H, W] in [0, 1].

Expected layout under the data root (``$CAPSOSR_DATA_DIR`` by default)::

    mnist/train-images-idx3-ubyte[.gz]   mnist/train-labels-idx1-ubyte[.gz]
    mnist/t10k-images-idx3-ubyte[.gz]    mnist/t10k-labels-idx1-ubyte[.gz]
    <name>/<class_name>/*.png|jpg        (generic image folder, one dir per class)
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "CAPSOSR_DATA_DIR"

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def data_root(path=None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(DATA_DIR_ENV)
    if not env:
        raise FileNotFoundError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    return Path(env)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    with _open(path) as f:
        raw = f.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise ValueError(f"{path} is not an IDX file")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype_code], offset=4 + 4 * ndim)
    return data.reshape(dims)


def write_idx(path, array: np.ndarray) -> Path:
    """Write a uint8 array as an IDX file (gzipped if the name ends in .gz)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    if path.suffix == ".gz":
        # empty header filename and fixed mtime keep the bytes independent of path and time
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
            f.write(payload)
    else:
        path.write_bytes(payload)
    return path


def _find(folder: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (folder / name).exists():
            return folder / name
    raise FileNotFoundError(f"missing {folder / stem}[.gz]")


def load_mnist(split: str = "train", root=None) -> tuple[np.ndarray, np.ndarray]:
    """MNIST-format IDX pair for ``split`` in {"train", "test"}."""
    prefix = {"train": "train", "test": "t10k"}[split]
    folder = data_root(root) / "mnist"
    images = read_idx(_find(folder, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find(folder, f"{prefix}-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels in {folder}")
    return (images.astype(np.float32) / 255.0)[:, None], labels.astype(np.int64)


def load_image_folder(path, size: tuple[int, int] | None = None, grayscale: bool = False) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Class-per-directory images; labels index the sorted directory names."""
    from PIL import Image

    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"image folder not found: {path}")
    class_names = sorted(p.name for p in path.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(class_names):
        for f in sorted((path / name).iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            img = Image.open(f).convert("L" if grayscale else "RGB")
            if size is not None:
                img = img.resize(size)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            images.append(arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise ValueError(f"no images under {path}")
    return np.stack(images), np.asarray(labels, dtype=np.int64), class_names


def load_dataset(name: str, split: str, root=None) -> tuple[np.ndarray, np.ndarray]:
    if name == "mnist":
        return load_mnist(split, root)
    folder = data_root(root) / name / split
    images, labels, _ = load_image_folder(folder)
    return images, labels
