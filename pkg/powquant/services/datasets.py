"""
DATASET SERVICE - Desk-scale synthetic data and IDX files

1. seg - textured elliptical "glands" on a textured background, with binary masks
2. cls - synthetic shape images (10 shape classes), optional label noise on the training split
3. asr - frame sequences drawn from class-conditional Gaussian emitters, per-frame labels
4. read_idx / write_idx - the IDX byte layout (big-endian, magic 0x0000 | type | rank)

Everything is a pure function of (task, params, seed): the same inputs give
byte-identical arrays.
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from powquant import config as settings
from powquant.schemas import DataConfig
from powquant.utils import DatasetError, get_logger

logger = get_logger(__name__)

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES: Dict[int, str] = {
    0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8",
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in IDX_DTYPES.items()}

SPLIT_STREAMS = {"train": 0, "val": 1, "test": 2}
CLS_SHAPES = ("hbar", "vbar", "square", "disk", "cross", "diag", "antidiag", "ring", "corner", "dots")


@dataclass
class Split:
    X: np.ndarray
    Y: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, indices) -> "Split":
        indices = np.asarray(indices, dtype=np.int64)
        return Split(self.X[indices], self.Y[indices])


@dataclass
class DatasetSplits:
    train: Split
    val: Split
    test: Split
    n_classes: int

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.train.X.shape[1:])


# IDX files
def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def read_idx(path: Union[str, Path]) -> np.ndarray:
    """Read an IDX file (optionally .gz) into a native-endian array."""
    path = Path(path)
    try:
        with _open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read IDX file {path}: {exc}") from exc
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DatasetError(f"{path}: bad IDX magic {data[:4].hex()}")
    type_code, rank = data[2], data[3]
    if type_code not in IDX_DTYPES:
        raise DatasetError(f"{path}: unknown IDX type 0x{type_code:02x}")
    header = 4 + 4 * rank
    if len(data) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", data[4:header])
    dtype = np.dtype(IDX_DTYPES[type_code])
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if len(data) != header + count * dtype.itemsize:
        raise DatasetError(f"{path}: expected {count} items of {dtype.itemsize} bytes after the header")
    return np.frombuffer(data, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    """Write an array as IDX; the type byte follows the array dtype."""
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise DatasetError(f"dtype {array.dtype} has no IDX type code")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with _open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.astype(IDX_DTYPES[code]).tobytes())


def export_idx_dataset(splits: DatasetSplits, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write cls splits as uint8 IDX files (images scaled to 0..255)."""
    out_dir = Path(out_dir)
    written = {}
    for name, split in (("train", splits.train), ("val", splits.val), ("test", splits.test)):
        images = np.clip(np.rint(split.X[..., 0] * 255.0), 0, 255).astype(np.uint8)
        written[f"{name}-images"] = out_dir / f"{name}-images-idx3-ubyte"
        written[f"{name}-labels"] = out_dir / f"{name}-labels-idx1-ubyte"
        write_idx(written[f"{name}-images"], images)
        write_idx(written[f"{name}-labels"], split.Y.astype(np.uint8))
    return written


def resolve_idx_dir(idx_dir: Union[str, Path]) -> Path:
    """Absolute IDX paths as given; relative ones under POWQUANT_DATA_DIR."""
    path = Path(idx_dir)
    return path if path.is_absolute() else Path(settings.DATA_DIR) / path


def load_idx_dataset(idx_dir: Union[str, Path], n_classes: int = 10) -> DatasetSplits:
    """Load {train,val,test}-{images,labels} IDX files; a missing val split is empty."""
    idx_dir = Path(idx_dir)

    def load(name: str) -> Split:
        images = idx_dir / f"{name}-images-idx3-ubyte"
        labels = idx_dir / f"{name}-labels-idx1-ubyte"
        if not images.exists() and name == "val":
            return None
        X = read_idx(images).astype(np.float32) / 255.0
        Y = read_idx(labels).astype(np.int64)
        if X.ndim != 3 or len(X) != len(Y):
            raise DatasetError(f"{name}: expected N x H x W images and N labels, got {X.shape} / {Y.shape}")
        return Split(X[..., None], Y)

    train, val, test = load("train"), load("val"), load("test")
    if val is None:
        val = Split(train.X[:0], train.Y[:0])
    return DatasetSplits(train=train, val=val, test=test, n_classes=n_classes)


# Segmentation
def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fx, fy = rng.uniform(0.3, 1.2, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(fx * xx + fy * yy + phase)


def _seg_sample(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        ay, ax = rng.uniform(0.1 * size, 0.25 * size, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    background = 0.35 + 0.1 * _texture(rng, size)
    gland = 0.6 + 0.15 * _texture(rng, size)
    image = np.where(mask, gland, background) + rng.normal(0, 0.08, size=(size, size))
    return image.astype(np.float32)[..., None], mask.astype(np.int64)


def _seg_split(rng: np.random.Generator, n: int, size: int) -> Split:
    pairs = [_seg_sample(rng, size) for _ in range(n)]
    X = np.stack([p[0] for p in pairs]) if pairs else np.zeros((0, size, size, 1), np.float32)
    Y = np.stack([p[1] for p in pairs]) if pairs else np.zeros((0, size, size), np.int64)
    return Split(X, Y)


# Classification
def _draw_shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    half = size // 2
    cy, cx = half + rng.integers(-2, 3, size=2)
    r = int(rng.integers(size // 5, size // 3 + 1))
    t = max(1, size // 8)
    if kind == "hbar":
        img[cy - t:cy + t, cx - r:cx + r] = 1
    elif kind == "vbar":
        img[cy - r:cy + r, cx - t:cx + t] = 1
    elif kind == "square":
        img[cy - r:cy + r, cx - r:cx + r] = 1
    elif kind == "disk":
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    elif kind == "cross":
        img[cy - t:cy + t, cx - r:cx + r] = 1
        img[cy - r:cy + r, cx - t:cx + t] = 1
    elif kind == "diag":
        img[(np.abs((yy - cy) - (xx - cx)) <= t) & (np.abs(yy - cy) <= r)] = 1
    elif kind == "antidiag":
        img[(np.abs((yy - cy) + (xx - cx)) <= t) & (np.abs(yy - cy) <= r)] = 1
    elif kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        img[(d2 <= r * r) & (d2 >= (r - t) ** 2)] = 1
    elif kind == "corner":
        img[cy - r:cy + r, cx - r:cx - r + 2 * t] = 1
        img[cy + r - 2 * t:cy + r, cx - r:cx + r] = 1
    else:
        img[(yy % 4 == cy % 4) & (xx % 4 == cx % 4) & (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)] = 1
    return img


def _cls_split(rng: np.random.Generator, n: int, size: int, n_classes: int, label_noise: float) -> Split:
    Y = rng.integers(0, n_classes, size=n)
    X = np.zeros((n, size, size, 1), dtype=np.float32)
    for i, label in enumerate(Y):
        img = _draw_shape(CLS_SHAPES[label], size, rng) * rng.uniform(0.6, 1.0)
        X[i, ..., 0] = np.clip(img + rng.normal(0, 0.15, size=(size, size)), 0.0, 1.0)
    if label_noise > 0:
        flip = rng.random(n) < label_noise
        Y = np.where(flip, rng.integers(0, n_classes, size=n), Y)
    return Split(X, Y.astype(np.int64))


# Speech frames
def _asr_split(rng: np.random.Generator, means: np.ndarray, n: int, seq_len: int) -> Split:
    n_classes, n_features = means.shape
    X = np.zeros((n, seq_len, n_features), dtype=np.float32)
    Y = np.zeros((n, seq_len), dtype=np.int64)
    for i in range(n):
        t = 0
        while t < seq_len:
            label = int(rng.integers(0, n_classes))
            run = int(rng.integers(3, 9))
            Y[i, t:t + run] = label
            t += run
        X[i] = means[Y[i]] + rng.normal(0, 1.0, size=(seq_len, n_features))
    return Split(X, Y)


def generate_dataset(task: str, params: DataConfig, seed: int = 0) -> DatasetSplits:
    """
    Train / val / test splits for a task, deterministic from the seed.

    For cls, params.idx_dir switches to IDX files (relative paths sit under
    POWQUANT_DATA_DIR); label noise only touches train.
    """
    sizes = {"train": params.n_train, "val": params.n_val, "test": params.n_test}

    def stream(name: str) -> np.random.Generator:
        return np.random.default_rng([seed, SPLIT_STREAMS[name]])

    if task == "seg":
        splits = {name: _seg_split(stream(name), n, params.image_size) for name, n in sizes.items()}
        n_classes = 2
    elif task == "cls":
        if params.idx_dir:
            idx_dir = resolve_idx_dir(params.idx_dir)
            logger.info(f"Loading IDX dataset from {idx_dir}")
            return load_idx_dataset(idx_dir, params.n_classes)
        if params.n_classes > len(CLS_SHAPES):
            raise DatasetError(f"synthetic shapes support at most {len(CLS_SHAPES)} classes")
        splits = {
            name: _cls_split(stream(name), n, params.image_size, params.n_classes,
                             params.label_noise if name == "train" else 0.0)
            for name, n in sizes.items()
        }
        n_classes = params.n_classes
    elif task == "asr":
        means = np.random.default_rng([seed, 99]).normal(0, 1.5, size=(params.n_classes, params.n_features))
        splits = {name: _asr_split(stream(name), means, n, params.seq_len) for name, n in sizes.items()}
        n_classes = params.n_classes
    else:
        raise DatasetError(f"Unknown task '{task}'")

    logger.info(f"Generated {task} dataset (seed {seed}): "
                f"{sizes['train']} train / {sizes['val']} val / {sizes['test']} test")
    return DatasetSplits(train=splits["train"], val=splits["val"], test=splits["test"], n_classes=n_classes)
