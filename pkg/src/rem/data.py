"""Dataset ingestion, binarization, subsetting and minibatch order.

The canonical on-disk format is plain text: one image per line, values
separated by single spaces. Integral values are written as integers and
everything else with ``repr``, so a file written here reads back and
re-serializes to identical bytes.

Dataset ids understood by :func:`load_dataset` (files looked up under
``REM_DATA_DIR`` unless a directory is given):

* ``mnist-fixed``: ``binarized_mnist_{train,valid,test}.amat``; valid is
  folded into train, giving 60,000 / 10,000.
* ``mnist-stochastic``: raw IDX ``train-images-idx3-ubyte`` and
  ``t10k-images-idx3-ubyte`` (optionally ``.gz``), kept gray.
* ``omniglot``: ``chardata.mat`` (needs scipy), kept gray.
* ``synth:<dir>``: ``train.txt`` / ``test.txt`` written by ``rem synth``.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IMAGE_DIM = 784
IDX_IMAGE_MAGIC = 0x00000803
MODES = ("binary", "gray", "real")


class DataFormatError(ValueError):
    """A data file does not parse; the message names the file and line or byte offset."""


@dataclass(frozen=True)
class Dataset:
    """Immutable train/test matrices (N x D).

    ``mode`` is ``binary`` (values in {0, 1}), ``gray`` (values in [0, 1],
    binarized afresh for every minibatch) or ``real`` (synthetic Gaussian data).
    """

    name: str
    train: np.ndarray
    test: np.ndarray
    mode: str
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.train.shape[1]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def _check_range(values: np.ndarray, mode: str, where: str, first_line: int, dims: int):
    if mode == "binary":
        bad = (values != 0.0) & (values != 1.0)
        what = "outside {0, 1}"
    elif mode == "gray":
        bad = ~((values >= 0.0) & (values <= 1.0))
        what = "outside [0, 1]"
    else:
        bad = ~np.isfinite(values)
        what = "not finite"
    if np.any(bad):
        i = int(np.flatnonzero(bad.reshape(-1))[0])
        row, col = divmod(i, dims)
        raise DataFormatError(
            f"{where}: line {first_line + row}, column {col + 1}: value {values.reshape(-1)[i]!r} {what}"
        )


def parse_matrix(text: str, mode: str = "binary", dims: int = IMAGE_DIM, where: str = "<text>") -> np.ndarray:
    """Parse the canonical text format into an (N, dims) float64 array."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    tokens = []
    for n, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != dims:
            raise DataFormatError(f"{where}: line {n}: expected {dims} values, found {len(parts)}")
        tokens.extend(parts)
    try:
        values = np.array(tokens, dtype=np.float64)
    except ValueError:
        for n, line in enumerate(lines, start=1):
            for col, tok in enumerate(line.split(), start=1):
                try:
                    float(tok)
                except ValueError:
                    raise DataFormatError(f"{where}: line {n}, column {col}: cannot parse {tok!r}") from None
        raise
    values = values.reshape(len(lines), dims)
    _check_range(values, mode, where, 1, dims)
    return values


def read_matrix(path, mode: str = "binary", dims: int = IMAGE_DIM) -> np.ndarray:
    path = Path(path)
    return parse_matrix(path.read_text(), mode=mode, dims=dims, where=str(path))


def _format_value(v: float) -> str:
    if v == int(v) and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def format_matrix(values: np.ndarray) -> str:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot serialize non-finite values")
    return "".join(" ".join(_format_value(v) for v in row.tolist()) + "\n" for row in values)


def write_matrix(path, values: np.ndarray) -> str:
    """Write the canonical text format and return the file's sha256."""
    Path(path).write_text(format_matrix(values))
    return sha256_file(path)


# ---------------------------------------------------------------------------
# IDX


def _open_maybe_gzip(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    """Read an IDX unsigned-byte image file (magic 0x00000803) into (N, rows * cols) uint8."""
    with _open_maybe_gzip(path) as f:
        raw = f.read()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes, need 16)")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}")
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated at offset {len(raw)}, expected {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows * cols)


def write_manifest(path, n: int, dims: int, checksum: str, mode: str) -> Path:
    side = Path(str(path) + ".json")
    side.write_text(json.dumps({"n": n, "dims": dims, "checksum": checksum, "mode": mode}, indent=2) + "\n")
    return side


def convert_idx(idx_path, out_path, mode: str = "gray") -> dict:
    """IDX images to canonical text. ``gray`` scales to [0, 1]; ``binary`` thresholds at 1/2."""
    pixels = read_idx_images(idx_path).astype(np.float64)
    if mode == "gray":
        values = pixels / 255.0
    elif mode == "binary":
        values = (pixels >= 128).astype(np.float64)
    else:
        raise ValueError(f"convert mode must be gray or binary, got {mode!r}")
    checksum = write_matrix(out_path, values)
    write_manifest(out_path, values.shape[0], values.shape[1], checksum, mode)
    return {"n": values.shape[0], "dims": values.shape[1], "checksum": checksum, "mode": mode}


# ---------------------------------------------------------------------------
# binarization, subsets, minibatches


def stochastic_binarize(gray: np.ndarray, rng) -> np.ndarray:
    """Each pixel independently ~ Bernoulli(gray value)."""
    gray = np.asarray(gray, dtype=np.float64)
    return (rng.random(gray.shape) < gray).astype(np.float64)


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Seeded uniform subsample of the training split without replacement."""
    N = dataset.train.shape[0]
    if not 0 <= n <= N:
        raise ValueError(f"subset size {n} outside [0, {N}]")
    idx = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).permutation(N)[:n]
    prov = {
        **dataset.provenance,
        "subset": {"parent_checksum": sha256_array(dataset.train), "n": n, "seed": seed},
    }
    return replace(dataset, train=dataset.train[idx], provenance=prov)


def epoch_order(n: int, rng) -> np.ndarray:
    return rng.permutation(n)


def minibatches(order: np.ndarray, batch: int):
    """Index arrays of size ``batch`` (the last may be smaller) covering ``order`` once."""
    if batch < 1:
        raise ValueError("batch size must be at least 1")
    for start in range(0, len(order), batch):
        yield order[start:start + batch]


# ---------------------------------------------------------------------------
# named datasets


def data_root(data_dir=None) -> Path:
    root = data_dir or os.environ.get("REM_DATA_DIR")
    if not root:
        raise FileNotFoundError("no data directory: pass one or set REM_DATA_DIR")
    return Path(root)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing data file {path}")
    return path


def _first_existing(root: Path, names) -> Path:
    for name in names:
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"none of {list(names)} found in {root}")


def load_mnist_fixed(root: Path) -> Dataset:
    train_p = _require(root / "binarized_mnist_train.amat")
    test_p = _require(root / "binarized_mnist_test.amat")
    parts = [read_matrix(train_p)]
    sources = {"train": str(train_p)}
    valid_p = root / "binarized_mnist_valid.amat"
    if valid_p.exists():
        parts.append(read_matrix(valid_p))
        sources["valid"] = str(valid_p)
    sources["test"] = str(test_p)
    prov = {"source": sources, "checksum": {k: sha256_file(v) for k, v in sources.items()}}
    return Dataset("mnist-fixed", np.concatenate(parts), read_matrix(test_p), "binary", prov)


def load_mnist_stochastic(root: Path) -> Dataset:
    train_p = _first_existing(root, ["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"])
    test_p = _first_existing(root, ["t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte.gz"])
    train = read_idx_images(train_p) / 255.0
    test = read_idx_images(test_p) / 255.0
    prov = {
        "source": {"train": str(train_p), "test": str(test_p)},
        "checksum": {"train": sha256_file(train_p), "test": sha256_file(test_p)},
    }
    return Dataset("mnist-stochastic", train, test, "gray", prov)


def load_omniglot(root: Path) -> Dataset:
    from scipy.io import loadmat  # optional dependency

    path = _require(root / "chardata.mat")
    mat = loadmat(path)

    def images(key):
        # columns are 28x28 images stored column-major
        return mat[key].T.reshape(-1, 28, 28, order="F").reshape(-1, IMAGE_DIM).astype(np.float64)

    prov = {"source": str(path), "checksum": sha256_file(path)}
    return Dataset("omniglot", images("data"), images("testdata"), "gray", prov)


def load_synth(directory) -> Dataset:
    d = Path(directory)
    meta = json.loads(_require(d / "generating_model.json").read_text())
    dims = int(meta["data_dim"])
    train_p, test_p = _require(d / "train.txt"), _require(d / "test.txt")
    prov = {
        "source": str(d),
        "checksum": {"train": sha256_file(train_p), "test": sha256_file(test_p)},
    }
    return Dataset(f"synth:{d}", read_matrix(train_p, "real", dims), read_matrix(test_p, "real", dims), "real", prov)


DATASETS = ("mnist-fixed", "mnist-stochastic", "omniglot")


def load_dataset(dataset_id: str, data_dir=None) -> Dataset:
    if dataset_id.startswith("synth:"):
        return load_synth(dataset_id[len("synth:"):])
    if dataset_id not in DATASETS:
        raise ValueError(f"unknown dataset {dataset_id!r}; expected one of {DATASETS} or synth:<dir>")
    root = data_root(data_dir)
    loader = {"mnist-fixed": load_mnist_fixed, "mnist-stochastic": load_mnist_stochastic, "omniglot": load_omniglot}
    return loader[dataset_id](root)
