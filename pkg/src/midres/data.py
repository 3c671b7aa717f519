"""Tensor blob files, dataset manifests, stratified folds and the synthetic stand-in dataset.

Blob layout (all little-endian)::

    b"TNSB" | version u16 (=1) | dtype u8 (1=f32, 2=f64) | rank u8 | rank x u32 dims | payload

Manifest layout: ``#``-prefixed header lines (``# key: value``) followed by one
``blob_path,label,class_name`` record per line. Blob paths are relative to the
manifest's directory.
"""
from __future__ import annotations

import contextlib
import csv
import io
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from .tensor import Tensor

MAGIC = b"TNSB"
BLOB_VERSION = 1
BLOB_SUFFIX = ".tnsb"
_HEADER = struct.Struct("<4sHBB")
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

MANIFEST_FORMAT = "midres-manifest 1"


class FormatError(ValueError):
    """Malformed blob, manifest or checkpoint. ``reason`` is a short machine-readable tag."""

    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason


# ---------------------------------------------------------------------------
# atomic output


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@contextlib.contextmanager
def staged_directory(final: str | os.PathLike) -> Iterator[Path]:
    """Yield a temporary sibling directory that is renamed to ``final`` only on success.

    ``final`` must not exist, or be an empty directory.
    """
    final = Path(final)
    if final.exists():
        if not final.is_dir() or any(final.iterdir()):
            raise FileExistsError(f"output directory {final} already exists and is not empty")
    parent = final.parent
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=parent))
    try:
        yield tmp
        if final.exists():
            final.rmdir()
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


# ---------------------------------------------------------------------------
# tensor blobs


def encode_blob(array: Any) -> bytes:
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise TypeError(f"blob dtype must be float32 or float64, got {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 255 or 0 in arr.shape:
        raise ValueError(f"blob shape must have 1-255 positive dims, got {arr.shape}")
    head = _HEADER.pack(MAGIC, BLOB_VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def _parse_header(buf: bytes, source: str) -> tuple[np.dtype, tuple[int, ...], int]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(buf)} bytes)", "truncated-header")
    magic, version, code, rank = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}", "bad-magic")
    if version != BLOB_VERSION:
        raise FormatError(f"{source}: unsupported blob version {version}", "bad-version")
    if code not in _CODES:
        raise FormatError(f"{source}: unknown dtype code {code}", "bad-dtype")
    if rank == 0:
        raise FormatError(f"{source}: rank 0 blobs are not allowed", "bad-rank")
    end = _HEADER.size + 4 * rank
    if len(buf) < end:
        raise FormatError(f"{source}: truncated dims ({rank} dims declared)", "truncated-header")
    dims = struct.unpack_from(f"<{rank}I", buf, _HEADER.size)
    if 0 in dims:
        raise FormatError(f"{source}: zero-sized dimension in {list(dims)}", "zero-dim")
    return _CODES[code], tuple(dims), end


def _expected_payload(dtype: np.dtype, dims: tuple[int, ...]) -> int:
    return int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize


def decode_blob(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    dtype, dims, start = _parse_header(buf, source)
    want = _expected_payload(dtype, dims)
    have = len(buf) - start
    if have < want:
        raise FormatError(f"{source}: truncated payload ({have} of {want} bytes for dims {list(dims)})",
                          "truncated-payload")
    if have > want:
        raise FormatError(f"{source}: payload of {have} bytes does not match dims {list(dims)} ({want} bytes)",
                          "payload-mismatch")
    arr = np.frombuffer(buf, dtype=dtype, offset=start).reshape(dims)
    if not np.isfinite(arr).all():
        raise FormatError(f"{source}: payload contains NaN or Inf", "non-finite")
    return arr.astype(dtype.newbyteorder("="))


def save_tensor_blob(tensor: Any, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode_blob(tensor))


def load_tensor_blob(path: str | os.PathLike) -> Tensor:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: blob file not found", "missing-file") from None
    except OSError as e:
        raise FormatError(f"{path}: cannot read blob ({e.strerror})", "unreadable") from None
    return Tensor(decode_blob(buf, str(path)))


def read_blob_shape(path: str | os.PathLike) -> tuple[np.dtype, tuple[int, ...]]:
    """Validate a blob's header and total size without reading the payload."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as f:
            head = f.read(_HEADER.size + 4 * 255)
    except FileNotFoundError:
        raise FormatError(f"{path}: blob file not found", "missing-file") from None
    except OSError as e:
        raise FormatError(f"{path}: cannot read blob ({e.strerror})", "unreadable") from None
    dtype, dims, start = _parse_header(head, str(path))
    want = _expected_payload(dtype, dims)
    have = size - start
    if have < want:
        raise FormatError(f"{path}: truncated payload ({have} of {want} bytes for dims {list(dims)})",
                          "truncated-payload")
    if have > want:
        raise FormatError(f"{path}: payload of {have} bytes does not match dims {list(dims)} ({want} bytes)",
                          "payload-mismatch")
    return dtype, dims


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Sample:
    blob_path: Path
    label: int
    class_name: str


@dataclass
class DatasetManifest:
    path: Path
    num_classes: int
    shape: tuple[int, ...]
    samples: list[Sample]
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def census(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {self.class_names[c]: int(counts[c]) for c in range(self.num_classes)}

    def load_images(self, dtype: Any = np.float64) -> np.ndarray:
        out = np.empty((len(self.samples), *self.shape), dtype=dtype)
        for i, s in enumerate(self.samples):
            arr = load_tensor_blob(s.blob_path).data
            if arr.shape != self.shape:
                raise FormatError(f"{s.blob_path}: shape {arr.shape} does not match manifest shape {self.shape}",
                                  "shape-mismatch")
            out[i] = arr
        return out


def _parse_shape(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    dims = tuple(int(p) for p in parts)
    if not dims or any(d < 1 for d in dims):
        raise ValueError(text)
    return dims


def write_manifest(path: str | os.PathLike, records: Sequence[tuple[str, int, str]], num_classes: int,
                   shape: Sequence[int]) -> Path:
    """Write a manifest; ``records`` hold blob paths relative to the manifest directory."""
    buf = io.StringIO()
    buf.write(f"# format: {MANIFEST_FORMAT}\n")
    buf.write(f"# num_classes: {num_classes}\n")
    buf.write(f"# shape: {','.join(str(d) for d in shape)}\n")
    w = csv.writer(buf, lineterminator="\n")
    for rec in records:
        w.writerow([str(rec[0]), int(rec[1]), rec[2]])
    atomic_write_text(path, buf.getvalue())
    return Path(path)


def load_manifest(path: str | os.PathLike, check_blobs: bool = True) -> DatasetManifest:
    """Parse and validate a manifest. Every blob must exist and match the declared shape."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"{path}: manifest not found", "missing-file") from None
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: cannot read manifest ({e})", "unreadable") from None

    header: dict[str, str] = {}
    body: list[tuple[int, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition(":")
            if sep:
                header[key.strip()] = value.strip()
            continue
        body.append((lineno, line))

    fmt = header.get("format")
    if fmt is not None and fmt != MANIFEST_FORMAT:
        raise FormatError(f"{path}: unsupported manifest format {fmt!r}", "bad-format")
    try:
        num_classes = int(header["num_classes"])
        if num_classes < 2:
            raise ValueError
    except KeyError:
        raise FormatError(f"{path}: header lacks num_classes", "bad-header") from None
    except ValueError:
        raise FormatError(f"{path}: invalid num_classes {header['num_classes']!r}", "bad-header") from None
    try:
        shape = _parse_shape(header["shape"])
    except KeyError:
        raise FormatError(f"{path}: header lacks shape", "bad-header") from None
    except ValueError:
        raise FormatError(f"{path}: invalid shape {header['shape']!r}", "bad-header") from None
    if not body:
        raise FormatError(f"{path}: manifest has no records", "empty")

    samples: list[Sample] = []
    names: dict[int, str] = {}
    for lineno, line in body:
        where = f"{path}:{lineno}"
        fields_ = next(csv.reader([line]))
        if len(fields_) != 3:
            raise FormatError(f"{where}: expected blob_path,label,class_name, got {line!r}", "bad-record")
        blob, label_text, class_name = (f.strip() for f in fields_)
        if not blob or not class_name:
            raise FormatError(f"{where}: empty blob path or class name", "bad-record")
        try:
            label = int(label_text)
        except ValueError:
            raise FormatError(f"{where}: label {label_text!r} is not an integer", "bad-label") from None
        if not 0 <= label < num_classes:
            raise FormatError(f"{where}: label {label} out of range [0, {num_classes})", "bad-label")
        if names.setdefault(label, class_name) != class_name:
            raise FormatError(f"{where}: label {label} named {class_name!r} but earlier {names[label]!r}",
                              "bad-label")
        blob_path = (path.parent / blob).resolve()
        if check_blobs:
            try:
                _, dims = read_blob_shape(blob_path)
            except FormatError as e:
                raise FormatError(f"{where}: {e}", e.reason) from None
            if dims != shape:
                raise FormatError(f"{where}: blob {blob} has shape {list(dims)}, manifest declares {list(shape)}",
                                  "shape-mismatch")
        samples.append(Sample(blob_path, label, class_name))

    missing = sorted(set(range(num_classes)) - set(names))
    if missing:
        raise FormatError(f"{path}: labels are not dense, no samples for classes {missing}", "bad-label")
    return DatasetManifest(path, num_classes, shape, samples, [names[c] for c in range(num_classes)])


# ---------------------------------------------------------------------------
# stratified folds


@dataclass
class FoldAssignment:
    folds: np.ndarray
    k: int

    def fold_sizes(self) -> list[int]:
        return np.bincount(self.folds, minlength=self.k).tolist()

    def val_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)

    def per_class_counts(self, labels: Sequence[int]) -> np.ndarray:
        """``[num_classes, k]`` table of how many samples of each class sit in each fold."""
        labels = np.asarray(labels)
        out = np.zeros((labels.max() + 1, self.k), dtype=np.int64)
        np.add.at(out, (labels, self.folds), 1)
        return out

    def to_csv(self, path: str | os.PathLike) -> None:
        buf = io.StringIO()
        buf.write("sample_index,fold\n")
        for i, f in enumerate(self.folds):
            buf.write(f"{i},{int(f)}\n")
        atomic_write_text(path, buf.getvalue())


def stratified_kfold(manifest: DatasetManifest | Sequence[int], k: int, seed: int) -> FoldAssignment:
    """Shuffle each class by ``seed`` and deal it round-robin over the folds.

    The dealing position carries over from one class to the next, so total
    fold sizes differ by at most one as well as the per-class counts.
    """
    labels = manifest.labels if isinstance(manifest, DatasetManifest) else np.asarray(manifest, dtype=np.int64)
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 2:
        raise ValueError(f"k must be an integer >= 2, got {k!r}")
    if labels.size == 0:
        raise ValueError("cannot split an empty dataset")
    classes, counts = np.unique(labels, return_counts=True)
    small = [(int(c), int(n)) for c, n in zip(classes, counts) if n < k]
    if small:
        raise ValueError(f"every class needs at least k={k} samples; undersized (class, count): {small}")
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        folds[idx] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k
    return FoldAssignment(folds, k)


# ---------------------------------------------------------------------------
# synthetic data


def synth_image(label: int, num_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Low-amplitude noise plus one bright blob whose radius and position depend on the class."""
    frac = label / max(num_classes - 1, 1)
    angle = 2 * np.pi * label / num_classes
    cy = size / 2 + 0.22 * size * np.sin(angle) + rng.normal(0, 0.03 * size)
    cx = size / 2 + 0.22 * size * np.cos(angle) + rng.normal(0, 0.03 * size)
    radius = size * (0.06 + 0.06 * frac) * rng.uniform(0.9, 1.1)
    yy, xx = np.mgrid[0:size, 0:size]
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    img = rng.uniform(0, 0.15, (size, size)) + rng.uniform(0.6, 0.85) * blob
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def synth_dataset(num_per_class: int, image_size: int, num_classes: int, seed: int,
                  out_dir: str | os.PathLike) -> Path:
    """Write ``num_per_class`` images per class as blobs plus a manifest; returns the manifest path."""
    if image_size < 16 or image_size % 2:
        raise ValueError(f"image size must be even and >= 16, got {image_size}")
    if num_per_class < 1:
        raise ValueError(f"num_per_class must be positive, got {num_per_class}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    out_dir = Path(out_dir)
    with staged_directory(out_dir) as tmp:
        (tmp / "images").mkdir()
        records = []
        for c in range(num_classes):
            for i in range(num_per_class):
                rng = np.random.default_rng([seed, c, i])
                rel = f"images/class{c}_{i:05d}{BLOB_SUFFIX}"
                save_tensor_blob(synth_image(c, num_classes, image_size, rng), tmp / rel)
                records.append((rel, c, f"class{c}"))
        write_manifest(tmp / "manifest.txt", records, num_classes, (1, image_size, image_size))
    return out_dir / "manifest.txt"


def normalize_batch(batch: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Per-image standardization to zero mean and unit variance."""
    batch = np.asarray(batch)
    axes = tuple(range(1, batch.ndim))
    mean = batch.mean(axis=axes, keepdims=True)
    centered = batch - mean
    # constant images: the mean may differ from the pixels by rounding, force exact zeros
    flat = batch.reshape(batch.shape[0], -1)
    constant = (flat.max(axis=1) == flat.min(axis=1)).reshape((-1,) + (1,) * (batch.ndim - 1))
    centered = np.where(constant, 0.0, centered)
    var = (centered ** 2).mean(axis=axes, keepdims=True)
    return centered / np.sqrt(np.maximum(var, floor))
