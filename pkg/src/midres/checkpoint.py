"""Model checkpoints: a directory of tensor blobs, one per named parameter, plus a header file.

``checkpoint.txt`` has ``#``-prefixed header lines carrying the format version,
precision, preprocessing flag and the network config as JSON, then one
``blob_path,parameter_name`` record per parameter in model order.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any

import numpy as np

from .data import BLOB_SUFFIX, FormatError, atomic_write_text, load_tensor_blob, save_tensor_blob
from .model import ConfigError, Model, NetworkConfig, build_model

CHECKPOINT_FORMAT = "midres-checkpoint 1"
HEADER_FILE = "checkpoint.txt"


def save_checkpoint(model: Model, directory: str | Path, normalize: bool = True) -> Path:
    """Write into an existing (typically staged) directory."""
    directory = Path(directory)
    (directory / "params").mkdir(exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# format: {CHECKPOINT_FORMAT}\n")
    buf.write(f"# precision: {model.dtype.name}\n")
    buf.write(f"# normalize: {'true' if normalize else 'false'}\n")
    buf.write(f"# network: {json.dumps(model.config.to_dict(), sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    for name, p in model.named_parameters():
        rel = f"params/{name}{BLOB_SUFFIX}"
        save_tensor_blob(p.data, directory / rel)
        w.writerow([rel, name])
    atomic_write_text(directory / HEADER_FILE, buf.getvalue())
    return directory


def load_checkpoint(directory: str | Path) -> tuple[Model, dict[str, Any]]:
    """Rebuild the model recorded in ``directory``. Any inconsistency raises :class:`FormatError`."""
    directory = Path(directory)
    header_path = directory / HEADER_FILE
    try:
        text = header_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"{header_path}: checkpoint header not found", "missing-file") from None
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"{header_path}: cannot read checkpoint header ({e})", "unreadable") from None

    header: dict[str, str] = {}
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition(":")
            if sep:
                header[key.strip()] = value.strip()
            continue
        row = next(csv.reader([line]))
        if len(row) != 2:
            raise FormatError(f"{header_path}:{lineno}: expected blob_path,parameter_name", "bad-record")
        records.append((lineno, row[0].strip(), row[1].strip()))

    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{header_path}: unsupported checkpoint format {header.get('format')!r}", "bad-format")
    precision = header.get("precision")
    if precision not in ("float32", "float64"):
        raise FormatError(f"{header_path}: invalid precision {precision!r}", "bad-header")
    normalize = header.get("normalize")
    if normalize not in ("true", "false"):
        raise FormatError(f"{header_path}: invalid normalize flag {normalize!r}", "bad-header")
    try:
        config = NetworkConfig.from_dict(json.loads(header["network"]))
    except KeyError:
        raise FormatError(f"{header_path}: header lacks network config", "bad-header") from None
    except (json.JSONDecodeError, ConfigError, TypeError, AttributeError) as e:
        raise FormatError(f"{header_path}: invalid network config ({e})", "bad-header") from None

    model = build_model(config, np.dtype(precision))
    seen = set()
    for lineno, rel, name in records:
        where = f"{header_path}:{lineno}"
        if name not in model.param_shapes:
            raise FormatError(f"{where}: unknown parameter {name!r}", "bad-record")
        if name in seen:
            raise FormatError(f"{where}: duplicate parameter {name!r}", "bad-record")
        seen.add(name)
        path = (directory / rel).resolve()
        try:
            arr = load_tensor_blob(path).data
        except FormatError as e:
            raise FormatError(f"{where}: {e}", e.reason) from None
        if arr.shape != model.param_shapes[name]:
            raise FormatError(f"{where}: parameter {name} has shape {list(arr.shape)}, config implies "
                              f"{list(model.param_shapes[name])}", "shape-mismatch")
        if arr.dtype != model.dtype:
            raise FormatError(f"{where}: parameter {name} is {arr.dtype}, header says {precision}", "bad-dtype")
        model.param(name).data[...] = arr
    missing = [n for n in model.param_shapes if n not in seen]
    if missing:
        raise FormatError(f"{header_path}: missing parameters {missing}", "bad-record")
    return model, {"precision": precision, "normalize": normalize == "true"}
