"""Portable on-disk formats: DARR arrays, dataset directories, PGM label
dumps, CSV/JSON reports and training checkpoints.

Every multi-file write goes to a temporary sibling first and is renamed
into place, so readers never observe a half-written artifact.
"""

import csv
import json
import logging
import os
import shutil
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from pydantic import ValidationError

from hiast.exceptions import (
    BadMagicError,
    CheckpointError,
    DimensionMismatchError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from hiast.models import (
    IGNORE,
    Dataset,
    DatasetMeta,
    FeatureMap,
    LabelMap,
    ModelParams,
    Sample,
)
from hiast.schemas import DatasetManifest, ManifestEntry

logger = logging.getLogger(__name__)

# ── DARR arrays ───────────────────────────────────────────────────────

MAGIC = b"DARR"
ARRAY_VERSION = 1
DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

# code -> little-endian dtype; 2 (float64) keeps parameter round-trips exact
_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_CODE_BY_KIND = {("f", 4): 0, ("u", 1): 1, ("f", 8): 2}


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_BY_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise FormatError(f"unsupported array dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BBB", ARRAY_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_BY_CODE[code]).tobytes(order="C")
    return header + payload


def decode_array(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 7:
        raise TruncatedFileError(f"{source}: file too short for a DARR header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, code, rank = struct.unpack("<BBB", data[4:7])
    if version != ARRAY_VERSION:
        raise VersionMismatchError(f"{source}: array version {version}, expected {ARRAY_VERSION}")
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"{source}: unknown dtype code {code}")
    dims_end = 7 + 4 * rank
    if len(data) < dims_end:
        raise TruncatedFileError(f"{source}: truncated dimension block")
    shape = struct.unpack(f"<{rank}I", data[7:dims_end])
    dtype = _DTYPE_BY_CODE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = data[dims_end:]
    if len(payload) < expected:
        raise TruncatedFileError(f"{source}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError(f"{source}: {len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_array(path: str | Path, arr: np.ndarray) -> None:
    _atomic_write_bytes(Path(path), encode_array(arr))


def read_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"missing array file {path}") from e
    return decode_array(data, str(path))


# ── Atomic helpers ────────────────────────────────────────────────────

def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


@contextmanager
def atomic_directory(path: str | Path):
    """Yield a temporary directory that replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp"))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def write_json(path: str | Path, obj: Any) -> None:
    text = json.dumps(obj, indent=2, sort_keys=False)
    _atomic_write_bytes(Path(path), (text + "\n").encode("utf-8"))


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ── Datasets ──────────────────────────────────────────────────────────

def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset directory: manifest.json plus one DARR file per array."""
    m = ds.meta
    with atomic_directory(path) as tmp:
        entries = []
        for s in ds.samples:
            feat_rel = f"features/{s.id}.arr"
            write_array(tmp / feat_rel, s.features.values)
            lab_rel = None
            if s.labels is not None:
                lab_rel = f"labels/{s.id}.arr"
                write_array(tmp / lab_rel, s.labels.labels)
            entries.append(ManifestEntry(id=s.id, features=feat_rel, labels=lab_rel))
        manifest = DatasetManifest(
            format_version=DATASET_FORMAT_VERSION,
            num_classes=m.num_classes,
            channels=m.channels,
            height=m.height,
            width=m.width,
            domain=m.domain,
            samples=entries,
        )
        write_json(tmp / "manifest.json", manifest.model_dump())
    logger.info(f"Saved {m.domain} dataset ({len(ds)} samples) to {path}")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        raw = read_json(path / "manifest.json")
    except FileNotFoundError as e:
        raise FormatError(f"no manifest.json in {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}/manifest.json is not valid JSON: {e}") from e

    version = raw.get("format_version") if isinstance(raw, dict) else None
    if version != DATASET_FORMAT_VERSION:
        raise VersionMismatchError(f"dataset format_version {version}, expected {DATASET_FORMAT_VERSION}")
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as e:
        raise FormatError(f"malformed manifest in {path}: {e}") from e

    meta = DatasetMeta(
        num_classes=manifest.num_classes,
        channels=manifest.channels,
        height=manifest.height,
        width=manifest.width,
        domain=manifest.domain,
    )
    samples = []
    for entry in manifest.samples:
        sid = entry.id
        feats = read_array(path / entry.features)
        if feats.shape != (meta.height, meta.width, meta.channels):
            raise DimensionMismatchError(
                f"sample {sid!r}: features have shape {feats.shape}, manifest declares "
                f"{(meta.height, meta.width, meta.channels)}",
                sample_id=sid,
            )
        labels = None
        if entry.labels:
            lab = read_array(path / entry.labels)
            if lab.shape != (meta.height, meta.width) or lab.dtype != np.uint8:
                raise DimensionMismatchError(
                    f"sample {sid!r}: labels have shape {lab.shape} ({lab.dtype}), manifest declares "
                    f"{(meta.height, meta.width)}",
                    sample_id=sid,
                )
            valid = lab[lab != IGNORE]
            if valid.size and int(valid.max()) >= meta.num_classes:
                raise DimensionMismatchError(
                    f"sample {sid!r}: label {int(valid.max())} exceeds num_classes={meta.num_classes}",
                    sample_id=sid,
                )
            labels = LabelMap(lab)
        samples.append(Sample(sid, FeatureMap(feats), labels))

    return Dataset(meta, tuple(samples))


# ── Label exports ─────────────────────────────────────────────────────

def export_label_pgm(lm: LabelMap, path: str | Path, num_classes: int | None = None) -> None:
    """Binary PGM (P5, maxval 255): class c as byte c, IGNORE as 255."""
    if num_classes is not None and num_classes > 255:
        raise ValueError(f"PGM export supports at most 255 classes, got {num_classes}")
    h, w = lm.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    _atomic_write_bytes(Path(path), header + lm.labels.astype(np.uint8).tobytes(order="C"))


# ── CSV ───────────────────────────────────────────────────────────────

def emit_csv(rows: Iterable[Mapping[str, Any]], path: str | Path, columns: Sequence[str] | None = None) -> None:
    """Write rows with a header; column order is ``columns`` or first-seen key order."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(columns), quoting=csv.QUOTE_MINIMAL,
                                    lineterminator="\r\n", extrasaction="raise")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _csv_cell(row.get(k)) for k in columns})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _csv_cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ── Checkpoints ───────────────────────────────────────────────────────

def save_checkpoint(path: str | Path, header: dict, arrays: Mapping[str, np.ndarray]) -> None:
    """Write a checkpoint directory: header.json plus one float64/uint8 DARR per tensor."""
    with atomic_directory(path) as tmp:
        refs = {}
        for name, arr in arrays.items():
            rel = f"{name}.arr"
            write_array(tmp / rel, arr)
            refs[name] = rel
        write_json(tmp / "header.json", {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            **header,
            "arrays": refs,
        })
    logger.debug(f"Checkpoint written to {path}")


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint directory; nothing is returned unless every file is valid."""
    path = Path(path)
    try:
        header = read_json(path / "header.json")
    except FileNotFoundError as e:
        raise CheckpointError(f"no checkpoint at {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupted checkpoint header in {path}: {e}") from e
    if not isinstance(header, dict) or not isinstance(header.get("arrays"), dict):
        raise CheckpointError(f"corrupted checkpoint header in {path}")
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {header.get('format_version')}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    arrays = {}
    try:
        for name, rel in header["arrays"].items():
            arrays[name] = read_array(path / rel)
    except (FormatError, OSError, TypeError) as e:
        raise CheckpointError(f"corrupted checkpoint tensor in {path}: {e}") from e
    return header, arrays


def params_to_arrays(params: ModelParams, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}_{name}": arr for name, arr in params.arrays().items()}


def params_from_arrays(arrays: Mapping[str, np.ndarray], prefix: str, activation: str) -> ModelParams:
    try:
        return ModelParams(
            w1=arrays[f"{prefix}_w1"], b1=arrays[f"{prefix}_b1"],
            w2=arrays[f"{prefix}_w2"], b2=arrays[f"{prefix}_b2"],
            activation=activation,
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing tensor {e}") from e
