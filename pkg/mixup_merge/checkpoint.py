"""Single-file checkpoint container and manifest files.

Layout::

    [8 bytes]  header length N, unsigned little-endian
    [N bytes]  UTF-8 JSON header, space padded to a multiple of 8
    [rest]     raw little-endian float32 data of every tensor

The header maps each tensor name to ``{"dtype": "F32", "shape": [...],
"data_offsets": [begin, end]}`` with offsets relative to the start of the data
section. The reserved ``__metadata__`` entry is a string map holding the
checkpoint ``identity``, the container ``format`` and, for delta files, the
``base_id`` the offsets refer to. Tensors are stored in lexicographic order and
the JSON is serialized with sorted keys and no whitespace, so the bytes are a
pure function of the content.
"""

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from mixup_merge.components.manifest import MergeManifest
from mixup_merge.errors import (
    CheckpointError,
    MalformedHeaderError,
    OffsetGapError,
    OffsetOverlapError,
    TruncatedPayloadError,
)
from mixup_merge.tensors import ELEMENT_KIND, METADATA_KEY, DeltaSet, TensorMap

__all__ = [
    "FORMAT",
    "atomic_write",
    "digest",
    "dumps",
    "loads",
    "read_checkpoint",
    "read_delta",
    "read_entry",
    "read_manifest",
    "write_checkpoint",
    "write_manifest",
]

logger = logging.getLogger(__name__)

FORMAT = "mixup-merge/1"
_LENGTH = struct.Struct("<Q")
_ALIGN = 8


def dumps(t: TensorMap | DeltaSet) -> bytes:
    """Serialize a TensorMap or DeltaSet to canonical container bytes."""
    tensors = t.tensors if isinstance(t, DeltaSet) else t
    metadata = {"format": FORMAT, "identity": tensors.identity}
    if isinstance(t, DeltaSet):
        metadata["base_id"] = t.base_id

    header: dict[str, object] = {METADATA_KEY: metadata}
    chunks = []
    offset = 0
    for name in tensors:
        arr = tensors[name]
        raw = arr.astype("<f4", copy=False).tobytes()
        header[name] = {
            "dtype": ELEMENT_KIND,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)

    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    head = text.encode("utf-8")
    head += b" " * (-len(head) % _ALIGN)
    return _LENGTH.pack(len(head)) + head + b"".join(chunks)


def _parse_header(data: bytes) -> tuple[dict, dict[str, str], int]:
    if len(data) < _LENGTH.size:
        raise MalformedHeaderError("File is shorter than the 8-byte header length prefix")
    (n,) = _LENGTH.unpack_from(data)
    start = _LENGTH.size + n
    if start > len(data):
        raise MalformedHeaderError(
            f"Header length {n} runs past the end of the file ({len(data)} bytes)"
        )
    try:
        header = json.loads(data[_LENGTH.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"Header is not valid UTF-8 JSON: {e}") from e
    if not isinstance(header, dict):
        raise MalformedHeaderError("Header must be a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeaderError(f"'{METADATA_KEY}' must map strings to strings")
    return header, metadata, start


def _check_entry(name: str, entry: object) -> tuple[tuple[int, ...], int, int]:
    if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
        raise MalformedHeaderError(
            f"Entry '{name}' must have exactly the keys dtype, shape and data_offsets"
        )
    if entry["dtype"] != ELEMENT_KIND:
        raise MalformedHeaderError(
            f"Entry '{name}' has dtype {entry['dtype']!r}, only {ELEMENT_KIND} is supported"
        )
    shape = entry["shape"]
    offsets = entry["data_offsets"]
    if not isinstance(shape, list) or not all(
        isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
    ):
        raise MalformedHeaderError(f"Entry '{name}' has an invalid shape {shape!r}")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        or not 0 <= offsets[0] <= offsets[1]
    ):
        raise MalformedHeaderError(f"Entry '{name}' has invalid data_offsets {offsets!r}")
    begin, end = offsets
    expected = 4 * math.prod(shape)
    if end - begin != expected:
        raise MalformedHeaderError(
            f"Entry '{name}' spans {end - begin} bytes, shape {shape} needs {expected}"
        )
    return tuple(shape), begin, end


def _loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    header, metadata, start = _parse_header(data)
    entries = []
    for name, entry in header.items():
        shape, begin, end = _check_entry(name, entry)
        entries.append((begin, end, name, shape))
    entries.sort()

    payload = memoryview(data)[start:]
    cursor = 0
    for begin, end, name, _ in entries:
        if begin < cursor:
            raise OffsetOverlapError(
                f"Entry '{name}' starts at {begin}, inside the previous tensor (ends at {cursor})"
            )
        if begin > cursor:
            raise OffsetGapError(f"Unused bytes {cursor}..{begin} before entry '{name}'")
        cursor = end
    if cursor > len(payload):
        raise TruncatedPayloadError(
            f"Header describes {cursor} data bytes, file holds {len(payload)}"
        )
    if cursor < len(payload):
        raise OffsetGapError(f"{len(payload) - cursor} trailing bytes after the last tensor")

    arrays = {
        name: np.frombuffer(payload[begin:end], dtype="<f4").reshape(shape)
        for begin, end, name, shape in entries
    }
    return arrays, metadata


def loads(data: bytes) -> TensorMap:
    """Parse container bytes into a TensorMap, validating the whole layout."""
    arrays, metadata = _loads(data)
    return TensorMap(arrays, identity=metadata.get("identity"))


def digest(t: TensorMap | DeltaSet | bytes) -> str:
    """SHA-256 of the canonical container bytes, lowercase hex."""
    data = t if isinstance(t, bytes) else dumps(t)
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: Path | str, data: bytes | str) -> None:
    """Write to a temporary sibling and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_checkpoint(t: TensorMap | DeltaSet, path: Path | str) -> str:
    """Write ``t`` to ``path`` and return the digest of the written bytes."""
    data = dumps(t)
    atomic_write(path, data)
    logger.info(f"Wrote checkpoint {path} ({len(data)} bytes)")
    return digest(data)


def _read_bytes(path: Path | str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e


def read_checkpoint(path: Path | str) -> TensorMap:
    """Read a checkpoint file; the identity comes from ``__metadata__``."""
    return loads(_read_bytes(path))


def read_delta(path: Path | str) -> DeltaSet:
    """Read a delta file, i.e. a checkpoint whose metadata names its ``base_id``."""
    entry = read_entry(path)
    if not isinstance(entry, DeltaSet):
        raise CheckpointError(f"{path} is not a delta file (no base_id in its metadata)")
    return entry


def read_entry(path: Path | str) -> TensorMap | DeltaSet:
    """Read either kind of file, returning a DeltaSet when ``base_id`` is present."""
    arrays, metadata = _loads(_read_bytes(path))
    tensors = TensorMap(arrays, identity=metadata.get("identity"))
    if "base_id" in metadata:
        return DeltaSet(base_id=metadata["base_id"], tensors=tensors)
    return tensors


def write_manifest(m: MergeManifest, path: Path | str) -> None:
    atomic_write(path, m.to_json())
    logger.info(f"Wrote manifest {path}")


def read_manifest(path: Path | str) -> MergeManifest:
    return MergeManifest.from_file(path)
