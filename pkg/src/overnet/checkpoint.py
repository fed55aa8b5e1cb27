"""The OVNT checkpoint container.

Layout (all integers u32 little-endian)::

    b"OVNT" | version | entry count
    per entry: name length | UTF-8 name | rank | dims... | float32 LE payload

Each parameter ``p`` is followed by ``p.adam_m`` and ``p.adam_v``; then a
rank-0 ``step_count`` and the text entries ``config`` (and optionally
``train_config``), whose bytes are stored one per float.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigurationError
from .model import ModelConfig, init_params
from .params import ParamStore

MAGIC = b"OVNT"
VERSION = 1
TEXT_ENTRIES = ("config", "train_config")
_MAX_STEP = 1 << 24  # largest integer a float32 holds exactly


@dataclass
class Checkpoint:
    params: ParamStore
    model: ModelConfig
    train_text: str = ""

    @property
    def step_count(self) -> int:
        return self.params.step_count


def _text_to_floats(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<f4")


def _floats_to_text(arr: np.ndarray, name: str) -> str:
    if arr.ndim != 1 or np.any((arr < 0) | (arr > 255) | (arr != np.floor(arr))):
        raise CheckpointError(f"entry {name!r}: not a byte string")
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def encode_entries(entries: list[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_entries(data: bytes) -> list[tuple[str, np.ndarray]]:
    """Parse a container; raises :class:`CheckpointError` naming the failing entry."""
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes (not an OVNT checkpoint)")
    if len(data) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    pos = 12
    out = []
    for k in range(count):
        label = f"entry #{k}"
        try:
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + nlen > len(data):
                raise struct.error("name runs past end of file")
            name = data[pos:pos + nlen].decode("utf-8")
            label = f"entry #{k} {name!r}"
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise struct.error("payload runs past end of file")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise CheckpointError(f"{label}: {exc}") from None
        out.append((name, arr))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last entry")
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    for name, p in ckpt.params.items():
        entries.append((name, p.value.data))
        entries.append((f"{name}.adam_m", p.adam_m))
        entries.append((f"{name}.adam_v", p.adam_v))
    if ckpt.params.step_count >= _MAX_STEP:
        raise CheckpointError(f"step_count {ckpt.params.step_count} not representable")
    entries.append(("step_count", np.asarray(ckpt.params.step_count, dtype=np.float32)))
    entries.append(("config", _text_to_floats(ckpt.model.to_text())))
    if ckpt.train_text:
        entries.append(("train_config", _text_to_floats(ckpt.train_text)))
    return encode_entries(entries)


def from_bytes(data: bytes) -> Checkpoint:
    entries = decode_entries(data)
    table = dict(entries)
    if len(table) != len(entries):
        raise CheckpointError("duplicate entry names")
    if "config" not in table:
        raise CheckpointError("missing 'config' entry")
    try:
        model = ModelConfig.from_text(_floats_to_text(table["config"], "config"))
    except ConfigurationError as exc:
        raise CheckpointError(f"entry 'config': {exc}") from None
    train_text = _floats_to_text(table["train_config"], "train_config") if "train_config" in table else ""
    if "step_count" not in table or table["step_count"].shape != ():
        raise CheckpointError("missing or malformed 'step_count' entry")

    expected = init_params(model, 0)
    known = set(TEXT_ENTRIES) | {"step_count"}
    for name, p in expected.items():
        shape = p.value.shape
        for key in (name, f"{name}.adam_m", f"{name}.adam_v"):
            known.add(key)
            if key not in table:
                raise CheckpointError(f"entry {key!r} missing for the embedded config")
            if table[key].shape != shape:
                raise CheckpointError(f"entry {key!r}: shape {table[key].shape} != expected {shape}")
    for name, _ in entries:
        if name not in known:
            raise CheckpointError(f"entry {name!r} is not part of the embedded config")

    store = ParamStore()
    for name in expected:
        store.add(name, table[name])
        e = store.entry(name)
        e.adam_m = table[f"{name}.adam_m"].copy()
        e.adam_v = table[f"{name}.adam_v"].copy()
    store.step_count = int(table["step_count"])
    return Checkpoint(store, model, train_text)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from None
    try:
        return from_bytes(data)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
