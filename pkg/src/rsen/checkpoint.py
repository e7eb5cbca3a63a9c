"""Binary checkpoint container.

Layout, all integers little-endian:

    magic  b"RSEN"
    u32    format version (currently 1)
    u32    config text byte length, then that many UTF-8 bytes
    u32    tensor count
    per tensor:
        u32  name byte length, then that many UTF-8 bytes
        u8   rank (always 4)
        u32  per dim
        f32  payload, dim product values, little-endian

The embedded config text carries the model keys (so a checkpoint is
self-describing) plus free-form metadata lines such as the completed epoch
count. Loading validates every record against the architecture rebuilt
from the embedded config, and optionally against a caller-supplied one.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import parse_flat, render_flat, take_typed
from .errors import CheckpointMismatchError, CheckpointTruncatedError, CheckpointVersionError
from .model import CONFIG_FIELD_TYPES, ModelConfig, ParameterStore, conv_specs
from .tensor import Tensor

MAGIC = b"RSEN"
VERSION = 1


def model_config_text(cfg: ModelConfig, meta: dict[str, str] | None = None) -> str:
    values: dict[str, object] = {f"model.{name}": getattr(cfg, name) for name in CONFIG_FIELD_TYPES}
    if meta:
        values.update(meta)
    return render_flat(values)


def parse_model_config_text(text: str) -> tuple[ModelConfig, dict[str, str]]:
    values = parse_flat(text)
    model_kwargs = take_typed(values, "model", CONFIG_FIELD_TYPES)
    return ModelConfig(**model_kwargs), values


def expected_records(cfg: ModelConfig) -> dict[str, tuple[int, int, int, int]]:
    out: dict[str, tuple[int, int, int, int]] = {}
    for spec in conv_specs(cfg):
        out[f"{spec.name}.weight"] = spec.weight_dims
        out[f"{spec.name}.bias"] = (1, spec.out_ch, 1, 1)
    return out


def save_checkpoint(
    store: ParameterStore, cfg: ModelConfig, path: Path, meta: dict[str, str] | None = None
) -> None:
    """Write the store; records are name-sorted so the byte layout is
    canonical for given contents. Payloads are cast to float32."""
    config_bytes = model_config_text(cfg, meta).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        names = sorted(store.names())
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            tensor = store[name]
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", 4))
            fh.write(struct.pack("<4I", *tensor.dims))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(f"{self.path}: truncated payload while reading {what}")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def read_u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]


def _parse(path: Path) -> tuple[dict[str, np.ndarray], ModelConfig, dict[str, str]]:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.read(4, "magic") != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    version = reader.read_u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version} (expected {VERSION})")
    config_len = reader.read_u32("config length")
    cfg, meta = parse_model_config_text(reader.read(config_len, "config text").decode("utf-8"))
    count = reader.read_u32("tensor count")
    records: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = reader.read_u32(f"name length of tensor {i}")
        name = reader.read(name_len, f"name of tensor {i}").decode("utf-8")
        rank = struct.unpack("<B", reader.read(1, f"rank of {name}"))[0]
        if rank != 4:
            raise CheckpointMismatchError(f"{path}: tensor {name} has rank {rank}, expected 4")
        dims = struct.unpack("<4I", reader.read(16, f"dims of {name}"))
        n_values = int(np.prod(dims))
        payload = reader.read(4 * n_values, f"payload of {name}")
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if reader.pos != len(reader.blob):
        raise CheckpointTruncatedError(
            f"{path}: {len(reader.blob) - reader.pos} trailing byte(s) after the declared contents"
        )
    return records, cfg, meta


def _validate(records: dict[str, np.ndarray], cfg: ModelConfig, path: Path) -> None:
    expected = expected_records(cfg)
    for name in sorted(expected):
        if name not in records:
            raise CheckpointMismatchError(f"{path}: missing tensor {name}")
        if records[name].shape != expected[name]:
            raise CheckpointMismatchError(
                f"{path}: tensor {name} has dims {records[name].shape}, expected {expected[name]}"
            )
    for name in sorted(records):
        if name not in expected:
            raise CheckpointMismatchError(f"{path}: unexpected tensor {name}")


def load_checkpoint(path: Path, expected: ModelConfig | None = None) -> tuple[ParameterStore, ModelConfig]:
    """Load and validate a checkpoint.

    Records are always checked against the architecture derived from the
    embedded config; pass ``expected`` to additionally enforce a specific
    configuration. The returned tensors do not require gradients.
    """
    records, cfg, _ = _parse(path)
    _validate(records, cfg, path)
    if expected is not None:
        _validate(records, expected, path)
    store = ParameterStore({name: Tensor(arr) for name, arr in records.items()})
    return store, cfg


def read_meta(path: Path) -> dict[str, str]:
    """Non-model keys of the embedded config text (e.g. completed epochs)."""
    _, _, meta = _parse(path)
    return meta
