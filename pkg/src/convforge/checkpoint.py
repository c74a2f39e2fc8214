"""Binary checkpoint format, little-endian throughout.

Layout:

    magic    4 bytes  "CVFG"
    version  u16      currently 1
    hlen     u64      header byte length
    header   UTF-8 text, lines of "key=json" (model config, optimizer
                      descriptor, epoch counter, normalization stats)
    count    u32      number of tensor records
    record*  nlen u16, name bytes, rank u8, dims u64 each, f32 values

Values are stored as IEEE-754 32-bit regardless of the in-memory precision;
round-trips of f32 training state are bitwise-exact. Serialization is
canonical (sorted header keys, store-ordered tensors), so save - load - save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import optim
from .errors import CheckpointError
from .models import Model, ModelConfig, ParamStore
from .tensor import Tensor

MAGIC = b"CVFG"
VERSION = 1
_MAX_RANK = 8


def _header_text(model: Model, state: optim.OptimizerState, epoch: int,
                 extra: dict[str, str] | None) -> str:
    fields = {
        "epoch": epoch,
        "model_config": json.loads(model.config.to_json()),
        "optimizer": optim.state_header(state),
    }
    for key, value in (extra or {}).items():
        fields[key] = value
    lines = [f"{key}={json.dumps(fields[key], sort_keys=True, separators=(',', ':'))}"
             for key in sorted(fields)]
    return "\n".join(lines) + "\n"


def _parse_header(text: str) -> dict:
    fields = {}
    for line in text.strip().splitlines():
        if "=" not in line:
            raise CheckpointError(f"malformed header line {line!r}")
        key, raw = line.split("=", 1)
        try:
            fields[key] = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"header value for {key!r} is not valid JSON: {exc}") from exc
    return fields


def _tensor_record(name: str, t: Tensor) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", t.ndim)]
    parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
    parts.append(np.ascontiguousarray(t.array, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, state: optim.OptimizerState, epoch: int, path: str,
                    extra: dict[str, str] | None = None) -> None:
    records = list(model.params.items()) + optim.state_tensors(state)
    header = _header_text(model, state, epoch, extra).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(records)))
        for name, t in records:
            fh.write(_tensor_record(name, t))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated file while reading {what} "
                                  f"(need {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str) -> tuple[Model, optim.OptimizerState, int, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic; not a convforge checkpoint")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<Q", "header length")
    try:
        header = _parse_header(r.take(hlen, "header").decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"header is not valid UTF-8: {exc}") from exc
    for key in ("epoch", "model_config", "optimizer"):
        if key not in header:
            raise CheckpointError(f"header is missing {key!r}")

    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", "rank")
        if rank > _MAX_RANK:
            raise CheckpointError(f"tensor {name!r} has rank {rank} > {_MAX_RANK}")
        dims = r.unpack(f"<{rank}Q", "dims") if rank else ()
        size = 1
        for d in dims:
            if d < 1 or d > 1 << 32:
                raise CheckpointError(f"tensor {name!r} has invalid dimension {d}")
            size *= d
        payload = r.take(4 * size, f"values of {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        values = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = Tensor(values)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} unexpected trailing bytes")

    config = ModelConfig.from_json(json.dumps(header["model_config"]))
    store = ParamStore()
    for name, shape in config.param_shapes().items():
        if name not in tensors:
            raise CheckpointError(f"parameter {name!r} missing from checkpoint")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"parameter {name!r}: stored shape {tensors[name].shape} != config shape {shape}"
            )
        store.add(name, tensors.pop(name))
    model = Model(config=config, params=store, mode="eval")
    try:
        state = optim.state_from_parts(header["optimizer"], tensors, store)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"optimizer state is inconsistent: {exc}") from exc
    extra = {k: v for k, v in header.items() if k not in ("epoch", "model_config", "optimizer")}
    return model, state, int(header["epoch"]), extra
