"""Binary checkpoints: model spec, parameters, BN running statistics, optional optimizer state.

Layout (little-endian)::

    b"DDPNETCK"  u32 version  u32 spec_len  spec_text(utf-8)
    u32 record_count
    record*: u32 name_len  name(utf-8)  u8 dtype  u32 rank  u32 extent*rank  raw bytes

Record names are prefixed by what they hold: ``param.``, ``bn.`` (running
mean/var), ``adam.`` (moments, step and hyperparameters) and ``data.mean``.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ddpnet.errors import CheckpointError, ConfigError
from ddpnet.model import DDPNet, ModelSpec, build_ddpnet
from ddpnet.training import AdamState

MAGIC = b"DDPNETCK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack(f"<I{len(raw)}sBI{arr.ndim}I", len(raw), raw, DTYPE_CODES[dt], arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def encode(model: DDPNet, optimizer: AdamState | None = None, mean=None) -> bytes:
    records: list[tuple[str, np.ndarray]] = []
    for name, t in model.named_parameters():
        records.append((f"param.{name}", t.data))
    for name, bn in model.named_bn_states():
        records.append((f"bn.{name}.running_mean", bn.running_mean))
        records.append((f"bn.{name}.running_var", bn.running_var))
    if optimizer is not None:
        records.append(("adam.step", np.array(optimizer.step, dtype=np.int64)))
        records.append(("adam.hyper", np.array([optimizer.beta1, optimizer.beta2, optimizer.eps,
                                                optimizer.weight_decay, float(optimizer.decoupled)])))
        for name in optimizer.m:
            records.append((f"adam.m.{name}", optimizer.m[name]))
            records.append((f"adam.v.{name}", optimizer.v[name]))
    if mean is not None:
        records.append(("data.mean", np.asarray(mean, dtype=np.float32)))
    spec = model.spec.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(spec)), spec, struct.pack("<I", len(records))]
    parts += [_record(n, a) for n, a in records]
    return b"".join(parts)


def save_checkpoint(path, model: DDPNet, optimizer: AdamState | None = None, mean=None) -> None:
    """Write atomically: the file appears complete or not at all."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model, optimizer, mean))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"file truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> tuple[str, dict[str, np.ndarray]]:
    """Spec text and name -> array mapping, in file order."""
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    try:
        spec = r.take(r.u32("spec length"), "spec text").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("spec text is not valid UTF-8") from None
    records: dict[str, np.ndarray] = {}
    for _ in range(r.u32("record count")):
        name = r.take(r.u32("name length"), "record name").decode("utf-8", errors="replace")
        code = r.take(1, f"dtype of {name}")[0]
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        dt = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize, f"data of {name}"), dtype=dt).reshape(shape)
        if name in records:
            raise CheckpointError(f"duplicate record {name!r}")
        records[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last record")
    return spec, records


def load_checkpoint(path) -> tuple[DDPNet, AdamState | None, np.ndarray | None]:
    """Rebuild the model from the stored spec and restore every tensor bitwise."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc.strerror}") from None
    spec_text, records = decode(buf)
    try:
        spec = ModelSpec.from_text(spec_text)
    except ConfigError as exc:
        raise CheckpointError(f"stored model spec is invalid: {exc}") from None
    params = {k[len("param."):]: v for k, v in records.items() if k.startswith("param.")}
    if not params:
        raise CheckpointError("checkpoint holds no parameters")
    dtype = next(iter(params.values())).dtype
    model = build_ddpnet(spec, rng=0, dtype=dtype)
    used = set()
    for name, t in model.named_parameters():
        arr = _expect(records, f"param.{name}", t.shape, dtype)
        arr.flags.writeable = False
        t.data = arr
        used.add(f"param.{name}")
    for name, bn in model.named_bn_states():
        for stat in ("running_mean", "running_var"):
            key = f"bn.{name}.{stat}"
            setattr(bn, stat, _expect(records, key, bn.running_mean.shape, dtype))
            used.add(key)
    optimizer = None
    if "adam.step" in records:
        b1, b2, eps, wd, dec = (float(v) for v in _expect(records, "adam.hyper", (5,), np.float64))
        optimizer = AdamState(b1, b2, eps, wd, bool(dec), int(records["adam.step"]))
        used.update(("adam.step", "adam.hyper"))
        for name, t in model.named_parameters():
            for which in ("m", "v"):
                key = f"adam.{which}.{name}"
                getattr(optimizer, which)[name] = _expect(records, key, t.shape, dtype)
                used.add(key)
    mean = None
    if "data.mean" in records:
        mean = _expect(records, "data.mean", (3,), np.float32)
        used.add("data.mean")
    extra = [k for k in records if k not in used]
    if extra:
        raise CheckpointError(f"record {extra[0]!r} does not belong to the stored model spec")
    return model, optimizer, mean


def _expect(records: dict[str, np.ndarray], key: str, shape, dtype) -> np.ndarray:
    if key not in records:
        raise CheckpointError(f"missing record {key!r}")
    arr = records[key]
    if arr.shape != tuple(shape):
        raise CheckpointError(f"{key}: stored shape {arr.shape} does not match the model's {tuple(shape)}")
    if arr.dtype != np.dtype(dtype):
        raise CheckpointError(f"{key}: stored dtype {arr.dtype} differs from {np.dtype(dtype)}")
    return arr.copy()
