"""Binary checkpoint format.

Layout (all integers little-endian unsigned 32-bit):

    magic   b"ANET1"
    u32     digest length, then the config digest (sha256 hex, UTF-8)
    u32     epoch
    u32     rng-state length, then the JSON-encoded generator state
    u32     parameter record count
    u32     buffer record count (normalization running stats)
    u32     optimizer record count
    records, each: u32 name length, UTF-8 name, u32 rank, u32 dims...,
                   float32 little-endian payload

Optimizer records reuse the same encoding with names ``opt.m.<param>``,
``opt.v.<param>``, ``opt.vhat.<param>`` and ``opt.t.<param>`` (scalar step
count). Payloads are float32, so float32 model state round-trips bitwise.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ANET1"


class CheckpointError(ValueError):
    pass


def _write_record(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def record(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        dims = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims)
        return name, payload


def save_checkpoint(path, model, optimizer=None, epoch: int = 0,
                    rng_state=None, config_digest: str = ""):
    params = [(n, p.data) for n, p in model.named_parameters()]
    for name, arr in params:
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"checkpoint payloads are float32; parameter {name!r} is {arr.dtype}")
    buffers = [(n, b) for n, b in model.named_buffers()]
    opt_records = []
    if optimizer is not None:
        for pname, slot in optimizer.state.items():
            for key in ("m", "v", "vhat"):
                opt_records.append((f"opt.{key}.{pname}", slot[key]))
            opt_records.append((f"opt.t.{pname}", np.array(slot["t"], dtype=np.float32)))
    rng_blob = json.dumps(rng_state, default=int).encode() if rng_state else b""
    digest_blob = config_digest.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(digest_blob)))
        fh.write(digest_blob)
        fh.write(struct.pack("<I", epoch))
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)
        fh.write(struct.pack("<III", len(params), len(buffers), len(opt_records)))
        for name, arr in params + buffers + opt_records:
            _write_record(fh, name, arr)


def load_checkpoint(path, model, optimizer=None, expected_digest: str | None = None) -> dict:
    """Parse, validate, then apply; a bad file leaves the model untouched.

    Returns {'epoch', 'rng_state', 'digest'}. Digest and shape validation
    happen before any assignment.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob)
    if rd.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    digest = rd.take(rd.u32()).decode("utf-8")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint has {digest or '<empty>'}, "
            f"expected {expected_digest or '<empty>'}")
    epoch = rd.u32()
    rng_blob = rd.take(rd.u32())
    rng_state = json.loads(rng_blob) if rng_blob else None
    n_params, n_buffers, n_opt = rd.u32(), rd.u32(), rd.u32()
    records = [rd.record() for _ in range(n_params + n_buffers + n_opt)]
    state = dict(records[:n_params + n_buffers])
    opt_state = dict(records[n_params + n_buffers:])

    own = {n: p.data for n, p in model.named_parameters()}
    own.update(dict(model.named_buffers()))
    for name, arr in own.items():
        if name not in state:
            raise CheckpointError(f"checkpoint is missing {name!r}")
        if tuple(state[name].shape) != tuple(arr.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(state[name].shape)} "
                f"vs model {tuple(arr.shape)}")
    model.load_state(state)
    if optimizer is not None and opt_state:
        for key, payload in opt_state.items():
            _, kind, pname = key.split(".", 2)
            slot = optimizer.state.setdefault(
                pname, {"m": None, "v": None, "vhat": None, "t": 0})
            if kind == "t":
                slot["t"] = int(payload.reshape(-1)[0])
            else:
                slot[kind] = payload.astype(np.float32).copy()
    return {"epoch": epoch, "rng_state": rng_state, "digest": digest}
