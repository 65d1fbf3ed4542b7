"""Binary adapter files.

Layout (all integers little-endian unsigned 32-bit, floats little-endian):

    magic   4 bytes         b"HAMA"
    version u32             currently 1
    kind    u32             0 = task, 1 = group, 2 = merged
    alpha   f64
    layers  u32             layer count
    per layer:
        d, k, r   u32 each
        b         d*r f32, row-major
        a         r*k f32, row-major
    trailer (by kind):
        task:    task_id u32
        group:   group_id u32, member_count u32, member task ids u32 each
        merged:  provenance count u32, then per entry: source_id u32, alpha f64

Internal arithmetic is float64; files store factors as float32, so a round
trip reproduces shapes exactly and values to 32-bit precision. Merged deltas
produced by a linear merge are stored through their exact factorization;
nonlinear merges store the dense delta as b with an identity a.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .adapters import AdapterGroup, LayerAdapter, TaskAdapter, nonzero_parameter_count
from .errors import FormatError
from .merging import MergedDelta

MAGIC = b"HAMA"
VERSION = 1
_KINDS = {"task": 0, "group": 1, "merged": 2}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


def _pack_layers(layers) -> bytes:
    parts = [struct.pack("<I", len(layers))]
    for layer in layers:
        d, r = layer.b.shape
        _, k = layer.a.shape
        parts.append(struct.pack("<III", d, k, r))
        parts.append(np.asarray(layer.b, dtype="<f4").tobytes())
        parts.append(np.asarray(layer.a, dtype="<f4").tobytes())
    return b"".join(parts)


def _atomic_write(path, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_adapter(path, adapter: TaskAdapter | AdapterGroup | MergedDelta) -> None:
    """Serialize a task adapter, group adapter, or merged delta."""
    if isinstance(adapter, TaskAdapter):
        head = struct.pack("<4sIId", MAGIC, VERSION, _KINDS["task"], adapter.alpha)
        body = _pack_layers(adapter.layers)
        trailer = struct.pack("<I", adapter.task_id)
    elif isinstance(adapter, AdapterGroup):
        head = struct.pack("<4sIId", MAGIC, VERSION, _KINDS["group"], adapter.alpha_g)
        body = _pack_layers(adapter.layers)
        trailer = struct.pack(
            f"<II{adapter.member_count}I",
            adapter.group_id,
            adapter.member_count,
            *adapter.member_task_ids,
        )
    elif isinstance(adapter, MergedDelta):
        head = struct.pack("<4sIId", MAGIC, VERSION, _KINDS["merged"], 1.0)
        if adapter.factors is not None:
            layers = [LayerAdapter(b, a) for b, a in adapter.factors]
        else:
            layers = [
                LayerAdapter(np.asarray(d, dtype=np.float64), np.eye(np.asarray(d).shape[1]))
                for d in adapter.layer_deltas
            ]
        body = _pack_layers(layers)
        parts = [struct.pack("<I", len(adapter.provenance))]
        for source_id, alpha in adapter.provenance:
            parts.append(struct.pack("<Id", source_id, alpha))
        trailer = b"".join(parts)
    else:
        raise FormatError(f"cannot serialize object of type {type(adapter).__name__}")
    _atomic_write(path, head + body + trailer)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise FormatError("file truncated")
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def take_floats(self, count: int) -> np.ndarray:
        size = 4 * count
        if self.offset + size > len(self.payload):
            raise FormatError("file truncated")
        arr = np.frombuffer(self.payload, dtype="<f4", count=count, offset=self.offset)
        self.offset += size
        return arr.astype(np.float64)

    def done(self) -> None:
        if self.offset != len(self.payload):
            raise FormatError(f"{len(self.payload) - self.offset} unexpected trailing bytes")


def load_adapter(path) -> TaskAdapter | AdapterGroup | MergedDelta:
    """Read an adapter file back; inverse of save_adapter up to f32 rounding."""
    with open(path, "rb") as fh:
        payload = fh.read()
    reader = _Reader(payload)
    magic, version, kind_code, alpha = reader.take("<4sIId")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if kind_code not in _KIND_NAMES:
        raise FormatError(f"unknown adapter kind {kind_code}")
    (layer_count,) = reader.take("<I")
    layers = []
    for _ in range(layer_count):
        d, k, r = reader.take("<III")
        b = reader.take_floats(d * r).reshape(d, r)
        a = reader.take_floats(r * k).reshape(r, k)
        layers.append(LayerAdapter(b, a))
    kind = _KIND_NAMES[kind_code]
    if kind == "task":
        (task_id,) = reader.take("<I")
        reader.done()
        return TaskAdapter(task_id=task_id, layers=layers, alpha=alpha)
    if kind == "group":
        group_id, member_count = reader.take("<II")
        member_ids = list(reader.take(f"<{member_count}I")) if member_count else []
        reader.done()
        return AdapterGroup(
            group_id=group_id,
            layers=layers,
            alpha_g=alpha,
            member_count=member_count,
            member_task_ids=member_ids,
        )
    (prov_count,) = reader.take("<I")
    provenance = []
    for _ in range(prov_count):
        source_id, src_alpha = reader.take("<Id")
        provenance.append((source_id, src_alpha))
    reader.done()
    deltas = [layer.b @ layer.a for layer in layers]
    return MergedDelta(deltas, provenance, factors=[(l.b, l.a) for l in layers])


def describe_adapter(path) -> str:
    """Human-readable summary: kind, alpha, per-layer shapes, nonzero counts."""
    adapter = load_adapter(path)
    lines = []
    if isinstance(adapter, TaskAdapter):
        lines.append(f"kind: task (task_id={adapter.task_id})")
        lines.append(f"alpha: {adapter.alpha!r}")
        layers = adapter.layers
    elif isinstance(adapter, AdapterGroup):
        lines.append(f"kind: group (group_id={adapter.group_id})")
        lines.append(f"alpha: {adapter.alpha_g!r}")
        lines.append(f"members: {adapter.member_count} {adapter.member_task_ids}")
        layers = adapter.layers
    else:
        lines.append("kind: merged")
        lines.append(f"sources: {[(sid, round(a, 6)) for sid, a in adapter.provenance]}")
        layers = [LayerAdapter(b, a) for b, a in adapter.factors]
    for i, layer in enumerate(layers):
        nz = int(np.count_nonzero(layer.b) + np.count_nonzero(layer.a))
        lines.append(
            f"layer {i}: d={layer.out_dim} k={layer.in_dim} r={layer.rank} nonzero={nz}"
        )
    if isinstance(adapter, (TaskAdapter, AdapterGroup)):
        lines.append(f"total nonzero parameters: {nonzero_parameter_count(adapter)}")
    return "\n".join(lines)
