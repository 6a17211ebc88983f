"""Layered parameter vectors.

Every aggregator, attack and sparsifier in this package works on a flat
float64 vector paired with a layout that says where each named parameter
tensor (layer) lives inside it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class LayerSpec:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


Layout = tuple[LayerSpec, ...]


def make_layout(shapes: Iterable[tuple[str, int]]) -> Layout:
    """Build a contiguous layout from ``(name, length)`` pairs."""
    specs = []
    offset = 0
    for name, length in shapes:
        specs.append(LayerSpec(name, offset, int(length)))
        offset += int(length)
    layout = tuple(specs)
    validate_layout(layout)
    return layout


def validate_layout(layout: Sequence[LayerSpec]) -> int:
    """Check that ``layout`` tiles ``[0, d)`` exactly and return ``d``."""
    if not layout:
        raise ValueError("layout must contain at least one layer")
    expected = 0
    for spec in layout:
        if spec.length <= 0:
            raise ValueError(f"layer {spec.name!r} has non-positive length {spec.length}")
        if spec.offset != expected:
            raise ValueError(
                f"layer {spec.name!r} starts at {spec.offset}, expected {expected}"
            )
        expected += spec.length
    return expected


def layout_dim(layout: Sequence[LayerSpec]) -> int:
    return sum(spec.length for spec in layout)


@dataclass(frozen=True)
class LayeredUpdate:
    """A model update: flat coefficient vector plus layer boundaries.

    The vector is copied on construction and marked read-only so instances
    can be shared freely between threads.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        layout = tuple(self.layout)
        d = validate_layout(layout)
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.shape[0] != d:
            raise ValueError(f"values have dimension {values.shape[0]}, layout expects {d}")
        if not np.all(np.isfinite(values)):
            raise ValueError("update contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.layout)

    def layer(self, l: int) -> np.ndarray:
        return slice_layer(self, l)

    def with_values(self, values) -> "LayeredUpdate":
        return LayeredUpdate(values, self.layout)

    def __neg__(self) -> "LayeredUpdate":
        return LayeredUpdate(-self.values, self.layout)


@dataclass(frozen=True)
class UpdateBatch:
    updates: tuple[LayeredUpdate, ...]
    client_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        updates = tuple(self.updates)
        if not updates:
            raise ValueError("batch must hold at least one update")
        ids = tuple(self.client_ids) if self.client_ids else tuple(range(len(updates)))
        if len(ids) != len(updates):
            raise ValueError("client_ids and updates differ in length")
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        layout = updates[0].layout
        for u in updates[1:]:
            if u.layout != layout:
                raise ValueError("all updates in a batch must share one layout")
        object.__setattr__(self, "updates", updates)
        object.__setattr__(self, "client_ids", ids)

    @classmethod
    def from_matrix(cls, matrix, layout: Layout, client_ids=()) -> "UpdateBatch":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        return cls(tuple(LayeredUpdate(row, layout) for row in matrix), tuple(client_ids))

    @property
    def n(self) -> int:
        return len(self.updates)

    @property
    def layout(self) -> Layout:
        return self.updates[0].layout

    @property
    def dim(self) -> int:
        return self.updates[0].dim

    def matrix(self) -> np.ndarray:
        """Stack the updates into an ``(n, d)`` array (a fresh copy)."""
        return np.stack([u.values for u in self.updates])

    def layer_matrix(self, l: int) -> np.ndarray:
        spec = _layer_spec(self.layout, l)
        return np.stack([u.values[spec.offset:spec.stop] for u in self.updates])

    def subset(self, positions: Sequence[int]) -> "UpdateBatch":
        return UpdateBatch(
            tuple(self.updates[p] for p in positions),
            tuple(self.client_ids[p] for p in positions),
        )


def _layer_spec(layout: Layout, l: int) -> LayerSpec:
    if not 0 <= l < len(layout):
        raise IndexError(f"layer index {l} out of range for {len(layout)} layers")
    return layout[l]


def slice_layer(u: LayeredUpdate, l: int) -> np.ndarray:
    """Return the read-only sub-vector of layer ``l``."""
    spec = _layer_spec(u.layout, l)
    return u.values[spec.offset:spec.stop]


def linear_combine(batch: UpdateBatch, weights) -> LayeredUpdate:
    """Elementwise ``sum_i w_i * u_i`` over the batch."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != batch.n:
        raise ValueError(f"expected {batch.n} weights, got {w.shape[0]}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return LayeredUpdate(w @ batch.matrix(), batch.layout)


def l2_norm(v) -> float:
    if isinstance(v, LayeredUpdate):
        v = v.values
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


# Binary record: <u32 L> then per layer <u16 name_len><name utf-8><u32 length>,
# then d little-endian f64 values.

def to_bytes(u: LayeredUpdate) -> bytes:
    parts = [struct.pack("<I", len(u.layout))]
    for spec in u.layout:
        name = spec.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", spec.length))
    parts.append(u.values.astype("<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> LayeredUpdate:
    view = memoryview(data)
    pos = 0

    def take(nbytes: int) -> memoryview:
        nonlocal pos
        if pos + nbytes > len(view):
            raise ValueError("truncated update record")
        chunk = view[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (num_layers,) = struct.unpack("<I", take(4))
    shapes = []
    for _ in range(num_layers):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (length,) = struct.unpack("<I", take(4))
        shapes.append((name, length))
    layout = make_layout(shapes)
    d = layout_dim(layout)
    values = np.frombuffer(take(8 * d), dtype="<f8").astype(np.float64)
    if pos != len(view):
        raise ValueError("trailing bytes after update record")
    return LayeredUpdate(values, layout)
