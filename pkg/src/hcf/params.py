"""Parameter storage, the Adam optimizer and the binary checkpoint container."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor

MAGIC = b"HCFPARAM"
FORMAT_VERSION = 1
_FLAG_MOMENTS = 1


@dataclass
class ParamEntry:
    value: Tensor
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad


class ParameterStore:
    """Named parameter tensors plus their gradient accumulators and Adam state."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)
        self._entries[name] = ParamEntry(value, np.zeros_like(value.data), np.zeros_like(value.data))
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, ParamEntry]]:
        return iter(self._entries.items())

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.value.grad[...] = 0.0

    def n_scalars(self) -> int:
        return sum(e.value.data.size for e in self._entries.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: e.value.data.copy() for k, e in self._entries.items()}


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter; zeroes gradients after."""
    for name, e in store.items():
        g = e.value.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        e.step += 1
        e.m = beta1 * e.m + (1.0 - beta1) * g
        e.v = beta2 * e.v + (1.0 - beta2) * (g * g)
        m_hat = e.m / (1.0 - beta1 ** e.step)
        v_hat = e.v / (1.0 - beta2 ** e.step)
        e.value.data = e.value.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        e.value.grad = np.zeros_like(e.value.data)


# checkpoint container -----------------------------------------------------

def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_store(path, store: ParameterStore, include_moments: bool = True) -> None:
    """Write parameters (and optionally Adam moments) to a self-describing binary file.

    Layout: magic, u32 version, u32 flags, u32 entry count, then per entry the
    UTF-8 name (u32 length prefix), u32 rank, u64 dims, row-major little-endian
    float64 values. With the moments flag set a second section follows with,
    per entry in the same order, u64 step, m values, v values.
    """
    flags = _FLAG_MOMENTS if include_moments else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, flags, len(store)))
        for name, e in store.items():
            raw = name.encode("utf-8")
            data = e.value.data
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            _write_array(fh, data)
        if include_moments:
            for _, e in store.items():
                fh.write(struct.pack("<Q", e.step))
                _write_array(fh, e.m)
                _write_array(fh, e.v)


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def load_store(path) -> ParameterStore:
    path = Path(path)
    store = ParameterStore()
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, flags, count = struct.unpack("<III", _read(fh, 12))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, n).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(fh, 4))
            shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank))
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape)
            store.add(name, data.astype(np.float64))
        if flags & _FLAG_MOMENTS:
            for _, e in store.items():
                (e.step,) = struct.unpack("<Q", _read(fh, 8))
                size = e.value.data.size
                shape = e.value.data.shape
                e.m = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
                e.v = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return store
