"""Named parameter collections with gradient and importance slots.

A ParamStore is the flat bag of learnable arrays the training loops pass
around: each entry is a leaf Tensor with ``requires_grad=True`` and an
optional same-shape non-negative importance array used by the anchored
teacher refinement.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


class ParamStore:
    """Ordered map of name -> leaf Tensor, plus per-name importance arrays."""

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.importance: dict[str, np.ndarray] = {}

    def add(self, name, value):
        if name in self.entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self.entries[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def names(self):
        return list(self.entries)

    def items(self):
        return self.entries.items()

    def zero_grads(self):
        for t in self.entries.values():
            t.grad = None

    def set_importance(self, name, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if name not in self.entries:
            raise ConfigurationError(f"importance for unknown parameter {name!r}")
        if arr.shape != self.entries[name].data.shape:
            raise ConfigurationError(f"importance shape mismatch for {name!r}")
        if np.any(arr < 0):
            raise ConfigurationError(f"importance for {name!r} must be non-negative")
        self.importance[name] = arr

    def clone(self) -> "ParamStore":
        """Deep copy of values and importance; gradients are not copied."""
        out = ParamStore()
        for name, t in self.entries.items():
            out.add(name, t.data.copy())
        for name, arr in self.importance.items():
            out.importance[name] = arr.copy()
        return out

    def load_values(self, other: "ParamStore"):
        """Overwrite entry values (in place) from another store."""
        if set(other.entries) != set(self.entries):
            raise ConfigurationError("parameter name sets differ")
        for name, t in self.entries.items():
            src = other.entries[name].data
            if src.shape != t.data.shape:
                raise ConfigurationError(f"shape mismatch for {name!r}")
            t.data = src.copy()

    def flat_values(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.entries.values()])

    # -- persistence (name-length-prefixed blobs, little-endian) ---------------

    def to_blob(self) -> bytes:
        """Serialize values: [u32 name_len][name][u32 ndim][u32 dims...][f64 data]."""
        buf = io.BytesIO()
        buf.write(struct.pack("<I", len(self.entries)))
        for name, t in self.entries.items():
            nb = name.encode("utf-8")
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", t.data.ndim))
            buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            buf.write(t.data.astype("<f8").tobytes())
        return buf.getvalue()

    @staticmethod
    def from_blob(blob: bytes) -> "ParamStore":
        buf = io.BytesIO(blob)

        def read(fmt):
            size = struct.calcsize(fmt)
            return struct.unpack(fmt, buf.read(size))

        store = ParamStore()
        (count,) = read("<I")
        for _ in range(count):
            (name_len,) = read("<I")
            name = buf.read(name_len).decode("utf-8")
            (ndim,) = read("<I")
            shape = read(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape)
            store.add(name, data.copy())
        return store


def importance_to_blob(importance: dict[str, np.ndarray]) -> bytes:
    store = ParamStore()
    for name, arr in importance.items():
        store.add(name, arr)
    return store.to_blob()


def importance_from_blob(blob: bytes) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in ParamStore.from_blob(blob).items()}


class SGD:
    """Plain gradient descent over a ParamStore."""

    def __init__(self, params: ParamStore, lr: float):
        self.params = params
        self.lr = float(lr)

    def step(self):
        for t in self.params.entries.values():
            if t.grad is not None:
                t.data = t.data - self.lr * t.grad


class Adam:
    """Adam with the standard bias correction (beta1=0.9, beta2=0.999)."""

    def __init__(self, params: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
