"""Named, seeded parameter collection and its binary checkpoint format."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import DTYPES, Tensor

MAGIC = b"ICAFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _name_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def init_values(seed: int, name: str, shape: tuple[int, ...], init: str | float, dtype) -> np.ndarray:
    """Initial value for a parameter; a pure function of its arguments.

    ``init`` is ``"he"`` (uniform in +-sqrt(6 / fan_in)), ``"zeros"``, or a
    float constant.
    """
    if init == "zeros":
        return np.zeros(shape, dtype=dtype)
    if isinstance(init, (int, float)):
        return np.full(shape, float(init), dtype=dtype)
    if init != "he":
        raise ValueError(f"unknown init {init!r}")
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(6.0 / max(fan_in, 1))
    # Philox is counter-based: the stream depends only on the key, not on call order.
    rng = np.random.Generator(np.random.Philox(key=_name_key(seed, name)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """name -> trainable Tensor, created lazily on first request.

    Gradients accumulate on each tensor's ``.grad`` across ``backward`` calls
    until :meth:`zero_grad`.
    """

    def __init__(self, seed: int = 0, precision: int = 32):
        if precision not in DTYPES:
            raise ValueError(f"precision must be 32 or 64, got {precision}")
        self.seed = int(seed)
        self.precision = precision
        self.dtype = DTYPES[precision]
        self._entries: dict[str, Tensor] = {}
        self.frozen = False

    def get(self, name: str, shape: tuple[int, ...], init: str | float = "he") -> Tensor:
        shape = tuple(int(s) for s in shape)
        t = self._entries.get(name)
        if t is not None:
            if t.shape != shape:
                raise ValueError(f"parameter {name!r} has shape {t.shape}, requested {shape}")
            return t
        if self.frozen:
            raise KeyError(f"parameter {name!r} missing from a frozen store")
        t = Tensor(init_values(self.seed, name, shape, init, self.dtype), requires_grad=True, name=name)
        self._entries[name] = t
        return t

    def set(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.dtype)
        if name in self._entries:
            if self._entries[name].shape != value.shape:
                raise ValueError(f"parameter {name!r} has shape {self._entries[name].shape}, got {value.shape}")
            self._entries[name].data = value.copy()
        else:
            self._entries[name] = Tensor(value.copy(), requires_grad=True, name=name)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._entries[k]) for k in sorted(self._entries)]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def count(self, prefix: str = "") -> int:
        return sum(t.data.size for k, t in self._entries.items() if k.startswith(prefix))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    # ---- checkpoint I/O -------------------------------------------------
    def save(self, path: str | Path) -> None:
        """Write header (magic, version, precision, seed, count) then one
        record per parameter: name length, name, ndim, dims, little-endian data."""
        code = "<f4" if self.precision == 32 else "<f8"
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IBQI", VERSION, self.precision, self.seed & (2**64 - 1), len(self)))
            for name, t in self.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", t.ndim))
                fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
                fh.write(np.ascontiguousarray(t.data, dtype=code).tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        buf = Path(path).read_bytes()
        if buf[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a parameter checkpoint")
        off = len(MAGIC)
        version, precision, seed, count = struct.unpack_from("<IBQI", buf, off)
        off += struct.calcsize("<IBQI")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        store = cls(seed=seed, precision=precision)
        code = "<f4" if precision == 32 else "<f8"
        itemsize = 4 if precision == 32 else 8
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(buf, dtype=code, count=size, offset=off).reshape(shape)
            off += size * itemsize
            store._entries[name] = Tensor(data.astype(store.dtype), requires_grad=True, name=name)
        if off != len(buf):
            raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
        return store
