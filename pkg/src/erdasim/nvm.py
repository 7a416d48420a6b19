"""Simulated byte-addressable persistent memory.

Reads observe every store immediately (the visible image); durability
lags until flush.  A crash resolves staged stores through a crash
model: an aligned 8-byte atomic store persists whole or not at all,
while a bulk store loses either a suffix (prefix mode) or an arbitrary
set of persistence units (subset mode).  Persistence units are counted
relative to the start of each store.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

MAGIC = b"ERDANVM1"
_HEADER = struct.Struct("<8sQ")


class DeviceFault(Exception):
    pass


@dataclass
class Store:
    addr: int
    data: bytes
    atomic8: bool


@dataclass
class CrashModel:
    """How staged stores resolve when power is lost.

    mode "subset" keeps an arbitrary seeded subset of whole units per
    store; "prefix" keeps only a leading run.  Tests can pin outcomes
    exactly: `cut` forces the kept byte count of every bulk store, and
    `choices` maps store index to the set of kept unit indexes.
    """

    mode: str = "subset"
    unit: int = 64
    seed: int = 0
    cut: int | None = None
    choices: dict[int, set[int]] | None = None
    keep_atomic: bool | None = None   # force atomic-store outcome

    def __post_init__(self):
        if self.mode not in ("subset", "prefix"):
            raise ValueError(f"unknown crash mode {self.mode!r}")
        if self.unit <= 0:
            raise ValueError("unit must be positive")


class NvmDevice:
    """Fixed-capacity zero-initialized device with staged durability."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._visible = bytearray(capacity)
        self._durable = bytearray(capacity)
        self.inflight: list[Store] = []
        self.write_bytes_accounted = 0
        self.write_bytes_actual = 0
        self.store_ops = 0
        self.on_account = None       # optional hook(nbytes)

    # ---- data path ----

    def store(self, addr: int, data: bytes, atomic8: bool = False) -> None:
        n = len(data)
        if addr < 0 or addr + n > self.capacity:
            raise DeviceFault(f"store [{addr}, {addr + n}) out of bounds")
        if atomic8 and (n != 8 or addr % 8):
            raise DeviceFault("atomic store must be 8 aligned bytes")
        if n == 0:
            return
        data = bytes(data)
        self._visible[addr:addr + n] = data
        self.inflight.append(Store(addr, data, atomic8))
        self.store_ops += 1

    def read(self, addr: int, n: int) -> bytes:
        if addr < 0 or n < 0 or addr + n > self.capacity:
            raise DeviceFault(f"read [{addr}, {addr + n}) out of bounds")
        return bytes(self._visible[addr:addr + n])

    def flush(self) -> None:
        """Drain every staged store to the durable image, in order."""
        for st in self.inflight:
            self._durable[st.addr:st.addr + len(st.data)] = st.data
            self.write_bytes_actual += len(st.data)
        self.inflight.clear()

    def crash(self, model: CrashModel | None = None) -> "NvmDevice":
        """Resolve staged stores per the model; idempotent once drained."""
        model = model or CrashModel()
        rng = random.Random(model.seed)
        for idx, st in enumerate(self.inflight):
            kept = self._kept_bytes(idx, st, model, rng)
            for off, chunk in kept:
                self._durable[off:off + len(chunk)] = chunk
                self.write_bytes_actual += len(chunk)
        self.inflight.clear()
        self._visible = bytearray(self._durable)
        return self

    @staticmethod
    def _kept_bytes(idx: int, st: Store, model: CrashModel,
                    rng: random.Random) -> list[tuple[int, bytes]]:
        if st.atomic8:
            keep = model.keep_atomic
            if keep is None:
                keep = rng.random() < 0.5
            return [(st.addr, st.data)] if keep else []
        units = range(0, len(st.data), model.unit)
        if model.choices is not None:
            chosen = model.choices.get(idx, set())
            return [(st.addr + u, st.data[u:u + model.unit])
                    for i, u in enumerate(units) if i in chosen]
        if model.mode == "prefix":
            cut = model.cut if model.cut is not None else rng.randint(0, len(st.data))
            cut = min(cut, len(st.data))
            return [(st.addr, st.data[:cut])] if cut else []
        return [(st.addr + u, st.data[u:u + model.unit])
                for u in units if rng.random() < 0.5]

    # ---- accounting ----

    def account(self, nbytes: int) -> None:
        if nbytes < 0:
            raise ValueError("accounted bytes must be non-negative")
        self.write_bytes_accounted += nbytes
        if self.on_account is not None:
            self.on_account(nbytes)

    # ---- serialization ----

    def durable_snapshot(self) -> bytes:
        return bytes(self._durable)

    def dump_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.capacity) + bytes(self._durable)

    def dump(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dump_bytes())

    @classmethod
    def load_bytes(cls, raw: bytes) -> "NvmDevice":
        if len(raw) < _HEADER.size:
            raise DeviceFault("image shorter than header")
        magic, capacity = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise DeviceFault(f"bad image magic {magic!r}")
        body = raw[_HEADER.size:]
        if len(body) != capacity:
            raise DeviceFault("image length does not match header capacity")
        dev = cls(capacity)
        dev._durable[:] = body
        dev._visible[:] = body
        return dev

    @classmethod
    def load(cls, path: str) -> "NvmDevice":
        with open(path, "rb") as fh:
            return cls.load_bytes(fh.read())

    @classmethod
    def from_image(cls, image: bytes) -> "NvmDevice":
        """Build a device whose durable and visible state equal image."""
        dev = cls(len(image))
        dev._durable[:] = image
        dev._visible[:] = image
        return dev
