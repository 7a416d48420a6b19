"""Hopscotch hash table stored in NVM with client-computable addresses.

Fixed 32-byte entries, layout (little-endian):

    occupancy(1) | key_len(1) | key(16, zero padded) | head_id(1) |
    pad(1) | hop_info(4) | word(8)

The word field sits at offset 24, so it is always 8-byte aligned and
can be rewritten with a single atomic store.  A key's home slot is
hash64(key) mod table_slots; hopscotch displacement keeps every key
within H slots of home.  The table allocates H-1 extra physical slots
past the end so neighborhoods never wrap, which lets a remote client
fetch one contiguous window and scan it locally.

hash64 is FNV-1a (64-bit), chosen for being published, trivial, and
identical on client and server.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .nvm import NvmDevice

ENTRY = struct.Struct("<BB16sBBIQ")
ENTRY_LEN = ENTRY.size               # 32
WORD_OFF = 24                        # byte offset of the atomic word

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class TableFullError(Exception):
    pass


class IndexFault(Exception):
    pass


def hash64(key: bytes) -> int:
    h = FNV_OFFSET
    for byte in key:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Entry:
    occupancy: int
    key: bytes
    head_id: int
    hop_info: int
    word: int

    @property
    def live(self) -> bool:
        return self.occupancy == 1


def pack_entry(occupancy: int, key: bytes, head_id: int, hop_info: int,
               word: int) -> bytes:
    return ENTRY.pack(occupancy, len(key), key.ljust(16, b"\x00"), head_id,
                      0, hop_info, word)


def unpack_entry(buf, base: int = 0) -> Entry:
    occ, key_len, key16, head_id, _, hop, word = ENTRY.unpack_from(buf, base)
    return Entry(occ, key16[:key_len], head_id, hop, word)


def scan_window(window: bytes, key: bytes) -> tuple[int, Entry] | None:
    """Find key in a fetched neighborhood; returns (slot offset, entry)."""
    for i in range(0, len(window) - ENTRY_LEN + 1, ENTRY_LEN):
        entry = unpack_entry(window, i)
        if entry.live and entry.key == key:
            return i // ENTRY_LEN, entry
    return None


class HopscotchIndex:
    """Server-side view of the table; all state lives in the device."""

    def __init__(self, device: NvmDevice, base: int, slots: int,
                 neighborhood: int = 32, max_key: int = 16):
        if slots & (slots - 1):
            raise ValueError("slots must be a power of two")
        self.device = device
        self.base = base
        self.slots = slots
        self.H = neighborhood
        self.max_key = max_key
        self.physical = slots + neighborhood - 1

    # ---- addressing ----

    def home_slot(self, key: bytes) -> int:
        return hash64(key) % self.slots

    def entry_addr(self, key: bytes) -> int:
        return self.base + ENTRY_LEN * self.home_slot(key)

    def slot_addr(self, slot: int) -> int:
        return self.base + ENTRY_LEN * slot

    def word_addr(self, slot: int) -> int:
        return self.slot_addr(slot) + WORD_OFF

    # ---- device access ----

    def read_entry(self, slot: int) -> Entry:
        return unpack_entry(self.device.read(self.slot_addr(slot), ENTRY_LEN))

    def _write_entry(self, slot: int, key: bytes, head_id: int, word: int) -> None:
        # payload first, occupancy last: a torn insert is never live
        addr = self.slot_addr(slot)
        body = pack_entry(0, key, head_id, 0, word)
        self.device.store(addr + 1, body[1:])
        self.device.store(addr, b"\x01")
        self.device.flush()

    # ---- operations ----

    def lookup(self, key: bytes) -> tuple[int, Entry] | None:
        home = self.home_slot(key)
        for slot in range(home, home + self.H):
            entry = self.read_entry(slot)
            if entry.live and entry.key == key:
                return slot, entry
        return None

    def insert(self, key: bytes, head_id: int, word: int) -> int:
        """Place key within H slots of home, displacing if needed."""
        if not key or len(key) > self.max_key:
            raise IndexFault(f"key length {len(key)} outside 1..{self.max_key}")
        if self.lookup(key) is not None:
            raise IndexFault(f"duplicate insert of {key!r}")
        home = self.home_slot(key)
        free = self._find_free(home)
        while free - home >= self.H:
            free = self._displace_into(free)
        self._write_entry(free, key, head_id, word)
        self._set_hop_bit(home, free - home)
        self.device.flush()
        return free

    def _find_free(self, home: int) -> int:
        limit = min(home + 8 * self.H, self.physical)
        for slot in range(home, limit):
            if not self.read_entry(slot).live:
                return slot
        raise TableFullError(f"no free slot near home {home}")

    def _displace_into(self, free: int) -> int:
        """Move some earlier entry into free; returns the vacated slot."""
        for cand in range(max(0, free - self.H + 1), free):
            entry = self.read_entry(cand)
            if not entry.live:
                continue
            cand_home = self.home_slot(entry.key)
            if free - cand_home < self.H:
                # copy to the new slot first, then clear the old one, so a
                # crash in between leaves a duplicate rather than a hole
                self._write_entry(free, entry.key, entry.head_id, entry.word)
                self._clear_hop_bit(cand_home, cand - cand_home)
                self._set_hop_bit(cand_home, free - cand_home)
                self.device.store(self.slot_addr(cand), b"\x00")
                self.device.flush()
                return cand
        raise TableFullError(f"no displaceable entry below slot {free}")

    def update_word(self, slot: int, word: int) -> None:
        """Exactly one atomic 8-byte store."""
        self.device.store(self.word_addr(slot),
                          struct.pack("<Q", word), atomic8=True)
        self.device.flush()

    def remove(self, slot: int) -> None:
        entry = self.read_entry(slot)
        if entry.live:
            home = self.home_slot(entry.key)
            if 0 <= slot - home < self.H:
                self._clear_hop_bit(home, slot - home)
        self.device.store(self.slot_addr(slot), b"\x00")
        self.device.flush()

    def live_entries(self):
        """Yield (slot, entry) for every occupied slot."""
        for slot in range(self.physical):
            entry = self.read_entry(slot)
            if entry.live:
                yield slot, entry

    # ---- hop bitmap bookkeeping (server-side diagnostics) ----

    def _set_hop_bit(self, home: int, dist: int) -> None:
        self._mutate_hop(home, dist, True)

    def _clear_hop_bit(self, home: int, dist: int) -> None:
        self._mutate_hop(home, dist, False)

    def _mutate_hop(self, home: int, dist: int, value: bool) -> None:
        if dist >= 32:
            return
        addr = self.slot_addr(home) + 20
        hop = struct.unpack("<I", self.device.read(addr, 4))[0]
        hop = hop | (1 << dist) if value else hop & ~(1 << dist)
        self.device.store(addr, struct.pack("<I", hop))
