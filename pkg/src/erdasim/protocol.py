"""The one-sided log-structured store: server, client, and recovery.

Write path: the client asks the server for a log slot with a small
request (RDMA write-with-imm, imm = client id), the server updates the
hash entry before any data exists (flip the tag, point the new slot at
the granted offset), then the client writes the framed record straight
into the log with a plain one-sided write.  The object write is
acknowledged by the NIC, not the server, so an ACK never implies
durability; the CRC in the record plus the old-offset fallback in the
entry word is what makes a crash recoverable.

Read path: one one-sided read of the key's neighborhood window, one
one-sided read of the log window at the tag-selected offset.  No
server CPU is involved unless the record fails verification, in which
case the client retries, falls back to the old offset, and notifies
the server to repair the entry.

Request message formats (little-endian), first byte dispatches:

    WRITE_REQ   op(1: 1=put, 2=delete) | key_len(1) | key | object_size(4)
                [| object bytes when the head is under cleaning]
    READ_REQ    op(3) | key_len(1) | key
    REPAIR_REQ  op(4) | key_len(1) | key | observed_word(8)
    CONNECT_REQ op(5)
    HEADS_REQ   op(6)
    WRITE_RESP  status(1) | head_id(1) | chain_offset(4)
    READ_RESP   status(1) | value_len(4) | value
    REPAIR_RESP status(1)

Notification messages from the server start with a byte >= 0xC0 so a
client waiting on a response can tell them apart from any status byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import cleaner as cleaning
from .codec import (OFFSET_SENTINEL, encode_record, flip_word, pack_word,
                    record_len, unpack_word, verify_record, nvm_write_cost)
from .config import Geometry
from .fabric import (CostModel, Fabric, OneSidedRead, OneSidedWrite, Recv,
                     RemoteAccessError, Send, Sleep)
from .index import ENTRY_LEN, HopscotchIndex, TableFullError, hash64, scan_window
from .nvm import CrashModel, NvmDevice

SUPER_MAGIC = b"ERDASRV1"
_SUPER = struct.Struct("<8sBBHIQQ")   # magic, heads, ?, table_slots_log2.. packed below

OP_PUT = 1
OP_DELETE = 2
OP_READ = 3
OP_REPAIR = 4
OP_CONNECT = 5
OP_HEADS = 6

ST_OK = 0
ST_NOT_FOUND = 1
ST_FULL = 2
ST_RETRY = 3

NOTIFY_CLEAN_START = 0xC1
NOTIFY_CLEAN_FINISH = 0xC2
NOTIFY_HEADS = 0xC3

TABLE_RKEY = 1
REQUEST_RKEY = 2
REQUEST_BASE = 1 << 40               # volatile request slots, not device backed
REQUEST_SLOT = 256

ROW_FREE = 0xFF

WRITE_RESP = struct.Struct("<BBI")
READ_RESP_HDR = struct.Struct("<BI")


class ProtocolError(Exception):
    pass


class DataLossError(ProtocolError):
    """Both the new and old version of a key failed verification."""


@dataclass
class GetResult:
    status: str                      # "ok" | "not_found" | "recovered"
    value: bytes | None = None

    @property
    def found(self) -> bool:
        return self.status in ("ok", "recovered")


@dataclass
class PutResult:
    status: str                      # "ok" | "not_found" | "full"


# ---- wire helpers ----

def build_write_req(op: int, key: bytes, object_size: int,
                    payload: bytes = b"") -> bytes:
    return bytes([op, len(key)]) + key + struct.pack("<I", object_size) + payload


def parse_write_req(msg: bytes) -> tuple[int, bytes, int, bytes]:
    op = msg[0]
    klen = msg[1]
    key = msg[2:2 + klen]
    size = struct.unpack_from("<I", msg, 2 + klen)[0]
    return op, key, size, msg[6 + klen:]


def build_read_req(key: bytes) -> bytes:
    return bytes([OP_READ, len(key)]) + key


def build_repair_req(key: bytes, observed_word: int) -> bytes:
    return bytes([OP_REPAIR, len(key)]) + key + struct.pack("<Q", observed_word)


def region_rkey(region_id: int) -> int:
    return 1000 + region_id


# ---- log heads ----

@dataclass
class LogHead:
    head_id: int
    epoch: int
    chain: list[int] = field(default_factory=list)      # region ids in order
    last_written: int = 0                               # chain offset
    extents: list[tuple[int, int]] = field(default_factory=list)
    cleaning: "cleaning.CleaningSession | None" = None

    def capacity(self, region_size: int) -> int:
        return len(self.chain) * region_size


def advance_cursor(cursor: int, size: int, segment_size: int) -> int:
    """Skip to the next segment when the object would cross a boundary."""
    rem = segment_size - (cursor % segment_size)
    if size > rem:
        cursor += rem
    return cursor


def head_for_key(key: bytes, heads: int) -> int:
    # high hash bits so head choice is independent of the table slot
    return (hash64(key) >> 32) % heads


# ---- durable layout helpers shared with recovery ----

def write_row(device: NvmDevice, geom: Geometry, rid: int, owner: int,
              epoch: int, pos: int) -> None:
    device.store(geom.region_table_off + 4 * rid,
                 struct.pack("<BBH", owner, epoch, pos))
    device.flush()


def read_row(device: NvmDevice, geom: Geometry, rid: int) -> tuple[int, int, int]:
    raw = device.read(geom.region_table_off + 4 * rid, 4)
    return struct.unpack("<BBH", raw)


def read_epochs(device: NvmDevice, geom: Geometry) -> list[int]:
    return list(device.read(geom.epoch_word_off, 8))


def write_epoch(device: NvmDevice, geom: Geometry, head_id: int,
                epoch: int) -> None:
    word = bytearray(device.read(geom.epoch_word_off, 8))
    word[head_id] = epoch & 0xFF
    device.store(geom.epoch_word_off, bytes(word), atomic8=True)
    device.flush()


def read_clean_word(device: NvmDevice, geom: Geometry) -> tuple[int, int, int]:
    raw = device.read(geom.clean_word_off, 8)
    return raw[0], raw[1], raw[2]     # phase, head_id, target_epoch


def write_clean_word(device: NvmDevice, geom: Geometry, phase: int,
                     head_id: int, target_epoch: int) -> None:
    device.store(geom.clean_word_off,
                 bytes([phase, head_id, target_epoch, 0, 0, 0, 0, 0]),
                 atomic8=True)
    device.flush()


def chain_translate(geom: Geometry, chain: list[int], chain_off: int) -> int:
    idx, intra = divmod(chain_off, geom.region_size)
    if idx >= len(chain):
        raise ProtocolError(f"chain offset {chain_off} beyond chain")
    return geom.region_base(chain[idx]) + intra


def read_window(device: NvmDevice, geom: Geometry, chain: list[int],
                chain_off: int) -> bytes:
    """Log bytes at chain_off, clamped to the enclosing segment."""
    seg_rem = geom.segment_size - (chain_off % geom.segment_size)
    n = min(geom.max_object, seg_rem)
    return device.read(chain_translate(geom, chain, chain_off), n)


@dataclass
class RecoveryReport:
    repaired: list[bytes] = field(default_factory=list)
    phantom_creates: list[bytes] = field(default_factory=list)
    deduped: int = 0
    resumed_finish: bool = False
    discarded_cleaning: bool = False
    repair_stores: int = 0


class ErdaServer:
    """Single-threaded server state machine over one NVM device."""

    def __init__(self, fabric: Fabric, geometry: Geometry | None = None,
                 device: NvmDevice | None = None, name: str = "server",
                 crash_model: CrashModel | None = None, _format: bool = True):
        self.fabric = fabric
        self.geom = geometry or Geometry()
        self.device = device or NvmDevice(self.geom.capacity)
        if self.device.capacity < self.geom.capacity:
            raise ProtocolError("device smaller than geometry capacity")
        self.ep = fabric.endpoint(name, device=self.device,
                                  crash_model=crash_model,
                                  handler=self._handle)
        self.index = HopscotchIndex(self.device, self.geom.table_base,
                                    self.geom.table_slots,
                                    self.geom.neighborhood, self.geom.max_key)
        self.heads: list[LogHead] = []
        self.clients: dict[int, int] = {}      # client_id -> endpoint id
        self.heads_version = 1
        self.cleaning_active = False
        self.stats = {op: [0, 0] for op in ("create", "update", "delete", "get")}
        self.last_recovery: RecoveryReport | None = None
        self._register_static()
        if _format:
            self._format()

    # ---- formatting / registration ----

    def _register_static(self) -> None:
        self.ep.register(900, self.geom.table_base,
                         ENTRY_LEN * self.geom.table_entries, TABLE_RKEY)
        self.ep.register(901, REQUEST_BASE, REQUEST_SLOT * 64, REQUEST_RKEY,
                         volatile=True)

    def _format(self) -> None:
        geom = self.geom
        sup = SUPER_MAGIC + struct.pack(
            "<BIQQI", geom.heads, geom.table_slots, geom.region_size,
            geom.segment_size, geom.region_count)
        self.device.store(0, sup)
        for rid in range(geom.region_count):
            self.device.store(geom.region_table_off + 4 * rid,
                              struct.pack("<BBH", ROW_FREE, 0, 0))
        self.device.flush()
        for hid in range(geom.heads):
            head = LogHead(hid, epoch=0)
            self.heads.append(head)
            self._link_region(head)

    def check_super(self) -> None:
        geom = self.geom
        raw = self.device.read(0, len(SUPER_MAGIC) + 25)
        if raw[:8] != SUPER_MAGIC:
            raise ProtocolError("device is not a formatted store image")
        heads, slots, rsize, ssize, rcount = struct.unpack_from("<BIQQI", raw, 8)
        if (heads, slots, rsize, ssize, rcount) != (
                geom.heads, geom.table_slots, geom.region_size,
                geom.segment_size, geom.region_count):
            raise ProtocolError("image geometry does not match configuration")

    def _alloc_region(self, head: LogHead, pos: int) -> int:
        epochs = read_epochs(self.device, self.geom)
        for rid in range(self.geom.region_count):
            owner, epoch, _ = read_row(self.device, self.geom, rid)
            if owner == ROW_FREE or (owner < len(self.heads)
                                     and epoch != epochs[owner]
                                     and not self._epoch_in_use(owner, epoch)):
                base = self.geom.region_base(rid)
                self.device.store(base, b"\x00" * self.geom.region_size)
                write_row(self.device, self.geom, rid, head.head_id,
                          head.epoch & 0xFF, pos)
                self.ep.register(rid, base, self.geom.region_size,
                                 region_rkey(rid))
                return rid
        raise TableFullError("no free log region")

    def _epoch_in_use(self, owner: int, epoch: int) -> bool:
        # a building chain (cleaning target) is live even though its
        # epoch differs from the owner's current epoch
        head = self.heads[owner]
        if head.cleaning is not None and (head.cleaning.target_epoch & 0xFF) == epoch:
            return True
        return False

    def _link_region(self, head: LogHead) -> int:
        rid = self._alloc_region(head, len(head.chain))
        head.chain.append(rid)
        self._bump_heads()
        return rid

    def _bump_heads(self) -> None:
        self.heads_version += 1
        blob = self.heads_blob()
        for cid, eid in self.clients.items():
            self.fabric.post_message(
                self.ep, eid,
                bytes([NOTIFY_HEADS]) + struct.pack("<I", self.heads_version) + blob)

    def heads_blob(self) -> bytes:
        out = bytearray()
        for head in self.heads:
            out += struct.pack("<BBH", head.head_id,
                               1 if head.cleaning is not None else 0,
                               len(head.chain))
            for rid in head.chain:
                out += struct.pack("<HQI", rid, self.geom.region_base(rid),
                                   region_rkey(rid))
        return bytes(out)

    # ---- request dispatch ----

    def _handle(self, comp, reply) -> None:
        msg = comp.payload
        if not msg:
            return
        op = msg[0]
        if op in (OP_PUT, OP_DELETE):
            reply((comp.src, self._h_write(msg, comp)))
        elif op == OP_READ:
            reply((comp.src, self._h_read(msg)))
        elif op == OP_REPAIR:
            reply((comp.src, self._h_repair(msg)))
        elif op == OP_CONNECT:
            reply((comp.src, self._h_connect(comp)))
        elif op == OP_HEADS:
            reply((comp.src, bytes([ST_OK])
                   + struct.pack("<I", self.heads_version) + self.heads_blob()))

    def _h_connect(self, comp) -> bytes:
        client_id = len(self.clients) + 1
        self.clients[client_id] = comp.src
        geom = self.geom
        blob = self.heads_blob()
        return bytes([ST_OK]) + struct.pack(
            "<IQIBBIIII", client_id, geom.table_base, geom.table_slots,
            geom.neighborhood, geom.heads, geom.max_object, TABLE_RKEY,
            REQUEST_RKEY, self.heads_version) + blob

    # ---- write path ----

    def _h_write(self, msg: bytes, comp) -> bytes:
        op, key, size, payload = parse_write_req(msg)
        if not key or len(key) > self.geom.max_key or size > self.geom.max_object:
            return WRITE_RESP.pack(ST_FULL, 0, 0)
        head = self.heads[head_for_key(key, self.geom.heads)]
        session = head.cleaning
        if session is not None and not payload:
            # client believed the head was in one-sided mode; redirect
            return WRITE_RESP.pack(ST_RETRY, head.head_id, 0)

        found = self.index.lookup(key)
        if op == OP_DELETE and found is None:
            return WRITE_RESP.pack(ST_NOT_FOUND, head.head_id, 0)

        try:
            if session is None:
                off = self._grant(head, size)
            else:
                off = session.grant_for_write(self, head, size)
        except TableFullError:
            return WRITE_RESP.pack(ST_FULL, head.head_id, 0)

        is_create = found is None
        pair = size - record_len(len(key), 0) + len(key)   # key+value bytes
        kind = "delete" if op == OP_DELETE else (
            "create" if is_create else "update")
        self._account(kind, len(key), pair)

        if found is None:
            try:
                self.index.insert(key, head.head_id, pack_word(1, off, off))
            except TableFullError:
                return WRITE_RESP.pack(ST_FULL, head.head_id, 0)
        else:
            slot, entry = found
            if session is None:
                word = flip_word(entry.word, off)
            else:
                word = session.word_for_write(entry.word, off)
            self.index.update_word(slot, word)

        if payload:
            # two-sided write: the server stores the object itself
            if len(payload) != size:
                return WRITE_RESP.pack(ST_FULL, head.head_id, 0)
            chain = session.write_chain(head) if session else head.chain
            self.device.store(chain_translate(self.geom, chain, off), payload)
            self.device.flush()
        if session is None and not self.cleaning_active:
            self._maybe_clean(head)
        return WRITE_RESP.pack(ST_OK, head.head_id, off)

    def _grant(self, head: LogHead, size: int) -> int:
        cursor = advance_cursor(head.last_written, size, self.geom.segment_size)
        if cursor + size > head.capacity(self.geom.region_size):
            self._link_region(head)
        off = cursor
        head.last_written = off + size
        head.extents.append((off, size))
        return off

    def _account(self, kind: str, key_size: int, pair: int) -> None:
        cost = nvm_write_cost("erda", kind, key_size, pair) \
            if kind != "get" else 0
        self.device.account(cost)
        self.stats[kind][0] += 1
        self.stats[kind][1] += cost

    def _maybe_clean(self, head: LogHead) -> None:
        cap = head.capacity(self.geom.region_size)
        if cap and head.last_written / cap >= self.geom.clean_threshold:
            self.cleaning_active = True
            session = cleaning.CleaningSession(self, head)
            head.cleaning = session
            self.fabric.spawn(self.ep, session.run())

    # ---- read path (two-sided, used while a head is under cleaning) ----

    def _h_read(self, msg: bytes) -> bytes:
        key = msg[2:2 + msg[1]]
        self.stats["get"][0] += 1
        rec = self.read_record(key)
        if rec is None or rec.is_delete:
            return READ_RESP_HDR.pack(ST_NOT_FOUND, 0)
        return READ_RESP_HDR.pack(ST_OK, len(rec.value)) + rec.value

    def read_record(self, key: bytes):
        found = self.index.lookup(key)
        if found is None:
            return None
        _, entry = found
        head = self.heads[entry.head_id]
        session = head.cleaning
        if session is not None:
            return session.read_record(self, head, key, entry)
        tag, new, old = unpack_word(entry.word)
        rec = self._record_at(head.chain, new, key)
        if rec is not None:
            return rec
        if old != new:
            return self._record_at(head.chain, old, key)
        return None

    def _record_at(self, chain: list[int], chain_off: int, key: bytes):
        if chain_off == OFFSET_SENTINEL:
            return None
        try:
            window = read_window(self.device, self.geom, chain, chain_off)
        except ProtocolError:
            return None
        rec = verify_record(window)
        if rec is not None and rec.key == key:
            return rec
        return None

    # ---- repair ----

    def _h_repair(self, msg: bytes) -> bytes:
        klen = msg[1]
        key = msg[2:2 + klen]
        observed = struct.unpack_from("<Q", msg, 2 + klen)[0]
        self.repair_entry(key, observed)
        return bytes([ST_OK])

    def repair_entry(self, key: bytes, observed_word: int) -> bool:
        """Point both offsets at the old version; skip if the word moved."""
        found = self.index.lookup(key)
        if found is None:
            return False
        slot, entry = found
        if entry.word != observed_word:
            return False
        tag, _, old = unpack_word(observed_word)
        self.index.update_word(slot, pack_word(tag, old, old))
        return True

    # ---- restart recovery ----

    @classmethod
    def recover(cls, fabric: Fabric, device: NvmDevice,
                geometry: Geometry | None = None, name: str = "server",
                crash_model: CrashModel | None = None) -> "ErdaServer":
        server = cls(fabric, geometry, device, name, crash_model, _format=False)
        server.check_super()
        report = RecoveryReport()
        geom = server.geom
        epochs = read_epochs(device, geom)

        phase, clean_head, target_epoch = read_clean_word(device, geom)
        if phase in (1, 2):
            # mid-merge or mid-replication: the building chain is garbage
            write_clean_word(device, geom, 0, 0, 0)
            report.discarded_cleaning = True
        elif phase == 3:
            cleaning.complete_finish(device, geom, server.index, clean_head,
                                     target_epoch)
            epochs = read_epochs(device, geom)
            report.resumed_finish = True

        # rebuild chains from the region table
        rows = []
        for rid in range(geom.region_count):
            owner, epoch, pos = read_row(device, geom, rid)
            rows.append((owner, epoch, pos))
        for hid in range(geom.heads):
            members = sorted(
                (pos, rid) for rid, (owner, epoch, pos) in enumerate(rows)
                if owner == hid and epoch == epochs[hid])
            head = LogHead(hid, epoch=epochs[hid],
                           chain=[rid for _, rid in members])
            server.heads.append(head)
            for rid in head.chain:
                server.ep.register(rid, geom.region_base(rid),
                                   geom.region_size, region_rkey(rid))

        server._dedup(report)
        server._repair_sweep(report)
        server._rebuild_cursors(report)
        server.last_recovery = report
        return server

    def _dedup(self, report: RecoveryReport) -> None:
        seen: dict[bytes, int] = {}
        for slot, entry in list(self.index.live_entries()):
            if entry.key in seen:
                self.index.remove(slot)
                report.deduped += 1
            else:
                seen[entry.key] = slot

    def _repair_sweep(self, report: RecoveryReport) -> None:
        for slot, entry in self.index.live_entries():
            head = self.heads[entry.head_id]
            tag, new, old = unpack_word(entry.word)
            if self._record_valid(head.chain, new, entry.key):
                continue
            if new == old:
                report.phantom_creates.append(entry.key)
                continue
            self.index.update_word(slot, pack_word(tag, old, old))
            report.repaired.append(entry.key)
            report.repair_stores += 1

    def _record_valid(self, chain: list[int], chain_off: int,
                      key: bytes) -> bool:
        return self._record_at(chain, chain_off, key) is not None

    def _rebuild_cursors(self, report: RecoveryReport) -> None:
        geom = self.geom
        refs: dict[int, list[tuple[int, int]]] = {h.head_id: [] for h in self.heads}
        for _, entry in self.index.live_entries():
            head = self.heads[entry.head_id]
            _, new, old = unpack_word(entry.word)
            for off in {new, old}:
                rec = self._record_at(head.chain, off, entry.key)
                if rec is not None:
                    refs[entry.head_id].append((off, rec.length))
        for head in self.heads:
            extents: list[tuple[int, int]] = []
            last = 0
            for seg_start in range(0, head.capacity(geom.region_size),
                                   geom.segment_size):
                cursor = seg_start
                while True:
                    window = read_window(self.device, geom, head.chain, cursor)
                    rec = verify_record(window)
                    if rec is None:
                        break
                    extents.append((cursor, rec.length))
                    cursor += rec.length
                    last = max(last, cursor)
                    if cursor % geom.segment_size == 0:
                        break
            for off, length in refs[head.head_id]:
                last = max(last, off + length)
                if (off, length) not in extents:
                    extents.append((off, length))
            extents.sort()
            head.extents = extents
            head.last_written = last


# ---- client ----

@dataclass
class _Session:
    client_id: int = 0
    table_base: int = 0
    table_slots: int = 0
    neighborhood: int = 32
    heads: int = 1
    max_object: int = 4096
    table_rkey: int = TABLE_RKEY
    request_rkey: int = REQUEST_RKEY
    heads_version: int = 0
    # per head: (cleaning flag, [(rid, base, rkey), ...])
    head_map: dict[int, tuple[bool, list[tuple[int, int, int]]]] = field(
        default_factory=dict)


class ErdaClient:
    """One connection to one server; ops are coroutines for the fabric."""

    def __init__(self, fabric: Fabric, server: ErdaServer, name: str = "client",
                 retry_limit: int | None = None,
                 crash_model: CrashModel | None = None):
        self.fabric = fabric
        self.server_id = server.ep.id
        self.geom = server.geom
        self.ep = fabric.endpoint(name, crash_model=crash_model)
        fabric.connect(self.ep, server.ep)
        self.retry_limit = (retry_limit if retry_limit is not None
                            else server.geom.retry_limit)
        self.session = _Session()
        self.counters = {"gets": 0, "puts": 0, "deletes": 0, "reads": 0,
                         "round_trips": 0, "repairs": 0, "recovered": 0,
                         "retries": 0}
        self.op_log: list[tuple] = []
        self._disable_verify = False       # test hook, see crash harness

    # ---- plumbing ----

    def _rpc(self, payload: bytes):
        yield Send(self.server_id, payload)
        self.counters["round_trips"] += 1
        while True:
            comp = yield Recv()
            if comp.payload and comp.payload[0] >= 0xC0:
                self._apply_notification(comp.payload)
                continue
            return comp.payload

    def _apply_notification(self, msg: bytes) -> None:
        kind = msg[0]
        if kind == NOTIFY_CLEAN_START:
            head = msg[1]
            if head in self.session.head_map:
                flags, regions = self.session.head_map[head]
                self.session.head_map[head] = (True, regions)
        elif kind in (NOTIFY_CLEAN_FINISH, NOTIFY_HEADS):
            base = 2 if kind == NOTIFY_CLEAN_FINISH else 1
            version = struct.unpack_from("<I", msg, base)[0]
            if version >= self.session.heads_version:
                self.session.heads_version = version
                self._parse_heads(msg[base + 4:])

    def _parse_heads(self, blob: bytes) -> None:
        off = 0
        head_map = {}
        while off < len(blob):
            hid, cleaning, count = struct.unpack_from("<BBH", blob, off)
            off += 4
            regions = []
            for _ in range(count):
                rid, base, rkey = struct.unpack_from("<HQI", blob, off)
                off += 14
                regions.append((rid, base, rkey))
            head_map[hid] = (bool(cleaning), regions)
        self.session.head_map = head_map

    def drain_notifications(self) -> None:
        """Apply queued notifications between ops (no fabric progress)."""
        queue = self.ep.recv_queue
        while queue and queue[0].payload and queue[0].payload[0] >= 0xC0:
            self._apply_notification(queue.popleft().payload)

    def connect(self):
        resp = yield from self._rpc(bytes([OP_CONNECT]))
        if resp[0] != ST_OK:
            raise ProtocolError("connect rejected")
        s = self.session
        (s.client_id, s.table_base, s.table_slots, s.neighborhood, s.heads,
         s.max_object, s.table_rkey, s.request_rkey,
         s.heads_version) = struct.unpack_from("<IQIBBIIII", resp, 1)
        self._parse_heads(resp[1 + struct.calcsize("<IQIBBIIII"):])
        return s.client_id

    def _refresh_heads(self):
        resp = yield from self._rpc(bytes([OP_HEADS]))
        if resp[0] != ST_OK:
            raise ProtocolError("heads refresh rejected")
        self.session.heads_version = struct.unpack_from("<I", resp, 1)[0]
        self._parse_heads(resp[5:])

    def _translate(self, head_id: int, chain_off: int):
        cleaning_flag, regions = self.session.head_map[head_id]
        idx, intra = divmod(chain_off, self.geom.region_size)
        if idx >= len(regions):
            return None
        rid, base, rkey = regions[idx]
        return base + intra, rkey

    def _head_cleaning(self, head_id: int) -> bool:
        flags = self.session.head_map.get(head_id)
        return bool(flags and flags[0])

    # ---- operations ----

    def put(self, key: bytes, value: bytes) -> "PutResult":
        return (yield from self._write_op(OP_PUT, key, value))

    def delete(self, key: bytes) -> "PutResult":
        return (yield from self._write_op(OP_DELETE, key, None))

    def _write_op(self, op: int, key: bytes, value: bytes | None):
        self.drain_notifications()
        self.counters["puts" if op == OP_PUT else "deletes"] += 1
        obj = encode_record(key, value)
        head_id = head_for_key(key, self.session.heads)
        for attempt in range(4):
            if self._head_cleaning(head_id):
                resp = yield from self._rpc(
                    build_write_req(op, key, len(obj), obj))
            else:
                req = build_write_req(op, key, len(obj))
                slot_addr = REQUEST_BASE + REQUEST_SLOT * self.session.client_id
                yield OneSidedWrite(self.server_id, slot_addr, req,
                                    imm=self.session.client_id,
                                    rkey=self.session.request_rkey)
                self.counters["round_trips"] += 1
                while True:
                    comp = yield Recv()
                    if comp.payload and comp.payload[0] >= 0xC0:
                        self._apply_notification(comp.payload)
                        continue
                    resp = comp.payload
                    break
            status, resp_head, off = WRITE_RESP.unpack(resp)
            if status == ST_NOT_FOUND:
                return PutResult("not_found")
            if status == ST_RETRY:
                flags, regions = self.session.head_map[resp_head]
                self.session.head_map[resp_head] = (True, regions)
                continue
            if status == ST_FULL:
                yield Sleep(self.fabric.cost.rtt)
                yield from self._refresh_heads()
                continue
            if self._head_cleaning(resp_head):
                return PutResult("ok")        # server stored it two-sided
            target = self._translate(resp_head, off)
            if target is None:
                yield from self._refresh_heads()
                target = self._translate(resp_head, off)
                if target is None:
                    raise ProtocolError("granted offset beyond known chain")
            addr, rkey = target
            yield OneSidedWrite(self.server_id, addr, obj, rkey=rkey)
            self.counters["round_trips"] += 1
            self.op_log.append(("put" if op == OP_PUT else "delete",
                                key, value, resp_head, off))
            return PutResult("ok")
        return PutResult("full")

    def get(self, key: bytes) -> "GetResult":
        self.drain_notifications()
        self.counters["gets"] += 1
        head_id = head_for_key(key, self.session.heads)
        if self._head_cleaning(head_id):
            resp = yield from self._rpc(build_read_req(key))
            status, vlen = READ_RESP_HDR.unpack_from(resp)
            if status != ST_OK:
                return GetResult("not_found")
            return GetResult("ok", resp[5:5 + vlen])
        for round_ in range(2):
            try:
                return (yield from self._one_sided_get(key))
            except (RemoteAccessError, ProtocolError):
                if round_:
                    raise
                # stale head cache (cleaning finished, regions moved)
                yield from self._refresh_heads()
                if self._head_cleaning(head_id):
                    return (yield from self.get(key))
        raise ProtocolError("unreachable")

    def _one_sided_get(self, key: bytes):
        s = self.session
        entry_addr = s.table_base + ENTRY_LEN * (hash64(key) % s.table_slots)
        window = yield OneSidedRead(
            self.server_id, entry_addr, ENTRY_LEN * s.neighborhood,
            rkey=s.table_rkey)
        self.counters["reads"] += 1
        self.counters["round_trips"] += 1
        hit = scan_window(window, key)
        if hit is None:
            return GetResult("not_found")
        _, entry = hit
        tag, new, old = unpack_word(entry.word)
        rec = None
        for attempt in range(1 + self.retry_limit):
            rec = yield from self._read_record(entry.head_id, new, key)
            if rec is not None:
                break
            if attempt < self.retry_limit:
                self.counters["retries"] += 1
                yield Sleep(self.fabric.cost.rtt)
        if rec is not None:
            if rec.is_delete:
                return GetResult("not_found")
            return GetResult("ok", rec.value)
        if old == new:
            # the create never finished; the key logically never existed
            return GetResult("not_found")
        rec = yield from self._read_record(entry.head_id, old, key)
        if rec is None:
            raise DataLossError(f"both versions of {key!r} unreadable")
        self.counters["repairs"] += 1
        self.counters["recovered"] += 1
        yield from self._rpc(build_repair_req(key, entry.word))
        if rec.is_delete:
            return GetResult("not_found")
        return GetResult("recovered", rec.value)

    def _read_record(self, head_id: int, chain_off: int, key: bytes):
        if chain_off == OFFSET_SENTINEL:
            return None
        target = self._translate(head_id, chain_off)
        if target is None:
            raise ProtocolError("offset beyond cached chain")
        addr, rkey = target
        seg_rem = self.geom.segment_size - (chain_off % self.geom.segment_size)
        n = min(self.session.max_object, seg_rem)
        window = yield OneSidedRead(self.server_id, addr, n, rkey=rkey)
        self.counters["reads"] += 1
        self.counters["round_trips"] += 1
        rec = verify_record(window)
        if self._disable_verify and rec is None:
            # hook for harness self-checks: surface torn bytes unchecked
            from .codec import HEADER, HEADER_LEN, Record
            if len(window) >= HEADER_LEN:
                tag_b, _, klen, vlen = HEADER.unpack_from(window)
                end = HEADER_LEN + klen + vlen
                if klen == len(key) and end <= len(window):
                    return Record(key, bytes(window[HEADER_LEN + klen:end]),
                                  bool(tag_b & 1), end)
            return None
        if rec is None or rec.key != key:
            return None
        return rec
