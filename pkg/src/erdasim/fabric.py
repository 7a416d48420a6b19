"""Discrete-event RDMA fabric with a volatile NIC cache per endpoint.

Client logic runs as generator coroutines that yield verb descriptors
(OneSidedRead, OneSidedWrite, Send, Recv, Sleep, CpuWork) and resume
with the verb's result.  Server request handling is a synchronous
callback driven by polled completions; a single busy-until cursor
serializes each server CPU, so queueing delay emerges naturally under
load.

One-sided writes land in the target's NIC cache and drain to the NVM
device a configurable delay later; the ACK returns as soon as the NIC
has the payload.  That is the whole hazard this package exists to
model: an acknowledged write is not yet durable.  A one-sided read
from the same endpoint forces the reader's earlier writes down to the
device first, which is the classic "read forces prior writes into the
persistence domain" idiom.

Simulated time is integer nanoseconds.  All scheduling is
deterministic per seed: the event heap breaks ties by insertion order.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field

from .nvm import CrashModel, NvmDevice


class FabricError(Exception):
    pass


class RemoteAccessError(FabricError):
    """Verb targeted a dead endpoint or an unregistered region."""


@dataclass(frozen=True)
class CostModel:
    rtt: int = 2000                  # ns, full round trip
    per_byte: int = 1                # ns per payload byte on the wire
    server_cpu_op: int = 1500        # ns per polled completion
    server_cpu_per_byte: int = 1     # ns per request/reply byte the CPU touches
    nvm_write_extra: int = 150       # ns per store batch
    drain_delay: int = 2000          # ns from NIC landing to device store

    def settle_time(self, max_payload: int) -> int:
        """Upper bound for an already-granted write to become durable."""
        return self.rtt + self.per_byte * max_payload + self.drain_delay \
            + self.nvm_write_extra


# ---- verbs yielded by coroutines ----

@dataclass(frozen=True)
class OneSidedRead:
    dst: int
    addr: int
    nbytes: int
    rkey: int | None = None


@dataclass(frozen=True)
class OneSidedWrite:
    dst: int
    addr: int
    data: bytes
    imm: int | None = None
    rkey: int | None = None


@dataclass(frozen=True)
class Send:
    dst: int
    data: bytes


@dataclass(frozen=True)
class Recv:
    pass


@dataclass(frozen=True)
class Sleep:
    ns: int


@dataclass(frozen=True)
class CpuWork:
    """Occupy this endpoint's CPU for ns; serializes with dispatches."""
    ns: int


@dataclass
class Region:
    rid: int
    base: int
    length: int
    rkey: int
    volatile: bool = False           # request buffers: not device-backed

    def covers(self, addr: int, n: int) -> bool:
        return self.base <= addr and addr + n <= self.base + self.length


@dataclass
class NicEntry:
    addr: int
    data: bytes
    src: int
    drained: bool = False


@dataclass
class Completion:
    payload: bytes
    src: int
    imm: int | None
    at: int


@dataclass
class Task:
    gen: object
    ep: "Endpoint"
    done: bool = False
    result: object = None
    error: BaseException | None = None


@dataclass
class Event:
    t: int
    seq: int
    fn: object
    kind: str = ""
    src: int = -1
    dst: int = -1
    payload: bytearray | None = None
    cancelled: bool = False

    def __lt__(self, other):
        return (self.t, self.seq) < (other.t, other.seq)


class Endpoint:
    def __init__(self, fabric: "Fabric", eid: int, name: str,
                 device: NvmDevice | None, crash_model: CrashModel | None,
                 handler):
        self.fabric = fabric
        self.id = eid
        self.name = name
        self.device = device
        self.crash_model = crash_model or CrashModel()
        self.handler = handler       # server-style dispatch when set
        self.regions: list[Region] = []
        self.nic_cache: list[NicEntry] = []
        self.inbox: deque[Completion] = deque()
        self.recv_queue: deque[Completion] = deque()
        self.waiting: Task | None = None
        self.peers: set[int] = set()
        self.alive = True
        self.cpu_busy_until = 0
        self.cpu_events = 0
        self._dispatch_pending = False

    def register(self, rid: int, base: int, length: int, rkey: int,
                 volatile: bool = False) -> Region:
        region = Region(rid, base, length, rkey, volatile)
        self.regions.append(region)
        return region

    def unregister(self, rid: int) -> None:
        self.regions = [r for r in self.regions if r.rid != rid]

    def find_region(self, addr: int, n: int, rkey: int | None) -> Region | None:
        for region in self.regions:
            if region.covers(addr, n) and (rkey is None or rkey == region.rkey):
                return region
        return None


class Fabric:
    def __init__(self, cost: CostModel | None = None, seed: int = 0,
                 trace: bool = False):
        self.cost = cost or CostModel()
        self.now = 0
        self.rng = random.Random(seed)
        self._heap: list[Event] = []
        self._seq = 0
        self.endpoints: dict[int, Endpoint] = {}
        self._next_eid = 0
        self.tasks: list[Task] = []
        self.verb_counts: dict[str, int] = {}
        self.trace: list[dict] | None = [] if trace else None

    # ---- topology ----

    def endpoint(self, name: str, device: NvmDevice | None = None,
                 crash_model: CrashModel | None = None,
                 handler=None) -> Endpoint:
        eid = self._next_eid
        self._next_eid += 1
        ep = Endpoint(self, eid, name, device, crash_model, handler)
        self.endpoints[eid] = ep
        return ep

    def connect(self, a: Endpoint, b: Endpoint) -> None:
        a.peers.add(b.id)
        b.peers.add(a.id)

    # ---- scheduling ----

    def at(self, delay: int, fn, kind: str = "", src: int = -1, dst: int = -1,
           payload: bytearray | None = None) -> Event:
        ev = Event(self.now + delay, self._seq, fn, kind, src, dst, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def step(self) -> bool:
        while self._heap:
            ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.now = ev.t
            ev.fn(ev)
            return True
        return False

    def run(self, max_events: int = 10_000_000, until: int | None = None,
            until_task: Task | None = None) -> None:
        for _ in range(max_events):
            if until_task is not None and until_task.done:
                return
            if until is not None and self._heap and self._heap[0].t > until:
                return
            if not self.step():
                return
        raise FabricError("event budget exhausted")

    def pending_events(self) -> int:
        return sum(1 for ev in self._heap if not ev.cancelled)

    # ---- tracing / counters ----

    def _count(self, kind: str) -> None:
        self.verb_counts[kind] = self.verb_counts.get(kind, 0) + 1

    def _trace(self, kind: str, src: int, dst: int, addr: int = -1,
               nbytes: int = 0, imm: int | None = None) -> None:
        if self.trace is not None:
            self.trace.append({"t": self.now, "kind": kind, "src": src,
                               "dst": dst, "addr": addr, "len": nbytes,
                               "imm": imm})

    def dump_trace(self, path: str) -> None:
        if self.trace is None:
            raise FabricError("tracing was not enabled")
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec) + "\n")

    # ---- coroutines ----

    def spawn(self, ep: Endpoint, gen) -> Task:
        task = Task(gen, ep)
        self.tasks.append(task)
        self.at(0, lambda ev: self._resume(task, None))
        return task

    def call(self, ep: Endpoint, gen):
        """Run gen to completion (other traffic progresses too)."""
        task = self.spawn(ep, gen)
        self.run(until_task=task)
        if not task.done:
            raise FabricError("task did not complete")
        if task.error is not None:
            raise task.error
        return task.result

    def _resume(self, task: Task, value, exc: BaseException | None = None):
        if task.done or not task.ep.alive:
            return
        try:
            verb = task.gen.throw(exc) if exc is not None else task.gen.send(value)
        except StopIteration as stop:
            task.done = True
            task.result = stop.value
            return
        except BaseException as err:
            task.done = True
            task.error = err
            return
        self._issue(task, verb)

    def _fail(self, task: Task, exc: BaseException) -> None:
        self.at(0, lambda ev: self._resume(task, None, exc))

    # ---- verb issue ----

    def _issue(self, task: Task, verb) -> None:
        ep = task.ep
        if isinstance(verb, Sleep):
            self.at(verb.ns, lambda ev: self._resume(task, None))
        elif isinstance(verb, CpuWork):
            start = max(self.now, ep.cpu_busy_until)
            ep.cpu_busy_until = start + verb.ns
            self.at(ep.cpu_busy_until - self.now,
                    lambda ev: self._resume(task, None))
        elif isinstance(verb, Recv):
            if ep.recv_queue:
                comp = ep.recv_queue.popleft()
                self.at(0, lambda ev: self._resume(task, comp))
            else:
                if ep.waiting is not None:
                    raise FabricError(f"{ep.name}: second concurrent Recv")
                ep.waiting = task
        elif isinstance(verb, Send):
            self._count("send")
            self._trace("send", ep.id, verb.dst, nbytes=len(verb.data))
            dst = self.endpoints.get(verb.dst)
            if dst is None or not dst.alive or verb.dst not in ep.peers:
                self._fail(task, RemoteAccessError(
                    f"send to unavailable endpoint {verb.dst}"))
                return
            self.post_message(ep, verb.dst, verb.data)
            self.at(0, lambda ev: self._resume(task, None))
        elif isinstance(verb, OneSidedRead):
            self._issue_read(task, verb)
        elif isinstance(verb, OneSidedWrite):
            self._issue_write(task, verb)
        else:
            self._fail(task, FabricError(f"unknown verb {verb!r}"))

    def _issue_read(self, task: Task, verb: OneSidedRead) -> None:
        ep = task.ep
        self._count("rdma_read")
        self._trace("rdma_read", ep.id, verb.dst, verb.addr, verb.nbytes)
        dst = self.endpoints.get(verb.dst)
        if dst is None or not dst.alive or verb.dst not in ep.peers:
            self._fail(task, RemoteAccessError("read peer unavailable"))
            return
        region = dst.find_region(verb.addr, verb.nbytes, verb.rkey)
        if region is None or region.volatile or dst.device is None:
            self._fail(task, RemoteAccessError(
                f"read [{verb.addr}, +{verb.nbytes}) not readable"))
            return

        def serve(ev):
            if not dst.alive:
                self._fail(task, RemoteAccessError("read target crashed"))
                return
            # reads force the reader's earlier writes down to the device
            self._drain_from(dst, ep.id)
            data = dst.device.read(verb.addr, verb.nbytes)
            self.at(self.cost.rtt // 2 + self.cost.per_byte * verb.nbytes,
                    lambda e2: self._resume(task, data),
                    kind="read_data", src=verb.dst, dst=ep.id)

        self.at(self.cost.rtt // 2, serve, kind="read_serve",
                src=ep.id, dst=verb.dst)

    def _issue_write(self, task: Task, verb: OneSidedWrite) -> None:
        ep = task.ep
        kind = "rdma_write_imm" if verb.imm is not None else "rdma_write"
        self._count(kind)
        self._trace(kind, ep.id, verb.dst, verb.addr, len(verb.data), verb.imm)
        dst = self.endpoints.get(verb.dst)
        if dst is None or not dst.alive or verb.dst not in ep.peers:
            self._fail(task, RemoteAccessError("write peer unavailable"))
            return
        region = dst.find_region(verb.addr, len(verb.data), verb.rkey)
        if region is None:
            self._fail(task, RemoteAccessError(
                f"write [{verb.addr}, +{len(verb.data)}) not registered"))
            return
        land_delay = self.cost.rtt // 2 + self.cost.per_byte * len(verb.data)
        payload = bytearray(verb.data)

        def land(ev):
            if not dst.alive:
                return
            data = bytes(ev.payload)
            if data and not region.volatile and dst.device is not None:
                entry = NicEntry(verb.addr, data, ep.id)
                dst.nic_cache.append(entry)
                self.at(self.cost.drain_delay,
                        lambda e2: self._drain_entry(dst, entry),
                        kind="nic_drain", src=ep.id, dst=dst.id)
            if verb.imm is not None:
                self._deliver(dst, Completion(data, ep.id, verb.imm, self.now))

        self.at(land_delay, land, kind="write_land", src=ep.id, dst=verb.dst,
                payload=payload)
        self.at(land_delay + self.cost.rtt // 2,
                lambda ev: self._resume(task, True),
                kind="write_ack", src=verb.dst, dst=ep.id)

    # ---- NIC cache drain ----

    def _drain_entry(self, ep: Endpoint, entry: NicEntry) -> None:
        if entry.drained or not ep.alive:
            return
        entry.drained = True
        ep.device.store(entry.addr, entry.data)
        self.at(self.cost.nvm_write_extra, lambda ev: self._flush_device(ep),
                kind="nvm_flush", dst=ep.id)
        ep.nic_cache = [e for e in ep.nic_cache if not e.drained]

    def _flush_device(self, ep: Endpoint) -> None:
        if ep.alive and ep.device is not None:
            ep.device.flush()

    def _drain_from(self, ep: Endpoint, src: int) -> None:
        """Synchronously persist src's landed-but-undrained writes."""
        for entry in list(ep.nic_cache):
            if entry.src == src and not entry.drained:
                entry.drained = True
                ep.device.store(entry.addr, entry.data)
        ep.nic_cache = [e for e in ep.nic_cache if not e.drained]
        ep.device.flush()

    # ---- two-sided messages ----

    def post_message(self, src_ep: Endpoint, dst_id: int, data: bytes) -> None:
        """Queue a send from handler or coroutine context."""
        delay = self.cost.rtt // 2 + self.cost.per_byte * len(data)
        payload = bytes(data)

        def deliver(ev):
            dst = self.endpoints.get(dst_id)
            if dst is None or not dst.alive:
                self._trace("send_drop", src_ep.id, dst_id, nbytes=len(payload))
                return
            self._deliver(dst, Completion(payload, src_ep.id, None, self.now))

        self.at(delay, deliver, kind="send_deliver", src=src_ep.id, dst=dst_id)

    def _deliver(self, ep: Endpoint, comp: Completion) -> None:
        if ep.handler is not None:
            ep.inbox.append(comp)
            self._schedule_dispatch(ep)
        else:
            ep.recv_queue.append(comp)
            if ep.waiting is not None:
                task, ep.waiting = ep.waiting, None
                self.at(0, lambda ev: self._resume_recv(task))

    def _resume_recv(self, task: Task) -> None:
        ep = task.ep
        if not ep.recv_queue:
            ep.waiting = task
            return
        self._resume(task, ep.recv_queue.popleft())

    # ---- server CPU ----

    def _schedule_dispatch(self, ep: Endpoint) -> None:
        if ep._dispatch_pending:
            return
        ep._dispatch_pending = True
        delay = max(0, ep.cpu_busy_until - self.now)
        self.at(delay, lambda ev: self._dispatch(ep), kind="cpu_dispatch",
                dst=ep.id)

    def _dispatch(self, ep: Endpoint) -> None:
        ep._dispatch_pending = False
        if not ep.alive or not ep.inbox:
            return
        if self.now < ep.cpu_busy_until:
            self._schedule_dispatch(ep)
            return
        comp = ep.inbox.popleft()
        ep.cpu_events += 1
        self._trace("cpu_op", comp.src, ep.id, nbytes=len(comp.payload),
                    imm=comp.imm)
        stores_before = ep.device.store_ops if ep.device else 0
        replies: list[tuple[int, bytes]] = []
        ep.handler(comp, replies.append)
        stores_after = ep.device.store_ops if ep.device else 0
        reply_bytes = sum(len(d) for _, d in replies)
        duration = (self.cost.server_cpu_op
                    + self.cost.server_cpu_per_byte * (len(comp.payload) + reply_bytes)
                    + self.cost.nvm_write_extra * (stores_after - stores_before))
        ep.cpu_busy_until = self.now + duration

        def send_replies(ev):
            for dst_id, data in replies:
                self.post_message(ep, dst_id, data)

        self.at(duration, send_replies, kind="cpu_done", dst=ep.id)
        if ep.inbox:
            self._schedule_dispatch(ep)

    def server_work(self, ep: Endpoint, ns: int, count_event: bool = False):
        """Charge background CPU work (log apply, cleaning steps)."""
        start = max(self.now, ep.cpu_busy_until)
        ep.cpu_busy_until = start + ns
        if count_event:
            ep.cpu_events += 1
        return ep.cpu_busy_until - self.now

    # ---- failures ----

    def crash_endpoint(self, ep: Endpoint) -> None:
        """Power-fail ep: volatile state gone, in-flight verbs resolved."""
        if not ep.alive:
            return
        ep.alive = False
        self._trace("crash", ep.id, ep.id)
        rng = random.Random((ep.crash_model.seed << 8) ^ ep.id ^ self._seq)
        for ev in self._heap:
            if ev.cancelled:
                continue
            if ev.kind == "write_land" and ev.src == ep.id and ev.payload:
                # transfer interrupted: an arbitrary prefix still lands
                cut = rng.randint(0, len(ev.payload))
                del ev.payload[cut:]
            elif ev.dst == ep.id and ev.kind in (
                    "read_data", "write_ack", "send_deliver", "cpu_dispatch",
                    "cpu_done", "nic_drain", "nvm_flush"):
                ev.cancelled = True
        ep.nic_cache.clear()            # landed-but-undrained writes are gone
        ep.inbox.clear()
        ep.recv_queue.clear()
        ep.waiting = None
        if ep.device is not None:
            ep.device.crash(ep.crash_model)
