"""Per-party event programs and the discrete-event network simulator.

A program is one global, topologically ordered list of events. Each party
owns a serial compute stream; sends never block; a receive completes when
its matching send has arrived (send time + latency + bytes/bandwidth).
Sequential modes chain every party's events in program order. The
pipelined mode keeps only data dependencies, so input-independent product
terms can run while a party waits on the network.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..net import Frame, MsgKind, NetworkProfile, deliver_time
from ..ring import ring_matmul
from .plan import ExecutionPlan

# calibrate() on the build machine (numpy uint64 matmul, 192^3); rerun to refresh
DEFAULT_NS_PER_MAC = 1.33


@dataclass(frozen=True)
class CostModel:
    ns_per_mac: float = DEFAULT_NS_PER_MAC

    def compute_ms(self, macs: int) -> float:
        return macs * self.ns_per_mac * 1e-6


def calibrate(size: int = 192, repeats: int = 3, seed: int = 0) -> CostModel:
    """Microbenchmark ring matmul and return the measured ns/MAC."""
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2**63, (size, size), dtype=np.uint64)
    b = rng.integers(0, 2**63, (size, size), dtype=np.uint64)
    ring_matmul(a, b, 64)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        ring_matmul(a, b, 64)
        best = min(best, time.perf_counter() - t0)
    return CostModel(best * 1e9 / size**3)


@dataclass
class Event:
    id: int
    party: int
    kind: str  # compute | send | recv
    label: str
    step: int
    deps: list = field(default_factory=list)
    macs: int = 0
    peer: int = 0
    msg: int = 0
    nbytes: int = 0
    wire_bytes: int = 0
    match: int = -1


@dataclass
class EventProgram:
    events: list
    parties: int
    sequential: bool
    mode: str
    protocol: str

    def party_events(self, p: int) -> list:
        return [e for e in self.events if e.party == p]

    def rounds(self) -> int:
        """Longest chain of blocking receives (a receive adds one round over its sender)."""
        depth: dict[int, int] = {}
        for e in self.events:
            d = max((depth[x] for x in e.deps), default=0)
            if e.kind == "recv":
                d = max(d, depth[e.match] + 1)
            depth[e.id] = d
        return max(depth.values(), default=0)

    def channel_bytes(self) -> dict:
        out: dict[str, int] = {}
        for e in self.events:
            if e.kind == "send":
                key = f"P{e.party}->P{e.peer}"
                out[key] = out.get(key, 0) + e.nbytes
        return out

    def validate(self) -> None:
        """Acyclic by construction order; every receive is matched by a send to it."""
        seen = set()
        for e in self.events:
            for d in e.deps:
                if d not in seen:
                    raise ValueError(f"event {e.id} depends on later event {d}")
            if e.kind == "recv":
                s = self.events[e.match]
                if s.kind != "send" or s.peer != e.party or s.party != e.peer or s.msg != e.msg:
                    raise ValueError(f"receive {e.id} has no matching send")
            seen.add(e.id)


class _Builder:
    def __init__(self, plan: ExecutionPlan):
        self.plan = plan
        self.trio = plan.protocol == "trio"
        self.parties = list(range(1, plan.parties + 1))
        self.sequential = not plan.concat
        self.events: list[Event] = []
        self.last = {p: None for p in self.parties}
        self.cur = {p: None for p in self.parties}
        self.eb = plan.cfg.element_bytes
        self.urev_recv: dict = {}  # (slot, party) -> [recv ids]
        self.pre: dict = {}  # (step index, party) -> event id
        self.matmul_steps = [i for i, s in enumerate(plan.steps) if s.op == "matmul"]

    def ev(self, p, kind, label, step, deps=(), **kw) -> int:
        deps = [d for d in deps if d is not None]
        if self.sequential and self.last[p] is not None:
            deps.append(self.last[p])
        e = Event(len(self.events), p, kind, label, step, sorted(set(deps)), **kw)
        self.events.append(e)
        self.last[p] = e.id
        return e.id

    def message(self, src, dst, kind, elements, step, dep, label):
        s = self.ev(src, "send", label, step, [dep], peer=dst, msg=int(kind), nbytes=elements * self.eb, wire_bytes=Frame.size(elements))
        return s

    def recv(self, dst, send_id, step, label, deps=()):
        s = self.events[send_id]
        return self.ev(dst, "recv", label, step, list(deps), peer=s.party, msg=s.msg, nbytes=s.nbytes, wire_bytes=s.wire_bytes, match=send_id)

    # -- pipelined pre-computation -----------------------------------------

    def _emit_pre(self, p, j, after=()):
        s = self.plan.steps[j]
        deps = self.urev_recv.get((s.slot, p), []) + list(after)
        label = "pre:[A]Urev+[C]" if not self.trio else "pre:N|M-lX*mY"
        self.pre[(j, p)] = self.ev(p, "compute", f"{s.slot}/{label}", j, deps, macs=s.macs)

    def junction(self, j: int) -> bool:
        """Step j is a static-weight product directly fed by another product (no truncation between)."""
        steps = self.plan.steps
        return 0 < j < len(steps) and steps[j].op == "matmul" and steps[j - 1].op == "matmul"

    def fill(self, p, j: int):
        """At a blocking point, run step j's input-independent product term.

        n-PC: every product whose Urev was broadcast early overlaps [A]Urev+[C]
        with its own E exchange. Trio: only the second of two back-to-back
        products is pulled into the first one's wait.
        """
        if self.sequential or (self.trio and p == 1):
            return
        eligible = (self.plan.steps[j].slot, p) in self.urev_recv if not self.trio else self.junction(j)
        if eligible and (j, p) not in self.pre:
            self._emit_pre(p, j)

    # -- steps ---------------------------------------------------------------

    def prologue(self):
        if self.trio or self.sequential:
            return
        sends = {}
        for j in self.matmul_steps:
            s = self.plan.steps[j]
            _, n, o = s.dims
            for p in self.parties:
                for q in self.parties:
                    if q != p:
                        sends[(j, p, q)] = self.message(p, q, MsgKind.UREV, n * o, j, None, f"{s.slot}/Urev")
        for j in self.matmul_steps:
            s = self.plan.steps[j]
            for p in self.parties:
                self.urev_recv[(s.slot, p)] = [self.recv(p, sends[(j, q, p)], j, f"{s.slot}/Urev") for q in self.parties if q != p]

    def npc_exchange(self, j, s, kinds_sizes, label, fill=False):
        """Everybody masks, broadcasts, waits; returns recv ids per party."""
        starts = {p: self.ev(p, "compute", f"{s.slot}/mask", j, [self.cur[p]]) for p in self.parties}
        sends = {}
        for p in self.parties:
            for kind, size in kinds_sizes:
                for q in self.parties:
                    if q != p:
                        sends[(p, q, kind)] = self.message(p, q, kind, size, j, starts[p], f"{s.slot}/{label}")
        recvs = {}
        for p in self.parties:
            if fill:
                self.fill(p, j)
            recvs[p] = [self.recv(p, sends[(q, p, kind)], j, f"{s.slot}/{label}", [starts[p]]) for kind, _ in kinds_sizes for q in self.parties if q != p]
        return recvs

    def npc_product(self, j, s, elementwise):
        m, n, o = (s.in_shape[0], s.in_shape[1], s.out_shape[1]) if not elementwise else (1, 1, 1)
        macs = s.macs
        early = (s.slot, 1) in self.urev_recv
        if early:
            recvs = self.npc_exchange(j, s, [(MsgKind.E, m * n)], "E", fill=True)
            for p in self.parties:
                if (j, p) not in self.pre:
                    self._emit_pre(p, j, recvs[p])
                extra = macs * (2 if p == 1 else 1)
                self.cur[p] = self.ev(p, "compute", f"{s.slot}/combine", j, recvs[p] + [self.pre[(j, p)]], macs=extra)
            return
        size_x = int(np.prod(s.in_shape))
        size_y = n * o if not elementwise else size_x
        recvs = self.npc_exchange(j, s, [(MsgKind.E, size_x), (MsgKind.UREV, size_y)], "E+Urev")
        for p in self.parties:
            self.cur[p] = self.ev(p, "compute", f"{s.slot}/combine", j, recvs[p], macs=macs * (3 if p == 1 else 2))

    def trio_product(self, j, s, static):
        macs = s.macs
        out = {}
        elements = int(np.prod(s.out_shape))
        for p, q, kind in ((2, 3, MsgKind.VMSG), (3, 2, MsgKind.WMSG)):
            if not static:
                pre = self.ev(p, "compute", f"{s.slot}/pre", j, [self.cur[p]], macs=macs)
            else:
                if (j, p) not in self.pre:
                    self._emit_pre(p, j)
                pre = self.pre[(j, p)]
            msg = self.ev(p, "compute", f"{s.slot}/msg", j, [self.cur[p], pre], macs=macs)
            out[p] = (msg, self.message(p, q, kind, elements, j, msg, f"{s.slot}/{kind.name}"))
        for p, q in ((2, 3), (3, 2)):
            self.fill(p, j + 1)
            r = self.recv(p, out[q][1], j, f"{s.slot}/recv")
            self.cur[p] = self.ev(p, "compute", f"{s.slot}/combine", j, [r, out[p][0]], macs=macs)
        self.cur[1] = self.ev(1, "compute", f"{s.slot}/masks", j, [self.cur[1]])

    def step(self, j, s):
        if s.op == "matmul":
            if self.trio:
                self.trio_product(j, s, static=True)
            else:
                self.npc_product(j, s, elementwise=False)
        elif s.op == "mul":
            if self.trio:
                self.trio_product(j, s, static=False)
            else:
                self.npc_product(j, s, elementwise=True)
        elif s.op == "trunc":
            size = int(np.prod(s.in_shape))
            if self.trio:
                c = self.ev(2, "compute", f"{s.slot}/shift", j, [self.cur[2]])
                snd = self.message(2, 3, MsgKind.S_OPEN, size, j, c, f"{s.slot}/S")
                self.cur[2] = c
                r = self.recv(3, snd, j, f"{s.slot}/S", [self.cur[3]])
                self.cur[3] = self.ev(3, "compute", f"{s.slot}/unmask", j, [r])
                self.cur[1] = self.ev(1, "compute", f"{s.slot}/shift", j, [self.cur[1]])
            else:
                recvs = self.npc_exchange(j, s, [(MsgKind.S_OPEN, size)], "S")
                for p in self.parties:
                    self.cur[p] = self.ev(p, "compute", f"{s.slot}/local", j, recvs[p])
        elif s.op == "relu":
            size = int(np.prod(s.in_shape))
            if self.trio:
                sends = {p: self.message(p, q, MsgKind.DEBUG, size, j, self.cur[p], f"{s.slot}/open") for p, q in ((2, 3), (3, 2))}
                for p, q in ((2, 3), (3, 2)):
                    r = self.recv(p, sends[q], j, f"{s.slot}/open", [self.cur[p]])
                    self.cur[p] = self.ev(p, "compute", f"{s.slot}/relu", j, [r])
                self.cur[1] = self.ev(1, "compute", f"{s.slot}/relu", j, [self.cur[1]])
            else:
                recvs = self.npc_exchange(j, s, [(MsgKind.DEBUG, size)], "open")
                for p in self.parties:
                    self.cur[p] = self.ev(p, "compute", f"{s.slot}/relu", j, recvs[p])
        else:
            # local layout changes and public products
            # a Trio share has two components, an additive share one
            macs = s.macs * (2 if self.trio else 1)
            for p in self.parties:
                self.cur[p] = self.ev(p, "compute", f"{s.slot}/{s.op}", j, [self.cur[p]], macs=macs)


def schedule(plan: ExecutionPlan) -> EventProgram:
    b = _Builder(plan)
    b.prologue()
    for j, s in enumerate(plan.steps):
        b.step(j, s)
    prog = EventProgram(b.events, plan.parties, b.sequential, plan.mode, plan.protocol)
    prog.validate()
    return prog


# ---------------------------------------------------------------------------
# simulation


@dataclass
class Timeline:
    start: list
    end: list
    finish_ms: dict
    critical_path_ms: float
    rounds: int
    bytes: dict
    idle_ms: dict
    program: EventProgram

    def gantt(self) -> list[dict]:
        rows = []
        for e in self.program.events:
            row = {"id": e.id, "party": e.party, "kind": e.kind, "label": e.label, "start_ms": self.start[e.id], "end_ms": self.end[e.id]}
            if e.kind != "compute":
                row["peer"] = e.peer
                row["bytes"] = e.nbytes
            rows.append(row)
        return rows

    def to_json(self, gantt: bool = True) -> dict:
        out = {
            "mode": self.program.mode,
            "protocol": self.program.protocol,
            "critical_path_ms": self.critical_path_ms,
            "finish_ms": {f"P{k}": v for k, v in self.finish_ms.items()},
            "idle_ms": {f"P{k}": v for k, v in self.idle_ms.items()},
            "rounds": self.rounds,
            "bytes": dict(sorted(self.bytes.items())),
        }
        if gantt:
            out["gantt"] = self.gantt()
        return out


def simulate(program: EventProgram, profile: NetworkProfile, cost: CostModel | None = None) -> Timeline:
    """Longest-path evaluation of the event graph under a network profile.

    The event list is already in a topological order (dependencies and
    matching sends always precede), so one forward pass suffices.
    """
    cost = cost or CostModel()
    n = len(program.events)
    start = [0.0] * n
    end = [0.0] * n
    stream = {p: 0.0 for p in range(1, program.parties + 1)}
    idle = {p: 0.0 for p in stream}
    for e in program.events:
        ready = max((end[d] for d in e.deps), default=0.0)
        if e.kind == "compute":
            t0 = max(ready, stream[e.party])
            if e.macs:
                idle[e.party] += max(0.0, ready - stream[e.party])
            t1 = t0 + cost.compute_ms(e.macs)
            stream[e.party] = t1
        elif e.kind == "send":
            t0 = t1 = ready
        else:
            s = program.events[e.match]
            arrival = end[s.id] + deliver_time(s.wire_bytes, profile)
            t0 = ready
            t1 = max(ready, arrival)
        start[e.id], end[e.id] = t0, t1
    finish = {p: 0.0 for p in stream}
    for e in program.events:
        finish[e.party] = max(finish[e.party], end[e.id])
    return Timeline(start, end, finish, max(end, default=0.0), program.rounds(), program.channel_bytes(), idle, program)
