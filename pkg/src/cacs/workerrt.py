"""Deterministic distributed workload and coordinated checkpoint/restart.

One :class:`Coordinator` per application incarnation drives a daemon per VM.
Daemons exchange messages over reliable FIFO channels. A checkpoint quiesces
every daemon with a marker on each channel, drains in-flight messages into
the receivers' inboxes, and serializes each :class:`ProcessState` into a
position-independent blob.

Blob layout (big-endian)::

    b"DCKP" | version:u8 | field* | crc32:u32

where every field is ``length:u32`` followed by that many bytes, in the order
written by :func:`serialize`. The CRC covers everything before it.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import logging
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .errors import (ClusterMismatch, CorruptImage, CountMismatch, QuiesceTimeout,
                     UnknownDaemon)

logger = logging.getLogger(__name__)

MAGIC = b"DCKP"
VERSION = 1
_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
CONTRIBUTION_MOD = 1000


class WorkloadKind(str, enum.Enum):
    RingSum = "ring_sum"
    SingleCounter = "single_counter"


@dataclass(frozen=True)
class WorkloadSpec:
    kind: WorkloadKind = WorkloadKind.SingleCounter
    iterations: int = 10
    payload_bytes_per_msg: int = 64
    state_bytes_total: int = 1 << 20
    seed: int = 0
    iteration_seconds: float = 1.0
    # None: one process per VM of whatever cluster the app gets.
    processes: Optional[int] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.payload_bytes_per_msg < 0 or self.state_bytes_total < 0:
            raise ValueError("byte sizes must be >= 0")
        if not self.iteration_seconds > 0:
            raise ValueError("iteration_seconds must be > 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "WorkloadSpec":
        doc = dict(doc)
        kind = doc.pop("kind", cls.kind.value)
        try:
            kind = WorkloadKind(kind)
        except ValueError:
            kind = WorkloadKind[kind]
        known = {k: doc[k] for k in ("iterations", "payload_bytes_per_msg", "state_bytes_total",
                                     "seed", "processes") if k in doc}
        if "iteration_seconds" in doc:
            known["iteration_seconds"] = float(doc["iteration_seconds"])
        for k in ("iterations", "payload_bytes_per_msg", "state_bytes_total", "seed"):
            if k in known:
                known[k] = int(known[k])
        return cls(kind=kind, **known)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "iterations": self.iterations,
            "payload_bytes_per_msg": self.payload_bytes_per_msg,
            "state_bytes_total": self.state_bytes_total,
            "seed": self.seed,
            "iteration_seconds": self.iteration_seconds,
            "processes": self.processes,
        }


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 generator; returns ``(new_state, output)``."""
    state = (state + _GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def process_seed(seed: int, vm_index: int) -> int:
    return splitmix64((seed * 0x1000193 + vm_index) & _MASK64)[1]


def initial_accumulator(kind: WorkloadKind, vm_index: int) -> int:
    return vm_index + 1 if kind is WorkloadKind.RingSum else 0


class Phase(enum.IntEnum):
    SEND = 0
    RECV = 1
    DONE = 2


@dataclass(frozen=True)
class Message:
    round: int
    value: int
    payload: bytes = b""


@dataclass
class ProcessState:
    vm_index: int
    n_procs: int
    kind: WorkloadKind
    iterations: int
    iteration: int = 0
    accumulator: int = 0
    phase: Phase = Phase.SEND
    inbox: list[Message] = field(default_factory=list)
    rng_state: int = 0
    payload_bytes_per_msg: int = 0
    padding: bytes = b""


def _int_bytes(value: int) -> bytes:
    length = max(1, (value.bit_length() + 8) // 8)
    return value.to_bytes(length, "big", signed=True)


def _pack_fields(fields: Sequence[bytes]) -> bytes:
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def _unpack_fields(buf: bytes) -> list[bytes]:
    out, pos = [], 0
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise CorruptImage("truncated field header")
        (length,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        if pos + length > len(buf):
            raise CorruptImage("truncated field body")
        out.append(buf[pos:pos + length])
        pos += length
    return out


def serialize(state: ProcessState) -> bytes:
    inbox = _pack_fields([
        _pack_fields([struct.pack(">Q", m.round), _int_bytes(m.value), m.payload])
        for m in state.inbox
    ])
    body = _pack_fields([
        state.kind.value.encode(),
        struct.pack(">IIQQ", state.vm_index, state.n_procs, state.iterations, state.iteration),
        _int_bytes(state.accumulator),
        struct.pack(">BQI", state.phase, state.rng_state, state.payload_bytes_per_msg),
        inbox,
        state.padding,
    ])
    data = MAGIC + bytes([VERSION]) + body
    return data + struct.pack(">I", zlib.crc32(data))


def deserialize(blob: bytes) -> ProcessState:
    if len(blob) < len(MAGIC) + 1 + 4:
        raise CorruptImage("blob too short")
    data, (crc,) = blob[:-4], struct.unpack(">I", blob[-4:])
    if zlib.crc32(data) != crc:
        raise CorruptImage("checksum mismatch")
    if data[:4] != MAGIC:
        raise CorruptImage("bad magic")
    if data[4] != VERSION:
        raise CorruptImage(f"unsupported blob version {data[4]}")
    try:
        kind, ints, acc, misc, inbox, padding = _unpack_fields(data[5:])
        vm_index, n_procs, iterations, iteration = struct.unpack(">IIQQ", ints)
        phase, rng_state, payload = struct.unpack(">BQI", misc)
        messages = []
        for raw in _unpack_fields(inbox):
            rnd, value, body = _unpack_fields(raw)
            messages.append(Message(struct.unpack(">Q", rnd)[0],
                                    int.from_bytes(value, "big", signed=True), body))
        return ProcessState(
            vm_index=vm_index, n_procs=n_procs, kind=WorkloadKind(kind.decode()),
            iterations=iterations, iteration=iteration,
            accumulator=int.from_bytes(acc, "big", signed=True), phase=Phase(phase),
            inbox=messages, rng_state=rng_state, payload_bytes_per_msg=payload,
            padding=padding,
        )
    except (ValueError, struct.error) as exc:
        raise CorruptImage(f"malformed blob: {exc}") from None


def initial_state(spec: WorkloadSpec, vm_index: int, n_procs: int) -> ProcessState:
    seed = process_seed(spec.seed, vm_index)
    pad_len = spec.state_bytes_total // n_procs
    padding = hashlib.shake_128(seed.to_bytes(8, "big")).digest(pad_len) if pad_len else b""
    return ProcessState(
        vm_index=vm_index, n_procs=n_procs, kind=spec.kind, iterations=spec.iterations,
        accumulator=initial_accumulator(spec.kind, vm_index), rng_state=seed,
        payload_bytes_per_msg=spec.payload_bytes_per_msg, padding=padding,
    )


def reference_output(spec: WorkloadSpec, n_procs: int) -> list[int]:
    """Sequential evaluation of the workload, used as the correctness oracle.

    Contributions are computed in closed form (the k-th SplitMix64 output is
    a pure function of ``seed + k * gamma``) rather than by stepping a
    generator.
    """
    if spec.kind is WorkloadKind.SingleCounter:
        return [spec.iterations] * n_procs
    seeds = [process_seed(spec.seed, i) for i in range(n_procs)]
    acc = [i + 1 for i in range(n_procs)]
    for r in range(spec.iterations):
        contrib = []
        for i in range(n_procs):
            z = (seeds[i] + (r + 1) * _GAMMA) & _MASK64
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
            contrib.append((z ^ (z >> 31)) % CONTRIBUTION_MOD)
        acc = [acc[(i - 1) % n_procs] + contrib[i] for i in range(n_procs)]
    return acc


def output_bytes(output: Sequence[int]) -> bytes:
    return _pack_fields([_int_bytes(v) for v in output])


_MARKER = object()
_coordinator_ids = itertools.count(1)


class Daemon:
    def __init__(self, state: ProcessState, alive: Callable[[], bool]):
        self.state = state
        self.alive = alive
        self.healthy = True

    @property
    def vm_index(self) -> int:
        return self.state.vm_index

    @property
    def can_act(self) -> bool:
        # An unhealthy daemon is hung: reachable but making no progress.
        return self.healthy and self.alive()


Action = tuple[str, int]


class Coordinator:
    """Handle for one incarnation of a running application."""

    def __init__(self, states: Sequence[ProcessState],
                 alive: Optional[Sequence[Callable[[], bool]]] = None, app: str = "app",
                 incarnation: Optional[int] = None):
        states = sorted(states, key=lambda s: s.vm_index)
        n = len(states)
        if incarnation is None:
            incarnation = next(_coordinator_ids)
        self.coordinator_id = f"coord-{app}-{incarnation}"
        alive = alive or [lambda: True] * n
        self.daemons = [Daemon(s, a) for s, a in zip(states, alive)]
        self.kind = states[0].kind
        self.n = n
        self.ring = self.kind is WorkloadKind.RingSum
        # channel c carries messages from daemon c to daemon (c + 1) % n
        self.channels: list[deque] = [deque() for _ in range(n)] if self.ring else []
        self.sent = 0
        self.delivered = 0
        self.consumed = 0
        self.quiescing = False
        self.phase_cursor = 0
        self.listeners: list[Callable[[int], None]] = []
        # Simulation driver state (see attach()).
        self._clock = None
        self._tick_event = None
        self._timer_event = None
        self.on_finish: Optional[Callable[["Coordinator"], None]] = None
        self.on_checkpoint: Optional[Callable[[str], None]] = None
        self.stopped = False

    @property
    def members(self) -> list[int]:
        return [d.vm_index for d in self.daemons]

    @property
    def finished(self) -> bool:
        return all(d.state.phase is Phase.DONE for d in self.daemons)

    @property
    def progress(self) -> int:
        return min(d.state.iteration for d in self.daemons)

    def output(self) -> list[int]:
        return [d.state.accumulator for d in self.daemons]

    def daemon(self, vm_index: int) -> Daemon:
        if not 0 <= vm_index < self.n or self.stopped:
            raise UnknownDaemon(f"no daemon {vm_index} in {self.coordinator_id}")
        return self.daemons[vm_index]

    def set_health(self, vm_index: int, healthy: bool) -> None:
        self.daemon(vm_index).healthy = bool(healthy)

    # -- micro-step semantics -------------------------------------------------

    def enabled_actions(self) -> list[Action]:
        out: list[Action] = []
        if self.quiescing:
            return out
        for d in self.daemons:
            st = d.state
            if not d.can_act or st.phase is Phase.DONE:
                continue
            if self.ring and st.phase is Phase.SEND:
                out.append(("send", st.vm_index))
            elif not self.ring or st.inbox:
                out.append(("consume", st.vm_index))
        for c, chan in enumerate(self.channels):
            if chan and self.daemons[(c + 1) % self.n].alive():
                out.append(("deliver", c))
        return out

    def apply(self, action: Action) -> None:
        kind, idx = action
        if kind == "send":
            st = self.daemons[idx].state
            payload = bytes(st.payload_bytes_per_msg)
            self.channels[idx].append(Message(st.iteration, st.accumulator, payload))
            st.phase = Phase.RECV
            self.sent += 1
        elif kind == "deliver":
            item = self.channels[idx].popleft()
            self.daemons[(idx + 1) % self.n].state.inbox.append(item)
            self.delivered += 1
        elif kind == "consume":
            st = self.daemons[idx].state
            st.rng_state, z = splitmix64(st.rng_state)
            if self.ring:
                msg = st.inbox.pop(0)
                if msg.round != st.iteration:
                    raise RuntimeError(f"daemon {idx}: got round {msg.round} in {st.iteration}")
                st.accumulator = msg.value + z % CONTRIBUTION_MOD
                self.consumed += 1
            else:
                st.accumulator += 1
            st.iteration += 1
            st.phase = Phase.DONE if st.iteration >= st.iterations else Phase.SEND
        else:
            raise ValueError(f"unknown action {action!r}")

    def run_phase(self) -> int:
        """Apply every enabled action of the current phase kind; rotates the phase."""
        kind = ("send", "deliver", "consume")[self.phase_cursor]
        self.phase_cursor = (self.phase_cursor + 1) % 3
        before = self.progress
        actions = [a for a in self.enabled_actions() if a[0] == kind]
        for action in actions:
            self.apply(action)
        if self.progress > before:
            for listener in list(self.listeners):
                listener(self.progress)
        return len(actions)

    def run_to_completion(self, max_phases: int = 10_000_000) -> list[int]:
        idle_phases = 0
        for _ in range(max_phases):
            if self.finished:
                return self.output()
            idle_phases = 0 if self.run_phase() else idle_phases + 1
            if idle_phases >= 3:
                break
        raise RuntimeError("workload stalled before completion")

    # -- coordinated checkpoint ----------------------------------------------

    def in_flight(self) -> int:
        return sum(len(c) for c in self.channels)

    def checkpoint(self) -> list[bytes]:
        """Quiesce, drain channels into inboxes, serialize, resume."""
        dead = [d.vm_index for d in self.daemons if not d.alive()]
        if dead:
            raise QuiesceTimeout(f"daemons {dead} did not acknowledge quiesce")
        self.quiescing = True
        try:
            for chan in self.channels:
                chan.append(_MARKER)
            closed = [False] * len(self.channels)
            while not all(closed):
                for c, chan in enumerate(self.channels):
                    if closed[c]:
                        continue
                    item = chan.popleft()
                    if item is _MARKER:
                        closed[c] = True
                    else:
                        self.daemons[(c + 1) % self.n].state.inbox.append(item)
                        self.delivered += 1
            return [serialize(d.state) for d in self.daemons]
        finally:
            self.quiescing = False

    # -- virtual-time driver ---------------------------------------------------

    def attach(self, clock, policy=None, on_checkpoint=None, on_finish=None,
               iteration_seconds: float = 1.0) -> None:
        """Drive the workload on ``clock``: three phases per iteration.

        ``policy`` is a checkpoint policy; periodic policies arm a timer and
        app-initiated ones request a checkpoint at every iteration boundary.
        """
        self._clock = clock
        self.on_checkpoint = on_checkpoint
        self.on_finish = on_finish
        self._tick_len = iteration_seconds / 3.0
        self._tick_event = clock.schedule(self._tick_len, self._tick, name=f"tick:{self.coordinator_id}")
        mode = getattr(getattr(policy, "mode", None), "value", None)
        if mode == "periodic" and on_checkpoint is not None:
            self._period = policy.period
            self._timer_event = clock.schedule(self._period, self._periodic,
                                               name=f"ckpt-timer:{self.coordinator_id}")
        elif mode == "app" and on_checkpoint is not None:
            self.listeners.append(lambda it: self._request("app"))

    def _request(self, reason: str) -> None:
        if not self.stopped and not self.finished and self.on_checkpoint is not None:
            self.on_checkpoint(reason)

    def _periodic(self) -> None:
        if self.stopped or self.finished:
            return
        self._request("periodic")
        self._timer_event = self._clock.schedule(self._period, self._periodic,
                                                 name=f"ckpt-timer:{self.coordinator_id}")

    def _tick(self) -> None:
        if self.stopped:
            return
        self.run_phase()
        if self.finished:
            self.stop()
            if self.on_finish is not None:
                self.on_finish(self)
            return
        self._tick_event = self._clock.schedule(self._tick_len, self._tick,
                                                name=f"tick:{self.coordinator_id}")

    def stop(self) -> None:
        """Kill the incarnation: no further ticks or checkpoint requests."""
        self.stopped = True
        for ev in (self._tick_event, self._timer_event):
            if ev is not None:
                ev.cancel()


def start(n_procs: int, spec: WorkloadSpec, alive=None, app: str = "app",
          incarnation: Optional[int] = None) -> Coordinator:
    """Launch a fresh workload with one daemon per VM."""
    expected = spec.processes if spec.processes is not None else n_procs
    if expected != n_procs:
        raise ClusterMismatch(f"workload wants {expected} processes, cluster has {n_procs}")
    if spec.kind is WorkloadKind.RingSum and n_procs < 2:
        raise ClusterMismatch("ring_sum needs at least 2 processes")
    if n_procs < 1:
        raise ClusterMismatch("need at least one process")
    states = [initial_state(spec, i, n_procs) for i in range(n_procs)]
    return Coordinator(states, alive, app, incarnation)


def checkpoint(handle: Coordinator) -> list[bytes]:
    return handle.checkpoint()


def restart(n_procs: int, blobs: Sequence[bytes], alive=None, app: str = "app",
            incarnation: Optional[int] = None) -> Coordinator:
    """Rebuild daemons from blobs under a freshly minted coordinator."""
    if len(blobs) != n_procs:
        raise CountMismatch(f"{len(blobs)} images for {n_procs} VMs")
    states = [deserialize(b) for b in blobs]
    indices = sorted(s.vm_index for s in states)
    if indices != list(range(n_procs)) or any(s.n_procs != n_procs for s in states):
        raise CountMismatch(f"images cover ranks {indices}, expected 0..{n_procs - 1}")
    return Coordinator(states, alive, app, incarnation)
