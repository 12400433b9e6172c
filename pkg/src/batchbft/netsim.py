"""Deterministic discrete-event simulation of shared-medium wireless channels.

One channel carries one transmission at a time. Contenders queue their
submissions and the channel always grants the oldest one (ties broken by node
id, then submission order), which models medium access where waiting time
dominates. Packet content is built at grant time, so a queued submission
carries the sender's latest state when it finally reaches the air.

A finished transmission is processed by its own sender first (a node hears
what it put on the wire) and then by every other channel member, except
receivers suppressed by the loss draw. The adversary may add a bounded,
per-receiver processing delay, which reorders deliveries. All randomness is
derived by hashing ``(seed, transmission sequence, receiver)`` so any run is
bit-replayable and individual draw streams can be recomputed independently.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field

from .core import ConfigError, NodeId, fault_threshold
from .packets import FramingError


class RoutingError(ValueError):
    """Unknown channel or cluster."""


@dataclass(frozen=True)
class ChannelEvent:
    time: int
    node: int
    kind: str      # transmit-start | transmit-end | deliver | drop | timer
    channel: int
    ptype: int
    length: int

    def line(self) -> str:
        return f"{self.time}\t{self.node}\t{self.kind}\t{self.channel}\t{self.ptype}\t{self.length}"


@dataclass(frozen=True)
class Topology:
    clusters: tuple[tuple[NodeId, ...], ...]

    @classmethod
    def single_hop(cls, n: int) -> "Topology":
        return cls((tuple(range(n)),))

    @classmethod
    def multi_hop(cls, cluster_sizes: list[int]) -> "Topology":
        clusters, nxt = [], 0
        for size in cluster_sizes:
            clusters.append(tuple(range(nxt, nxt + size)))
            nxt += size
        return cls(tuple(clusters))

    def __post_init__(self):
        seen: set[int] = set()
        for members in self.clusters:
            fault_threshold(len(members))
            if seen & set(members):
                raise ConfigError("node assigned to two clusters")
            seen |= set(members)

    @property
    def n_nodes(self) -> int:
        return sum(len(c) for c in self.clusters)

    @property
    def multi(self) -> bool:
        return len(self.clusters) > 1

    def cluster_of(self, node: NodeId) -> int:
        for cid, members in enumerate(self.clusters):
            if node in members:
                return cid
        raise RoutingError(f"node {node} not in any cluster")


GLOBAL_CHANNEL = -1


@dataclass
class AdversaryPolicy:
    """Bounded per-receiver delivery delays; 0 disables reordering."""

    delay_max: int = 0
    seed: int = 0

    def delay(self, tx_seq: int, receiver: int) -> int:
        if self.delay_max <= 0:
            return 0
        return _draw(self.seed, b"delay", tx_seq, receiver) % (self.delay_max + 1)


def _draw(seed: int, kind: bytes, tx_seq: int, receiver: int) -> int:
    data = seed.to_bytes(8, "little", signed=True) + kind + \
        tx_seq.to_bytes(8, "little") + receiver.to_bytes(2, "little")
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def loss_drawn(seed: int, tx_seq: int, receiver: int, loss_rate: float) -> bool:
    """True when this receiver misses this transmission (replayable oracle)."""
    if loss_rate <= 0.0:
        return False
    return _draw(seed, b"loss", tx_seq, receiver) / 2.0 ** 64 < loss_rate


@dataclass
class NodeMetrics:
    contention_attempts: int = 0
    transmissions: int = 0
    bytes_sent: int = 0


@dataclass
class RunResult:
    end_tick: int
    goal_met: bool
    timed_out: bool


class _Submission:
    __slots__ = ("node", "channel", "enqueue_tick", "seq", "builder", "cancelled")

    def __init__(self, node, channel, enqueue_tick, seq, builder):
        self.node = node
        self.channel = channel
        self.enqueue_tick = enqueue_tick
        self.seq = seq
        self.builder = builder
        self.cancelled = False


class _Channel:
    def __init__(self, cid: int, members: tuple[int, ...]):
        self.cid = cid
        self.members = members
        self.busy_until = 0
        self.pending: list[_Submission] = []
        self.grant_scheduled = False
        self.busy_intervals: list[tuple[int, int]] = []


class SimNode:
    """Interface the simulator drives; protocol nodes subclass this."""

    node_id: int = -1

    def on_start(self, io) -> None:  # pragma: no cover - interface
        pass

    def on_packet(self, io, data: bytes, channel: int, now: int) -> None:  # pragma: no cover
        pass

    def on_timer(self, io, key, now: int) -> None:  # pragma: no cover
        pass


class Simulator:
    """Event loop owning channels, metrics, loss/delay draws and timers."""

    def __init__(self, topology: Topology, nodes: list[SimNode], seed: int = 1,
                 bitrate: int = 16, max_packet: int = 1024, loss_rate: float = 0.0,
                 adversary: AdversaryPolicy | None = None, trace: bool = False):
        if bitrate <= 0:
            raise ConfigError("bitrate must be positive")
        self.topology = topology
        self.nodes = nodes
        self.seed = seed
        self.bitrate = bitrate
        self.max_packet = max_packet
        self.loss_rate = loss_rate
        self.adversary = adversary or AdversaryPolicy()
        self.trace_enabled = trace
        self.trace: list[ChannelEvent] = []
        self.now = 0
        self.tx_count = 0
        self._events: list = []       # (tick, seq, kind, payload)
        self._event_seq = 0
        self._sub_seq = 0
        self._material = 0            # grants/ends/deliveries in flight
        self._queued = 0
        self.metrics = {node.node_id: NodeMetrics() for node in nodes}
        self.channels: dict[int, _Channel] = {}
        for cid, members in enumerate(topology.clusters):
            self.channels[cid] = _Channel(cid, members)
        if topology.multi:
            self.channels[GLOBAL_CHANNEL] = _Channel(GLOBAL_CHANNEL, tuple(range(topology.n_nodes)))
        self._io = _NodeIO(self)

    # -- event plumbing -----------------------------------------------------

    def _push(self, tick: int, kind: str, payload, material: bool = True) -> None:
        self._event_seq += 1
        if material:
            self._material += 1
        heapq.heappush(self._events, (tick, self._event_seq, kind, payload, material))

    def _record(self, node: int, kind: str, channel: int, ptype: int, length: int) -> None:
        if self.trace_enabled:
            self.trace.append(ChannelEvent(self.now, node, kind, channel, ptype, length))

    # -- public API ----------------------------------------------------------

    def submit(self, node: int, channel_id: int, builder, hold: int = 0) -> None:
        """Enqueue a contention attempt; the packet is built when access is won."""
        channel = self.channels.get(channel_id)
        if channel is None:
            raise RoutingError(f"unknown channel {channel_id}")
        if channel_id != GLOBAL_CHANNEL and node not in channel.members:
            raise RoutingError(f"node {node} not a member of channel {channel_id}")
        if isinstance(builder, (bytes, bytearray)):
            data = bytes(builder)
            if len(data) > self.max_packet:
                raise FramingError(f"{len(data)}B exceeds max packet {self.max_packet}B")
            builder = lambda: data  # noqa: E731
        self._sub_seq += 1
        sub = _Submission(node, channel, self.now + hold, self._sub_seq, builder)
        channel.pending.append(sub)
        self._queued += 1
        self.metrics[node].contention_attempts += 1
        self._schedule_grant(channel)

    def set_timer(self, node: int, key, tick: int) -> None:
        self._push(max(tick, self.now), "timer", (node, key), material=False)

    def channel_busy(self, channel_id: int) -> bool:
        return self.channels[channel_id].busy_until > self.now

    # -- channel arbitration ---------------------------------------------------

    def _schedule_grant(self, channel: _Channel) -> None:
        if channel.grant_scheduled or not channel.pending:
            return
        eligible_at = min(s.enqueue_tick for s in channel.pending if not s.cancelled)
        when = max(self.now, channel.busy_until, eligible_at)
        channel.grant_scheduled = True
        self._push(when, "grant", channel)

    def _grant(self, channel: _Channel) -> None:
        channel.grant_scheduled = False
        channel.pending = [s for s in channel.pending if not s.cancelled]
        self._queued = sum(len(c.pending) for c in self.channels.values())
        if not channel.pending or channel.busy_until > self.now:
            self._schedule_grant(channel)
            return
        eligible = [s for s in channel.pending if s.enqueue_tick <= self.now]
        if not eligible:
            self._schedule_grant(channel)
            return
        sub = min(eligible, key=lambda s: (s.enqueue_tick, s.node, s.seq))
        channel.pending.remove(sub)
        self._queued -= 1
        data = sub.builder()
        if len(data) > self.max_packet:
            raise FramingError(f"{len(data)}B exceeds max packet {self.max_packet}B")
        ticks = -(-len(data) // self.bitrate)
        end = self.now + max(ticks, 1)
        channel.busy_until = end
        channel.busy_intervals.append((self.now, end))
        self.tx_count += 1
        metrics = self.metrics[sub.node]
        metrics.transmissions += 1
        metrics.bytes_sent += len(data)
        ptype = data[2] if len(data) > 2 else 0
        self._record(sub.node, "transmit-start", channel.cid, ptype, len(data))
        self._push(end, "end", (channel, sub.node, data, self.tx_count))

    def _transmit_end(self, channel: _Channel, sender: int, data: bytes, tx_seq: int) -> None:
        ptype = data[2] if len(data) > 2 else 0
        self._record(sender, "transmit-end", channel.cid, ptype, len(data))
        # the sender processes its own packet as it leaves the antenna
        self._push(self.now, "deliver", (channel.cid, sender, data))
        for member in channel.members:
            if member == sender:
                continue
            if loss_drawn(self.seed, tx_seq, member, self.loss_rate):
                self._record(member, "drop", channel.cid, ptype, len(data))
                continue
            delay = self.adversary.delay(tx_seq, member)
            self._push(self.now + delay, "deliver", (channel.cid, member, data))
        self._schedule_grant(channel)

    # -- main loop -----------------------------------------------------------

    def run(self, until=None, max_ticks: int = 10 ** 6, drain: bool = False) -> RunResult:
        goal = False
        while self._events:
            tick, _, kind, payload, material = heapq.heappop(self._events)
            if tick > max_ticks:
                return RunResult(self.now, goal, not goal)
            self.now = tick
            if material:
                self._material -= 1
            if kind == "grant":
                self._grant(payload)
            elif kind == "end":
                self._transmit_end(*payload)
            elif kind == "deliver":
                cid, member, data = payload
                self._record(member, "deliver", cid, data[2] if len(data) > 2 else 0, len(data))
                self.nodes[member].on_packet(self._io, data, cid, self.now)
            elif kind == "timer":
                node, key = payload
                self._record(node, "timer", 0, 0, 0)
                self.nodes[node].on_timer(self._io, key, self.now)
            if until is not None and not goal and until():
                goal = True
            if goal and (not drain or (self._material == 0 and self._queued == 0)):
                return RunResult(self.now, True, False)
        return RunResult(self.now, goal or until is None, until is not None and not goal)

    def start(self) -> None:
        for node in self.nodes:
            node.on_start(self._io)

    def trace_lines(self) -> list[str]:
        return [ev.line() for ev in self.trace]


class _NodeIO:
    """Callback surface handed to protocol nodes."""

    def __init__(self, sim: Simulator):
        self._sim = sim

    @property
    def now(self) -> int:
        return self._sim.now

    def submit(self, node: int, channel: int, builder, hold: int = 0) -> None:
        self._sim.submit(node, channel, builder, hold)

    def set_timer(self, node: int, key, tick: int) -> None:
        self._sim.set_timer(node, key, tick)

    def channel_busy(self, channel: int) -> bool:
        return self._sim.channel_busy(channel)
