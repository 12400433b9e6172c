"""Batched broadcast state machines: RBC, RBC-small, CBC, CBC-small and PRBC.

Each family drives N parallel instances as one unit. Outbound traffic is
organized in *waves*: one send obligation per protocol stage. New votes merge
into a stage's pending wave until the channel grant builds the packet, so the
packet always carries the node's cumulative state for every instance. The
same state machines serve the unbatched baseline through a port that turns
every individual vote into its own single-instance packet.

Reliability is NACK-driven: every packet advertises what its sender has
(proposals held, quorums reached). A receiver that can satisfy a peer's lack
re-sends the covering content, rate-limited to one supply per family per
stall window, and a node whose own progress stalls rebroadcasts its
cumulative state to solicit exactly those supplies.
"""

from __future__ import annotations

from .core import SystemConfig, hash_data
from .packets import (
    CbcEfBody,
    CbcSmallBody,
    InitBody,
    InstanceSummary,
    PacketType,
    RbcErBody,
    RbcSmallBody,
    ShareCarrierBody,
    bit,
    merge_horizontal,
    merge_vertical,
    two_bit,
)


class StateError(RuntimeError):
    """Operation illegal in the current protocol state."""


class InputError(ValueError):
    """Inadmissible protocol input."""


# baseline single-instance packet component codes
BASE_RBC = 1
BASE_CBC = 2
BASE_PRBC_DONE = 3
BASE_ABA_LC = 4
BASE_ABA_SC = 5
BASE_DEC = 6

PH_ECHO = 1
PH_READY = 2
PH_FINISH = 3
PH_DONE = 4
PH_INIT = 0
PH_BVAL = 1
PH_AUX = 2
PH_SHARE = 3


def init_fragments(payload: bytes, cfg: SystemConfig) -> int:
    """Fragments needed for one proposal under the INIT packet layout."""
    cap = cfg.max_packet - 10 - 7 - (cfg.n_nodes + 7) // 8 - cfg.sig_len
    if cap <= 0:
        raise StateError("alignment unit too small for any proposal bytes")
    return max(1, -(-len(payload) // cap)), cap


class _Reassembly:
    """Per-sender fragment buffers; a forged fragment cannot poison honest ones."""

    def __init__(self):
        self.buffers: dict[int, dict[int, bytes]] = {}
        self.totals: dict[int, int] = {}

    def add(self, sender: int, body: InitBody) -> bytes | None:
        buf = self.buffers.setdefault(sender, {})
        if self.totals.get(sender) not in (None, body.frag_total):
            buf.clear()
        self.totals[sender] = body.frag_total
        buf[body.frag_seq] = body.fragment
        if len(buf) == body.frag_total:
            return b"".join(buf[i] for i in range(body.frag_total))
        return None

    def reset(self, sender: int) -> None:
        self.buffers.pop(sender, None)
        self.totals.pop(sender, None)


class BroadcastFamily:
    """Common NACK bookkeeping and supply/stall policy."""

    ptypes: tuple[PacketType, ...] = ()

    def __init__(self, cfg: SystemConfig, me: int, port):
        self.cfg = cfg
        self.me = me
        self.port = port
        self.n = cfg.n_nodes
        self.abandoned = 0  # bitmask of instances the upper layer stopped caring about

    # -- hooks ---------------------------------------------------------------

    def live(self) -> bool:  # pragma: no cover - overridden
        raise NotImplementedError

    def retransmit(self) -> None:  # pragma: no cover - overridden
        raise NotImplementedError

    def abandon(self, instance: int) -> None:
        self.abandoned |= 1 << instance

    def _all_mask(self) -> int:
        return (1 << self.n) - 1


class RbcBatch(BroadcastFamily):
    """N parallel reliable-broadcast instances over byte proposals.

    Thresholds: echo on the leader's proposal, ready after 2f+1 echoes on one
    hash (or f+1 readies, the amplification rule), deliver after 2f+1 readies.
    """

    ptypes = (PacketType.RBC_INIT, PacketType.RBC_ER)
    family = "rbc"

    def __init__(self, cfg, me, port, epoch: int = 0):
        super().__init__(cfg, me, port)
        self.epoch = epoch
        n = self.n
        self.proposals: list[bytes | None] = [None] * n
        self.hashes: list[bytes] = [bytes(cfg.hash_len)] * n
        self.frag_cache: list[list[bytes] | None] = [None] * n
        self.reassembly = [_Reassembly() for _ in range(n)]
        self.echoed: list[bytes | None] = [None] * n
        self.readied: list[bytes | None] = [None] * n
        self.echo_votes: list[dict[bytes, set[int]]] = [dict() for _ in range(n)]
        self.ready_votes: list[dict[bytes, set[int]]] = [dict() for _ in range(n)]
        self.delivered: list[bytes | None] = [None] * n
        self.deliverable: list[bytes | None] = [None] * n   # quorum hash awaiting payload
        self.peer_holds: list[set[int]] = [set() for _ in range(n)]
        self.started = False

    # -- sending -------------------------------------------------------------

    def start(self, proposal: bytes) -> None:
        if self.started:
            raise StateError("instance already started for this epoch")
        if not proposal:
            raise StateError("empty proposal")
        if len(proposal) > self.cfg.proposal_cap:
            raise StateError("proposal exceeds configured cap")
        self.started = True
        self._adopt_payload(self.me, proposal, echo=False)
        self.send_init(self.me)

    def fragments_of(self, instance: int) -> list[bytes]:
        cached = self.frag_cache[instance]
        if cached is None:
            payload = self.proposals[instance]
            count, cap = init_fragments(payload, self.cfg)
            cached = [payload[i * cap:(i + 1) * cap] for i in range(count)]
            self.frag_cache[instance] = cached
        return cached

    def send_init(self, instance: int) -> None:
        frags = self.fragments_of(instance)
        self.port.send_init(self, instance, len(frags))

    def init_body(self, instance: int, seq: int) -> InitBody:
        frags = self.fragments_of(instance)
        return InitBody(instance, seq, len(frags), frags[seq], self.initial_mask())

    def initial_mask(self) -> int:
        mask = 0
        for i in range(self.n):
            if self.proposals[i] is not None:
                mask |= 1 << i
        return mask

    def build(self, stage) -> RbcErBody:
        echo_summaries = [
            InstanceSummary(self.family, self.epoch, "echo", i, self.echoed[i] is not None,
                            self.hashes[i] if self.proposals[i] is not None else None)
            for i in range(self.n)
        ]
        ready_summaries = [
            InstanceSummary(self.family, self.epoch, "ready", i, self.readied[i] is not None)
            for i in range(self.n)
        ]
        body = merge_horizontal(
            [merge_vertical(echo_summaries), merge_vertical(ready_summaries)], self.cfg)
        for i in range(self.n):
            if self.readied[i] is not None:
                body.hashes[i] = self.readied[i]
        body.initial_nack = self.initial_mask()
        body.echo_nack = self._quorum_mask(self.echo_votes, self.cfg.echo_quorum)
        body.ready_nack = self._delivered_mask()
        return body

    def _quorum_mask(self, votes, quorum: int) -> int:
        mask = 0
        for i in range(self.n):
            if any(len(s) >= quorum for s in votes[i].values()):
                mask |= 1 << i
        return mask

    def _delivered_mask(self) -> int:
        mask = 0
        for i in range(self.n):
            if self.delivered[i] is not None:
                mask |= 1 << i
        return mask

    # -- receiving -------------------------------------------------------------

    def on_init(self, sender: int, body: InitBody, now: int) -> None:
        inst = body.origin
        if self.delivered[inst] is None and self.proposals[inst] is None:
            payload = self.reassembly[inst].add(sender, body)
            if payload is not None:
                digest = hash_data(payload, self.cfg.hash_len)
                want = self.deliverable[inst] or self.echoed[inst]
                if sender != inst and want is not None and digest != want:
                    self.reassembly[inst].reset(sender)  # forged relay, keep waiting
                else:
                    self._adopt_payload(inst, payload, echo=(sender == inst or want == digest))
        self._note_holds(sender, body.initial_nack)
        self._progress(now)

    def _adopt_payload(self, inst: int, payload: bytes, echo: bool) -> None:
        self.proposals[inst] = payload
        self.hashes[inst] = hash_data(payload, self.cfg.hash_len)
        if echo and self.echoed[inst] is None:
            self._echo(inst, self.hashes[inst])

    def _echo(self, inst: int, digest: bytes) -> None:
        self.echoed[inst] = digest
        self.port.vote(self, "echo", inst, digest, phase=PH_ECHO)

    def on_er(self, sender: int, body: RbcErBody, now: int) -> None:
        for i in range(self.n):
            digest = body.hashes[i]
            if digest != bytes(self.cfg.hash_len):
                if bit(body.echo_bits, i):
                    self.echo_votes[i].setdefault(digest, set()).add(sender)
                if bit(body.ready_bits, i):
                    self.ready_votes[i].setdefault(digest, set()).add(sender)
        self._note_holds(sender, body.initial_nack)
        self._progress(now)

    def vote_echo(self, sender: int, inst: int, digest: bytes, now: int) -> None:
        self.echo_votes[inst].setdefault(digest, set()).add(sender)
        self._progress(now)

    def vote_ready(self, sender: int, inst: int, digest: bytes, now: int) -> None:
        self.ready_votes[inst].setdefault(digest, set()).add(sender)
        self._progress(now)

    def _note_holds(self, sender: int, mask: int) -> None:
        for i in range(self.n):
            if bit(mask, i):
                self.peer_holds[i].add(sender)

    def _progress(self, now: int) -> None:
        cfg = self.cfg
        for i in range(self.n):
            if self.readied[i] is None:
                quorum_hash = self._hash_with(self.echo_votes[i], cfg.echo_quorum) or \
                    self._hash_with(self.ready_votes[i], cfg.ready_amplify)
                if quorum_hash is not None:
                    self.readied[i] = quorum_hash
                    if self.echoed[i] is None:
                        self.echoed[i] = quorum_hash
                        self.port.vote(self, "echo", i, quorum_hash, phase=PH_ECHO)
                    self.port.vote(self, "ready", i, quorum_hash, phase=PH_READY)
            if self.delivered[i] is None:
                final = self._hash_with(self.ready_votes[i], cfg.deliver_quorum)
                if final is not None:
                    self.deliverable[i] = final
                    payload = self.proposals[i]
                    if payload is not None and self.hashes[i] == final:
                        self.delivered[i] = final
                        self.port.event(("deliver", self.family, self.epoch, i, final, payload, now))
                    elif payload is not None:
                        # payload conflicts with the quorum hash: drop and re-fetch
                        self.proposals[i] = None
                        self.frag_cache[i] = None

    @staticmethod
    def _hash_with(votes: dict[bytes, set[int]], quorum: int) -> bytes | None:
        for digest, senders in votes.items():
            if len(senders) >= quorum:
                return digest
        return None

    # -- reliability -------------------------------------------------------------

    def live(self) -> bool:
        pending = 0
        for i in range(self.n):
            if self.delivered[i] is None:
                pending |= 1 << i
        return bool(pending & ~self.abandoned)

    def nack_scan(self, body) -> list[tuple]:
        """Needs of a peer that this node can satisfy (pure; rate limit is the port's)."""
        needs: list[tuple] = []
        if isinstance(body, (RbcErBody, InitBody)):
            have = body.initial_nack
            for i in range(self.n):
                if not bit(have, i) and self.proposals[i] is not None:
                    needs.append(("init", i))
        if isinstance(body, RbcErBody):
            for i in range(self.n):
                if not bit(body.ready_nack, i) and self.delivered[i] is not None:
                    needs.append(("votes",))
                    break
        return needs

    def supply(self, needs: list[tuple]) -> None:
        for need in needs:
            if need[0] == "init":
                self.send_init(need[1])
            else:
                self.port.reopen(self, "retx")

    def retransmit(self) -> None:
        self.port.reopen(self, "retx")
        if self.started and self.delivered[self.me] is None:
            self.send_init(self.me)

    # -- baseline -------------------------------------------------------------

    base_component = BASE_RBC

    def on_baseline(self, sender: int, body, now: int) -> None:
        if body.phase == PH_ECHO:
            self.vote_echo(sender, body.instance, body.value, now)
        elif body.phase == PH_READY:
            self.vote_ready(sender, body.instance, body.value, now)


class RbcSmallCore:
    """Reliable broadcast of one two-bit value per instance, votes inline.

    The value adopted for echoing must come from the instance's own leader (a
    relayed value is a second-hand claim); delivery needs no payload recovery
    because the agreed value is part of the vote key itself.
    """

    def __init__(self, cfg: SystemConfig, me: int, emit, deliver):
        self.cfg = cfg
        self.me = me
        self.n = cfg.n_nodes
        self.emit = emit          # emit(stage, instance, code)
        self.deliver_cb = deliver  # deliver(instance, code, count_delivered)
        self.values: list[int | None] = [None] * self.n   # leader-signed initials
        self.echoed: list[int | None] = [None] * self.n
        self.readied: list[int | None] = [None] * self.n
        self.echo_votes: list[dict[int, set[int]]] = [dict() for _ in range(self.n)]
        self.ready_votes: list[dict[int, set[int]]] = [dict() for _ in range(self.n)]
        self.delivered: list[int | None] = [None] * self.n
        self.delivered_count = 0

    def start(self, value: int) -> None:
        if self.values[self.me] is not None:
            raise StateError("value already broadcast")
        self.values[self.me] = value
        self.emit("init", self.me, value)
        self._maybe_echo(self.me)

    def on_section(self, sender: int, body: RbcSmallBody) -> None:
        for i in range(self.n):
            if bit(body.initial_nack, i):
                code = two_bit(body.initial_values, i)
                if sender == i and self.values[i] is None:
                    self.values[i] = code
                    self._maybe_echo(i)
                if bit(body.echo_bits, i):
                    self.echo_votes[i].setdefault(code, set()).add(sender)
                if bit(body.ready_bits, i):
                    self.ready_votes[i].setdefault(code, set()).add(sender)
        self._progress()

    def on_vote(self, sender: int, stage: str, instance: int, code: int) -> None:
        if stage == "init":
            if sender == instance and self.values[instance] is None:
                self.values[instance] = code
                self._maybe_echo(instance)
        elif stage == "echo":
            self.echo_votes[instance].setdefault(code, set()).add(sender)
        elif stage == "ready":
            self.ready_votes[instance].setdefault(code, set()).add(sender)
        self._progress()

    def _maybe_echo(self, i: int) -> None:
        if self.echoed[i] is None and self.values[i] is not None:
            self.echoed[i] = self.values[i]
            self.emit("echo", i, self.values[i])
        self._progress()

    def _progress(self) -> None:
        cfg = self.cfg
        for i in range(self.n):
            if self.readied[i] is None:
                code = self._code_with(self.echo_votes[i], cfg.echo_quorum)
                if code is None:
                    code = self._code_with(self.ready_votes[i], cfg.ready_amplify)
                if code is not None:
                    self.readied[i] = code
                    self.emit("ready", i, code)
            if self.delivered[i] is None:
                code = self._code_with(self.ready_votes[i], cfg.deliver_quorum)
                if code is not None:
                    self.delivered[i] = code
                    self.delivered_count += 1
                    self.deliver_cb(i, code, self.delivered_count)

    @staticmethod
    def _code_with(votes: dict[int, set[int]], quorum: int) -> int | None:
        for code in sorted(votes):
            if len(votes[code]) >= quorum:
                return code
        return None

    def section(self) -> RbcSmallBody:
        body = RbcSmallBody()
        for i in range(self.n):
            if self.values[i] is not None:
                body.initial_nack |= 1 << i
                body.initial_values |= (self.values[i] & 3) << (2 * i)
            if self.echoed[i] is not None:
                body.echo_bits |= 1 << i
            if self.readied[i] is not None:
                body.ready_bits |= 1 << i
            if any(len(s) >= self.cfg.echo_quorum for s in self.echo_votes[i].values()):
                body.echo_nack |= 1 << i
            if self.delivered[i] is not None:
                body.ready_nack |= 1 << i
        return body


class RbcSmallBatch(BroadcastFamily):
    """Standalone RBC-small family: one RBC_SMALL packet layout per wave."""

    ptypes = (PacketType.RBC_SMALL,)
    family = "rbc_small"
    base_component = BASE_RBC

    def __init__(self, cfg, me, port, epoch: int = 0):
        super().__init__(cfg, me, port)
        self.epoch = epoch
        self.core = RbcSmallCore(cfg, me, self._emit, self._deliver)

    def start(self, value: int) -> None:
        self.core.start(value)

    def _emit(self, stage: str, instance: int, code: int) -> None:
        self.port.vote(self, stage, instance, bytes([code]),
                       phase={"init": PH_INIT, "echo": PH_ECHO, "ready": PH_READY}[stage])

    def _deliver(self, instance: int, code: int, _count: int) -> None:
        self.port.event(("deliver", self.family, self.epoch, instance, code, None, self.port.now))

    def build(self, stage) -> RbcSmallBody:
        return self.core.section()

    def on_small(self, sender: int, body: RbcSmallBody, now: int) -> None:
        self.core.on_section(sender, body)

    def on_baseline(self, sender: int, body, now: int) -> None:
        stage = {PH_INIT: "init", PH_ECHO: "echo", PH_READY: "ready"}[body.phase]
        self.core.on_vote(sender, stage, body.instance, body.value[0])

    def live(self) -> bool:
        pending = 0
        for i in range(self.n):
            if self.core.delivered[i] is None:
                pending |= 1 << i
        return bool(pending & ~self.abandoned)

    def nack_scan(self, body) -> list[tuple]:
        if isinstance(body, RbcSmallBody):
            for i in range(self.n):
                if not bit(body.ready_nack, i) and self.core.delivered[i] is not None:
                    return [("votes",)]
        return []

    def supply(self, needs) -> None:
        if needs:
            self.port.reopen(self, "retx")

    def retransmit(self) -> None:
        self.port.reopen(self, "retx")


class CbcBatch(BroadcastFamily):
    """N parallel consistent-broadcast instances: echo shares flow to each
    instance's leader, who combines 2f+1 into the FINISH signature."""

    ptypes = (PacketType.CBC_INIT, PacketType.CBC_EF)
    family = "cbc"
    base_component = BASE_CBC

    def __init__(self, cfg, me, port, setup, key, epoch: int = 0, tag: bytes = b"cbcv"):
        super().__init__(cfg, me, port)
        self.setup = setup
        self.key = key
        self.epoch = epoch
        self.tag = tag
        n = self.n
        self.proposals: list[bytes | None] = [None] * n
        self.hashes: list[bytes] = [bytes(cfg.hash_len)] * n
        self.frag_cache: list[list[bytes] | None] = [None] * n
        self.reassembly = [_Reassembly() for _ in range(n)]
        self.my_shares: dict[int, bytes] = {}
        self.leader_shares: dict[bytes, dict] = {}
        self.finish: list[bytes | None] = [None] * n
        self.pending_finish: dict[int, bytes] = {}
        self.delivered: list[bool] = [False] * n
        self.started = False

    def _share_tag(self, inst: int, digest: bytes) -> bytes:
        return b"%s|%d|%d|" % (self.tag, self.epoch, inst) + digest

    def start(self, proposal: bytes) -> None:
        if self.started:
            raise StateError("instance already started for this epoch")
        if not proposal:
            raise StateError("empty proposal")
        self.started = True
        self._adopt(self.me, proposal)
        frags = self.fragments_of(self.me)
        self.port.send_init(self, self.me, len(frags))

    def fragments_of(self, instance: int) -> list[bytes]:
        cached = self.frag_cache[instance]
        if cached is None:
            payload = self.proposals[instance]
            count, cap = init_fragments(payload, self.cfg)
            cached = [payload[i * cap:(i + 1) * cap] for i in range(count)]
            self.frag_cache[instance] = cached
        return cached

    def init_body(self, instance: int, seq: int) -> InitBody:
        frags = self.fragments_of(instance)
        return InitBody(instance, seq, len(frags), frags[seq], self.initial_mask())

    def initial_mask(self) -> int:
        mask = 0
        for i in range(self.n):
            if self.proposals[i] is not None:
                mask |= 1 << i
        return mask

    def _adopt(self, inst: int, payload: bytes) -> None:
        self.proposals[inst] = payload
        digest = hash_data(payload, self.cfg.hash_len)
        self.hashes[inst] = digest
        share = self.key.tsig_share(self.tag, self._share_tag(inst, digest)).data
        if inst == self.me:
            self._leader_collect(self.me, share, digest)
        else:
            self.my_shares[inst] = share
            self.port.vote(self, "echo", inst, share, phase=PH_ECHO)

    def _leader_collect(self, signer: int, share_bytes: bytes, digest: bytes) -> None:
        from .crypto import ThresholdSigShare
        share = ThresholdSigShare(signer, share_bytes)
        tag = self._share_tag(self.me, digest)
        if not self.setup.tsig_verify_share(self.tag, tag, share):
            return
        box = self.leader_shares.setdefault(digest, {})
        box[signer] = share
        if len(box) >= self.cfg.echo_quorum and self.finish[self.me] is None:
            combined = self.setup.tsig_combine(self.tag, tag, box.values(), self.cfg.echo_quorum)
            self._accept_finish(self.me, combined.data, self.port.now)
            self.port.vote(self, "finish", self.me, combined.data, phase=PH_FINISH)

    def _accept_finish(self, inst: int, sig: bytes, now: int) -> None:
        if self.finish[inst] is not None:
            return
        digest = self.hashes[inst]
        if self.proposals[inst] is None:
            return  # cannot check binding yet; retry when payload lands
        if not self.setup.tsig_verify(self.tag, self._share_tag(inst, digest), sig):
            return
        self.finish[inst] = sig
        self.delivered[inst] = True
        self.port.event(("deliver", self.family, self.epoch, inst, digest,
                         self.proposals[inst], now, sig))

    def on_init(self, sender: int, body: InitBody, now: int) -> None:
        inst = body.origin
        if self.proposals[inst] is None:
            payload = self.reassembly[inst].add(sender, body)
            if payload is not None:
                self._adopt(inst, payload)
                if inst in self.pending_finish:
                    self._accept_finish(inst, self.pending_finish.pop(inst), now)

    def on_ef(self, sender: int, body: CbcEfBody, now: int) -> None:
        for inst, share in body.echo_shares:
            if inst == self.me and self.proposals[self.me] is not None:
                self._leader_collect(sender, share, self.hashes[self.me])
        for inst, sig in body.finish_sigs:
            if self.proposals[inst] is not None:
                self._accept_finish(inst, sig, now)
            elif self.finish[inst] is None:
                self.pending_finish[inst] = sig

    def build(self, stage) -> CbcEfBody:
        body = CbcEfBody(list(self.hashes))
        body.echo_shares = sorted(self.my_shares.items())
        body.finish_sigs = [(i, s) for i, s in enumerate(self.finish) if s is not None]
        body.initial_nack = self.initial_mask()
        for i in range(self.n):
            if self.finish[i] is not None:
                body.echo_nack |= 1 << i
                body.finish_nack |= 1 << i
        return body

    def live(self) -> bool:
        pending = 0
        for i in range(self.n):
            if not self.delivered[i]:
                pending |= 1 << i
        return bool(pending & ~self.abandoned)

    def nack_scan(self, body) -> list[tuple]:
        needs: list[tuple] = []
        if isinstance(body, (CbcEfBody, InitBody)):
            have = body.initial_nack
            for i in range(self.n):
                if not bit(have, i) and self.proposals[i] is not None:
                    needs.append(("init", i))
        if isinstance(body, CbcEfBody):
            for i in range(self.n):
                if not bit(body.finish_nack, i) and self.finish[i] is not None:
                    needs.append(("votes",))
                    break
        return needs

    def supply(self, needs) -> None:
        for need in needs:
            if need[0] == "init":
                frags = self.fragments_of(need[1])
                self.port.send_init(self, need[1], len(frags))
            else:
                self.port.reopen(self, "retx")

    def retransmit(self) -> None:
        self.port.reopen(self, "retx")
        if self.started and not self.delivered[self.me]:
            self.port.send_init(self, self.me, len(self.fragments_of(self.me)))

    def on_baseline(self, sender: int, body, now: int) -> None:
        if body.phase == PH_ECHO and body.instance == self.me and self.proposals[self.me] is not None:
            self._leader_collect(sender, body.value, self.hashes[self.me])
        elif body.phase == PH_FINISH:
            if self.proposals[body.instance] is not None:
                self._accept_finish(body.instance, body.value, now)
            else:
                self.pending_finish[body.instance] = body.value


class CbcSmallBatch(BroadcastFamily):
    """CBC over node-id-list proposals (N-bit bitmaps) carried inline."""

    ptypes = (PacketType.CBC_SMALL,)
    family = "cbc_small"
    base_component = BASE_CBC

    def __init__(self, cfg, me, port, setup, key, epoch: int = 0, tag: bytes = b"cbcc"):
        super().__init__(cfg, me, port)
        self.setup = setup
        self.key = key
        self.epoch = epoch
        self.tag = tag
        n = self.n
        self.bitmaps: list[int | None] = [None] * n
        self.my_shares: dict[int, bytes] = {}
        self.leader_shares: dict[int, object] = {}
        self.finish: list[bytes | None] = [None] * n
        self.relayed: dict[int, int] = {}
        self.delivered: list[bool] = [False] * n
        self.started = False

    def _share_tag(self, inst: int, bitmap: int) -> bytes:
        return b"%s|%d|%d|%d" % (self.tag, self.epoch, inst, bitmap)

    def valid_bitmap(self, bitmap: int) -> bool:
        return bin(bitmap).count("1") == self.cfg.echo_quorum and bitmap < (1 << self.n)

    def start(self, bitmap: int) -> None:
        if self.started:
            raise StateError("instance already started for this epoch")
        if not self.valid_bitmap(bitmap):
            raise InputError(f"proposal must list exactly {self.cfg.echo_quorum} node ids")
        self.started = True
        self._adopt(self.me, bitmap)
        self.port.vote(self, "init", self.me, bytes([0]), phase=PH_INIT)

    def _adopt(self, inst: int, bitmap: int) -> None:
        if self.bitmaps[inst] is not None or not self.valid_bitmap(bitmap):
            return
        self.bitmaps[inst] = bitmap
        share = self.key.tsig_share(self.tag, self._share_tag(inst, bitmap)).data
        if inst == self.me:
            self._leader_collect(self.me, share)
        else:
            self.my_shares[inst] = share
            self.port.vote(self, "echo", inst, share, phase=PH_ECHO)

    def _leader_collect(self, signer: int, share_bytes: bytes) -> None:
        from .crypto import ThresholdSigShare
        if self.bitmaps[self.me] is None:
            return
        tag = self._share_tag(self.me, self.bitmaps[self.me])
        share = ThresholdSigShare(signer, share_bytes)
        if not self.setup.tsig_verify_share(self.tag, tag, share):
            return
        box = self.leader_shares.setdefault(self.me, {})
        box[signer] = share
        if len(box) >= self.cfg.echo_quorum and self.finish[self.me] is None:
            combined = self.setup.tsig_combine(self.tag, tag, box.values(), self.cfg.echo_quorum)
            self._accept_finish(self.me, combined.data, self.port.now)
            self.port.vote(self, "finish", self.me, combined.data, phase=PH_FINISH)

    def _accept_finish(self, inst: int, sig: bytes, now: int) -> None:
        if self.finish[inst] is not None or self.bitmaps[inst] is None:
            return
        if not self.setup.tsig_verify(self.tag, self._share_tag(inst, self.bitmaps[inst]), sig):
            return
        self.finish[inst] = sig
        self.delivered[inst] = True
        self.port.event(("deliver", self.family, self.epoch, inst, self.bitmaps[inst], None, now, sig))

    def on_small(self, sender: int, body: CbcSmallBody, now: int) -> None:
        for i in range(self.n):
            if bit(body.initial_nack, i) and self.bitmaps[i] is None:
                # only the leader's own claim about its list is adoptable pre-FINISH
                if sender == i:
                    self._adopt(i, body.bitmaps[i])
                else:
                    self.relayed.setdefault(i, body.bitmaps[i])
        for inst, share in body.echo_shares:
            if inst == self.me:
                self._leader_collect(sender, share)
        for inst, sig in body.finish_sigs:
            if self.bitmaps[inst] is None and inst in self.relayed:
                if self.setup.tsig_verify(self.tag, self._share_tag(inst, self.relayed[inst]), sig):
                    self.bitmaps[inst] = self.relayed[inst]
            self._accept_finish(inst, sig, now)

    def build(self, stage) -> CbcSmallBody:
        body = CbcSmallBody([m if m is not None else 0 for m in self.bitmaps])
        body.echo_shares = sorted(self.my_shares.items())
        body.finish_sigs = [(i, s) for i, s in enumerate(self.finish) if s is not None]
        for i in range(self.n):
            if self.bitmaps[i] is not None:
                body.initial_nack |= 1 << i
            if self.finish[i] is not None:
                body.echo_nack |= 1 << i
                body.finish_nack |= 1 << i
        return body

    def live(self) -> bool:
        pending = 0
        for i in range(self.n):
            if not self.delivered[i]:
                pending |= 1 << i
        return bool(pending & ~self.abandoned)

    def nack_scan(self, body) -> list[tuple]:
        if isinstance(body, CbcSmallBody):
            for i in range(self.n):
                if not bit(body.finish_nack, i) and self.finish[i] is not None:
                    return [("votes",)]
        return []

    def supply(self, needs) -> None:
        if needs:
            self.port.reopen(self, "retx")

    def retransmit(self) -> None:
        self.port.reopen(self, "retx")

    def on_baseline(self, sender: int, body, now: int) -> None:
        if body.phase == PH_INIT and sender == body.instance:
            self._adopt(body.instance, int.from_bytes(body.value, "little"))
        elif body.phase == PH_ECHO and body.instance == self.me:
            self._leader_collect(sender, body.value)
        elif body.phase == PH_FINISH:
            self._accept_finish(body.instance, body.value, now)


class PrbcBatch(RbcBatch):
    """RBC plus a DONE stage: threshold shares prove at least f+1 honest deliveries."""

    ptypes = (PacketType.RBC_INIT, PacketType.RBC_ER, PacketType.PRBC_DONE)
    family = "prbc"

    def __init__(self, cfg, me, port, setup, key, epoch: int = 0):
        super().__init__(cfg, me, port, epoch)
        self.setup = setup
        self.key = key
        self.done_sent: dict[int, bytes] = {}
        self.done_shares: list[dict] = [dict() for _ in range(self.n)]
        self.buffered_shares: list[dict] = [dict() for _ in range(self.n)]
        self.proofs: list[bytes | None] = [None] * self.n

    def proof_tag(self, inst: int) -> bytes:
        return b"prbc|%d|%d" % (self.epoch, inst)

    def _progress(self, now: int) -> None:
        before = list(self.delivered)
        super()._progress(now)
        for i in range(self.n):
            if before[i] is None and self.delivered[i] is not None:
                share = self.key.tsig_share(b"prbc", self.proof_tag(i)).data
                self.done_sent[i] = share
                self.port.vote(self, "done", i, share, phase=PH_DONE,
                               base_component=BASE_PRBC_DONE)
                self._take_share(self.me, i, share, now)
                for signer, data in self.buffered_shares[i].items():
                    self._take_share(signer, i, data, now)
                self.buffered_shares[i].clear()

    def on_done(self, sender: int, body: ShareCarrierBody, now: int) -> None:
        for inst, data in body.entries:
            if inst >= self.n:
                continue
            if self.delivered[inst] is None:
                self.buffered_shares[inst][sender] = data
            else:
                self._take_share(sender, inst, data, now)

    def _take_share(self, signer: int, inst: int, data: bytes, now: int) -> None:
        from .crypto import ThresholdSigShare
        if self.proofs[inst] is not None:
            return
        share = ThresholdSigShare(signer, data)
        if not self.setup.tsig_verify_share(b"prbc", self.proof_tag(inst), share):
            return
        box = self.done_shares[inst]
        box[signer] = share
        if len(box) >= self.cfg.echo_quorum:
            proof = self.setup.tsig_combine(b"prbc", self.proof_tag(inst),
                                            box.values(), self.cfg.echo_quorum)
            self.proofs[inst] = proof.data
            self.port.event(("proof", self.family, self.epoch, inst, proof.data, now))

    def build_done(self) -> ShareCarrierBody:
        body = ShareCarrierBody(sorted(self.done_sent.items()))
        for i in range(self.n):
            if self.proofs[i] is not None:
                body.nack |= 1 << i
        return body

    def build(self, stage):
        if stage == "done" or stage == "retx_done":
            return self.build_done()
        return super().build(stage)

    def live(self) -> bool:
        pending = 0
        for i in range(self.n):
            if self.proofs[i] is None:
                pending |= 1 << i
        return bool(pending & ~self.abandoned) or super().live()

    def nack_scan(self, body) -> list[tuple]:
        needs = super().nack_scan(body) if isinstance(body, (RbcErBody, InitBody)) else []
        if isinstance(body, ShareCarrierBody):
            for i in range(self.n):
                if not bit(body.nack, i) and (self.proofs[i] is not None or i in self.done_sent):
                    needs.append(("done",))
                    break
        return needs

    def supply(self, needs) -> None:
        for need in needs:
            if need[0] == "done":
                self.port.reopen(self, "retx_done")
            elif need[0] == "init":
                self.send_init(need[1])
            else:
                self.port.reopen(self, "retx")

    def retransmit(self) -> None:
        super().retransmit()
        if self.done_sent:
            self.port.reopen(self, "retx_done")

    def on_baseline(self, sender: int, body, now: int) -> None:
        if body.component == BASE_PRBC_DONE:
            if self.delivered[body.instance] is None:
                self.buffered_shares[body.instance][sender] = body.value
            else:
                self._take_share(sender, body.instance, body.value, now)
        else:
            super().on_baseline(sender, body, now)
