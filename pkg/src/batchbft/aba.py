"""Binary asynchronous Byzantine agreement, batched k instances at a time.

Two families:

* shared-coin agreement (``AbaScCore``): BVAL/AUX/SHARE rounds where one
  threshold coin per round serves every batched instance, built from either
  threshold-signature shares or coin-flipping shares (the latter carry extra
  verification data);
* local-coin agreement (``AbaLcCore``): each round runs three vote phases,
  every phase an embedded batch of N small reliable broadcasts, with private
  per-node randomness breaking ties.

All instances of a batch start simultaneously; a serial driver activates one
instance at a time and never releases coin material for an instance that has
not been activated. A node that decides keeps participating for exactly one
more round so laggards can terminate, then answers only NACKs.
"""

from __future__ import annotations

from .core import SystemConfig, Vote
from .components import (
    BASE_ABA_LC,
    BASE_ABA_SC,
    PH_AUX,
    PH_BVAL,
    PH_SHARE,
    InputError,
    RbcSmallCore,
    StateError,
)
from .crypto import CoinShare
from .packets import AbaLcBody, AbaScBody, PacketType, RbcSmallBody, bit

ROUND_CAP = 64


class _ScRound:
    __slots__ = ("bval_sent", "bval_votes", "bin_order", "aux_sent", "aux_order",
                 "aux_votes", "vals", "resolved", "entered")

    def __init__(self):
        self.bval_sent = 0          # bitmask of values BVAL-broadcast
        self.bval_votes = ({}, {})  # value -> set of senders (dict keeps it simple)
        self.bin_order: list[int] = []
        self.aux_sent: int | None = None
        self.aux_order: list[int] = []
        self.aux_votes: dict[int, int] = {}
        self.vals: set[int] | None = None
        self.resolved = False
        self.entered = False

    @property
    def bin_values(self) -> set[int]:
        return set(self.bin_order)


class AbaScCore:
    """k parallel shared-coin agreement instances with one coin per round."""

    family = "aba_sc"
    base_component = BASE_ABA_SC
    ptypes = (PacketType.ABA_SC,)

    def __init__(self, cfg: SystemConfig, setup, key, me: int, port, epoch: int = 0,
                 k: int | None = None, base: int = 0, scheme: bytes = b"tsig",
                 shared_coin: bool = True, proto: bytes = b"aba", round_base: int = 0):
        self.cfg = cfg
        self.setup = setup
        self.key = key
        self.me = me
        self.port = port
        self.epoch = epoch
        self.k = cfg.n_nodes if k is None else k
        self.base = base
        self.scheme = scheme
        self.shared_coin = shared_coin
        self.proto = proto
        self.round_base = round_base
        self.n = cfg.n_nodes
        self.est = [0] * self.k
        self.decided: list[int | None] = [None] * self.k
        self.decided_round = [0] * self.k
        self.rounds: list[dict[int, _ScRound]] = [dict() for _ in range(self.k)]
        self.round_share_sent: dict[tuple, bool] = {}
        self.shares: dict[bytes, dict[int, CoinShare]] = {}
        self.coins: dict[bytes, int] = {}
        self.my_rounds: list[int] = [0] * self.k   # rounds this node sent BVAL in
        self.started = False
        self.abandoned = False

    # -- tags -----------------------------------------------------------------

    def coin_tag(self, slot: int, r: int) -> bytes:
        if self.shared_coin:
            return b"%s|%d|coin|%d" % (self.proto, self.epoch, r)
        return b"%s|%d|coin|%d|%d" % (self.proto, self.epoch, self.base + slot, r)

    def _share_wire(self, r: int) -> bytes:
        share = self.key.coin_share(self.scheme, self.coin_tag(self._share_slot(r), r))
        return share.data + share.proof

    def _share_slot(self, r: int) -> int:
        # with a shared coin any slot maps to the same tag
        return 0

    # -- lifecycle -------------------------------------------------------------

    def start(self, inputs: list[int]) -> None:
        if self.started:
            raise StateError("agreement batch already started")
        if len(inputs) != self.k:
            raise InputError(f"need {self.k} inputs, got {len(inputs)}")
        for v in inputs:
            if v not in (0, 1):
                raise InputError("agreement inputs must be binary")
        self.started = True
        for slot, v in enumerate(inputs):
            self.est[slot] = v
            self._enter_round(slot, self.round_base + 1)

    def _enter_round(self, slot: int, r: int) -> None:
        if r - self.round_base > ROUND_CAP:
            raise StateError(f"round cap {ROUND_CAP} exceeded for instance {self.base + slot}")
        st = self.rounds[slot].setdefault(r, _ScRound())
        st.entered = True
        self.my_rounds[slot] = r
        self._bval_send(slot, r, self.est[slot])
        self._progress(slot, r)

    def _bval_send(self, slot: int, r: int, v: int) -> None:
        st = self.rounds[slot][r]
        if bit(st.bval_sent, v):
            return
        st.bval_sent |= 1 << v
        self.port.vote(self, ("bval", r), self.base + slot, bytes([v]),
                       phase=PH_BVAL, round_no=r)

    # -- inbound ----------------------------------------------------------------

    def on_sc(self, sender: int, body: AbaScBody, now: int) -> None:
        r = body.round_no
        if body.base != self.base or len(body.bval) != self.k:
            return
        for slot in range(self.k):
            st = self.rounds[slot].setdefault(r, _ScRound())
            for v in (0, 1):
                if bit(body.bval[slot], v):
                    st.bval_votes[v].setdefault(sender, True)
            if body.aux[slot]:
                st.aux_votes.setdefault(sender, 0 if body.aux[slot] == 1 else 1)
                if sender not in st.aux_order:
                    st.aux_order.append(sender)
        if body.coin_share:
            self._take_share(sender, r, body.coin_share)
        for slot in range(self.k):
            self._progress(slot, r)

    def on_baseline(self, sender: int, body, now: int) -> None:
        slot = body.instance - self.base
        if not (0 <= slot < self.k):
            return
        r = body.round_no
        st = self.rounds[slot].setdefault(r, _ScRound())
        if body.phase == PH_BVAL and body.value and body.value[0] in (0, 1):
            st.bval_votes[body.value[0]].setdefault(sender, True)
        elif body.phase == PH_AUX and body.value and body.value[0] in (0, 1):
            st.aux_votes.setdefault(sender, body.value[0])
            if sender not in st.aux_order:
                st.aux_order.append(sender)
        elif body.phase == PH_SHARE:
            self._take_share(sender, r, body.value, slot=slot)
        self._progress(slot, r)

    def _take_share(self, sender: int, r: int, wire: bytes, slot: int = 0) -> None:
        tag = self.coin_tag(slot, r)
        if tag in self.coins:
            return
        data, proof = wire[:self.cfg.tsig_len], wire[self.cfg.tsig_len:]
        share = CoinShare(sender, data, proof)
        if not self.setup.coin_verify_share(self.scheme, tag, share):
            return
        box = self.shares.setdefault(tag, {})
        box[sender] = share
        if len(box) >= self.setup.coin_threshold:
            value = self.setup.coin(self.scheme, tag, box.values())
            self.coins[tag] = value
            self.port.event(("coin", self.epoch, tag, r, value, self.port.now))

    # -- transitions ---------------------------------------------------------------

    def _progress(self, slot: int, r: int) -> None:
        st = self.rounds[slot].get(r)
        if st is None or not st.entered:
            return
        cfg = self.cfg
        for v in (0, 1):
            votes = len(st.bval_votes[v])
            if votes >= cfg.ready_amplify and not bit(st.bval_sent, v):
                self._bval_send(slot, r, v)
            if votes >= cfg.echo_quorum and v not in st.bin_order:
                st.bin_order.append(v)
        if st.aux_sent is None and st.bin_order:
            w = st.bin_order[0]
            st.aux_sent = w
            self.port.vote(self, ("aux", r), self.base + slot, bytes([w]),
                           phase=PH_AUX, round_no=r)
        if st.vals is None and st.aux_sent is not None:
            bin_vals = st.bin_values
            qualifying = [s for s in st.aux_order if st.aux_votes[s] in bin_vals]
            if len(qualifying) >= cfg.echo_quorum:
                chosen = qualifying[:cfg.echo_quorum]
                st.vals = {st.aux_votes[s] for s in chosen}
                self.port.event(("aux-quorum", self.epoch, self.base + slot, r, self.port.now))
                self._release_share(slot, r)
        if st.vals is not None and not st.resolved:
            coin = self.coins.get(self.coin_tag(slot, r))
            if coin is None:
                return
            st.resolved = True
            self._resolve(slot, r, st.vals, coin)

    def _release_share(self, slot: int, r: int) -> None:
        key = (r,) if self.shared_coin else (slot, r)
        if self.round_share_sent.get(key):
            return
        self.round_share_sent[key] = True
        wire = self.key.coin_share(self.scheme, self.coin_tag(slot, r))
        self.port.event(("share-released", self.epoch, self.base + slot, r, self.port.now))
        self.port.vote(self, ("share", r), self.base + slot, wire.data + wire.proof,
                       phase=PH_SHARE, round_no=r)
        self._take_share(self.me, r, wire.data + wire.proof, slot=slot)

    def _resolve(self, slot: int, r: int, vals: set[int], coin: int) -> None:
        inst = self.base + slot
        if vals in ({0}, {1}):
            b = vals.pop() if False else next(iter(vals))
            if self.decided[slot] is None:
                if b == coin:
                    self.decided[slot] = b
                    self.decided_round[slot] = r
                    self.port.event(("decide", self.family, self.epoch, inst, b, r, self.port.now))
                else:
                    self.est[slot] = b
        else:
            if self.decided[slot] is None:
                self.est[slot] = coin
        if self.decided[slot] is None or r <= self.decided_round[slot]:
            self._enter_round(slot, r + 1)

    # -- outbound ---------------------------------------------------------------

    def build(self, stage) -> AbaScBody:
        r = stage[1]
        body = AbaScBody(r, self.base, [0] * self.k, [0] * self.k, [0] * self.k, [0] * self.k)
        for slot in range(self.k):
            st = self.rounds[slot].get(r)
            if st is None or not st.entered:
                continue
            body.bval[slot] = st.bval_sent
            if st.aux_sent is not None:
                body.aux[slot] = 1 << st.aux_sent
            for v in (0, 1):
                if len(st.bval_votes[v]) >= self.cfg.echo_quorum:
                    body.bval_nack[slot] |= 1 << v
            if st.vals is not None:
                body.aux_nack[slot] = 3
        key = (r,) if self.shared_coin else (0, r)
        if self.round_share_sent.get(key) or (not self.shared_coin and any(
                self.round_share_sent.get((s, r)) for s in range(self.k))):
            slot = 0 if self.shared_coin else next(
                s for s in range(self.k) if self.round_share_sent.get((s, r)))
            wire = self.key.coin_share(self.scheme, self.coin_tag(slot, r))
            body.coin_share = wire.data + wire.proof
        for s, box in self.shares.items():
            pass
        tag = self.coin_tag(0, r)
        for sender in self.shares.get(tag, {}):
            body.share_nack |= 1 << sender
        return body

    def wave_ptype(self, stage) -> PacketType:
        return PacketType.ABA_SC

    # -- reliability ----------------------------------------------------------------

    def live(self) -> bool:
        return self.started and not self.abandoned and any(d is None for d in self.decided)

    def nack_scan(self, body) -> list[tuple]:
        if not isinstance(body, AbaScBody):
            return []
        r = body.round_no
        for slot in range(self.k):
            mine = self.rounds[slot].get(r)
            if mine is None or not mine.entered:
                continue
            if self.my_rounds[slot] > r or (mine.vals is not None and body.aux_nack[slot] != 3):
                return [("votes", r)]
        return []

    def supply(self, needs) -> None:
        for need in needs:
            r = need[1]
            for stage in (("bval", r), ("aux", r), ("share", r)):
                self.port.reopen(self, stage)

    def retransmit(self) -> None:
        for slot in range(self.k):
            r = self.my_rounds[slot]
            if r:
                for stage in (("bval", r), ("aux", r), ("share", r)):
                    self.port.reopen(self, stage)


class _LcRound:
    __slots__ = ("cores", "started_phase", "acted", "outcome")

    def __init__(self, make_core):
        self.cores = [make_core(p) for p in range(3)]
        self.started_phase = 0
        self.acted = [False, False, False]
        self.outcome: list | None = None


class AbaLcCore:
    """k parallel local-coin agreement instances (three vote phases per round)."""

    family = "aba_lc"
    base_component = BASE_ABA_LC
    ptypes = (PacketType.ABA_LC,)

    def __init__(self, cfg: SystemConfig, key, me: int, port, epoch: int = 0,
                 k: int | None = None, base: int = 0, round_base: int = 0):
        self.cfg = cfg
        self.key = key
        self.me = me
        self.port = port
        self.epoch = epoch
        self.k = cfg.n_nodes if k is None else k
        self.base = base
        self.round_base = round_base
        self.n = cfg.n_nodes
        self.est = [0] * self.k
        self.decided: list[int | None] = [None] * self.k
        self.decided_round = [0] * self.k
        self.rounds: list[dict[int, _LcRound]] = [dict() for _ in range(self.k)]
        self.my_rounds = [0] * self.k
        self.started = False
        self.abandoned = False

    def start(self, inputs: list[int]) -> None:
        if self.started:
            raise StateError("agreement batch already started")
        if len(inputs) != self.k:
            raise InputError(f"need {self.k} inputs, got {len(inputs)}")
        for v in inputs:
            if v not in (0, 1):
                raise InputError("agreement inputs must be binary")
        self.started = True
        for slot, v in enumerate(inputs):
            self.est[slot] = v
            self._enter_round(slot, self.round_base + 1)

    def _round_state(self, slot: int, r: int) -> _LcRound:
        state = self.rounds[slot].get(r)
        if state is None:
            def make_core(p, slot=slot, r=r):
                return RbcSmallCore(
                    self.cfg, self.me,
                    emit=lambda stage, voter, code, slot=slot, r=r, p=p:
                        self._emit(slot, r, p, stage, voter, code),
                    deliver=lambda voter, code, count, slot=slot, r=r, p=p:
                        self._delivered(slot, r, p, count),
                )
            state = _LcRound(make_core)
            self.rounds[slot][r] = state
        return state

    def _enter_round(self, slot: int, r: int) -> None:
        if r - self.round_base > ROUND_CAP:
            raise StateError(f"round cap {ROUND_CAP} exceeded for instance {self.base + slot}")
        self.my_rounds[slot] = r
        self._round_state(slot, r)
        self._start_phase(slot, r, 1, self.est[slot])

    def _start_phase(self, slot: int, r: int, p: int, value: int) -> None:
        st = self._round_state(slot, r)
        st.started_phase = p
        core = st.cores[p - 1]
        if core.values[self.me] is None:
            core.start(value)
        self._check_act(slot, r, p)

    def _emit(self, slot: int, r: int, p: int, stage: str, voter: int, code: int) -> None:
        self.port.vote(self, ("lc", r, p, stage), voter, bytes([stage_code(stage), code]),
                       phase=p, round_no=r, sub=self.base + slot)

    def _delivered(self, slot: int, r: int, p: int, count: int) -> None:
        self._check_act(slot, r, p)

    def _check_act(self, slot: int, r: int, p: int) -> None:
        st = self.rounds[slot][r]
        core = st.cores[p - 1]
        if st.started_phase != p or st.acted[p - 1]:
            return
        if core.delivered_count < self.n - self.cfg.f:
            return
        st.acted[p - 1] = True
        values = [v for v in core.delivered if v is not None]
        if p == 1:
            ones = sum(1 for v in values if v == 1)
            zeros = sum(1 for v in values if v == 0)
            nxt = 1 if ones > zeros else 0 if zeros > ones else self.est[slot]
            self._start_phase(slot, r, 2, nxt)
        elif p == 2:
            counts = {0: 0, 1: 0}
            for v in values:
                if v in counts:
                    counts[v] += 1
            prop = Vote.BOT.value
            for v in (0, 1):
                if counts[v] * 2 > self.n:
                    prop = v
            self._start_phase(slot, r, 3, prop)
        else:
            counts = {0: 0, 1: 0}
            for v in values:
                if v in counts:
                    counts[v] += 1
            best = max((0, 1), key=lambda v: (counts[v], -v))
            inst = self.base + slot
            if counts[best] >= self.cfg.deliver_quorum:
                if self.decided[slot] is None:
                    self.decided[slot] = best
                    self.decided_round[slot] = r
                    self.port.event(("decide", self.family, self.epoch, inst, best, r, self.port.now))
                self.est[slot] = best
            elif counts[best] >= self.cfg.ready_amplify:
                self.est[slot] = best
            else:
                self.est[slot] = self.key.local_coin(self.epoch * 256 + inst, r)
            if self.decided[slot] is None or r <= self.decided_round[slot]:
                self._enter_round(slot, r + 1)

    # -- inbound ---------------------------------------------------------------

    def on_lc(self, sender: int, body: AbaLcBody, now: int) -> None:
        if body.base != self.base or len(body.blocks) != self.k:
            return
        r = body.round_no
        for slot in range(self.k):
            st = self._round_state(slot, r)
            for p in range(3):
                st.cores[p].on_section(sender, body.blocks[slot][p])

    def on_baseline(self, sender: int, body, now: int) -> None:
        slot = body.sub - self.base
        if not (0 <= slot < self.k) or len(body.value) != 2:
            return
        st = self._round_state(slot, body.round_no)
        stage = {0: "init", 1: "echo", 2: "ready"}.get(body.value[0])
        if stage is None or not (1 <= body.phase <= 3):
            return
        st.cores[body.phase - 1].on_vote(sender, stage, body.instance, body.value[1])

    # -- outbound ----------------------------------------------------------------

    def build(self, stage) -> AbaLcBody:
        r = stage[1]
        blocks = []
        for slot in range(self.k):
            st = self.rounds[slot].get(r)
            if st is None:
                blocks.append([RbcSmallBody(), RbcSmallBody(), RbcSmallBody()])
            else:
                blocks.append([st.cores[p].section() for p in range(3)])
        return AbaLcBody(r, self.base, blocks)

    def wave_ptype(self, stage) -> PacketType:
        return PacketType.ABA_LC

    # -- reliability ---------------------------------------------------------------

    def live(self) -> bool:
        return self.started and not self.abandoned and any(d is None for d in self.decided)

    def nack_scan(self, body) -> list[tuple]:
        if not isinstance(body, AbaLcBody):
            return []
        r = body.round_no
        for slot in range(self.k):
            if self.my_rounds[slot] > r:
                return [("votes", r)]
            st = self.rounds[slot].get(r)
            peer = body.blocks[slot][0] if slot < len(body.blocks) else None
            if st is not None and peer is not None and st.started_phase:
                mine = st.cores[0].section()
                if mine.ready_nack & ~peer.ready_nack:
                    return [("votes", r)]
        return []

    def supply(self, needs) -> None:
        for need in needs:
            self.port.reopen(self, ("lc", need[1], 0, "retx"))

    def retransmit(self) -> None:
        for slot in range(self.k):
            r = self.my_rounds[slot]
            if r:
                self.port.reopen(self, ("lc", r, 0, "retx"))


def stage_code(stage: str) -> int:
    return {"init": 0, "echo": 1, "ready": 2}[stage]


class SerialAbaDriver:
    """Activate agreement instances one at a time in a fixed order.

    ``input_fn(candidate)`` is evaluated at activation time; the driver stops
    at the first instance deciding 1. When every candidate decides 0 the
    driver reports no selection and re-passes the order with refreshed inputs
    (inputs only ever improve, so a pass with an attainable candidate decides).
    """

    def __init__(self, order: list[int], input_fn, make_core, on_selected, on_exhausted, max_passes: int = 4):
        self.order = order
        self.input_fn = input_fn
        self.make_core = make_core
        self.on_selected = on_selected
        self.on_exhausted = on_exhausted
        self.max_passes = max_passes
        self.idx = -1
        self.pass_no = 0
        self.cores: dict[tuple[int, int], object] = {}
        self.selected: int | None = None
        self.decisions: list[tuple[int, int]] = []

    @property
    def active_candidate(self) -> int | None:
        if self.selected is not None or self.idx < 0 or self.idx >= len(self.order):
            return None
        return self.order[self.idx]

    def start(self) -> None:
        if self.idx >= 0:
            raise StateError("serial driver already started")
        self._advance()

    def _advance(self) -> None:
        self.idx += 1
        if self.idx >= len(self.order):
            self.pass_no += 1
            if self.pass_no >= self.max_passes:
                self.on_exhausted(final=True)
                return
            self.on_exhausted(final=False)
            self.idx = 0
        candidate = self.order[self.idx]
        core = self.make_core(candidate, self.pass_no)
        self.cores[(self.pass_no, candidate)] = core
        core.start([self.input_fn(candidate)])

    def on_decide(self, candidate: int, bitv: int) -> None:
        if self.selected is not None:
            return
        if candidate != self.order[self.idx]:
            raise StateError(f"decision for {candidate} while {self.order[self.idx]} is active")
        self.decisions.append((candidate, bitv))
        if bitv == 1:
            self.selected = candidate
            self.on_selected(candidate)
        else:
            self._advance()
