"""Bit-exact packet codec: header/NACK/value/signature sectioning and framing.

Wire conventions (fixed so golden byte dumps are stable):

* multi-byte integers are little-endian
* bit runs are packed LSB-first, bit ``i`` of a section refers to instance ``i``
* every packet is ``header | body | signature`` where the signature covers
  header and body and has length ``cfg.sig_len``
* header (10 bytes): version, sender, packet type, epoch (2), cluster,
  route-src, route-dst, body length (2)

Framing pads an encoded packet with zero bytes into ``[d_align, 2*d_align]``;
the header's body-length field lets the decoder ignore the padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

VERSION = 1
HEADER_LEN = 10


class DecodeError(ValueError):
    """Malformed or truncated packet bytes."""


class FramingError(ValueError):
    """Packet does not fit the [D, 2D] alignment window."""


class BatchError(ValueError):
    """Sections that may not be merged into one packet."""


class PacketType(IntEnum):
    RBC_INIT = 1
    CBC_INIT = 2
    RBC_ER = 3
    CBC_EF = 4
    PRBC_DONE = 5
    RBC_SMALL = 6
    CBC_SMALL = 7
    ABA_LC = 8
    ABA_SC = 9
    DEC_SHARE = 10   # share-carrier body, threshold-decryption shares
    PI_SHARE = 11    # share-carrier body, permutation-seed shares
    CERT = 12        # share-carrier body, digital-signature certificates
    RELAY = 13       # init body, cluster-leader relay of global results
    RETRY = 14       # share-carrier body, leader-replacement announcements
    BASELINE = 15    # single-instance unbatched message


# share-carrier packet types all parse with the same body layout
CARRIER_TYPES = frozenset({PacketType.PRBC_DONE, PacketType.DEC_SHARE,
                           PacketType.PI_SHARE, PacketType.CERT, PacketType.RETRY})
INIT_TYPES = frozenset({PacketType.RBC_INIT, PacketType.CBC_INIT, PacketType.RELAY})


def nack_bits(n: int) -> int:
    """Width of one compressed NACK section: N bits (one per instance)."""
    return n


def uncompressed_nack_bits(n: int) -> int:
    """Per-instance NACKs for N batched instances would need N(N-1) bits."""
    return n * (n - 1)


def _bits_len(nbits: int) -> int:
    return (nbits + 7) // 8


def pack_bits(value: int, nbits: int) -> bytes:
    return value.to_bytes(_bits_len(nbits), "little")


def unpack_bits(data: bytes) -> int:
    return int.from_bytes(data, "little")


def bit(value: int, i: int) -> int:
    return (value >> i) & 1


def two_bit(value: int, i: int) -> int:
    return (value >> (2 * i)) & 3


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError("truncated packet body")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "little")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError("trailing bytes in packet body")


# ---------------------------------------------------------------------------
# body layouts
# ---------------------------------------------------------------------------

@dataclass
class InitBody:
    """One proposal fragment plus the batched INITIAL NACK."""

    origin: int
    frag_seq: int
    frag_total: int
    fragment: bytes
    initial_nack: int = 0  # bit i: sender holds instance i's full proposal

    def encode(self, cfg) -> bytes:
        return bytes([self.origin]) + self.frag_seq.to_bytes(2, "little") + \
            self.frag_total.to_bytes(2, "little") + len(self.fragment).to_bytes(2, "little") + \
            self.fragment + pack_bits(self.initial_nack, cfg.n_nodes)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "InitBody":
        origin = r.u8()
        seq, total, flen = r.u16(), r.u16(), r.u16()
        if not (0 <= origin < cfg.n_nodes) or total == 0 or seq >= total:
            raise DecodeError("bad fragment header")
        frag = r.take(flen)
        nack = unpack_bits(r.take(_bits_len(cfg.n_nodes)))
        return cls(origin, seq, total, frag, nack)


@dataclass
class RbcErBody:
    """Vertically batched ECHO/READY votes with compressed NACKs for N instances."""

    hashes: list[bytes]          # per instance; zero-filled when unknown
    echo_bits: int = 0
    ready_bits: int = 0
    echo_nack: int = 0           # bit i: sender reached the 2f+1 echo quorum on i
    ready_nack: int = 0          # bit i: sender reached the 2f+1 ready quorum on i
    initial_nack: int = 0        # bit i: sender holds instance i's proposal

    def encode(self, cfg) -> bytes:
        n = cfg.n_nodes
        if len(self.hashes) != n:
            raise ValueError("need one hash slot per instance")
        bits = self.echo_bits | self.ready_bits << n | self.echo_nack << 2 * n | \
            self.ready_nack << 3 * n | self.initial_nack << 4 * n
        return b"".join(self.hashes) + pack_bits(bits, 5 * n)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "RbcErBody":
        n, hl = cfg.n_nodes, cfg.hash_len
        hashes = [r.take(hl) for _ in range(n)]
        bits = unpack_bits(r.take(_bits_len(5 * n)))
        mask = (1 << n) - 1
        return cls(hashes, bits & mask, bits >> n & mask, bits >> 2 * n & mask,
                   bits >> 3 * n & mask, bits >> 4 * n & mask)


def _encode_entries(entries: list[tuple[int, bytes]], width: int | None) -> bytes:
    if len(entries) > 255:
        raise ValueError("too many entries")
    out = [bytes([len(entries)])]
    for inst, data in entries:
        if width is not None and len(data) != width:
            raise ValueError(f"entry width {len(data)} != {width}")
        out.append(bytes([inst]) + (b"" if width is not None else bytes([len(data)])) + data)
    return b"".join(out)


def _decode_entries(r: _Reader, cfg, width: int | None, bound_by_n=True) -> list[tuple[int, bytes]]:
    count = r.u8()
    entries = []
    for _ in range(count):
        inst = r.u8()
        if bound_by_n and inst >= cfg.n_nodes:
            raise DecodeError("entry instance out of range")
        elen = width if width is not None else r.u8()
        entries.append((inst, r.take(elen)))
    return entries


@dataclass
class CbcEfBody:
    """Batched CBC ECHO shares (addressed to each instance's leader) and FINISH sigs."""

    hashes: list[bytes]
    echo_shares: list[tuple[int, bytes]] = field(default_factory=list)   # (instance, share)
    finish_sigs: list[tuple[int, bytes]] = field(default_factory=list)   # (instance, combined)
    echo_nack: int = 0
    finish_nack: int = 0
    initial_nack: int = 0

    def encode(self, cfg) -> bytes:
        n = cfg.n_nodes
        if len(self.hashes) != n:
            raise ValueError("need one hash slot per instance")
        bits = self.echo_nack | self.finish_nack << n | self.initial_nack << 2 * n
        return b"".join(self.hashes) + _encode_entries(self.echo_shares, cfg.tsig_len) + \
            _encode_entries(self.finish_sigs, cfg.tsig_len) + pack_bits(bits, 3 * n)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "CbcEfBody":
        n = cfg.n_nodes
        hashes = [r.take(cfg.hash_len) for _ in range(n)]
        echo = _decode_entries(r, cfg, cfg.tsig_len)
        fin = _decode_entries(r, cfg, cfg.tsig_len)
        bits = unpack_bits(r.take(_bits_len(3 * n)))
        mask = (1 << n) - 1
        return cls(hashes, echo, fin, bits & mask, bits >> n & mask, bits >> 2 * n & mask)


@dataclass
class ShareCarrierBody:
    """Generic share/certificate carrier: per-instance byte strings plus one NACK."""

    entries: list[tuple[int, bytes]] = field(default_factory=list)
    nack: int = 0

    def encode(self, cfg) -> bytes:
        return _encode_entries(self.entries, None) + pack_bits(self.nack, cfg.n_nodes)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "ShareCarrierBody":
        entries = _decode_entries(r, cfg, None, bound_by_n=False)
        nack = unpack_bits(r.take(_bits_len(cfg.n_nodes)))
        return cls(entries, nack)


@dataclass
class RbcSmallBody:
    """RBC over two-bit proposals: INITIAL values travel in-packet.

    ``initial_values`` packs N two-bit vote codes; an instance's code is only
    meaningful when its ``initial_nack`` bit is set.
    """

    initial_values: int = 0
    initial_nack: int = 0
    echo_bits: int = 0
    ready_bits: int = 0
    echo_nack: int = 0
    ready_nack: int = 0

    def bit_run(self, n: int) -> int:
        return self.initial_values | self.initial_nack << 2 * n | self.echo_bits << 3 * n | \
            self.ready_bits << 4 * n | self.echo_nack << 5 * n | self.ready_nack << 6 * n

    @classmethod
    def from_bit_run(cls, bits: int, n: int) -> "RbcSmallBody":
        mask = (1 << n) - 1
        return cls(bits & (1 << 2 * n) - 1, bits >> 2 * n & mask, bits >> 3 * n & mask,
                   bits >> 4 * n & mask, bits >> 5 * n & mask, bits >> 6 * n & mask)

    def validate_codes(self, n: int) -> None:
        for i in range(n):
            if bit(self.initial_nack, i) and two_bit(self.initial_values, i) == 3:
                raise DecodeError(f"undefined two-bit vote code for instance {i}")

    def encode(self, cfg) -> bytes:
        return pack_bits(self.bit_run(cfg.n_nodes), 7 * cfg.n_nodes)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "RbcSmallBody":
        n = cfg.n_nodes
        body = cls.from_bit_run(unpack_bits(r.take(_bits_len(7 * n))), n)
        body.validate_codes(n)
        return body


@dataclass
class CbcSmallBody:
    """CBC over node-id-list proposals carried inline as N-bit bitmaps."""

    bitmaps: list[int]                         # per instance; valid iff initial_nack bit set
    echo_shares: list[tuple[int, bytes]] = field(default_factory=list)
    finish_sigs: list[tuple[int, bytes]] = field(default_factory=list)
    echo_nack: int = 0
    finish_nack: int = 0
    initial_nack: int = 0

    def encode(self, cfg) -> bytes:
        n = cfg.n_nodes
        if len(self.bitmaps) != n:
            raise ValueError("need one bitmap slot per instance")
        maps = b"".join(pack_bits(m, n) for m in self.bitmaps)
        bits = self.echo_nack | self.finish_nack << n | self.initial_nack << 2 * n
        return maps + _encode_entries(self.echo_shares, cfg.tsig_len) + \
            _encode_entries(self.finish_sigs, cfg.tsig_len) + pack_bits(bits, 3 * n)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "CbcSmallBody":
        n = cfg.n_nodes
        maps = [unpack_bits(r.take(_bits_len(n))) for _ in range(n)]
        echo = _decode_entries(r, cfg, cfg.tsig_len)
        fin = _decode_entries(r, cfg, cfg.tsig_len)
        bits = unpack_bits(r.take(_bits_len(3 * n)))
        mask = (1 << n) - 1
        return cls(maps, echo, fin, bits & mask, bits >> n & mask, bits >> 2 * n & mask)


# one embedded broadcast block per (agreement instance, phase): the RBC-small bit run
LC_BLOCK_PHASES = 3


@dataclass
class AbaLcBody:
    """One round of k batched local-coin agreement instances.

    ``blocks[j][p]`` is the RBC-small section of phase p (0..2) for the
    j-th batched instance; instance ids run ``base .. base+k-1``.
    """

    round_no: int
    base: int
    blocks: list[list[RbcSmallBody]]

    def encode(self, cfg) -> bytes:
        n = cfg.n_nodes
        k = len(self.blocks)
        bits = 0
        shift = 0
        for inst_blocks in self.blocks:
            if len(inst_blocks) != LC_BLOCK_PHASES:
                raise ValueError("each instance needs three phase blocks")
            for blk in inst_blocks:
                bits |= blk.bit_run(n) << shift
                shift += 7 * n
        return bytes([self.round_no, k, self.base]) + pack_bits(bits, shift)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "AbaLcBody":
        n = cfg.n_nodes
        round_no, k, base = r.u8(), r.u8(), r.u8()
        if k == 0 or k > n or base >= n:
            raise DecodeError("bad instance range")
        bits = unpack_bits(r.take(_bits_len(7 * n * LC_BLOCK_PHASES * k)))
        blocks = []
        run_mask = (1 << 7 * n) - 1
        shift = 0
        for _ in range(k):
            inst_blocks = []
            for _ in range(LC_BLOCK_PHASES):
                blk = RbcSmallBody.from_bit_run(bits >> shift & run_mask, n)
                blk.validate_codes(n)
                inst_blocks.append(blk)
                shift += 7 * n
            blocks.append(inst_blocks)
        return cls(round_no, base, blocks)


@dataclass
class AbaScBody:
    """One round of k batched shared-coin agreement instances.

    Per instance: BVAL votes sent (2 bits, one per value), AUX vote (2 bits),
    and the matching reached-quorum NACK bits. A single coin share serves the
    whole round regardless of k.
    """

    round_no: int
    base: int
    bval: list[int]       # per instance, 2-bit set of values BVAL-broadcast
    aux: list[int]        # per instance, 2-bit one-hot AUX value (0 = none)
    bval_nack: list[int]  # per instance, per-value 2f+1-reached bits
    aux_nack: list[int]
    share_nack: int = 0   # bit j: sender holds node j's coin share for this round
    coin_share: bytes = b""

    def encode(self, cfg) -> bytes:
        k = len(self.bval)
        out = [bytes([self.round_no, k, self.base, 1 if self.coin_share else 0])]
        per = bytes(
            (self.bval[i] & 3) | (self.aux[i] & 3) << 2 |
            (self.bval_nack[i] & 3) << 4 | (self.aux_nack[i] & 3) << 6
            for i in range(k)
        )
        out.append(per)
        out.append(pack_bits(self.share_nack, cfg.n_nodes))
        if self.coin_share:
            if len(self.coin_share) > 255:
                raise ValueError("oversized coin share")
            out.append(bytes([len(self.coin_share)]) + self.coin_share)
        return b"".join(out)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "AbaScBody":
        round_no, k, base, has_share = r.u8(), r.u8(), r.u8(), r.u8()
        if k == 0 or k > cfg.n_nodes or base >= cfg.n_nodes or has_share > 1:
            raise DecodeError("bad instance range")
        per = r.take(k)
        bval = [b & 3 for b in per]
        aux = [b >> 2 & 3 for b in per]
        bval_nack = [b >> 4 & 3 for b in per]
        aux_nack = [b >> 6 & 3 for b in per]
        if any(a == 3 for a in aux):
            raise DecodeError("AUX carries at most one value")
        share_nack = unpack_bits(r.take(_bits_len(cfg.n_nodes)))
        share = r.take(r.u8()) if has_share else b""
        return cls(round_no, base, bval, aux, bval_nack, aux_nack, share_nack, share)


@dataclass
class BaselineBody:
    """Unbatched single-instance message: one vote/share with a per-instance NACK."""

    component: int
    instance: int
    phase: int
    round_no: int
    sub: int
    value: bytes
    nack: int = 0

    def encode(self, cfg) -> bytes:
        return bytes([self.component, self.instance, self.phase, self.round_no, self.sub]) + \
            len(self.value).to_bytes(2, "little") + self.value + pack_bits(self.nack, cfg.n_nodes)

    @classmethod
    def decode(cls, r: _Reader, cfg) -> "BaselineBody":
        comp, inst, phase, rnd, sub = r.u8(), r.u8(), r.u8(), r.u8(), r.u8()
        value = r.take(r.u16())
        nack = unpack_bits(r.take(_bits_len(cfg.n_nodes)))
        return cls(comp, inst, phase, rnd, sub, value, nack)


_BODY_CODECS = {
    PacketType.RBC_ER: RbcErBody,
    PacketType.CBC_EF: CbcEfBody,
    PacketType.RBC_SMALL: RbcSmallBody,
    PacketType.CBC_SMALL: CbcSmallBody,
    PacketType.ABA_LC: AbaLcBody,
    PacketType.ABA_SC: AbaScBody,
    PacketType.BASELINE: BaselineBody,
}
for _t in INIT_TYPES:
    _BODY_CODECS[_t] = InitBody
for _t in CARRIER_TYPES:
    _BODY_CODECS[_t] = ShareCarrierBody


@dataclass
class Packet:
    ptype: PacketType
    sender: int
    epoch: int
    body: object
    cluster: int = 0
    route_src: int = 0
    route_dst: int = 0
    signature: bytes = b""
    signed_region: bytes = b""


def encode(pkt: Packet, cfg, key=None) -> bytes:
    """Serialize and sign one packet; raises FramingError when it exceeds 2D."""
    body = pkt.body.encode(cfg)
    body_len = len(body) + cfg.sig_len
    head = bytes([VERSION, pkt.sender, int(pkt.ptype)]) + pkt.epoch.to_bytes(2, "little") + \
        bytes([pkt.cluster, pkt.route_src, pkt.route_dst]) + body_len.to_bytes(2, "little")
    region = head + body
    sig = key.sign(region) if key is not None else bytes(cfg.sig_len)
    data = region + sig
    if len(data) > cfg.max_packet:
        raise FramingError(f"encoded packet {len(data)}B exceeds max {cfg.max_packet}B")
    return data


def decode(data: bytes, cfg) -> Packet:
    """Parse one (possibly padded) packet; any malformed input raises DecodeError."""
    if len(data) < HEADER_LEN:
        raise DecodeError("short header")
    if data[0] != VERSION:
        raise DecodeError(f"unknown version {data[0]}")
    sender = data[1]
    try:
        ptype = PacketType(data[2])
    except ValueError:
        raise DecodeError(f"unknown packet type {data[2]}") from None
    epoch = int.from_bytes(data[3:5], "little")
    cluster, rsrc, rdst = data[5], data[6], data[7]
    body_len = int.from_bytes(data[8:10], "little")
    if body_len < cfg.sig_len or HEADER_LEN + body_len > len(data):
        raise DecodeError("bad body length")
    body_bytes = data[HEADER_LEN:HEADER_LEN + body_len - cfg.sig_len]
    sig = data[HEADER_LEN + body_len - cfg.sig_len:HEADER_LEN + body_len]
    reader = _Reader(body_bytes)
    try:
        body = _BODY_CODECS[ptype].decode(reader, cfg)
        reader.done()
    except DecodeError:
        raise
    except Exception as exc:  # any structural failure is a decode failure
        raise DecodeError(str(exc)) from exc
    return Packet(ptype, sender, epoch, body, cluster, rsrc, rdst, sig,
                  data[:HEADER_LEN + body_len - cfg.sig_len])


def frame_align(data: bytes, d_align: int) -> bytes:
    """Pad to at least D; reject anything beyond the 2D buffer bound."""
    if len(data) > 2 * d_align:
        raise FramingError(f"{len(data)}B exceeds buffer bound {2 * d_align}B")
    if len(data) < d_align:
        return data + bytes(d_align - len(data))
    return data


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceSummary:
    """One instance's state in one phase, the unit of vertical batching."""

    family: str        # "rbc" | "cbc"
    epoch: int
    phase: str         # "echo" | "ready" | "finish"
    instance: int
    voted: bool
    digest: bytes | None = None


@dataclass
class PhaseSection:
    family: str
    epoch: int
    phase: str
    bits: int
    hashes: dict[int, bytes]


def merge_vertical(summaries: list[InstanceSummary]) -> PhaseSection:
    """Fold N same-phase instance summaries into one packet section."""
    if not summaries:
        raise BatchError("nothing to merge")
    first = summaries[0]
    section = PhaseSection(first.family, first.epoch, first.phase, 0, {})
    for s in summaries:
        if s.epoch != first.epoch:
            raise BatchError(f"mixed epochs {s.epoch} != {first.epoch}")
        if s.family != first.family or s.phase != first.phase:
            raise BatchError("vertical batching requires one family and phase")
        if s.voted:
            section.bits |= 1 << s.instance
        if s.digest is not None:
            section.hashes[s.instance] = s.digest
    return section


def merge_horizontal(sections: list[PhaseSection], cfg) -> RbcErBody:
    """Combine different phases of one broadcast component into a single body."""
    if not sections:
        raise BatchError("nothing to merge")
    family, epoch = sections[0].family, sections[0].epoch
    if family != "rbc":
        raise BatchError(f"no horizontal layout for family {family!r}")
    hashes = [bytes(cfg.hash_len)] * cfg.n_nodes
    body = RbcErBody(hashes)
    for section in sections:
        if section.family != family:
            raise BatchError(f"cannot merge {section.family!r} into {family!r} packet")
        if section.epoch != epoch:
            raise BatchError(f"mixed epochs {section.epoch} != {epoch}")
        if section.phase == "echo":
            body.echo_bits |= section.bits
        elif section.phase == "ready":
            body.ready_bits |= section.bits
        else:
            raise BatchError(f"phase {section.phase!r} has no section in this layout")
        for inst, digest in section.hashes.items():
            hashes[inst] = digest
            body.initial_nack |= 1 << inst
    return body
