"""Digital signatures, threshold signatures, threshold coins and threshold encryption.

Everything here is a deterministic, simulation-secure construction around a
trusted dealer: per-node keys and combined values are keyed hashes of a dealer
group secret. Combined outputs depend only on the tag, never on which share
subset was used, and all serialized sizes are exact so packet layouts stay
stable. The API enforces the threshold rules (a combine call checks t distinct
valid shares before it evaluates the group function); the adversary interface
exposes Byzantine nodes' own key material only.

:param sig_len: serialized digital signature size (default 40 bytes)
:param tsig_len: serialized combined threshold signature size (default 21 bytes)
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from .core import NodeId


class SetupError(ValueError):
    """Invalid dealer parameters."""


class CombineError(ValueError):
    """Not enough distinct valid shares to combine."""


def _h(*parts: bytes) -> bytes:
    out = hashlib.sha256()
    for p in parts:
        out.update(len(p).to_bytes(4, "little"))
        out.update(p)
    return out.digest()


def _stream(key: bytes, tag: bytes, n: int) -> bytes:
    """Deterministic keystream of n bytes derived from (key, tag)."""
    out = b""
    counter = 0
    while len(out) < n:
        out += _h(key, tag, counter.to_bytes(4, "little"))
        counter += 1
    return out[:n]


@dataclass(frozen=True)
class ThresholdSig:
    data: bytes


@dataclass(frozen=True)
class ThresholdSigShare:
    signer: NodeId
    data: bytes


@dataclass(frozen=True)
class CoinShare:
    signer: NodeId
    data: bytes
    proof: bytes = b""


@dataclass(frozen=True)
class Ciphertext:
    tag: bytes
    body: bytes
    mac: bytes


@dataclass(frozen=True)
class DecryptionShare:
    signer: NodeId
    data: bytes


class NodeKey:
    """Key material dealt to a single node. Byzantine code receives only its own."""

    def __init__(self, setup: "DealerSetup", node: NodeId, secret: bytes):
        self._setup = setup
        self.node = node
        self._secret = secret

    def sign(self, msg: bytes) -> bytes:
        return _stream(self._secret, b"sig|" + msg, self._setup.sig_len)

    def tsig_share(self, domain: bytes, tag: bytes) -> ThresholdSigShare:
        data = _stream(self._secret, b"tsh|" + domain + b"|" + tag, self._setup.tsig_len)
        return ThresholdSigShare(self.node, data)

    def coin_share(self, scheme: bytes, tag: bytes) -> CoinShare:
        data = _stream(self._secret, b"csh|" + scheme + b"|" + tag, self._setup.tsig_len)
        if scheme == b"flip":
            # coin flipping carries extra verification data alongside the value
            proof = _stream(self._secret, b"cpr|" + tag, self._setup.tsig_len)
        else:
            proof = b""
        return CoinShare(self.node, data, proof)

    def tdec_share(self, ct: Ciphertext) -> DecryptionShare:
        data = _stream(self._secret, b"dsh|" + ct.tag + ct.mac, self._setup.tsig_len)
        return DecryptionShare(self.node, data)

    def local_coin(self, instance: int, round_no: int) -> int:
        """Private per-node coin: independent across nodes by key separation."""
        draw = _stream(self._secret, b"lc|%d|%d" % (instance, round_no), 1)
        return draw[0] & 1


class DealerSetup:
    """Trusted-dealer output for n nodes.

    Thresholds are per use: ``coin_threshold`` (f+1) gates coins and threshold
    decryption, ``proof_threshold`` (2f+1) gates combined threshold signatures
    used as broadcast completion proofs.
    """

    def __init__(self, n: int, coin_threshold: int, proof_threshold: int | None = None,
                 seed: int = 1, sig_len: int = 40, tsig_len: int = 21):
        if not (1 <= coin_threshold <= n):
            raise SetupError(f"threshold {coin_threshold} out of range for n={n}")
        if proof_threshold is None:
            proof_threshold = coin_threshold
        if not (1 <= proof_threshold <= n):
            raise SetupError(f"threshold {proof_threshold} out of range for n={n}")
        self.n = n
        self.coin_threshold = coin_threshold
        self.proof_threshold = proof_threshold
        self.sig_len = sig_len
        self.tsig_len = tsig_len
        self.group_key = _h(b"group", seed.to_bytes(8, "little", signed=False))
        self._node_secrets = [_h(self.group_key, b"node", i.to_bytes(2, "little")) for i in range(n)]
        self.keys = [NodeKey(self, i, self._node_secrets[i]) for i in range(n)]

    # -- digital signatures ------------------------------------------------

    def verify(self, node: NodeId, msg: bytes, sig: bytes) -> bool:
        if not (0 <= node < self.n) or len(sig) != self.sig_len:
            return False
        expect = _stream(self._node_secrets[node], b"sig|" + msg, self.sig_len)
        return hmac.compare_digest(expect, sig)

    # -- threshold signatures ----------------------------------------------

    def tsig_verify_share(self, domain: bytes, tag: bytes, share: ThresholdSigShare) -> bool:
        if not (0 <= share.signer < self.n) or len(share.data) != self.tsig_len:
            return False
        expect = _stream(self._node_secrets[share.signer], b"tsh|" + domain + b"|" + tag, self.tsig_len)
        return hmac.compare_digest(expect, share.data)

    def _group_tsig(self, domain: bytes, tag: bytes) -> bytes:
        return _stream(self.group_key, b"tsig|" + domain + b"|" + tag, self.tsig_len)

    def tsig_combine(self, domain: bytes, tag: bytes, shares, threshold: int | None = None) -> ThresholdSig:
        t = self.proof_threshold if threshold is None else threshold
        signers = set()
        for share in shares:
            if self.tsig_verify_share(domain, tag, share):
                signers.add(share.signer)
        if len(signers) < t:
            raise CombineError(f"{len(signers)} valid shares < threshold {t}")
        return ThresholdSig(self._group_tsig(domain, tag))

    def tsig_verify(self, domain: bytes, tag: bytes, sig: ThresholdSig | bytes) -> bool:
        data = sig.data if isinstance(sig, ThresholdSig) else sig
        if len(data) != self.tsig_len:
            return False
        return hmac.compare_digest(self._group_tsig(domain, tag), data)

    # -- threshold coins -----------------------------------------------------

    def coin_verify_share(self, scheme: bytes, tag: bytes, share: CoinShare) -> bool:
        if not (0 <= share.signer < self.n) or len(share.data) != self.tsig_len:
            return False
        secret = self._node_secrets[share.signer]
        expect = _stream(secret, b"csh|" + scheme + b"|" + tag, self.tsig_len)
        if not hmac.compare_digest(expect, share.data):
            return False
        if scheme == b"flip":
            proof = _stream(secret, b"cpr|" + tag, self.tsig_len)
            return hmac.compare_digest(proof, share.proof)
        return True

    def coin(self, scheme: bytes, tag: bytes, shares) -> int:
        signers = set()
        for share in shares:
            if self.coin_verify_share(scheme, tag, share):
                signers.add(share.signer)
        if len(signers) < self.coin_threshold:
            raise CombineError(f"{len(signers)} valid coin shares < threshold {self.coin_threshold}")
        return self.coin_oracle(scheme, tag)

    def coin_oracle(self, scheme: bytes, tag: bytes) -> int:
        """Combine-then-hash pipeline evaluated straight from the group key."""
        combined = _stream(self.group_key, b"tsig|" + scheme + b"|" + tag, self.tsig_len)
        return hashlib.sha256(combined).digest()[-1] & 1

    # -- threshold encryption ------------------------------------------------

    def tenc_encrypt(self, tag: bytes, plaintext: bytes) -> Ciphertext:
        body = bytes(a ^ b for a, b in zip(plaintext, _stream(self.group_key, b"enc|" + tag, len(plaintext))))
        mac = _h(self.group_key, b"mac|" + tag, body)[:16]
        return Ciphertext(tag, body, mac)

    def tdec_verify_share(self, ct: Ciphertext, share: DecryptionShare) -> bool:
        if not (0 <= share.signer < self.n) or len(share.data) != self.tsig_len:
            return False
        expect = _stream(self._node_secrets[share.signer], b"dsh|" + ct.tag + ct.mac, self.tsig_len)
        return hmac.compare_digest(expect, share.data)

    def tdec_combine(self, ct: Ciphertext, shares) -> bytes:
        signers = set()
        for share in shares:
            if self.tdec_verify_share(ct, share):
                signers.add(share.signer)
        if len(signers) < self.coin_threshold:
            raise CombineError(f"{len(signers)} valid decryption shares < threshold {self.coin_threshold}")
        if _h(self.group_key, b"mac|" + ct.tag, ct.body)[:16] != ct.mac:
            raise CombineError("ciphertext integrity check failed")
        return bytes(a ^ b for a, b in zip(ct.body, _stream(self.group_key, b"enc|" + ct.tag, len(ct.body))))


def dealer_setup(n: int, t: int, seed: int = 1, **kwargs) -> DealerSetup:
    """Deal keys for n nodes with a single reconstruction threshold t."""
    return DealerSetup(n, coin_threshold=t, proof_threshold=t, seed=seed, **kwargs)
