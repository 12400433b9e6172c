"""Shared domain types, configuration, hashing and fault-threshold arithmetic."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from enum import IntEnum
from pathlib import Path

NodeId = int


class ConfigError(ValueError):
    """Raised for invalid system or scenario configuration."""


class Vote(IntEnum):
    """Binary-agreement vote: 0, 1 or undecided (bottom)."""

    ZERO = 0
    ONE = 1
    BOT = 2

    @classmethod
    def from_wire(cls, code: int) -> "Vote":
        if code not in (0, 1, 2):
            raise ValueError(f"undefined two-bit vote code {code}")
        return cls(code)


def fault_threshold(n: int) -> int:
    """Largest f with 3f + 1 <= n. Requires n >= 4 so at least one fault is tolerated."""
    if n < 4:
        raise ConfigError(f"need at least 4 nodes to tolerate a Byzantine fault, got {n}")
    return (n - 1) // 3


@dataclass(frozen=True)
class SystemConfig:
    """Static parameters shared by every node of a run.

    ``d_align`` is the framing alignment unit: every encoded packet is padded
    into [d_align, 2*d_align]. ``retx_interval`` is the stall window (in
    simulated ticks) after which an incomplete component rebroadcasts its
    state and answers peers' NACKs.
    """

    n_nodes: int = 4
    f: int = -1  # derived from n_nodes when negative
    d_align: int = 512
    retx_interval: int = 400
    hash_len: int = 32
    sig_len: int = 40
    tsig_len: int = 21
    proposal_cap: int = 4096
    rng_seed: int = 1

    def __post_init__(self):
        if self.f < 0:
            object.__setattr__(self, "f", fault_threshold(self.n_nodes))
        self.validate()

    def validate(self) -> None:
        n, f = self.n_nodes, self.f
        if n < 4:
            raise ConfigError(f"n_nodes must be >= 4, got {n}")
        if not (3 * f + 1 <= n and f == (n - 1) // 3):
            raise ConfigError(f"f={f} inconsistent with n={n} (expect floor((n-1)/3))")
        for name in ("d_align", "retx_interval", "hash_len", "sig_len", "tsig_len", "proposal_cap"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def max_packet(self) -> int:
        return 2 * self.d_align

    @property
    def echo_quorum(self) -> int:
        return 2 * self.f + 1

    @property
    def ready_amplify(self) -> int:
        return self.f + 1

    @property
    def deliver_quorum(self) -> int:
        return 2 * self.f + 1


def quorum_sizes(cfg: SystemConfig) -> tuple[int, int, int]:
    """(echo quorum, ready amplification, deliver quorum) = (2f+1, f+1, 2f+1)."""
    return cfg.echo_quorum, cfg.ready_amplify, cfg.deliver_quorum


def hash_data(data: bytes, hash_len: int = 32) -> bytes:
    """SHA-256 digest truncated to ``hash_len`` bytes (default: full digest)."""
    return hashlib.sha256(data).digest()[:hash_len]


@dataclass(frozen=True)
class Proposal:
    """A transaction batch proposed by ``origin`` in ``epoch``."""

    payload: bytes
    origin: NodeId
    epoch: int

    def digest(self, hash_len: int = 32) -> bytes:
        return hash_data(self.payload, hash_len)


def load_config(path: str | Path) -> SystemConfig:
    """Load a SystemConfig from a ``key = value`` text file (# comments allowed)."""
    values = parse_kv_file(path)
    return config_from_dict(values)


def parse_kv_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values

def config_from_dict(values: dict[str, str]) -> SystemConfig:
    known = {f.name for f in fields(SystemConfig)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = int(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}") from exc
    return SystemConfig(**kwargs)
