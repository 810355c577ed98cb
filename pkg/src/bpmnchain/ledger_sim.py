"""Simulated chains: append-only versioned key-value logs with per-method blocks.

Each smart-contract method execution runs in an :class:`ExecutionContext`.
Its writes stay pending until :meth:`Chain.commit_block`, which appends all of
them under one block number, or :meth:`Chain.abort`, which drops them.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional

from .errors import ExecutionFailed, HashMismatch, NoExecutionContext, NotFound, UnknownHash, ValidationError

DEFAULT_GAS_PRICE_GWEI = 20
DEFAULT_BASE_RATE = 60_600  # GWei per KB for one ledger pass


@dataclass(frozen=True)
class ChainProfile:
    name: str
    block_interval_ms: float
    per_kb_ms: float
    rtt_ms: float  # one bridge round trip touching this chain
    gas_factor: float  # multiplier on calibrated GWei charges
    block_gas: float = 0.0  # flat charge per block (hardware proxy)

    def to_dict(self) -> dict:
        return {
            "blockIntervalMs": self.block_interval_ms,
            "perKbMs": self.per_kb_ms,
            "rttMs": self.rtt_ms,
            "gasFactor": self.gas_factor,
            "blockGas": self.block_gas,
        }

    @classmethod
    def from_dict(cls, name: str, d: Mapping[str, Any]) -> "ChainProfile":
        return cls(name, float(d["blockIntervalMs"]), float(d["perKbMs"]), float(d["rttMs"]),
                   float(d["gasFactor"]), float(d.get("blockGas", 0.0)))


PROFILES = {
    "ethereum-like": ChainProfile("ethereum-like", 12_000, 2.0, 400, 1.0),
    "quorum-like": ChainProfile("quorum-like", 250, 0.5, 40, 0.01),
    "fabric-channel": ChainProfile("fabric-channel", 500, 0.25, 60, 0.0, 50_000),
}


def load_profiles(path: str | Path | None = None) -> dict:
    if path is None:
        return dict(PROFILES)
    data = json.loads(Path(path).read_text())
    raw = data.get("profiles", data)
    return {name: ChainProfile.from_dict(name, d) for name, d in raw.items()}


def kb(blob: bytes) -> float:
    return len(blob) / 1024


@dataclass(frozen=True)
class LogEntry:
    key: str
    value: bytes
    version: int
    block: int


@dataclass
class Block:
    number: int
    method: str
    first: int  # index of the first log entry
    count: int
    gas: float
    latency_ms: float


@dataclass
class ExecutionContext:
    """Pending state of one method execution on one chain."""

    chain: "Chain"
    method: str
    pending: dict = field(default_factory=dict)  # key -> bytes, insertion ordered
    metered: bool = True  # charge the one-pass base rate per written KB
    charges: float = 0.0  # explicit GWei charges added by patterns
    failed: bool = False
    closed: bool = False
    free: set = field(default_factory=set)  # keys excluded from per-KB metering

    def charge(self, gwei: float) -> None:
        self.charges += gwei

    def put(self, key: str, value: bytes) -> None:
        self.chain.write(key, value, self)

    def get(self, key: str) -> bytes:
        return self.chain.read(key, self)


class Chain:
    def __init__(self, chain_id: str, profile: ChainProfile = PROFILES["ethereum-like"],
                 base_rate: float = DEFAULT_BASE_RATE):
        self.id = chain_id
        self.profile = profile
        self.base_rate = base_rate
        self.log: list = []
        self.head: dict = {}  # key -> index into log
        self.blocks: list = []
        self.methods: set = set()
        self.gas = 0.0
        self.latency_ms = 0.0

    # -- reads
    def read(self, key: str, ctx: Optional[ExecutionContext] = None) -> bytes:
        if ctx is not None and key in ctx.pending:
            return ctx.pending[key]
        if key not in self.head:
            raise NotFound(f"key {key!r} not found on {self.id}", key=key, chain=self.id)
        return self.log[self.head[key]].value

    def version(self, key: str) -> int:
        return self.log[self.head[key]].version if key in self.head else 0

    def keys(self, prefix: str = "") -> list:
        return sorted(k for k in self.head if k.startswith(prefix))

    def history(self, key: str) -> list:
        return [e for e in self.log if e.key == key]

    # -- writes
    def begin(self, method: str, metered: bool = True) -> ExecutionContext:
        return ExecutionContext(self, method, metered=metered)

    def write(self, key: str, value: bytes, ctx: Optional[ExecutionContext]) -> None:
        if ctx is None or ctx.closed:
            raise NoExecutionContext(f"write to {key!r} outside a method execution")
        if ctx.chain is not self:
            raise NoExecutionContext(f"context belongs to chain {ctx.chain.id}, not {self.id}")
        ctx.pending.pop(key, None)
        ctx.pending[key] = bytes(value)

    def execution_gas(self, ctx: ExecutionContext) -> float:
        gas = ctx.charges
        if ctx.metered:
            gas += sum(self.base_rate * kb(v) for k, v in ctx.pending.items() if k not in ctx.free)
        return gas * self.profile.gas_factor + self.profile.block_gas

    def commit_block(self, ctx: ExecutionContext) -> int:
        if ctx.closed:
            raise ExecutionFailed("execution already closed")
        if ctx.failed:
            self.abort(ctx)
            raise ExecutionFailed(f"execution of {ctx.method} failed; nothing appended")
        number = len(self.blocks) + 1
        first = len(self.log)
        size = 0.0
        for key, value in ctx.pending.items():
            self.log.append(LogEntry(key, value, self.version(key) + 1, number))
            self.head[key] = len(self.log) - 1
            size += kb(value)
        gas = self.execution_gas(ctx)
        latency = self.profile.block_interval_ms + size * self.profile.per_kb_ms
        self.blocks.append(Block(number, ctx.method, first, len(ctx.pending), gas, latency))
        self.gas += gas
        self.latency_ms += latency
        ctx.closed = True
        return number

    def abort(self, ctx: ExecutionContext) -> None:
        ctx.pending.clear()
        ctx.closed = True

    def genesis(self, values: Mapping[str, bytes]) -> None:
        """Initial state, appended as block 0 without gas or latency."""
        if self.log:
            raise ExecutionFailed("genesis must come first")
        for key, value in sorted(values.items()):
            self.log.append(LogEntry(key, value, 1, 0))
            self.head[key] = len(self.log) - 1

    # -- inspection
    def snapshot(self, prefix: str = "", exclude: tuple = ()) -> dict:
        return {k: self.log[i].value for k, i in sorted(self.head.items())
                if k.startswith(prefix) and not any(k.startswith(x) for x in exclude)}

    def digest(self, prefix: str = "", exclude: tuple = ()) -> str:
        h = hashlib.sha256()
        for k, v in self.snapshot(prefix, exclude).items():
            h.update(k.encode() + b"\0" + hashlib.sha256(v).digest())
        return h.hexdigest()

    def log_digest(self) -> str:
        h = hashlib.sha256()
        for e in self.log:
            h.update(f"{e.block}:{e.version}:{e.key}\0".encode() + hashlib.sha256(e.value).digest())
        return h.hexdigest()

    def dump_jsonl(self) -> Iterator[str]:
        for e in self.log:
            yield json.dumps({"block": e.block, "key": e.key, "version": e.version,
                              "sha256": hashlib.sha256(e.value).hexdigest(), "bytes": len(e.value)},
                             sort_keys=True)


def write(chain: Chain, key: str, value: bytes, ctx: Optional[ExecutionContext] = None) -> None:
    chain.write(key, value, ctx)


def read(chain: Chain, key: str, ctx: Optional[ExecutionContext] = None) -> bytes:
    return chain.read(key, ctx)


def commit_block(chain: Chain, ctx: ExecutionContext) -> int:
    return chain.commit_block(ctx)


class OffchainStore:
    """Content-addressed blob store; every read re-hashes the blob."""

    def __init__(self):
        self.blobs: dict = {}

    def put(self, blob: bytes) -> str:
        h = hashlib.sha256(blob).hexdigest()
        self.blobs.setdefault(h, bytes(blob))
        return h

    def get(self, content_hash: str) -> bytes:
        if content_hash not in self.blobs:
            raise UnknownHash(f"no blob {content_hash}", hash=content_hash)
        blob = self.blobs[content_hash]
        if hashlib.sha256(blob).hexdigest() != content_hash:
            raise HashMismatch(f"blob {content_hash[:12]} fails its hash check", hash=content_hash)
        return blob


def offchain_put(store: OffchainStore, blob: bytes) -> str:
    return store.put(blob)


def offchain_get(store: OffchainStore, content_hash: str) -> bytes:
    return store.get(content_hash)


@dataclass(frozen=True)
class ActorIdentity:
    actor_id: str
    signing_key: bytes = field(repr=False)

    def sign(self, data: bytes) -> str:
        return hmac.new(self.signing_key, self.actor_id.encode() + b"\0" + data, hashlib.sha256).hexdigest()

    def verify(self, data: bytes, signature: str) -> bool:
        return hmac.compare_digest(self.sign(data), signature)

    @classmethod
    def derive(cls, actor_id: str, seed: int | str) -> "ActorIdentity":
        key = hashlib.sha256(f"actor-key:{seed}:{actor_id}".encode()).digest()
        return cls(actor_id, key)


def verify_signature(key_of: Mapping[str, ActorIdentity], actor_id: str, data: bytes, signature: str) -> bool:
    ident = key_of.get(actor_id)
    return bool(ident) and ident.verify(data, signature)


def build_chains(spec: Mapping[str, str], profiles: Optional[Mapping[str, ChainProfile]] = None,
                 base_rate: float = DEFAULT_BASE_RATE) -> dict:
    """``spec`` maps chain id to profile name, e.g. {"main": "ethereum-like"}."""
    profiles = profiles or PROFILES
    out = {}
    for cid, pname in spec.items():
        if pname not in profiles:
            raise ValidationError(f"chain {cid}: unknown profile {pname!r}")
        out[cid] = Chain(cid, profiles[pname], base_rate)
    return out
