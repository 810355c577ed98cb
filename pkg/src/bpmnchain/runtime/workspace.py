"""Private transaction workspaces: write buffer, read cache, hidden locations."""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field
from typing import Optional

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import HashMismatch
from ..ledger_sim import kb

STATES = ("Active", "Prepared", "Committed", "Aborted")
WS_PREFIX = "_ws/"
META_PREFIX = "_sys/"


def derive_secret(seed: int | str, tx_id: str) -> bytes:
    return hashlib.sha256(f"ws-secret:{seed}:{tx_id}".encode()).digest()


@dataclass
class Workspace:
    tx_id: str
    host: str  # chain id
    contract: str
    participants: tuple
    crypto: bool
    secret: bytes = field(repr=False)
    state: str = "Active"
    buffer: list = field(default_factory=list)  # (key, bytes) in write order
    read_cache: dict = field(default_factory=dict)
    locations: dict = field(default_factory=dict)  # key -> ledger location written
    stamps: dict = field(default_factory=dict)  # key -> tree-wide sequence number of the last write
    begun_step: Optional[int] = None

    @property
    def nonce(self) -> str:
        return hmac.new(self.secret, b"nonce", hashlib.sha256).hexdigest()[:16]

    def meta_key(self, name: str) -> str:
        return f"{META_PREFIX}{self.contract}/tx/{self.tx_id}/{name}"

    def location(self, key: str) -> str:
        if self.crypto:
            tag = hmac.new(self.secret, f"{self.tx_id}|{key}".encode(), hashlib.sha256).hexdigest()
            return WS_PREFIX + tag[:40]
        return f"{WS_PREFIX}{self.tx_id}/{self.nonce}/{key}"

    def _aead(self) -> AESGCM:
        return AESGCM(hmac.new(self.secret, b"enc", hashlib.sha256).digest())

    def seal(self, key: str, value: bytes) -> bytes:
        if not self.crypto:
            return value
        # deterministic nonce: location plus a content hash never repeats for distinct plaintexts
        iv = hmac.new(self.secret, key.encode() + b"\0" + hashlib.sha256(value).digest(), hashlib.sha256).digest()[:12]
        return iv + self._aead().encrypt(iv, value, self.tx_id.encode())

    def unseal(self, blob: bytes) -> bytes:
        if not self.crypto:
            return blob
        try:
            return self._aead().decrypt(blob[:12], blob[12:], self.tx_id.encode())
        except Exception:
            raise HashMismatch(f"{self.tx_id}: workspace entry fails authentication") from None

    # -- buffer views
    def lookup(self, key: str) -> Optional[bytes]:
        for k, v in reversed(self.buffer):
            if k == key:
                return v
        return None

    def final_writes(self) -> dict:
        """Last value per key, ordered by the position of that last write."""
        out: dict = {}
        for k, v in self.buffer:
            out.pop(k, None)
            out[k] = v
        return out

    def written_kb(self) -> float:
        return sum(kb(v) for v in self.final_writes().values())

    def result_hash(self) -> bytes:
        h = hashlib.sha256(self.tx_id.encode())
        for k, v in self.final_writes().items():
            h.update(k.encode() + b"\0" + hashlib.sha256(v).digest())
        return h.digest()
