"""What an outside reader of the chain logs can learn about transaction workspaces."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

from .workspace import WS_PREFIX


@dataclass(frozen=True)
class TxVisibility:
    tx: str
    mode: str
    host: str
    entries: int  # workspace entries the transaction stored
    present: int  # of those, found in logs the attacker can read
    recoverable: int  # of those, located and decoded without keys

    @property
    def visible(self) -> bool:
        return self.recoverable > 0

    def to_dict(self) -> dict:
        return {"tx": self.tx, "mode": self.mode, "host": self.host, "entries": self.entries,
                "present": self.present, "recoverable": self.recoverable, "visible": self.visible}


def _recover(chain, tx: str) -> dict:
    """Keys an attacker can attribute to ``tx`` by scanning the log:
    ``_ws/<tx>/<nonce>/<key>`` paths whose value decodes as plain JSON."""
    out = {}
    for e in chain.log:
        if not e.key.startswith(WS_PREFIX):
            continue
        parts = e.key[len(WS_PREFIX):].split("/", 2)
        if len(parts) != 3 or parts[0] != tx:
            continue
        try:
            json.loads(e.value.decode())
        except (UnicodeDecodeError, ValueError):
            continue
        out[e.key] = parts[2]
    return out


def attacker_view(handle, chains: Iterable[str]) -> list:
    """Simulate a reader with full log access to ``chains`` and no workspace secrets."""
    readable = [handle.chains[c] for c in sorted(set(chains)) if c in handle.chains]
    report = []
    for tx, ws in sorted(handle.workspaces.items()):
        locations = set(ws.locations.values())
        present = set()
        recovered = set()
        for ch in readable:
            logged = {e.key for e in ch.log}
            present |= locations & logged
            recovered |= set(_recover(ch, tx)) & locations
        report.append(TxVisibility(tx, handle.entries[tx].mode, ws.host, len(locations), len(present),
                                   len(recovered)))
    return report
