"""Declarative task scripts.

A script is a list of operations run in order against the token payload and a
key-value store::

    {"op": "read",  "key": "inventory", "into": "stock"}
    {"op": "write", "key": "order/{qty}", "from": "qty", "size_kb": 4}
    {"op": "write", "key": "status", "value": "done", "offchain": true}
    {"op": "set",   "field": "approved", "value": true}
    {"op": "copy",  "field": "amount", "from": "qty"}

Keys may reference payload fields with ``{name}``. ``size_kb`` pads the stored
blob to that many kilobytes so that gas and latency meters see a realistic
size. A task without a script passes its input through unchanged.
"""

from __future__ import annotations

import json
import string
from typing import Any, Iterable, Mapping, Optional, Protocol, Sequence

from .errors import ExecutionFailed, NotFound, ValidationError

OPS = ("read", "write", "set", "copy")
RESERVED_PREFIX = "_"  # ledger namespace of the transaction machinery


class Store(Protocol):
    def get(self, key: str) -> bytes: ...

    def put(self, key: str, value: bytes) -> None: ...


def encode_value(value: Any, size_kb: Optional[float] = None) -> bytes:
    raw = json.dumps(value, sort_keys=True, separators=(",", ":")).encode()
    if size_kb:
        target = int(size_kb * 1024)
        if target > len(raw):
            raw += b" " * (target - len(raw))
    return raw


def decode_value(blob: bytes) -> Any:
    return json.loads(blob.decode())


def _key(template: str, payload: Mapping[str, Any]) -> str:
    try:
        key = template.format_map(dict(payload)) if "{" in template else template
    except (KeyError, ValueError) as exc:
        raise ExecutionFailed(f"cannot expand key {template!r}: {exc}") from None
    if key.startswith(RESERVED_PREFIX):
        raise ExecutionFailed(f"key {key!r} lies in the reserved namespace")
    return key


def check_script(ops: Sequence[Mapping[str, Any]], name: str = "") -> None:
    for i, op in enumerate(ops):
        kind = op.get("op")
        if kind not in OPS:
            raise ValidationError(f"script {name!r} step {i}: unknown op {kind!r}")
        need = {"read": ("key", "into"), "write": ("key",), "set": ("field",), "copy": ("field", "from")}[kind]
        missing = [k for k in need if k not in op]
        if missing:
            raise ValidationError(f"script {name!r} step {i}: missing {missing}")
        if kind == "write" and ("from" in op) == ("value" in op):
            raise ValidationError(f"script {name!r} step {i}: write needs exactly one of 'from'/'value'")
        if str(op.get("key", "")).startswith(RESERVED_PREFIX):
            raise ValidationError(f"script {name!r} step {i}: keys starting with {RESERVED_PREFIX!r} are reserved")


def run_script(ops: Sequence[Mapping[str, Any]], payload: Mapping[str, Any], store: Store,
               offchain=None) -> dict:
    """Run ``ops`` and return the output payload. ``offchain`` is an object
    with ``put(blob) -> hash`` and ``get(hash) -> blob`` for offchain writes."""
    out = dict(payload)
    for op in ops:
        kind = op["op"]
        if kind == "read":
            value = decode_value(store.get(_key(op["key"], out)))
            if isinstance(value, dict) and set(value) == {"offchain"} and offchain is not None:
                value = decode_value(offchain.get(value["offchain"]))
            out[op["into"]] = value
        elif kind == "write":
            if "from" in op:
                if op["from"] not in out:
                    raise ExecutionFailed(f"write reads missing field {op['from']!r}")
                value = out[op["from"]]
            else:
                value = op["value"]
            blob = encode_value(value, op.get("size_kb"))
            if op.get("offchain") and offchain is not None:
                blob = encode_value({"offchain": offchain.put(blob)})
            store.put(_key(op["key"], out), blob)
        elif kind == "set":
            out[op["field"]] = op.get("value")
        else:
            if op["from"] not in out:
                raise ExecutionFailed(f"copy reads missing field {op['from']!r}")
            out[op["field"]] = out[op["from"]]
    return out


def _literal(template: str) -> bool:
    return not any(name for _, name, _, _ in string.Formatter().parse(template) if name is not None)


def static_read_set(scripts: Iterable[Sequence[Mapping[str, Any]]]) -> list:
    """Literal keys read before any write to them, in first-read order."""
    written: set = set()
    reads: list = []
    for ops in scripts:
        for op in ops:
            key = op.get("key")
            if key is None or not _literal(key):
                continue
            if op["op"] == "read" and key not in written and key not in reads:
                reads.append(key)
            elif op["op"] == "write":
                written.add(key)
    return reads


class DictStore:
    """In-memory store with the same byte-level contract as a ledger."""

    def __init__(self, data: Optional[Mapping[str, bytes]] = None):
        self.data = dict(data or {})

    def get(self, key: str) -> bytes:
        if key not in self.data:
            raise NotFound(f"key {key!r} not found", key=key)
        return self.data[key]

    def put(self, key: str, value: bytes) -> None:
        self.data[key] = value
