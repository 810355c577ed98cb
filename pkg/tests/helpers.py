"""Shared fixtures and independent checks used across the test modules."""

from __future__ import annotations

import functools
import json
from typing import Iterable, Mapping, Optional

from bpmnchain.bpmn_ir import Dag
from bpmnchain.contractgen import ContractPackage
from bpmnchain.errors import BpmnChainError
from bpmnchain.pipeline import Compiled, data_path, fixture, fixture_package, load_layout, package
from bpmnchain.runtime import Faults, Instance, Reject, TokenGame, deploy_fresh, load_trace
from bpmnchain.runtime.workspace import META_PREFIX, WS_PREFIX

USE_CASES = ("supply_chain", "order_process", "trade")
HYBRID = {"supply_chain": "supply_hybrid", "order_process": "order_hybrid", "trade": "trade_hybrid"}

TWIN_REGION_EDGES = [
    ("Sen", "V11"), ("Sen", "V11"), ("V11", "V12"), ("V12", "Sex"), ("Sen", "V21"), ("V21", "Sex"),
    ("Sen", "V31"), ("V31", "V32"), ("V32", "V33"), ("V33", "Sex"),
]


@functools.lru_cache(maxsize=None)
def compiled(name: str) -> Compiled:
    return fixture(name)


@functools.lru_cache(maxsize=None)
def game(name: str) -> TokenGame:
    c = compiled(name)
    return TokenGame(c.model, c.dag)


@functools.lru_cache(maxsize=None)
def _pkg_json(name: str, selection: str, layout: Optional[str]) -> str:
    lay = load_layout(data_path(layout)) if layout else None
    c = compiled(name)
    sel = json.loads(selection) if selection.startswith("{") else \
        json.loads(data_path("selections", f"{selection}.json").read_text())
    return package(c, sel, lay, name).to_json()


def pkg(name: str, selection="empty", layout: Optional[str] = None) -> ContractPackage:
    """Fresh package (safe to mutate). ``selection`` is a shipped name or a dict."""
    key = selection if isinstance(selection, str) else json.dumps(selection, sort_keys=True)
    return ContractPackage.from_dict(json.loads(_pkg_json(name, key, layout)))


def trace(name: str) -> list:
    return load_trace(data_path("traces", f"{name}.jsonl"))


def deploy(name: str, selection="empty", faults: Optional[Faults] = None, layout: Optional[str] = None,
           seed: int = 0) -> Instance:
    p = pkg(name, selection, layout)
    lay = load_layout(data_path(layout)) if layout else None
    return deploy_fresh(p, faults=faults, seed=seed, layout=lay)


def twin_region_dag() -> Dag:
    return Dag.from_edges(TWIN_REGION_EDGES)


def app_keys(snapshot: Mapping[str, bytes]) -> dict:
    return {k: v for k, v in snapshot.items() if not k.startswith((WS_PREFIX, META_PREFIX))}


def exhaustive_mismatches(g: TokenGame, base: Instance, max_len: int) -> tuple:
    """Compare runtime verdicts with the token game on every trace up to
    ``max_len`` (every accepted prefix and each one-symbol extension).

    An instance is cloned only when the oracle accepts a symbol; rejected
    symbols are tried on the shared instance, whose failed calls roll back.
    Returns ``(cases, mismatches)``.
    """
    alphabet = g.alphabet()
    frontier = [((), g.initial(), base)]
    cases, bad = 0, []
    while frontier:
        nxt = []
        for prefix, st, inst in frontier:
            cases += 1
            if inst.is_terminal() != g.accepting(st):
                bad.append((list(prefix), "terminal"))
            if len(prefix) >= max_len:
                continue
            for sym in alphabet:
                try:
                    st2 = g.apply(st, sym)
                except Reject:
                    cases += 1
                    inst.step_index = len(prefix)
                    try:
                        inst.invoke_api(sym["actor"], sym["call"], sym["payload"])
                    except BpmnChainError:
                        continue
                    bad.append((list(prefix) + [sym], "accepted"))
                    inst = _replay(base, prefix)
                    continue
                inst2 = inst.clone()
                inst2.step_index = len(prefix)
                try:
                    inst2.invoke_api(sym["actor"], sym["call"], sym["payload"])
                except BpmnChainError as exc:
                    cases += 1
                    bad.append((list(prefix) + [sym], f"rejected: {exc}"))
                    continue
                nxt.append((prefix + (sym,), st2, inst2))
        frontier = nxt
    return cases, bad


def _replay(base: Instance, prefix: Iterable[Mapping]) -> Instance:
    inst = base.clone()
    for i, e in enumerate(prefix):
        inst.step_index = i
        inst.invoke_api(e["actor"], e["call"], e["payload"])
    return inst
