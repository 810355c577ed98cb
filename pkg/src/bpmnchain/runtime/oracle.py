"""Reference language of a process model as a token game over its flow DAG.

This deliberately shares nothing with the FSM construction: tokens sit on
edges, vertices fire when their inputs allow it, and message edges wait for
the matching API call from the receiving pool. It decides trace membership,
enumerates short traces exhaustively and generates conforming walks and
single-mutation negatives.
"""

from __future__ import annotations

import copy
import itertools
import random
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

from .. import guards as G
from ..bpmn_ir import BpmnModel, Dag
from ..errors import BpmnChainError
from ..ledger_sim import OffchainStore
from ..scripts import DictStore, encode_value, run_script

MUTATIONS = ("swap", "drop", "duplicate", "wrong-actor")


class Reject(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class GameState:
    marks: dict = field(default_factory=dict)  # sequence edge -> payload
    offered: dict = field(default_factory=dict)  # message flow id -> (edge, payload)
    fired: dict = field(default_factory=dict)  # vertex -> times fired
    dead: set = field(default_factory=set)  # edges that can no longer carry a token
    used: set = field(default_factory=set)  # edges whose token was consumed
    store: DictStore = field(default_factory=DictStore)


class TokenGame:
    def __init__(self, bpmn: BpmnModel, dag: Dag):
        self.bpmn = bpmn
        self.dag = dag
        self.flow_edge = {info.flow: e for e, info in dag.info.items()}
        self.messages = sorted(f.id for f in bpmn.flows if f.kind == "message" and f.id in self.flow_edge)
        self.rank = {v: i for i, v in enumerate(dag.topological_order())}
        self.offchain = OffchainStore()

    # -- helpers
    def receiver(self, flow: str) -> str:
        return self.dag.vertex(self.flow_edge[flow][1]).pool

    def schema(self, flow: str):
        f = next(x for x in self.bpmn.flows if x.id == flow)
        return self.bpmn.schemas.get(f.payload_schema) if f.payload_schema else None

    def payloads(self, flow: str) -> list:
        sch = self.schema(flow)
        if sch is None or not sch.fields:
            return [{}]
        names = sorted(sch.fields)
        options = []
        for n in names:
            spec = sch.fields[n]
            dom = list(spec.domain)
            if not dom:
                dom = {"bool": [True, False], "int": [0], "float": [0.0], "str": [""]}.get(spec.type, [None])
            options.append(dom)
        return [dict(zip(names, combo)) for combo in itertools.product(*options)]

    def alphabet(self) -> list:
        """Every (actor, call, payload) an API client could send."""
        out = []
        for flow in self.messages:
            for p in self.payloads(flow):
                for actor in self.bpmn.actors:
                    out.append({"actor": actor, "call": flow, "payload": p})
        return out

    # -- the game
    def initial(self) -> GameState:
        st = GameState(store=DictStore({k: encode_value(v) for k, v in self.bpmn.genesis.items()}))
        (src,) = self.dag.sources()
        self._fire(st, src, {})
        self._propagate(st)
        return st

    def _edge_alive(self, st: GameState, e: tuple) -> bool:
        return e not in st.dead and e not in st.used

    def _fire(self, st: GameState, v: str, payload: dict) -> None:
        dag = self.dag
        st.fired[v] = st.fired.get(v, 0) + 1
        vert = dag.vertex(v)
        if vert.kind in ("task", "subprocess"):
            ref = self.bpmn.task_bindings.get(v)
            ops = self.bpmn.scripts.get(ref, []) if ref else []
            if ops:
                try:
                    payload = run_script(ops, payload, st.store, self.offchain)
                except BpmnChainError as exc:
                    raise Reject(f"task {v} failed: {exc}") from None
        outs = [(v, w) for w in dag.succ[v]]
        if len(outs) > 1:
            chosen = []
            for e in outs:
                info = dag.info[e]
                g = info.guard if info.guard is not None else G.TRUE
                try:
                    if G.evaluate(g, payload):
                        chosen.append(e)
                except BpmnChainError as exc:
                    raise Reject(str(exc)) from None
            if vert.kind == "exclusive-gateway" and len(chosen) != 1:
                raise Reject(f"{len(chosen)} branches enabled at exclusive gateway {v}")
            if not chosen:
                raise Reject(f"no branch enabled at {v}")
        else:
            chosen = outs
        for e in outs:
            if e in chosen:
                info = dag.info[e]
                if info.kind == "message":
                    st.offered[info.flow] = (e, dict(payload))
                else:
                    st.marks[e] = dict(payload)
            else:
                st.dead.add(e)

    def _vertex_dead(self, st: GameState, v: str) -> bool:
        ins = [(p, v) for p in self.dag.pred[v]]
        return bool(ins) and all(e in st.dead for e in ins)

    def _propagate(self, st: GameState) -> None:
        dag = self.dag
        while True:
            # spread deadness: an unfired vertex whose inputs are all dead kills its outputs
            changed = True
            while changed:
                changed = False
                for v in dag.ids:
                    if not st.fired.get(v) and self._vertex_dead(st, v):
                        for w in dag.succ[v]:
                            if (v, w) not in st.dead:
                                st.dead.add((v, w))
                                changed = True
            ready = []
            for v in sorted(dag.ids, key=lambda x: (self.rank[x], x)):
                ins = [(p, v) for p in dag.pred[v]]
                marked = [e for e in ins if e in st.marks]
                if not marked:
                    continue
                if len(ins) == 1 or dag.vertex(v).kind == "exclusive-gateway":
                    ready.append((v, [marked[0]]))
                    break
                # OR-join: wait while another input can still receive a token
                if all(e in st.marks or not self._edge_alive(st, e) for e in ins):
                    ready.append((v, sorted(marked)))
                    break
            if not ready:
                return
            v, consumed = ready[0]
            payload: dict = {}
            for e in consumed:
                payload.update(st.marks.pop(e))
                st.used.add(e)
            self._fire(st, v, payload)

    def apply(self, st: GameState, entry: Mapping) -> GameState:
        """Return the successor state or raise :class:`Reject`."""
        call, actor, payload = entry["call"], entry["actor"], dict(entry.get("payload", {}))
        if call not in self.flow_edge or self.dag.info[self.flow_edge[call]].kind != "message":
            raise Reject(f"unknown call {call}")
        if actor not in self.bpmn.actors:
            raise Reject(f"unknown actor {actor}")
        if actor != self.receiver(call):
            raise Reject(f"{call} belongs to {self.receiver(call)}")
        if call not in st.offered:
            raise Reject(f"{call} not offered")
        sch = self.schema(call)
        if sch is not None and sch.validate(payload):
            raise Reject(f"{call}: bad payload")
        nxt = copy.deepcopy(st)
        e, offered = nxt.offered.pop(call)
        nxt.marks[e] = {**offered, **payload}
        self._propagate(nxt)
        return nxt

    def accepting(self, st: GameState) -> bool:
        return not st.marks and not st.offered

    def run(self, trace: Sequence[Mapping]) -> tuple:
        """(accepted, first offending position or None, reason)."""
        try:
            st = self.initial()
        except Reject as exc:
            return False, 0, exc.reason
        for i, e in enumerate(trace):
            try:
                st = self.apply(st, e)
            except Reject as exc:
                return False, i, exc.reason
        if not self.accepting(st):
            return False, len(trace), "incomplete"
        return True, None, ""

    def final_store(self, trace: Sequence[Mapping]) -> dict:
        st = self.initial()
        for e in trace:
            st = self.apply(st, e)
        return dict(st.store.data)

    def enabled(self, st: GameState) -> list:
        out = []
        for flow in sorted(st.offered):
            for p in self.payloads(flow):
                out.append({"actor": self.receiver(flow), "call": flow, "payload": p})
        return out


# ---------------------------------------------------------------- generation


def enumerate_cases(game: TokenGame, max_len: int = 14) -> Iterator[tuple]:
    """Yield ``(trace, accepted)`` covering every trace up to ``max_len``.

    Rejection is prefix-closed, so it suffices to visit every accepted
    prefix and every one-symbol extension of it over the full alphabet.
    """
    alphabet = game.alphabet()
    frontier = [((), game.initial())]
    while frontier:
        nxt = []
        for prefix, st in frontier:
            yield list(prefix), game.accepting(st)
            if len(prefix) >= max_len:
                continue
            for sym in alphabet:
                try:
                    st2 = game.apply(st, sym)
                except Reject:
                    yield list(prefix) + [sym], False
                    continue
                nxt.append((prefix + (sym,), st2))
        frontier = nxt


def random_walk(game: TokenGame, rng: random.Random, max_len: int = 64, tries: int = 50) -> list:
    for _ in range(tries):
        st = game.initial()
        trace = []
        while not game.accepting(st) and len(trace) < max_len:
            options = game.enabled(st)
            rng.shuffle(options)
            for sym in options:
                try:
                    st = game.apply(st, sym)
                except Reject:
                    continue
                trace.append(sym)
                break
            else:
                break
        if game.accepting(st):
            return trace
    raise RuntimeError("no conforming walk found")


def mutate(trace: Sequence[Mapping], rng: random.Random, kind: str, actors: Sequence[str]) -> Optional[list]:
    t = [dict(e) for e in trace]
    if not t:
        return None
    if kind == "swap":
        if len(t) < 2:
            return None
        i = rng.randrange(len(t) - 1)
        t[i], t[i + 1] = t[i + 1], t[i]
    elif kind == "drop":
        del t[rng.randrange(len(t))]
    elif kind == "duplicate":
        i = rng.randrange(len(t))
        t.insert(i + 1, dict(t[i]))
    elif kind == "wrong-actor":
        i = rng.randrange(len(t))
        others = [a for a in actors if a != t[i]["actor"]]
        if not others:
            return None
        t[i]["actor"] = rng.choice(others)
    else:
        raise ValueError(kind)
    return t


def generate_cases(game: TokenGame, n_pos: int, n_neg: int, seed: int = 0) -> tuple:
    """``n_pos`` conforming walks and ``n_neg`` mutants the oracle rejects."""
    rng = random.Random(seed)
    positives = [random_walk(game, rng) for _ in range(n_pos)]
    negatives = []
    attempts = 0
    while len(negatives) < n_neg and positives:
        attempts += 1
        if attempts > 200 * max(n_neg, 1):
            raise RuntimeError("could not produce enough rejected mutants")
        base = positives[rng.randrange(len(positives))]
        kind = MUTATIONS[len(negatives) % len(MUTATIONS)]
        m = mutate(base, rng, kind, game.bpmn.actors)
        if m is None or game.run(m)[0]:
            continue
        negatives.append((kind, m))
    return positives, negatives
