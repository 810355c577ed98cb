"""DE-HSM construction: one sub-model of FSMs per LSI block, wired together.

Triggers are strings. A flow id triggers the transition that consumes that
flow, ``"start"`` fires the block holding the start vertex, and
``"done:<fsm>"`` reports a finished concurrent stream to its control FSM.
The start vertex is represented by the root state and an end vertex by the
terminal state, so the chain Start -> A -> End becomes root -> A -> terminal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from . import guards as G
from .bpmn_ir import AnnotationConfig, Dag
from .errors import GuardMissing, InterconnectLoop, NotLsi, OrphanSubmodel
from .graph_analysis import LsiDecomposition, SeseSubgraph, admissible_block, closed_fork

ACTION_KINDS = ("invoke-task", "enqueue-event", "respond", "raise-signal", "invoke-method")


@dataclass(frozen=True)
class OutputAction:
    kind: str
    task: Optional[str] = None
    target: Optional[str] = None  # fsm id for enqueue-event / invoke-method
    trigger: Optional[str] = None
    guard: Optional[G.GuardExpr] = None  # conditional emission at inclusive forks
    signal: Optional[str] = None
    method: Optional[str] = None
    payload: Optional[dict] = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        for name in ("task", "target", "trigger", "signal", "method", "payload"):
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        if self.guard is not None:
            d["guard"] = G.format_guard(self.guard)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OutputAction":
        return cls(d["kind"], d.get("task"), d.get("target"), d.get("trigger"),
                   G.parse_guard(d["guard"]) if "guard" in d else None,
                   d.get("signal"), d.get("method"), d.get("payload"))


@dataclass(frozen=True)
class State:
    id: str
    kind: str  # root | dispatch | activity | terminal
    vertex: Optional[str] = None
    task: Optional[str] = None
    exclusive_guards: tuple = ()  # guards that must select exactly one branch here

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind}
        if self.vertex:
            d["vertex"] = self.vertex
        if self.task:
            d["task"] = self.task
        if self.exclusive_guards:
            d["exclusiveGuards"] = [G.format_guard(g) for g in self.exclusive_guards]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "State":
        return cls(d["id"], d["kind"], d.get("vertex"), d.get("task"),
                   tuple(G.parse_guard(x) for x in d.get("exclusiveGuards", ())))


@dataclass(frozen=True)
class Transition:
    src: str
    dst: str
    trigger: Optional[str] = None  # None = immediate
    guard: Optional[G.GuardExpr] = None
    actions: tuple = ()
    join: bool = False  # fires once every enabled stream reported done

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"from": self.src, "to": self.dst}
        if self.trigger is not None:
            d["trigger"] = self.trigger
        if self.guard is not None:
            d["guard"] = G.format_guard(self.guard)
        if self.join:
            d["join"] = True
        d["actions"] = [a.to_dict() for a in self.actions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Transition":
        return cls(d["from"], d["to"], d.get("trigger"),
                   G.parse_guard(d["guard"]) if "guard" in d else None,
                   tuple(OutputAction.from_dict(a) for a in d.get("actions", ())), d.get("join", False))


@dataclass
class Fsm:
    id: str
    submodel: str
    role: str  # main | control | stream
    states: list
    transitions: list
    absorb: tuple = ()  # triggers swallowed once terminal (late merge tokens)

    def state(self, sid: str) -> State:
        for s in self.states:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def outgoing(self, sid: str) -> list:
        return [t for t in self.transitions if t.src == sid]

    def triggers(self) -> set:
        return {t.trigger for t in self.transitions if t.trigger is not None}

    def vertices(self) -> list:
        return [s.vertex for s in self.states if s.vertex]

    def check(self) -> None:
        roots = [s for s in self.states if s.kind == "root"]
        if len(roots) != 1:
            raise NotLsi(f"{self.id}: expected one root state, found {len(roots)}")
        seen = {roots[0].id}
        stack = [roots[0].id]
        while stack:
            cur = stack.pop()
            for t in self.outgoing(cur):
                if t.dst not in seen:
                    seen.add(t.dst)
                    stack.append(t.dst)
        unreachable = {s.id for s in self.states} - seen
        if unreachable:
            raise NotLsi(f"{self.id}: unreachable states {sorted(unreachable)}")
        for s in self.states:
            if s.kind == "terminal" and self.outgoing(s.id):
                raise NotLsi(f"{self.id}: terminal state {s.id} has outgoing transitions")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "submodel": self.submodel,
            "role": self.role,
            "states": [s.to_dict() for s in self.states],
            "transitions": [t.to_dict() for t in self.transitions],
            "absorb": list(self.absorb),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Fsm":
        return cls(d["id"], d["submodel"], d["role"], [State.from_dict(s) for s in d["states"]],
                   [Transition.from_dict(t) for t in d["transitions"]], tuple(d.get("absorb", ())))


@dataclass
class DeFsmSubmodel:
    subgraph: str
    topology: str  # plain | exclusive | inclusive
    fsms: list
    entry_binding: dict
    exit_binding: dict
    members: tuple = ()

    def to_dict(self) -> dict:
        return {
            "subgraph": self.subgraph,
            "topology": self.topology,
            "members": list(self.members),
            "entryBinding": self.entry_binding,
            "exitBinding": self.exit_binding,
            "fsms": [f.to_dict() for f in self.fsms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeFsmSubmodel":
        return cls(d["subgraph"], d["topology"], [Fsm.from_dict(f) for f in d["fsms"]],
                   d["entryBinding"], d["exitBinding"], tuple(d.get("members", ())))


@dataclass
class DeHsmModel:
    submodels: list
    interconnect: list  # dicts: from, to, flow, payloadSchema
    start_submodel: str
    start_fsm: str
    routing: dict = field(default_factory=dict)  # trigger -> fsm id

    def fsms(self) -> list:
        return [f for sm in self.submodels for f in sm.fsms]

    def fsm(self, fid: str) -> Fsm:
        for f in self.fsms():
            if f.id == fid:
                return f
        raise KeyError(fid)

    def submodel(self, sid: str) -> DeFsmSubmodel:
        for sm in self.submodels:
            if sm.subgraph == sid:
                return sm
        raise KeyError(sid)

    def to_dict(self) -> dict:
        return {
            "startSubmodel": self.start_submodel,
            "startFsm": self.start_fsm,
            "interconnect": self.interconnect,
            "routing": dict(sorted(self.routing.items())),
            "submodels": [sm.to_dict() for sm in self.submodels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeHsmModel":
        return cls([DeFsmSubmodel.from_dict(s) for s in d["submodels"]], list(d["interconnect"]),
                   d["startSubmodel"], d["startFsm"], dict(d.get("routing", {})))

    def to_dot(self) -> str:
        lines = ["digraph dehsm {", "  compound=true;", "  node [shape=box, fontsize=10];"]
        for sm in self.submodels:
            lines.append(f"  subgraph {json.dumps('cluster_' + sm.subgraph)} {{")
            lines.append(f"    label={json.dumps(sm.subgraph + ' (' + sm.topology + ')')};")
            for f in sm.fsms:
                for s in f.states:
                    nid = json.dumps(f"{f.id}/{s.id}")
                    shape = {"root": "circle", "terminal": "doublecircle", "dispatch": "diamond"}.get(s.kind, "box")
                    lines.append(f"    {nid} [label={json.dumps(s.vertex or s.id)}, shape={shape}];")
                for t in f.transitions:
                    label = t.trigger or ("join" if t.join else (G.format_guard(t.guard) if t.guard else ""))
                    lines.append(f"    {json.dumps(f'{f.id}/{t.src}')} -> {json.dumps(f'{f.id}/{t.dst}')}"
                                 f" [label={json.dumps(label)}];")
            lines.append("  }")
        for ic in self.interconnect:
            lines.append(f"  {json.dumps(ic['from'] + '/terminal')} -> {json.dumps(ic['to'] + '/root')}"
                         f" [style=dashed, label={json.dumps(ic['flow'])}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- construction


class _Builder:
    def __init__(self, sub: SeseSubgraph, dag: Dag, guards: dict):
        self.sub = sub
        self.dag = dag
        self.guards = guards
        self.members = sub.members

    def is_start(self, v: str) -> bool:
        return not self.dag.pred[v]

    def is_end(self, v: str) -> bool:
        return not self.dag.succ[v]

    def sid(self, v: str) -> str:
        if self.is_end(v) and v in self.members and len(self.members) > 1:
            return "terminal"
        return f"v:{v}"

    def emission(self, v: str, w: str, owner: str, inside: set) -> OutputAction:
        info = self.dag.info[(v, w)]
        if info.kind == "message":
            return OutputAction("raise-signal", signal=f"offer:{info.flow}", trigger=info.flow)
        target = owner if w in inside else None
        return OutputAction("enqueue-event", target=target, trigger=info.flow)

    def enter(self, v: str, owner: str, inside: set) -> tuple:
        """Actions on entering ``v``: run its task, then emit its out-edges."""
        acts = []
        if self.dag.vertex(v).kind in ("task", "subprocess"):
            acts.append(OutputAction("invoke-task", task=v))
        for w in self.dag.succ[v]:
            acts.append(self.emission(v, w, owner, inside))
        return tuple(acts)

    def guard(self, v: str, w: str) -> G.GuardExpr:
        info = self.dag.info[(v, w)]
        g = info.guard if info.guard is not None else self.guards.get(info.flow)
        if g is None and not self.dag.vertex(v).kind.endswith("gateway"):
            g = G.TRUE  # implicit parallel split
        if g is None:
            raise GuardMissing(f"fork edge {info.flow} ({v} -> {w}) has no guard", edge=info.flow)
        return g

    def state_for(self, v: str) -> State:
        kind = self.dag.vertex(v).kind
        return State(f"v:{v}", "activity", v, v if kind in ("task", "subprocess") else None)

    # -- plain chains and non-fork singletons
    def plain(self, fid: str) -> Fsm:
        dag, members = self.dag, self.members
        states = [State("root", "root")]
        trans: list[Transition] = []
        order = [v for v in dag.topological_order() if v in members]
        inside = set(members)
        absorb: list[str] = []
        for v in order:
            if self.is_start(v):
                continue
            is_end = self.is_end(v)
            dst = "terminal" if is_end else f"v:{v}"
            if not is_end:
                states.append(self.state_for(v))
            acts = () if is_end else self.enter(v, fid, inside)
            preds = dag.pred[v]
            internal_preds = [p for p in preds if p in members]
            if internal_preds:
                for p in internal_preds:
                    src = "root" if self.is_start(p) else f"v:{p}"
                    trig = "start" if self.is_start(p) else dag.info[(p, v)].flow
                    trans.append(Transition(src, dst, trig, None, acts))
            else:
                trigs = [dag.info[(p, v)].flow for p in preds]
                for t in trigs:
                    trans.append(Transition("root", dst, t, None, acts))
                absorb.extend(trigs if len(trigs) > 1 else [])
        for v in order:
            if v == self.sub.exit or (self.sub.exit is None and not self.is_end(v)
                                      and not any(w in members for w in dag.succ[v])):
                if not self.is_end(v) and not self.is_start(v):
                    trans.append(Transition(f"v:{v}", "terminal"))
        if len(members) == 1:
            (v,) = members
            if self.is_start(v):
                # start vertex alone: fire its emissions on the start trigger
                trans.append(Transition("root", "terminal", "start", None, self.enter(v, fid, set())))
        states.append(State("terminal", "terminal"))
        return Fsm(fid, self.sub.id, "main", states, trans, tuple(absorb))

    # -- exclusive fork entry
    def exclusive(self, fid: str, u: str) -> Fsm:
        dag, members = self.dag, self.members
        inside = set(members)
        states = [State("root", "root")]
        trans: list[Transition] = []
        absorb: list[str] = []
        out_edges = sorted(dag.succ[u], key=lambda w: dag.info[(u, w)].flow)
        guards = [self.guard(u, w) for w in out_edges]
        if self.is_start(u):
            # the start vertex fires on "start" and dispatches from its own state
            head = "d:0"
            states.append(State("d:0", "dispatch", u, None, tuple(guards)))
            trans.append(Transition("root", "d:0", "start"))
        else:
            head = f"v:{u}"
            base = self.state_for(u)
            states.append(State(base.id, base.kind, base.vertex, base.task, tuple(guards)))
            acts = (OutputAction("invoke-task", task=u),) if dag.vertex(u).kind in ("task", "subprocess") else ()
            trigs = [dag.info[(p, u)].flow for p in dag.pred[u]]
            for t in trigs:
                trans.append(Transition("root", head, t, None, acts))
            absorb.extend(trigs if len(trigs) > 1 else [])
        counter = [0]

        def leaf(src: str, w: str):
            g = self.guard(u, w)
            if w in inside:
                dst = self.sid(w)
                acts = () if self.is_end(w) else self.enter(w, fid, inside)
            else:
                dst = "terminal"
                acts = (self.emission(u, w, fid, inside),)
            trans.append(Transition(src, dst, None, g, acts))

        def attach(src: str, ws: list):
            if len(ws) == 1:
                leaf(src, ws[0])
                return
            half = (len(ws) + 1) // 2
            for part in (ws[:half], ws[half:]):
                if len(part) == 1:
                    leaf(src, part[0])
                    continue
                counter[0] += 1
                did = f"d:{counter[0]}"
                states.append(State(did, "dispatch"))
                gs = [self.guard(u, w) for w in part]
                trans.append(Transition(src, did, None, G.Or(tuple(gs))))
                attach(did, part)

        attach(head, out_edges)
        self._branches(fid, u, inside, states, trans)
        states.append(State("terminal", "terminal"))
        return Fsm(fid, self.sub.id, "main", states, trans, tuple(absorb))

    def _branches(self, fid: str, u: str, inside: set, states: list, trans: list, only: Optional[list] = None):
        """Chain states from the fork's successors down to the exit merge."""
        dag = self.dag
        if len(self.members) == 1:
            return
        found = closed_fork(dag, u)
        if not found:
            raise NotLsi(f"{self.sub.id}: fork {u} does not close inside the block")
        w, paths = found
        if not self.is_end(w):
            states.append(self.state_for(w))
            trans.append(Transition(f"v:{w}", "terminal"))
        seen = set()
        for path in paths:
            for i, v in enumerate(path):
                if v in seen:
                    continue
                seen.add(v)
                states.append(self.state_for(v))
                nxt = path[i + 1] if i + 1 < len(path) else w
                acts = () if self.is_end(nxt) else self.enter(nxt, fid, inside)
                trans.append(Transition(f"v:{v}", self.sid(nxt), dag.info[(v, nxt)].flow, None, acts))

    # -- inclusive fork entry: control FSM plus one FSM per stream
    def inclusive(self, fid: str, u: str) -> list:
        dag, members = self.dag, self.members
        ctl = f"{fid}.ctl"
        out_edges = sorted(dag.succ[u], key=lambda w: dag.info[(u, w)].flow)
        closed = closed_fork(dag, u) if len(members) > 1 else None
        w, paths = closed if closed else (None, [])
        stream_of = {}
        for i, first in enumerate(out_edges):
            if closed:
                stream_of[first] = f"{fid}.s{i + 1}"
        states = [State("root", "root")]
        trans: list[Transition] = []
        absorb: list[str] = []
        emits = []
        if dag.vertex(u).kind in ("task", "subprocess"):
            emits.append(OutputAction("invoke-task", task=u))
        for x in out_edges:
            info = dag.info[(u, x)]
            g = self.guard(u, x) if info.kind == "sequence" else G.TRUE
            if info.kind == "message":
                emits.append(OutputAction("raise-signal", signal=f"offer:{info.flow}", trigger=info.flow, guard=g))
            else:
                emits.append(OutputAction("enqueue-event", target=stream_of.get(x), trigger=info.flow, guard=g))
        if self.is_start(u):
            trans.append(Transition("root", "v:fork", "start", None, tuple(emits)))
            states.append(State("v:fork", "dispatch", u))
            head = "v:fork"
        else:
            head = f"v:{u}"
            states.append(self.state_for(u))
            trigs = [dag.info[(p, u)].flow for p in dag.pred[u]]
            for t in trigs:
                trans.append(Transition("root", head, t, None, tuple(emits)))
            absorb.extend(trigs if len(trigs) > 1 else [])
        fsms = []
        if closed:
            states.append(State("wait", "dispatch"))
            trans.append(Transition(head, "wait"))
            for x in out_edges:
                trans.append(Transition("wait", "wait", f"done:{stream_of[x]}"))
            inside = set(members)
            if self.is_end(w):
                trans.append(Transition("wait", "terminal", None, None, (), join=True))
            else:
                states.append(self.state_for(w))
                trans.append(Transition("wait", f"v:{w}", None, None, self.enter(w, ctl, inside), join=True))
                trans.append(Transition(f"v:{w}", "terminal"))
            for x, path in zip(out_edges, paths_for(dag, u, w, out_edges)):
                sfid = stream_of[x]
                s_states = [State("root", "root")]
                s_trans: list[Transition] = []
                done = OutputAction("enqueue-event", target=ctl, trigger=f"done:{sfid}")
                prev, prev_state = u, "root"
                for v in path:
                    s_states.append(self.state_for(v))
                    acts = self.enter(v, sfid, set(path) | {w})
                    s_trans.append(Transition(prev_state, f"v:{v}", dag.info[(prev, v)].flow, None, acts))
                    prev, prev_state = v, f"v:{v}"
                s_trans.append(Transition(prev_state, "terminal", dag.info[(prev, w)].flow, None, (done,)))
                s_states.append(State("terminal", "terminal"))
                fsms.append(Fsm(sfid, self.sub.id, "stream", s_states, s_trans))
        else:
            trans.append(Transition(head, "terminal"))
        states.append(State("terminal", "terminal"))
        control = Fsm(ctl, self.sub.id, "control", states, trans, tuple(absorb))
        return [control, *fsms]


def paths_for(dag: Dag, u: str, w: str, firsts: Sequence[str]) -> list:
    out = []
    for first in firsts:
        path = []
        v = first
        while v != w:
            path.append(v)
            v = dag.succ[v][0]
        out.append(path)
    return out


def _fork_kind(dag: Dag, u: str) -> Optional[str]:
    v = dag.vertex(u)
    if v.out_degree < 2:
        return None
    return "exclusive" if v.kind == "exclusive-gateway" else "inclusive"


def build_submodel(sub: SeseSubgraph, dag: Dag, annotations: Optional[AnnotationConfig] = None) -> DeFsmSubmodel:
    if admissible_block(dag, frozenset(sub.members)) is None:
        raise NotLsi(f"{sub.id} is not an LSI block of the graph")
    guards = {}
    if annotations is not None:
        guards = {k: G.parse_guard(v) for k, v in annotations.guards.items()}
    b = _Builder(sub, dag, guards)
    members = frozenset(sub.members)
    # the fork vertex, if any, is the block's first vertex
    head = sub.entry
    if head is None:
        head = next(v for v in members if not dag.pred[v])
    kind = _fork_kind(dag, head)
    if kind == "exclusive":
        fsms = [b.exclusive(sub.id, head)]
    elif kind == "inclusive":
        fsms = b.inclusive(sub.id, head)
    else:
        kind = "plain"
        fsms = [b.plain(sub.id)]
    for f in fsms:
        f.check()
    main = fsms[0].id
    entry_trigs = sorted(t.trigger for t in fsms[0].outgoing("root") if t.trigger)
    out_flows = []
    if sub.exit is not None:
        out_flows = sorted(dag.info[(sub.exit, w)].flow for w in dag.succ[sub.exit] if w not in members)
    order = [v for v in dag.topological_order() if v in members]
    return DeFsmSubmodel(
        subgraph=sub.id,
        topology=kind,
        fsms=fsms,
        entry_binding={"vertex": sub.entry, "fsm": main, "triggers": entry_trigs},
        exit_binding={"vertex": sub.exit, "fsm": main, "flows": out_flows},
        members=tuple(order),
    )


def assemble_dehsm(decomp: LsiDecomposition, submodels: Sequence[DeFsmSubmodel], dag: Optional[Dag] = None) -> DeHsmModel:
    by_sub = {sm.subgraph: sm for sm in submodels}
    for s in decomp.subgraphs:
        if s.id not in by_sub:
            raise OrphanSubmodel(f"no submodel for {s.id}", subgraph=s.id)
    for sid in by_sub:
        if sid not in decomp.by_id():
            raise OrphanSubmodel(f"submodel {sid} matches no subgraph", subgraph=sid)

    routing: dict[str, str] = {}
    for sm in submodels:
        for f in sm.fsms:
            for t in f.triggers():
                if t in routing and routing[t] != f.id:
                    raise InterconnectLoop(f"trigger {t} consumed by {routing[t]} and {f.id}")
                routing[t] = f.id

    def resolve(a: OutputAction) -> OutputAction:
        if a.kind == "enqueue-event" and a.target is None:
            if a.trigger not in routing:
                raise OrphanSubmodel(f"no FSM consumes {a.trigger}")
            return OutputAction(a.kind, a.task, routing[a.trigger], a.trigger, a.guard, a.signal, a.method, a.payload)
        return a

    for sm in submodels:
        for f in sm.fsms:
            f.transitions = [Transition(t.src, t.dst, t.trigger, t.guard, tuple(resolve(a) for a in t.actions), t.join)
                             for t in f.transitions]

    block_of = decomp.block_of()
    index = {s.id: i for i, s in enumerate(decomp.subgraphs)}
    interconnect = []
    for (a, b) in sorted(decomp.interconnect, key=lambda e: (index[block_of[e[0]]], index[block_of[e[1]]], e)):
        info = dag.info[(a, b)] if dag is not None else None
        interconnect.append({
            "from": block_of[a],
            "to": block_of[b],
            "flow": info.flow if info else f"{a}->{b}",
            "payloadSchema": info.payload_schema if info else None,
        })
    # loop freedom over the submodel graph
    succ: dict[str, set] = {s: set() for s in by_sub}
    for ic in interconnect:
        succ[ic["from"]].add(ic["to"])
    indeg = {s: 0 for s in by_sub}
    for s in succ:
        for t in succ[s]:
            indeg[t] += 1
    ready = sorted(s for s, d in indeg.items() if d == 0)
    done = []
    while ready:
        s = ready.pop(0)
        done.append(s)
        for t in sorted(succ[s]):
            indeg[t] -= 1
            if indeg[t] == 0:
                ready.append(t)
    if len(done) != len(by_sub):
        raise InterconnectLoop("submodel interconnect contains a cycle",
                               submodels=sorted(set(by_sub) - set(done)))
    if "start" not in routing:
        raise OrphanSubmodel("no submodel reacts to the start trigger")
    start_fsm = routing["start"]
    start_sub = next(sm.subgraph for sm in submodels if any(f.id == start_fsm for f in sm.fsms))
    reach = {start_sub}
    stack = [start_sub]
    while stack:
        s = stack.pop()
        for t in succ[s]:
            if t not in reach:
                reach.add(t)
                stack.append(t)
    if reach != set(by_sub):
        raise OrphanSubmodel("submodels unreachable from the start", submodels=sorted(set(by_sub) - reach))
    return DeHsmModel(list(submodels), interconnect, start_sub, start_fsm, routing)


def build_dehsm(dag: Dag, decomp: LsiDecomposition, annotations: Optional[AnnotationConfig] = None) -> DeHsmModel:
    subs = [build_submodel(s, dag, annotations) for s in decomp.subgraphs]
    return assemble_dehsm(decomp, subs, dag)
