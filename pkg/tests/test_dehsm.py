from __future__ import annotations

import pytest

from bpmnchain import guards as G
from bpmnchain.bpmn_ir import AnnotationConfig, normalize, parse_bpmn, to_dag
from bpmnchain.dehsm import DeHsmModel, assemble_dehsm, build_dehsm, build_submodel
from bpmnchain.errors import InterconnectLoop, NotLsi, OrphanSubmodel
from bpmnchain.graph_analysis import LsiDecomposition, find_lsi_subgraphs

import helpers as H
from test_bpmn_ir import process, seq


def fork_model(kind: str, n: int, guards: dict | None = None):
    gw = f"{kind}Gateway"
    body = f'<startEvent id="S"/><{gw} id="F"/><{gw} id="J"/><endEvent id="E"/>' + seq("f0", "S", "F")
    for i in range(1, n + 1):
        body += f'<task id="T{i}"/>' + seq(f"a{i}", "F", f"T{i}") + seq(f"b{i}", f"T{i}", "J")
    body += seq("fe", "J", "E")
    ann = None
    if guards:
        ann = AnnotationConfig.from_dict({
            "payload_schemas": {"p": {"x": {"type": "int"}}},
            "flow_schemas": {f: "p" for f in guards},
            "guards": guards,
        })
    dag = to_dag(normalize(parse_bpmn(process(body)), ann))
    decomp = find_lsi_subgraphs(dag)
    return dag, decomp, build_dehsm(dag, decomp, ann)


def settle(fsm, state: str, payload: dict) -> str:
    """Follow immediate transitions whose guard holds; exactly one may be enabled at each step."""
    while True:
        ready = [t for t in fsm.outgoing(state) if t.trigger is None
                 and (t.guard is None or G.evaluate(t.guard, payload))]
        if not ready:
            return state
        assert len(ready) == 1, (state, ready)
        state = ready[0].dst


def test_exclusive_fork_builds_balanced_dispatch_tree():
    guards = {f"a{i}": f"x == {i}" for i in range(1, 5)}
    dag, decomp, m = fork_model("exclusive", 4, guards)
    sm = next(s for s in m.submodels if s.topology == "exclusive")
    assert len(sm.fsms) == 1
    fsm = sm.fsms[0]
    dispatch = [s for s in fsm.states if s.kind == "dispatch"]
    assert len(dispatch) == 2  # two inner nodes under the fork state
    head = fsm.outgoing("root")[0]
    assert head.trigger == "f0" and head.dst == "v:F"
    for i in range(1, 5):
        st = settle(fsm, "v:F", {"x": i})
        assert st == f"v:T{i}"
    assert settle(fsm, "v:F", {"x": 9}) == "v:F"  # no branch is enabled
    assert len(fsm.state("v:F").exclusive_guards) == 4


def test_inclusive_fork_has_control_and_one_stream_per_branch():
    dag, decomp, m = fork_model("parallel", 3)
    sm = next(s for s in m.submodels if s.topology == "inclusive")
    roles = [f.role for f in sm.fsms]
    assert roles == ["control", "stream", "stream", "stream"]
    ctl = sm.fsms[0]
    enq = [a for t in ctl.transitions for a in t.actions if a.kind == "enqueue-event"]
    assert sorted(a.target for a in enq if a.trigger.startswith("a")) == [f.id for f in sm.fsms[1:]]
    join = [t for t in ctl.transitions if t.join]
    assert len(join) == 1 and join[0].src == "wait"
    done = {t.trigger for t in ctl.outgoing("wait") if t.trigger}
    assert done == {f"done:{f.id}" for f in sm.fsms[1:]}
    for f in sm.fsms[1:]:
        last = [t for t in f.transitions if t.dst == "terminal"]
        assert [a.target for a in last[0].actions] == [ctl.id]


def test_plain_chain_is_one_fsm():
    c = H.compiled("minimal")
    m = c.dehsm
    assert len(m.submodels) == 1 and m.submodels[0].topology == "plain"
    fsm = m.submodels[0].fsms[0]
    assert fsm.outgoing("root")[0].trigger == "start"
    assert m.start_fsm == fsm.id
    kinds = [s.kind for s in fsm.states]
    assert kinds.count("root") == 1 and kinds.count("terminal") == 1


def test_supply_interconnect_is_a_chain():
    m = H.compiled("supply_chain").dehsm
    assert [(ic["from"], ic["to"]) for ic in m.interconnect] == [("S1", "S2"), ("S2", "S3"), ("S3", "S4")]
    assert [(sm.subgraph, sm.topology, len(sm.fsms)) for sm in m.submodels] == [
        ("S1", "plain", 1), ("S2", "inclusive", 3), ("S3", "inclusive", 3), ("S4", "plain", 1)]
    assert m.start_submodel == "S1"
    for ic in m.interconnect:
        tgt = m.submodel(ic["to"])
        assert ic["flow"] in tgt.entry_binding["triggers"]
        assert m.routing[ic["flow"]] == tgt.entry_binding["fsm"]
        assert ic["flow"] in m.submodel(ic["from"]).exit_binding["flows"]


@pytest.mark.parametrize("name", H.USE_CASES)
def test_every_enqueue_targets_the_consumer(name):
    m = H.compiled(name).dehsm
    for f in m.fsms():
        for t in f.transitions:
            for a in t.actions:
                if a.kind == "enqueue-event":
                    assert a.target == m.routing[a.trigger]
                    assert a.trigger in m.fsm(a.target).triggers()


@pytest.mark.parametrize("name", H.USE_CASES)
def test_round_trip(name):
    m = H.compiled(name).dehsm
    again = DeHsmModel.from_dict(m.to_dict())
    assert again.to_dict() == m.to_dict()
    assert "digraph" in m.to_dot()


def test_cyclic_interconnect_is_rejected():
    c = H.compiled("order_process")
    d = c.analysis.decomposition
    subs = [build_submodel(s, c.dag) for s in d.subgraphs]
    s1, s2 = d.by_id()["S1"], d.by_id()["S2"]
    back = (next(iter(s2.members)), next(iter(s1.members)))
    looped = LsiDecomposition(d.subgraphs, d.interconnect | {back})
    with pytest.raises(InterconnectLoop):
        assemble_dehsm(looped, subs)


def test_missing_and_foreign_submodels():
    c = H.compiled("order_process")
    d = c.analysis.decomposition
    subs = [build_submodel(s, c.dag) for s in d.subgraphs]
    with pytest.raises(OrphanSubmodel):
        assemble_dehsm(d, subs[:-1], c.dag)
    with pytest.raises(NotLsi):
        build_submodel(c.analysis.subgraph("S1").__class__(
            "X", None, None, frozenset(c.dag.ids), frozenset()), c.dag)


@pytest.mark.parametrize("name,depth", [("order_process", 10), ("supply_chain", 9)])
def test_language_matches_token_game(name, depth):
    cases, bad = H.exhaustive_mismatches(H.game(name), H.deploy(name), depth)
    assert cases > 50
    assert bad == []
