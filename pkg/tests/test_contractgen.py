from __future__ import annotations

import json
import random

import pytest

from bpmnchain.contractgen import (MAIN, ContractPackage, CostCalibration, check_independence, default_calibration,
                                   estimate_costs, mainchain_variant, plan_deployment, select_transactions)
from bpmnchain.errors import (IllegalNesting, IndependenceViolation, MissingCalibrationEntry, NoSuchSidechain,
                              OverlappingSelections, PackageCorrupt, UnknownSubgraph, ValidationError)
from bpmnchain.pipeline import package

import helpers as H

SIZES = (75, 512, 1024, 1875)
# reference processing costs in GWei per workspace mode and data size (KB)
COSTS = {
    "no-xa": (4545000, 31027200, 62054400, 113625000),
    "sc-all": (9090582, 62054982, 124109382, 227250582),
    "sc-2m": (9319500, 63621120, 124113000, 227254200),
    "sc-2s": (9405000, 64204800, 127242240, 232987500),
    "sc-2s-crypto": (18268952, 124706420, 249411188, 456684152),
}
TWO_PC = {2: (627820, 627400), 3: (671500, 671080), 4: (715180, 714760), 5: (758860, 758440), 6: (802540, 802120)}


@pytest.mark.parametrize("selection,count", [("supply_flat", 9), ("supply_nested", 10), ("empty", 5)])
def test_method_counts(selection, count):
    p = H.pkg("supply_chain", selection)
    assert len(p.methods) == count
    assert sum(m.owner_kind == "actor" for m in p.methods) == 5


def test_selection_errors():
    c = H.compiled("supply_chain")
    lat, dag = c.analysis.lattice, c.dag
    with pytest.raises(UnknownSubgraph):
        select_transactions(lat, {"transactions": [{"subgraph": "S99"}]}, dag)
    with pytest.raises(IllegalNesting):
        select_transactions(lat, {"transactions": [{"subgraph": "S1", "children": [{"subgraph": "S2"}]}]}, dag)
    with pytest.raises(IllegalNesting):
        select_transactions(lat, {"transactions": [{"subgraph": "S5", "children": [{"subgraph": "S5"}]}]}, dag)
    with pytest.raises(OverlappingSelections):
        select_transactions(lat, {"transactions": [{"subgraph": "S5"}, {"subgraph": "S1"}]}, dag)
    with pytest.raises(OverlappingSelections):
        select_transactions(lat, {"transactions": [{"subgraph": "S5"}, {"subgraph": "S8"}]}, dag)
    with pytest.raises(ValidationError):
        select_transactions(lat, {"transactions": [{"subgraph": "S1", "mode": "sc-9"}]}, dag)


def test_participants_are_pools_of_members():
    p = H.pkg("supply_chain", "supply_nested")
    dag = H.compiled("supply_chain").dag
    for e in p.plan.entries:
        assert list(e.participants) == sorted({dag.vertex(v).pool for v in e.members if dag.vertex(v).pool})
    s5 = p.plan.by_id()["tx:S5"]
    assert s5.children == ["tx:S1", "tx:S2"]
    assert p.plan.by_id()["tx:S1"].parent == "tx:S5"


def test_nested_deployment():
    p = H.pkg("supply_chain", "supply_nested")
    a = p.deployment["assignments"]
    for tx in ("tx:S5", "tx:S1", "tx:S2"):
        assert a[tx] == {"chain": "quorum-sim", "contract": "slave@quorum-sim"}
    assert a["tx:S3"] == {"chain": MAIN, "contract": "main"}
    assert a["tx:S4"] == {"chain": MAIN, "contract": "tx"}
    assert all(v["chain"] == MAIN for k, v in a.items() if k.startswith("actor:"))
    s5 = p.method("tx:S5")
    pats = [x["pattern"] for x in s5.augmentations]
    assert pats[:4] == ["begin-tx", "end-tx", "cache-rewrite", "access-check"]
    assert "2pc-coordinator" in pats and "2pc-participant" not in pats
    assert "2pc-participant" in [x["pattern"] for x in p.method("tx:S1").augmentations]


def test_sc_all_stays_on_main():
    p = H.pkg("supply_chain", "supply_flat")
    assert {v["chain"] for v in p.deployment["assignments"].values()} == {MAIN}


def test_missing_sidechain():
    c = H.compiled("supply_chain")
    with pytest.raises(NoSuchSidechain):
        package(c, {"transactions": [{"subgraph": "S1", "mode": "sc-2s", "sidechain": "nowhere"}]})
    with pytest.raises(NoSuchSidechain):
        package(c, {"transactions": []}, {"side": "quorum-like"})


def test_mainchain_variant_moves_sidechain_work():
    p = H.pkg("supply_chain", "supply_nested")
    v = mainchain_variant(p)
    assert {x["chain"] for x in v.deployment["assignments"].values()} == {MAIN}
    assert [e.mode for e in v.plan.entries] == ["sc-2m", "sc-2m", "sc-2m", "sc-all", "sc-2m"]
    assert p.deployment["assignments"]["tx:S5"]["chain"] == "quorum-sim"  # original untouched


def test_package_round_trip_and_corruption():
    p = H.pkg("trade", "trade_hybrid")
    again = ContractPackage.from_dict(json.loads(p.to_json()))
    assert again.to_json() == p.to_json()
    d = json.loads(p.to_json())
    d["format"] = 99
    with pytest.raises(PackageCorrupt):
        ContractPackage.from_dict(d)
    del d["methods"]
    d["format"] = 1
    with pytest.raises(PackageCorrupt):
        ContractPackage.from_dict(d)


def test_independence_check_catches_foreign_calls():
    p = H.pkg("supply_chain", "supply_nested")
    check_independence(p)
    p.method("tx:S3").calls.append("tx:S4")
    with pytest.raises(IndependenceViolation):
        check_independence(p)


@pytest.mark.parametrize("mode", list(COSTS))
def test_reference_costs(mode):
    cal = default_calibration()
    for size, want in zip(SIZES, COSTS[mode]):
        got, extra = cal.cost_detail(mode, size)
        assert got == want and not extra


def test_two_phase_commit_costs():
    cal = default_calibration()
    for p, (one, two) in TWO_PC.items():
        assert cal.two_pc_cost(p) == (one, two)
    # affine in the participant count
    for which in ("phase1", "phase2"):
        steps = {cal.phase(which, p + 1) - cal.phase(which, p) for p in range(2, 10)}
        assert len(steps) == 1


def test_costs_grow_with_size_and_mode():
    cal = default_calibration()
    grid = [10 + 20 * i for i in range(120)]
    for mode in COSTS:
        vals = [cal.cost(mode, s) for s in grid]
        assert vals == sorted(vals)
    for s in grid:
        assert cal.cost("no-xa", s) < cal.cost("sc-all", s) < cal.cost("sc-2s-crypto", s)


def test_extrapolation_is_flagged():
    cal = default_calibration()
    assert cal.cost_detail("sc-2s", 3000)[1]
    assert cal.cost_detail("sc-2s", 10)[1]
    assert not cal.cost_detail("sc-2s", 700)[1]
    assert not cal.cost_detail("no-xa", 5000)[1]
    # outside the table the two outermost sizes are extended linearly
    o1, o2 = cal.overhead_at("sc-2s", 1024)[0], cal.overhead_at("sc-2s", 1875)[0]
    want = o2 + (o2 - o1) / (1875 - 1024) * (3000 - 1875)
    assert cal.overhead_at("sc-2s", 3000)[0] == pytest.approx(want)


def test_cost_report_lists_nesting():
    rep = estimate_costs(H.pkg("supply_chain", "supply_nested"), SIZES, default_calibration())
    assert rep.nesting == [{"tx": "tx:S5", "participants": 3, "phase1": 671500, "phase2": 671080}]
    assert rep.to_csv().splitlines()[0] == "mode,75,512,1024,1875"
    assert "sc-2s-crypto" in rep.to_table()


def test_calibration_validation():
    with pytest.raises(ValidationError):
        CostCalibration.from_dict({"baseRateGweiPerKb": -1})
    cal = CostCalibration.from_dict({"baseRateGweiPerKb": 1, "overhead": {"sc-all": {"10": 5}}})
    with pytest.raises(MissingCalibrationEntry):
        cal.cost("sc-2s", 10)
    with pytest.raises(MissingCalibrationEntry):
        cal.cost("sc-all", 20)  # one point cannot be extended
    with pytest.raises(MissingCalibrationEntry):
        cal.phase("phase1", 2)


def random_selection(rng: random.Random, an) -> dict:
    subs = list(an.subgraphs)
    rng.shuffle(subs)
    taken: set = set()
    out = []
    for s in subs:
        if s.members & taken or rng.random() < 0.4:
            continue
        taken |= s.members
        item = {"subgraph": s.id, "mode": rng.choice(["sc-all", "sc-2m", "sc-2s", "sc-2s-crypto"])}
        inner = [t for t in an.subgraphs if t.members < s.members]
        rng.shuffle(inner)
        used: set = set()
        kids = []
        for t in inner:
            if t.members & used or rng.random() < 0.5:
                continue
            used |= t.members
            kids.append({"subgraph": t.id})
        if kids:
            item["children"] = kids
        out.append(item)
    return {"transactions": out}


@pytest.mark.parametrize("name", H.USE_CASES)
def test_random_selections_give_one_method_per_actor_and_transaction(name):
    c = H.compiled(name)
    rng = random.Random(name)
    for _ in range(40):
        sel = random_selection(rng, c.analysis)
        p = package(c, sel)
        n_tx = len(p.plan.entries)
        assert len(p.methods) == len(c.model.actors) + n_tx
        check_independence(p)
        owners = set(p.fsm_owner.values())
        assert owners <= {e.id for e in p.plan.entries} | {"monitor"}
        # a transaction's tables live in its own method only
        for m in p.methods:
            if m.owner_kind == "transaction":
                assert m.fsms == sorted(f for f, o in p.fsm_owner.items() if o == m.id)
            else:
                assert all(p.fsm_owner[f] == "monitor" for f in m.fsms)
        for e in p.plan.entries:
            for ch in e.children:
                assert p.plan.by_id()[ch].members < e.members
        plan_deployment(p, {MAIN: "ethereum-like", "quorum-sim": "quorum-like"})
