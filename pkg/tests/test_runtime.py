from __future__ import annotations

import json

import pytest

from bpmnchain.contractgen import MAIN
from bpmnchain.errors import (AccessDenied, AttestationRejected, BridgeFailure, ChainMissing, HashMismatch,
                              InstanceFailed, MethodNotOnChain, NonConforming, NotFound, ParticipantUnresponsive,
                              TransactionAborted, TxNotActive, UnknownCall)
from bpmnchain.ledger_sim import ActorIdentity, build_chains
from bpmnchain.runtime import Faults, Instance, deploy, deploy_fresh, dump_trace, load_trace, run_trace
from bpmnchain.runtime.workspace import META_PREFIX, WS_PREFIX, Workspace

import acid
import helpers as H

SAME_GAS = {MAIN: "ethereum-like", "quorum-sim": "ethereum-like"}


def order_side(mode: str = "sc-2s", layout=None) -> Instance:
    p = H.pkg("order_process", {"transactions": [{"subgraph": "S3", "mode": mode}]})
    return deploy_fresh(p, layout=layout)


def commit_gas(inst: Instance, tx: str) -> float:
    return sum(b.gas for ch in inst.chains.values() for b in ch.blocks if b.method == f"commit:{tx}")


def test_deploy_needs_every_chain():
    p = H.pkg("supply_chain", "supply_hybrid")
    with pytest.raises(ChainMissing):
        deploy(p, build_chains({MAIN: "ethereum-like"}))
    inst = deploy(p, build_chains(SAME_GAS))
    assert "tx:S1" in inst.chains["quorum-sim"].methods
    assert "actor:Buyer" in inst.main().methods


@pytest.mark.parametrize("name,selection", [
    ("supply_chain", "empty"), ("supply_chain", "supply_hybrid"), ("supply_chain", "supply_nested"),
    ("supply_chain", "supply_flat"), ("order_process", "empty"), ("order_process", "order_hybrid"),
    ("trade", "empty"), ("trade", "trade_hybrid"),
])
def test_shipped_traces_conform(name, selection):
    inst = H.deploy(name, selection)
    r = run_trace(inst, H.trace(name))
    assert r.conforming, r.reason
    assert r.terminal == "SUCCESS"
    assert H.app_keys(inst.main().snapshot()) == H.app_keys(H.game(name).final_store(H.trace(name)))
    assert all(ws.state == "Committed" for ws in inst.workspaces.values())


def test_access_control():
    inst = H.deploy("order_process")
    with pytest.raises(AccessDenied):
        inst.invoke_api("Customer", "m_order", {"items": 3})
    with pytest.raises(UnknownCall):
        inst.invoke_api("Customer", "nope")
    inst = H.deploy("supply_chain", "supply_flat")
    with pytest.raises(AccessDenied):
        inst.invoke_api("Carrier", "m_offer", {"qty": 1})  # not a participant of the transaction
    with pytest.raises(NonConforming):
        inst.invoke_api("Buyer", "m_offer", {"qty": 1})  # participant, but not the receiver


def test_out_of_order_call_changes_nothing():
    inst = H.deploy("order_process")
    before = (inst.main().log_digest(), dict(inst.fsm_state), sorted(inst.offers))
    with pytest.raises(NonConforming):
        inst.invoke_api("Shipper", "m_shipment_request", {})
    assert (inst.main().log_digest(), dict(inst.fsm_state), sorted(inst.offers)) == before
    inst.invoke_api("OrderHandling", "m_order", {"items": 3})


def test_payload_schema_is_enforced():
    inst = H.deploy("order_process")
    with pytest.raises(NonConforming):
        inst.invoke_api("OrderHandling", "m_order", {"items": "three"})


def test_empty_and_truncated_traces():
    inst = H.deploy("order_process")
    r = run_trace(inst, [])
    assert not r.conforming and r.error == "Incomplete" and r.position == 0
    r = run_trace(H.deploy("order_process"), H.trace("order_process")[:2])
    assert r.error == "Incomplete" and r.position == 2


def test_trace_round_trip(tmp_path):
    t = H.trace("trade")
    f = tmp_path / "t.jsonl"
    f.write_text(dump_trace(t))
    assert load_trace(f) == t


def test_read_your_writes_and_isolation():
    inst = order_side()

    def body():
        inst.tx_begin("tx:S3")
        inst.tx_write("tx:S3", "k", b'"v1"')
        assert inst.tx_read("tx:S3", "k") == b'"v1"'
        inst.tx_write("tx:S3", "k", b'"v2"')
        assert inst.tx_read("tx:S3", "k") == b'"v2"'

    inst.execute(body)
    with pytest.raises(NotFound):
        inst.main().read("k")
    ws = inst.workspaces["tx:S3"]
    assert ws.final_writes() == {"k": b'"v2"'}
    side = inst.chains["quorum-sim"]
    assert side.read(ws.location("k")) == b'"v2"'
    assert ws.location("k").startswith(WS_PREFIX)


def test_abort_discards_the_buffer():
    inst = order_side()
    inst.execute(lambda: (inst.tx_begin("tx:S3"), inst.tx_write("tx:S3", "k", b"1")))
    digest = inst.app_digest()
    inst.execute(lambda: inst.tx_end("tx:S3", "abort"))
    assert inst.workspaces["tx:S3"].state == "Aborted"
    assert inst.app_digest() == digest
    with pytest.raises(TxNotActive):
        inst.execute(lambda: inst.tx_write("tx:S3", "k", b"2"))
    assert not any(b.method == "commit:tx:S3" for b in inst.main().blocks)


@pytest.mark.parametrize("mode,want", [("sc-2s", 64_204_800), ("sc-all", 62_054_982), ("sc-2m", 63_621_120),
                                       ("sc-2s-crypto", 124_706_420)])
def test_commit_gas_of_512_kb(mode, want):
    inst = order_side(mode, SAME_GAS if mode.startswith("sc-2s") else None)

    def body():
        inst.tx_begin("tx:S3")
        inst.tx_write("tx:S3", "blob", bytes(512 * 1024))
        inst.tx_end("tx:S3")

    inst.execute(body)
    assert inst.workspaces["tx:S3"].state == "Committed"
    assert commit_gas(inst, "tx:S3") == want
    assert inst.main().read("blob") == bytes(512 * 1024)


def test_sidechain_commit_splits_gas_between_chains():
    inst = order_side("sc-2s", SAME_GAS)
    inst.execute(lambda: (inst.tx_begin("tx:S3"), inst.tx_write("tx:S3", "b", bytes(75 * 1024)),
                          inst.tx_end("tx:S3")))
    main = [b for b in inst.main().blocks if b.method == "commit:tx:S3"]
    side = [b for b in inst.chains["quorum-sim"].blocks if b.method == "commit:tx:S3"]
    assert len(main) == 1 and len(side) == 1
    assert main[0].gas == 60_600 * 75
    assert side[0].gas == 9_405_000 - 60_600 * 75


def test_bridge_priming_and_getter_miss():
    inst = H.deploy("supply_chain", "supply_hybrid")
    ws = inst.workspaces["tx:S1"]
    assert ("primed", "tx:S1", -1) in inst.tx_log
    assert "inventory" in ws.read_cache
    side = inst.chains["quorum-sim"]
    assert side.read(ws.location("inventory")) == inst.main().read("inventory")

    inst2 = order_side()
    calls = []

    def body():
        inst2.tx_begin("tx:S3")
        n = inst2.bridge_calls
        inst2.tx_read("tx:S3", "catalog")  # not in the read set: one getter round trip
        calls.append(inst2.bridge_calls - n)
        inst2.tx_read("tx:S3", "catalog")
        calls.append(inst2.bridge_calls - n)

    inst2.execute(body)
    assert calls == [1, 1]
    with pytest.raises(MethodNotOnChain):
        inst.bridge_call(MAIN, "quorum-sim", "actor:Buyer")


def test_bridge_failure_rolls_back_the_call():
    f = Faults(bridge_failures=[0])
    inst = H.deploy("supply_chain", "supply_hybrid", f)
    digest = inst.main().log_digest()
    inst.step_index = 0
    t = H.trace("supply_chain")
    with pytest.raises(BridgeFailure):
        inst.invoke_api(t[0]["actor"], t[0]["call"], t[0]["payload"])
    assert inst.main().log_digest() == digest and not inst.failed
    inst.step_index = 1
    inst.invoke_api(t[0]["actor"], t[0]["call"], t[0]["payload"])


def test_attestation_is_recorded_on_main():
    inst = H.deploy("order_process", "order_hybrid")
    r = run_trace(inst, H.trace("order_process"))
    assert r.conforming
    keys = [k for k in inst.main().keys(META_PREFIX) if k.endswith("/attestation")]
    assert len(keys) == 3
    doc = json.loads(inst.main().read(keys[0]))
    assert set(doc["signatures"]) == set(inst.entries["tx:S1"].participants)


def test_attestation_rejected_by_a_participant():
    f = Faults(attestation_rejections={"tx:S1": "Manufacturer"})
    inst = H.deploy("supply_chain", "supply_hybrid", f)
    r = run_trace(inst, H.trace("supply_chain"))
    assert r.error == "AttestationRejected"
    assert inst.failed and inst.workspaces["tx:S1"].state == "Aborted"
    with pytest.raises(InstanceFailed):
        inst.invoke_api("Manufacturer", "m_offer", {"qty": 1})


def test_forged_signature_is_rejected():
    inst = H.deploy("order_process", "order_hybrid")
    actor = inst.entries["tx:S1"].participants[0]
    inst.signers[actor] = ActorIdentity.derive(actor, "forged")
    r = run_trace(inst, H.trace("order_process"))
    assert r.error == "AttestationRejected"
    assert not any(b.method == "commit:tx:S1" for b in inst.main().blocks)


def test_two_phase_commit_all_yes():
    inst = H.deploy("supply_chain", "supply_nested")
    r = run_trace(inst, H.trace("supply_chain"))
    assert r.conforming
    order = [t for ev, t, _ in inst.tx_log if ev == "commit"]
    assert order.index("tx:S5") < order.index("tx:S1") < order.index("tx:S2")
    assert ("2pc-commit", "tx:S5") in [(ev, t) for ev, t, _ in inst.tx_log]
    two = [b for ch in inst.chains.values() for b in ch.blocks if b.method == "2pc:tx:S5"]
    assert len(two) == 1


@pytest.mark.parametrize("faults,error", [
    (Faults(votes={"tx:S2": "no"}), TransactionAborted),
    (Faults(votes={"tx:S5": "no"}), TransactionAborted),
    (Faults(unresponsive=["tx:S1"]), ParticipantUnresponsive),
    (Faults(attestation_rejections={"tx:S2": "Supplier"}), AttestationRejected),
])
def test_two_phase_commit_abort(faults, error):
    inst = H.deploy("supply_chain", "supply_nested", faults)
    t = H.trace("supply_chain")
    with pytest.raises(error):
        for i, e in enumerate(t):
            inst.step_index = i
            inst.invoke_api(e["actor"], e["call"], e["payload"])
    tree = ("tx:S5", "tx:S1", "tx:S2")
    assert {inst.workspaces[x].state for x in tree if x in inst.workspaces} == {"Aborted"}
    assert not any(b.method.startswith("commit:") and b.method[7:] in tree
                   for ch in inst.chains.values() for b in ch.blocks)


def test_runs_are_deterministic():
    a = run_trace(H.deploy("trade", "trade_hybrid", seed=3), H.trace("trade"))
    b = run_trace(H.deploy("trade", "trade_hybrid", seed=3), H.trace("trade"))
    assert a.to_json() == b.to_json()
    c = run_trace(H.deploy("trade", "trade_hybrid", seed=4), H.trace("trade"))
    assert c.app_digest == a.app_digest


def test_crypto_workspace_hides_and_authenticates():
    ws = Workspace("tx:A", "side", "c", ("X",), True, b"k" * 32)
    loc = ws.location("secret")
    assert "secret" not in loc and "tx:A" not in loc
    blob = ws.seal("secret", b'"hello"')
    assert b"hello" not in blob
    assert ws.unseal(blob) == b'"hello"'
    with pytest.raises(HashMismatch):
        ws.unseal(blob[:-1] + bytes([blob[-1] ^ 1]))
    plain = Workspace("tx:A", "side", "c", ("X",), False, b"k" * 32)
    assert plain.location("secret") == f"{WS_PREFIX}tx:A/{plain.nonce}/secret"


def test_acid_checker_detects_a_planted_leak(monkeypatch):
    original = Instance.tx_write

    def leaky(self, tx, key, value):
        original(self, tx, key, value)
        self._ctx(self.workspaces[tx].host, tx).put(key, value)  # writes through to the ledger

    monkeypatch.setattr(Instance, "tx_write", leaky)
    tally = acid.Tally()
    acid.run_case("supply_chain", "supply_flat", H.trace("supply_chain"), Faults(), tally, "planted")
    assert any("isolation" in v for v in tally.violations)


def test_acid_checker_detects_a_lost_abort(monkeypatch):
    monkeypatch.setattr(Instance, "_abort_tree", lambda self, root, reason="": None)
    tally = acid.Tally()
    acid.run_case("supply_chain", "supply_nested", H.trace("supply_chain"),
                  Faults(votes={"tx:S2": "no"}), tally, "planted")
    assert tally.violations


PARENT_AND_CHILD = {"transactions": [{"subgraph": "S10", "mode": "sc-2s", "children": [{"subgraph": "S1"}]}]}


def test_nested_commit_keeps_the_latest_write():
    # the child writes offer/* first, the parent rewrites them later in the run
    inst = H.deploy("trade", PARENT_AND_CHILD)
    r = run_trace(inst, H.trace("trade"))
    assert r.conforming, r.reason
    assert H.app_keys(inst.main().snapshot()) == H.app_keys(H.game("trade").final_store(H.trace("trade")))
    child = inst.workspaces["tx:S1"].final_writes()
    parent = inst.workspaces["tx:S10"].final_writes()
    shared = set(child) & set(parent)
    assert shared
    assert not shared & set(inst.effective_writes("tx:S1"))
    assert shared <= set(inst.effective_writes("tx:S10"))


def test_acid_checker_detects_stale_child_commit(monkeypatch):
    monkeypatch.setattr(Instance, "effective_writes", lambda self, tx: self.workspaces[tx].final_writes())
    tally = acid.Tally()
    acid.run_case("trade", PARENT_AND_CHILD, H.trace("trade"), Faults(), tally, "planted")
    assert any("replay" in v for v in tally.violations)
