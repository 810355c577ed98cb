"""The monitor: DE event loop, API dispatch and the multi-method transaction mechanism."""

from __future__ import annotations

import copy
import hashlib
import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from .. import guards as G
from ..bpmn_ir import model_from_dict, to_dag
from ..contractgen import MAIN, SIDECHAIN_MODES, ContractPackage, CostCalibration, default_calibration
from ..dehsm import DeHsmModel, Fsm, OutputAction, Transition
from ..errors import (AccessDenied, AttestationRejected, BpmnChainError, BridgeFailure, ChainMissing,
                      InstanceFailed, MethodNotOnChain, NoEnabledBranch, NonConforming, NotFound,
                      PackageCorrupt, ParticipantUnresponsive, TransactionAborted, TxNotActive, UnknownCall,
                      ValidationError)
from ..ledger_sim import ActorIdentity, Chain, ExecutionContext, OffchainStore, build_chains, load_profiles
from ..scripts import encode_value, run_script
from .workspace import META_PREFIX, WS_PREFIX, Workspace, derive_secret

ABORTING = (TransactionAborted, AttestationRejected, ParticipantUnresponsive)
APP_EXCLUDE = (WS_PREFIX, META_PREFIX)


@dataclass
class Faults:
    votes: dict = field(default_factory=dict)  # tx id -> "yes" | "no"
    unresponsive: list = field(default_factory=list)
    attestation_rejections: dict = field(default_factory=dict)  # tx id -> actor
    bridge_failures: list = field(default_factory=list)  # trace step indices

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Faults":
        return cls(dict(d.get("votes", {})), list(d.get("unresponsive", [])),
                   dict(d.get("attestation_rejections", {})), [int(x) for x in d.get("bridge_failures", [])])

    @classmethod
    def load(cls, path: str | Path | None) -> "Faults":
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, AttributeError) as exc:
            raise ValidationError(f"faults {path}: {exc}") from None

    def to_dict(self) -> dict:
        return {"votes": self.votes, "unresponsive": self.unresponsive,
                "attestation_rejections": self.attestation_rejections, "bridge_failures": self.bridge_failures}


@dataclass(order=True)
class DeEvent:
    time: int
    seq: int
    target: str = field(compare=False)
    trigger: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)
    origin: str = field(compare=False, default="internal")  # api | internal


@dataclass
class StepReport:
    time: int
    fsm: str
    trigger: str
    origin: str
    transitions: list  # (from, to)
    actions: list  # compact action strings
    absorbed: bool = False

    def to_dict(self) -> dict:
        return {"time": self.time, "fsm": self.fsm, "trigger": self.trigger, "origin": self.origin,
                "transitions": [list(t) for t in self.transitions], "actions": self.actions,
                "absorbed": self.absorbed}


@dataclass
class TwoPcOutcome:
    coordinator: str
    participants: list
    votes: dict
    committed: bool
    commit_order: list
    aborted_by: Optional[str] = None
    reason: str = ""


def _chain_of(pkg: ContractPackage, method: str) -> str:
    return pkg.deployment.get("assignments", {}).get(method, {}).get("chain", MAIN)


class Instance:
    """One deployed process instance and the chains it runs on."""

    def __init__(self, pkg: ContractPackage, chains: Mapping[str, Chain], faults: Optional[Faults] = None,
                 seed: int = 0, calibration: Optional[CostCalibration] = None):
        self.pkg = pkg
        try:
            self.bpmn = model_from_dict(pkg.model)
            self.dag = to_dag(self.bpmn)
            self.dehsm = DeHsmModel.from_dict(pkg.dehsm)
        except (KeyError, TypeError) as exc:
            raise PackageCorrupt(f"package model is unreadable: {exc}") from None
        self.chains = dict(chains)
        self.faults = faults or Faults()
        self.seed = seed
        self.calib = calibration or default_calibration()
        self.plan = pkg.plan
        self.entries = pkg.plan.by_id()
        self.methods = {m.id: m for m in pkg.methods}
        self.fsms: dict[str, Fsm] = {f.id: f for f in self.dehsm.fsms()}
        self.sub_of = {f.id: sm for sm in self.dehsm.submodels for f in sm.fsms}
        self.block_of = {v: sm for sm in self.dehsm.submodels for v in sm.members}
        self.flows = {f.id: f for f in self.bpmn.flows}
        self.actors = list(self.bpmn.actors)
        self.identities = {a: ActorIdentity.derive(a, seed) for a in self.actors}
        self.signers = dict(self.identities)  # keys actors actually sign with
        self.offchain = OffchainStore()
        self.observer: Optional[Callable[[StepReport], None]] = None
        # mutable run state
        self.fsm_state = {fid: "root" for fid in self.fsms}
        self.fsm_payload: dict = {fid: {} for fid in self.fsms}
        self.enabled: dict = {}  # control fsm -> enabled stream ids
        self.done: dict = {}  # control fsm -> finished stream ids
        self.queue: list = []
        self.time = 0
        self.seq = 0
        self.offers: dict = {}  # message flow -> offered payload
        self.workspaces: dict = {}
        self.tx_log: list = []  # (event, tx, step)
        self.signals: list = []
        self.bridge_calls = 0
        self.failed = False
        self.step_index = -1
        self.steps: list = []  # per API call summaries
        self.events: list = []  # StepReports of the current call
        self._open: dict = {}
        self._latency: dict = {}

    # ------------------------------------------------------------ plumbing

    def clone(self) -> "Instance":
        obs, self.observer = self.observer, None
        try:
            return copy.deepcopy(self)
        finally:
            self.observer = obs

    def _mutable(self) -> tuple:
        return (self.fsm_state, self.fsm_payload, self.enabled, self.done, self.queue, self.time, self.seq,
                self.offers, self.workspaces, self.tx_log, self.signals, self.bridge_calls)

    def _snapshot(self) -> tuple:
        return copy.deepcopy(self._mutable())

    def _restore(self, snap: tuple) -> None:
        (self.fsm_state, self.fsm_payload, self.enabled, self.done, self.queue, self.time, self.seq,
         self.offers, self.workspaces, self.tx_log, self.signals, self.bridge_calls) = snap

    def main(self) -> Chain:
        return self.chains[MAIN]

    def method_chain(self, method: str) -> str:
        return _chain_of(self.pkg, method)

    def _ctx(self, chain: str, method: str, metered: bool = True) -> ExecutionContext:
        key = (chain, method)
        ctx = self._open.get(key)
        if ctx is None:
            if chain not in self.chains:
                raise ChainMissing(f"chain {chain!r} is not available")
            ctx = self.chains[chain].begin(method, metered)
            if metered:
                ctx.charge(self.calib.call_base_gwei)
            self._open[key] = ctx
            if chain != MAIN and method in self.methods:
                self.bridge_call(MAIN, chain, method)
        return ctx

    def bridge_call(self, from_chain: str, to_chain: str, method: Optional[str] = None) -> None:
        """One round trip between two chains. ``method`` must live on ``to_chain``."""
        if method is not None and method in self.methods and self.method_chain(method) != to_chain:
            raise MethodNotOnChain(f"{method} is not deployed on {to_chain}", method=method, chain=to_chain)
        if self.step_index in self.faults.bridge_failures:
            raise BridgeFailure(f"bridge {from_chain}->{to_chain} failed at step {self.step_index}",
                                step=self.step_index)
        self.bridge_calls += 1
        for cid in (from_chain, to_chain):
            self._latency[cid] = self._latency.get(cid, 0.0) + self.chains[cid].profile.rtt_ms

    def ledger_read(self, chain: str, key: str) -> bytes:
        """Committed value overlaid with writes pending in this call."""
        for (cid, _), ctx in reversed(list(self._open.items())):
            if cid == chain and key in ctx.pending:
                return ctx.pending[key]
        return self.chains[chain].read(key)

    def _finish_call(self) -> list:
        blocks = []
        for (cid, method), ctx in self._open.items():
            num = self.chains[cid].commit_block(ctx)
            blocks.append({"chain": cid, "method": method, "block": num})
        for cid, ms in self._latency.items():
            self.chains[cid].latency_ms += ms
        self._open, self._latency = {}, {}
        return blocks

    def _drop_call(self) -> None:
        for (cid, _), ctx in self._open.items():
            self.chains[cid].abort(ctx)
        self._open, self._latency = {}, {}

    def app_digest(self) -> str:
        return self.main().digest(exclude=APP_EXCLUDE)

    def app_state(self) -> dict:
        return self.main().snapshot(exclude=APP_EXCLUDE)

    # ------------------------------------------------------------ events

    def enqueue(self, target: str, trigger: str, payload: Mapping, origin: str = "internal") -> None:
        if target not in self.fsms:
            raise NonConforming(f"event {trigger} targets unknown FSM {target}")
        t = self.time if origin == "api" else self.time + 1
        self.seq += 1
        heapq.heappush(self.queue, DeEvent(t, self.seq, target, trigger, dict(payload), origin))

    def drain(self) -> None:
        while self.queue:
            self.step()

    def step(self) -> StepReport:
        if not self.queue:
            raise NonConforming("step on an empty queue")
        ev = heapq.heappop(self.queue)
        self.time = max(self.time, ev.time)
        fsm = self.fsms[ev.target]
        owner = self.pkg.fsm_owner.get(fsm.id, "monitor")
        if owner != "monitor":
            self._ensure_begun(owner)
        report = StepReport(ev.time, fsm.id, ev.trigger, ev.origin, [], [])
        cur = self.fsm_state[fsm.id]
        cands = [t for t in fsm.outgoing(cur) if t.trigger == ev.trigger]
        if not cands:
            if fsm.state(cur).kind == "terminal" and ev.trigger in fsm.absorb:
                report.absorbed = True
                self._report(report)
                return report
            raise NonConforming(f"{fsm.id} in state {cur} cannot consume {ev.trigger}",
                                fsm=fsm.id, state=cur, trigger=ev.trigger)
        if ev.trigger.startswith("done:"):
            self.done.setdefault(fsm.id, set()).add(ev.trigger[5:])
        self.fsm_payload[fsm.id] = {**self.fsm_payload[fsm.id], **ev.payload}
        self._take(fsm, cands[0], report)
        self._follow(fsm, report)
        self._check_tx_ends()
        self._report(report)
        return report

    def _report(self, report: StepReport) -> None:
        self.events.append(report)
        if self.observer:
            self.observer(report)

    def _follow(self, fsm: Fsm, report: StepReport) -> None:
        while True:
            cur = self.fsm_state[fsm.id]
            state = fsm.state(cur)
            imm = [t for t in fsm.outgoing(cur) if t.trigger is None]
            if not imm:
                return
            payload = self.fsm_payload[fsm.id]
            if state.exclusive_guards:
                hits = sum(1 for g in state.exclusive_guards if G.evaluate(g, payload))
                if hits != 1:
                    raise NoEnabledBranch(f"{fsm.id}: {hits} exclusive branches enabled at {state.vertex}",
                                          fsm=fsm.id, enabled=hits)
            joins = [t for t in imm if t.join]
            if joins:
                if not self.enabled.get(fsm.id, set()) <= self.done.get(fsm.id, set()):
                    return
                t = joins[0]
            else:
                guarded = [t for t in imm if t.guard is not None]
                if guarded:
                    hits = [t for t in guarded if G.evaluate(t.guard, payload)]
                    if len(hits) != 1:
                        raise NoEnabledBranch(f"{fsm.id}: {len(hits)} branches enabled at {cur}", fsm=fsm.id)
                    t = hits[0]
                else:
                    t = imm[0]
            self._take(fsm, t, report)

    def _take(self, fsm: Fsm, t: Transition, report: StepReport) -> None:
        payload = self.fsm_payload[fsm.id]
        emitted_guarded = 0
        fired_guarded = 0
        enabled = set()
        for a in t.actions:
            if a.kind == "invoke-task":
                payload = self._run_task(fsm, a.task, payload)
                self.fsm_payload[fsm.id] = payload
                report.actions.append(f"task {a.task}")
                continue
            if a.guard is not None:
                emitted_guarded += 1
                if not G.evaluate(a.guard, payload):
                    continue
                fired_guarded += 1
            if a.kind == "enqueue-event":
                self.enqueue(a.target, a.trigger, payload)
                enabled.add(a.target)
                report.actions.append(f"enqueue {a.trigger}->{a.target}")
            elif a.kind == "raise-signal":
                flow = self.flows[a.trigger]
                self.offers[a.trigger] = dict(payload)
                self.signals.append({"flow": a.trigger, "to": self.dag.vertex(flow.target).pool,
                                     "step": self.step_index})
                enabled.add(self.dehsm.routing.get(a.trigger))
                report.actions.append(f"offer {a.trigger}")
            elif a.kind in ("respond", "invoke-method"):
                report.actions.append(f"{a.kind} {a.method or ''}".strip())
        if emitted_guarded and not fired_guarded:
            raise NoEnabledBranch(f"{fsm.id}: no guard enabled at {t.dst}", fsm=fsm.id)
        if fsm.role == "control" and emitted_guarded:
            streams = {f.id for f in self.sub_of[fsm.id].fsms if f.role == "stream"}
            self.enabled[fsm.id] = enabled & streams
            self.done[fsm.id] = set()
        report.transitions.append((t.src, t.dst))
        self.fsm_state[fsm.id] = t.dst

    def _run_task(self, fsm: Fsm, task: str, payload: dict) -> dict:
        ref = self.bpmn.task_bindings.get(task)
        ops = self.bpmn.scripts.get(ref, []) if ref else []
        owner = self.pkg.fsm_owner.get(fsm.id, "monitor")
        if owner != "monitor":
            store = _TxStore(self, owner)
            self._ctx(self.method_chain(owner), owner)
        else:
            method = f"actor:{self.dag.vertex(task).pool}"
            store = _LedgerStore(self, self._ctx(MAIN, method))
        if not ops:
            return dict(payload)
        return run_script(ops, payload, store, self.offchain)

    # ------------------------------------------------------------ transactions

    def _ancestors(self, tx: str) -> list:
        out = []
        e = self.entries[tx]
        while e.parent:
            out.append(e.parent)
            e = self.entries[e.parent]
        return out

    def _root(self, tx: str) -> str:
        anc = self._ancestors(tx)
        return anc[-1] if anc else tx

    def _tree(self, tx: str) -> list:
        """Pre-order: parent before its children."""
        out = [tx]
        for c in self.entries[tx].children:
            out.extend(self._tree(c))
        return out

    def _ensure_begun(self, tx: str) -> None:
        for t in reversed([tx, *self._ancestors(tx)]):
            if t not in self.workspaces:
                self.tx_begin(t)

    def tx_begin(self, tx: str) -> Workspace:
        if tx in self.workspaces:
            raise TxNotActive(f"{tx} already begun")
        e = self.entries[tx]
        m = self.methods[tx]
        ws = Workspace(tx, m.chain, m.contract, tuple(e.participants), e.mode == "sc-2s-crypto",
                       derive_secret(self.seed, tx), begun_step=self.step_index)
        self.workspaces[tx] = ws
        ctx = self._ctx(ws.host, tx)
        ctx.put(ws.meta_key("state"), b"active")
        ctx.free.add(ws.meta_key("state"))
        if not ws.crypto:
            ctx.put(ws.meta_key("nonce"), ws.nonce.encode())
            ctx.free.add(ws.meta_key("nonce"))
        self.tx_log.append(("begin", tx, self.step_index))
        if ws.host != MAIN:
            self._prime(ws)
        return ws

    def _prime(self, ws: Workspace) -> None:
        keys = self.pkg.first_call_read_sets.get(ws.tx_id, [])
        for key in keys:
            try:
                value = self.ledger_read(MAIN, key)
            except NotFound:
                continue
            ws.read_cache[key] = value
            self._persist(ws, key, value)
        self.tx_log.append(("primed", ws.tx_id, self.step_index))

    def _persist(self, ws: Workspace, key: str, value: bytes) -> None:
        ctx = self._ctx(ws.host, ws.tx_id)
        loc = ws.location(key)
        ctx.put(loc, ws.seal(key, value))
        ctx.free.add(loc)
        ws.locations[key] = loc

    def _active(self, tx: str) -> Workspace:
        ws = self.workspaces.get(tx)
        if ws is None or ws.state != "Active":
            raise TxNotActive(f"{tx} is not active", tx=tx)
        return ws

    def tx_read(self, tx: str, key: str) -> bytes:
        ws = self._active(tx)
        # the latest write anywhere in the unfinished tree wins
        holders = [w for w in self._live_tree(tx) if key in w.stamps]
        if holders:
            return max(holders, key=lambda w: w.stamps[key]).lookup(key)
        if key in ws.read_cache:
            return ws.read_cache[key]
        if ws.host != MAIN:
            self.bridge_call(ws.host, MAIN)  # getter round trip on a cache miss
        value = self.ledger_read(MAIN, key)
        ws.read_cache[key] = value
        self._persist(ws, key, value)
        return value

    def tx_write(self, tx: str, key: str, value: bytes) -> None:
        ws = self._active(tx)
        ws.buffer.append((key, bytes(value)))
        ws.stamps[key] = 1 + max((n for w in self.workspaces.values() for n in w.stamps.values()), default=0)
        self._persist(ws, key, value)

    def _live_tree(self, tx: str) -> list:
        root = self._root(tx)
        return [w for t, w in self.workspaces.items()
                if self._root(t) == root and w.state in ("Active", "Prepared")]

    def effective_writes(self, tx: str) -> dict:
        """Final writes of ``tx`` that no later write elsewhere in its tree supersedes."""
        ws = self.workspaces[tx]
        tree = [self.workspaces[t] for t in self._tree(self._root(tx)) if t in self.workspaces]
        return {k: v for k, v in ws.final_writes().items()
                if all(w.stamps.get(k, 0) <= ws.stamps[k] for w in tree)}

    def tx_end(self, tx: str, decision: str = "commit") -> Optional[TwoPcOutcome]:
        ws = self._active(tx)
        if decision == "abort":
            self._abort_tree(self._root(tx), reason="requested")
            return None
        e = self.entries[tx]
        if e.parent:
            ws.state = "Prepared"
            ctx = self._ctx(ws.host, tx)
            ctx.put(ws.meta_key("state"), b"prepared")
            ctx.free.add(ws.meta_key("state"))
            self.tx_log.append(("prepared", tx, self.step_index))
            return None
        if e.children:
            outcome = self.run_2pc(tx)
            if not outcome.committed:
                err = AttestationRejected if outcome.reason == "attestation" else (
                    ParticipantUnresponsive if outcome.reason == "unresponsive" else TransactionAborted)
                raise err(f"{tx} aborted by {outcome.aborted_by} ({outcome.reason})",
                          tx=tx, by=outcome.aborted_by)
            return outcome
        if ws.host != MAIN:
            result = self.attest(tx)
            if not result["accepted"]:
                raise AttestationRejected(f"{tx}: result rejected by {result['rejected_by']}",
                                          tx=tx, actor=result["rejected_by"])
        self._commit(tx)
        return None

    def run_2pc(self, parent: str) -> TwoPcOutcome:
        tree = self._tree(parent)
        votes = {}
        for t in tree:
            ws = self.workspaces.get(t)
            if t != parent and (ws is None or ws.state != "Prepared"):
                return self._abort_2pc(parent, tree, votes, t, "not-prepared")
            if t in self.faults.unresponsive:
                return self._abort_2pc(parent, tree, votes, t, "unresponsive")
            vote = str(self.faults.votes.get(t, "yes")).lower()
            votes[t] = vote
            if vote != "yes":
                return self._abort_2pc(parent, tree, votes, t, "vote-no")
            if self.workspaces[t].host != MAIN:
                res = self.attest(t)
                if not res["accepted"]:
                    return self._abort_2pc(parent, tree, votes, t, "attestation")
        self._charge_2pc(tree)
        for t in tree:
            self._commit(t)
        self.tx_log.append(("2pc-commit", parent, self.step_index))
        return TwoPcOutcome(parent, tree[1:], votes, True, tree)

    def _charge_2pc(self, tree: Sequence[str]) -> None:
        for t in tree:
            kids = self.entries[t].children
            if kids:
                p = len(kids) + 1
                ws = self.workspaces[t]
                ctx = self._ctx(ws.host, f"2pc:{t}", metered=False)
                ctx.charge(self.calib.phase("phase1", p) + self.calib.phase("phase2", p))

    def _abort_2pc(self, parent: str, tree: list, votes: dict, by: str, reason: str) -> TwoPcOutcome:
        self._charge_2pc(tree)
        self._abort_tree(parent, reason=reason)
        return TwoPcOutcome(parent, tree[1:], votes, False, [], by, reason)

    def _abort_tree(self, root: str, reason: str = "") -> None:
        for t in self._tree(root):
            ws = self.workspaces.get(t)
            if ws is not None and ws.state in ("Active", "Prepared"):
                ws.state = "Aborted"
                ws.buffer.clear()
                ws.stamps.clear()
                self.tx_log.append(("abort", t, self.step_index))

    def attest(self, tx: str) -> dict:
        ws = self.workspaces[tx]
        digest = ws.result_hash()
        sigs = {}
        for actor in ws.participants:
            if self.faults.attestation_rejections.get(tx) == actor:
                return {"accepted": False, "rejected_by": actor, "signatures": sigs}
            sig = self.signers[actor].sign(digest)
            if not self.identities[actor].verify(digest, sig):
                return {"accepted": False, "rejected_by": actor, "signatures": sigs}
            sigs[actor] = sig
        self.bridge_call(ws.host, MAIN)
        ctx = self._ctx(MAIN, f"commit:{tx}", metered=False)
        key = f"{META_PREFIX}main/tx/{tx}/attestation"
        ctx.put(key, json.dumps({"hash": digest.hex(), "signatures": sigs}, sort_keys=True).encode())
        ctx.free.add(key)
        self.tx_log.append(("attested", tx, self.step_index))
        return {"accepted": True, "rejected_by": None, "signatures": sigs, "hash": digest.hex()}

    def _commit(self, tx: str) -> None:
        ws = self.workspaces[tx]
        e = self.entries[tx]
        size = ws.written_kb()
        cost = self.calib.cost(e.mode, size)
        main_ctx = self._ctx(MAIN, f"commit:{tx}", metered=False)
        for key, value in self.effective_writes(tx).items():
            main_ctx.put(key, value)
        if e.mode in SIDECHAIN_MODES:
            side_ctx = self._ctx(ws.host, f"commit:{tx}", metered=False)
            side_ctx.charge(cost - self.calib.base_rate * size)
            side_ctx.put(ws.meta_key("state"), b"committed")
            side_ctx.free.add(ws.meta_key("state"))
            main_ctx.charge(self.calib.base_rate * size)
        else:
            main_ctx.charge(cost)
            main_ctx.put(ws.meta_key("state"), b"committed")
            main_ctx.free.add(ws.meta_key("state"))
        ws.state = "Committed"
        self.tx_log.append(("commit", tx, self.step_index))

    def _exit_fsm(self, tx: str) -> Optional[Fsm]:
        e = self.entries[tx]
        v = e.exit
        if v is None:
            v = next((x for x in e.members if not self.dag.succ[x]), None)
        if v is None or v not in self.block_of:
            return None
        return self.fsms[self.block_of[v].fsms[0].id]

    def _check_tx_ends(self) -> None:
        # innermost first so children are prepared before their parent decides
        active = [t for t in self.workspaces if self.workspaces[t].state == "Active"]
        active.sort(key=lambda t: -len(self._ancestors(t)))
        for t in active:
            if self.workspaces[t].state != "Active":
                continue
            f = self._exit_fsm(t)
            if f is not None and f.state(self.fsm_state[f.id]).kind == "terminal":
                self.tx_end(t)

    # ------------------------------------------------------------ API surface

    def start(self) -> None:
        self.step_index = -1
        self.events = []
        self.execute(lambda: self.enqueue(self.dehsm.start_fsm, "start", {}, "api"))

    def execute(self, body: Callable[[], None]) -> dict:
        """Run ``body`` as one method execution: drain, then commit every
        touched chain in one block each, or roll everything back."""
        before = {cid: (c.gas, c.latency_ms) for cid, c in self.chains.items()}
        snap = self._snapshot()
        try:
            body()
            self.drain()
            blocks = self._finish_call()
        except ABORTING:
            self._drop_call()
            self._restore(snap)
            for root in {self._root(t) for t in self.workspaces}:
                self._abort_tree(root, reason="failure")
            self.failed = True
            raise
        except BpmnChainError:
            self._drop_call()
            self._restore(snap)
            raise
        summary = {
            "step": self.step_index,
            "blocks": blocks,
            "gas": {cid: c.gas - before[cid][0] for cid, c in self.chains.items()},
            "latencyMs": {cid: c.latency_ms - before[cid][1] for cid, c in self.chains.items()},
            "events": [r.to_dict() for r in self.events],
        }
        self.steps.append(summary)
        return summary

    def invoke_api(self, actor: ActorIdentity | str, call: str, payload: Optional[Mapping] = None) -> dict:
        if self.failed:
            raise InstanceFailed("instance failed after an aborted transaction")
        actor_id = actor.actor_id if isinstance(actor, ActorIdentity) else str(actor)
        payload = dict(payload or {})
        flow = self.flows.get(call)
        if flow is None or flow.kind != "message" or call not in self.pkg.api_map:
            raise UnknownCall(f"no API call {call!r}", call=call)
        method = self.methods[self.pkg.api_map[call]]
        receiver = self.dag.vertex(flow.target).pool
        if method.owner_kind == "transaction":
            if actor_id not in self.entries[method.owner].participants:
                raise AccessDenied(f"{actor_id} is not a participant of {method.owner}", actor=actor_id)
            if actor_id != receiver:
                raise NonConforming(f"{call} must be delivered by {receiver}, not {actor_id}", actor=actor_id)
        elif actor_id != method.owner:
            raise AccessDenied(f"{actor_id} may not call {method.id}", actor=actor_id)
        if call not in self.offers:
            raise NonConforming(f"{call} is not expected at this point", call=call)
        schema = self.bpmn.schemas.get(flow.payload_schema) if flow.payload_schema else None
        if schema is not None:
            why = schema.validate(payload)
            if why:
                raise NonConforming(f"{call}: {why}", call=call)
        self.events = []

        def body():
            self._ctx(method.chain, method.id)
            merged = {**self.offers.pop(call), **payload}
            self.enqueue(self.dehsm.routing[call], call, merged, "api")

        result = self.execute(body)
        result["accepted"] = True
        result["offers"] = sorted(self.offers)
        return result

    def is_terminal(self) -> bool:
        if self.queue or self.offers or self.failed:
            return False
        for fid, f in self.fsms.items():
            if f.state(self.fsm_state[fid]).kind not in ("root", "terminal"):
                return False
        if any(ws.state != "Committed" for ws in self.workspaces.values()):
            return False
        return any(f.state(self.fsm_state[fid]).kind == "terminal" for fid, f in self.fsms.items())

    def gas(self) -> dict:
        return {cid: c.gas for cid, c in sorted(self.chains.items())}

    def latency(self) -> dict:
        return {cid: c.latency_ms for cid, c in sorted(self.chains.items())}


class _TxStore:
    def __init__(self, inst: Instance, tx: str):
        self.inst, self.tx = inst, tx

    def get(self, key: str) -> bytes:
        return self.inst.tx_read(self.tx, key)

    def put(self, key: str, value: bytes) -> None:
        self.inst.tx_write(self.tx, key, value)


class _LedgerStore:
    def __init__(self, inst: Instance, ctx: ExecutionContext):
        self.inst, self.ctx = inst, ctx

    def get(self, key: str) -> bytes:
        return self.inst.ledger_read(self.ctx.chain.id, key)

    def put(self, key: str, value: bytes) -> None:
        self.ctx.put(key, value)


# ---------------------------------------------------------------- module API


def deploy(pkg: ContractPackage, chains: Mapping[str, Chain], faults: Optional[Faults] = None, seed: int = 0,
           calibration: Optional[CostCalibration] = None) -> Instance:
    needed = set(pkg.deployment.get("chains", {MAIN: None})) | {a["chain"] for a in
                                                                pkg.deployment.get("assignments", {}).values()}
    missing = sorted(c for c in needed if c not in chains)
    if missing:
        raise ChainMissing(f"chains not available: {missing}", chains=missing)
    inst = Instance(pkg, chains, faults, seed, calibration)
    main = inst.main()
    if not main.log:
        main.genesis({k: encode_value(v) for k, v in inst.bpmn.genesis.items()})
    for m in pkg.methods:
        inst.chains[m.chain].methods.add(m.id)
    inst.start()
    return inst


def deploy_fresh(pkg: ContractPackage, profiles_path: Optional[str | Path] = None, faults: Optional[Faults] = None,
                 seed: int = 0, calibration: Optional[CostCalibration] = None,
                 layout: Optional[Mapping[str, str]] = None) -> Instance:
    """Build the chains named in the package (or ``layout``) and deploy onto them."""
    calib = calibration or default_calibration()
    spec = dict(layout or pkg.deployment.get("chains", {MAIN: "ethereum-like"}))
    chains = build_chains(spec, load_profiles(profiles_path), calib.base_rate)
    return deploy(pkg, chains, faults, seed, calib)


def invoke_api(handle: Instance, actor, call: str, payload: Optional[Mapping] = None) -> dict:
    return handle.invoke_api(actor, call, payload)


def step(handle: Instance) -> StepReport:
    return handle.step()


def tx_begin(handle: Instance, tx: str) -> Workspace:
    return handle.tx_begin(tx)


def tx_read(handle: Instance, tx: str, key: str) -> bytes:
    return handle.tx_read(tx, key)


def tx_write(handle: Instance, tx: str, key: str, value: bytes) -> None:
    handle.tx_write(tx, key, value)


def tx_end(handle: Instance, tx: str, decision: str = "commit"):
    return handle.tx_end(tx, decision)


def run_2pc(handle: Instance, parent: str) -> TwoPcOutcome:
    return handle.run_2pc(parent)


def attest(handle: Instance, tx: str) -> dict:
    return handle.attest(tx)


def bridge_call(handle: Instance, from_chain: str, to_chain: str, method: str) -> None:
    handle.bridge_call(from_chain, to_chain, method)


# ---------------------------------------------------------------- traces


@dataclass
class TraceResult:
    verdict: str  # Conforming | NonConforming
    position: Optional[int]
    reason: str
    error: Optional[str]
    steps: list
    gas: dict
    latency_ms: dict
    ledger_digest: str
    app_digest: str
    terminal: Optional[str]
    tx_log: list

    @property
    def conforming(self) -> bool:
        return self.verdict == "Conforming"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "position": self.position,
            "reason": self.reason,
            "error": self.error,
            "terminal": self.terminal,
            "gas": self.gas,
            "latencyMs": self.latency_ms,
            "ledgerDigest": self.ledger_digest,
            "appDigest": self.app_digest,
            "txLog": [list(x) for x in self.tx_log],
            "steps": self.steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        lines = [f"verdict: {self.verdict}" + (f" at step {self.position} ({self.reason})"
                                               if self.position is not None else "")]
        if self.terminal:
            lines.append(f"terminal: {self.terminal}")
        for cid in sorted(self.gas):
            lines.append(f"{cid}: gas {self.gas[cid]:,.0f} GWei, latency {self.latency_ms[cid]:,.1f} ms")
        lines.append(f"ledger digest: {self.ledger_digest[:16]}")
        return "\n".join(lines) + "\n"


def load_trace(path: str | Path) -> list:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{i + 1}: {exc}") from None
        if not isinstance(d, dict) or "actor" not in d or "call" not in d:
            raise ValidationError(f"{path}:{i + 1}: expected {{actor, call, payload}}")
        out.append({"actor": d["actor"], "call": d["call"], "payload": d.get("payload", {})})
    return out


def dump_trace(trace: Sequence[Mapping]) -> str:
    return "".join(json.dumps({"actor": e["actor"], "call": e["call"], "payload": e.get("payload", {})},
                              sort_keys=True) + "\n" for e in trace)


def _result(inst: Instance, verdict: str, pos: Optional[int], reason: str, error: Optional[str]) -> TraceResult:
    main = inst.main()
    h = hashlib.sha256()
    for cid in sorted(inst.chains):
        h.update(cid.encode() + b"\0" + inst.chains[cid].log_digest().encode())
    return TraceResult(verdict, pos, reason, error, list(inst.steps), inst.gas(), inst.latency(), h.hexdigest(),
                       main.digest(exclude=APP_EXCLUDE), "SUCCESS" if verdict == "Conforming" else None,
                       list(inst.tx_log))


def run_trace(handle: Instance, trace: Sequence[Mapping]) -> TraceResult:
    for i, e in enumerate(trace):
        handle.step_index = i
        try:
            handle.invoke_api(e["actor"], e["call"], e.get("payload", {}))
        except BpmnChainError as exc:
            return _result(handle, "NonConforming", i, str(exc), exc.code)
    if not handle.is_terminal():
        return _result(handle, "NonConforming", len(trace), "terminal configuration not reached", "Incomplete")
    return _result(handle, "Conforming", None, "", None)
