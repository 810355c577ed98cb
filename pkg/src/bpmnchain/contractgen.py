"""Contract packages: transaction selection, method tables, deployment, costs."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .bpmn_ir import BpmnModel, Dag, model_to_dict
from .dehsm import DeHsmModel
from .errors import (IllegalNesting, IndependenceViolation, MissingCalibrationEntry, NoSuchSidechain,
                     OverlappingSelections, PackageCorrupt, UnknownSubgraph, ValidationError)
from .graph_analysis import SeseLattice
from .scripts import static_read_set

MODES = ("sc-all", "sc-2m", "sc-2s", "sc-2s-crypto")
SIDECHAIN_MODES = ("sc-2s", "sc-2s-crypto")
COST_MODES = ("no-xa",) + MODES
DEFAULT_SIDECHAIN = "quorum-sim"
MAIN = "main"
FORMAT = 1


# ---------------------------------------------------------------- plans


@dataclass
class TxEntry:
    id: str
    subgraph: str
    members: frozenset
    participants: tuple
    mode: str = "sc-all"
    sidechain: Optional[str] = None
    children: list = field(default_factory=list)
    parent: Optional[str] = None
    entry: Optional[str] = None
    exit: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "subgraph": self.subgraph,
            "members": sorted(self.members),
            "participants": list(self.participants),
            "mode": self.mode,
            "sidechain": self.sidechain,
            "children": list(self.children),
            "parent": self.parent,
            "entry": self.entry,
            "exit": self.exit,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TxEntry":
        return cls(d["id"], d["subgraph"], frozenset(d["members"]), tuple(d["participants"]), d["mode"],
                   d.get("sidechain"), list(d.get("children", [])), d.get("parent"), d.get("entry"), d.get("exit"))


@dataclass
class TransactionPlan:
    entries: list  # TxEntry, parents before children

    def by_id(self) -> dict:
        return {e.id: e for e in self.entries}

    def roots(self) -> list:
        return [e for e in self.entries if e.parent is None]

    def innermost(self, vertex: str) -> Optional[TxEntry]:
        best = None
        for e in self.entries:
            if vertex in e.members and (best is None or len(e.members) < len(best.members)):
                best = e
        return best

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TransactionPlan":
        return cls([TxEntry.from_dict(e) for e in d["entries"]])


def load_selection(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"selection {path}: {exc}") from None
    if not isinstance(data, dict) or not isinstance(data.get("transactions", []), list):
        raise ValidationError(f"selection {path}: expected an object with a 'transactions' list")
    return data


def select_transactions(lattice: SeseLattice, selection: Mapping[str, Any], dag: Dag) -> TransactionPlan:
    """Validate a selection against the lattice and compute participants."""
    nodes = lattice.by_id()
    entries: list[TxEntry] = []

    def visit(item: Mapping[str, Any], parent: Optional[TxEntry]) -> None:
        sid = item.get("subgraph")
        if sid not in nodes:
            raise UnknownSubgraph(f"no subgraph {sid!r} in the analysis", subgraph=sid)
        sub = nodes[sid]
        mode = item.get("mode", parent.mode if parent else "sc-all")
        if mode not in MODES:
            raise ValidationError(f"{sid}: unknown workspace mode {mode!r}")
        side = item.get("sidechain", parent.sidechain if parent else None)
        if mode in SIDECHAIN_MODES and side is None:
            side = DEFAULT_SIDECHAIN
        if mode not in SIDECHAIN_MODES:
            side = None
        if parent is not None and not sub.members < parent.members:
            raise IllegalNesting(f"{sid} is not strictly inside {parent.subgraph}", child=sid, parent=parent.subgraph)
        pools = sorted({dag.vertex(v).pool for v in sub.members if dag.vertex(v).pool})
        e = TxEntry(f"tx:{sid}", sid, sub.members, tuple(pools), mode, side, [],
                    parent.id if parent else None, sub.entry, sub.exit)
        if any(x.id == e.id for x in entries):
            raise OverlappingSelections(f"{sid} selected twice", subgraph=sid)
        entries.append(e)
        if parent is not None:
            parent.children.append(e.id)
        for child in item.get("children", []):
            visit(child, e)

    for item in selection.get("transactions", []):
        visit(item, None)

    by_id = {e.id: e for e in entries}

    def ancestors(e: TxEntry) -> set:
        out = set()
        while e.parent:
            out.add(e.parent)
            e = by_id[e.parent]
        return out

    for i, a in enumerate(entries):
        for b in entries[i + 1:]:
            if not a.members & b.members:
                continue
            if a.id in ancestors(b) or b.id in ancestors(a):
                continue
            raise OverlappingSelections(f"{a.subgraph} and {b.subgraph} share vertices without nesting",
                                        pair=(a.subgraph, b.subgraph))
    # a nested child must not also cover vertices outside of every sibling's parent
    return TransactionPlan(entries)


# ---------------------------------------------------------------- methods and packages


PATTERNS = ("begin-tx", "end-tx", "cache-rewrite", "access-check", "2pc-coordinator", "2pc-participant")


@dataclass
class MethodDescriptor:
    id: str
    owner_kind: str  # actor | transaction
    owner: str
    fsms: list  # fsm ids whose tables this method carries
    api: list  # message flows this method serves
    augmentations: list = field(default_factory=list)  # dicts with a "pattern" key
    calls: list = field(default_factory=list)  # other methods this one invokes
    chain: str = MAIN
    contract: str = "main"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "owner": {"kind": self.owner_kind, "id": self.owner},
            "fsmTables": list(self.fsms),
            "api": list(self.api),
            "augmentations": list(self.augmentations),
            "calls": list(self.calls),
            "chain": self.chain,
            "contract": self.contract,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MethodDescriptor":
        return cls(d["id"], d["owner"]["kind"], d["owner"]["id"], list(d["fsmTables"]), list(d["api"]),
                   list(d.get("augmentations", [])), list(d.get("calls", [])), d.get("chain", MAIN),
                   d.get("contract", "main"))


@dataclass
class ContractPackage:
    model: dict  # normalized model document
    dehsm: dict
    plan: TransactionPlan
    methods: list
    api_map: dict  # message flow -> method id
    fsm_owner: dict  # fsm id -> method id (tx) or "monitor"
    deployment: dict = field(default_factory=dict)  # chains, assignments
    first_call_read_sets: dict = field(default_factory=dict)
    name: str = "process"

    def method(self, mid: str) -> MethodDescriptor:
        for m in self.methods:
            if m.id == mid:
                return m
        raise KeyError(mid)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "name": self.name,
            "model": self.model,
            "dehsm": self.dehsm,
            "plan": self.plan.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "apiMap": dict(sorted(self.api_map.items())),
            "monitorTables": {"routing": self.dehsm.get("routing", {}),
                              "fsmOwner": dict(sorted(self.fsm_owner.items()))},
            "deployment": self.deployment,
            "firstCallReadSets": self.first_call_read_sets,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ContractPackage":
        try:
            if d.get("format") != FORMAT:
                raise PackageCorrupt(f"unsupported package format {d.get('format')!r}")
            pkg = cls(d["model"], d["dehsm"], TransactionPlan.from_dict(d["plan"]),
                      [MethodDescriptor.from_dict(m) for m in d["methods"]], dict(d["apiMap"]),
                      dict(d["monitorTables"]["fsmOwner"]), dict(d.get("deployment", {})),
                      {k: list(v) for k, v in d.get("firstCallReadSets", {}).items()}, d.get("name", "process"))
        except (KeyError, TypeError, AttributeError) as exc:
            raise PackageCorrupt(f"package is missing or mangles {exc}") from None
        return pkg

    @classmethod
    def load(cls, path: str | Path) -> "ContractPackage":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise PackageCorrupt(f"{path}: {exc}") from None


def _submodel_owner(members: Sequence[str], plan: TransactionPlan) -> Optional[str]:
    owners = {getattr(plan.innermost(v), "id", None) for v in members}
    if len(owners) != 1:
        # a block straddling a transaction boundary would break isolation
        raise IndependenceViolation(f"block {sorted(members)} spans transactions {sorted(map(str, owners))}")
    return owners.pop()


def generate_methods(model: DeHsmModel, plan: TransactionPlan, bpmn: BpmnModel, dag: Dag,
                     name: str = "process") -> ContractPackage:
    fsm_owner: dict[str, str] = {}
    for sm in model.submodels:
        owner = _submodel_owner(sm.members, plan)
        for f in sm.fsms:
            fsm_owner[f.id] = owner or "monitor"

    api_map: dict[str, str] = {}
    for f in bpmn.flows:
        if f.kind != "message":
            continue
        tx = plan.innermost(f.target)
        api_map[f.id] = tx.id if tx else f"actor:{dag.vertex(f.target).pool}"

    methods = []
    for actor in bpmn.actors:
        pool_vertices = {v.id for v in dag.vertices if v.pool == actor}
        fsms = sorted(f.id for f in model.fsms()
                      if fsm_owner[f.id] == "monitor" and pool_vertices & set(f.vertices()))
        api = sorted(k for k, m in api_map.items() if m == f"actor:{actor}")
        methods.append(MethodDescriptor(f"actor:{actor}", "actor", actor, fsms, api))
    for e in plan.entries:
        fsms = sorted(f for f, o in fsm_owner.items() if o == e.id)
        aug = [{"pattern": "begin-tx"}, {"pattern": "end-tx"}, {"pattern": "cache-rewrite"},
               {"pattern": "access-check", "participants": list(e.participants)}]
        calls = []
        if e.children:
            aug.append({"pattern": "2pc-coordinator", "children": list(e.children)})
            calls.extend(e.children)
        if e.parent:
            aug.append({"pattern": "2pc-participant", "parent": e.parent})
            calls.append(e.parent)
        api = sorted(k for k, m in api_map.items() if m == e.id)
        methods.append(MethodDescriptor(e.id, "transaction", e.id, fsms, api, aug, calls))

    scripts = bpmn.scripts
    order = dag.topological_order()
    read_sets = {}
    for e in plan.entries:
        ops = [scripts.get(bpmn.task_bindings.get(v, ""), []) for v in order if v in e.members]
        read_sets[e.id] = static_read_set(ops)

    pkg = ContractPackage(model_to_dict(bpmn), model.to_dict(), plan, methods, api_map, fsm_owner,
                          {}, read_sets, name)
    check_independence(pkg)
    expected = len(bpmn.actors) + len(plan.entries)
    if len(methods) != expected:
        raise IndependenceViolation(f"method count {len(methods)} != {expected}")
    return pkg


def check_independence(pkg: ContractPackage) -> None:
    """Transaction methods may only reach methods wired by their own patterns."""
    for m in pkg.methods:
        if m.owner_kind != "transaction":
            continue
        allowed = set()
        for a in m.augmentations:
            allowed.update(a.get("children", []))
            if a.get("parent"):
                allowed.add(a["parent"])
        for c in m.calls:
            if c not in allowed:
                raise IndependenceViolation(f"{m.id} references {c} outside its transaction", method=m.id, ref=c)


def plan_deployment(pkg: ContractPackage, chains: Mapping[str, str]) -> ContractPackage:
    """Assign every method to a chain and contract. ``chains`` maps chain id to profile."""
    if MAIN not in chains:
        raise NoSuchSidechain(f"no '{MAIN}' chain configured")
    by_id = pkg.plan.by_id()
    assignments = {}
    for m in pkg.methods:
        if m.owner_kind == "actor":
            m.chain, m.contract = MAIN, "main"
        else:
            e = by_id[m.owner]
            if e.mode == "sc-all":
                m.chain, m.contract = MAIN, "main"
            elif e.mode == "sc-2m":
                m.chain, m.contract = MAIN, "tx"
            else:
                if e.sidechain not in chains or e.sidechain == MAIN:
                    raise NoSuchSidechain(f"{e.id} wants sidechain {e.sidechain!r}", sidechain=e.sidechain)
                m.chain, m.contract = e.sidechain, f"slave@{e.sidechain}"
        assignments[m.id] = {"chain": m.chain, "contract": m.contract}
    pkg.deployment = {"chains": dict(sorted(chains.items())), "assignments": assignments}
    return pkg


def mainchain_variant(pkg: ContractPackage) -> ContractPackage:
    """Same package with every sidechain-hosted transaction moved to a second mainchain contract."""
    clone = ContractPackage.from_dict(json.loads(pkg.to_json()))
    for e in clone.plan.entries:
        if e.mode in SIDECHAIN_MODES:
            e.mode, e.sidechain = "sc-2m", None
    return plan_deployment(clone, clone.deployment.get("chains", {MAIN: "ethereum-like"}))


# ---------------------------------------------------------------- costs


@dataclass
class CostCalibration:
    gas_price_gwei: float = 20
    base_rate: float = 60_600  # GWei per KB, one ledger pass
    passes: dict = field(default_factory=lambda: {"no-xa": 1, "sc-all": 2, "sc-2m": 2, "sc-2s": 2, "sc-2s-crypto": 2})
    overhead: dict = field(default_factory=dict)  # mode -> {size_kb: GWei}
    two_pc: dict = field(default_factory=dict)  # phase1/phase2 -> {coordFixed, perParticipant}
    call_base_gwei: float = 420_000  # flat charge per method execution
    per_use_case: dict = field(default_factory=dict)  # reference totals

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CostCalibration":
        cal = cls(
            gas_price_gwei=float(d.get("gasPriceGwei", 20)),
            base_rate=float(d["baseRateGweiPerKb"]),
            passes=dict(d.get("passes", cls().passes)),
            overhead={m: {float(k): float(v) for k, v in t.items()} for m, t in d.get("overhead", {}).items()},
            two_pc={p: {k: float(v) for k, v in t.items()} for p, t in d.get("twoPc", {}).items()},
            call_base_gwei=float(d.get("callBaseGwei", 420_000)),
            per_use_case=dict(d.get("perUseCase", {})),
        )
        cal.check()
        return cal

    def to_dict(self) -> dict:
        def num(x: float):
            return int(x) if float(x).is_integer() else x

        return {
            "gasPriceGwei": num(self.gas_price_gwei),
            "baseRateGweiPerKb": num(self.base_rate),
            "passes": self.passes,
            "overhead": {m: {str(num(k)): num(v) for k, v in sorted(t.items())} for m, t in self.overhead.items()},
            "twoPc": {p: {k: num(v) for k, v in t.items()} for p, t in self.two_pc.items()},
            "callBaseGwei": num(self.call_base_gwei),
            "perUseCase": self.per_use_case,
        }

    def check(self) -> None:
        values = [self.gas_price_gwei, self.base_rate, self.call_base_gwei]
        values += [v for t in self.overhead.values() for v in t.values()]
        values += [v for t in self.two_pc.values() for v in t.values()]
        if any(v < 0 for v in values):
            raise ValidationError("calibration values must be non-negative")

    def overhead_at(self, mode: str, size_kb: float) -> tuple:
        """(overhead GWei, extrapolated?) with exact lookups, bracketing
        interpolation inside the table and an affine end fit outside it."""
        if mode == "no-xa":
            return 0.0, False
        table = self.overhead.get(mode)
        if table is None:
            raise MissingCalibrationEntry(f"no overhead table for mode {mode!r}", mode=mode)
        if size_kb in table:
            return table[size_kb], False
        sizes = sorted(table)
        if len(sizes) < 2:
            raise MissingCalibrationEntry(f"{mode}: need two sizes to fit {size_kb} KB", mode=mode)
        if size_kb > sizes[-1]:
            a, b = sizes[-2], sizes[-1]
        elif size_kb < sizes[0]:
            a, b = sizes[0], sizes[1]
        else:
            a = max(s for s in sizes if s < size_kb)
            b = min(s for s in sizes if s > size_kb)
        slope = (table[b] - table[a]) / (b - a)
        value = table[a] + slope * (size_kb - a)
        return value, not (sizes[0] <= size_kb <= sizes[-1])

    def cost(self, mode: str, size_kb: float) -> float:
        return self.cost_detail(mode, size_kb)[0]

    def cost_detail(self, mode: str, size_kb: float) -> tuple:
        if mode not in self.passes:
            raise MissingCalibrationEntry(f"unknown mode {mode!r}", mode=mode)
        over, extrapolated = self.overhead_at(mode, size_kb)
        return self.passes[mode] * self.base_rate * size_kb + over, extrapolated

    def phase(self, which: str, participants: int) -> float:
        t = self.two_pc.get(which)
        if t is None:
            raise MissingCalibrationEntry(f"no 2PC calibration for {which}")
        return t["coordFixed"] + participants * t["perParticipant"]

    def two_pc_cost(self, participants: int) -> tuple:
        return self.phase("phase1", participants), self.phase("phase2", participants)


def default_calibration() -> CostCalibration:
    text = resources.files("bpmnchain").joinpath("data/calibration.json").read_text()
    return CostCalibration.from_dict(json.loads(text))


def load_calibration(path: str | Path | None) -> CostCalibration:
    if path is None:
        return default_calibration()
    try:
        return CostCalibration.from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError) as exc:
        raise ValidationError(f"calibration {path}: {exc}") from None


@dataclass
class CostReport:
    sizes: list
    rows: list  # dicts: mode, sizeKb, gwei, extrapolated
    two_pc: list  # dicts: participants, phase1, phase2
    nesting: list  # dicts: tx, participants, phase1, phase2

    def matrix(self) -> dict:
        return {(r["mode"], r["sizeKb"]): r["gwei"] for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", *[_fmt_size(s) for s in self.sizes]])
        m = self.matrix()
        for mode in COST_MODES:
            w.writerow([mode, *[_fmt_num(m[(mode, s)]) for s in self.sizes]])
        w.writerow([])
        w.writerow(["participants", "phase1", "phase2"])
        for r in self.two_pc:
            w.writerow([r["participants"], _fmt_num(r["phase1"]), _fmt_num(r["phase2"])])
        return buf.getvalue()

    def to_table(self) -> str:
        m = self.matrix()
        flagged = {(r["mode"], r["sizeKb"]) for r in self.rows if r["extrapolated"]}
        width = 16
        lines = ["Processing cost (GWei)", "mode".ljust(14) + "".join(f"{_fmt_size(s)} KB".rjust(width) for s in self.sizes)]
        for mode in COST_MODES:
            cells = []
            for s in self.sizes:
                cell = f"{m[(mode, s)]:,.0f}" + ("*" if (mode, s) in flagged else "")
                cells.append(cell.rjust(width))
            lines.append(mode.ljust(14) + "".join(cells))
        if flagged:
            lines.append("* extrapolated beyond the calibrated sizes")
        lines += ["", "Two-phase commit (GWei)", "participants".ljust(14) + "phase 1".rjust(width) + "phase 2".rjust(width)]
        for r in self.two_pc:
            lines.append(str(r["participants"]).ljust(14) + f"{r['phase1']:,.0f}".rjust(width) + f"{r['phase2']:,.0f}".rjust(width))
        if self.nesting:
            lines += ["", "Nested transactions in this package"]
            for r in self.nesting:
                lines.append(f"{r['tx']}: p={r['participants']} phase1={r['phase1']:,.0f} phase2={r['phase2']:,.0f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "rows": self.rows, "twoPc": self.two_pc, "nesting": self.nesting}


def _fmt_size(s: float):
    return str(int(s)) if float(s).is_integer() else str(s)


def _fmt_num(x: float) -> str:
    return str(int(round(x))) if abs(x - round(x)) < 1e-6 else f"{x:.2f}"


def estimate_costs(pkg: Optional[ContractPackage], sizes_kb: Sequence[float], calib: CostCalibration,
                   participants: Sequence[int] = (2, 3, 4, 5, 6)) -> CostReport:
    rows = []
    for mode in COST_MODES:
        for s in sizes_kb:
            gwei, extra = calib.cost_detail(mode, float(s))
            rows.append({"mode": mode, "sizeKb": float(s), "gwei": gwei, "extrapolated": extra})
    two = [{"participants": p, "phase1": calib.phase("phase1", p), "phase2": calib.phase("phase2", p)}
           for p in participants]
    nesting = []
    if pkg is not None:
        for e in pkg.plan.entries:
            if e.children:
                p = len(e.children) + 1
                nesting.append({"tx": e.id, "participants": p,
                                "phase1": calib.phase("phase1", p), "phase2": calib.phase("phase2", p)})
    return CostReport([float(s) for s in sizes_kb], rows, two, nesting)


# ---------------------------------------------------------------- one-shot compile


def compile_package(bpmn: BpmnModel, dag: Dag, analysis, dehsm: DeHsmModel, selection: Mapping[str, Any],
                    chains: Mapping[str, str], name: str = "process") -> ContractPackage:
    plan = select_transactions(analysis.lattice, selection, dag)
    pkg = generate_methods(dehsm, plan, bpmn, dag, name)
    return plan_deployment(pkg, chains)
