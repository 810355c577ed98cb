"""Command line: parse, analyze, select, compile, run, verify, cost."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .bpmn_ir import model_to_dict
from .contractgen import (MODES, ContractPackage, estimate_costs, load_calibration, load_selection,
                          mainchain_variant, select_transactions)
from .errors import BpmnChainError, ValidationError
from .graph_analysis import analysis_to_dict
from .ledger_sim import build_chains, load_profiles
from .pipeline import compile_model, data_path, load_layout, package
from .runtime import (Faults, TokenGame, deploy, generate_cases, load_trace, run_trace)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_VERDICT = 0, 1, 2, 3
DEFAULT_SIZES = "75,512,1024,1875"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    p.write_text(text)
    return p


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _need(args, *names: str) -> None:
    for n in names:
        if getattr(args, n, None) is None:
            raise _Usage(f"--{n.replace('_', '-')} is required for '{args.command}'")
    for n in ("model", "annotations", "selection", "chains", "calibration", "trace", "faults", "package"):
        v = getattr(args, n, None)
        if v is not None and not Path(v).exists():
            raise _Usage(f"file not found: {v}")


class _Usage(Exception):
    pass


# ---------------------------------------------------------------- commands


def cmd_parse(args) -> int:
    _need(args, "model")
    c = compile_model(args.model, args.annotations)
    out = Path(args.out)
    _write(out, "model.json", _dump(model_to_dict(c.model)))
    _write(out, "dag.dot", c.dag.to_dot(name=Path(args.model).stem))
    m = c.model
    print(f"{Path(args.model).name}: {m.count('task')} tasks, {m.gateway_count()} gateways, "
          f"{len(c.dag.vertices)} vertices, {len(c.dag.edges)} edges, actors {', '.join(m.actors)}")
    return EXIT_OK


def _palette(i: int) -> str:
    colors = ["#8dd3c7", "#ffffb3", "#bebada", "#fb8072", "#80b1d3", "#fdb462", "#b3de69", "#fccde5"]
    return colors[i % len(colors)]


def _lattice_dot(an) -> str:
    lines = ["digraph lattice {", "  node [shape=box];"]
    for n in an.lattice.nodes:
        style = ", style=bold" if n.kind == "lsi" else ""
        lines.append(f'  "{n.id}" [label="{n.id} ({len(n.members)})"{style}];')
    for child, parents in sorted(an.lattice.parents.items()):
        for p in parents:
            lines.append(f'  "{p}" -> "{child}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    _need(args, "model")
    c = compile_model(args.model, args.annotations)
    an = c.analysis
    out = Path(args.out)
    _write(out, "analysis.json", _dump(analysis_to_dict(an)))
    _write(out, "lattice.dot", _lattice_dot(an))
    colors = {v: _palette(i) for i, s in enumerate(an.decomposition.subgraphs) for v in s.members}
    _write(out, "dag.dot", c.dag.to_dot(colors, name=Path(args.model).stem))
    _write(out, "dehsm.dot", c.dehsm.to_dot())
    print(f"{'id':<5} {'kind':<5} {'entry':<24} {'exit':<24} {'parents':<12} members")
    for s in an.subgraphs:
        parents = ",".join(an.lattice.parents.get(s.id, [])) or "-"
        print(f"{s.id:<5} {s.kind:<5} {str(s.entry or '(start)'):<24} {str(s.exit or '(end)'):<24} "
              f"{parents:<12} {', '.join(sorted(s.members))}")
    return EXIT_OK


def _interactive_selection(an) -> dict:
    print("available subgraphs: " + ", ".join(s.id for s in an.subgraphs))
    ids = input("subgraphs to make transactions (comma separated): ").strip()
    chosen = [x.strip() for x in ids.split(",") if x.strip()]
    tx = []
    for sid in chosen:
        mode = input(f"workspace mode for {sid} [{'/'.join(MODES)}] (sc-all): ").strip() or "sc-all"
        tx.append({"subgraph": sid, "mode": mode})
    return {"transactions": tx}


def cmd_select(args) -> int:
    _need(args, "model")
    c = compile_model(args.model, args.annotations)
    out = Path(args.out)
    if args.interactive:
        selection = _interactive_selection(c.analysis)
        _write(out, "selection.json", _dump(selection))
    else:
        _need(args, "selection")
        selection = load_selection(args.selection)
    plan = select_transactions(c.analysis.lattice, selection, c.dag)
    _write(out, "plan.json", _dump(plan.to_dict()))
    for e in plan.entries:
        print(f"{e.id}: mode {e.mode}, participants {', '.join(e.participants)}"
              + (f", children {', '.join(e.children)}" if e.children else ""))
    return EXIT_OK


def cmd_compile(args) -> int:
    _need(args, "model", "selection")
    c = compile_model(args.model, args.annotations)
    selection = load_selection(args.selection)
    pkg = package(c, selection, load_layout(args.chains), Path(args.model).stem)
    calib = load_calibration(args.calibration)
    report = estimate_costs(pkg, _sizes(args.sizes), calib)
    out = Path(args.out)
    _write(out, "package.json", pkg.to_json())
    _write(out, "dehsm.dot", c.dehsm.to_dot())
    if args.emit_model:
        _write(out, "dehsm.json", _dump(c.dehsm.to_dict()))
    _write(out, "cost.csv", report.to_csv())
    _write(out, "cost.txt", report.to_table())
    print(f"{len(pkg.methods)} methods:")
    for m in pkg.methods:
        print(f"  {m.id:<22} {m.chain:<11} {m.contract:<18} api {','.join(m.api) or '-'}")
    return EXIT_OK


def _sizes(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise _Usage(f"bad --sizes value {text!r}") from None


def _chains_for(pkg: ContractPackage, chains_path: Optional[str], calib):
    profiles = load_profiles(chains_path or data_path("chains.json"))
    layout = load_layout(chains_path) if chains_path else dict(pkg.deployment.get("chains", {"main": "ethereum-like"}))
    return build_chains(layout, profiles, calib.base_rate)


def _run_once(pkg, args, calib, observer=None):
    chains = _chains_for(pkg, args.chains, calib)
    inst = deploy(pkg, chains, Faults.load(args.faults), args.seed, calib)
    if observer:
        inst.observer = observer
    return run_trace(inst, load_trace(args.trace))


def _print_event(r) -> None:
    moves = " ".join(f"{a}->{b}" for a, b in r.transitions) or ("absorbed" if r.absorbed else "")
    acts = "; ".join(r.actions)
    print(f"  t={r.time:<3} {r.fsm:<10} {r.trigger:<22} {moves}" + (f"  [{acts}]" if acts else ""))


def cmd_run(args) -> int:
    _need(args, "package", "trace")
    pkg = ContractPackage.load(args.package)
    calib = load_calibration(args.calibration)
    out = Path(args.out)
    if args.compare_deployments:
        hybrid = _run_once(pkg, args, calib)
        single = _run_once(mainchain_variant(pkg), args, calib)
        rows = [("hybrid", hybrid), ("mainchain-only", single)]
        print(f"{'deployment':<16} {'verdict':<14} {'gas (GWei)':>16} {'latency (ms)':>16}")
        for label, r in rows:
            print(f"{label:<16} {r.verdict:<14} {sum(r.gas.values()):>16,.0f} {sum(r.latency_ms.values()):>16,.1f}")
        _write(out, "compare.json", _dump({label: r.to_dict() for label, r in rows}))
        return EXIT_OK if all(r.conforming for _, r in rows) else EXIT_VERDICT
    result = _run_once(pkg, args, calib, _print_event if args.step else None)
    _write(out, "run.json", result.to_json())
    _write(out, "run.txt", result.summary())
    sys.stdout.write(result.summary())
    return EXIT_OK if result.conforming else EXIT_VERDICT


def cmd_verify(args) -> int:
    _need(args, "package")
    pkg = ContractPackage.load(args.package)
    calib = load_calibration(args.calibration)
    base = deploy(pkg, _chains_for(pkg, args.chains, calib), Faults(), args.seed, calib)
    game = TokenGame(base.bpmn, base.dag)
    positives, negatives = generate_cases(game, args.count, args.count, args.seed)
    matrix = {"conforming": {"accepted": 0, "rejected": 0}, "mutated": {"accepted": 0, "rejected": 0}}
    by_kind: dict = {}
    failures = []
    for i, t in enumerate(positives):
        r = run_trace(base.clone(), t)
        matrix["conforming"]["accepted" if r.conforming else "rejected"] += 1
        if not r.conforming:
            failures.append({"index": i, "kind": "conforming", "reason": r.reason})
    for i, (kind, t) in enumerate(negatives):
        r = run_trace(base.clone(), t)
        matrix["mutated"]["accepted" if r.conforming else "rejected"] += 1
        k = by_kind.setdefault(kind, {"accepted": 0, "rejected": 0})
        k["accepted" if r.conforming else "rejected"] += 1
        if r.conforming:
            failures.append({"index": i, "kind": kind, "reason": "accepted"})
    report = {"count": args.count, "seed": args.seed, "matrix": matrix, "mutations": by_kind, "failures": failures}
    _write(Path(args.out), "verify.json", _dump(report))
    print(f"{'':<12} {'accepted':>9} {'rejected':>9}")
    for row in ("conforming", "mutated"):
        print(f"{row:<12} {matrix[row]['accepted']:>9} {matrix[row]['rejected']:>9}")
    for kind in sorted(by_kind):
        print(f"  {kind:<10} {by_kind[kind]['accepted']:>9} {by_kind[kind]['rejected']:>9}")
    return EXIT_VERDICT if failures else EXIT_OK


def cmd_cost(args) -> int:
    if args.package is not None:
        _need(args)
    pkg = ContractPackage.load(args.package) if args.package else None
    report = estimate_costs(pkg, _sizes(args.sizes), load_calibration(args.calibration))
    out = Path(args.out)
    _write(out, "cost.csv", report.to_csv())
    _write(out, "cost.txt", report.to_table())
    sys.stdout.write(report.to_table())
    return EXIT_OK


COMMANDS = {
    "parse": cmd_parse, "analyze": cmd_analyze, "select": cmd_select, "compile": cmd_compile,
    "run": cmd_run, "verify": cmd_verify, "cost": cmd_cost,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bpmnchain", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        if name in ("parse", "analyze", "select", "compile"):
            s.add_argument("model_pos", nargs="?", metavar="MODEL")
            s.add_argument("--model")
            s.add_argument("--annotations")
        if name in ("select", "compile"):
            s.add_argument("--selection")
        if name == "select":
            s.add_argument("--interactive", action="store_true")
        if name == "compile":
            s.add_argument("--emit-model", action="store_true")
        if name in ("run", "verify", "cost"):
            s.add_argument("package", nargs="?")
        if name in ("compile", "run", "verify"):
            s.add_argument("--chains")
        if name in ("compile", "run", "verify", "cost"):
            s.add_argument("--calibration")
        if name in ("compile", "cost"):
            s.add_argument("--sizes", default=DEFAULT_SIZES)
        if name == "run":
            s.add_argument("--trace")
            s.add_argument("--faults")
            s.add_argument("--step", action="store_true")
            s.add_argument("--compare-deployments", action="store_true")
        if name == "verify":
            s.add_argument("--count", type=int, default=200)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", default="out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "model_pos", None) and not args.model:
        args.model = args.model_pos
    try:
        return COMMANDS[args.command](args)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(str(exc), file=sys.stderr)
        _details(exc)
        return EXIT_VALIDATION
    except BpmnChainError as exc:
        print(str(exc), file=sys.stderr)
        _details(exc)
        return EXIT_VERDICT


def _details(exc: BpmnChainError) -> None:
    for k, v in sorted(exc.details.items()):
        print(f"  {k}: {v}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
