"""SESE regions of the flow DAG.

An LSI block is a single-entry single-exit region whose interior vertices
have exactly one incoming and one outgoing edge. The decomposition glues an
edge (u, v) into a block when either

* it lies inside a *closed fork*: every branch leaving the fork ``u`` runs
  through (1,1) vertices into the same merge ``w`` and ``w`` has no other
  incoming edge, or
* it is a plain chain link: ``u`` has one successor and at most one
  predecessor, ``v`` has one predecessor and at most one successor.

Blocks are the connected components of glued edges. Every vertex not touched
by a glued edge forms a singleton block.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Optional, Sequence

from .bpmn_ir import Dag
from .errors import CycleDetected, NotADag, NotNormalized, TheoremViolation, TooLarge


@dataclass(frozen=True)
class SeseSubgraph:
    id: str
    entry: Optional[str]
    exit: Optional[str]
    members: frozenset
    internal_edges: frozenset
    kind: str = "sese"  # "lsi" for blocks of the decomposition

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "entry": self.entry,
            "exit": self.exit,
            "memberCount": len(self.members),
            "members": sorted(self.members),
        }


@dataclass
class LsiDecomposition:
    subgraphs: list
    interconnect: frozenset

    def block_of(self) -> dict:
        return {v: s.id for s in self.subgraphs for v in s.members}

    def by_id(self) -> dict:
        return {s.id: s for s in self.subgraphs}


@dataclass
class SeseLattice:
    nodes: list
    parents: dict  # id -> sorted list of covering parent ids
    chains: list  # (from id, to id) where from.exit flows into to.entry
    is_forest: bool = True

    def children(self, sid: str) -> list:
        return sorted((c for c, ps in self.parents.items() if sid in ps), key=self._order)

    def roots(self) -> list:
        return [n.id for n in self.nodes if not self.parents[n.id]]

    def by_id(self) -> dict:
        return {n.id: n for n in self.nodes}

    def _order(self, sid: str) -> int:
        return [n.id for n in self.nodes].index(sid)

    def to_dict(self) -> dict:
        return {
            "nodes": [n.id for n in self.nodes],
            "parents": {k: list(v) for k, v in self.parents.items()},
            "chains": [list(c) for c in self.chains],
            "isForest": self.is_forest,
        }


@dataclass
class Analysis:
    dag: Dag
    decomposition: LsiDecomposition
    subgraphs: list  # LSI blocks first, then block-aligned composites
    lattice: SeseLattice
    all_sese: list = field(default_factory=list)

    def subgraph(self, sid: str) -> SeseSubgraph:
        for s in self.subgraphs:
            if s.id == sid:
                return s
        raise KeyError(sid)


# ---------------------------------------------------------------- helpers


def _check_dag(dag: Dag) -> None:
    try:
        dag.topological_order()
    except CycleDetected as exc:
        raise NotADag(str(exc), path=exc.details.get("path")) from None


def _rank(dag: Dag) -> dict:
    order = dag.bfs_order()
    rank = {v: i for i, v in enumerate(order)}
    for v in dag.ids:  # unreachable vertices, if any, go last in id order
        rank.setdefault(v, len(rank))
    return rank


def _edges_within(dag: Dag, members: Iterable[str]) -> frozenset:
    ms = set(members)
    return frozenset((s, t) for (s, t) in dag.edges if s in ms and t in ms)


def _boundary(dag: Dag, members: frozenset) -> tuple[Optional[str], Optional[str]]:
    """Entry/exit of a block; None stands for the start/end exceptions."""
    ins = [v for v in members if any(p not in members for p in dag.pred[v])]
    outs = [v for v in members if any(s not in members for s in dag.succ[v])]
    entry = ins[0] if ins else None
    exit_ = outs[0] if outs else None
    if len(members) == 1:
        (v,) = members
        entry = None if not dag.pred[v] else v
        exit_ = None if not dag.succ[v] else v
    return entry, exit_


def closed_fork(dag: Dag, u: str) -> Optional[tuple[str, list]]:
    """If every branch of fork ``u`` reaches one merge through (1,1) vertices,
    return (merge, branch paths)."""
    outs = dag.succ[u]
    if len(outs) < 2:
        return None
    merge = None
    paths = []
    for first in outs:
        path = []
        v = first
        while dag.vertex(v).in_degree == 1 and dag.vertex(v).out_degree == 1:
            path.append(v)
            v = dag.succ[v][0]
        if merge is None:
            merge = v
        elif v != merge:
            return None
        paths.append(path)
    if merge is None or dag.vertex(merge).in_degree != len(outs):
        return None
    return merge, paths


# ---------------------------------------------------------------- LSI decomposition


def find_lsi_subgraphs(dag: Dag) -> LsiDecomposition:
    _check_dag(dag)
    for v in dag.vertices:
        if v.in_degree > 1 and v.out_degree > 1:
            raise NotNormalized(f"vertex {v.id} both merges and forks", vertex=v.id)

    rank = _rank(dag)
    regions = {}
    for v in dag.vertices:
        found = closed_fork(dag, v.id)
        if found:
            regions[v.id] = found

    def glued(s: str, y: str) -> bool:
        vs, vy = dag.vertex(s), dag.vertex(y)
        if vs.out_degree == 1 and vs.in_degree <= 1 and vy.in_degree == 1 and vy.out_degree <= 1:
            return True
        return s in owner and owner[s] == owner.get(y)

    owner: dict[str, str] = {}  # vertex -> closed fork it belongs to
    for u, (w, paths) in regions.items():
        for v in [u, w, *(x for p in paths for x in p)]:
            owner[v] = u

    # breadth-first sweep propagating roots along glued edges
    root = {v: v for v in dag.ids}
    order = sorted(dag.ids, key=rank.__getitem__)
    for s in order:
        for y in dag.succ[s]:
            if glued(s, y):
                root[y] = root[s]

    groups: dict[str, list] = {}
    for v in order:
        groups.setdefault(root[v], []).append(v)

    # emit one candidate per entry-to-exit path, then merge same entry/exit
    candidates: list[frozenset] = []
    for r, members in groups.items():
        if r in regions:
            w, paths = regions[r]
            candidates.extend(frozenset([r, w, *p]) for p in paths)
        else:
            candidates.append(frozenset(members))
    merged: dict[tuple, set] = {}
    for c in candidates:
        key = _boundary(dag, c) if len(c) > 1 else ("single", next(iter(c)))
        if r_key := _region_key(c, regions):
            key = r_key
        merged.setdefault(key, set()).update(c)

    blocks = sorted((frozenset(m) for m in merged.values()), key=lambda m: min(rank[v] for v in m))
    subs = []
    for i, m in enumerate(blocks, 1):
        en, ex = _boundary(dag, m)
        subs.append(SeseSubgraph(f"S{i}", en, ex, m, _edges_within(dag, m), "lsi"))
    internal = set().union(*(s.internal_edges for s in subs)) if subs else set()
    decomp = LsiDecomposition(subs, frozenset(dag.edges - internal))
    check_decomposition(dag, decomp)
    return decomp


def _region_key(c: frozenset, regions: dict) -> Optional[tuple]:
    # a branch path of a closed fork is keyed by (fork, merge) so that the
    # per-path candidates combine exactly like the same-entry/exit rule
    for u, (w, _) in regions.items():
        if u in c and w in c:
            return ("region", u, w)
    return None


def check_decomposition(dag: Dag, decomp: LsiDecomposition) -> None:
    seen: dict[str, str] = {}
    for s in decomp.subgraphs:
        for v in s.members:
            if v in seen:
                raise TheoremViolation(f"{v} in both {seen[v]} and {s.id}")
            seen[v] = s.id
    if set(seen) != set(dag.ids):
        raise TheoremViolation("decomposition does not cover every vertex")
    for s in decomp.subgraphs:
        if len(s.members) == 1:
            continue
        for v in s.members - {s.entry, s.exit}:
            vx = dag.vertex(v)
            if not dag.pred[v] or not dag.succ[v]:
                continue  # start/end vertex standing in for an absent entry/exit
            if (vx.in_degree, vx.out_degree) != (1, 1):
                raise TheoremViolation(f"interior vertex {v} of {s.id} is not (1,1)")
    for (a, b) in decomp.interconnect:
        sa = next(s for s in decomp.subgraphs if a in s.members)
        sb = next(s for s in decomp.subgraphs if b in s.members)
        if a != sa.exit or b != sb.entry:
            raise TheoremViolation(f"interconnect edge ({a}, {b}) is not exit-to-entry")


# ---------------------------------------------------------------- brute-force oracle


def admissible_block(dag: Dag, members: frozenset) -> Optional[tuple]:
    """Definition-level check of an LSI block; returns (entry, exit) or None."""
    if len(members) == 1:
        (v,) = members
        return v, v
    # weakly connected through internal edges
    start = next(iter(members))
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for w in list(dag.succ[v]) + list(dag.pred[v]):
            if w in members and w not in seen:
                seen.add(w)
                stack.append(w)
    if seen != members:
        return None
    en = [v for v in members if any(p not in members for p in dag.pred[v])]
    ex = [v for v in members if any(s not in members for s in dag.succ[v])]
    if len(en) > 1 or len(ex) > 1:
        return None
    if en:
        entry = en[0]
    else:
        srcs = [v for v in members if not dag.pred[v]]
        if len(srcs) != 1:
            return None
        entry = srcs[0]
    if ex:
        exit_ = ex[0]
    else:
        sinks = [v for v in members if not dag.succ[v]]
        if len(sinks) != 1:
            return None
        exit_ = sinks[0]
    if entry == exit_:
        return None
    for v in members:
        vx = dag.vertex(v)
        if v not in (entry, exit_) and (vx.in_degree, vx.out_degree) != (1, 1):
            return None
        if vx.out_degree > 1 and v != entry:
            return None
        if vx.in_degree > 1 and v != exit_:
            return None
    return entry, exit_


def brute_force_oracle(dag: Dag, limit: int = 14) -> LsiDecomposition:
    """Exhaustive LSI decomposition straight from the definitions."""
    ids = sorted(dag.ids)
    if len(ids) > limit:
        raise TooLarge(f"{len(ids)} vertices exceed the oracle limit of {limit}")
    _check_dag(dag)
    admissible: list[frozenset] = []
    n = len(ids)
    for mask in range(1, 1 << n):
        members = frozenset(ids[i] for i in range(n) if mask >> i & 1)
        if admissible_block(dag, members) is not None:
            admissible.append(members)
    maximal = [a for a in admissible if not any(a < b for b in admissible)]
    merged: dict[tuple, set] = {}
    for m in maximal:
        merged.setdefault(admissible_block(dag, m), set()).update(m)
    blocks = [frozenset(m) for m in merged.values()]
    cover: dict[str, int] = {}
    for b in blocks:
        for v in b:
            cover[v] = cover.get(v, 0) + 1
    if any(c != 1 for c in cover.values()) or set(cover) != set(ids):
        raise TheoremViolation("maximal admissible blocks do not partition the vertices")
    rank = _rank(dag)
    blocks.sort(key=lambda m: min(rank[v] for v in m))
    subs = []
    for i, m in enumerate(blocks, 1):
        en, ex = _boundary(dag, m)
        subs.append(SeseSubgraph(f"S{i}", en, ex, m, _edges_within(dag, m), "lsi"))
    internal = set().union(*(s.internal_edges for s in subs)) if subs else set()
    return LsiDecomposition(subs, frozenset(dag.edges - internal))


# ---------------------------------------------------------------- SESE enumeration


def _reach(adj: dict, start: str) -> set:
    seen = {start}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return seen


def enumerate_sese(dag: Dag) -> list:
    """Every (entry, exit) pair whose in-between region is localized."""
    _check_dag(dag)
    ids = dag.ids
    desc = {v: _reach(dag.succ, v) for v in ids}
    anc = {v: _reach(dag.pred, v) for v in ids}
    sources = set(dag.sources())
    sinks = set(dag.sinks())
    rank = _rank(dag)
    found: dict[tuple, frozenset] = {}
    for en in [None, *ids]:
        if en in sources:
            continue  # a start vertex never acts as an entry
        for ex in [None, *ids]:
            if ex in sinks:
                continue
            if en is None and ex is None:
                members = set(ids)
            elif en is None:
                members = set(anc[ex])
            elif ex is None:
                members = set(desc[en])
            else:
                if ex not in desc[en]:
                    continue
                members = desc[en] & anc[ex]
            if len(members) < 2:
                continue
            if en is None and len(members & sources) != 1:
                continue
            if ex is None and len(members & sinks) != 1:
                continue
            ok = True
            for v in members:
                if v != en and any(p not in members for p in dag.pred[v]):
                    ok = False
                    break
                if v != ex and any(s not in members for s in dag.succ[v]):
                    ok = False
                    break
            if ok:
                found[(en, ex)] = frozenset(members)
    ordered = sorted(found.items(), key=lambda kv: (
        -1 if kv[0][0] is None else rank[kv[0][0]], len(kv[1]), sorted(rank[v] for v in kv[1])))
    return [SeseSubgraph(f"R{i}", en, ex, m, _edges_within(dag, m)) for i, ((en, ex), m) in enumerate(ordered, 1)]


def is_sese_set(dag: Dag, members: frozenset) -> bool:
    """Localization check for an arbitrary vertex set (single vertices count)."""
    if len(members) == 1:
        return True
    en = [v for v in members if any(p not in members for p in dag.pred[v])]
    ex = [v for v in members if any(s not in members for s in dag.succ[v])]
    if len(en) > 1 or len(ex) > 1:
        return False
    entry = en[0] if en else None
    exit_ = ex[0] if ex else None
    if entry is None:
        srcs = [v for v in members if not dag.pred[v]]
        if len(srcs) != 1:
            return False
        entry = srcs[0]
    if exit_ is None:
        snk = [v for v in members if not dag.succ[v]]
        if len(snk) != 1:
            return False
        exit_ = snk[0]
    inner = _reach({v: [w for w in dag.succ[v] if w in members] for v in members}, entry)
    back = _reach({v: [w for w in dag.pred[v] if w in members] for v in members}, exit_)
    return inner == members and back == members


def check_trichotomy(dag: Dag, subs: Sequence[SeseSubgraph]) -> None:
    """Any two regions are disjoint, nested, or overlap in a region."""
    for a, b in combinations(subs, 2):
        inter = a.members & b.members
        if not inter or a.members <= b.members or b.members <= a.members:
            continue
        if not is_sese_set(dag, frozenset(inter)):
            raise TheoremViolation(f"{a.id} and {b.id} overlap in a non-region", pair=(a.id, b.id))


def build_lattice(subs: Sequence[SeseSubgraph], dag: Optional[Dag] = None) -> SeseLattice:
    subs = list(subs)
    if dag is not None:
        check_trichotomy(dag, subs)
    parents: dict[str, list] = {}
    for s in subs:
        supers = [t for t in subs if s.members < t.members]
        cover = [t for t in supers if not any(s.members < u.members < t.members for u in supers)]
        parents[s.id] = [t.id for t in cover]
    chains = []
    for a in subs:
        for b in subs:
            if a is b or a.exit is None or b.entry is None:
                continue
            if a.members & b.members:
                continue
            if (dag is not None and (a.exit, b.entry) in dag.edges) or (dag is None and a.exit == b.entry):
                chains.append((a.id, b.id))
    forest = all(len(p) <= 1 for p in parents.values())
    return SeseLattice(subs, parents, chains, forest)


# ---------------------------------------------------------------- full analysis


def analyze(dag: Dag) -> Analysis:
    """LSI blocks plus every region that is a union of two or more blocks."""
    decomp = find_lsi_subgraphs(dag)
    block_of = decomp.block_of()
    all_sese = enumerate_sese(dag)
    rank = _rank(dag)
    lsi_sets = {s.members for s in decomp.subgraphs}
    composites = []
    for r in all_sese:
        blocks = {block_of[v] for v in r.members}
        union = frozenset().union(*(decomp.by_id()[b].members for b in blocks))
        if len(blocks) >= 2 and union == r.members and r.members not in lsi_sets:
            composites.append(r)
    composites.sort(key=lambda r: (-1 if r.entry is None else rank[r.entry], len(r.members)))
    named = list(decomp.subgraphs)
    k = len(named)
    for i, r in enumerate(composites, k + 1):
        named.append(SeseSubgraph(f"S{i}", r.entry, r.exit, r.members, r.internal_edges, "sese"))
    lattice = build_lattice(named, dag)
    return Analysis(dag, decomp, named, lattice, all_sese)


def analysis_to_dict(an: Analysis) -> dict:
    return {
        "subgraphs": [s.to_dict() for s in an.subgraphs],
        "interconnect": sorted([list(e) for e in an.decomposition.interconnect]),
        "lattice": an.lattice.to_dict(),
    }


_PALETTE = ["#8dd3c7", "#ffffb3", "#bebada", "#fb8072", "#80b1d3", "#fdb462", "#b3de69",
            "#fccde5", "#d9d9d9", "#bc80bd", "#ccebc5", "#ffed6f"]


def decomposition_dot(dag: Dag, decomp: LsiDecomposition) -> str:
    colors = {}
    for i, s in enumerate(decomp.subgraphs):
        for v in s.members:
            colors[v] = _PALETTE[i % len(_PALETTE)]
    return dag.to_dot(colors, name="lsi")
