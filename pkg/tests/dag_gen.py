"""Seeded generator of random normalized flow DAGs."""

from __future__ import annotations

import random

from bpmnchain.bpmn_ir import Dag


def random_dag(rng: random.Random, n: int) -> Dag:
    """Single source, every vertex reachable, no vertex both merges and forks."""
    ids = [f"v{i:02d}" for i in range(n)]
    ins = {v: 0 for v in ids}
    outs = {v: 0 for v in ids}
    edges: set = set()

    def can_add(p: str, c: str) -> bool:
        if (p, c) in edges:
            return False
        if ins[p] > 1 and outs[p] >= 1:
            return False
        if outs[c] > 1 and ins[c] >= 1:
            return False
        # would p become (in>1, out>1) or c become (in>1, out>1)?
        if ins[p] > 1:
            return False
        if outs[c] > 1:
            return False
        if ins[c] >= 1 and outs[c] > 1:
            return False
        return True

    for i in range(1, n):
        c = ids[i]
        earlier = ids[:i]
        choices = [p for p in earlier if can_add(p, c)]
        if not choices:
            choices = [ids[i - 1]]
        p = rng.choice(choices)
        edges.add((p, c))
        outs[p] += 1
        ins[c] += 1
    extra = rng.randint(0, n)
    for _ in range(extra):
        i, j = sorted(rng.sample(range(n), 2))
        p, c = ids[i], ids[j]
        if j == 0 or (p, c) in edges:
            continue
        if ins[p] > 1 or (outs[c] > 0 and ins[c] >= 1) or outs[c] > 1:
            continue
        if outs[p] >= 1 and ins[p] > 1:
            continue
        edges.add((p, c))
        outs[p] += 1
        ins[c] += 1
    dag = Dag.from_edges(sorted(edges))
    for v in dag.vertices:
        assert not (v.in_degree > 1 and v.out_degree > 1), v
    return dag


def structured_dag(rng: random.Random, max_n: int = 12) -> Dag:
    """Series composition of chains and fork/merge diamonds, then an
    optional perturbing edge. Produces many closed forks."""
    edges: list = []
    count = [0]

    def new() -> str:
        v = f"w{count[0]:02d}"
        count[0] += 1
        return v

    cur = new()
    while count[0] < max_n - 1:
        room = max_n - count[0]
        piece = rng.random()
        if piece < 0.45 or room < 4:
            nxt = new()
            edges.append((cur, nxt))
            cur = nxt
            continue
        fork = new()
        edges.append((cur, fork))
        merge_id = None
        branches = rng.randint(2, 3)
        ends = []
        for _ in range(branches):
            length = rng.randint(0, 2)
            prev = fork
            for _ in range(length):
                if count[0] >= max_n - 2:
                    break
                v = new()
                edges.append((prev, v))
                prev = v
            ends.append(prev)
        merge_id = new()
        for e in ends:
            if (e, merge_id) not in edges:
                edges.append((e, merge_id))
        cur = merge_id
    if rng.random() < 0.5:
        end = new()
        edges.append((cur, end))
    dag = Dag.from_edges(edges)
    if rng.random() < 0.4:
        # perturb: an extra forward edge that keeps the graph normalized
        order = dag.topological_order()
        for _ in range(10):
            i, j = sorted(rng.sample(range(len(order)), 2))
            p, c = order[i], order[j]
            vp, vc = dag.vertex(p), dag.vertex(c)
            if (p, c) in dag.edges or vp.in_degree > 1 or vc.out_degree > 1:
                continue
            dag = Dag.from_edges(edges + [(p, c)])
            break
    for v in dag.vertices:
        assert not (v.in_degree > 1 and v.out_degree > 1), v
    return dag
