"""BPMN 2.0 XML subset -> validated model -> normalized model -> flow DAG."""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from . import guards as G
from .scripts import RESERVED_PREFIX, check_script
from .errors import (
    CycleDetected,
    DanglingFlow,
    GuardOverlap,
    LoopingConstructUnsupported,
    MissingAnnotation,
    NotADag,
    PoolViolation,
    UnmatchedBoundaryLabel,
    UnsupportedElement,
    ValidationError,
    XmlMalformed,
)

ELEMENT_KINDS = (
    "start-event", "end-event", "intermediate-event", "task", "subprocess",
    "exclusive-gateway", "inclusive-gateway", "parallel-gateway",
)
GATEWAYS = ("exclusive-gateway", "inclusive-gateway", "parallel-gateway")
EVENT_DIMENSIONS = ("none", "message", "timer", "conditional", "signal", "terminate")

_TAG_KIND = {
    "startEvent": "start-event",
    "endEvent": "end-event",
    "intermediateThrowEvent": "intermediate-event",
    "intermediateCatchEvent": "intermediate-event",
    "boundaryEvent": "intermediate-event",
    "task": "task",
    "sendTask": "task",
    "receiveTask": "task",
    "userTask": "task",
    "serviceTask": "task",
    "scriptTask": "task",
    "manualTask": "task",
    "businessRuleTask": "task",
    "subProcess": "subprocess",
    "transaction": "subprocess",  # transactional marker is dropped on purpose
    "exclusiveGateway": "exclusive-gateway",
    "inclusiveGateway": "inclusive-gateway",
    "parallelGateway": "parallel-gateway",
}
_EVENT_DEFS = {
    "messageEventDefinition": "message",
    "timerEventDefinition": "timer",
    "conditionalEventDefinition": "conditional",
    "signalEventDefinition": "signal",
    "terminateEventDefinition": "terminate",
}
_IGNORED_IN_PROCESS = {
    "documentation", "extensionElements", "laneSet", "textAnnotation", "association",
    "dataObject", "dataObjectReference", "dataStoreReference", "property", "ioSpecification",
}
_IGNORED_IN_DEFINITIONS = {
    "documentation", "extensionElements", "message", "signal", "itemDefinition", "error",
    "escalation", "dataStore", "BPMNDiagram", "import", "category", "interface",
}
_IGNORED_IN_COLLABORATION = {"documentation", "extensionElements", "textAnnotation", "association"}
_LOOP_TAGS = {"standardLoopCharacteristics", "multiInstanceLoopCharacteristics"}


@dataclass(frozen=True)
class Boundary:
    attached_to: str
    interrupting: bool
    label: str = ""
    role: str = "catch"  # "throw" marks a boundary begin event


@dataclass(frozen=True)
class Element:
    id: str
    kind: str
    pool: str
    name: str = ""
    lane: Optional[str] = None
    event_dimension: Optional[str] = None
    throwing: bool = False
    boundary: Optional[Boundary] = None
    looping: bool = False
    default_flow: Optional[str] = None


@dataclass(frozen=True)
class Flow:
    id: str
    kind: str  # "sequence" | "message"
    source: str
    target: str
    guard: Optional[G.GuardExpr] = None
    payload_schema: Optional[str] = None
    name: str = ""


@dataclass(frozen=True)
class FieldSpec:
    type: str
    domain: tuple = ()


@dataclass(frozen=True)
class PayloadSchema:
    name: str
    fields: Mapping[str, FieldSpec]

    _PY = {"int": (int,), "float": (int, float), "str": (str,), "bool": (bool,)}

    def validate(self, payload: Mapping[str, Any]) -> Optional[str]:
        """Return a reason string if ``payload`` does not fit, else None."""
        if not isinstance(payload, Mapping):
            return "payload is not an object"
        extra = sorted(set(payload) - set(self.fields))
        if extra:
            return f"undeclared fields {extra}"
        for name, spec in self.fields.items():
            if name not in payload:
                return f"missing field {name!r}"
            v = payload[name]
            ok = isinstance(v, self._PY.get(spec.type, (object,)))
            if spec.type in ("int", "float") and isinstance(v, bool):
                ok = False
            if not ok:
                return f"field {name!r} expects {spec.type}"
        return None

    def to_dict(self) -> dict:
        return {k: {"type": f.type, "domain": list(f.domain)} for k, f in sorted(self.fields.items())}

    @classmethod
    def from_dict(cls, name: str, data: Mapping[str, Any]) -> "PayloadSchema":
        raw = data.get("fields", data)
        return cls(name, {k: FieldSpec(v["type"], tuple(v.get("domain", ()))) for k, v in raw.items()})


@dataclass
class AnnotationConfig:
    guards: dict = field(default_factory=dict)  # flow id -> guard text
    schemas: dict = field(default_factory=dict)  # schema name -> PayloadSchema
    flow_schemas: dict = field(default_factory=dict)  # flow id -> schema name
    boundary_labels: dict = field(default_factory=dict)  # element id -> label
    boundary_roles: dict = field(default_factory=dict)  # boundary element id -> "catch"|"throw"
    scripts: dict = field(default_factory=dict)  # script ref -> op list
    task_bindings: dict = field(default_factory=dict)  # task id -> script ref
    genesis: dict = field(default_factory=dict)  # ledger key -> initial JSON value

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnnotationConfig":
        for name, ops in data.get("scripts", {}).items():
            check_script(ops, name)
        for key in data.get("ledger_init", {}):
            if key.startswith(RESERVED_PREFIX):
                raise ValidationError(f"ledger_init key {key!r} lies in the reserved namespace")
        return cls(
            guards=dict(data.get("guards", {})),
            schemas={k: PayloadSchema.from_dict(k, v) for k, v in data.get("payload_schemas", {}).items()},
            flow_schemas=dict(data.get("flow_schemas", {})),
            boundary_labels=dict(data.get("boundary_labels", {})),
            boundary_roles=dict(data.get("boundary_roles", {})),
            scripts={k: list(v) for k, v in data.get("scripts", {}).items()},
            task_bindings=dict(data.get("task_bindings", {})),
            genesis=dict(data.get("ledger_init", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "AnnotationConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"annotations {path}: {exc}") from None


@dataclass
class BpmnModel:
    elements: list
    flows: list
    actors: list
    task_bindings: dict = field(default_factory=dict)
    scripts: dict = field(default_factory=dict)
    schemas: dict = field(default_factory=dict)
    genesis: dict = field(default_factory=dict)
    normalized: bool = False

    def element(self, eid: str) -> Element:
        for e in self.elements:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def by_id(self) -> dict:
        return {e.id: e for e in self.elements}

    def count(self, kind: str) -> int:
        return sum(1 for e in self.elements if e.kind == kind)

    def gateway_count(self) -> int:
        return sum(1 for e in self.elements if e.kind in GATEWAYS)


# ---------------------------------------------------------------- parsing


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _parse_node(node: ET.Element, kind: str, pool: str, lanes: dict) -> Element:
    eid = node.get("id")
    if not eid:
        raise XmlMalformed(f"<{_local(node.tag)}> without id")
    tag = _local(node.tag)
    dims = [_EVENT_DEFS.get(_local(c.tag)) for c in node if _local(c.tag).endswith("EventDefinition")]
    for c in node:
        lt = _local(c.tag)
        if lt.endswith("EventDefinition") and lt not in _EVENT_DEFS:
            raise UnsupportedElement(f"{lt} on {eid}", kind=lt, id=eid)
    dimension = None
    if kind.endswith("event"):
        dimension = dims[0] if dims else "none"
    looping = any(_local(c.tag) in _LOOP_TAGS for c in node)
    boundary = None
    if tag == "boundaryEvent":
        attached = node.get("attachedToRef")
        if not attached:
            raise XmlMalformed(f"boundary event {eid} lacks attachedToRef")
        boundary = Boundary(attached, node.get("cancelActivity", "true") != "false", node.get("name", ""))
    return Element(
        id=eid,
        kind=kind,
        pool=pool,
        name=node.get("name", ""),
        lane=lanes.get(eid),
        event_dimension=dimension,
        throwing=tag in ("intermediateThrowEvent", "endEvent"),
        boundary=boundary,
        looping=looping,
        default_flow=node.get("default"),
    )


def parse_bpmn(xml_text: str) -> BpmnModel:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise XmlMalformed(str(exc)) from None
    if _local(root.tag) != "definitions":
        raise XmlMalformed(f"root element is <{_local(root.tag)}>, expected <definitions>")

    pools: dict[str, str] = {}  # processRef -> actor
    participants: dict[str, str] = {}  # participant id -> actor
    message_nodes: list[ET.Element] = []
    processes: list[ET.Element] = []
    for child in root:
        lt = _local(child.tag)
        if lt == "collaboration":
            for c in child:
                ct = _local(c.tag)
                if ct == "participant":
                    actor = c.get("name") or c.get("id")
                    participants[c.get("id")] = actor
                    if c.get("processRef"):
                        pools[c.get("processRef")] = actor
                elif ct == "messageFlow":
                    message_nodes.append(c)
                elif ct not in _IGNORED_IN_COLLABORATION:
                    raise UnsupportedElement(f"{ct} {c.get('id')}", kind=ct, id=c.get("id"))
        elif lt == "process":
            processes.append(child)
        elif lt not in _IGNORED_IN_DEFINITIONS:
            raise UnsupportedElement(f"{lt} {child.get('id')}", kind=lt, id=child.get("id"))

    elements: list[Element] = []
    flows: list[Flow] = []
    actors: list[str] = []
    for proc in processes:
        actor = pools.get(proc.get("id")) or proc.get("name") or proc.get("id")
        if actor not in actors:
            actors.append(actor)
        lanes: dict[str, str] = {}
        for ls in proc.iter():
            if _local(ls.tag) == "lane":
                for ref in ls:
                    if _local(ref.tag) == "flowNodeRef" and ref.text:
                        lanes[ref.text.strip()] = ls.get("name") or ls.get("id")
        for node in proc:
            lt = _local(node.tag)
            if lt in _TAG_KIND:
                elements.append(_parse_node(node, _TAG_KIND[lt], actor, lanes))
            elif lt == "sequenceFlow":
                guard = None
                for c in node:
                    if _local(c.tag) == "conditionExpression" and (c.text or "").strip():
                        guard = G.parse_guard(c.text)
                flows.append(Flow(node.get("id"), "sequence", node.get("sourceRef"),
                                  node.get("targetRef"), guard, None, node.get("name", "")))
            elif lt not in _IGNORED_IN_PROCESS:
                raise UnsupportedElement(f"{lt} {node.get('id')}", kind=lt, id=node.get("id"))
    for m in message_nodes:
        flows.append(Flow(m.get("id"), "message", m.get("sourceRef"), m.get("targetRef"),
                          None, None, m.get("name", "")))
    for a in participants.values():
        if a not in actors:
            actors.append(a)

    model = BpmnModel(elements, flows, actors)
    _check_structure(model)
    return model


def _check_structure(model: BpmnModel) -> None:
    ids = model.by_id()
    if len(ids) != len(model.elements):
        seen: set = set()
        for e in model.elements:
            if e.id in seen:
                raise XmlMalformed(f"duplicate element id {e.id}")
            seen.add(e.id)
    for e in model.elements:
        if e.kind not in ELEMENT_KINDS:
            raise UnsupportedElement(e.kind, kind=e.kind, id=e.id)
        if e.boundary and e.boundary.attached_to not in ids:
            raise DanglingFlow(f"boundary {e.id} attached to unknown {e.boundary.attached_to}")
    for f in model.flows:
        if f.source not in ids or f.target not in ids:
            raise DanglingFlow(f"flow {f.id} references a missing element", flow=f.id)
        same = ids[f.source].pool == ids[f.target].pool
        if f.kind == "sequence" and not same:
            raise PoolViolation(f"sequence flow {f.id} crosses pools")
        if f.kind == "message" and same:
            raise PoolViolation(f"message flow {f.id} stays inside pool {ids[f.source].pool}")


def load_model(path: str | Path) -> BpmnModel:
    return parse_bpmn(Path(path).read_text())


# ---------------------------------------------------------------- normalization


def _degrees(flows: Iterable[Flow]):
    ins: dict[str, list[Flow]] = {}
    outs: dict[str, list[Flow]] = {}
    for f in flows:
        outs.setdefault(f.source, []).append(f)
        ins.setdefault(f.target, []).append(f)
    return ins, outs


def _fresh(taken: set, base: str) -> str:
    cand, i = base, 1
    while cand in taken:
        i += 1
        cand = f"{base}{i}"
    taken.add(cand)
    return cand


def normalize(model: BpmnModel, annotations: Optional[AnnotationConfig] = None) -> BpmnModel:
    ann = annotations or AnnotationConfig()
    if any(e.looping for e in model.elements):
        bad = next(e for e in model.elements if e.looping)
        raise LoopingConstructUnsupported(f"loop marker on {bad.id}", id=bad.id)

    elements = list(model.elements)
    taken = {e.id for e in elements} | {f.id for f in model.flows}
    by_id = {e.id: e for e in elements}
    flows: list[Flow] = []
    for f in model.flows:
        guard = f.guard
        if f.id in ann.guards:
            guard = G.parse_guard(ann.guards[f.id])
        flows.append(replace(f, guard=guard, payload_schema=ann.flow_schemas.get(f.id, f.payload_schema)))
    for fid in list(ann.guards) + list(ann.flow_schemas):
        if fid not in {f.id for f in flows}:
            raise MissingAnnotation(f"annotation refers to unknown flow {fid}", id=fid, what="flow")

    schemas = dict(model.schemas)
    schemas.update(ann.schemas)
    for f in flows:
        if f.payload_schema and f.payload_schema not in schemas:
            raise MissingAnnotation(f"flow {f.id} uses undeclared schema {f.payload_schema}",
                                    id=f.id, what="payload schema")

    # boundary labels and roles
    for i, e in enumerate(elements):
        label = ann.boundary_labels.get(e.id)
        if e.boundary is not None:
            role = ann.boundary_roles.get(e.id, e.boundary.role)
            lab = label or e.boundary.label
            if not lab:
                raise MissingAnnotation(f"boundary event {e.id} has no label", id=e.id, what="boundary label")
            elements[i] = replace(e, boundary=replace(e.boundary, label=lab, role=role))
            by_id[e.id] = elements[i]

    # (c) boundary begin events: inclusive gateway in front of the host activity
    begin_gw: dict[str, str] = {}
    for e in list(elements):
        if e.boundary is None or e.boundary.role != "throw":
            continue
        host = e.boundary.attached_to
        if host not in begin_gw:
            gid = _fresh(taken, f"{host}__begin")
            gw = Element(gid, "inclusive-gateway", by_id[host].pool, name=f"begin {by_id[host].name}".strip())
            elements.insert(elements.index(by_id[host]), gw)
            by_id[gid] = gw
            begin_gw[host] = gid
            flows = [replace(f, target=gid) if f.target == host else f for f in flows]
            flows.append(Flow(_fresh(taken, f"{gid}__to__{host}"), "sequence", gid, host, G.TRUE))
        gid = begin_gw[host]
        flows.append(Flow(_fresh(taken, f"{gid}__to__{e.id}"), "sequence", gid, e.id, G.TRUE))

    # (b) catch boundary events receive an edge from the matching throw event
    throw_labels: dict[str, list[str]] = {}
    for e in elements:
        if e.boundary is not None and e.boundary.role == "throw":
            throw_labels.setdefault(e.boundary.label, []).append(e.id)
        elif e.kind == "intermediate-event" and e.throwing and e.boundary is None:
            lab = ann.boundary_labels.get(e.id) or e.name
            if lab:
                throw_labels.setdefault(lab, []).append(e.id)
    for e in elements:
        if e.boundary is None or e.boundary.role != "catch":
            continue
        sources = throw_labels.get(e.boundary.label)
        if not sources:
            raise UnmatchedBoundaryLabel(f"no throw event labeled {e.boundary.label!r}", label=e.boundary.label)
        for src in sources:
            kind = "sequence" if by_id[src].pool == e.pool else "message"
            flows.append(Flow(_fresh(taken, f"{src}__to__{e.id}"), kind, src, e.id))

    # (a) split vertices that both merge and fork
    ins, outs = _degrees(flows)
    for e in list(elements):
        nin, nout = len(ins.get(e.id, [])), len(outs.get(e.id, []))
        if nin <= 1 or nout <= 1:
            continue
        if e.kind in GATEWAYS:
            mid = _fresh(taken, f"{e.id}__merge")
            merge = Element(mid, e.kind, e.pool, name=e.name, lane=e.lane)
            elements.insert(elements.index(e), merge)
            by_id[mid] = merge
            flows = [replace(f, target=mid) if f.target == e.id else f for f in flows]
            flows.append(Flow(_fresh(taken, f"{mid}__to__{e.id}"), "sequence", mid, e.id))
        else:
            fid = _fresh(taken, f"{e.id}__fork")
            fork = Element(fid, "inclusive-gateway", e.pool, lane=e.lane)
            elements.insert(elements.index(e) + 1, fork)
            by_id[fid] = fork
            moved = {f.id for f in outs[e.id]}
            new = []
            for f in flows:
                if f.id in moved and f.kind == "message":
                    raise ValidationError(f"{e.id} both merges and sends message {f.id}; add a gateway")
                new.append(replace(f, source=fid) if f.id in moved else f)
            flows = new
            flows.append(Flow(_fresh(taken, f"{e.id}__to__{fid}"), "sequence", e.id, fid))
        ins, outs = _degrees(flows)

    # (d) parallel -> inclusive with literal-true guards
    parallel = {e.id for e in elements if e.kind == "parallel-gateway"}
    elements = [replace(e, kind="inclusive-gateway") if e.id in parallel else e for e in elements]
    by_id = {e.id: e for e in elements}
    flows = [replace(f, guard=G.TRUE) if f.source in parallel and len(outs.get(f.source, [])) > 1 else f
             for f in flows]

    # (e) guards on every fork edge
    ins, outs = _degrees(flows)
    all_fields = set()
    for s in schemas.values():
        all_fields |= set(s.fields)
    new_flows = {f.id: f for f in flows}
    for e in elements:
        out = outs.get(e.id, [])
        if len(out) <= 1:
            continue
        if e.kind not in GATEWAYS:
            for f in out:
                if new_flows[f.id].guard is None:
                    new_flows[f.id] = replace(new_flows[f.id], guard=G.TRUE)
            continue
        explicit = [new_flows[f.id] for f in out if new_flows[f.id].guard is not None]
        for f in out:
            cur = new_flows[f.id]
            if cur.guard is not None:
                continue
            if e.default_flow == f.id and explicit:
                others = tuple(x.guard for x in explicit)
                new_flows[f.id] = replace(cur, guard=G.Not(others[0] if len(others) == 1 else G.Or(others)))
            else:
                raise MissingAnnotation(f"fork edge {f.id} of {e.id} has no guard", id=f.id, what="guard")
        for f in out:
            g = new_flows[f.id].guard
            scope = set(schemas[f.payload_schema].fields) if f.payload_schema else all_fields
            missing = G.guard_fields(g) - scope
            if missing:
                raise MissingAnnotation(
                    f"guard on {f.id} uses fields {sorted(missing)} absent from its payload schema",
                    id=f.id, what="payload schema")
        if e.kind == "exclusive-gateway":
            texts = [G.format_guard(new_flows[f.id].guard) for f in out]
            if len(set(texts)) != len(texts) or "true" in texts:
                raise GuardOverlap(f"exclusive fork {e.id} has literally overlapping guards {texts}", id=e.id)
    flows = [new_flows[f.id] for f in flows]

    bindings = dict(model.task_bindings)
    bindings.update(ann.task_bindings)
    scripts = dict(model.scripts)
    scripts.update(ann.scripts)
    for tid, ref in bindings.items():
        if tid not in by_id:
            raise MissingAnnotation(f"script bound to unknown task {tid}", id=tid, what="task")
        if ref not in scripts:
            raise MissingAnnotation(f"task {tid} bound to undefined script {ref}", id=tid, what="script")
    genesis = dict(model.genesis)
    genesis.update(ann.genesis)
    return BpmnModel(elements, flows, list(model.actors), bindings, scripts, schemas, genesis, normalized=True)


# ---------------------------------------------------------------- serialization


def model_to_dict(model: BpmnModel) -> dict:
    def elem(e: Element) -> dict:
        d = {"id": e.id, "kind": e.kind, "pool": e.pool, "name": e.name}
        if e.lane is not None:
            d["lane"] = e.lane
        if e.event_dimension is not None:
            d["eventDimension"] = e.event_dimension
        if e.throwing:
            d["throwing"] = True
        if e.boundary is not None:
            d["boundary"] = {"attachedTo": e.boundary.attached_to, "interrupting": e.boundary.interrupting,
                             "label": e.boundary.label, "role": e.boundary.role}
        if e.looping:
            d["looping"] = True
        if e.default_flow:
            d["defaultFlow"] = e.default_flow
        return d

    def flow(f: Flow) -> dict:
        d = {"id": f.id, "kind": f.kind, "source": f.source, "target": f.target, "name": f.name}
        if f.guard is not None:
            d["guard"] = G.format_guard(f.guard)
        if f.payload_schema:
            d["payloadSchema"] = f.payload_schema
        return d

    return {
        "actors": list(model.actors),
        "elements": [elem(e) for e in model.elements],
        "flows": [flow(f) for f in model.flows],
        "taskBindings": dict(sorted(model.task_bindings.items())),
        "scripts": {k: model.scripts[k] for k in sorted(model.scripts)},
        "schemas": {k: model.schemas[k].to_dict() for k in sorted(model.schemas)},
        "genesis": {k: model.genesis[k] for k in sorted(model.genesis)},
        "normalized": model.normalized,
    }


def model_from_dict(data: Mapping[str, Any]) -> BpmnModel:
    elements = []
    for d in data["elements"]:
        b = d.get("boundary")
        elements.append(Element(
            id=d["id"], kind=d["kind"], pool=d["pool"], name=d.get("name", ""), lane=d.get("lane"),
            event_dimension=d.get("eventDimension"), throwing=d.get("throwing", False),
            boundary=Boundary(b["attachedTo"], b["interrupting"], b["label"], b["role"]) if b else None,
            looping=d.get("looping", False), default_flow=d.get("defaultFlow"),
        ))
    flows = [Flow(d["id"], d["kind"], d["source"], d["target"],
                  G.parse_guard(d["guard"]) if "guard" in d else None,
                  d.get("payloadSchema"), d.get("name", "")) for d in data["flows"]]
    schemas = {k: PayloadSchema.from_dict(k, v) for k, v in data.get("schemas", {}).items()}
    model = BpmnModel(elements, flows, list(data["actors"]), dict(data.get("taskBindings", {})),
                      dict(data.get("scripts", {})), schemas, dict(data.get("genesis", {})),
                      bool(data.get("normalized", False)))
    _check_structure(model)
    return model


# ---------------------------------------------------------------- DAG


@dataclass(frozen=True)
class Vertex:
    id: str
    kind: str
    in_degree: int
    out_degree: int
    root: str
    pool: str = ""
    name: str = ""


@dataclass(frozen=True)
class EdgeInfo:
    flow: str
    kind: str = "sequence"
    guard: Optional[G.GuardExpr] = None
    payload_schema: Optional[str] = None


class Dag:
    """Flow-control graph. Edges form a set of (source, target) pairs."""

    def __init__(self, vertices: Iterable[Vertex], edges: Iterable[tuple], info: Optional[Mapping] = None):
        self.edges = frozenset(edges)
        self.info: dict = dict(info or {})
        succ: dict[str, list[str]] = {}
        pred: dict[str, list[str]] = {}
        for s, t in self.edges:
            succ.setdefault(s, []).append(t)
            pred.setdefault(t, []).append(s)
        ordered = []
        for v in vertices:
            ordered.append(replace(v, in_degree=len(pred.get(v.id, [])), out_degree=len(succ.get(v.id, []))))
        self.vertices = tuple(ordered)
        self._by_id = {v.id: v for v in self.vertices}
        if len(self._by_id) != len(self.vertices):
            raise NotADag("duplicate vertex ids")
        for s, t in self.edges:
            if s not in self._by_id or t not in self._by_id:
                raise NotADag(f"edge ({s}, {t}) references an unknown vertex")
        self.succ = {v: sorted(succ.get(v, [])) for v in self._by_id}
        self.pred = {v: sorted(pred.get(v, [])) for v in self._by_id}
        for (s, t) in self.edges:
            self.info.setdefault((s, t), EdgeInfo(f"{s}->{t}"))

    @classmethod
    def from_edges(cls, edges: Iterable[tuple], kinds: Optional[Mapping[str, str]] = None) -> "Dag":
        edges = list(edges)
        ids: list[str] = []
        for s, t in edges:
            for v in (s, t):
                if v not in ids:
                    ids.append(v)
        kinds = kinds or {}
        return cls([Vertex(v, kinds.get(v, "task"), 0, 0, v) for v in ids], edges)

    def __contains__(self, vid: str) -> bool:
        return vid in self._by_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Dag) and self.vertices == other.vertices and self.edges == other.edges

    def vertex(self, vid: str) -> Vertex:
        return self._by_id[vid]

    @property
    def ids(self) -> list[str]:
        return [v.id for v in self.vertices]

    def sources(self) -> list[str]:
        return sorted(v.id for v in self.vertices if v.in_degree == 0)

    def sinks(self) -> list[str]:
        return sorted(v.id for v in self.vertices if v.out_degree == 0)

    def flow_of(self, s: str, t: str) -> str:
        return self.info[(s, t)].flow

    def topological_order(self) -> list[str]:
        indeg = {v: len(self.pred[v]) for v in self._by_id}
        queue = deque(sorted(v for v, d in indeg.items() if d == 0))
        order = []
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in self.succ[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    queue.append(w)
        if len(order) != len(self._by_id):
            path = find_cycle(self.succ)
            raise CycleDetected("cycle " + " -> ".join(path), path=path)
        return order

    def bfs_order(self) -> list[str]:
        """Level order from the sources, neighbours in ascending id order."""
        seen: set[str] = set()
        order: list[str] = []
        queue = deque(self.sources())
        seen.update(queue)
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in self.succ[v]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        return order

    def to_dot(self, colors: Optional[Mapping[str, str]] = None, name: str = "dag") -> str:
        lines = [f"digraph {json.dumps(name)} {{", "  rankdir=LR;"]
        for v in self.vertices:
            shape = {"start-event": "circle", "end-event": "doublecircle"}.get(v.kind, "box")
            if v.kind.endswith("gateway"):
                shape = "diamond"
            label = v.name or v.id
            attrs = f'shape={shape}, label={json.dumps(label)}'
            if colors and v.id in colors:
                attrs += f', style=filled, fillcolor={json.dumps(colors[v.id])}'
            lines.append(f"  {json.dumps(v.id)} [{attrs}];")
        for s, t in sorted(self.edges):
            style = ", style=dashed" if self.info[(s, t)].kind == "message" else ""
            lines.append(f"  {json.dumps(s)} -> {json.dumps(t)} [label={json.dumps(self.info[(s, t)].flow)}{style}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def find_cycle(succ: Mapping[str, Iterable[str]]) -> list[str]:
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(v: str):
        color[v] = 1
        stack.append(v)
        for w in sorted(succ.get(v, ())):
            if color.get(w, 0) == 1:
                return stack[stack.index(w):] + [w]
            if color.get(w, 0) == 0:
                found = visit(w)
                if found:
                    return found
        color[v] = 2
        stack.pop()
        return None

    for v in sorted(succ):
        if color.get(v, 0) == 0:
            found = visit(v)
            if found:
                return found
    return []


def to_dag(model: BpmnModel) -> Dag:
    verts = [Vertex(e.id, e.kind, 0, 0, e.id, e.pool, e.name) for e in model.elements]
    edges: list[tuple] = []
    info: dict = {}
    for f in model.flows:
        key = (f.source, f.target)
        if key in info:
            continue  # parallel duplicates collapse into one edge
        edges.append(key)
        info[key] = EdgeInfo(f.id, f.kind, f.guard, f.payload_schema)
    dag = Dag(verts, edges, info)
    dag.topological_order()
    if len(dag.sources()) != 1:
        raise NotADag(f"expected exactly one start vertex, found {dag.sources()}")
    if not dag.sinks():
        raise NotADag("no end vertex")
    return dag
