"""End-to-end helpers: model files to analysis, DE-HSM and contract package."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

from .bpmn_ir import AnnotationConfig, BpmnModel, Dag, load_model, normalize, to_dag
from .contractgen import ContractPackage, compile_package
from .dehsm import DeHsmModel, build_dehsm
from .graph_analysis import Analysis, analyze

FIXTURES = ("supply_chain", "order_process", "trade", "minimal")


@dataclass
class Compiled:
    model: BpmnModel
    dag: Dag
    analysis: Analysis
    dehsm: DeHsmModel
    annotations: Optional[AnnotationConfig]


def data_path(*parts: str) -> Path:
    return Path(str(resources.files("bpmnchain").joinpath("data", *parts)))


def load_layout(path: str | Path | None) -> dict:
    """Chain id -> profile name from a chains file (``layout`` key)."""
    p = Path(path) if path else data_path("chains.json")
    data = json.loads(p.read_text())
    return dict(data.get("layout", {"main": "ethereum-like"}))


def compile_model(model_path: str | Path, annotations_path: str | Path | None = None) -> Compiled:
    ann = AnnotationConfig.load(annotations_path) if annotations_path else None
    model = normalize(load_model(model_path), ann)
    dag = to_dag(model)
    an = analyze(dag)
    return Compiled(model, dag, an, build_dehsm(dag, an.decomposition, ann), ann)


def fixture(name: str) -> Compiled:
    ann = data_path("models", f"{name}.ann.json")
    return compile_model(data_path("models", f"{name}.bpmn"), ann if ann.exists() else None)


def package(c: Compiled, selection: Mapping[str, Any], layout: Optional[Mapping[str, str]] = None,
            name: str = "process") -> ContractPackage:
    return compile_package(c.model, c.dag, c.analysis, c.dehsm, selection, layout or load_layout(None), name)


def fixture_package(name: str, selection: Mapping[str, Any] | str | None = None,
                    layout: Optional[Mapping[str, str]] = None) -> ContractPackage:
    if isinstance(selection, str):
        selection = json.loads(data_path("selections", f"{selection}.json").read_text())
    return package(fixture(name), selection or {"transactions": []}, layout, name)
