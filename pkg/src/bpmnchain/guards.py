"""Guard expressions over payload fields.

Concrete syntax is a small Python-like subset parsed with :mod:`ast`::

    price >= 100 and not (region == "EU" or urgent == true)

``=``, ``≠``, ``≤`` and ``≥`` are accepted as aliases.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from typing import Any, Mapping, Union

from .errors import GuardEvaluationError, GuardSyntaxError

Scalar = Union[int, float, str, bool]

_OPS = {
    ast.Eq: "==", ast.NotEq: "!=", ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">=",
}
_FLIP = {"==": "==", "!=": "!=", "<": ">", "<=": ">=", ">": "<", ">=": "<="}


@dataclass(frozen=True)
class Lit:
    value: bool


@dataclass(frozen=True)
class Cmp:
    field: str
    op: str
    value: Scalar


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: "GuardExpr"


GuardExpr = Union[Lit, Cmp, And, Or, Not]

TRUE = Lit(True)


def _scalar(node: ast.AST, text: str):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, str, bool)):
        return True, node.value
    if isinstance(node, ast.Name) and node.id in ("true", "false", "True", "False"):
        return True, node.id.lower() == "true"
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        ok, v = _scalar(node.operand, text)
        if ok and isinstance(v, (int, float)) and not isinstance(v, bool):
            return True, -v
    return False, None


def _field(node: ast.AST):
    parts = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if isinstance(node, ast.Name) and node.id not in ("true", "false", "True", "False"):
        parts.append(node.id)
        return ".".join(reversed(parts))
    return None


def _convert(node: ast.AST, text: str) -> GuardExpr:
    if isinstance(node, ast.BoolOp):
        items = tuple(_convert(v, text) for v in node.values)
        return And(items) if isinstance(node.op, ast.And) else Or(items)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
        return Not(_convert(node.operand, text))
    if isinstance(node, ast.Compare):
        operands = [node.left, *node.comparators]
        parts = []
        for op, lhs, rhs in zip(node.ops, operands, operands[1:]):
            sym = _OPS.get(type(op))
            if sym is None:
                raise GuardSyntaxError(f"operator not allowed in {text!r}")
            lf, rf = _field(lhs), _field(rhs)
            if lf is not None:
                ok, val = _scalar(rhs, text)
                if not ok:
                    raise GuardSyntaxError(f"comparison needs a literal operand in {text!r}")
                parts.append(Cmp(lf, sym, val))
            elif rf is not None:
                ok, val = _scalar(lhs, text)
                if not ok:
                    raise GuardSyntaxError(f"comparison needs a literal operand in {text!r}")
                parts.append(Cmp(rf, _FLIP[sym], val))
            else:
                raise GuardSyntaxError(f"comparison needs a field operand in {text!r}")
        return parts[0] if len(parts) == 1 else And(tuple(parts))
    ok, val = _scalar(node, text)
    if ok and isinstance(val, bool):
        return Lit(val)
    raise GuardSyntaxError(f"unsupported construct {type(node).__name__} in {text!r}")


def parse_guard(text: str) -> GuardExpr:
    src = text.strip().replace("≠", "!=").replace("≤", "<=").replace("≥", ">=")
    src = re.sub(r"(?<![<>=!])=(?!=)", "==", src)
    if not src:
        raise GuardSyntaxError("empty guard")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise GuardSyntaxError(f"cannot parse guard {text!r}: {exc.msg}") from None
    return _convert(tree.body, text)


def _lit(v: Scalar) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def format_guard(g: GuardExpr) -> str:
    """Canonical text; ``parse_guard(format_guard(g)) == g``."""
    if isinstance(g, Lit):
        return "true" if g.value else "false"
    if isinstance(g, Cmp):
        return f"{g.field} {g.op} {_lit(g.value)}"
    if isinstance(g, Not):
        return f"not ({format_guard(g.item)})"
    joiner = " and " if isinstance(g, And) else " or "
    return joiner.join(f"({format_guard(i)})" for i in g.items)


def guard_fields(g: GuardExpr) -> set[str]:
    if isinstance(g, Lit):
        return set()
    if isinstance(g, Cmp):
        return {g.field}
    if isinstance(g, Not):
        return guard_fields(g.item)
    out: set[str] = set()
    for i in g.items:
        out |= guard_fields(i)
    return out


def _lookup(payload: Mapping[str, Any], field: str):
    cur: Any = payload
    for part in field.split("."):
        if not isinstance(cur, Mapping) or part not in cur:
            raise GuardEvaluationError(f"field {field!r} missing from payload", field=field)
        cur = cur[part]
    return cur


def evaluate(g: GuardExpr, payload: Mapping[str, Any]) -> bool:
    """Total evaluation: a missing field raises instead of yielding false."""
    if isinstance(g, Lit):
        return g.value
    if isinstance(g, Not):
        return not evaluate(g.item, payload)
    if isinstance(g, And):
        return all([evaluate(i, payload) for i in g.items])
    if isinstance(g, Or):
        return any([evaluate(i, payload) for i in g.items])
    left = _lookup(payload, g.field)
    right = g.value
    try:
        if g.op == "==":
            return left == right
        if g.op == "!=":
            return left != right
        if g.op == "<":
            return left < right
        if g.op == "<=":
            return left <= right
        if g.op == ">":
            return left > right
        return left >= right
    except TypeError:
        raise GuardEvaluationError(
            f"cannot compare {g.field}={left!r} with {right!r}", field=g.field
        ) from None
