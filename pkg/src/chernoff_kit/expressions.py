"""Small, total expression grammar for coefficient functions in configs.

Accepted: numbers, the constants ``pi`` and ``e``, coordinates ``x`` and ``y``
(plus ``t`` where a caller allows it), ``+ - * /``, integer powers ``**`` or
``^``, and ``sin``, ``cos``, ``exp`` of arguments that are linear in the
coordinates.  Polynomial degree is capped at 4.  Nothing is passed to
``eval``; expressions are compiled from the syntax tree into numpy closures.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["ExpressionError", "Expression", "parse_expression"]

MAX_DEGREE = 4
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTS = {"pi": math.pi, "e": math.e}


class ExpressionError(ValueError):
    pass


@dataclass(frozen=True)
class Expression:
    source: str
    variables: tuple
    degree: int
    _fn: Callable

    def __call__(self, *coords, **named):
        env = dict(zip(self.variables, coords))
        env.update(named)
        shape = np.shape(coords[0]) if coords else ()
        return np.broadcast_to(np.asarray(self._fn(env), dtype=float), shape).copy()


def _compile(node, names: set, inside_call: bool):
    """Return ``(fn, degree, has_call)`` for an expression node."""
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        v = float(node.value)
        return (lambda env: v), 0, False
    if isinstance(node, ast.Name):
        if node.id in _CONSTS:
            v = _CONSTS[node.id]
            return (lambda env: v), 0, False
        if node.id in names:
            key = node.id
            deg = 0 if key == "t" else 1
            return (lambda env: env[key]), deg, False
        raise ExpressionError(f"unknown name {node.id!r}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        f, d, c = _compile(node.operand, names, inside_call)
        if isinstance(node.op, ast.USub):
            return (lambda env: -f(env)), d, c
        return f, d, c
    if isinstance(node, ast.BinOp):
        fl, dl, cl = _compile(node.left, names, inside_call)
        if isinstance(node.op, ast.Pow):
            k = _constant_value(node.right)
            if k is None or k != int(k) or not 0 <= k <= MAX_DEGREE:
                raise ExpressionError("exponents must be integer constants between 0 and 4")
            k = int(k)
            return (lambda env: fl(env) ** k), dl * k, cl
        fr, dr, cr = _compile(node.right, names, inside_call)
        if isinstance(node.op, ast.Add):
            return (lambda env: fl(env) + fr(env)), max(dl, dr), cl or cr
        if isinstance(node.op, ast.Sub):
            return (lambda env: fl(env) - fr(env)), max(dl, dr), cl or cr
        if isinstance(node.op, ast.Mult):
            return (lambda env: fl(env) * fr(env)), dl + dr, cl or cr
        if isinstance(node.op, ast.Div):
            if dr or cr:
                raise ExpressionError("division is only allowed by constants")
            return (lambda env: fl(env) / fr(env)), dl, cl
        raise ExpressionError(f"operator {type(node.op).__name__} is not allowed")
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError("only sin, cos and exp may be called")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument")
        fa, da, ca = _compile(node.args[0], names, True)
        if da > 1 or ca:
            raise ExpressionError(f"argument of {node.func.id} must be linear in the coordinates")
        g = _FUNCS[node.func.id]
        return (lambda env: g(fa(env))), 0, True
    raise ExpressionError(f"syntax element {type(node).__name__} is not allowed")


def _constant_value(node):
    try:
        f, d, c = _compile(node, set(), False)
    except ExpressionError:
        return None
    return f({})


def parse_expression(src, variables=("x",), allow_time: bool = False) -> Expression:
    """Compile ``src`` (a string or a number) into a vectorised callable.

    >>> parse_expression("0.5*(1 + 0.3*sin(x))")(np.zeros(2))
    array([0.5, 0.5])
    """
    if isinstance(src, bool):
        raise ExpressionError("booleans are not expressions")
    if isinstance(src, (int, float)):
        src = repr(float(src))
    if not isinstance(src, str):
        raise ExpressionError(f"expected a number or an expression string, got {type(src).__name__}")
    text = src.replace("^", "**")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {src!r}: {exc.msg}") from None
    names = set(variables) | ({"t"} if allow_time else set())
    fn, degree, _ = _compile(tree.body, names, False)
    if degree > MAX_DEGREE:
        raise ExpressionError(f"polynomial degree {degree} exceeds {MAX_DEGREE} in {src!r}")
    return Expression(src, tuple(variables), degree, fn)
