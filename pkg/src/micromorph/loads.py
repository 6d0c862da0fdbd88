"""Analytic load presets, including a manufactured smooth solution on the unit cube."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import sympy as s

Vec = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LoadSpec:
    """Body force ``f``, body moment ``M`` and its row-wise divergence ``div_M``."""

    f: Vec
    M: Vec
    div_M: Vec
    name: str = "custom"
    exact: dict | None = None  # optional callables u, Du, P, CurlP

    def scaled(self, c: float) -> "LoadSpec":
        return LoadSpec(lambda x: c * self.f(x), lambda x: c * self.M(x),
                        lambda x: c * self.div_M(x), f"{c}*{self.name}", None)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def _const(shape, value=0.0):
    value = np.broadcast_to(np.asarray(value, dtype=float), shape)
    return lambda x: np.broadcast_to(value, (len(np.atleast_2d(x)),) + shape).copy()


def zero_loads() -> LoadSpec:
    return LoadSpec(_const((3,)), _const((3, 3)), _const((3,)), "zero")


def constant_body_force(f=(0.0, 0.0, 1.0)) -> LoadSpec:
    return LoadSpec(_const((3,), f), _const((3, 3)), _const((3,)), "body_force")


def constant_moment(M) -> LoadSpec:
    return LoadSpec(_const((3,)), _const((3, 3), M), _const((3,)), "constant_moment")


# ------------------------------------------------------------ symbolic tools

X = s.symbols("x0:3", real=True)


def _sym_grad(v):
    return s.Matrix(3, 3, lambda i, j: s.diff(v[i], X[j]))


def _sym_curl(P):
    """Row-wise curl: row i of the result is curl of row i of P."""
    out = s.zeros(3, 3)
    for i in range(3):
        p = P[i, :]
        out[i, 0] = s.diff(p[2], X[1]) - s.diff(p[1], X[2])
        out[i, 1] = s.diff(p[0], X[2]) - s.diff(p[2], X[0])
        out[i, 2] = s.diff(p[1], X[0]) - s.diff(p[0], X[1])
    return out


def _sym_div(M):
    return s.Matrix([sum(s.diff(M[i, j], X[j]) for j in range(3)) for i in range(3)])


def _sym(A):
    return (A + A.T) / 2


def _numeric(expr, shape):
    entries = [s.lambdify(X, e, "numpy") for e in expr]

    def fn(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = [np.broadcast_to(np.asarray(g(x[:, 0], x[:, 1], x[:, 2]), dtype=float), (len(x),))
                for g in entries]
        return np.stack(cols, axis=1).reshape((len(x),) + shape)

    return fn


def manufactured_loads(u_expr=None, p_expr=None) -> LoadSpec:
    """Loads for a prescribed smooth pair with identity material tensors.

    ``f = -Div sym(Du - P)`` and ``M = Curl Curl P - sym(Du - P) + sym P``.
    Expressions are written in the symbols ``X``.  Defaults vanish on the
    boundary of the unit cube (``u``) and have zero tangential trace there (``P``).
    """
    b = [xi * (1 - xi) for xi in X]
    if u_expr is None:
        bubble = 64 * b[0] * b[1] * b[2]
        u_expr = [bubble * (1 + X[1]), bubble * (1 - X[2]) / 2, bubble * (X[0] - s.Rational(1, 3))]
    u = s.Matrix(u_expr)
    if p_expr is None:
        a = [[1, -2, s.Rational(1, 2)], [s.Rational(3, 2), 1, -1], [-1, s.Rational(1, 2), 2]]
        p_expr = [[16 * a[r][j] * (1 + X[j]) * s.prod([b[k] for k in range(3) if k != j])
                   for j in range(3)] for r in range(3)]
    P = s.Matrix(p_expr)
    Du = _sym_grad(u)
    E = _sym(Du - P)
    curlP = _sym_curl(P)
    f = -_sym_div(E)
    M = _sym_curl(curlP) - E + _sym(P)
    divM = _sym_div(M)
    exact = {
        "u": _numeric(list(u), (3,)),
        "Du": _numeric(list(Du), (3, 3)),
        "P": _numeric(list(P), (3, 3)),
        "CurlP": _numeric(list(curlP), (3, 3)),
    }
    return LoadSpec(_numeric([s.expand(e) for e in f], (3,)), _numeric([s.expand(e) for e in M], (3, 3)),
                    _numeric([s.expand(e) for e in divM], (3,)), "manufactured", exact)


PRESETS = {
    "zero": zero_loads,
    "body_force": constant_body_force,
    "manufactured": manufactured_loads,
    "constant_moment": constant_moment,
}
