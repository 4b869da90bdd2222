"""Chernoff iteration ``[F(t/n)]^n f0`` and convergence diagnostics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .families import ChernoffFamily, check_time
from .grid import GridFunction, l2_norm, sup_norm

__all__ = [
    "chernoff_iterate",
    "ConvergenceReport",
    "convergence_study",
    "fit_order",
    "derivative_check",
    "DerivativeCheck",
]

EXACT_THRESHOLD = 1e-10


def chernoff_iterate(F: ChernoffFamily, t: float, n: int, f0: GridFunction,
                     snapshots: list | None = None) -> GridFunction:
    """Apply ``F(t/n)`` to ``f0`` ``n`` times.

    ``n = 0`` is accepted only with ``t = 0``.  When ``snapshots`` is a list,
    every intermediate state is appended to it.
    """
    t = check_time(t)
    n = int(n)
    if n < 0 or (n == 0 and t != 0.0):
        raise ValueError(f"n must be a positive integer, got {n}")
    if n == 0:
        return f0
    step = t / n
    f = f0
    for k in range(1, n + 1):
        f = F.apply(step, f)
        if not np.all(np.isfinite(f.values)):
            raise FloatingPointError(f"non-finite values after step {k} of {n} ({F.name})")
        if snapshots is not None:
            snapshots.append(f)
    return f


def fit_order(ns, errors) -> float | None:
    """Least-squares slope ``q`` in ``log err = c - q log n``.

    Only the asymptotic tail is used: the longest run of decreasing errors
    ending at the largest ``n``, further cut to the last decade of ``n``.
    Returns None when fewer than two usable points remain.
    """
    ns = np.asarray(ns, dtype=float)
    err = np.asarray(errors, dtype=float)
    k = len(ns) - 1
    while k > 0 and 0 < err[k] < err[k - 1]:
        k -= 1
    ns, err = ns[k:], err[k:]
    keep = ns >= ns[-1] / 10.0
    ns, err = ns[keep], err[keep]
    if len(ns) < 2 or np.any(err <= 0):
        return None
    slope = np.polyfit(np.log(ns), np.log(err), 1)[0]
    return float(-slope)


@dataclass
class ConvergenceReport:
    """Errors of ``[F(t/n)]^n f0`` against a reference for a list of ``n``."""

    t: float
    ns: list
    sup_errors: list
    l2_errors: list
    reference: str
    norm: str = "sup"
    family: str = ""
    runtimes_ms: list = field(default_factory=list)
    order: float | None = None
    exact: bool = False

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ValueError("ns must be strictly increasing")
        for e in list(self.sup_errors) + list(self.l2_errors):
            if not (math.isfinite(e) and e >= 0):
                raise ValueError(f"invalid error value {e}")

    @property
    def errors(self) -> list:
        return self.sup_errors if self.norm == "sup" else self.l2_errors

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.ns, self.errors))

    def monotone(self, slack: float = 0.0) -> bool:
        """Errors non-increasing in ``n`` (each step may grow by a relative ``slack``)."""
        e = self.errors
        return all(b <= a * (1 + slack) for a, b in zip(e, e[1:]))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "t": self.t,
            "reference": self.reference,
            "norm": self.norm,
            "ns": list(self.ns),
            "sup_errors": list(self.sup_errors),
            "l2_errors": list(self.l2_errors),
            "order": self.order,
            "exact": self.exact,
        }


def convergence_study(F: ChernoffFamily, t: float, f0: GridFunction, ns: Sequence[int],
                      reference, norm: str = "sup", reference_name: str | None = None,
                      solve: Callable | None = None, mask=None,
                      snapshots: dict | None = None) -> ConvergenceReport:
    """Errors of the iterates for each ``n`` in ``ns``.

    ``reference`` is a GridFunction or a callable ``t -> GridFunction``.
    ``solve(n)`` replaces ``chernoff_iterate(F, t, n, f0)`` when given (used
    for derived solvers such as the fractional solver).  ``mask`` (boolean
    per node) restricts both norms to the selected nodes.  When ``snapshots``
    is a dict, the final iterate for each ``n`` is stored under ``n``.
    """
    if norm not in ("sup", "l2"):
        raise ValueError(f"norm must be 'sup' or 'l2', got {norm!r}")
    ns = [int(n) for n in ns]
    if not ns:
        raise ValueError("ns must be nonempty")
    if callable(reference) and not isinstance(reference, GridFunction):
        ref = reference(t)
        name = reference_name or "oracle"
    else:
        ref = reference
        name = reference_name or "reference"
    if ref.grid != f0.grid:
        raise ValueError("reference lives on a different grid than f0")
    if mask is not None:
        sel = np.asarray(mask, dtype=bool).reshape(-1)
        if sel.size != f0.grid.size or not sel.any():
            raise ValueError("error mask must select at least one grid node")
    sup_e, l2_e, rt = [], [], []
    for n in ns:
        t0 = time.perf_counter()
        u = solve(n) if solve is not None else chernoff_iterate(F, t, n, f0)
        rt.append((time.perf_counter() - t0) * 1e3)
        if snapshots is not None:
            snapshots[n] = u
        d = u - ref
        if mask is not None:
            d = GridFunction(d.grid, np.where(sel, d.values, 0.0), d.kind)
        sup_e.append(sup_norm(d))
        l2_e.append(l2_norm(d))
    report = ConvergenceReport(t=float(t), ns=ns, sup_errors=sup_e, l2_errors=l2_e,
                               reference=name, norm=norm, family=getattr(F, "name", ""),
                               runtimes_ms=rt)
    errs = report.errors
    report.exact = all(e < EXACT_THRESHOLD for e in errs)
    if not report.exact:
        report.order = fit_order(ns, errs)
    return report


@dataclass
class DerivativeCheck:
    pairs: list
    monotone: bool

    def __iter__(self):
        return iter(self.pairs)


def derivative_check(F: ChernoffFamily, Lf0: GridFunction, f0: GridFunction,
                     ts: Sequence[float]) -> DerivativeCheck:
    """Residuals ``||(F(t) f0 - f0)/t - L f0||_sup`` for small ``t``."""
    ts = [float(t) for t in ts]
    if any(t <= 0 for t in ts) or any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError("ts must be positive and strictly descending")
    pairs = []
    for t in ts:
        q = (F.apply(t, f0) - f0) * (1.0 / t)
        pairs.append((t, sup_norm(q - Lf0)))
    res = [r for _, r in pairs]
    return DerivativeCheck(pairs, all(b < a for a, b in zip(res, res[1:])))
