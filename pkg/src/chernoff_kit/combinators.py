"""Combinators producing new Chernoff families from existing ones."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfcinv, erfinv

from .families import ChernoffFamily, SymbolFamily, _eval_field
from .grid import Grid, GridFunction, l2_norm

__all__ = [
    "compose",
    "theta_splitting",
    "convex_splitting",
    "multiplicative_perturbation",
    "DomainMask",
    "dirichlet_restrict",
    "rotate",
    "SubordinatorSpec",
    "subordinate_known_density",
    "subordinate_bounded_measure",
    "half_stable_quadrature",
]


def _same_grid(families: Sequence[ChernoffFamily]) -> Grid:
    grid = families[0].grid
    for F in families[1:]:
        if F.grid != grid:
            raise ValueError(f"grid mismatch: {F.name} lives on a different grid")
    return grid


class Composition(ChernoffFamily):
    """``F_1(t) o ... o F_m(t)``; ``F_m`` acts first."""

    def __init__(self, families: Sequence[ChernoffFamily]):
        families = list(families)
        if not families:
            raise ValueError("compose needs at least one family")
        grid = _same_grid(families)
        super().__init__(grid, "compose(" + ", ".join(F.name for F in families) + ")",
                         sum(F.w for F in families))
        self.families = families
        self.kernel = all(F.kernel for F in families)
        self.preserves_real = all(F.preserves_real for F in families)

    def _apply(self, t, f):
        for F in reversed(self.families):
            f = F.apply(t, f)
        return f


class ThetaSplitting(ChernoffFamily):
    """``F_1(theta t) o F_2(t) o F_1((1 - theta) t)``."""

    def __init__(self, F1: ChernoffFamily, F2: ChernoffFamily, theta: float):
        theta = float(theta)
        if not 0.0 <= theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {theta}")
        grid = _same_grid([F1, F2])
        super().__init__(grid, f"H^{theta:g}({F1.name}, {F2.name})", F1.w + F2.w)
        self.F1, self.F2, self.theta = F1, F2, theta
        self.kernel = F1.kernel and F2.kernel
        self.preserves_real = F1.preserves_real and F2.preserves_real

    def _apply(self, t, f):
        f = self.F1.apply((1.0 - self.theta) * t, f)
        f = self.F2.apply(t, f)
        return self.F1.apply(self.theta * t, f)


class ConvexSplitting(ChernoffFamily):
    """``tau F_1(t) F_2(t) + (1 - tau) F_2(t) F_1(t)``."""

    def __init__(self, F1: ChernoffFamily, F2: ChernoffFamily, tau: float):
        tau = float(tau)
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        grid = _same_grid([F1, F2])
        super().__init__(grid, f"G^{tau:g}({F1.name}, {F2.name})", F1.w + F2.w)
        self.F1, self.F2, self.tau = F1, F2, tau
        self.kernel = F1.kernel and F2.kernel
        self.preserves_real = F1.preserves_real and F2.preserves_real

    def _apply(self, t, f):
        a = self.F1.apply(t, self.F2.apply(t, f))
        b = self.F2.apply(t, self.F1.apply(t, f))
        return self.tau * a + (1.0 - self.tau) * b


def compose(families: Sequence[ChernoffFamily]) -> ChernoffFamily:
    """Operator splitting ``F(t) = F_1(t) o ... o F_m(t)``, applied right to left."""
    return Composition(families)


def theta_splitting(F1: ChernoffFamily, F2: ChernoffFamily, theta: float) -> ChernoffFamily:
    """``theta = 1`` is ``F1 o F2``, ``theta = 0`` is ``F2 o F1``, ``1/2`` is Strang."""
    return ThetaSplitting(F1, F2, theta)


def convex_splitting(F1: ChernoffFamily, F2: ChernoffFamily, tau: float) -> ChernoffFamily:
    return ConvexSplitting(F1, F2, tau)


class MultiplicativePerturbation(ChernoffFamily):
    """``F#(t) phi(q) = (F(a(q) t) phi)(q)``: Chernoff family for ``a(x) L``."""

    pointwise = True

    def __init__(self, F: ChernoffFamily, a, a0: float | None = None):
        if not F.pointwise:
            raise TypeError(
                f"{F.name} has no per-node kernel evaluation; multiplicative "
                "perturbation needs a kernel-style family")
        a_nodes = np.broadcast_to(_eval_field(a, F.grid.points()), (F.grid.size,)).copy()
        lower = float(a_nodes.min()) if a0 is None else float(a0)
        if not np.all(np.isfinite(a_nodes)) or lower <= 0 or np.any(a_nodes < lower):
            raise ValueError("multiplier a(x) must satisfy a(x) >= a0 > 0 on the grid")
        super().__init__(F.grid, f"{F.name}#a", F.w * float(a_nodes.max()))
        self.F = F
        self.a_nodes = a_nodes
        self.kernel = F.kernel
        self.preserves_real = F.preserves_real

    def _apply(self, t, f):
        return self.F.apply_at_times(self.a_nodes * t, f)

    def _apply_at_times(self, times, f):
        return self.F.apply_at_times(self.a_nodes * times, f)


def multiplicative_perturbation(F: ChernoffFamily, a, a0: float | None = None) -> ChernoffFamily:
    return MultiplicativePerturbation(F, a, a0)


class DomainMask:
    """Node indicator of a finite union of open intervals (1D) or rectangles (2D)."""

    def __init__(self, grid: Grid, inside, boxes=None):
        inside = np.asarray(inside, dtype=bool).reshape(-1)
        if inside.size != grid.size:
            raise ValueError("mask size does not match the grid")
        if not inside.any():
            raise ValueError("domain mask selects no grid node")
        self.grid = grid
        self.inside = inside
        self.inside.flags.writeable = False
        self.weights = inside.astype(float)
        self.boxes = None if boxes is None else [np.array(b) for b in boxes]

    @classmethod
    def from_boxes(cls, grid: Grid, boxes) -> "DomainMask":
        """``boxes``: list of ``(lo, hi)`` pairs in 1D, or ``((xlo, xhi), (ylo, yhi))`` in 2D."""
        pts = grid.points()
        inside = np.zeros(grid.size, dtype=bool)
        parsed = []
        for box in boxes:
            box = np.asarray(box, dtype=float).reshape(grid.dim, 2)
            if np.any(box[:, 1] <= box[:, 0]):
                raise ValueError(f"empty box {box.tolist()}")
            parsed.append(box)
            inside |= np.all((pts > box[:, 0]) & (pts < box[:, 1]), axis=1)
        return cls(grid, inside, parsed)

    @classmethod
    def whole(cls, grid: Grid) -> "DomainMask":
        return cls(grid, np.ones(grid.size, dtype=bool))

    def boundary_distance(self) -> np.ndarray:
        """Per-node distance to the nearest box face (inf when no boxes are known).

        For overlapping boxes this is the largest per-box inner distance, a
        lower bound of the true distance to the boundary of the union.
        """
        if self.boxes is None:
            return np.full(self.grid.size, np.inf)
        pts = self.grid.points()
        dist = np.zeros(self.grid.size)
        for box in self.boxes:
            d = np.minimum(pts - box[:, 0], box[:, 1] - pts).min(axis=1)
            dist = np.maximum(dist, d)
        return np.where(self.inside, dist, 0.0)


# Brownian discrete-monitoring boundary shift, -zeta(1/2) / sqrt(2 pi)
MONITORING_SHIFT = 0.5825971579390106


class DirichletRestriction(ChernoffFamily):
    """``psi_t * F(t)(mask * f)``: zero extension, kernel, cut-off to the domain.

    ``cutoff="sharp"`` takes ``psi_t`` as the domain indicator.  A killed
    walk monitored once per step then overestimates survival at order
    ``sqrt(t)``.  ``cutoff="shifted"`` moves the boundary inward by
    ``MONITORING_SHIFT * sqrt(2 A t)`` (``A`` the largest diffusion
    eigenvalue at the node) with a linear ramp across one mesh cell, which
    removes the leading term; ``psi_t`` still tends to the indicator as
    ``t -> 0``.
    """

    kernel = True

    def __init__(self, F: ChernoffFamily, mask: DomainMask, cutoff: str = "sharp"):
        if not F.kernel:
            raise TypeError(f"{F.name} is not an integral-kernel family")
        if mask.grid != F.grid:
            raise ValueError("mask and family live on different grids")
        if cutoff not in ("sharp", "shifted"):
            raise ValueError(f"cutoff must be 'sharp' or 'shifted', got {cutoff!r}")
        super().__init__(F.grid, f"dirichlet({F.name})", F.w)
        self.F, self.mask, self.cutoff = F, mask, cutoff
        self.preserves_real = F.preserves_real
        self.pointwise = F.pointwise
        self.self_adjoint = F.self_adjoint and cutoff == "sharp"
        if cutoff == "shifted":
            spec = getattr(F, "spec", None)
            if spec is None:
                raise TypeError("shifted cutoff needs a family built from a GeneratorSpec")
            self._sigma = np.sqrt(2 * np.linalg.eigvalsh(spec.A_nodes)[:, -1])
            self._dist = mask.boundary_distance()

    def _restrict(self, f: GridFunction) -> GridFunction:
        return GridFunction(f.grid, f.values * self.mask.weights, f.kind)

    def _cut(self, times, f: GridFunction) -> GridFunction:
        if self.cutoff == "sharp":
            return self._restrict(f)
        c = MONITORING_SHIFT * self._sigma * np.sqrt(times)
        h = float(self.grid.h.min())
        with np.errstate(invalid="ignore"):
            psi = np.clip((self._dist - c) / h + 0.5, 0.0, 1.0)
        psi = np.where(np.isinf(self._dist), 1.0, psi) * self.mask.weights
        return GridFunction(f.grid, f.values * psi, f.kind)

    def _apply(self, t, f):
        return self._cut(t, self.F.apply(t, self._restrict(f)))

    def _apply_at_times(self, times, f):
        return self._cut(times, self.F.apply_at_times(times, self._restrict(f)))


def dirichlet_restrict(F: ChernoffFamily, mask: DomainMask, cutoff: str = "sharp") -> ChernoffFamily:
    return DirichletRestriction(F, mask, cutoff)


class RotatedFamily(ChernoffFamily):
    """``F*(t) = exp(i (F(t) - Id))``, unitary when ``F(t)`` is self-adjoint.

    ``mode="symbol"`` multiplies by ``exp(i (e^{-tH(p)} - 1))`` in frequency
    space; ``mode="series"`` sums the exponential series on ``f`` until the
    term norm falls below ``tol * ||f||``.
    """

    preserves_real = False
    exact = False

    def __init__(self, F: ChernoffFamily, mode: str = "symbol", tol: float = 1e-14,
                 max_terms: int = 200):
        if mode not in ("symbol", "series"):
            raise ValueError(f"mode must be 'symbol' or 'series', got {mode!r}")
        if mode == "symbol" and not isinstance(F, SymbolFamily):
            raise TypeError("symbol-mode rotation needs an x-independent symbol family")
        if not F.self_adjoint:
            raise TypeError(f"{F.name} is not self-adjoint; rotation would not be unitary")
        super().__init__(F.grid, f"rot[{mode}]({F.name})", 0.0)
        self.F, self.mode, self.tol, self.max_terms = F, mode, tol, max_terms

    def _symbol_pass(self, n: int, t: float, f: GridFunction) -> GridFunction:
        H = self.F.symbol_values
        mult = np.exp(1j * n * np.expm1(-(t / n) * H))
        spec = np.fft.fftn(f.values.reshape(self.grid.shape)) * mult
        return GridFunction(self.grid, np.fft.ifftn(spec).reshape(-1), "complex")

    def _apply(self, t, f):
        if self.mode == "symbol":
            return self._symbol_pass(1, t, f)
        fnorm = l2_norm(f)
        total = f.values.astype(np.complex128)
        term = f
        for k in range(1, self.max_terms + 1):
            diff = self.F.apply(t, term) - term
            term = GridFunction(self.grid, diff.values * (1j / k), "complex")
            total = total + term.values
            if l2_norm(term) < self.tol * fnorm or fnorm == 0.0:
                return GridFunction(self.grid, total, "complex")
        raise ValueError(f"rotation series did not converge within {self.max_terms} terms")

    def power(self, t: float, n: int, f: GridFunction) -> GridFunction:
        """``F*(t)^n f``; in symbol mode a single pass with ``exp(i n (e^{-tH} - 1))``."""
        if self.mode == "symbol" and n >= 1:
            self._check_grid(f)
            return self._symbol_pass(int(n), float(t) * int(n), f)
        return super().power(t, n, f)


def rotate(F: ChernoffFamily, mode: str = "symbol") -> ChernoffFamily:
    return RotatedFamily(F, mode)


# ---------------------------------------------------------------------------
# subordination

def default_steps(t: float) -> int:
    return max(1, math.ceil(1.0 / t))


@dataclass(frozen=True)
class SubordinatorSpec:
    """Bernstein triplet ``(sigma, lam, mu)``.

    ``mu`` is either a finite discrete measure (``atoms``/``weights``) or the
    ``"half_stable"`` Levy measure ``s^{-3/2} ds / (2 sqrt(pi))``, whose
    convolution semigroup has the density ``g_t(s)`` and Bernstein function
    ``sqrt(z)``.  ``steps`` is the inner power count ``m(t)``.
    """

    sigma: float = 0.0
    lam: float = 0.0
    atoms: tuple = ()
    weights: tuple = ()
    density: str | None = None
    steps: Callable[[float], int] = default_steps

    def __post_init__(self):
        if self.sigma < 0 or self.lam < 0:
            raise ValueError("sigma and lambda must be nonnegative")
        if len(self.atoms) != len(self.weights):
            raise ValueError("atoms and weights differ in length")
        if any(s <= 0 for s in self.atoms) or any(w < 0 for w in self.weights):
            raise ValueError("atoms must be positive and weights nonnegative")
        if self.density not in (None, "half_stable"):
            raise ValueError(f"unknown subordinator density {self.density!r}")
        if self.density and self.atoms:
            raise ValueError("give either a density tag or discrete atoms, not both")

    @property
    def mass(self) -> float:
        return float(sum(self.weights))

    def bernstein(self, z):
        """``f(z) = sigma + lam z + \\int (1 - e^{-sz}) mu(ds)``."""
        z = np.asarray(z)
        out = self.sigma + self.lam * z
        if self.density == "half_stable":
            out = out + np.sqrt(z)
        for s, w in zip(self.atoms, self.weights):
            out = out - w * np.expm1(-s * z)
        return out


def half_stable_quadrature(t: float, nodes: int = 64, coverage: float = 1e-8):
    """Nodes and weights for ``\\int G(s) g_t(s) ds`` over the half-stable density.

    Gauss-Legendre in ``log s`` on the range holding all but ``coverage`` of
    the mass, split evenly between both tails.
    """
    from .stochastic import half_stable_subordinator_density

    half = coverage / 2
    s_min = t * t / (4 * erfcinv(half) ** 2)
    s_max = t * t / (4 * erfinv(half) ** 2)
    if not (np.isfinite(s_min) and np.isfinite(s_max) and 0 < s_min < s_max):
        raise ValueError(f"cannot cover the subordinator mass at t={t}")
    x, w = np.polynomial.legendre.leggauss(nodes)
    v0, v1 = math.log(s_min), math.log(s_max)
    v = 0.5 * (v1 - v0) * x + 0.5 * (v1 + v0)
    s = np.exp(v)
    wts = 0.5 * (v1 - v0) * w * s * half_stable_subordinator_density(t, s)
    if abs(wts.sum() - (1.0 - coverage)) > 1e-6:
        raise ValueError(
            f"{nodes} quadrature nodes cannot reach mass coverage 1-{coverage:g} at t={t}")
    return s, wts


class KnownDensitySubordination(ChernoffFamily):
    """``e^{-sigma t} F(lam t) \\int [F(s/m(t))]^{m(t)} eta_t(ds)``."""

    def __init__(self, F: ChernoffFamily, sub: SubordinatorSpec, nodes: int = 64):
        if sub.atoms:
            raise ValueError("known-density subordination takes the density tag, not atoms")
        super().__init__(F.grid, f"subordinate[{sub.density or 'none'}]({F.name})", sub.lam * F.w)
        self.F, self.sub, self.nodes = F, sub, int(nodes)
        self.kernel = F.kernel
        self.preserves_real = F.preserves_real

    def _apply(self, t, f):
        sub = self.sub
        if sub.density == "half_stable":
            m = int(sub.steps(t))
            s, wts = half_stable_quadrature(t, self.nodes)
            acc = np.zeros(self.grid.size, dtype=np.complex128)
            all_real = True
            for si, wi in zip(s, wts):
                u = self.F.power(si / m, m, f)
                all_real &= u.is_real
                acc += wi * u.values
            f = GridFunction(self.grid, acc, "real" if all_real else "complex")
        if sub.lam:
            f = self.F.apply(sub.lam * t, f)
        if sub.sigma:
            f = math.exp(-sub.sigma * t) * f
        return f


class BoundedMeasureSubordination(ChernoffFamily):
    """``e^{-sigma t} F(lam t)(phi + t sum_i (F^{m(t)}(s_i/m(t)) phi - phi) mu_i)``."""

    def __init__(self, F: ChernoffFamily, sub: SubordinatorSpec):
        if sub.density is not None:
            raise ValueError("bounded-measure subordination takes discrete atoms")
        if not sub.atoms and sub.sigma == 0 and sub.lam == 0:
            raise ValueError("null generator: no atoms and sigma = lambda = 0")
        super().__init__(F.grid, f"subordinate[mu]({F.name})", 2 * sub.mass + sub.lam * F.w)
        self.F, self.sub = F, sub
        self.kernel = F.kernel
        self.preserves_real = F.preserves_real

    def _apply(self, t, f):
        sub = self.sub
        if sub.atoms:
            m = int(sub.steps(t))
            jump = GridFunction.zeros(self.grid)
            for s, w in zip(sub.atoms, sub.weights):
                jump = jump + w * (self.F.power(s / m, m, f) - f)
            f = f + t * jump
        if sub.lam:
            f = self.F.apply(sub.lam * t, f)
        if sub.sigma:
            f = math.exp(-sub.sigma * t) * f
        return f


def subordinate_known_density(F: ChernoffFamily, sub: SubordinatorSpec,
                              nodes: int = 64) -> ChernoffFamily:
    return KnownDensitySubordination(F, sub, nodes)


def subordinate_bounded_measure(F: ChernoffFamily, sub: SubordinatorSpec) -> ChernoffFamily:
    return BoundedMeasureSubordination(F, sub)
