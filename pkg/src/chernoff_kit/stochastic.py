"""Monte Carlo cross-checks and the time-fractional solver.

Normal variates come from ``numpy.random.Generator(Philox(seed))`` through
``standard_normal``; Philox is counter based, so a seed fixes the stream on
every platform numpy supports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .families import ChernoffFamily, GeneratorSpec
from .grid import GridFunction, interpolate_many, trig_interpolate_many
from .iterate import chernoff_iterate

__all__ = [
    "PathEnsemble",
    "euler_maruyama",
    "mc_functional",
    "inverse_half_stable_density",
    "half_stable_subordinator_density",
    "FractionalMeasure",
    "fractional_solve",
]

TAIL_MASS = 1e-8


@dataclass(frozen=True)
class PathEnsemble:
    states: np.ndarray  # (paths, dim)
    seed: int
    n: int
    t: float
    spec: GeneratorSpec

    @property
    def count(self) -> int:
        return self.states.shape[0]


def _sqrt_2A(A: np.ndarray) -> np.ndarray:
    """Symmetric square root of ``2 A`` for a stack of ``(k, d, d)`` matrices."""
    if A.shape[1] == 1:
        return np.sqrt(2 * A)
    lam, V = np.linalg.eigh(A)
    return np.einsum("kij,kj,klj->kil", V, np.sqrt(2 * np.maximum(lam, 0.0)), V)


def euler_maruyama(spec: GeneratorSpec, x0, t: float, n: int, paths: int,
                   seed: int = 0) -> PathEnsemble:
    """Weak Euler-Maruyama for ``dX = -B(X) dt + sqrt(2 A(X)) dW``.

    Its law after ``n`` steps matches the ``n``-fold frozen-coefficient
    Gaussian iteration, which makes it an independent check of that family.
    """
    if spec.C is not None and np.any(spec.C_nodes):
        raise ValueError("euler_maruyama needs C = 0; killing is not simulated")
    if n < 1 or paths < 1:
        raise ValueError("need n >= 1 and paths >= 1")
    g = spec.grid
    d = g.dim
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (d,))
    rng = np.random.Generator(np.random.Philox(int(seed)))
    dt = float(t) / n
    X = np.tile(x0, (paths, 1))
    lo = np.array(g.lower) - g.lengths
    hi = np.array(g.upper) + g.lengths
    for k in range(n):
        Z = rng.standard_normal((paths, d))
        S = _sqrt_2A(spec.diffusion_at(X))
        X = X - spec.drift_at(X) * dt + math.sqrt(dt) * np.einsum("kij,kj->ki", S, Z)
        if np.any(X < lo) or np.any(X > hi) or not np.all(np.isfinite(X)):
            raise ValueError(
                f"paths left the simulation box by more than one box width at step {k + 1}; "
                "use a larger box")
    return PathEnsemble(X, int(seed), int(n), float(t), spec)


def mc_functional(ensemble: PathEnsemble, f0: GridFunction,
                  interpolation: str = "linear") -> tuple[float, float]:
    """Sample mean and standard error of ``Re f0`` at the terminal states."""
    if interpolation == "spectral":
        vals = trig_interpolate_many(f0, ensemble.states).real
    else:
        vals = interpolate_many(f0, ensemble.states).real
    k = vals.size
    mean = math.fsum(vals) / k
    if k < 2:
        return mean, 0.0
    var = math.fsum((vals - mean) ** 2) / (k - 1)
    return mean, math.sqrt(var / k)


def inverse_half_stable_density(t, tau):
    """``p(t, tau) = (pi t)^{-1/2} exp(-tau^2 / (4 t))``: density of the inverse 1/2-stable subordinator."""
    tau = np.asarray(tau, dtype=float)
    return np.exp(-tau * tau / (4 * t)) / np.sqrt(np.pi * t)


def half_stable_subordinator_density(t, s):
    """``g_t(s) = t / (2 sqrt(pi)) s^{-3/2} exp(-t^2 / (4 s))``, with ``g_t(0) = 0``."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    sp = s[pos]
    out[pos] = t / (2 * np.sqrt(np.pi)) * sp**-1.5 * np.exp(-t * t / (4 * sp))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FractionalMeasure:
    """Mixing measure of the time-fractional problem.

    ``tag="delta_half"`` is the Caputo order 1/2 case with the analytic
    density.  ``tag="table"`` takes a density ``p(t, tau)`` sampled on a
    ``tau`` grid (``taus``, ``density``) for the one target time ``t``.
    """

    tag: str = "delta_half"
    t: float | None = None
    taus: tuple = ()
    density: tuple = ()

    def __post_init__(self):
        if self.tag not in ("delta_half", "table"):
            raise ValueError(f"unknown fractional measure {self.tag!r}")
        if self.tag == "table":
            tau = np.asarray(self.taus, dtype=float)
            p = np.asarray(self.density, dtype=float)
            if tau.ndim != 1 or tau.shape != p.shape or tau.size < 2:
                raise ValueError("table needs matching 1D tau and density samples")
            if np.any(np.diff(tau) <= 0) or tau[0] < 0:
                raise ValueError("table tau grid must be nonnegative and increasing")
            if np.any(p < 0):
                raise ValueError("table density must be nonnegative")
            mass = np.trapezoid(p, tau)
            if abs(mass - 1.0) > 1e-6:
                raise ValueError(f"table density integrates to {mass:.8g}, not 1")

    @classmethod
    def delta_half(cls) -> "FractionalMeasure":
        return cls("delta_half")

    @classmethod
    def table(cls, t: float, taus, density) -> "FractionalMeasure":
        return cls("table", float(t), tuple(map(float, taus)), tuple(map(float, density)))

    def quadrature(self, t: float, nodes: int = 48):
        """Nodes and weights integrating against ``p(t, .)``."""
        if self.tag == "delta_half":
            tau_max = 2 * math.sqrt(t) * math.sqrt(math.log(1 / TAIL_MASS))
            x, w = np.polynomial.legendre.leggauss(nodes)
            tau = 0.5 * tau_max * (x + 1)
            wts = 0.5 * tau_max * w * inverse_half_stable_density(t, tau)
            if abs(wts.sum() - 1.0) > 10 * TAIL_MASS + 1e-10:
                raise ValueError(f"{nodes} nodes cannot resolve the density mass at t={t}")
            return tau, wts
        if self.t is None or not math.isclose(self.t, t, rel_tol=1e-12):
            raise ValueError(f"density table is sampled at t={self.t}, requested t={t}")
        tau = np.asarray(self.taus)
        p = np.asarray(self.density)
        # trapezoid weights on the supplied samples
        dt = np.diff(tau)
        wts = np.zeros_like(tau)
        wts[:-1] += dt / 2
        wts[1:] += dt / 2
        return tau, wts * p


def fractional_solve(F: ChernoffFamily, f0: GridFunction, t: float, n: int,
                     mu: FractionalMeasure, nodes: int = 48) -> GridFunction:
    """``f_n(t) = \\int [F(tau/n)]^n f0 p(t, tau) dtau`` by quadrature in ``tau``."""
    if not t > 0:
        raise ValueError(f"fractional_solve needs t > 0, got {t}")
    tau, wts = mu.quadrature(float(t), nodes)
    acc = np.zeros(f0.grid.size, dtype=np.complex128)
    real = f0.is_real and F.preserves_real
    for tk, wk in zip(tau, wts):
        if wk == 0.0:
            continue
        u = f0 if tk == 0.0 else chernoff_iterate(F, float(tk), n, f0)
        acc += wk * u.values
    return GridFunction(f0.grid, acc, "real" if real else "complex")
