"""Uniform periodic grids and the functions sampled on them.

Every operator in the package acts on a :class:`GridFunction`: complex node
values on a uniform periodic box in one or two dimensions.  The Fourier
convention mimics the continuous unitary transform

    f^(p) = (2 pi)^(-d/2) \\int f(x) e^{-i p.x} dx,

discretised with the trapezoid weight ``h**d`` and node phases taken relative
to the true node coordinates, so that ``fourier_inverse(fourier_forward(f))``
is the identity and Parseval holds with the same ``l2_norm`` on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Grid",
    "GridFunction",
    "sample",
    "sup_norm",
    "l2_norm",
    "fourier_forward",
    "fourier_inverse",
    "interpolate",
    "interpolate_many",
    "trig_interpolate_many",
]


def _as_tuple(v, dim: int) -> tuple[float, ...]:
    if np.ndim(v) == 0:
        return (float(v),) * dim
    out = tuple(float(a) for a in v)
    if len(out) != dim:
        raise ValueError(f"expected {dim} bounds, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    """Uniform periodic box with ``m`` nodes per axis.

    Nodes are ``lower + k*h`` for ``k = 0..m-1``; ``upper`` is excluded.
    """

    dim: int
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    m: int

    def __init__(self, lower, upper, m: int, dim: int = 1):
        if dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {dim}")
        m = int(m)
        if m < 8 or m & (m - 1):
            raise ValueError(f"m must be a power of two >= 8, got {m}")
        lo = _as_tuple(lower, dim)
        hi = _as_tuple(upper, dim)
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError(f"upper bounds {hi} must exceed lower bounds {lo}")
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "m", m)

    @property
    def lengths(self) -> np.ndarray:
        return np.array(self.upper) - np.array(self.lower)

    @property
    def h(self) -> np.ndarray:
        """Spacing per axis."""
        return self.lengths / self.m

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def size(self) -> int:
        return self.m**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.m,) * self.dim

    def axes(self) -> list[np.ndarray]:
        return [lo + hh * np.arange(self.m) for lo, hh in zip(self.lower, self.h)]

    def coords(self) -> tuple[np.ndarray, ...]:
        """Flattened node coordinates per axis, row-major (first axis slowest)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return tuple(a.ravel() for a in mesh)

    def points(self) -> np.ndarray:
        """Node coordinates as an array of shape ``(size, dim)``."""
        return np.stack(self.coords(), axis=1)

    def frequency_axes(self) -> list[np.ndarray]:
        """Angular frequencies ``2 pi k / L`` in FFT order."""
        return [2 * np.pi * np.fft.fftfreq(self.m, d=hh) for hh in self.h]

    def frequencies(self) -> tuple[np.ndarray, ...]:
        """Frequency mesh in FFT order, one array of ``shape`` per axis."""
        return tuple(np.meshgrid(*self.frequency_axes(), indexing="ij"))

    def frequency_grid(self) -> "Grid":
        """Grid carrying frequency samples, nodes ``2 pi k / L`` for ``k = -m/2..m/2-1``."""
        dp = 2 * np.pi / self.lengths
        half = self.m // 2
        return Grid(-half * dp, half * dp, self.m, self.dim)

    def wrap(self, pts: np.ndarray) -> np.ndarray:
        lo = np.array(self.lower)
        return lo + np.mod(pts - lo, self.lengths)


class GridFunction:
    """Immutable complex node values on a :class:`Grid`.

    ``kind`` is ``"real"`` or ``"complex"``; real functions carry exactly zero
    imaginary parts.
    """

    __slots__ = ("grid", "values", "kind")

    def __init__(self, grid: Grid, values, kind: str | None = None):
        vals = np.array(values, dtype=np.complex128).reshape(-1)
        if vals.size != grid.size:
            raise ValueError(f"expected {grid.size} values, got {vals.size}")
        if kind is None:
            kind = "real" if not np.any(vals.imag) else "complex"
        if kind == "real":
            vals.imag = 0.0
        elif kind != "complex":
            raise ValueError(f"kind must be 'real' or 'complex', got {kind!r}")
        vals.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "kind", kind)

    def __setattr__(self, name, value):
        raise AttributeError("GridFunction is immutable")

    @classmethod
    def zeros(cls, grid: Grid) -> "GridFunction":
        return cls(grid, np.zeros(grid.size), "real")

    @property
    def is_real(self) -> bool:
        return self.kind == "real"

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    def as_array(self) -> np.ndarray:
        """Values reshaped to the grid shape (a copy)."""
        return self.values.reshape(self.grid.shape).copy()

    def with_values(self, values, keep_real: bool = True) -> "GridFunction":
        """New function on the same grid; realness is kept when requested and possible."""
        kind = "real" if (keep_real and self.is_real) else None
        return GridFunction(self.grid, values, kind)

    def _check(self, other: "GridFunction") -> None:
        if other.grid != self.grid:
            raise ValueError("grid mismatch between operands")

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check(other)
        kind = "real" if self.is_real and other.is_real else "complex"
        return GridFunction(self.grid, self.values + other.values, kind)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check(other)
        kind = "real" if self.is_real and other.is_real else "complex"
        return GridFunction(self.grid, self.values - other.values, kind)

    def __mul__(self, c) -> "GridFunction":
        c = complex(c)
        kind = "real" if self.is_real and c.imag == 0 else "complex"
        if kind == "real":
            return GridFunction(self.grid, self.values * c.real, kind)
        return GridFunction(self.grid, self.values * c, kind)

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return GridFunction(self.grid, -self.values, self.kind)

    def __repr__(self) -> str:
        return f"GridFunction(dim={self.grid.dim}, m={self.grid.m}, kind={self.kind})"


def sample(grid: Grid, f: Callable) -> GridFunction:
    """Evaluate ``f(*coords)`` at every node.

    ``f`` receives one coordinate array per axis (vectorised, numpy style);
    a scalar return value is broadcast.
    """
    coords = grid.coords()
    vals = np.broadcast_to(np.asarray(f(*coords), dtype=np.complex128), coords[0].shape)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        node = tuple(float(c[i]) for c in coords)
        raise ValueError(f"non-finite value {vals[i]} at node {i} {node}")
    return GridFunction(grid, vals)


def sup_norm(f: GridFunction) -> float:
    if f.values.size == 0:
        return 0.0
    return float(np.max(np.abs(f.values)))


def l2_norm(f: GridFunction) -> float:
    return float(np.sqrt(f.grid.cell_volume * np.sum(np.abs(f.values) ** 2)))


def _phase(grid: Grid, sign: float) -> np.ndarray:
    # e^{-i p x_0} factor tying FFT index phases to the true node positions
    freqs = grid.frequencies()
    arg = sum(p * lo for p, lo in zip(freqs, grid.lower))
    return np.exp(sign * 1j * arg)


def fourier_forward(f: GridFunction) -> GridFunction:
    """Frequency samples on ``grid.frequency_grid()``, ordered ``k = -m/2..m/2-1``."""
    g = f.grid
    d = g.dim
    spec = np.fft.fftn(f.values.reshape(g.shape)) * _phase(g, -1.0)
    spec *= g.cell_volume / (2 * np.pi) ** (d / 2)
    return GridFunction(g.frequency_grid(), np.fft.fftshift(spec), "complex")


def fourier_inverse(F: GridFunction, grid: Grid) -> GridFunction:
    """Inverse of :func:`fourier_forward` back onto the spatial ``grid``."""
    if F.grid != grid.frequency_grid():
        raise ValueError("frequency samples do not belong to this spatial grid")
    d = grid.dim
    spec = np.fft.ifftshift(F.values.reshape(grid.shape)) * _phase(grid, 1.0)
    vals = np.fft.ifftn(spec) * (2 * np.pi) ** (d / 2) / grid.cell_volume
    return GridFunction(grid, vals, "complex")


def _cell_index(grid: Grid, pts: np.ndarray):
    lo = np.array(grid.lower)
    u = np.mod(pts - lo, grid.lengths) / grid.h
    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    i0 %= grid.m
    return i0, frac


def interpolate_many(f: GridFunction, pts) -> np.ndarray:
    """Multilinear periodic interpolation at points of shape ``(k, dim)``."""
    g = f.grid
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if g.dim == 1 and pts.shape[-1] != 1:
        pts = pts.reshape(-1, 1)
    i0, frac = _cell_index(g, pts)
    arr = f.values.reshape(g.shape)
    m = g.m
    if g.dim == 1:
        i, w = i0[:, 0], frac[:, 0]
        return (1 - w) * arr[i] + w * arr[(i + 1) % m]
    ix, iy = i0[:, 0], i0[:, 1]
    wx, wy = frac[:, 0], frac[:, 1]
    jx, jy = (ix + 1) % m, (iy + 1) % m
    return ((1 - wx) * (1 - wy) * arr[ix, iy] + wx * (1 - wy) * arr[jx, iy]
            + (1 - wx) * wy * arr[ix, jy] + wx * wy * arr[jx, jy])


def interpolate(f: GridFunction, x: Sequence[float] | float) -> complex:
    """Multilinear interpolation at a single point (periodic wrap outside the box)."""
    return complex(interpolate_many(f, np.reshape(np.asarray(x, dtype=float), (1, -1)))[0])


def trig_interpolate_many(f: GridFunction, pts, chunk: int = 2048) -> np.ndarray:
    """Evaluate the periodic trigonometric interpolant of ``f`` at arbitrary points.

    The Nyquist mode is split symmetrically so real data stay real.  Cost is
    ``O(k * size)``; meant for per-node evaluations, not bulk work.
    """
    g = f.grid
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if g.dim == 1 and pts.shape[-1] != 1:
        pts = pts.reshape(-1, 1)
    coef = np.fft.fftn(f.values.reshape(g.shape)) / g.size
    k = np.fft.fftfreq(g.m, d=1.0 / g.m)
    half = g.m // 2
    ny = np.isclose(np.abs(k), half)
    # cos-form for the Nyquist column: c * cos(pi m u) instead of c * e^{-i pi m u}
    lo = np.array(g.lower)
    u = (pts - lo) / g.lengths
    out = np.empty(pts.shape[0], dtype=np.complex128)
    for start in range(0, pts.shape[0], chunk):
        uu = u[start:start + chunk]
        basis = []
        for ax in range(g.dim):
            e = np.exp(2j * np.pi * uu[:, ax, None] * k[None, :])
            e[:, ny] = np.cos(2 * np.pi * uu[:, ax, None] * half)
            basis.append(e)
        if g.dim == 1:
            out[start:start + chunk] = basis[0] @ coef
        else:
            out[start:start + chunk] = np.einsum("pi,ij,pj->p", basis[0], coef, basis[1])
    return out
