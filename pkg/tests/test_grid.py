import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chernoff_kit import (Grid, GridFunction, fourier_forward, fourier_inverse, interpolate,
                          l2_norm, sample, sup_norm)
from chernoff_kit.grid import interpolate_many, trig_interpolate_many


def test_grid_rejects_bad_sizes():
    for m in (4, 12, 100):
        with pytest.raises(ValueError):
            Grid(0, 1, m)
    with pytest.raises(ValueError):
        Grid(1, 0, 16)
    with pytest.raises(ValueError):
        Grid(0, 1, 16, dim=3)


def test_grid_nodes_and_spacing():
    g = Grid(-1.0, 1.0, 8)
    assert np.allclose(g.h, 0.25)
    x = g.coords()[0]
    assert x[0] == -1.0 and np.isclose(x[-1], 0.75)
    g2 = Grid([0, 0], [1, 2], 16, dim=2)
    assert g2.points().shape == (256, 2)
    assert np.isclose(g2.cell_volume, 1 / 16 * 2 / 16)


def test_sample_constant_and_nonfinite():
    g = Grid(0, 1, 16)
    f = sample(g, lambda x: 1.0)
    assert f.is_real and np.all(f.values == 1.0)
    with pytest.raises(ValueError, match="node"), np.errstate(divide="ignore"):
        sample(g, lambda x: 1.0 / (x - x[3]))


def test_gridfunction_is_immutable():
    g = Grid(0, 1, 8)
    f = GridFunction.zeros(g)
    with pytest.raises(AttributeError):
        f.kind = "complex"
    with pytest.raises(ValueError):
        f.values[0] = 1.0


def test_norms():
    g = Grid(0, 1, 64)
    f = sample(g, lambda x: np.ones_like(x))
    assert sup_norm(f) == 1.0
    assert np.isclose(l2_norm(f), 1.0)


def test_fourier_of_gaussian():
    # f = exp(-x^2/2) has unitary transform exp(-p^2/2)
    g = Grid(-20, 20, 512)
    F = fourier_forward(sample(g, lambda x: np.exp(-x**2 / 2)))
    p = F.grid.coords()[0]
    assert np.abs(F.values - np.exp(-p**2 / 2)).max() < 1e-12


def test_fourier_round_trip_2d():
    g = Grid([-5, -4], [5, 4], 32, dim=2)
    f = sample(g, lambda x, y: np.exp(-x**2 - 0.5 * y**2) * (1 + 0.1j * x))
    back = fourier_inverse(fourier_forward(f), g)
    assert np.abs(back.values - f.values).max() < 1e-13


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=16, max_size=16))
def test_parseval(vals):
    g = Grid(-3, 5, 16)
    f = GridFunction(g, vals)
    assert np.isclose(l2_norm(f), l2_norm(fourier_forward(f)), rtol=1e-12, atol=1e-12)


def test_interpolation_exact_at_nodes_and_linear():
    g = Grid(0, 1, 16)
    f = sample(g, lambda x: 2 * x + 1)
    assert np.isclose(interpolate(f, g.coords()[0][5]), f.values[5])
    assert np.isclose(interpolate(f, 0.3), 1.6)
    # periodic wrap
    assert np.isclose(interpolate(f, 1.3), 1.6)


def test_trig_interpolant_band_limited():
    g = Grid(0, 2 * np.pi, 32)
    f = sample(g, lambda x: np.cos(3 * x) + np.sin(x))
    pts = np.linspace(0, 2 * np.pi, 7)[:, None]
    assert np.abs(trig_interpolate_many(f, pts) - (np.cos(3 * pts[:, 0]) + np.sin(pts[:, 0]))).max() < 1e-13


def test_bilinear_interpolation_2d():
    g = Grid([0, 0], [1, 1], 8, dim=2)
    f = sample(g, lambda x, y: x + 2 * y)
    assert np.isclose(interpolate_many(f, [[0.3, 0.2]])[0], 0.7)
