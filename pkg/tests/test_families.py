import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chernoff_kit import (GeneratorSpec, Grid, GridFunction, SymbolSpec, averaging_family,
                          chernoff_iterate, composite_convolution_family, gaussian_family, l2_norm,
                          matrix_euler_family, matrix_resolvent_family, periodic_laplacian_matrix,
                          poisson_family, potential_family, sample, shift_family, sup_norm,
                          symbol_family)


def heat_oracle(grid, f, t, diffusion=0.5):
    return symbol_family(SymbolSpec.quadratic(diffusion, dim=grid.dim), grid).apply(t, f)


def test_identity_at_zero_for_every_family(grid1, smooth):
    spec = GeneratorSpec.heat(grid1)
    L = periodic_laplacian_matrix(Grid(0, 1, 8))
    fams = [gaussian_family(spec), symbol_family(SymbolSpec.fractional(1.0), grid1),
            poisson_family(1.0, grid1), potential_family(lambda x: 1 + x**2, grid1),
            shift_family(grid1), averaging_family([[1.0], [-1.0]], [0.5, 0.5], grid1),
            composite_convolution_family(spec, SymbolSpec.fractional(0.5))]
    for F in fams:
        assert F.apply(0.0, smooth) is smooth
    g8 = Grid(0, 1, 8)
    f8 = sample(g8, np.cos)
    assert matrix_euler_family(L, g8).apply(0.0, f8) is f8


def test_generator_spec_validation(grid1):
    with pytest.raises(ValueError, match="nonnegative"):
        GeneratorSpec(grid1, 0.5, C=-1.0)
    with pytest.raises(ValueError, match="ellipticity"):
        GeneratorSpec(grid1, lambda x: 0.5 + 0.1 * np.sin(x), a0=0.45)
    with pytest.raises(ValueError):
        GeneratorSpec(grid1, lambda x: np.sin(x))
    g2 = Grid([-1, -1], [1, 1], 16, dim=2)
    with pytest.raises(ValueError, match="symmetric"):
        GeneratorSpec(g2, [[1.0, 0.2], [0.0, 1.0]])


def test_gaussian_matches_heat_semigroup():
    g = Grid(-np.pi, np.pi, 256)
    f = sample(g, lambda x: np.exp(np.cos(x)))
    F = gaussian_family(GeneratorSpec.heat(g))
    for t in (0.05, 0.3):
        assert sup_norm(F.apply(t, f) - heat_oracle(g, f, t)) < 1e-12


def test_gaussian_narrow_kernel_keeps_diffusion():
    # step far below the mesh: band-limited rows still act as the heat multiplier
    g = Grid(-np.pi, np.pi, 64)
    f = sample(g, lambda x: np.exp(np.cos(x)))
    F = gaussian_family(GeneratorSpec.heat(g))
    t = 1e-6
    assert sup_norm(F.apply(t, f) - heat_oracle(g, f, t)) < 1e-14
    assert sup_norm(chernoff_iterate(F, 0.5, 4096, f) - heat_oracle(g, f, 0.5)) < 1e-11


def test_gaussian_drift_and_killing_constant():
    g = Grid(-np.pi, np.pi, 256)
    f = sample(g, lambda x: np.exp(np.cos(x)))
    F = gaussian_family(GeneratorSpec(g, 0.5, B=0.7, C=0.3))
    # kernel mean x - tB: exact translate of the heat solution, then killing
    H = symbol_family(SymbolSpec.quadratic(0.5, B=0.7, C=0.3), g)
    assert sup_norm(F.apply(0.2, f) - H.apply(0.2, f)) < 1e-11


def test_gaussian_is_sub_markovian(variable_spec):
    F = gaussian_family(variable_spec)
    one = GridFunction(variable_spec.grid, np.ones(variable_spec.grid.size))
    out = F.apply(0.1, one).real
    assert np.all(out <= 1 + 1e-14) and np.all(out > 0)


def test_gaussian_2d_constant_matches_symbol():
    g = Grid([-np.pi, -np.pi], [np.pi, np.pi], 32, dim=2)
    A = [[0.5, 0.1], [0.1, 0.3]]
    f = sample(g, lambda x, y: np.exp(np.cos(x) + 0.5 * np.sin(y)))
    F = gaussian_family(GeneratorSpec(g, A))
    H = symbol_family(SymbolSpec.quadratic(np.array(A), dim=2), g)
    for t in (0.2, 1e-5):
        assert sup_norm(F.apply(t, f) - H.apply(t, f)) < 1e-10


def test_symbol_families_exact_semigroup(grid1, smooth):
    for H in (SymbolSpec.quadratic(1.0), SymbolSpec.fractional(1.0), SymbolSpec.relativistic(2, 1)):
        F = symbol_family(H, grid1)
        assert sup_norm(F.apply(0.2, F.apply(0.3, smooth)) - F.apply(0.5, smooth)) < 1e-12


def test_symbol_rejects_negative_real_part(grid1):
    with pytest.raises(ValueError, match="negative real part"):
        symbol_family(SymbolSpec.custom(lambda p: -p**2), grid1)


def test_zero_symbol_is_identity(grid1, smooth):
    F = symbol_family(SymbolSpec.zero(), grid1)
    assert F.apply(1.0, smooth) is smooth


def test_symbol_sum():
    H = SymbolSpec.quadratic(1.0) + SymbolSpec.fractional(1.0)
    p = np.array([-2.0, 0.0, 3.0])
    assert np.allclose(H(p), p**2 + np.abs(p))


def test_poisson_matches_cauchy_symbol():
    g = Grid(-np.pi, np.pi, 256)
    f = sample(g, lambda x: np.exp(np.cos(x)))
    P = poisson_family(1.0, g)
    C = symbol_family(SymbolSpec.fractional(1.0), g)
    # the periodised Poisson kernel is the exact semigroup of |p|
    assert sup_norm(P.apply(0.3, f) - C.apply(0.3, f)) < 1e-10


def test_poisson_rows_have_unit_mass():
    g = Grid(-1, 1, 64)
    P = poisson_family(lambda x: 1 + x**2, g)
    M = P.matrix(np.full(g.size, 0.05))
    assert np.allclose(M.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        poisson_family(lambda x: x, g)


def test_potential_family():
    g = Grid(0, 1, 16)
    f = sample(g, lambda x: 1.0 + 0 * x)
    F = potential_family(lambda x: -x, g)
    assert np.allclose(F.apply(2.0, f).values, np.exp(2 * g.coords()[0]))
    assert np.isclose(F.w, g.coords()[0].max())


def test_shift_family_derivative_taylor(grid1, smooth):
    # U(t) phi = (phi(x + sqrt t) + phi(x - sqrt t)) / 2 ~ phi + (t/2) phi''
    S = shift_family(grid1, "spectral")
    x = grid1.coords()[0]
    d2 = np.exp(np.cos(x)) * (np.sin(x) ** 2 - np.cos(x))
    t = 1e-4
    q = (S.apply(t, smooth).values - smooth.values) / t
    assert np.abs(q - 0.5 * d2).max() < 1e-3


def test_shift_spectral_uniform_multiplier(grid1, smooth):
    S = shift_family(grid1, "spectral")
    t = 0.3
    per_node = S.apply_at_times(np.full(grid1.size, t) * (1 + 1e-16 * 0), smooth)
    mixed = S._apply_at_times_impl(np.full(grid1.size, t), smooth)
    assert sup_norm(per_node - mixed) < 1e-12


def test_averaging_validation(grid1):
    with pytest.raises(ValueError, match="symmetric"):
        averaging_family([[1.0], [-2.0]], [0.5, 0.5], grid1)
    with pytest.raises(ValueError, match="probability"):
        averaging_family([[1.0], [-1.0]], [0.5, 0.6], grid1)


def test_averaging_2d_moments():
    g = Grid([-np.pi, -np.pi], [np.pi, np.pi], 32, dim=2)
    atoms = [[1, 0], [-1, 0], [0, 2], [0, -2]]
    U = averaging_family(atoms, [0.25] * 4, g, "spectral")
    assert np.allclose(U.second_moments, [0.5, 2.0])


def test_composite_convolution(grid1, smooth):
    spec = GeneratorSpec.heat(grid1)
    F = composite_convolution_family(spec, SymbolSpec.fractional(1.0))
    H = symbol_family(SymbolSpec.quadratic(0.5) + SymbolSpec.fractional(1.0), grid1)
    assert sup_norm(F.apply(0.2, smooth) - H.apply(0.2, smooth)) < 1e-10


def test_matrix_families_scalar():
    g = Grid(0, 1, 8)
    one = sample(g, lambda x: 1.0 + 0 * x)
    E = matrix_euler_family(-2.0 * np.eye(8), g)
    R = matrix_resolvent_family(-2.0 * np.eye(8), g)
    assert np.allclose(E.apply(0.1, one).values, 0.8)
    assert np.allclose(R.apply(0.1, one).values, 1 / 1.2)
    with pytest.raises(ValueError, match="singular"):
        matrix_resolvent_family(np.eye(8), g).apply(1.0, one)


def test_periodic_laplacian_on_mode():
    g = Grid(0, 2 * np.pi, 64)
    f = sample(g, lambda x: np.cos(x))
    L = periodic_laplacian_matrix(g)
    assert np.abs(L @ f.values + f.values).max() < 1e-3


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_gaussian_linear(a, b):
    g = Grid(-np.pi, np.pi, 64)
    F = gaussian_family(GeneratorSpec(g, lambda x: 0.5 + 0.2 * np.sin(x), lambda x: np.cos(x)))
    f1 = sample(g, np.cos)
    f2 = sample(g, lambda x: np.sin(2 * x))
    lhs = F.apply(0.1, a * f1 + b * f2)
    rhs = a * F.apply(0.1, f1) + b * F.apply(0.1, f2)
    assert sup_norm(lhs - rhs) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-4, 1.0))
def test_contraction_bound(t):
    g = Grid(-np.pi, np.pi, 64)
    f = sample(g, lambda x: np.sign(np.sin(x)) + 0.0)
    for F in (gaussian_family(GeneratorSpec(g, 0.5, C=lambda x: 1 + np.cos(x))),
              poisson_family(lambda x: 1 + 0.5 * np.sin(x) ** 2, g),
              shift_family(g)):
        assert sup_norm(F.apply(t, f)) <= np.exp(F.w * t) * sup_norm(f) + 1e-12
    assert l2_norm(symbol_family(SymbolSpec.quadratic(1.0), g).apply(t, f)) <= l2_norm(f) + 1e-12
