"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are written
straight to the terminal even when output capture is on.
"""

import time

import numpy as np
import pytest
from scipy.special import erfcx

from chernoff_kit import (DomainMask, FractionalMeasure, GeneratorSpec, Grid, GridFunction,
                          SubordinatorSpec, SymbolSpec, chernoff_iterate, convergence_study,
                          dirichlet_restrict, euler_maruyama, fractional_solve, gaussian_family,
                          l2_norm, matrix_euler_family, matrix_resolvent_family, mc_functional,
                          multiplicative_perturbation, poisson_family, potential_family, rotate,
                          sample, shift_family, subordinate_bounded_measure,
                          subordinate_known_density, sup_norm, symbol_family, theta_splitting)
from chernoff_kit.iterate import derivative_check, fit_order


def variable_spec(grid, killing=True):
    C = (lambda x: 0.1 * (1 + np.cos(x) ** 2)) if killing else None
    return GeneratorSpec(grid, lambda x: 0.5 * (1 + 0.3 * np.sin(x)),
                         lambda x: 0.2 * np.cos(x), C)


def monotone(errors):
    return all(b < a for a, b in zip(errors, errors[1:]))


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, f"{label}: {detail}"
    return emit


def test_c01_semigroup_exactness(verdict):
    # box [-pi, pi) with f0 = exp(-4x^2): wrap-around mass ~ e^{-39}
    g = Grid(-np.pi, np.pi, 256)
    f0 = sample(g, lambda x: np.exp(-4 * x**2))
    worst = {}
    for label, H in (("heat", SymbolSpec.quadratic(1.0)), ("cauchy", SymbolSpec.fractional(1.0)),
                     ("relativistic", SymbolSpec.relativistic(2.0, 1.0))):
        F = symbol_family(H, g)
        ref = F.apply(0.5, f0)
        worst[label] = max(sup_norm(chernoff_iterate(F, 0.5, n, f0) - ref)
                           for n in (1, 2, 4, 8, 16, 32, 64))
    verdict("C1 semigroup exactness", max(worst.values()) < 1e-9,
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-9)")


def test_c02_variable_coefficient_convergence(verdict):
    g = Grid(-np.pi, np.pi, 1024)
    F = gaussian_family(variable_spec(g))
    f0 = sample(g, lambda x: np.exp(np.cos(x)))
    ref = chernoff_iterate(F, 0.5, 4096, f0)
    ns = [8, 16, 32, 64, 128, 256, 512, 1024]
    rep = convergence_study(F, 0.5, f0, ns, ref, reference_name="self@4096")
    ok = monotone(rep.errors) and abs(rep.order - 1.0) <= 0.3
    verdict("C2 variable-coefficient Gaussian", ok,
            f"errors {rep.errors[0]:.2e} -> {rep.errors[-1]:.2e}, monotone {monotone(rep.errors)}, "
            f"order {rep.order:.3f} (want 1.0 +- 0.3)")


def test_c03_splitting_orders(verdict):
    g = Grid(-np.pi, np.pi, 256)
    f0 = sample(g, lambda x: np.exp(np.cos(x)))
    F1 = symbol_family(SymbolSpec.quadratic(0.5), g)
    F2 = potential_family(lambda x: 1 + np.sin(x) ** 2, g)
    ref = chernoff_iterate(theta_splitting(F1, F2, 0.5), 1.0, 4096, f0)
    ns = [8, 16, 32, 64, 128, 256, 512]
    lie = convergence_study(theta_splitting(F1, F2, 0.0), 1.0, f0, ns, ref).order
    strang = convergence_study(theta_splitting(F1, F2, 0.5), 1.0, f0, ns, ref).order
    Fc = potential_family(1.3, g)
    outs = [chernoff_iterate(theta_splitting(F1, Fc, th), 1.0, 16, f0) for th in (0, 0.25, 0.5, 1)]
    spread = max(sup_norm(o - outs[0]) for o in outs)
    ok = abs(lie - 1) <= 0.3 and abs(strang - 2) <= 0.4 and spread <= 1e-10
    verdict("C3 splitting orders", ok,
            f"theta=0 order {lie:.3f}, theta=1/2 order {strang:.3f}, "
            f"commuting theta spread {spread:.1e}")


def test_c04_multiplicative_perturbation(verdict):
    g = Grid(-np.pi, np.pi, 256)
    f0 = sample(g, lambda x: np.exp(np.cos(x)))
    a = lambda x: 1 + 0.5 * np.sin(x) ** 2
    P1 = poisson_family(1.0, g)
    bitwise = np.array_equal(multiplicative_perturbation(P1, a).apply(0.3, f0).values,
                             poisson_family(a, g).apply(0.3, f0).values)
    t = 0.5
    diff = sup_norm(chernoff_iterate(multiplicative_perturbation(P1, 2.0), t, 16, f0)
                    - chernoff_iterate(P1, 2 * t, 16, f0))
    verdict("C4 multiplicative perturbation", bitwise and diff <= 1e-9,
            f"bitwise {bitwise}, a=2 rescaling error {diff:.1e}")


def test_c05_dirichlet_interval(verdict):
    # box [-0.5, 1.5) around Omega = (0, 1); h = 2^-9
    g = Grid(-0.5, 1.5, 1024)
    F = gaussian_family(GeneratorSpec.heat(g))
    mask = DomainMask.from_boxes(g, [(0.0, 1.0)])
    f0 = sample(g, lambda x: np.sin(np.pi * x))
    x = g.coords()[0]
    inner = (x >= 0.1) & (x <= 0.9)
    exact = np.exp(-np.pi**2 * 0.1 / 2) * np.sin(np.pi * x)
    ns = [16, 64, 256]

    def errs(cutoff):
        D = dirichlet_restrict(F, mask, cutoff)
        return [float(np.abs(chernoff_iterate(D, 0.1, n, f0).values - exact)[inner].max())
                for n in ns]

    shifted, sharp = errs("shifted"), errs("sharp")
    ok = shifted[-1] <= 2e-3 and monotone(shifted)
    verdict("C5 Dirichlet interval", ok,
            f"shifted cutoff {', '.join(f'{e:.2e}' for e in shifted)} at n={ns} (tol 2e-3); "
            f"sharp indicator {', '.join(f'{e:.2e}' for e in sharp)}")


def test_c05_sharp_indicator_half_order_bias():
    # the unshifted indicator carries the O(sqrt(dt)) discrete-monitoring bias
    g = Grid(-0.5, 1.5, 1024)
    D = dirichlet_restrict(gaussian_family(GeneratorSpec.heat(g)),
                           DomainMask.from_boxes(g, [(0.0, 1.0)]))
    f0 = sample(g, lambda x: np.sin(np.pi * x))
    x = g.coords()[0]
    inner = (x >= 0.1) & (x <= 0.9)
    exact = np.exp(-np.pi**2 * 0.05) * np.sin(np.pi * x)
    ns = [16, 64, 256]
    e = [np.abs(chernoff_iterate(D, 0.1, n, f0).values - exact)[inner].max() for n in ns]
    assert monotone(e) and abs(fit_order(ns, e) - 0.5) < 0.1 and e[-1] > 2e-3


def test_c06_half_stable_subordination(verdict):
    # box [-8 pi, 8 pi): iterate and oracle are both periodic on it, so no wrap-around
    # error enters the comparison
    g = Grid(-8 * np.pi, 8 * np.pi, 512)
    f0 = sample(g, lambda x: np.exp(-x**2))
    heat = symbol_family(SymbolSpec.quadratic(1.0), g)
    sub = subordinate_known_density(heat, SubordinatorSpec(density="half_stable"), nodes=64)
    t0 = time.perf_counter()
    u = chernoff_iterate(sub, 0.5, 64, f0)
    secs = time.perf_counter() - t0
    err = l2_norm(u - symbol_family(SymbolSpec.fractional(1.0), g).apply(0.5, f0))
    verdict("C6 half-stable subordination", err <= 5e-3,
            f"l2 error {err:.2e} at n=64, 64 nodes (tol 5e-3), {secs:.1f} s")


def test_c07_bounded_measure_subordination(verdict):
    g = Grid(-8 * np.pi, 8 * np.pi, 512)
    f0 = sample(g, lambda x: np.exp(-x**2))
    heat = symbol_family(SymbolSpec.quadratic(1.0), g)
    sub = subordinate_bounded_measure(heat, SubordinatorSpec(atoms=(1.0,), weights=(1.0,)))
    orc = symbol_family(SymbolSpec.custom(lambda p: 1 - np.exp(-p**2)), g).apply(0.5, f0)
    err = l2_norm(chernoff_iterate(sub, 0.5, 128, f0) - orc)
    verdict("C7 bounded-measure subordination", err <= 1e-3,
            f"l2 error {err:.2e} at n=128 (tol 1e-3)")


def test_c08_monte_carlo(verdict):
    # box [-2 pi, 2 pi): |x| = 2 pi is about 7.8 standard deviations from x0
    g = Grid(-2 * np.pi, 2 * np.pi, 1024)
    spec = variable_spec(g, killing=False)
    t0 = time.perf_counter()
    ens = euler_maruyama(spec, 0.0, 0.5, 64, 200_000, seed=20240601)
    F = gaussian_family(spec)
    i0 = int(np.argmin(np.abs(g.coords()[0])))
    parts, ok = [], True
    for label, fn in (("exp(-x^2)", lambda x: np.exp(-x**2)), ("cos x", np.cos),
                      ("1/(1+x^2)", lambda x: 1 / (1 + x**2))):
        f0 = sample(g, fn)
        mean, se = mc_functional(ens, f0)
        det = chernoff_iterate(F, 0.5, 64, f0).values[i0].real
        good = abs(mean - det) <= 3 * se + 1e-3
        ok &= good
        parts.append(f"{label} |diff| {abs(mean - det):.1e} <= {3 * se + 1e-3:.1e}")
    secs = time.perf_counter() - t0
    verdict("C8 Monte Carlo consistency", ok and secs < 120, "; ".join(parts) + f"; {secs:.1f} s")


def test_c09_time_fractional(verdict):
    mu = FractionalMeasure.delta_half()
    t = 0.5
    g = Grid(-np.pi, np.pi, 256)
    heat = symbol_family(SymbolSpec.quadratic(0.5), g)
    f0 = sample(g, lambda x: np.sin(3 * x))
    us = [fractional_solve(heat, f0, t, n, mu) for n in (1, 4, 16, 64)]
    spread = max(sup_norm(u - us[0]) for u in us)
    # eigenmode sin(3x), eigenvalue -9/2: int e^{-lam tau} p(t, tau) dtau = erfcx(lam sqrt t)
    oracle = sup_norm(us[0] - f0 * float(erfcx(4.5 * np.sqrt(t))))
    G = gaussian_family(variable_spec(g))
    fb = sample(g, lambda x: np.exp(np.cos(x)))
    ref = fractional_solve(G, fb, t, 2048, mu)
    errs = [sup_norm(fractional_solve(G, fb, t, n, mu) - ref) for n in (8, 16, 32, 64, 128, 256, 512)]
    ok = spread <= 1e-6 and oracle <= 1e-6 and monotone(errs)
    verdict("C9 time-fractional solver", ok,
            f"n-spread {spread:.1e}, eigenmode oracle {oracle:.1e}, variable-coefficient errors "
            f"{errs[0]:.2e} -> {errs[-1]:.2e} monotone {monotone(errs)}")


def test_c10_schroedinger_rotation(verdict):
    g = Grid(-4 * np.pi, 4 * np.pi, 512)
    psi = sample(g, lambda x: np.exp(-x**2 / 2 + 2j * x))
    F = symbol_family(SymbolSpec.quadratic(1.0), g)
    R, Rs = rotate(F, "symbol"), rotate(F, "series")
    group = symbol_family(SymbolSpec.custom(lambda p: 1j * p**2, hermitian=False,
                                            real_valued=False), g).apply(0.4, psi)
    ns = [4, 8, 16, 32, 64, 128, 256, 512]
    dist, drift = [], 0.0
    for n in ns:
        u = chernoff_iterate(R, 0.4, n, psi)
        dist.append(l2_norm(u - group))
        drift = max(drift, abs(l2_norm(u) - l2_norm(psi)))
    modes = l2_norm(chernoff_iterate(Rs, 0.4, 8, psi) - chernoff_iterate(R, 0.4, 8, psi))
    ok = drift <= 1e-12 and monotone(dist) and modes <= 1e-8
    verdict("C10 Schroedinger rotation", ok,
            f"norm drift {drift:.1e}, distance {dist[0]:.2e} -> {dist[-1]:.2e} monotone "
            f"{monotone(dist)}, series vs symbol {modes:.1e}")


def test_c11_shift_family(verdict):
    g = Grid(-np.pi, np.pi, 256)
    f0 = sample(g, lambda x: np.exp(np.cos(x)))
    S = shift_family(g, "spectral")
    exact = symbol_family(SymbolSpec.quadratic(0.5), g).apply(0.5, f0)
    ns = [16, 32, 64, 128, 256, 512, 1024, 2048, 4096]
    errs = [sup_norm(chernoff_iterate(S, 0.5, n, f0) - exact) for n in ns]
    x = g.coords()[0]
    half_lap = GridFunction(g, 0.5 * np.exp(np.cos(x)) * (np.sin(x) ** 2 - np.cos(x)))
    dc = derivative_check(S, half_lap, f0, [1e-2, 1e-3, 1e-4])
    ok = monotone(errs) and dc.monotone
    verdict("C11 shift family", ok,
            f"errors {errs[0]:.2e} -> {errs[-1]:.2e} monotone {monotone(errs)}, residuals "
            + ", ".join(f"{r:.1e}" for _, r in dc.pairs))


def test_c12_matrix_reference_families(verdict):
    g = Grid(0.0, 1.0, 8)
    one = sample(g, lambda x: np.ones_like(x))
    t = 1.0
    ns = np.array([16, 32, 64, 128, 256, 512, 1024])
    parts, ok = [], True
    for lam in (-1.0, 0.5):
        predicted = lam**2 * np.exp(t * lam) * t**2 / 2
        for label, fam in (("euler", matrix_euler_family), ("resolvent", matrix_resolvent_family)):
            F = fam(lam * np.eye(8), g)
            e = np.array([sup_norm(chernoff_iterate(F, t, int(n), one) - np.exp(lam * t) * one)
                          for n in ns])
            # least-squares C in e ~ C / n
            C = float(np.sum(e / ns) / np.sum(1.0 / ns**2))
            ratio = C / predicted
            ok &= 0.5 <= ratio <= 2.0
            parts.append(f"{label} lam={lam:g} C/pred {ratio:.3f}")
    verdict("C12 matrix reference families", ok, "; ".join(parts))
