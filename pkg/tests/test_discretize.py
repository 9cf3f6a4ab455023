"""Tests for the finite-volume system builder."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import dblquad, quad as scipy_quad
from scipy.special import i0

from nlw.discretize import (
    DiscreteSystem,
    ZeroCellError,
    build_system,
    discretize_kernel,
    load_system,
    pushforward_measure,
    save_system,
    verify_moment_bound,
)
from nlw.kernels import (
    ConstantKernel,
    FractionalKernel,
    GibbsMeasure,
    PotentialSpec,
    QuadratureConfig,
    TabulatedMeasure,
    UniformMeasure,
    eval_kernel,
    second_moment,
)
from nlw.torus import build_grid


# ---------------------------------------------------------------------------
# pushforward
# ---------------------------------------------------------------------------


def test_pushforward_uniform_is_flat():
    for d, n in [(1, 8), (2, 4)]:
        grid = build_grid(d, n)
        w = pushforward_measure(UniformMeasure(), grid)
        assert np.allclose(w, 1.0 / grid.n_points, rtol=1e-14)
        assert abs(w.sum() - 1.0) <= 1e-14


def test_pushforward_gibbs_against_refined_quadrature():
    grid = build_grid(1, 8)
    meas = GibbsMeasure(potential=PotentialSpec(expr="cos(2*pi*x)"))
    w = pushforward_measure(meas, grid)
    cv = float(i0(1.0))
    for j, xj in enumerate(grid.points[:, 0]):
        ref = scipy_quad(lambda t: np.exp(-np.cos(2 * np.pi * t)) / cv, xj - 1 / 16, xj + 1 / 16)[0]
        assert w[j] == pytest.approx(ref, rel=1e-9)


def test_pushforward_records_renormalization_factor():
    grid = build_grid(1, 8)
    meas = GibbsMeasure(potential=PotentialSpec(expr="cos(2*pi*x)"))
    w, factor = pushforward_measure(meas, grid, return_factor=True)
    assert abs(factor - 1.0) <= 1e-8
    assert abs(w.sum() - 1.0) <= 1e-14


def test_pushforward_rejects_empty_cells():
    grid = build_grid(1, 4)
    meas = TabulatedMeasure(weights=np.array([1.0, 1.0, 0.0, 1.0]), dim=1)
    with pytest.raises(ZeroCellError):
        pushforward_measure(meas, grid)


# ---------------------------------------------------------------------------
# kernel discretization
# ---------------------------------------------------------------------------


def test_constant_kernel_inactive_pairs_exact():
    grid = build_grid(1, 8)
    eta = discretize_kernel(ConstantKernel(c=2.0), UniformMeasure(), grid)
    n = 8
    for j in range(n):
        for k in range(n):
            if j == k:
                assert eta[j, k] == 0.0
            elif min(abs(j - k), n - abs(j - k)) == 1:
                assert 0.0 < eta[j, k] < 2.0  # cutoff removes part of the mass
            else:
                assert eta[j, k] == pytest.approx(2.0, rel=1e-12)


def test_constant_adjacent_pair_oracle():
    # displacement form: I/c = int_{w/2}^{2w} (w - |t - w|) dt = 7 w^2 / 8,
    # so the adjacent entry is exactly 7c/8 for n >= 4
    for n in (4, 8, 16):
        grid = build_grid(1, n)
        eta = discretize_kernel(ConstantKernel(c=3.0), UniformMeasure(), grid)
        assert eta[0, 1] == pytest.approx(3.0 * 7.0 / 8.0, rel=1e-10)
        assert eta[0, n - 1] == pytest.approx(3.0 * 7.0 / 8.0, rel=1e-10)  # wrap pair


def test_constant_adjacent_pair_n2():
    # n = 2: window [0,1] wraps; surviving mass 3/16 of the cell product
    grid = build_grid(1, 2)
    eta = discretize_kernel(ConstantKernel(c=1.0), UniformMeasure(), grid)
    assert eta[0, 1] == pytest.approx(0.75, rel=1e-10)


def test_fractional_far_pair_against_dblquad():
    # independent 2-D adaptive quadrature of the same cell-pair integral
    grid = build_grid(1, 8)
    eta = discretize_kernel(FractionalKernel(s=1.0), UniformMeasure(), grid)

    def integrand(y, x):
        r = abs(y - x)
        r = min(r, 1.0 - r)
        return r ** (-2.0)

    val, err = dblquad(integrand, -1 / 16, 1 / 16, lambda x: 7 / 16, lambda x: 9 / 16, epsabs=1e-12)
    oracle = val * 64.0  # divide by pi_0 * pi_4 = 1/64
    assert eta[0, 4] == pytest.approx(oracle, rel=5e-3)
    assert eta[0, 4] == pytest.approx(oracle, rel=2e-4)  # doubling tol is 1e-4


def test_eta_symmetric_zero_diagonal():
    grid = build_grid(1, 16)
    eta = discretize_kernel(FractionalKernel(s=0.5), UniformMeasure(), grid)
    assert np.array_equal(eta, eta.T)
    assert np.all(np.diagonal(eta) == 0.0)
    assert np.all(eta >= 0.0)
    assert np.all(np.isfinite(eta))


def test_discretize_requires_positive_weights():
    grid = build_grid(1, 4)
    with pytest.raises(ZeroCellError):
        discretize_kernel(
            ConstantKernel(c=1.0), UniformMeasure(), grid, weights=np.array([0.5, 0.5, 0.0, 0.0])
        )


# ---------------------------------------------------------------------------
# build_system
# ---------------------------------------------------------------------------


def test_build_system_constant_uniform():
    grid = build_grid(1, 4)
    sys = build_system(ConstantKernel(c=1.5), UniformMeasure(), grid)
    assert np.allclose(sys.pi, 0.25, rtol=1e-14)
    off = sys.eta[~np.eye(4, dtype=bool)]
    assert np.all((off > 0.0) & (off <= 1.5 + 1e-12))
    assert sys.delta == grid.cell_diameter
    assert sys.provenance["kernel"] == {"type": "constant", "c": 1.5}


def test_build_is_deterministic():
    grid = build_grid(1, 8)
    meas = GibbsMeasure(potential=PotentialSpec(expr="cos(2*pi*x)"))
    a = build_system(FractionalKernel(s=1.0), meas, grid)
    b = build_system(FractionalKernel(s=1.0), meas, grid)
    assert np.array_equal(a.pi, b.pi)
    assert np.array_equal(a.eta, b.eta)


def test_build_2d_smoke():
    grid = build_grid(2, 4)
    sys = build_system(ConstantKernel(c=1.0), UniformMeasure(), grid)
    assert sys.eta.shape == (16, 16)
    assert np.array_equal(sys.eta, sys.eta.T)
    # pairs with per-axis center offsets >= 2 cells have inactive cutoff
    assert sys.eta[0, 10] == pytest.approx(1.0, rel=1e-10)  # offset (2,2)
    sup = second_moment(ConstantKernel(c=1.0), UniformMeasure(), np.array([0.0, 0.0]))
    rep = verify_moment_bound(sys, sup)
    assert rep.passes


def test_system_arrays_are_immutable():
    grid = build_grid(1, 4)
    sys = build_system(ConstantKernel(c=1.0), UniformMeasure(), grid)
    with pytest.raises(ValueError):
        sys.eta[0, 1] = 99.0
    with pytest.raises(ValueError):
        sys.pi[0] = 0.5


def test_discrete_system_validation():
    grid = build_grid(1, 4)
    good_pi = np.full(4, 0.25)
    good_eta = np.ones((4, 4)) - np.eye(4)
    DiscreteSystem.from_arrays(grid, good_pi, good_eta)
    with pytest.raises(ValueError):
        DiscreteSystem.from_arrays(grid, np.full(4, 0.3), good_eta)  # mass 1.2
    bad = good_eta.copy()
    bad[0, 1] = 2.0
    with pytest.raises(ValueError):
        DiscreteSystem.from_arrays(grid, good_pi, bad)  # asymmetric
    bad2 = good_eta.copy()
    bad2[2, 2] = 1.0
    with pytest.raises(ValueError):
        DiscreteSystem.from_arrays(grid, good_pi, bad2)  # diagonal


# ---------------------------------------------------------------------------
# moment bound
# ---------------------------------------------------------------------------


def test_moment_bound_constant_large_margin():
    grid = build_grid(1, 8)
    sys = build_system(ConstantKernel(c=1.0), UniformMeasure(), grid)
    sup = second_moment(ConstantKernel(c=1.0), UniformMeasure(), 0.0)
    rep = verify_moment_bound(sys, sup)
    assert rep.passes
    assert rep.ratio < 1.0  # holds with room to spare, not just within slack


def test_moment_bound_fractional_stable_under_refinement():
    spec = FractionalKernel(s=1.0)
    sup = second_moment(spec, UniformMeasure(), 0.0)
    ms = []
    for n in (8, 16):
        sys = build_system(spec, UniformMeasure(), build_grid(1, n))
        rep = verify_moment_bound(sys, sup)
        assert rep.passes
        ms.append(rep.m_n)
    # uniform-in-n: refinement must not blow the discrete moment up
    assert ms[1] <= 4.0 * sup * 1.01


def test_refinement_consistency_at_fixed_far_pair():
    # eta_n at the pair (0, 1/2) approaches the pointwise kernel value
    spec = FractionalKernel(s=1.0)
    target = eval_kernel(spec, 0.0, 0.5)
    gaps = []
    for n in (4, 8, 16):
        grid = build_grid(1, n)
        eta = discretize_kernel(spec, UniformMeasure(), grid)
        j = 0
        k = n // 2
        gaps.append(abs(eta[j, k] - target))
    assert gaps[0] > gaps[1] > gaps[2]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    grid = build_grid(1, 8)
    meas = GibbsMeasure(potential=PotentialSpec(expr="cos(2*pi*x)"))
    sys = build_system(FractionalKernel(s=1.5), meas, grid, QuadratureConfig())
    path = tmp_path / "sys.json"
    save_system(sys, path)
    back = load_system(path)
    assert np.array_equal(back.pi, sys.pi)
    assert np.array_equal(back.eta, sys.eta)
    assert back.delta == sys.delta
    assert back.provenance == sys.provenance
    assert back.grid.level == 8 and back.grid.dim == 1


def test_load_rejects_unknown_schema(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "nlw-system/v0", "dim": 1, "level": 2}')
    with pytest.raises(ValueError, match="schema"):
        load_system(path)
