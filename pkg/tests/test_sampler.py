"""Tests for the endpoint sampler and its marginal comparison."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import norm

from nlw.discretize import DiscreteSystem
from nlw.flow import IntegratorConfig, solve
from nlw.functionals import DensityState
from nlw.sampler import MarginalReport, SampleResult, SamplerConfig, compare_marginals, simulate
from nlw.torus import build_grid


def make_system(n, pi=None, eta=None):
    grid = build_grid(1, n)
    if pi is None:
        pi = np.full(n, 1.0 / n)
    if eta is None:
        eta = np.ones((n, n))
        np.fill_diagonal(eta, 0.0)
    return DiscreteSystem.from_arrays(grid, pi, eta)


def skewed_two_state():
    pi = np.array([0.8, 0.2])
    eta = np.array([[0.0, 1.0], [1.0, 0.0]])
    return make_system(2, pi=pi, eta=eta)


def solver_marginal(sys, u0, horizon):
    traj = solve(sys, u0, IntegratorConfig(horizon=horizon), np.array([0.0, horizon]))
    return traj.u[-1] * sys.pi


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------


def test_same_seed_reproduces_counts_exactly():
    sys = skewed_two_state()
    u0 = DensityState.uniform(sys)
    cfg = SamplerConfig(n_paths=4000, horizon=1.0, seed=42)
    a = simulate(sys, u0, cfg)
    b = simulate(sys, u0, cfg)
    assert np.array_equal(a.counts, b.counts)
    assert a.n_jumps == b.n_jumps


def test_different_seeds_differ():
    sys = skewed_two_state()
    u0 = DensityState.uniform(sys)
    a = simulate(sys, u0, SamplerConfig(n_paths=4000, horizon=1.0, seed=1))
    b = simulate(sys, u0, SamplerConfig(n_paths=4000, horizon=1.0, seed=2))
    assert not np.array_equal(a.counts, b.counts)


# ---------------------------------------------------------------------------
# agreement with the flow
# ---------------------------------------------------------------------------


def test_stationary_start_stays_stationary():
    sys = make_system(3)
    u0 = DensityState.uniform(sys)
    res = simulate(sys, u0, SamplerConfig(n_paths=20_000, horizon=1.0, seed=5))
    rep = compare_marginals(res, sys.pi)
    assert rep.passes
    assert rep.tv_distance < 0.02


def test_marginals_match_solver_two_state():
    sys = skewed_two_state()
    u0 = DensityState(sys, np.array([0.25, 4.0]))  # masses (0.2, 0.8)
    expected = solver_marginal(sys, u0, 1.0)
    res = simulate(sys, u0, SamplerConfig(n_paths=20_000, horizon=1.0, seed=9))
    rep = compare_marginals(res, expected)
    assert rep.passes
    assert rep.max_abs_z <= rep.threshold


def test_marginals_match_solver_three_state():
    rng = np.random.default_rng(17)
    mat = rng.uniform(0.2, 1.5, size=(3, 3))
    eta = 0.5 * (mat + mat.T)
    np.fill_diagonal(eta, 0.0)
    sys = make_system(3, eta=eta)
    u0 = DensityState.point_mass(sys, 1)
    expected = solver_marginal(sys, u0, 0.7)
    res = simulate(sys, u0, SamplerConfig(n_paths=20_000, horizon=0.7, seed=13))
    rep = compare_marginals(res, expected)
    assert rep.passes


def test_source_rate_convention_detectably_fails():
    # with pi = (0.8, 0.2) the source-weighted rates drive the chain to the
    # wrong stationary law, and 20k paths are ample power to see it
    sys = skewed_two_state()
    u0 = DensityState(sys, np.array([0.25, 4.0]))
    expected = solver_marginal(sys, u0, 1.0)
    res = simulate(
        sys, u0, SamplerConfig(n_paths=20_000, horizon=1.0, seed=9, rate_convention="source")
    )
    rep = compare_marginals(res, expected)
    assert not rep.passes
    assert rep.max_abs_z > 10 * rep.threshold


# ---------------------------------------------------------------------------
# degenerate dynamics
# ---------------------------------------------------------------------------


def test_zero_kernel_never_jumps():
    sys = make_system(3, eta=np.zeros((3, 3)))
    u0 = DensityState.point_mass(sys, 2)
    res = simulate(sys, u0, SamplerConfig(n_paths=500, horizon=5.0, seed=3))
    assert res.n_jumps == 0
    assert res.counts[2] == 500 and res.counts.sum() == 500


def test_zero_horizon_returns_initial_law():
    sys = skewed_two_state()
    u0 = DensityState.point_mass(sys, 1)
    res = simulate(sys, u0, SamplerConfig(n_paths=300, horizon=0.0, seed=3))
    assert res.n_jumps == 0
    assert res.counts[1] == 300


def test_jumps_do_happen_on_connected_systems():
    sys = make_system(4)
    res = simulate(sys, DensityState.uniform(sys), SamplerConfig(n_paths=1000, horizon=2.0, seed=0))
    assert res.n_jumps > 0


# ---------------------------------------------------------------------------
# histogram output
# ---------------------------------------------------------------------------


def test_histogram_csv_format(tmp_path):
    sys = make_system(3)
    res = simulate(sys, DensityState.uniform(sys), SamplerConfig(n_paths=1000, horizon=0.5, seed=8))
    text = res.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "node_index,count,frequency,stderr"
    assert len(lines) == 4
    parsed = np.genfromtxt(text.splitlines(), delimiter=",", names=True)
    assert np.array_equal(parsed["node_index"], np.arange(3))
    assert np.array_equal(parsed["count"], res.counts)
    assert np.allclose(parsed["frequency"], res.frequencies, rtol=0, atol=0)
    out = tmp_path / "hist.csv"
    res.to_csv(out)
    assert out.read_text() == text


def test_sample_result_accessors():
    cfg = SamplerConfig(n_paths=10, horizon=1.0, seed=0)
    res = SampleResult(counts=np.array([6, 4]), config=cfg, n_jumps=7)
    assert res.n_paths == 10
    assert res.frequencies == pytest.approx([0.6, 0.4])
    assert res.stderr == pytest.approx(np.sqrt(np.array([0.24, 0.24]) / 10))


# ---------------------------------------------------------------------------
# marginal comparison statistics
# ---------------------------------------------------------------------------


def test_threshold_is_bonferroni_widened_three_sigma():
    cfg = SamplerConfig(n_paths=100, horizon=1.0, seed=0)
    res = SampleResult(counts=np.array([50, 50]), config=cfg, n_jumps=0)
    rep = compare_marginals(res, np.array([0.5, 0.5]))
    alpha3 = 2 * (1 - norm.cdf(3.0))
    assert rep.threshold == pytest.approx(norm.ppf(1 - alpha3 / 4), rel=1e-12)
    # more nodes -> wider threshold
    res50 = SampleResult(counts=np.full(50, 2), config=cfg, n_jumps=0)
    rep50 = compare_marginals(res50, np.full(50, 0.02))
    assert rep50.threshold > rep.threshold


def test_degenerate_expected_probabilities():
    cfg = SamplerConfig(n_paths=100, horizon=1.0, seed=0)
    exact = SampleResult(counts=np.array([100, 0]), config=cfg, n_jumps=0)
    rep = compare_marginals(exact, np.array([1.0, 0.0]))
    assert rep.passes and rep.max_abs_z == 0.0
    off = SampleResult(counts=np.array([99, 1]), config=cfg, n_jumps=0)
    rep = compare_marginals(off, np.array([1.0, 0.0]))
    assert not rep.passes and rep.max_abs_z == np.inf


def test_compare_marginals_validation():
    cfg = SamplerConfig(n_paths=10, horizon=1.0, seed=0)
    res = SampleResult(counts=np.array([5, 5]), config=cfg, n_jumps=0)
    with pytest.raises(ValueError, match="shape"):
        compare_marginals(res, np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError, match="distribution"):
        compare_marginals(res, np.array([0.9, 0.3]))


def test_sampler_config_validation():
    with pytest.raises(ValueError, match="rate_convention"):
        SamplerConfig(rate_convention="both")
    with pytest.raises(ValueError, match="one path"):
        SamplerConfig(n_paths=0)
    with pytest.raises(ValueError, match="horizon"):
        SamplerConfig(horizon=-1.0)


def test_marginal_report_is_frozen():
    cfg = SamplerConfig(n_paths=100, horizon=1.0, seed=0)
    res = SampleResult(counts=np.array([50, 50]), config=cfg, n_jumps=0)
    rep = compare_marginals(res, np.array([0.5, 0.5]))
    assert isinstance(rep, MarginalReport)
    with pytest.raises(ValueError):
        rep.z_scores[0] = 9.0
