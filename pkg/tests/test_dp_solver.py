import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whittle_sched.dp_solver import (
    STRUCTURE_PROPERTIES,
    SubsidizedMdp,
    bellman_residual,
    check_submodularity,
    check_subsidy_profile,
    solve_grid,
    solve_rvi,
    verify_structure,
    write_solution_csv,
)
from whittle_sched.errors import ContractViolation, ConvergenceError
from whittle_sched.model import ChannelModel, EnergyFn, QueueSpec

from oracles import exp_energy, optimal_by_enumeration, quad_energy

PAPER_CHANNEL = ChannelModel((1.0, 2.0), ((0.7, 0.3), (0.3, 0.7)))


def solve(spec, lam, **kw):
    return solve_rvi(SubsidizedMdp(spec, lam), **kw)


@pytest.mark.parametrize("lam", [-3.0, -1.0, 0.0])
def test_one_state_nonpositive_subsidy(lam):
    sol = solve(QueueSpec(0, 1.0, 1.0), lam)
    assert sol.beta == pytest.approx(lam, abs=1e-12)
    assert sol.u[0, 0] == 0


@pytest.mark.parametrize("lam", [0.5, 7.0])
def test_one_state_positive_subsidy(lam):
    sol = solve(QueueSpec(0, 1.0, 1.0), lam)
    assert sol.beta == pytest.approx(0.0, abs=1e-12)
    assert (sol.u[0, 0], sol.z[0, 0]) == (1, 0)


CASES = [
    # M, C, rate, energy (package, oracle), mus, kernel
    (2, 1.0, 1.0, (EnergyFn(), exp_energy), (1.0,), ((1.0,),)),
    (2, 2.0, 0.7, (EnergyFn("quadratic"), quad_energy), (1.0,), ((1.0,),)),
    (2, 1.0, 1.0, (EnergyFn(), exp_energy), (1.0, 2.0), ((0.7, 0.3), (0.3, 0.7))),
    (3, 1.5, 1.2, (EnergyFn(), exp_energy), (1.0,), ((1.0,),)),
]


@pytest.mark.parametrize("case", CASES)
@pytest.mark.parametrize("lam", [-5.0, 0.0, 5.0])
def test_beta_matches_policy_enumeration(case, lam):
    M, C, rate, (energy, f), mus, Q = case
    spec = QueueSpec(M, C, rate, energy, ChannelModel(mus, Q))
    beta, optimal = optimal_by_enumeration(M, C, rate, f, mus, Q, lam)
    sol = solve(spec, lam)
    assert abs(sol.beta - beta) < 1e-8
    # some gain-optimal policy's evaluation also solves the optimality equation
    mdp = SubsidizedMdp(spec, lam)
    assert min(bellman_residual(mdp, h + b, b) for _, b, h in optimal) < 1e-9


def test_solution_invariants():
    sol = solve(QueueSpec(8, 3.0, 1.0, EnergyFn(), PAPER_CHANNEL), -4.0)
    assert sol.converged
    assert sol.values[0, 0] == pytest.approx(sol.beta)
    assert np.all(sol.z <= np.arange(9)[:, None])
    assert np.all(sol.z[sol.u == 0] == 0)
    assert bellman_residual(sol.mdp, sol.values, sol.beta) < 1e-8


def test_residual_detects_perturbation():
    sol = solve(QueueSpec(5, 1.0, 1.0, EnergyFn(), PAPER_CHANNEL), 0.0)
    V = sol.values.copy()
    V[3, 1] += 1.0
    assert bellman_residual(sol.mdp, V, sol.beta) > 0.1


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(-40, 40))
def test_initial_table_does_not_matter(seed, lam):
    spec = QueueSpec(6, 2.0, 1.0, EnergyFn(), PAPER_CHANNEL)
    a = solve(spec, lam)
    start = np.random.default_rng(seed).normal(scale=100.0, size=a.bias.shape)
    b = solve(spec, lam, initial=start)
    scale = max(1.0, np.abs(a.bias).max())
    assert np.abs(a.values - b.values).max() <= 2 * a.tolerance + 1e-9 * scale


def test_iteration_budget_raises():
    with pytest.raises(ConvergenceError) as exc:
        solve(QueueSpec(10, 1.0, 1.0, EnergyFn(), PAPER_CHANNEL), 0.0, max_iter=2)
    assert exc.value.iterations == 2


@pytest.mark.parametrize("C", [10.0, 20.0, 30.0])
@pytest.mark.parametrize("kind", ["exponential", "quadratic"])
def test_structure_at_zero_subsidy_full_size(C, kind):
    sol = solve(QueueSpec(50, C, 1.0, EnergyFn(kind), PAPER_CHANNEL), 0.0)
    rep = verify_structure(sol)
    assert set(rep.results) == set(STRUCTURE_PROPERTIES)
    assert rep.passed, [(r.name, r.violations[:3]) for r in rep.failures()]


def test_structure_trivial_on_single_state():
    assert verify_structure(solve(QueueSpec(0, 1.0, 1.0), 0.0)).passed


def test_planted_nonconvexity_caught():
    sol = solve(QueueSpec(6, 1.0, 1.0, EnergyFn(), PAPER_CHANNEL), 0.0)
    bias = sol.bias.copy()
    bias[3, 0] += 0.5 * (bias[4, 0] - bias[2, 0])  # bump (3, 0) above the chord
    bad = dataclasses.replace(sol, bias=bias)
    rep = verify_structure(bad)
    assert not rep.results["increasing_differences"].passed
    assert rep.results["monotone_in_x"].passed


def test_unconverged_solution_rejected():
    sol = solve(QueueSpec(3, 1.0, 1.0), 0.0)
    with pytest.raises(ContractViolation):
        verify_structure(dataclasses.replace(sol, residual=1.0))


def test_channel_check_skipped_without_dominance():
    ch = ChannelModel((1.0, 2.0), ((0.3, 0.7), (0.7, 0.3)))
    rep = verify_structure(solve(QueueSpec(4, 1.0, 1.0, EnergyFn(), ch), 0.0))
    assert "skipped" in rep.results["monotone_in_channel"].note


def test_submodularity_holds_away_from_buffer_edge():
    sol = solve(QueueSpec(50, 10.0, 1.0, EnergyFn(), PAPER_CHANNEL), 0.0)
    # the lumped overflow mass only bends Q near x = M
    assert all(x >= 45 for _, x, _, _ in check_submodularity(sol))


def test_average_cost_concave_nondecreasing_in_subsidy():
    spec = QueueSpec(5, 2.0, 1.0, EnergyFn(), PAPER_CHANNEL)
    grid = np.linspace(-60, 60, 25)
    betas = np.array([s.beta for s in solve_grid(spec, grid)])
    assert np.all(np.diff(betas) >= -1e-9)
    assert np.all(np.diff(betas, 2) <= 1e-9)


def test_subsidy_profile_rejects_unsorted_grid():
    spec = QueueSpec(2, 1.0, 1.0)
    sols = solve_grid(spec, [1.0, 0.0, 2.0])
    with pytest.raises(ContractViolation):
        check_subsidy_profile(sols)


def test_threshold_decreasing_in_subsidy_when_nonnegative():
    # active sets grow with the subsidy, so thresholds can only come down
    spec = QueueSpec(20, 5.0, 1.0, EnergyFn(), PAPER_CHANNEL)
    sols = solve_grid(spec, np.linspace(0.0, 500.0, 11))
    for m in range(2):
        thresholds = [int(np.argmax(s.u[:, m])) if s.u[:, m].any() else 21 for s in sols]
        assert thresholds == sorted(thresholds, reverse=True)


def test_solution_csv(tmp_path):
    sol = solve(QueueSpec(2, 1.0, 1.0, EnergyFn(), PAPER_CHANNEL), -1.0)
    path = tmp_path / "s.csv"
    write_solution_csv(sol, path, ["tool test"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# tool test"
    assert lines[1].startswith("# lambda=-1.0 beta=")
    assert lines[2] == "x,mu_index,V,u,z"
    assert len(lines) == 3 + 6
