import json

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import cholesky

from lqkernel.errors import UsageError
from lqkernel.ipm import INFEASIBLE
from lqkernel.kernel import LQKernel, transversality_check
from lqkernel.socp import (LINEAR, LossPoint, ProblemSpec, SOCProgram, assemble, check_solution,
                           export_conic, import_conic, solve, terminal_adjoint)
from lqkernel.tightening import ConstraintSpec, Covering, tighten

from conftest import double_integrator, scalar_system


def unconstrained(system, loss_points, x0=None, impose_initial=True):
    spec = ProblemSpec(system, ConstraintSpec.empty(system.N), None, loss_points,
                       x0=x0, impose_initial=impose_initial)
    kernel = LQKernel(system)
    return assemble(spec, kernel, None), kernel


def test_zero_state_gives_zero_solution():
    prog, _ = unconstrained(scalar_system(), [], x0=[0.0])
    assert prog.eq_a.shape == (1, 1) and len(prog.soc_b) == 0
    sol = solve(prog)
    assert sol.optimal
    assert np.allclose(sol.alpha, 0.0) and sol.z == pytest.approx(0.0, abs=1e-9)
    assert sol.objective == pytest.approx(0.0, abs=1e-12)


def test_initial_condition_rows_only():
    prog, _ = unconstrained(double_integrator(), [], x0=[1.0, -2.0])
    assert prog.eq_a.shape == (2, 2) and prog.soc_a.shape == (0, 2)
    sol = solve(prog)
    # free response only: the norm is |x0|^2; the objective adds lambda_cond |alpha|^2
    assert sol.z ** 2 == pytest.approx(5.0, rel=1e-12)
    lam_term = prog.lambda_cond * sol.alpha @ sol.alpha
    assert sol.objective == pytest.approx(5.0 + lam_term, rel=1e-12)


def test_steering_double_integrator():
    eye = np.eye(2)
    pts = [LossPoint(1.0, eye[0], value=1.0), LossPoint(1.0, eye[1], value=0.0)]
    prog, _ = unconstrained(double_integrator(), pts, x0=[0.0, 0.0])
    sol = solve(prog)
    assert sol.optimal
    assert sol.z ** 2 == pytest.approx(12.0, abs=1e-4)
    assert sol.objective == pytest.approx(12.0, abs=1e-4)


def test_steering_scales_with_control_weight():
    # min int r u^2 with x' = u, x(0) = 0, x(1) = 1: u = 1, cost r
    pts = [LossPoint(1.0, [1.0], value=1.0)]
    prog, _ = unconstrained(scalar_system(R=[[4.0]]), pts, x0=[0.0])
    assert solve(prog).objective == pytest.approx(4.0, rel=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_transversality_from_solver(seed):
    b = np.random.default_rng(seed).normal(size=2)
    eye = np.eye(2)
    pts = [LossPoint(1.0, eye[k], LINEAR, weight=-b[k]) for k in range(2)]
    prog, kernel = unconstrained(double_integrator(), pts, x0=[0.0, 0.0])
    sol = solve(prog)
    p_T = terminal_adjoint(prog, sol.alpha, kernel.T)
    assert np.allclose(p_T, b, atol=1e-8)
    assert transversality_check(kernel, lambda x: -b, p_T) <= 1e-6


def test_usage_errors():
    sys_ = scalar_system()
    with pytest.raises(UsageError):
        unconstrained(sys_, [LossPoint(1.5, [1.0], value=0.0)], x0=[0.0])
    with pytest.raises(UsageError):
        unconstrained(sys_, [], impose_initial=False)
    with pytest.raises(UsageError):
        unconstrained(sys_, [LossPoint(0.5, [0.0], value=1.0)], impose_initial=False)
    with pytest.raises(UsageError):
        LossPoint(0.5, [1.0], kind="quadratic")
    with pytest.raises(UsageError):
        unconstrained(sys_, [], x0=None)


def test_collinear_atoms_are_merged():
    pts = [LossPoint(0.5, [2.0], value=1.0), LossPoint(0.5, [-1.0], LINEAR, weight=1.0),
           LossPoint(0.5 + 1e-14, [1.0], LINEAR, weight=1.0)]
    prog, _ = unconstrained(scalar_system(), pts, x0=[0.0])
    assert list(prog.basis_times) == [0.0, 0.5]


def test_infeasible_program_reports_status():
    # x(t) <= -1 at t = 0 against x(0) = 0
    sys_ = scalar_system()
    spec = ProblemSpec(sys_, ConstraintSpec([[1.0]], [-1.0]), Covering([0.0], [0.0]), [], x0=[0.0])
    kernel = LQKernel(sys_)
    prog = assemble(spec, kernel, tighten(kernel, spec.constraints, spec.covering))
    sol = solve(prog)
    assert sol.status == INFEASIBLE and not sol.optimal
    assert np.all(np.isnan(sol.alpha))


# --- randomized programs against an external conic solver ---------------------


def random_program(seed, n, n_eq, n_soc):
    """Feasible random program: rows are built around a known interior point."""
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(n + 2, n))
    G = F.T @ F
    lam = 1e-10 * np.trace(G) / n
    L = cholesky(G + lam * np.eye(n), lower=True)
    a0 = rng.normal(size=n)
    z0 = np.sqrt(a0 @ (G + lam * np.eye(n)) @ a0)
    eq_a = rng.normal(size=(n_eq, n))
    soc_a = rng.normal(size=(n_soc, n))
    soc_eta = rng.uniform(0.0, 0.5, n_soc)
    soc_b = soc_eta * z0 + soc_a @ a0 + rng.uniform(0.05, 1.0, n_soc)
    return SOCProgram(np.zeros(n), np.ones((n, 1)), G, eq_a, eq_a @ a0, soc_eta, soc_a, soc_b,
                      rng.normal(size=n) * rng.uniform(0.1, 30.0), lam, L)


def reference_objective(prog):
    a, z = cp.Variable(prog.n_vars), cp.Variable()
    cons = [cp.norm(prog.L.T @ a) <= z]
    if len(prog.eq_b):
        cons.append(prog.eq_a @ a == prog.eq_b)
    if len(prog.soc_b):
        cons.append(prog.soc_eta * z + prog.soc_a @ a <= prog.soc_b)
    pr = cp.Problem(cp.Minimize(prog.linear @ a + cp.square(z)), cons)
    pr.solve(solver="CLARABEL")
    assert pr.status == cp.OPTIMAL
    return pr.value


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), n=st.integers(2, 12), n_eq=st.integers(0, 2),
       n_soc=st.integers(0, 15))
def test_matches_external_solver(seed, n, n_eq, n_soc):
    prog = random_program(seed, n, min(n_eq, n - 1), n_soc)
    sol = solve(prog)
    assert sol.optimal
    ref = reference_objective(prog)
    assert sol.objective == pytest.approx(ref, rel=1e-6, abs=1e-7)
    chk = check_solution(prog, sol, 1e-8)
    assert chk["soc_violation"] <= 1e-7 and chk["equality_residual"] <= 1e-7


# --- export ----------------------------------------------------------------------


def test_empty_program_export(tmp_path):
    n = 0
    prog = SOCProgram(np.zeros(n), np.zeros((n, 1)), np.zeros((n, n)), np.zeros((0, n)), np.zeros(0),
                      np.zeros(0), np.zeros((0, n)), np.zeros(0), np.zeros(n), 0.0, np.zeros((n, n)))
    export_conic(prog, tmp_path / "p.json")
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["n_vars"] == 0
    assert doc["objective"] == {"quadratic_factor_L": [], "linear": []}
    assert doc["equalities"] == [] and doc["soc_rows"] == []
    back = import_conic(tmp_path / "p.json")
    assert back.n_vars == 0


def test_export_round_trip(tmp_path):
    prog = random_program(7, 6, 1, 8)
    export_conic(prog, tmp_path / "p.json")
    back = import_conic(tmp_path / "p.json")
    # 17 significant digits make the reparse exact
    assert np.array_equal(back.L, prog.L) and np.array_equal(back.soc_a, prog.soc_a)
    assert np.array_equal(back.linear, prog.linear) and back.lambda_cond == prog.lambda_cond
    a, b = solve(prog), solve(back)
    assert b.objective == pytest.approx(a.objective, rel=1e-8)
    assert np.allclose(b.alpha, a.alpha, rtol=1e-6, atol=1e-8)


# --- pendulum program -----------------------------------------------------------


def test_pendulum_program_shape(pendulum):
    prog = pendulum.get(200).program
    assert len(prog.soc_b) == 600
    assert prog.n_vars <= 3 + 2 + 1 + 600
    assert np.max(np.abs(prog.G - prog.G.T)) <= 1e-10
    assert np.linalg.eigvalsh(prog.G).min() >= -1e-8 * np.trace(prog.G)


def test_pendulum_export_counts_rows(pendulum, tmp_path):
    runner = pendulum.runner
    problem = runner.problem_for(50)
    prog = assemble(problem.spec(), runner.kernel, runner.tightened(problem, 50))
    export_conic(prog, tmp_path / "p.json")
    doc = json.loads((tmp_path / "p.json").read_text())
    assert len(doc["soc_rows"]) == 150
    assert doc["n_vars"] == prog.n_vars == len(doc["objective"]["linear"])


@pytest.mark.parametrize("n_points", [100, 200])
def test_pendulum_solution_is_feasible(pendulum, n_points):
    res = pendulum.get(n_points)
    sol = res.solution
    assert sol.optimal and sol.polished
    chk = check_solution(res.program, sol, 1e-8)
    assert chk["soc_violation"] <= 1e-7 and chk["equality_residual"] <= 1e-7


def test_tightening_monotone_in_eta(pendulum):
    full, fifth, zero = (pendulum.get(200, s).solution.objective for s in (None, 0.2, 0.0))
    assert full >= fifth >= zero


def test_row_scaling_leaves_argmin(pendulum):
    prog = pendulum.get(100).program
    rows = np.array([lab[0] == 1 for lab in prog.soc_labels])
    k = np.where(rows, 3.7, 1.0)
    scaled = SOCProgram(prog.basis_times, prog.basis_dirs, prog.G, prog.eq_a, prog.eq_b,
                        prog.soc_eta * k, prog.soc_a * k[:, None], prog.soc_b * k, prog.linear,
                        prog.lambda_cond, prog.L, prog.soc_labels)
    a, b = pendulum.get(100).solution, solve(scaled)
    assert b.optimal
    assert np.linalg.norm(b.alpha - a.alpha) <= 1e-6 * np.linalg.norm(a.alpha)
