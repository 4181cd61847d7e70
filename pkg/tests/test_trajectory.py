import csv
import io

import numpy as np
import pytest

from lqkernel.kernel import LQKernel, RepresenterFunction
from lqkernel.linsys import propagate
from lqkernel.socp import LossPoint, ProblemSpec, assemble, solve
from lqkernel.tightening import ConstraintSpec
from lqkernel.trajectory import (audit, cost_report, dense_grid, margins, reconstruct, sample,
                                 trajectory_csv, write_text_atomic)

from conftest import double_integrator


def test_dense_grid_plain():
    g = dense_grid(2.0, 11, 3)
    assert len(g) == 31 and g[0] == 0.0 and g[-1] == 2.0
    assert np.allclose(np.diff(g), 2.0 / 30)


def test_dense_grid_doubles_jumps_and_clears_neighbours():
    g = dense_grid(1.0, 11, 1, jumps=[0.0, 0.31, 0.5, 1.0])
    assert np.sum(g == 0.31) == 2 and np.sum(g == 0.5) == 2
    # endpoints are never doubled
    assert np.sum(g == 0.0) == 1 and np.sum(g == 1.0) == 1
    # 0.3 sits within a quarter step of 0.31 and is dropped; 0.4 stays
    assert not np.any(np.isclose(g, 0.3)) and np.any(np.isclose(g, 0.4))
    assert np.all(np.diff(g) >= 0)


@pytest.fixture(scope="module")
def steering():
    sys_ = double_integrator()
    kernel = LQKernel(sys_)
    eye = np.eye(2)
    pts = [LossPoint(1.0, eye[0], value=1.0), LossPoint(1.0, eye[1], value=0.0)]
    spec = ProblemSpec(sys_, ConstraintSpec.empty(2), None, pts, x0=[0.0, 0.0])
    prog = assemble(spec, kernel, None)
    sol = solve(prog)
    return kernel, prog, sol, reconstruct(sol, prog, kernel, dense_factor=4)


def test_reconstruct_matches_closed_form(steering):
    _, _, _, tr = steering
    t = tr.times
    assert np.allclose(tr.states[:, 0], 3 * t ** 2 - 2 * t ** 3, atol=1e-7)
    assert np.allclose(tr.states[:, 1], 6 * t - 6 * t ** 2, atol=1e-7)
    assert np.allclose(tr.controls[:, 0], 6 - 12 * t, atol=1e-6)
    assert np.allclose(tr.xT, [1.0, 0.0], atol=1e-8)


def test_reconstruct_is_dynamically_consistent(steering):
    kernel, _, _, tr = steering
    x = propagate(kernel.system, tr.x0, tr.times, tr.controls, transition=kernel.transition)
    assert np.max(np.abs(x - tr.states)) <= 1e-10


def test_cost_report_agrees_with_gram(steering):
    _, _, sol, tr = steering
    rep = cost_report(tr, sol)
    assert rep["control_cost"] == pytest.approx(12.0, rel=1e-6)
    assert rep["x0_sq"] == pytest.approx(0.0, abs=1e-16)
    assert rep["relative_mismatch"] <= 1e-6 and not rep["mismatch_flag"]


def test_cost_report_flags_mismatch(steering):
    _, _, sol, tr = steering
    broken = type(tr)(tr.times, tr.states, 2 * tr.controls, tr.rkhs_norm, 4 * tr.control_l2_sq, tr.function)
    rep = cost_report(broken, sol)
    assert rep["mismatch_flag"] and rep["relative_mismatch"] == pytest.approx(3.0, rel=1e-5)


def test_cost_report_linear_terms(steering):
    _, _, sol, tr = steering
    pts = [LossPoint(0.5, [1.0, 0.0], "linear", weight=-2.0)]
    # x1(0.5) = 0.5
    assert cost_report(tr, sol, pts)["linear_cost"] == pytest.approx(-1.0, rel=1e-8)


def test_audit_finds_peak(steering):
    _, _, _, tr = steering
    # x1 <= 0.9 fails at the end; velocity <= 2 holds (peak 1.5 at t = 0.5)
    spec = ConstraintSpec([[1.0, 0.0], [0.0, 1.0]], [0.9, 2.0], ["pos", "vel"])
    rep = audit(tr, spec)
    pos, vel = rep.constraints
    assert pos.violated and pos.max_violation == pytest.approx(0.1, abs=1e-8)
    assert pos.argmax_time == pytest.approx(1.0)
    assert not vel.violated and vel.max_violation == pytest.approx(-0.5, abs=1e-6)
    assert vel.argmax_time == pytest.approx(0.5, abs=0.01)
    assert not rep.feasible and rep.max_violation == pos.max_violation


def test_audit_resamples_when_asked(steering):
    _, _, _, tr = steering
    spec = ConstraintSpec([[0.0, 1.0]], [1.5])
    fine = audit(tr, spec, dense_factor=40)
    assert len(fine.times) > len(tr.times)
    assert fine.constraints[0].max_violation == pytest.approx(0.0, abs=1e-6)


def test_atom_jump_appears_in_control(scalar_kernel):
    f = RepresenterFunction(scalar_kernel, [0.37], [[1.0]])
    tr = sample(f, dense_factor=1)
    k = np.flatnonzero(tr.times == 0.37)
    assert len(k) == 2
    assert tr.controls[k[0], 0] == 1.0 and tr.controls[k[1], 0] == 0.0


def test_csv_layout(steering, tmp_path):
    _, _, _, tr = steering
    spec = ConstraintSpec([[1.0, 0.0]], [0.9])
    text = trajectory_csv(tr, spec)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["t", "x_1", "x_2", "u_1", "margin_1"]
    assert len(rows) == len(tr.times) + 1
    assert float(rows[-1][4]) == pytest.approx(margins(tr, spec)[-1, 0])
    assert float(rows[5][1]) == tr.states[4, 0]  # 17 digits round-trip
    path = tmp_path / "solution.csv"
    write_text_atomic(path, text)
    assert path.read_text() == text
    assert [p.name for p in tmp_path.iterdir()] == ["solution.csv"]
