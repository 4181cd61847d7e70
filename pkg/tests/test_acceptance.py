"""Acceptance suite: one PASS/FAIL line per criterion, repeated in the terminal summary."""
import time

import numpy as np
import pytest

from lqkernel.config import parse_config
from lqkernel.kernel import LQKernel, RepresenterFunction, gramian, transversality_check
from lqkernel.linsys import LinearSystem, propagate
from lqkernel.pipeline import Runner
from lqkernel.socp import LINEAR, LossPoint, ProblemSpec, assemble, solve, terminal_adjoint
from lqkernel.tightening import V0, V_DELTA_FIN, V_DELTA_INF, ConstraintSpec, membership
from lqkernel.trajectory import SampledTrajectory, dense_grid, k_inner_quadrature, reconstruct, sample

from conftest import double_integrator, record, scalar_system

SEED = 7


def pendulum_runner(**options):
    doc = {"preset": "pendulum"}
    if options:
        doc["preset_options"] = options
    return Runner(parse_config(doc))


class Runs:
    """Pendulum solves shared by criteria 5 to 8 and 10.

    ``scale`` multiplies eta of every family; ``None`` keeps the computed values.
    """

    def __init__(self):
        self._runner = None
        self.results = {}

    @property
    def runner(self):
        if self._runner is None:
            self._runner = pendulum_runner()
        return self._runner

    def get(self, n_points, scale=None, runner=None):
        key = (n_points, scale)
        if key not in self.results:
            r = runner or self.runner
            self.results[key] = r.run(n_points=n_points, eta_scale=scale,
                                      eta_families=r.problem.constraints.labels)
        return self.results[key]


@pytest.fixture(scope="module")
def runs():
    return Runs()


# reconstructed trajectories from outside the pendulum runs, for criterion 10
EXTRA_DYNAMICS: dict = {}


def w_extremes(res):
    w = res.trajectory.states[:, 2]
    return float(np.max(np.abs(w)))


def test_criterion_1_gramian():
    t0 = time.perf_counter()
    G = gramian(LQKernel(double_integrator())).matrix
    elapsed = time.perf_counter() - t0
    err = float(np.max(np.abs(G - [[1 / 3, 1 / 2], [1 / 2, 1.0]])))
    ok = err <= 1e-6 and elapsed < 1.0
    record("criterion 1", ok, f"double-integrator Gramian max entry error {err:.2e} (<= 1e-6), {elapsed:.3f}s (< 1s)")
    assert ok


def random_signal(rng):
    """Random sum of sines and its exact antiderivative."""
    freq, amp, phase = rng.uniform(0.5, 6.0, 3), rng.normal(size=3), rng.uniform(0, 2 * np.pi, 3)
    u = lambda ts: np.sin(np.multiply.outer(ts, freq) + phase) @ amp  # noqa: E731
    U = lambda ts: -np.cos(np.multiply.outer(ts, freq) + phase) @ (amp / freq)  # noqa: E731
    return u, U


def test_criterion_2_reproducing_property():
    # x' = u on both kernels, so states come in closed form, independent of the propagator
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst, checks = 0.0, 0
    for q in (0.0, 1.0):
        kern = LQKernel(scalar_system(q=q))
        sys_ = kern.system
        for _ in range(10):
            u_fn, U = random_signal(rng)
            x0 = float(rng.normal())
            x_fn = lambda ts: x0 + U(ts) - U(0.0)  # noqa: E731
            for _ in range(10):
                t = float(rng.uniform(0, kern.T))
                p = rng.normal(size=1)
                ts = dense_grid(kern.T, sys_.n_grid, 1, jumps=[t])
                traj = SampledTrajectory(ts, x_fn(ts)[:, None], u_fn(ts)[:, None], np.nan, np.nan)
                sect = sample(RepresenterFunction(kern, [t], [p]), dense_factor=1)
                lhs = float(p[0] * x_fn(t))
                rhs = k_inner_quadrature(traj, sect, sys_)
                worst = max(worst, abs(lhs - rhs) / (1 + abs(lhs)))
                checks += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 30.0
    record("criterion 2", ok, f"reproducing property, {checks} checks on Q=0 and Q=1 kernels: worst relative "
                              f"error {worst:.2e} (<= 1e-4), {elapsed:.1f}s (< 30s)")
    assert ok


def test_criterion_3_psd_and_symmetry():
    rng = np.random.default_rng(SEED)
    pend = LQKernel(LinearSystem(A=[[0.0, 1.0, 0.0], [-10.0, 0.0, 1.0], [0.0, 0.0, 0.0]],
                                 B=[[0.0], [0.0], [1.0]]))
    general = LQKernel(scalar_system(q=1.0))
    min_eig, asym = np.inf, 0.0
    for kern in (pend, general):
        grid = kern.system.grid
        for _ in range(20):
            ts = np.sort(rng.choice(grid, size=int(rng.integers(2, 16)), replace=False))
            B = kern.block_matrix(ts, ts)
            n, N = len(ts), kern.N
            G = B.transpose(0, 2, 1, 3).reshape(n * N, n * N)
            min_eig = min(min_eig, float(np.linalg.eigvalsh(0.5 * (G + G.T)).min()))
            diff = B - B.transpose(1, 0, 3, 2)
            asym = max(asym, float(np.max(np.linalg.norm(diff, ord=2, axis=(2, 3)))))
    ok = min_eig >= -1e-8 and asym <= 1e-8
    record("criterion 3", ok, f"40 random grid subsets (pendulum and Q=1 kernels): min eigenvalue "
                              f"{min_eig:.2e} (>= -1e-8), max |K(s,t) - K(t,s)^T| {asym:.2e} (<= 1e-8)")
    assert ok


def test_criterion_4_transversality():
    rng = np.random.default_rng(SEED)
    sys_ = double_integrator()
    kern = LQKernel(sys_)
    eye = np.eye(2)
    worst = 0.0
    for k in range(5):
        b = rng.normal(size=2)
        pts = [LossPoint(1.0, eye[i], LINEAR, weight=-b[i]) for i in range(2)]
        prog = assemble(ProblemSpec(sys_, ConstraintSpec.empty(2), None, pts, x0=[0.0, 0.0]), kern, None)
        sol = solve(prog)
        assert sol.optimal
        p_T = terminal_adjoint(prog, sol.alpha, kern.T)
        worst = max(worst, transversality_check(kern, lambda x, b=b: -b, p_T))
        EXTRA_DYNAMICS[f"transversality {k}"] = (reconstruct(sol, prog, kern), kern)
    ok = worst <= 1e-6
    record("criterion 4", ok, f"transversality residual over 5 random b: max {worst:.2e} (<= 1e-6)")
    assert ok


def test_criterion_5_discretized_baseline(runs):
    t0 = time.perf_counter()
    runner = pendulum_runner()
    res = runs.get(200, 0.0, runner=runner)
    elapsed = time.perf_counter() - t0
    xdot_T = float(res.trajectory.xT[1])
    viol = {c.label: c.max_violation for c in res.feasibility.constraints}
    w_viol = max(viol["w_max"], viol["w_min"])
    ok = res.optimal and abs(xdot_T - 3.18) <= 0.15 and w_viol > 0 and elapsed < 60.0
    record("criterion 5", ok, f"eta = 0, N_P = 200: x'(T) = {xdot_T:.4f} (3.18 +- 0.15), |w| <= 10 violated by "
                              f"{w_viol:.4f} (> 0) on {len(res.feasibility.times)} samples, {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_6_guaranteed_feasibility(runs):
    t0 = time.perf_counter()
    runner = pendulum_runner()
    parts, ok = [], True
    for n in (50, 100, 200):
        res = runs.get(n, None, runner=runner)
        if not res.optimal:
            parts.append(f"N_P={n}: {res.solution.status}")
            ok = False
            continue
        worst = res.feasibility.max_violation
        w = w_extremes(res)
        ok &= worst <= 0 and w < 10.0
        parts.append(f"N_P={n}: max violation {worst:.3f}, max|w| {w:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300.0
    record("criterion 6", ok, "computed eta; " + "; ".join(parts) + f"; {elapsed:.1f}s (< 300s)")
    assert ok


def objective(res):
    return res.solution.objective if res.optimal else np.inf


def test_criterion_7_convergence(runs):
    ns = (50, 100, 200, 400)
    soc = [objective(runs.get(n)) for n in ns]
    relaxed = [objective(runs.get(n, 0.0)) for n in ns]
    steps = [b <= a + 1e-6 * abs(a) for a, b in zip(soc, soc[1:])]
    gaps = [s - r for s, r in zip(soc, relaxed)]
    shrink = [b < a for a, b in zip(gaps, gaps[1:])]
    ok = all(steps) and all(shrink) and np.isfinite(soc[-1])
    fmt = lambda v: "inf" if not np.isfinite(v) else f"{v:.6g}"  # noqa: E731
    record("criterion 7", ok, "objective over N_P 50/100/200/400: " + ", ".join(fmt(v) for v in soc)
           + "; gap to eta = 0: " + ", ".join(fmt(v) for v in gaps))
    assert ok


def boundary_function(kernel, spec, rng, target):
    """Random kernel expansion scaled so its worst constraint ratio is ``target``."""
    n_atoms = int(rng.integers(1, 7))
    times = np.sort(rng.uniform(0, kernel.T, n_atoms))
    coeffs = rng.normal(size=(n_atoms, kernel.N))
    f = RepresenterFunction(kernel, times, coeffs)
    ts = np.linspace(0, kernel.T, 2001)
    ratio = np.einsum("kpi,ki->kp", spec.C(ts), f(ts)) / spec.d(ts)[:, :, 0]
    return RepresenterFunction(kernel, times, coeffs * target / max(ratio.max(), 1e-12))


def test_criterion_8_nested_sets(runs):
    runner = runs.runner
    spec = runner.problem.constraints
    cases = []
    for key in [(200, 0.0), (50, None), (100, None), (200, None), (400, None),
                (50, 0.0), (100, 0.0), (400, 0.0)]:
        res = runs.get(*key)
        if res.trajectory is not None:
            cases.append((res.trajectory.function, key[0]))
    n_solver = len(cases)
    rng = np.random.default_rng(SEED)
    for k in range(50):
        n = (50, 100, 200)[k % 3]
        cases.append((boundary_function(runner.kernel, spec, rng, rng.uniform(0.3, 1.3)), n))
    counter, patterns = 0, set()
    for f, n in cases:
        tc = runner.tightened(runner.problem_for(n), n)
        inf_ = membership(f, spec, tc, V_DELTA_INF).member
        fin = membership(f, spec, tc, V_DELTA_FIN).member
        v0 = membership(f, spec, tc, V0).member
        counter += (inf_ and not fin) + (fin and not v0)
        patterns.add((inf_, fin, v0))
    ok = counter == 0
    record("criterion 8", ok, f"{n_solver} solver outputs + 50 random expansions, dense factor 10: "
                              f"{counter} counterexamples; membership patterns seen {sorted(patterns)}")
    assert ok


def test_criterion_9_steering():
    sys_ = double_integrator()
    kern = LQKernel(sys_)
    eye = np.eye(2)
    pts = [LossPoint(1.0, eye[0], value=1.0), LossPoint(1.0, eye[1], value=0.0)]
    prog = assemble(ProblemSpec(sys_, ConstraintSpec.empty(2), None, pts, x0=[0.0, 0.0]), kern, None)
    sol = solve(prog)
    EXTRA_DYNAMICS["steering"] = (reconstruct(sol, prog, kern), kern)
    ok = sol.optimal and abs(sol.z ** 2 - 12.0) <= 1e-4
    record("criterion 9", ok, f"steering to [1, 0]: z^2 = {sol.z ** 2:.10f} (12 +- 1e-4)")
    assert ok


def test_criterion_10_dynamics(runs):
    errors = {f"pendulum N_P={n} eta x {s}": r.dynamics_error
              for (n, s), r in runs.results.items() if r.trajectory is not None}
    if not errors:  # run in isolation
        errors["pendulum N_P=100"] = runs.get(100).dynamics_error
    for name, (tr, kern) in EXTRA_DYNAMICS.items():
        x = propagate(kern.system, tr.x0, tr.times, tr.controls, transition=kern.transition)
        errors[name] = float(np.max(np.abs(x - tr.states)))
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-5
    record("criterion 10", ok, f"{len(errors)} reconstructions, worst sup-norm gap {errors[worst]:.2e} "
                               f"({worst}) (<= 1e-5)")
    assert ok


def test_verbatim_control_weight_is_reported():
    """The printed weights of the example are inconsistent with its reported results; show it."""
    runner = pendulum_runner(lambda_u=1e4)
    labels = runner.problem.constraints.labels
    relaxed = runner.run(n_points=200, eta_scale=0.0, eta_families=labels)
    tight = runner.run(n_points=200, eta_families=labels)
    record("lambda_u = 1e4", None, f"eta = 0: x'(T) = {relaxed.trajectory.xT[1]:.4f}; "
                                   f"computed eta, N_P = 200: {tight.solution.status}")
    assert relaxed.optimal
