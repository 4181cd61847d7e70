"""End-to-end solve: config -> kernel -> tightening -> SOCP -> trajectory -> audit."""
from __future__ import annotations

import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, Problem, RunConfig, build_problem
from .errors import DomainError, LQKernelError, UsageError
from .kernel import LQKernel
from .linsys import propagate
from .socp import SOCProgram, Solution, assemble, solve
from .tightening import TightenedConstraints, tighten
from .trajectory import FeasibilityReport, SampledTrajectory, audit, cost_report, reconstruct

THREADS_ENV = "LQKERNEL_THREADS"
GRID, ETA_SCALE = "grid", "eta-scale"


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


@dataclass
class RunResult:
    problem: Problem
    program: SOCProgram
    solution: Solution
    tightened: TightenedConstraints | None
    trajectory: SampledTrajectory | None = None
    feasibility: FeasibilityReport | None = None
    costs: dict | None = None
    dynamics_error: float = float("nan")
    timings: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.solution.optimal


class Runner:
    """Holds one kernel per config and caches tightening per covering size."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.problem = build_problem(cfg)
        t0 = time.perf_counter()
        self.kernel = LQKernel(self.problem.system)
        self.kernel_time = time.perf_counter() - t0
        self._tightened: dict = {}
        self._lock = threading.Lock()

    def problem_for(self, n_points: int | None) -> Problem:
        return self.problem if n_points is None else build_problem(self.cfg, n_points)

    def tightened(self, problem: Problem, n_points: int | None = None) -> TightenedConstraints | None:
        if problem.constraints.P == 0:
            return None
        key = n_points
        with self._lock:
            hit = self._tightened.get(key)
        if hit is None:
            opts = self.cfg.eta
            hit = tighten(self.kernel, problem.constraints, problem.covering, opts.n_samples, opts.safety)
            with self._lock:
                self._tightened[key] = hit
        return hit

    def _eta_tables(self, labels, family_scale: float | None, families=None):
        opts = self.cfg.eta
        scales = [opts.scale.get(lab, 1.0) for lab in labels]
        if family_scale is not None:
            chosen = families or opts.study_families or labels
            scales = [s * family_scale if lab in chosen else s for s, lab in zip(scales, labels)]
        overrides = [opts.override.get(lab) for lab in labels]
        return scales, overrides

    def run(self, n_points: int | None = None, eta_scale: float | None = None,
            dense_factor: int | None = None, tol: float | None = None,
            max_iter: int | None = None, eta_families: list[str] | None = None) -> RunResult:
        """Solve once; ``eta_scale`` multiplies eta of ``eta_families``
        (default: the config's study families, else every family)."""
        cfg = self.cfg
        timings = {"kernel": self.kernel_time}
        problem = self.problem_for(n_points)
        t0 = time.perf_counter()
        tc = self.tightened(problem, n_points)
        if tc is not None:
            scales, overrides = self._eta_tables(problem.constraints.labels, eta_scale, eta_families)
            tc = tc.with_eta(scales, overrides)
        timings["tighten"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        try:
            prog = assemble(problem.spec(cfg.solver.lambda_cond, cfg.impose_initial), self.kernel, tc)
        except (UsageError, DomainError) as exc:
            raise ConfigError(str(exc)) from None
        timings["assemble"] = time.perf_counter() - t0
        sol = solve(prog, tol or cfg.solver.tol, max_iter or cfg.solver.max_iter)
        timings["solve"] = sol.wall_time
        result = RunResult(problem, prog, sol, tc, timings=timings)
        if np.all(np.isfinite(sol.alpha)) and sol.status != "Infeasible":
            t0 = time.perf_counter()
            df = dense_factor or cfg.dense_factor
            traj = reconstruct(sol, prog, self.kernel, df)
            costs = cost_report(traj, sol, problem.spec(impose_initial=cfg.impose_initial).all_loss_points())
            result.trajectory = traj
            result.costs = costs
            result.feasibility = audit(traj, problem.constraints, objective=costs)
            xp = propagate(problem.system, traj.x0, traj.times, traj.controls,
                           transition=self.kernel.transition)
            result.dynamics_error = float(np.max(np.abs(xp - traj.states)))
            timings["reconstruct"] = time.perf_counter() - t0
        return result


# ---------------------------------------------------------------------------
# reports


def _f(v):
    v = float(v)
    return v if np.isfinite(v) else None


def run_report(res: RunResult) -> dict:
    sol, prog, prob = res.solution, res.program, res.problem
    names = prob.state_names
    out = {
        "status": sol.status,
        "objective": _f(sol.objective),
        "z": _f(sol.z),
        "solver": {
            "iterations": sol.iterations,
            "primal_residual": _f(sol.primal_residual),
            "dual_residual": _f(sol.dual_residual),
            "gap": _f(sol.gap),
            "certificate_residual": _f(sol.certificate_residual),
            "wall_time": sol.wall_time,
        },
        "program": {
            "n_vars": prog.n_vars,
            "n_equalities": int(len(prog.eq_b)),
            "n_soc_rows": int(len(prog.soc_b)),
            "lambda_cond": prog.lambda_cond,
        },
        "timings": res.timings,
    }
    if res.trajectory is not None:
        tr = res.trajectory
        out["objective_breakdown"] = {k: (_f(v) if not isinstance(v, bool) else v)
                                      for k, v in res.costs.items()}
        out["terminal_state"] = dict(zip(names, map(float, tr.xT)))
        out["state_extremes"] = {
            n: {"min": float(tr.states[:, i].min()), "max": float(tr.states[:, i].max())}
            for i, n in enumerate(names)
        }
        out["dynamics_error"] = res.dynamics_error
        rep = res.feasibility
        out["feasibility"] = {
            "feasible": rep.feasible,
            "n_samples": int(len(rep.times)),
            "constraints": [
                {"label": c.label, "max_violation": c.max_violation, "argmax_time": c.argmax_time,
                 "violated": c.violated}
                for c in rep.constraints
            ],
        }
    return out


def study_header(problem: Problem) -> list[str]:
    names = problem.state_names
    return (["value", "status", "objective", "z"] + [f"xT_{n}" for n in names]
            + [f"max_abs_{n}" for n in names] + ["max_violation", "n_vars", "n_soc_rows", "iterations", "error"])


def study_row(value, res: RunResult | None, problem: Problem, error: str = "") -> list:
    n = len(problem.state_names)
    if res is None:
        return [value, "Error", np.nan, np.nan] + [np.nan] * (2 * n) + [np.nan, 0, 0, 0, error]
    sol = res.solution
    if res.trajectory is not None:
        xT = list(res.trajectory.xT)
        mx = list(np.abs(res.trajectory.states).max(axis=0))
        viol = res.feasibility.max_violation
    else:
        xT, mx, viol = [np.nan] * n, [np.nan] * n, np.nan
    obj = sol.objective if sol.optimal else np.nan
    return ([value, sol.status, obj, sol.z if sol.optimal else np.nan] + xT + mx
            + [viol, res.program.n_vars, len(res.program.soc_b), sol.iterations, error])


def study(runner: Runner, axis: str, values, workers: int = 1):
    """One solve per value, results in input order; failures become error rows."""
    if axis not in (GRID, ETA_SCALE):
        raise ConfigError(f"unknown study axis {axis!r}")
    values = list(values)
    if axis == GRID:
        if any(v != int(v) or v < 1 for v in values):
            raise ConfigError("grid values must be positive integers")
        if runner.cfg.covering is None:
            raise ConfigError("a grid study needs a covering")
        values = [int(v) for v in values]
    elif any(v < 0 for v in values):
        raise ConfigError("eta-scale values must be non-negative")

    def one(v):
        t0 = time.perf_counter()
        try:
            res = runner.run(n_points=v) if axis == GRID else runner.run(eta_scale=v)
            row = study_row(v, res, runner.problem)
        except LQKernelError as exc:
            row = study_row(v, None, runner.problem, f"{type(exc).__name__}: {exc}")
        return row, time.perf_counter() - t0

    if workers > 1 and len(values) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, values))
    else:
        out = [one(v) for v in values]
    return [r for r, _ in out], [t for _, t in out]
