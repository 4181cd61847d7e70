"""Sampled state and control trajectories, cost breakdowns and feasibility audits."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .kernel import LQKernel, RepresenterFunction
from .linsys import TIME_TOL, integrate
from .socp import EQUALITY, LossPoint, SOCProgram, Solution
from .tightening import ConstraintSpec

DEFAULT_DENSE_FACTOR = 10
MISMATCH_TOL = 1e-4


def dense_grid(T: float, n_grid: int, dense_factor: int, jumps=()) -> np.ndarray:
    """Uniform grid ``dense_factor`` times finer than the master grid, with each
    interior jump time inserted twice (left and right limit).

    Uniform nodes closer than a quarter step to a jump are dropped so that
    Simpson panels stay well shaped.
    """
    n = (n_grid - 1) * max(int(dense_factor), 1) + 1
    base = np.linspace(0.0, T, n)
    h = T / (n - 1)
    jumps = np.unique(np.asarray(jumps, dtype=float))
    jumps = jumps[(jumps > TIME_TOL) & (jumps < T - TIME_TOL)]
    if len(jumps):
        k = np.searchsorted(jumps, base)
        near = np.full(len(base), np.inf)
        for kk in (k - 1, k):
            ok = (kk >= 0) & (kk < len(jumps))
            near[ok] = np.minimum(near[ok], np.abs(base[ok] - jumps[kk[ok]]))
        keep = near >= 0.25 * h
        keep[0] = keep[-1] = True
        base = base[keep]
    return np.sort(np.concatenate([base, jumps, jumps]), kind="stable")


@dataclass
class SampledTrajectory:
    times: np.ndarray
    states: np.ndarray  # (n, N)
    controls: np.ndarray  # (n, M)
    rkhs_norm: float
    control_l2_sq: float  # int u^T R u
    function: RepresenterFunction | None = field(default=None, repr=False)

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def xT(self) -> np.ndarray:
        return self.states[-1]


def _sides(times):
    """``'left'`` or ``'right'`` per node; the second copy of a repeated time is a right limit."""
    right = np.zeros(len(times), dtype=bool)
    right[1:] = np.diff(times) == 0
    return right


def sample(f: RepresenterFunction, dense_factor: int = DEFAULT_DENSE_FACTOR,
           rkhs_norm: float | None = None) -> SampledTrajectory:
    """Evaluate a kernel expansion and its generating control on a dense grid."""
    kernel = f.kernel
    sys_ = kernel.system
    jumps = f.times[np.any(f.coeffs != 0, axis=1)] if len(f.times) else []
    ts = dense_grid(kernel.T, sys_.n_grid, dense_factor, jumps)
    x = f(ts) if len(f.times) else np.zeros((len(ts), kernel.N))
    right = _sides(ts)
    u = np.empty((len(ts), sys_.M))
    u[~right] = f.control(ts[~right], side="left")
    if np.any(right):
        u[right] = f.control(ts[right], side="right")
    Ru = np.einsum("kij,kj->ki", sys_.R(ts), u)
    l2 = float(integrate(ts, np.einsum("ki,ki->k", u, Ru)))
    norm = f.norm() if rkhs_norm is None else float(rkhs_norm)
    return SampledTrajectory(ts, x, u, norm, l2, f)


def reconstruct(sol: Solution, prog: SOCProgram, kernel: LQKernel,
                dense_factor: int = DEFAULT_DENSE_FACTOR) -> SampledTrajectory:
    """Trajectory of a solved program; the norm comes from the Gram matrix."""
    alpha = np.nan_to_num(np.asarray(sol.alpha, dtype=float))
    f = prog.representer(kernel, alpha)
    norm = float(np.sqrt(max(alpha @ prog.G @ alpha, 0.0)))
    return sample(f, dense_factor, rkhs_norm=norm)


# ---------------------------------------------------------------------------
# audit


@dataclass
class ConstraintAudit:
    label: str
    max_violation: float  # max of c^T x - d; positive means violated
    argmax_time: float
    margins: np.ndarray  # d - c^T x on the trajectory grid

    @property
    def violated(self) -> bool:
        return self.max_violation > 0


@dataclass
class FeasibilityReport:
    constraints: list[ConstraintAudit]
    terminal_state: np.ndarray
    times: np.ndarray
    objective: dict | None = None

    @property
    def max_violation(self) -> float:
        return max((c.max_violation for c in self.constraints), default=-np.inf)

    @property
    def feasible(self) -> bool:
        return all(not c.violated for c in self.constraints)


def margins(traj: SampledTrajectory, spec: ConstraintSpec) -> np.ndarray:
    """``d_i(t) - c_i(t)^T x(t)`` at every trajectory time, shape ``(n, P)``."""
    if spec.P == 0:
        return np.zeros((len(traj.times), 0))
    C = spec.C(traj.times)
    d = spec.d(traj.times)[:, :, 0]
    return d - np.einsum("kpi,ki->kp", C, traj.states)


def audit(traj: SampledTrajectory, spec: ConstraintSpec, dense_factor: int | None = None,
          objective: dict | None = None) -> FeasibilityReport:
    """Worst violation of each affine constraint over the trajectory grid.

    With ``dense_factor`` set and the expansion available, the trajectory is
    resampled at that resolution first.
    """
    if dense_factor is not None and traj.function is not None:
        traj = sample(traj.function, dense_factor, rkhs_norm=traj.rkhs_norm)
    M = margins(traj, spec)
    out = []
    for i in range(spec.P):
        k = int(np.argmin(M[:, i]))
        out.append(ConstraintAudit(spec.labels[i], float(-M[k, i]), float(traj.times[k]), M[:, i]))
    return FeasibilityReport(out, traj.xT.copy(), traj.times, objective)


# ---------------------------------------------------------------------------
# costs


def cost_report(traj: SampledTrajectory, sol: Solution, loss_points: list[LossPoint] = ()) -> dict:
    """Objective terms by quadrature next to the solver's Gram-based values."""
    f = traj.function
    sys_ = f.kernel.system if f is not None else None
    ts = traj.times
    x0_sq = float(traj.x0 @ traj.x0)
    if sys_ is not None and not sys_.q_is_zero:
        Qx = np.einsum("kij,kj->ki", sys_.Q(ts), traj.states)
        state_sq = float(integrate(ts, np.einsum("ki,ki->k", traj.states, Qx)))
    else:
        state_sq = 0.0
    linear = 0.0
    for p in loss_points:
        if p.kind != EQUALITY:
            x = f(p.t) if f is not None else np.zeros_like(p.c)
            linear += p.weight * float(p.c @ x)
    norm_sq_quad = x0_sq + state_sq + traj.control_l2_sq
    z_sq = float(sol.z) ** 2 if np.isfinite(sol.z) else np.nan
    mismatch = abs(norm_sq_quad - z_sq) / max(1.0, abs(z_sq)) if np.isfinite(z_sq) else np.nan
    return {
        "x0_sq": x0_sq,
        "state_cost": state_sq,
        "control_cost": traj.control_l2_sq,
        "linear_cost": linear,
        "norm_sq_quadrature": norm_sq_quad,
        "norm_sq_gram": z_sq,
        "objective": float(sol.objective),
        "relative_mismatch": mismatch,
        "mismatch_flag": bool(mismatch > MISMATCH_TOL) if np.isfinite(mismatch) else False,
    }


def k_inner_quadrature(a: SampledTrajectory, b: SampledTrajectory, system) -> float:
    """``x(0)^T y(0) + int (x^T Q y + u^T R v)`` for trajectories on the same grid."""
    if a.times.shape != b.times.shape or np.any(a.times != b.times):
        raise ValueError("trajectories must share their time grid")
    ts = a.times
    val = float(a.states[0] @ b.states[0])
    Rv = np.einsum("kij,kj->ki", system.R(ts), b.controls)
    integrand = np.einsum("ki,ki->k", a.controls, Rv)
    if not system.q_is_zero:
        Qy = np.einsum("kij,kj->ki", system.Q(ts), b.states)
        integrand = integrand + np.einsum("ki,ki->k", a.states, Qy)
    return val + float(integrate(ts, integrand))


# ---------------------------------------------------------------------------
# export


def _fmt(v: float) -> str:
    return "%.17g" % v


def trajectory_csv(traj: SampledTrajectory, spec: ConstraintSpec | None = None) -> str:
    N, M = traj.states.shape[1], traj.controls.shape[1]
    marg = margins(traj, spec) if spec is not None else np.zeros((len(traj.times), 0))
    header = (["t"] + [f"x_{i + 1}" for i in range(N)] + [f"u_{j + 1}" for j in range(M)]
              + [f"margin_{p + 1}" for p in range(marg.shape[1])])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for k in range(len(traj.times)):
        row = [traj.times[k], *traj.states[k], *traj.controls[k], *marg[k]]
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_text_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
