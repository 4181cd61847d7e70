"""Finite-dimensional second-order cone program over representer coefficients.

The optimal trajectory is a finite kernel expansion ``x = sum_b K(., t_b) c_b a_b``
over a basis of (time, direction) atoms taken from the loss points and the
covering centres. In the coefficients ``a`` the problem reads

    minimize    l^T a + z^2
    subject to  E a = e                      (equality loss points)
                eta_r z + g_r^T a <= b_r     (tightened state constraints)
                |L^T a| <= z,                L L^T = G + lambda_cond I,

with ``G`` the Gram matrix of the basis. It is solved in the whitened
variable ``beta = L^T a``, where every evaluation row becomes a row of
``L`` and stays well scaled.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, qr, solve_triangular

from .errors import NumericalError, UsageError
from .ipm import INFEASIBLE, MAX_ITER, OPTIMAL, Cones, solve_cone_program
from .kernel import LQKernel, RepresenterFunction
from .linsys import TIME_TOL, LinearSystem, check_times
from .tightening import ConstraintSpec, Covering, TightenedConstraints

EQUALITY = "equality"
LINEAR = "linear"
ROW_CHUNK = 128


@dataclass
class LossPoint:
    """A pointwise term on ``c^T x(t)``: fixed value or linear cost ``weight * c^T x(t)``."""

    t: float
    c: np.ndarray
    kind: str = EQUALITY
    value: float = 0.0
    weight: float = 0.0

    def __post_init__(self):
        self.t = float(self.t)
        self.c = np.asarray(self.c, dtype=float).ravel()
        if self.kind not in (EQUALITY, LINEAR):
            raise UsageError(f"unknown loss point kind {self.kind!r}")


@dataclass
class ProblemSpec:
    system: LinearSystem
    constraints: ConstraintSpec
    covering: Covering | list | None = None
    loss_points: list[LossPoint] = field(default_factory=list)
    x0: np.ndarray | None = None
    lambda_cond: float | None = None
    impose_initial: bool = True

    def all_loss_points(self) -> list[LossPoint]:
        pts = []
        if self.impose_initial:
            if self.x0 is None:
                raise UsageError("x0 is required when the initial condition is imposed")
            x0 = np.asarray(self.x0, dtype=float).ravel()
            if len(x0) != self.system.N:
                raise UsageError(f"x0 must have length {self.system.N}")
            eye = np.eye(self.system.N)
            pts += [LossPoint(0.0, eye[k], EQUALITY, value=x0[k]) for k in range(len(x0))]
        return pts + list(self.loss_points)


@dataclass
class SOCProgram:
    basis_times: np.ndarray
    basis_dirs: np.ndarray  # (n, N)
    G: np.ndarray
    eq_a: np.ndarray  # (n_eq, n)
    eq_b: np.ndarray
    soc_eta: np.ndarray
    soc_a: np.ndarray  # (n_soc, n)
    soc_b: np.ndarray
    linear: np.ndarray
    lambda_cond: float
    L: np.ndarray  # lower Cholesky factor of G + lambda_cond I
    soc_labels: list = field(default_factory=list)  # (i, m) per SOC row

    @property
    def n_vars(self) -> int:
        return len(self.linear)

    def representer(self, kernel: LQKernel, alpha) -> RepresenterFunction:
        alpha = np.asarray(alpha, dtype=float)
        return RepresenterFunction(kernel, self.basis_times, self.basis_dirs * alpha[:, None])


@dataclass
class Solution:
    alpha: np.ndarray
    z: float  # RKHS norm sqrt(a^T G a)
    z_epigraph: float  # solver value of the norm bound, >= z
    objective: float
    status: str
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    wall_time: float
    certificate_residual: float = np.nan
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


# ---------------------------------------------------------------------------
# assembly


def _dedupe(times, dirs):
    """Merge atoms with equal time and collinear direction (first one wins)."""
    dirs = np.asarray(dirs, dtype=float)
    keep_t, keep_c = [], []
    for t, c in zip(times, dirs):
        nc = np.linalg.norm(c)
        if nc == 0:
            continue
        u = c / nc
        dup = False
        for t2, c2 in zip(keep_t, keep_c):
            if abs(t - t2) <= TIME_TOL:
                v = c2 / np.linalg.norm(c2)
                if abs(abs(u @ v) - 1.0) <= 1e-12:
                    dup = True
                    break
        if not dup:
            keep_t.append(t)
            keep_c.append(c)
    return np.array(keep_t, dtype=float), np.array(keep_c, dtype=float).reshape(len(keep_t), dirs.shape[1])


def _dedupe_fast(times, dirs):
    # group by time first so the pairwise collinearity test stays local
    order = np.argsort(times, kind="stable")
    times, dirs = times[order], dirs[order]
    out_t, out_c = [], []
    start = 0
    while start < len(times):
        stop = start + 1
        while stop < len(times) and times[stop] - times[start] <= TIME_TOL:
            stop += 1
        t, c = _dedupe(times[start:stop], dirs[start:stop])
        out_t.append(t)
        out_c.append(c)
        start = stop
    if not out_t:
        return np.zeros(0), np.zeros((0, dirs.shape[1]))
    return np.concatenate(out_t), np.vstack(out_c)


def evaluation_rows(kernel: LQKernel, row_times, row_dirs, basis_times, basis_dirs) -> np.ndarray:
    """``r_i^T K(s_i, t_b) c_b`` for every row ``i`` and basis atom ``b``."""
    row_times = np.asarray(row_times, dtype=float)
    out = np.empty((len(row_times), len(basis_times)))
    for lo in range(0, len(row_times), ROW_CHUNK):
        hi = min(lo + ROW_CHUNK, len(row_times))
        blk = kernel.block_matrix(row_times[lo:hi], basis_times)
        out[lo:hi] = np.einsum("ri,rbij,bj->rb", row_dirs[lo:hi], blk, basis_dirs)
    return out


def default_lambda_cond(G: np.ndarray) -> float:
    n = len(G)
    return 1e-10 * float(np.trace(G)) / n if n else 0.0


def _factor(G, lam):
    """Cholesky of ``G + lam I``, raising ``lam`` tenfold until it succeeds."""
    n = len(G)
    scale = max(float(np.trace(G)) / max(n, 1), 1e-300)
    lam = max(lam, 0.0)
    for _ in range(12):
        try:
            return cholesky(G + lam * np.eye(n), lower=True), lam
        except np.linalg.LinAlgError:
            lam = max(lam * 10.0, 1e-14 * scale)
    raise NumericalError("Gram matrix could not be regularized to positive definite")


def assemble(spec: ProblemSpec, kernel: LQKernel, tightened: TightenedConstraints | None) -> SOCProgram:
    T = kernel.T
    N = kernel.N
    pts = spec.all_loss_points()
    for p in pts:
        if not (-TIME_TOL <= p.t <= T + TIME_TOL):
            raise UsageError(f"loss point time {p.t} outside [0, {T}]")
        if len(p.c) != N:
            raise UsageError(f"loss point direction must have length {N}")
    rows = list(tightened.rows()) if tightened is not None else []

    times = [p.t for p in pts] + [r[2] for r in rows]
    dirs = [p.c for p in pts] + [r[6] for r in rows]
    if not times:
        raise UsageError("the program has no basis atoms")
    times = check_times(np.asarray(times, dtype=float), T)
    bt, bc = _dedupe_fast(times, np.asarray(dirs, dtype=float).reshape(len(times), N))
    if len(bt) == 0:
        raise UsageError("all basis directions are zero")

    G = evaluation_rows(kernel, bt, bc, bt, bc)
    G = 0.5 * (G + G.T)

    eq = [p for p in pts if p.kind == EQUALITY]
    lin = [p for p in pts if p.kind == LINEAR]
    eq_a = evaluation_rows(kernel, [p.t for p in eq], np.array([p.c for p in eq]).reshape(-1, N), bt, bc)
    eq_b = np.array([p.value for p in eq], dtype=float)
    linear = np.zeros(len(bt))
    if lin:
        la = evaluation_rows(kernel, [p.t for p in lin], np.array([p.c for p in lin]), bt, bc)
        linear = np.array([p.weight for p in lin]) @ la

    if rows:
        soc_a = evaluation_rows(kernel, [r[2] for r in rows], np.array([r[6] for r in rows]), bt, bc)
        soc_eta = np.array([r[4] for r in rows], dtype=float)
        soc_b = np.array([r[5] for r in rows], dtype=float)
    else:
        soc_a, soc_eta, soc_b = np.zeros((0, len(bt))), np.zeros(0), np.zeros(0)

    lam = default_lambda_cond(G) if spec.lambda_cond is None else float(spec.lambda_cond)
    L, lam = _factor(G, lam)
    return SOCProgram(bt, bc, G, eq_a, eq_b, soc_eta, soc_a, soc_b, linear, lam, L,
                      [(r[0], r[1]) for r in rows])


# ---------------------------------------------------------------------------
# solve


def _independent_rows(A, b, tol=1e-10):
    """Drop dependent equality rows; returns ``None`` if they are inconsistent."""
    if len(A) == 0:
        return A, b
    _, R, piv = qr(A.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * max(d[0], 1e-300)))
    keep = np.sort(piv[:rank])
    A2, b2 = A[keep], b[keep]
    # consistency: residual of the dropped rows against the kept ones
    if rank < len(A):
        x = np.linalg.lstsq(A2, b2, rcond=None)[0]
        res = np.abs(A @ x - b)
        if np.max(res) > 1e-8 * max(1.0, np.max(np.abs(b))):
            return None
    return A2, b2


def solve(prog: SOCProgram, tol: float = 1e-8, max_iter: int = 200) -> Solution:
    start = time.perf_counter()
    n = prog.n_vars
    L = prog.L
    whiten = lambda M: solve_triangular(L, M.T, lower=True).T if len(M) else M.reshape(0, n)

    cb = solve_triangular(L, prog.linear, lower=True)
    Ab = whiten(prog.eq_a)
    reduced = _independent_rows(Ab, prog.eq_b)
    if reduced is None:
        return _failed(INFEASIBLE, n, start)
    Ab, beq = reduced
    S = _norm_scale(cb, Ab, beq)

    n_soc = len(prog.soc_b)
    A_soc = whiten(prog.soc_a)
    G_lp = np.hstack([A_soc, prog.soc_eta[:, None], np.zeros((n_soc, 1))])
    # (z, beta) in the second-order cone
    G_norm = np.zeros((n + 1, n + 2))
    G_norm[0, n] = -1.0
    G_norm[1:, :n] = -np.eye(n)
    # (1 + w, w - 1, 2 z) in the second-order cone, i.e. z^2 <= w
    G_sq = np.zeros((3, n + 2))
    G_sq[0, n + 1] = -1.0
    G_sq[1, n + 1] = -1.0
    G_sq[2, n] = -2.0
    h_sq = np.array([1.0, -1.0, 0.0])
    Gc = np.vstack([G_lp, G_norm, G_sq])
    Aeq = np.hstack([Ab, np.zeros((len(beq), 2))])
    cones = Cones(l=n_soc, q=[n + 1, 3])

    def conic(S):
        # variables [beta, z, w] / S; objective (c_b^T beta + w) / S^2
        c = np.concatenate([cb / S, [0.0, 1.0]])
        hc = np.concatenate([prog.soc_b / S, np.zeros(n + 1), h_sq])
        return solve_cone_program(c, Gc, hc, Aeq, beq / S, cones, tol=tol, max_iter=max_iter)

    res = conic(S)
    # active constraints can shrink the solution far below the equality-only
    # estimate; the tolerances assume an order-one norm, so re-solve rescaled
    nb = float(np.linalg.norm(res.x[:n])) if res.status == OPTIMAL else 1.0
    if 0 < nb and not 0.1 <= nb <= 10.0:
        again = conic(S * nb)
        if again.status == OPTIMAL:
            res, S = again, S * nb
    if res.status != OPTIMAL and (res.status != MAX_ITER or not np.all(np.isfinite(res.x))):
        return _failed(res.status, n, start, res)
    beta = S * res.x[:n]
    z_epi = S * float(res.x[n])
    polished = False
    if res.status == OPTIMAL:
        dual, slack = res.z[:n_soc], res.s[:n_soc]
        better = _active_set_polish(beta, cb, Ab, beq, A_soc, prog.soc_eta, prog.soc_b,
                                    dual > 1e3 * slack)
        if better is not None:
            beta, z_epi, polished = better, float(np.linalg.norm(better)), True
    alpha = solve_triangular(L.T, beta, lower=False)
    z = float(np.sqrt(max(alpha @ prog.G @ alpha, 0.0)))
    objective = float(prog.linear @ alpha + z_epi ** 2)
    wall = time.perf_counter() - start
    return Solution(alpha, z, z_epi, objective, res.status, res.primal_residual,
                    res.dual_residual, res.gap, res.iterations, wall, polished=polished)


def _polish(beta, cb, E, e, A, eta, b, active, max_steps=8):
    """Newton refinement of an interior-point solution on its active set.

    The reduced problem is ``min cb^T beta + |beta|^2`` subject to ``E beta = e``
    and ``eta_r |beta| + a_r^T beta = b_r`` for the active rows. The interior
    point only pins ``beta`` to about the square root of the duality gap since
    the objective is flat at the optimum; Newton recovers full accuracy.
    Returns the refined point and the multipliers of the active rows, or
    ``None`` if Newton does not reach a stationary point of the reduced problem.
    """
    n = len(beta)
    Aa, eta_a, b_a = A[active], eta[active], b[active]
    if np.any(eta_a != 0) and np.linalg.norm(beta) < 1e-12:
        return None
    J0 = np.vstack([E, Aa])
    nE, nA = len(E), len(Aa)

    def pieces(x):
        nx = np.linalg.norm(x)
        u = x / nx if nx > 0 else np.zeros_like(x)
        J = J0.copy()
        J[nE:] += eta_a[:, None] * u[None, :]
        g = np.concatenate([E @ x - e, eta_a * nx + Aa @ x - b_a])
        return nx, u, J, g

    def stationarity(x, J):
        grad = cb + 2.0 * x
        mult = np.linalg.lstsq(J.T, -grad, rcond=None)[0] if len(J) else np.zeros(0)
        return grad + J.T @ mult, mult

    x = beta.copy()
    nx, u, J, g = pieces(x)
    _, mult = stationarity(x, J)  # least-squares multipliers
    scale = 1.0 + np.linalg.norm(cb) + 2.0 * np.linalg.norm(x)
    for _ in range(max_steps):
        H = 2.0 * np.eye(n)
        if nA and nx > 0:
            H += float(np.sum(mult[nE:] * eta_a)) / nx * (np.eye(n) - np.outer(u, u))
        K = np.block([[H, J.T], [J, np.zeros((len(J), len(J)))]])
        rhs = -np.concatenate([cb + 2.0 * x + J.T @ mult, g])
        try:
            step = np.linalg.lstsq(K, rhs, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        x = x + step[:n]
        mult = mult + step[n:]
        nx, u, J, g = pieces(x)
        res = np.linalg.norm(cb + 2.0 * x + J.T @ mult)
        if res <= 1e-12 * scale and np.linalg.norm(g) <= 1e-13 * (1.0 + np.linalg.norm(b_a) + np.linalg.norm(e)):
            break
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mult))):
        return None
    if res > 1e-9 * scale or np.linalg.norm(g) > 1e-10 * (1.0 + np.linalg.norm(b_a) + np.linalg.norm(e)):
        return None
    return x, mult[nE:]


def _active_set_polish(beta, cb, E, e, A, eta, b, active, rounds=8):
    """Polish on a guessed active set, correcting the guess until KKT holds.

    Rows with negative multipliers leave the set and violated rows join it.
    Returns ``None`` if no verified KKT point of the full problem turns up.
    """
    active = active.copy()
    tol_b = 1e-10 * (1.0 + (np.max(np.abs(b)) if len(b) else 0.0))
    for _ in range(rounds):
        out = _polish(beta, cb, E, e, A, eta, b, active)
        if out is None:
            return None
        x, mult = out
        slack = b - eta * np.linalg.norm(x) - A @ x
        neg = mult < -1e-9 * max(1.0, np.max(np.abs(mult), initial=0.0))
        viol = slack < -tol_b
        if not neg.any() and not viol.any():
            return x
        active[np.flatnonzero(active)[neg]] = False
        active[viol] = True
    return None


def _norm_scale(cb, A, b) -> float:
    """Norm of the minimizer of ``cb^T beta + |beta|^2`` subject to ``A beta = b``.

    Used to bring the norm variable to order one before the conic solve.
    """
    if len(b):
        y = np.linalg.lstsq(A @ A.T, -2.0 * b - A @ cb, rcond=None)[0]
        beta = -0.5 * (cb + A.T @ y)
    else:
        beta = -0.5 * cb
    nb = float(np.linalg.norm(beta))
    return nb if np.isfinite(nb) and nb > 1e-8 else 1.0


def _failed(status, n, start, res=None):
    nan = np.nan
    if res is None:
        return Solution(np.full(n, nan), nan, nan, nan, status, nan, nan, nan, 0,
                        time.perf_counter() - start, 0.0)
    return Solution(np.full(n, nan), nan, nan, nan, status, res.primal_residual,
                    res.dual_residual, res.gap, res.iterations, time.perf_counter() - start,
                    res.certificate_residual)


def terminal_adjoint(prog: SOCProgram, alpha, T: float) -> np.ndarray:
    """Terminal adjoint ``p_T`` implied by the coefficients of the atoms at ``T``.

    The objective carries ``|x|^2`` without a one-half, hence the factor two.
    """
    alpha = np.asarray(alpha, dtype=float)
    at_T = np.abs(prog.basis_times - T) <= TIME_TOL
    return 2.0 * (alpha[at_T] @ prog.basis_dirs[at_T])


def check_solution(prog: SOCProgram, sol: Solution, tol: float) -> dict:
    """Re-evaluate every constraint from the Gram data; returns worst violations."""
    a = sol.alpha
    z = float(np.sqrt(max(a @ prog.G @ a, 0.0)))
    soc = prog.soc_eta * z + prog.soc_a @ a - prog.soc_b
    eq = prog.eq_a @ a - prog.eq_b
    scale_soc = 1.0 + np.abs(prog.soc_b) if len(soc) else np.ones(0)
    scale_eq = 1.0 + np.abs(prog.eq_b) if len(eq) else np.ones(0)
    return {
        "soc_violation": float(np.max(soc / scale_soc)) if len(soc) else -np.inf,
        "equality_residual": float(np.max(np.abs(eq) / scale_eq)) if len(eq) else 0.0,
        "norm_mismatch": abs(sol.z_epigraph ** 2 - z ** 2) / (1.0 + z ** 2),
    }


# ---------------------------------------------------------------------------
# conic export


def _dump(obj, indent=0) -> str:
    """JSON with every float written to 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_dump(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.floating, np.integer)) for v in obj):
            return "[" + ", ".join(_dump(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _dump(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            raise ValueError("non-finite number in conic export")
        return "%.17g" % v
    return json.dumps(obj)


def export_conic(prog: SOCProgram, path) -> None:
    doc = {
        "n_vars": prog.n_vars,
        "objective": {
            "quadratic_factor_L": [list(r) for r in prog.L],
            "linear": list(prog.linear),
        },
        "equalities": [{"a": list(a), "b": b} for a, b in zip(prog.eq_a, prog.eq_b)],
        "soc_rows": [{"eta": e, "a": list(a), "b": b}
                     for e, a, b in zip(prog.soc_eta, prog.soc_a, prog.soc_b)],
        "lambda_cond": prog.lambda_cond,
        "basis": {"times": list(prog.basis_times),
                  "directions": [list(c) for c in prog.basis_dirs]},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(_dump(doc) + "\n")
    os.replace(tmp, path)


def import_conic(path) -> SOCProgram:
    with open(path) as fh:
        doc = json.load(fh)
    n = int(doc["n_vars"])
    L = np.array(doc["objective"]["quadratic_factor_L"], dtype=float).reshape(n, n)
    lam = float(doc.get("lambda_cond", 0.0))
    G = L @ L.T - lam * np.eye(n)
    eqs, socs = doc["equalities"], doc["soc_rows"]
    basis = doc.get("basis") or {"times": [np.nan] * n, "directions": [[]] * n}
    return SOCProgram(
        basis_times=np.array(basis["times"], dtype=float),
        basis_dirs=np.array(basis["directions"], dtype=float).reshape(n, -1 if n else 0),
        G=G,
        eq_a=np.array([e["a"] for e in eqs], dtype=float).reshape(len(eqs), n),
        eq_b=np.array([e["b"] for e in eqs], dtype=float),
        soc_eta=np.array([s["eta"] for s in socs], dtype=float),
        soc_a=np.array([s["a"] for s in socs], dtype=float).reshape(len(socs), n),
        soc_b=np.array([s["b"] for s in socs], dtype=float),
        linear=np.array(doc["objective"]["linear"], dtype=float),
        lambda_cond=lam,
        L=L,
    )
