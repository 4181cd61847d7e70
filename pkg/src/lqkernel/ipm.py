"""Dense primal-dual interior-point method for small cone programs.

Solves

    minimize    c^T x
    subject to  G x + s = h,  A x = b,  s in K,

where ``K`` is a product of a nonnegative orthant and second-order cones
``{(s0, s1) : s0 >= |s1|}``. The method works on the homogeneous self-dual
embedding (so infeasibility yields a certificate), uses Nesterov-Todd scaling
and a Mehrotra predictor-corrector step. Newton systems are solved in scaled
symmetric form with a dense LU factorization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

OPTIMAL = "Optimal"
MAX_ITER = "MaxIter"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"

STEP = 0.99
EXPON = 3
# certificates found only after the embedding stalls are accepted at this level
LOOSE_CERT = 1e-5


@dataclass
class Cones:
    l: int
    q: list[int] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.l + sum(self.q)

    @property
    def degree(self) -> int:
        return self.l + len(self.q)

    def soc_slices(self):
        start = self.l
        for n in self.q:
            yield slice(start, start + n)
            start += n


@dataclass
class ConeResult:
    status: str
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    z: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    gap: float
    primal_objective: float
    dual_objective: float
    certificate_residual: float = np.nan


# -- Jordan algebra helpers --------------------------------------------------


def _unit(cones: Cones) -> np.ndarray:
    e = np.zeros(cones.m)
    e[: cones.l] = 1.0
    for sl in cones.soc_slices():
        e[sl.start] = 1.0
    return e


def _margin(u: np.ndarray, cones: Cones) -> float:
    """Smallest 'eigenvalue' of ``u``; positive iff strictly inside the cone."""
    vals = [np.min(u[: cones.l])] if cones.l else []
    for sl in cones.soc_slices():
        v = u[sl]
        vals.append(v[0] - np.linalg.norm(v[1:]))
    return float(min(vals)) if vals else np.inf


def _jprod(u, v, cones):
    out = np.empty_like(u)
    out[: cones.l] = u[: cones.l] * v[: cones.l]
    for sl in cones.soc_slices():
        a, b = u[sl], v[sl]
        out[sl.start] = a @ b
        out[sl.start + 1: sl.stop] = a[0] * b[1:] + b[0] * a[1:]
    return out


def _jdiv(u, v, cones):
    """Solve ``u o x = v`` for ``x``."""
    out = np.empty_like(v)
    out[: cones.l] = v[: cones.l] / u[: cones.l]
    for sl in cones.soc_slices():
        a, b = u[sl], v[sl]
        det = a[0] ** 2 - a[1:] @ a[1:]
        x0 = (a[0] * b[0] - a[1:] @ b[1:]) / det
        out[sl.start] = x0
        out[sl.start + 1: sl.stop] = (b[1:] - x0 * a[1:]) / a[0]
    return out


def _max_step(lam, d, cones) -> float:
    """Largest ``a`` with ``lam + a d`` in the cone (``inf`` if unbounded)."""
    best = np.inf
    if cones.l:
        dl = d[: cones.l]
        neg = dl < 0
        if np.any(neg):
            best = min(best, float(np.min(-lam[: cones.l][neg] / dl[neg])))
    for sl in cones.soc_slices():
        u, v = lam[sl], d[sl]
        # first positive root of det(u + a v); u is interior so det(u) > 0
        scale = 1.0 / u[0]
        u, v = u * scale, v * scale
        qa = v[0] ** 2 - v[1:] @ v[1:]
        qb = 2.0 * (u[0] * v[0] - u[1:] @ v[1:])
        qc = u[0] ** 2 - u[1:] @ u[1:]
        if abs(qa) <= 1e-15 * max(abs(qb), qc):
            if qb < 0:
                best = min(best, -qc / qb)
            continue
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0:
            continue
        sq = np.sqrt(disc)
        q = -0.5 * (qb + np.copysign(sq, qb))
        roots = [q / qa] + ([qc / q] if q != 0 else [])
        pos = [a for a in roots if a > 0]
        if pos:
            best = min(best, min(pos))
    return best


# -- Nesterov-Todd scaling ---------------------------------------------------


class _Scaling:
    """``W`` with ``W z = W^{-1} s = lambda`` (block diagonal, symmetric)."""

    def __init__(self, s, z, cones: Cones):
        self.cones = cones
        l = cones.l
        self.d = np.sqrt(s[:l] / z[:l])
        self.soc = []
        for sl in cones.soc_slices():
            ss, zz = s[sl], z[sl]
            sn = np.sqrt(max(ss[0] ** 2 - ss[1:] @ ss[1:], 1e-300))
            zn = np.sqrt(max(zz[0] ** 2 - zz[1:] @ zz[1:], 1e-300))
            sb, zb = ss / sn, zz / zn
            gamma = np.sqrt(0.5 * (1.0 + sb @ zb))
            wb = sb.copy()
            wb[0] += zb[0]
            wb[1:] -= zb[1:]
            wb /= 2.0 * gamma
            beta = np.sqrt(sn / zn)
            self.soc.append((sl, beta, wb))
        self.lam = self.apply(z)

    def apply(self, v, inverse=False):
        """``W v`` (or ``W^{-1} v``); ``v`` may be a vector or a matrix of columns."""
        out = np.empty_like(v)
        l = self.cones.l
        dd = self.d if v.ndim == 1 else self.d[:, None]
        out[:l] = v[:l] / dd if inverse else v[:l] * dd
        for sl, beta, wb in self.soc:
            blk = v[sl]
            w0, w1 = wb[0], (-wb[1:] if inverse else wb[1:])
            f = 1.0 / beta if inverse else beta
            head, tail = blk[0], blk[1:]
            w1t = w1 @ tail
            out[sl.start] = f * (w0 * head + w1t)
            out[sl.start + 1: sl.stop] = f * (
                np.multiply.outer(w1, head) + tail
                + np.multiply.outer(w1, w1t / (1.0 + w0)))
        return out


class _KKT:
    """Factorization of the scaled Newton system.

    With ``u = W dz`` and ``Gs = W^{-1} G`` the system

        [[0, A^T, Gs^T], [A, 0, 0], [Gs, 0, -I]] [dx; dy; u] = [bx; by; W^{-1} bz]

    is symmetric quasi-definite and much better conditioned than the normal
    equations once slacks approach zero; it is factored by dense LU.
    """

    def __init__(self, G, A, W: _Scaling):
        self.G, self.A, self.W = G, A, W
        n, p, m = G.shape[1], A.shape[0], G.shape[0]
        self.dims = (n, p, m)
        Gs = W.apply(G, inverse=True)
        K = np.zeros((n + p + m, n + p + m))
        K[:n, n:n + p] = A.T
        K[n:n + p, :n] = A
        K[:n, n + p:] = Gs.T
        K[n + p:, :n] = Gs
        K[n + p:, n + p:] = -np.eye(m)
        self.K = K
        self.lu = lu_factor(K, check_finite=False)

    def _rhs(self, bx, by, bz):
        return np.concatenate([bx, by, self.W.apply(bz, inverse=True)])

    def _split(self, sol):
        n, p, _ = self.dims
        return sol[:n], sol[n:n + p], self.W.apply(sol[n + p:], inverse=True)

    def solve(self, bx, by, bz):
        return self._split(lu_solve(self.lu, self._rhs(bx, by, bz), check_finite=False))

    def refined_solve(self, bx, by, bz, steps=2):
        r = self._rhs(bx, by, bz)
        sol = lu_solve(self.lu, r, check_finite=False)
        for _ in range(steps):
            sol = sol + lu_solve(self.lu, r - self.K @ sol, check_finite=False)
        return self._split(sol)


def _infeasibility_residual(A, G, y, z, cones, cn, by_hz) -> float:
    """Relative residual of ``(y, z)`` as a primal infeasibility certificate."""
    if not by_hz < 0:
        return np.inf
    outside = max(0.0, -_margin(z, cones))
    return (float(np.linalg.norm(A.T @ y + G.T @ z)) / cn + outside) / (-by_hz)


def _ray_residual(A, G, x, cones, bn, hn, cx) -> float:
    """Relative residual of ``x`` as an improving ray: ``A x = 0``, ``-G x`` in the cone."""
    if not cx < 0:
        return np.inf
    outside = max(0.0, -_margin(-(G @ x), cones))
    return max(float(np.linalg.norm(A @ x)) / bn, outside / hn) / (-cx)


def solve_cone_program(c, G, h, A, b, cones: Cones, tol: float = 1e-8,
                       max_iter: int = 200) -> ConeResult:
    """Solve ``min c^T x  s.t.  G x + s = h, A x = b, s in cones``.

    ``A`` must have full row rank and ``[A; G]`` full column rank; the
    scaled KKT system is singular otherwise.
    """
    c = np.asarray(c, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, len(c))
    b = np.asarray(b, dtype=float)
    if G.shape != (cones.m, len(c)) or len(h) != cones.m:
        raise ValueError("inconsistent cone program dimensions")
    e = _unit(cones)
    nrm = lambda v: float(np.linalg.norm(v))
    cn, bn, hn = max(1.0, nrm(c)), max(1.0, nrm(b)), max(1.0, nrm(h))

    # initial point: least-squares primal and least-norm dual, shifted into the cone
    Wid = _Scaling(e.copy(), e.copy(), cones)
    kkt = _KKT(G, A, Wid)
    x, _, zz = kkt.refined_solve(np.zeros_like(c), b, h)
    s = -zz
    _, y, z = kkt.refined_solve(-c, np.zeros_like(b), np.zeros_like(h))
    for v in (s, z):
        a = -_margin(v, cones)
        if a >= -1e-8 * max(1.0, nrm(v)):
            v += (1.0 + a) * e
    tau, kappa = 1.0, 1.0

    status = MAX_ITER
    cert = np.nan
    it = 0
    while True:
        rx = A.T @ y + G.T @ z + c * tau
        ry = A @ x - b * tau
        rz = G @ x + s - h * tau
        cx, by_hz = c @ x, b @ y + h @ z
        rt = kappa + cx + by_hz
        mu = (s @ z + tau * kappa) / (cones.degree + 1)
        pres = max(nrm(ry) / bn, nrm(rz) / hn) / tau
        dres = nrm(rx) / cn / tau
        pcost, dcost = cx / tau, -by_hz / tau
        gap = (s @ z) / tau ** 2
        relgap = gap / max(1.0, abs(pcost))
        if pres <= tol and dres <= tol and relgap <= tol:
            status = OPTIMAL
            break
        cert_p = _infeasibility_residual(A, G, y, z, cones, cn, by_hz)
        cert_d = _ray_residual(A, G, x, cones, bn, hn, cx)
        if cert_p <= tol:
            status, cert = INFEASIBLE, cert_p
            break
        if cert_d <= tol:
            status, cert = UNBOUNDED, cert_d
            break
        # tau collapsing against kappa: the iterate is all certificate, stop
        # before the scaling loses the cone interior
        stalled = tau <= 1e-13 * max(1.0, kappa) or not np.isfinite(mu)
        if stalled or it >= max_iter:
            if stalled and cert_p <= LOOSE_CERT:
                status, cert = INFEASIBLE, cert_p
            elif stalled and cert_d <= LOOSE_CERT:
                status, cert = UNBOUNDED, cert_d
            break

        W = _Scaling(s, z, cones)
        lam = W.lam
        try:
            kkt = _KKT(G, A, W)
        except LinAlgError:
            break
        x1, y1, z1 = kkt.refined_solve(-c, b, h)
        denom = c @ x1 + b @ y1 + h @ z1 - kappa / tau

        def direction(gamma, ds, dk):
            dst = _jdiv(lam, ds, cones)
            bx = -(1 - gamma) * rx
            by = -(1 - gamma) * ry
            bz = -(1 - gamma) * rz - W.apply(dst)
            x0, y0, z0 = kkt.refined_solve(bx, by, bz)
            dtau = (-(1 - gamma) * rt - dk / tau - (c @ x0 + b @ y0 + h @ z0)) / denom
            dx, dy, dz = x0 + dtau * x1, y0 + dtau * y1, z0 + dtau * z1
            dkappa = (dk - kappa * dtau) / tau
            dzs = W.apply(dz)
            # slack step from the linear equation keeps primal residuals exact
            ds = -(1 - gamma) * rz + h * dtau - G @ dx
            dss = W.apply(ds, inverse=True)
            return dx, dy, dz, dtau, dkappa, dss, dzs, ds

        def step_len(dss, dzs, dtau, dkappa):
            a = min(_max_step(lam, dss, cones), _max_step(lam, dzs, cones))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        # predictor
        aff = direction(0.0, -_jprod(lam, lam, cones), -tau * kappa)
        a_aff = min(1.0, step_len(*aff[5:7], aff[3], aff[4]))
        sigma = (1.0 - a_aff) ** EXPON
        # corrector
        ds = -_jprod(lam, lam, cones) + sigma * mu * e - _jprod(aff[5], aff[6], cones)
        dk = -tau * kappa + sigma * mu - aff[3] * aff[4]
        dx, dy, dz, dtau, dkappa, dss, dzs, ds = direction(sigma, ds, dk)
        a = min(1.0, STEP * step_len(dss, dzs, dtau, dkappa))

        if not (np.isfinite(a) and np.all(np.isfinite(dx)) and np.all(np.isfinite(dz))):
            break
        x = x + a * dx
        y = y + a * dy
        z = z + a * dz
        s = s + a * ds
        tau += a * dtau
        kappa += a * dkappa
        it += 1

    if status == INFEASIBLE:
        scale = -(b @ y + h @ z)
        return ConeResult(status, np.full_like(x, np.nan), y / scale, s, z / scale, it,
                          pres, dres, gap, np.nan, np.nan, cert)
    if status == UNBOUNDED:
        scale = -(c @ x)
        return ConeResult(status, x / scale, np.full_like(y, np.nan), s / scale, z, it,
                          pres, dres, gap, -np.inf, -np.inf, cert)
    return ConeResult(status, x / tau, y / tau, s / tau, z / tau, it, pres, dres, relgap,
                      pcost, dcost)
