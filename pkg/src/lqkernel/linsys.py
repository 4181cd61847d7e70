"""Time-varying linear systems, state-transition matrices and quadrature.

The system is ``x'(t) = A(t) x(t) + B(t) u(t)`` on ``[0, T]`` with running
cost weights ``Q(t)`` (state) and ``R(t)`` (control). Every matrix-valued
coefficient is wrapped in a :class:`MatrixFunction` so constant, sampled and
callable data share one evaluation interface.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.linalg import expm

from .errors import DomainError, NumericalError, UsageError

TIME_TOL = 1e-12


class MatrixFunction:
    """A matrix-valued function of time.

    Three kinds are supported: ``"constant"``, ``"sampled"`` (piecewise-linear
    interpolation between strictly increasing sample times) and ``"callable"``.
    Calling the object with a scalar returns a ``(rows, cols)`` array; calling it
    with a 1-D array of times returns ``(len(t), rows, cols)``.
    """

    def __init__(self, kind, shape, *, value=None, times=None, values=None, func=None):
        if kind not in ("constant", "sampled", "callable"):
            raise UsageError(f"unknown MatrixFunction kind {kind!r}")
        self.kind = kind
        self.shape = tuple(int(n) for n in shape)
        self.value = value
        self.times = times
        self.values = values
        self.func = func

    @classmethod
    def constant(cls, value):
        value = _as_2d(value)
        if not np.all(np.isfinite(value)):
            raise UsageError("constant matrix has non-finite entries")
        return cls("constant", value.shape, value=value)

    @classmethod
    def sampled(cls, times, values):
        times = np.asarray(times, dtype=float)
        vals = [_as_2d(v) for v in values]
        if times.ndim != 1 or len(times) < 2 or len(times) != len(vals):
            raise UsageError("sampled function needs >= 2 times and one value per time")
        if np.any(np.diff(times) <= 0):
            raise UsageError("sample times must be strictly increasing")
        values = np.stack(vals)
        if not np.all(np.isfinite(values)):
            raise UsageError("sampled values contain non-finite entries")
        return cls("sampled", values.shape[1:], times=times, values=values)

    @classmethod
    def from_callable(cls, func, shape=None):
        if shape is None:
            shape = _as_2d(func(0.0)).shape
        return cls("callable", shape, func=func)

    @property
    def is_constant(self):
        return self.kind == "constant"

    def __call__(self, t):
        scalar = np.ndim(t) == 0
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "constant":
            out = np.broadcast_to(self.value, (len(ts),) + self.shape).copy()
        elif self.kind == "sampled":
            tt = self.times
            k = np.clip(np.searchsorted(tt, ts, side="right") - 1, 0, len(tt) - 2)
            w = np.clip((ts - tt[k]) / (tt[k + 1] - tt[k]), 0.0, 1.0)[:, None, None]
            out = (1.0 - w) * self.values[k] + w * self.values[k + 1]
        else:
            out = np.stack([_as_2d(self.func(float(s))).reshape(self.shape) for s in ts])
        return out[0] if scalar else out

    def covers(self, T):
        """True when the function is defined on all of ``[0, T]``."""
        if self.kind != "sampled":
            return True
        return self.times[0] <= TIME_TOL and self.times[-1] >= T - TIME_TOL

    def __repr__(self):
        return f"MatrixFunction({self.kind!r}, shape={self.shape})"


def _as_2d(value):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise UsageError(f"expected a matrix, got array of shape {arr.shape}")
    return arr


def as_matrix_function(obj, shape=None) -> MatrixFunction:
    """Coerce arrays, ``{"times", "values"}`` dicts and callables."""
    if isinstance(obj, MatrixFunction):
        mf = obj
    elif isinstance(obj, dict):
        mf = MatrixFunction.sampled(obj["times"], obj["values"])
    elif callable(obj):
        mf = MatrixFunction.from_callable(obj, shape)
    else:
        mf = MatrixFunction.constant(obj)
    if shape is not None and mf.shape != tuple(shape):
        raise UsageError(f"expected shape {tuple(shape)}, got {mf.shape}")
    return mf


def check_times(t, T):
    """Validate that times lie in ``[0, T]`` and clip round-off excursions."""
    ts = np.asarray(t, dtype=float)
    tol = TIME_TOL * max(1.0, T)
    if np.any(ts < -tol) or np.any(ts > T + tol) or not np.all(np.isfinite(ts)):
        raise DomainError(f"time outside [0, {T}]: {ts.min() if ts.size else ts}")
    return np.clip(ts, 0.0, T)


@dataclass
class LinearSystem:
    """Dynamics ``x' = A x + B u`` and cost weights ``Q``, ``R`` on ``[0, T]``.

    ``r_min`` is the declared lower bound ``R(t) >= r_min * I``; when omitted,
    any strictly positive smallest eigenvalue is accepted by :func:`validate`.
    ``n_grid`` is the number of points of the uniform master grid.
    """

    A: MatrixFunction
    B: MatrixFunction
    T: float = 1.0
    Q: MatrixFunction | None = None
    R: MatrixFunction | None = None
    r_min: float | None = None
    n_grid: int = 2001

    def __post_init__(self):
        self.A = as_matrix_function(self.A)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise UsageError(f"A must be square, got {self.A.shape}")
        self.B = as_matrix_function(self.B)
        if self.B.shape[0] != n:
            raise UsageError(f"B must have {n} rows, got {self.B.shape}")
        m = self.B.shape[1]
        self.Q = as_matrix_function(np.zeros((n, n)) if self.Q is None else self.Q, (n, n))
        self.R = as_matrix_function(np.eye(m) if self.R is None else self.R, (m, m))
        self.T = float(self.T)
        if not self.T > 0:
            raise UsageError("horizon T must be positive")
        if self.n_grid < 3 or self.n_grid % 2 == 0:
            raise UsageError("n_grid must be odd and >= 3 (Simpson panels)")
        for name in ("A", "B", "Q", "R"):
            if not getattr(self, name).covers(self.T):
                raise UsageError(f"sampled {name} does not cover [0, T]")

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> int:
        return self.B.shape[1]

    @cached_property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_grid)

    @property
    def step(self) -> float:
        return self.T / (self.n_grid - 1)

    @property
    def time_invariant(self) -> bool:
        return all(getattr(self, k).is_constant for k in ("A", "B", "Q", "R"))

    @cached_property
    def q_is_zero(self) -> bool:
        return bool(np.all(self.Q(self.grid) == 0.0))

    def with_weights(self, Q=None, R=None) -> "LinearSystem":
        """Copy of the system with the cost weights replaced."""
        return LinearSystem(self.A, self.B, self.T, Q=Q, R=R, r_min=None, n_grid=self.n_grid)

    def control_gain(self, ts) -> np.ndarray:
        """``R(t)^{-1} B(t)^T`` at the given times, shape ``(len, M, N)``."""
        ts = np.atleast_1d(ts)
        return np.linalg.solve(self.R(ts), np.swapaxes(self.B(ts), 1, 2))


# ---------------------------------------------------------------------------
# integration of linear matrix ODEs


def rk4_linear(F: Callable, grid: np.ndarray, Y0: np.ndarray) -> np.ndarray:
    """Classical RK4 for ``Y' = F(t) Y`` on a fixed grid; returns ``Y`` at every node."""
    h = np.diff(grid)
    Fn = F(grid)
    Fm = F(grid[:-1] + 0.5 * h)
    Y = np.empty((len(grid),) + Y0.shape)
    Y[0] = Y0
    y = Y0
    for i in range(len(h)):
        k1 = Fn[i] @ y
        k2 = Fm[i] @ (y + 0.5 * h[i] * k1)
        k3 = Fm[i] @ (y + 0.5 * h[i] * k2)
        k4 = Fn[i + 1] @ (y + h[i] * k3)
        y = y + h[i] / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Y[i + 1] = y
    return Y


def rk4_step(F: Callable, t0: np.ndarray, Y0: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """One batched RK4 step of ``Y' = F(t) Y`` from ``(t0, Y0)`` by ``dt`` (may be negative)."""
    d = dt[:, None, None]
    F0, Fm, F1 = F(t0), F(t0 + 0.5 * dt), F(t0 + dt)
    k1 = F0 @ Y0
    k2 = Fm @ (Y0 + 0.5 * d * k1)
    k3 = Fm @ (Y0 + 0.5 * d * k2)
    k4 = F1 @ (Y0 + d * k3)
    return Y0 + d / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def expm_small(A: np.ndarray, dts: np.ndarray) -> np.ndarray:
    """Batched ``expm(A dt)`` by truncated Taylor series for short steps.

    Intended for ``|dt|`` of at most half a grid step; falls back to
    scaling-and-squaring when ``||A dt||`` is not small.
    """
    dts = np.asarray(dts, dtype=float)
    n = A.shape[0]
    a = np.linalg.norm(A, 1) * (np.max(np.abs(dts)) if dts.size else 0.0)
    squarings = max(0, int(np.ceil(np.log2(a / 0.5)))) if a > 0.5 else 0
    x = a / 2 ** squarings
    # number of terms so that x^k / k! falls below unit round-off
    terms, err = 1, 1.0
    while err > 1e-17 and terms < 30:
        err *= x / terms
        terms += 1
    # sum_j (dt)^j A^j / j! as one matrix product over precomputed powers
    Aj = [np.eye(n)]
    for j in range(1, terms + 1):
        Aj.append(Aj[-1] @ A / j)
    P = np.stack(Aj).reshape(terms + 1, n * n)
    x = dts.ravel() / 2 ** squarings
    V = np.ones((len(x), terms + 1))
    V[:, 1:] = np.cumprod(np.broadcast_to(x[:, None], (len(x), terms)), axis=1)
    out = (V @ P).reshape(len(x), n, n)
    for _ in range(squarings):
        out = out @ out
    return out


class GridPropagator:
    """Fundamental matrix of ``Y' = F(t) Y``, ``Y(0) = I``, on the master grid.

    Off-grid values take one RK4 step from the nearest node, or use the exact
    exponential when ``F`` is constant.
    """

    def __init__(self, F: Callable, grid: np.ndarray, constant: np.ndarray | None = None):
        self.F = F
        self.grid = grid
        self.constant = constant
        n = (constant if constant is not None else F(grid[:1])[0]).shape[0]
        if constant is not None:
            self.values = expm(constant[None] * grid[:, None, None])
        else:
            self.values = rk4_linear(F, grid, np.eye(n))

    def _nearest(self, ts):
        g = self.grid
        k = np.clip(np.rint(ts / (g[1] - g[0])).astype(int), 0, len(g) - 1)
        return k, ts - g[k]

    def at(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        k, dt = self._nearest(ts)
        if self.constant is not None:
            return expm_small(self.constant, dt) @ self.values[k]
        g = self.grid
        out = self.values[k].copy()
        off = np.abs(dt) > TIME_TOL * max(1.0, g[-1])
        if np.any(off):
            out[off] = rk4_step(self.F, g[k[off]], self.values[k[off]], dt[off])
        return out


class StateTransition:
    """State-transition matrices ``Phi_A(t, s)`` of ``x' = A(t) x``.

    ``Phi_A(t, 0)`` and its inverse are cached on the master grid. Constant
    ``A`` uses the matrix exponential throughout.
    """

    def __init__(self, system: LinearSystem):
        self.system = system
        A = system.A
        const = A.value if A.is_constant else None
        self._prop = GridPropagator(A, system.grid, constant=const)
        self.grid = system.grid
        self.phi = self._prop.values
        self.phi_inv = _inverse(self.phi)

    @property
    def constant(self) -> bool:
        return self._prop.constant is not None

    def at(self, ts) -> tuple[np.ndarray, np.ndarray]:
        """``Phi_A(t, 0)`` and its inverse for each time in ``ts``."""
        ts = check_times(np.atleast_1d(ts), self.system.T)
        phi = self._prop.at(ts)
        if self.constant:
            k, dt = self._prop._nearest(ts)
            return phi, self.phi_inv[k] @ expm_small(self._prop.constant, -dt)
        # conditioning was checked on the grid; off-grid points are one short step away
        return phi, np.linalg.inv(phi)


def _inverse(phi):
    cond = np.linalg.cond(phi)
    if not np.all(np.isfinite(cond)) or np.max(cond) > 1e14:
        raise NumericalError(f"state-transition factor is singular (cond={np.max(cond):.3g})")
    return np.linalg.inv(phi)


def transition_matrix(st: StateTransition, t: float, s: float) -> np.ndarray:
    """``Phi_A(t, s)``, the map from the state at time ``s`` to the state at ``t``."""
    T = st.system.T
    t, s = float(check_times(t, T)), float(check_times(s, T))
    if st.constant:
        return expm(st.system.A.value * (t - s))
    phi_t, _ = st.at(t)
    _, phi_s_inv = st.at(s)
    return phi_t[0] @ phi_s_inv[0]


# ---------------------------------------------------------------------------
# quadrature


def segments(times: np.ndarray) -> list[slice]:
    """Split a non-decreasing time array at repeated nodes.

    A repeated time marks a jump of the integrand: the first copy carries the
    left limit and the second the right limit.
    """
    times = np.asarray(times)
    d = np.diff(times)
    if np.any(d < 0):
        raise UsageError("quadrature times must be non-decreasing")
    cuts = np.flatnonzero(d == 0) + 1
    bounds = np.concatenate([[0], cuts, [len(times)]])
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def cumulative_integral(times, values) -> np.ndarray:
    """Running integral ``int_{t_0}^{t_k} f`` of samples along axis 0.

    Composite Simpson on each jump-free segment (non-uniform spacing allowed),
    trapezoid for two-point segments.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    offset = np.zeros(values.shape[1:])
    for seg in segments(times):
        t, v = times[seg], values[seg]
        if len(t) == 1:
            part = np.zeros_like(v)
        elif len(t) == 2:
            part = np.stack([np.zeros_like(v[0]), 0.5 * (t[1] - t[0]) * (v[0] + v[1])])
        else:
            part = cumulative_simpson(v, x=t, axis=0, initial=0.0)
        out[seg] = offset + part
        offset = out[seg][-1]
    return out


def integrate(times, values):
    """Total integral of samples over ``[times[0], times[-1]]``."""
    return cumulative_integral(times, values)[-1]


def propagate(system: LinearSystem, x0, times, u, t=None, transition: StateTransition | None = None):
    """Solve ``x' = A x + B u`` from ``x(0) = x0`` by variation of constants.

    ``u`` holds control samples on ``times`` (which must start at 0); repeated
    times mark control jumps. Returns the states at every sample time, or only
    ``x(t)`` when ``t`` is given (``u`` is then truncated at ``t``).
    """
    st = transition or StateTransition(system)
    times = check_times(times, system.T)
    u = np.asarray(u, dtype=float).reshape(len(times), system.M)
    if abs(times[0]) > TIME_TOL:
        raise UsageError("control samples must start at t = 0")
    if t is not None:
        t = float(check_times(t, system.T))
        if t > times[-1] + TIME_TOL:
            raise UsageError("control samples do not cover [0, t]")
        keep = times < t
        u_t = _sample_left(times, u, t)
        times = np.append(times[keep], t)
        u = np.vstack([u[keep], u_t])
    phi, phi_inv = st.at(times)
    g = np.einsum("kij,kjm,km->ki", phi_inv, system.B(times), u)
    acc = cumulative_integral(times, g) + np.asarray(x0, dtype=float)[None]
    x = np.einsum("kij,kj->ki", phi, acc)
    return x[-1] if t is not None else x


def _sample_left(times, u, t):
    k = np.searchsorted(times, t, side="left")
    if k < len(times) and times[k] == t:
        return u[k]
    k0 = max(k - 1, 0)
    k1 = min(k, len(times) - 1)
    if k1 == k0:
        return u[k0]
    w = (t - times[k0]) / (times[k1] - times[k0])
    return (1 - w) * u[k0] + w * u[k1]


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    r_min_eig: float
    r_ok: bool
    q_min_eig: float
    q_symmetric: bool
    q_psd: bool
    dims_ok: bool
    messages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.r_ok and self.q_symmetric and self.q_psd and self.dims_ok


def validate(system: LinearSystem, C=None, d=None, tol: float = 1e-10) -> ValidationReport:
    """Check the standing assumptions numerically on the master grid."""
    grid = system.grid
    msgs = []
    R = system.R(grid)
    r_eig = float(np.min(np.linalg.eigvalsh(0.5 * (R + np.swapaxes(R, 1, 2)))))
    r_target = system.r_min if system.r_min is not None else 0.0
    r_ok = r_eig >= r_target - tol and r_eig > 0
    if not r_ok:
        msgs.append(f"R positivity violated: min eigenvalue {r_eig:.6g}")
    Q = system.Q(grid)
    asym = float(np.max(np.abs(Q - np.swapaxes(Q, 1, 2)))) if Q.size else 0.0
    q_sym = asym <= tol * max(1.0, float(np.max(np.abs(Q))))
    if not q_sym:
        msgs.append(f"Q not symmetric (max asymmetry {asym:.3g})")
    q_eig = float(np.min(np.linalg.eigvalsh(0.5 * (Q + np.swapaxes(Q, 1, 2)))))
    q_psd = q_eig >= -tol * max(1.0, float(np.max(np.abs(Q))))
    if not q_psd:
        msgs.append(f"Q not positive semidefinite: min eigenvalue {q_eig:.6g}")
    dims_ok = True
    N = system.N
    if C is not None:
        C = as_matrix_function(C)
        if C.shape[1] != N:
            dims_ok = False
            msgs.append(f"C has {C.shape[1]} columns, expected {N}")
        if d is not None:
            d = as_matrix_function(d)
            if d.shape != (C.shape[0], 1):
                dims_ok = False
                msgs.append(f"d has shape {d.shape}, expected ({C.shape[0]}, 1)")
    return ValidationReport(r_eig, r_ok, q_eig, q_sym, q_psd, dims_ok, msgs)
