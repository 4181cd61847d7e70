"""Coverings of the horizon and second-order-cone tightening coefficients.

An affine constraint ``c_i(t)^T x(t) <= d_i(t)`` on ``[0, T]`` is replaced by
finitely many conic constraints at covering centres ``t_m`` with radii
``delta_m``:

    eta_i(delta_m, t_m) * ||x||_K + c_i(t_m)^T x(t_m) <= dinf_i(delta_m, t_m)

``eta`` bounds the modulus of continuity of ``c_i^T x`` through the kernel
distance ``||K(., t) c(t) - K(., s) c(s)||_K`` and ``dinf`` is the local
infimum of ``d_i``. Suprema and infima are estimated by equispaced sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .kernel import LQKernel, RepresenterFunction
from .linsys import MatrixFunction, as_matrix_function, check_times

DEFAULT_SAMPLES = 33


@dataclass
class ConstraintSpec:
    """Affine state constraints ``C(t) x(t) <= d(t)`` (``P`` rows)."""

    C: MatrixFunction
    d: MatrixFunction
    labels: list[str] | None = None

    def __post_init__(self):
        self.C = as_matrix_function(self.C)
        self.d = as_matrix_function(self.d)
        if self.d.shape != (self.P, 1):
            raise UsageError(f"d must be a {self.P}-vector, got shape {self.d.shape}")
        if self.labels is None:
            self.labels = [f"c{i}" for i in range(self.P)]

    @property
    def P(self) -> int:
        return self.C.shape[0]

    def row(self, i: int, ts) -> np.ndarray:
        """``c_i(t)`` for each time, shape ``(len, N)``."""
        return self.C(np.atleast_1d(ts))[:, i, :]

    def bound(self, i: int, ts) -> np.ndarray:
        return self.d(np.atleast_1d(ts))[:, i, 0]

    @classmethod
    def empty(cls, N: int) -> "ConstraintSpec":
        return cls(MatrixFunction("constant", (0, N), value=np.zeros((0, N))),
                   MatrixFunction("constant", (0, 1), value=np.zeros((0, 1))))


@dataclass
class Covering:
    """Intervals ``[t_m - delta_m, t_m + delta_m]`` meant to cover ``[0, T]``."""

    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_1d(np.asarray(self.centers, dtype=float))
        self.radii = np.atleast_1d(np.asarray(self.radii, dtype=float))
        if self.centers.shape != self.radii.shape:
            raise UsageError("centers and radii must have the same length")
        if np.any(self.radii < 0):
            raise UsageError("radii must be non-negative")

    def __len__(self):
        return len(self.centers)

    @property
    def delta_max(self) -> float:
        return float(np.max(self.radii)) if len(self) else 0.0

    def covers(self, T: float, n_check: int = 100001) -> bool:
        """Check the covering property on a fine uniform grid."""
        if len(self) == 0:
            return False
        ts = np.linspace(0.0, T, n_check)
        lo = self.centers - self.radii
        hi = self.centers + self.radii
        order = np.argsort(lo)
        lo, hi = lo[order], hi[order]
        reach = np.maximum.accumulate(hi)
        k = np.searchsorted(lo, ts + 1e-12 * max(T, 1.0), side="right") - 1
        ok = (k >= 0) & (reach[np.maximum(k, 0)] >= ts - 1e-12 * max(T, 1.0))
        return bool(np.all(ok))


def build_uniform_covering(T: float, n_points: int) -> Covering:
    """``n_points`` centres ``(m - 1/2) T / n`` with radius ``T / (2 n)``."""
    if n_points < 1:
        raise UsageError("a covering needs at least one point")
    m = np.arange(1, n_points + 1)
    return Covering((m - 0.5) * T / n_points, np.full(n_points, T / (2.0 * n_points)))


def _windows(t, delta, T, n_samples):
    """Equispaced samples of ``[t - delta, t + delta] ∩ [0, T]``, shape ``(len(t), n)``."""
    if n_samples < 2:
        raise UsageError("n_samples must be at least 2")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    delta = np.broadcast_to(np.asarray(delta, dtype=float), t.shape)
    lo = np.clip(t - delta, 0.0, T)
    hi = np.clip(t + delta, 0.0, T)
    u = np.linspace(0.0, 1.0, n_samples)
    return lo[:, None] + (hi - lo)[:, None] * u[None, :]


def eta_values(kernel: LQKernel, c_fn, t, delta, n_samples: int = DEFAULT_SAMPLES,
               safety: float = 1.0) -> np.ndarray:
    """Vectorized ``eta`` for many centres.

    ``c_fn`` maps an array of times to constraint rows ``(len, N)``. The
    squared kernel distance is expanded with the reproducing property,

        c(t)^T K(t,t) c(t) + c(s)^T K(s,s) c(s) - 2 c(t)^T K(t,s) c(s),

    and negative round-off radicands are clamped to zero.
    """
    t = check_times(np.atleast_1d(t), kernel.T)
    S = _windows(t, delta, kernel.T, n_samples)
    n, ns = S.shape
    s = S.ravel()
    tt = np.repeat(t, ns)
    ct, cs = c_fn(t), c_fn(s)
    ctt = np.repeat(ct, ns, axis=0)
    k_tt = np.einsum("mi,mij,mj->m", ct, kernel.diag(t), ct)
    k_ss = np.einsum("ki,kij,kj->k", cs, kernel.diag(s), cs)
    k_ts = np.einsum("ki,kij,kj->k", ctt, kernel.blocks(tt, s), cs)
    rad = np.repeat(k_tt, ns) + k_ss - 2.0 * k_ts
    dist = np.sqrt(np.clip(rad, 0.0, None)).reshape(n, ns)
    return safety * dist.max(axis=1)


def eta(kernel: LQKernel, c_fn, t_m: float, delta_m: float, n_samples: int = DEFAULT_SAMPLES,
        safety: float = 1.0) -> float:
    """Sampled supremum of the kernel distance over one covering interval."""
    if delta_m == 0:
        return 0.0
    return float(eta_values(kernel, c_fn, [t_m], delta_m, n_samples, safety)[0])


def omega_values(d_fn, t, delta, T, n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    S = _windows(t, delta, T, n_samples)
    return np.abs(d_fn(S.ravel()).reshape(S.shape) - d_fn(t)[:, None]).max(axis=1)


def omega(d_fn, t: float, delta: float, T: float, n_samples: int = DEFAULT_SAMPLES) -> float:
    """Sampled ``sup |d(t) - d(s)|`` over ``s`` within ``delta`` of ``t``."""
    return float(omega_values(d_fn, [t], delta, T, n_samples)[0])


def d_inf_values(d_fn, t, delta, T, n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    S = _windows(t, delta, T, n_samples)
    return d_fn(S.ravel()).reshape(S.shape).min(axis=1)


def d_inf(d_fn, t_m: float, delta_m: float, T: float, n_samples: int = DEFAULT_SAMPLES) -> float:
    """Sampled infimum of ``d`` over one covering interval."""
    return float(d_inf_values(d_fn, [t_m], delta_m, T, n_samples)[0])


@dataclass
class ConstraintFamily:
    """Tightened data for one constraint row ``i`` over its covering."""

    index: int
    covering: Covering
    eta: np.ndarray
    d_inf: np.ndarray
    c: np.ndarray  # c_i(t_m), shape (N_i, N)

    def __len__(self):
        return len(self.covering)


@dataclass
class TightenedConstraints:
    spec: ConstraintSpec
    families: list[ConstraintFamily] = field(default_factory=list)
    n_samples: int = DEFAULT_SAMPLES
    safety: float = 1.0
    _pointwise: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return sum(len(f) for f in self.families)

    def rows(self):
        """Iterate ``(i, m, t_m, delta_m, eta, d_inf, c)`` over all SOC rows."""
        for fam in self.families:
            cov = fam.covering
            for m in range(len(fam)):
                yield (fam.index, m, cov.centers[m], cov.radii[m], fam.eta[m],
                       fam.d_inf[m], fam.c[m])

    def with_eta(self, scales=None, overrides=None) -> "TightenedConstraints":
        """Copy with ``eta`` multiplied per row family or replaced by constants."""
        fams = []
        for fam in self.families:
            e = fam.eta.copy()
            if scales is not None and scales[fam.index] is not None:
                e = e * float(scales[fam.index])
            if overrides is not None and overrides[fam.index] is not None:
                e = np.full_like(e, float(overrides[fam.index]))
            fams.append(ConstraintFamily(fam.index, fam.covering, e, fam.d_inf, fam.c))
        return TightenedConstraints(self.spec, fams, self.n_samples, self.safety)


def tighten(kernel: LQKernel, spec: ConstraintSpec, covering, n_samples: int = DEFAULT_SAMPLES,
            safety: float = 1.0) -> TightenedConstraints:
    """Compute ``eta``, ``dinf`` and ``c_i(t_m)`` for every constraint and centre.

    ``covering`` is one :class:`Covering` shared by all rows or a list with one
    covering per row.
    """
    covs = covering if isinstance(covering, (list, tuple)) else [covering] * spec.P
    if len(covs) != spec.P:
        raise UsageError(f"expected {spec.P} coverings, got {len(covs)}")
    T = kernel.T
    fams = []
    for i, cov in enumerate(covs):
        check_times(cov.centers, T)
        c_fn = (lambda ts, i=i: spec.row(i, ts))
        d_fn = (lambda ts, i=i: spec.bound(i, ts))
        e = eta_values(kernel, c_fn, cov.centers, cov.radii, n_samples, safety)
        dinf = d_inf_values(d_fn, cov.centers, cov.radii, T, n_samples)
        fams.append(ConstraintFamily(i, cov, e, dinf, spec.row(i, cov.centers)))
    return TightenedConstraints(spec, fams, n_samples, safety)


# ---------------------------------------------------------------------------
# membership in the constraint-set family

V0, V_DELTA_FIN, V_DELTA_INF, V_EPS = "V0", "Vdfin", "Vdinf", "Veps"


@dataclass
class Membership:
    member: bool
    margin: float  # smallest slack d - lhs over all checked points


def _pointwise_tightening(kernel, spec, tightened, ts, delta, dense_factor):
    """``eta(t, delta)`` and ``omega(t, delta)`` at every dense time, shape ``(n, P)``.

    They do not depend on the function being tested, so results are kept on
    ``tightened`` for reuse.
    """
    n_samples = tightened.n_samples if tightened is not None else DEFAULT_SAMPLES
    safety = tightened.safety if tightened is not None else 1.0
    key = (float(delta), int(dense_factor), len(ts))
    cache = tightened._pointwise if tightened is not None else {}
    if key not in cache:
        e = np.empty((len(ts), spec.P))
        w = np.empty_like(e)
        for i in range(spec.P):
            e[:, i] = eta_values(kernel, lambda s, i=i: spec.row(i, s), ts, delta, n_samples, safety)
            w[:, i] = omega_values(lambda s, i=i: spec.bound(i, s), ts, delta, kernel.T, n_samples)
        cache[key] = (e, w)
    return cache[key]


def dense_times(T: float, n_grid: int, dense_factor: int, extra=()) -> np.ndarray:
    base = np.linspace(0.0, T, (n_grid - 1) * dense_factor + 1)
    return np.unique(np.concatenate([base, np.asarray(extra, dtype=float)]))


def membership(f: RepresenterFunction, spec: ConstraintSpec, tightened: TightenedConstraints | None,
               which: str, dense_factor: int = 10, eps=None, norm: float | None = None,
               delta: float | None = None, tol: float = 0.0) -> Membership:
    """Test whether ``f`` lies in ``V0``, ``Vdfin``, ``Vdinf`` or ``Veps``.

    ``norm`` defaults to ``||f||_K`` from Gram data. ``Vdinf`` uses ``delta``
    (default: the largest covering radius). Pointwise sets are checked on a
    grid ``dense_factor`` times finer than the master grid, augmented with the
    covering centres.
    """
    kernel = f.kernel
    T = kernel.T
    z = f.norm() if norm is None else float(norm)
    P = spec.P
    if P == 0:
        return Membership(True, np.inf)
    if which == V_DELTA_FIN:
        if tightened is None:
            raise UsageError("Vdfin membership needs tightened coefficients")
        margins = []
        for fam in tightened.families:
            x = f(fam.covering.centers)
            lhs = fam.eta * z + np.einsum("mi,mi->m", fam.c, x)
            margins.append(fam.d_inf - lhs)
        margin = float(np.min(np.concatenate(margins)))
        return Membership(margin >= -tol, margin)

    extra = []
    if tightened is not None:
        extra = np.concatenate([fam.covering.centers for fam in tightened.families])
    ts = dense_times(T, kernel.system.n_grid, dense_factor, extra)
    x = f(ts)
    C = spec.C(ts)
    d = spec.d(ts)[:, :, 0]
    lhs = np.einsum("kpi,ki->kp", C, x)
    if which == V0:
        slack = d - lhs
    elif which == V_EPS:
        e = np.broadcast_to(np.asarray(0.0 if eps is None else eps, dtype=float), (P,))
        slack = d - e[None, :] - lhs
    elif which == V_DELTA_INF:
        if delta is None:
            if tightened is None:
                raise UsageError("Vdinf membership needs delta or tightened coefficients")
            delta = max(fam.covering.delta_max for fam in tightened.families)
        e, w = _pointwise_tightening(kernel, spec, tightened, ts, delta, dense_factor)
        slack = d - e * z - w - lhs
    else:
        raise UsageError(f"unknown constraint set {which!r}")
    margin = float(np.min(slack))
    return Membership(margin >= -tol, margin)
