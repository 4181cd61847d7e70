"""The linear-quadratic matrix-valued kernel of the trajectory space.

Trajectories of ``x' = A x + B u`` form a Hilbert space under

    <x1, x2>_K = x1(0)^T x2(0) + int_0^T (x1^T Q x2 + u1^T R u2) dt,

and point evaluations are continuous, so the space has a reproducing kernel
``K(s, t)`` (an ``N x N`` matrix). With ``Q = 0`` it splits as ``K0 + K1``:

    K0(s, t) = Phi(s, 0) Phi(t, 0)^T
    K1(s, t) = int_0^{min(s,t)} Phi(s, r) B R^{-1} B^T Phi(t, r)^T dr
             = Phi(s, 0) W(min(s, t)) Phi(t, 0)^T,

where ``W`` is the cumulative Gramian of the pulled-back input matrix. With
``Q != 0`` each column ``K(., t)`` solves a Hamiltonian two-point boundary
value problem with a unit impulse at ``t``; it is solved by superposition on
the fundamental matrix of the Hamiltonian system.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import NumericalError, UnsupportedModeError, UsageError
from .linsys import (
    TIME_TOL,
    GridPropagator,
    LinearSystem,
    StateTransition,
    check_times,
    cumulative_integral,
)

ZERO_Q = "zero_q"
GENERAL_Q = "general_q"


class LQKernel:
    """Kernel evaluator for a :class:`LinearSystem`.

    ``mode`` is ``"zero_q"``, ``"general_q"`` or ``"auto"`` (zero-Q whenever
    ``Q`` vanishes on the master grid). All evaluation methods are vectorized
    over time arrays and read-only after construction.
    """

    def __init__(self, system: LinearSystem, mode: str = "auto", transition: StateTransition | None = None):
        if mode == "auto":
            mode = ZERO_Q if system.q_is_zero else GENERAL_Q
        if mode not in (ZERO_Q, GENERAL_Q):
            raise UsageError(f"unknown kernel mode {mode!r}")
        if mode == ZERO_Q and not system.q_is_zero:
            raise UsageError("zero_q mode requires Q == 0")
        self.system = system
        self.mode = mode
        self.transition = transition or StateTransition(system)
        self.N = system.N
        self.T = system.T
        grid = system.grid
        if mode == ZERO_Q:
            self._w_integrand = self._pullback(grid, self.transition.phi_inv)
            self._W = cumulative_integral(grid, self._w_integrand)
        else:
            self._setup_hamiltonian()

    # -- construction helpers ------------------------------------------------

    def _input_weight(self, ts):
        """``B R^{-1} B^T`` at ``ts``."""
        sys_ = self.system
        B = sys_.B(ts)
        S = B @ sys_.control_gain(ts)
        return 0.5 * (S + np.swapaxes(S, 1, 2))

    def _pullback(self, ts, phi_inv):
        G = phi_inv @ self._input_weight(ts) @ np.swapaxes(phi_inv, 1, 2)
        return 0.5 * (G + np.swapaxes(G, 1, 2))

    def _setup_hamiltonian(self):
        sys_ = self.system
        N = self.N

        def ham(ts):
            ts = np.atleast_1d(ts)
            A = sys_.A(ts)
            H = np.zeros((len(ts), 2 * N, 2 * N))
            H[:, :N, :N] = A
            H[:, :N, N:] = self._input_weight(ts)
            H[:, N:, :N] = sys_.Q(ts)
            H[:, N:, N:] = -np.swapaxes(A, 1, 2)
            return H

        const = ham(np.zeros(1))[0] if sys_.time_invariant else None
        self._ham = GridPropagator(ham, sys_.grid, constant=const)
        psi_T = self._ham.values[-1]
        match = psi_T[N:, :N] + psi_T[N:, N:]
        self.match_condition = float(np.linalg.cond(match))
        if not np.isfinite(self.match_condition) or self.match_condition > 1e14:
            raise NumericalError(
                f"boundary matching matrix is singular (cond={self.match_condition:.3g})")
        self._psi_T = psi_T
        self._match_lu = lu_factor(match)

    # -- primitive pieces ----------------------------------------------------

    def phi(self, ts) -> np.ndarray:
        return self.transition.at(ts)[0]

    def _w(self, ts) -> np.ndarray:
        """Cumulative Gramian ``W(t)`` at arbitrary times."""
        ts = np.atleast_1d(ts)
        grid = self.system.grid
        h = self.system.step
        k = np.clip(np.floor(ts / h).astype(int), 0, len(grid) - 1)
        near = np.clip(np.rint(ts / h).astype(int), 0, len(grid) - 1)
        on_grid = np.abs(ts - grid[near]) <= TIME_TOL * max(1.0, self.T)
        out = self._W[near].copy()
        off = ~on_grid
        if np.any(off):
            k = np.minimum(k[off], len(grid) - 2)
            a, b = grid[k], ts[off]
            mid = 0.5 * (a + b)
            _, inv_m = self.transition.at(mid)
            _, inv_b = self.transition.at(b)
            g_m = self._pullback(mid, inv_m)
            g_b = self._pullback(b, inv_b)
            out[off] = self._W[k] + ((b - a) / 6.0)[:, None, None] * (
                self._w_integrand[k] + 4.0 * g_m + g_b)
        return out

    def _psi(self, ts):
        return self._ham.at(ts)

    def _psi_inv(self, psi):
        # the Hamiltonian flow is symplectic: Psi^{-1} = -J Psi^T J
        N = self.N
        pt = np.swapaxes(psi, 1, 2)
        inv = np.empty_like(psi)
        inv[:, :N, :N] = pt[:, N:, N:]
        inv[:, :N, N:] = -pt[:, N:, :N]
        inv[:, N:, :N] = -pt[:, :N, N:]
        inv[:, N:, N:] = pt[:, :N, :N]
        return inv

    def _columns(self, ts):
        """Shooting data for columns ``K(., t)``: base ``(2N, N)`` and jump ``(2N, N)``."""
        N = self.N
        inv_t = self._psi_inv(self._psi(ts))
        rhs = (self._psi_T[None, N:, :] @ inv_t[:, :, N:])
        X = lu_solve(self._match_lu, np.concatenate(list(rhs), axis=1)) if len(rhs) else rhs
        X = X.reshape(N, len(rhs), N).transpose(1, 0, 2) if len(rhs) else rhs
        base = np.concatenate([X, X], axis=1)
        jump = -inv_t[:, :, N:]
        return base, jump

    # -- kernel blocks -------------------------------------------------------

    def k0(self, s, t) -> np.ndarray:
        s, t = self._pair(s, t)
        out = self.phi(s) @ np.swapaxes(self.phi(t), 1, 2)
        return self._squeeze(out, s)

    def k1(self, s, t) -> np.ndarray:
        self._require_zero_q("k1")
        s, t = self._pair(s, t)
        out = self.phi(s) @ self._w(np.minimum(s, t)) @ np.swapaxes(self.phi(t), 1, 2)
        return self._squeeze(out, s)

    def k(self, s, t) -> np.ndarray:
        """``K(s, t)`` for scalars or equal-length arrays of times."""
        s, t = self._pair(s, t)
        return self._squeeze(self.blocks(s, t), s)

    def blocks(self, s, t) -> np.ndarray:
        """Pairwise blocks ``K(s_i, t_i)``, shape ``(n, N, N)``."""
        s, t = self._pair(s, t)
        if self.mode == ZERO_Q:
            core = self._w(np.minimum(s, t)) + np.eye(self.N)
            return self.phi(s) @ core @ np.swapaxes(self.phi(t), 1, 2)
        N = self.N
        base, jump = self._columns(t)
        top = self._psi(s)[:, :N, :]
        coef = base + (s > t)[:, None, None] * jump
        return top @ coef

    def block_matrix(self, s, t) -> np.ndarray:
        """All blocks ``K(s_i, t_j)``, shape ``(len(s), len(t), N, N)``."""
        s = check_times(np.atleast_1d(s), self.T)
        t = check_times(np.atleast_1d(t), self.T)
        N = self.N
        if self.mode == ZERO_Q:
            uniq, inv = np.unique(np.concatenate([s, t]), return_inverse=True)
            Wu = self._w(uniq)
            si, ti = inv[: len(s)], inv[len(s):]
            mins = np.where(s[:, None] <= t[None, :], si[:, None], ti[None, :])
            core = Wu[mins] + np.eye(N)
            ps = self.phi(s)[:, None]
            pt = np.swapaxes(self.phi(t), 1, 2)[None]
            return ps @ core @ pt
        base, jump = self._columns(t)
        top = self._psi(s)[:, :N, :]
        coef = base[None] + (s[:, None] > t[None, :])[:, :, None, None] * jump[None]
        return top[:, None] @ coef

    def diag(self, ts) -> np.ndarray:
        ts = np.atleast_1d(ts)
        return self.blocks(ts, ts)

    def control_blocks(self, s, t: float, side: str = "left") -> np.ndarray:
        """``U_t(s)`` for an array of ``s``: the control generating ``K(., t)``.

        At ``s == t`` the control jumps; ``side`` picks the left or right limit.
        """
        s = check_times(np.atleast_1d(s), self.T)
        t = float(check_times(t, self.T))
        gain = self.system.control_gain(s)
        if self.mode == ZERO_Q:
            # at s = 0 only the right limit exists
            active = ((s <= t) & (s > 0)) | (s < t) if side == "left" else (s < t)
            _, inv_s = self.transition.at(s)
            out = gain @ np.swapaxes(inv_s, 1, 2) @ self.phi(t)[0].T
            return out * active[:, None, None]
        N = self.N
        base, jump = self._columns(np.array([t]))
        past = ((s > t) | (s <= 0)) if side == "left" else (s >= t)
        coef = base + past[:, None, None] * jump
        return gain @ (self._psi(s)[:, N:, :] @ coef)

    # -- representer sums ----------------------------------------------------

    def eval_sum(self, ss, times, coeffs) -> np.ndarray:
        """``sum_b K(s, t_b) p_b`` for every ``s`` in ``ss``, shape ``(len(ss), N)``."""
        ss = check_times(np.atleast_1d(ss), self.T)
        tb, P = self._sorted_atoms(times, coeffs)
        if len(tb) == 0:
            return np.zeros((len(ss), self.N))
        if self.mode == ZERO_Q:
            V = np.einsum("bji,bj->bi", self.phi(tb), P)
            WV = np.einsum("bij,bj->bi", self._w(tb), V)
            j = np.searchsorted(tb, ss, side="right")
            pre_WV = np.vstack([np.zeros(self.N), np.cumsum(WV, axis=0)])
            pre_V = np.vstack([np.zeros(self.N), np.cumsum(V, axis=0)])
            rest = pre_V[-1] - pre_V[j]
            inner = pre_V[-1] + pre_WV[j] + np.einsum("kij,kj->ki", self._w(ss), rest)
            return np.einsum("kij,kj->ki", self.phi(ss), inner)
        lifted = self._lifted(ss, tb, P, side="left")
        return np.einsum("kij,kj->ki", self._psi(ss)[:, : self.N, :], lifted)

    def control_sum(self, ss, times, coeffs, side: str = "left") -> np.ndarray:
        """``sum_b U_{t_b}(s) p_b``, shape ``(len(ss), M)``."""
        ss = check_times(np.atleast_1d(ss), self.T)
        tb, P = self._sorted_atoms(times, coeffs)
        gain = self.system.control_gain(ss)
        if len(tb) == 0:
            return np.zeros((len(ss), self.system.M))
        if self.mode == ZERO_Q:
            V = np.einsum("bji,bj->bi", self.phi(tb), P)
            post = np.vstack([np.cumsum(V[::-1], axis=0)[::-1], np.zeros(self.N)])
            j = self._atom_index(tb, ss, side)
            _, inv_s = self.transition.at(ss)
            lam = np.einsum("kji,kj->ki", inv_s, post[j])
            return np.einsum("kmi,ki->km", gain, lam)
        lifted = self._lifted(ss, tb, P, side=side)
        lam = np.einsum("kij,kj->ki", self._psi(ss)[:, self.N:, :], lifted)
        return np.einsum("kmi,ki->km", gain, lam)

    def _lifted(self, ss, tb, P, side):
        base, jump = self._columns(tb)
        total = np.einsum("bij,bj->i", base, P)
        J = np.einsum("bij,bj->bi", jump, P)
        pre = np.vstack([np.zeros(2 * self.N), np.cumsum(J, axis=0)])
        j = self._atom_index(tb, ss, side)
        return total[None] + pre[j]

    @staticmethod
    def _atom_index(tb, ss, side):
        """Number of atoms already passed at ``s``; at ``s = 0`` only the right limit exists."""
        j = np.searchsorted(tb, ss, side=side)
        if side == "left":
            j = np.where(ss <= 0, np.searchsorted(tb, ss, side="right"), j)
        return j

    def _sorted_atoms(self, times, coeffs):
        tb = check_times(np.atleast_1d(times), self.T)
        P = np.asarray(coeffs, dtype=float).reshape(len(tb), self.N)
        order = np.argsort(tb, kind="stable")
        return tb[order], P[order]

    # -- misc ----------------------------------------------------------------

    @cached_property
    def gamma(self) -> float:
        D = self.diag(self.system.grid)
        lam = np.linalg.eigvalsh(0.5 * (D + np.swapaxes(D, 1, 2)))[:, -1]
        return float(np.sqrt(max(np.max(lam), 0.0)))

    def _pair(self, s, t):
        s = check_times(np.atleast_1d(s), self.T)
        t = check_times(np.atleast_1d(t), self.T)
        s, t = np.broadcast_arrays(s, t)
        return s.astype(float), t.astype(float)

    @staticmethod
    def _squeeze(out, s):
        return out[0] if len(s) == 1 else out

    def _require_zero_q(self, what):
        if self.mode != ZERO_Q:
            raise UnsupportedModeError(f"{what} is only defined in zero_q mode")


@dataclass
class RepresenterFunction:
    """A finite kernel expansion ``f = sum_m K(., t_m) p_m``."""

    kernel: LQKernel
    times: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(len(self.times), self.kernel.N)

    def __call__(self, t) -> np.ndarray:
        out = self.kernel.eval_sum(t, self.times, self.coeffs)
        return out[0] if np.ndim(t) == 0 else out

    def control(self, s, side: str = "left") -> np.ndarray:
        out = self.kernel.control_sum(s, self.times, self.coeffs, side=side)
        return out[0] if np.ndim(s) == 0 else out

    def norm_sq(self) -> float:
        if len(self.times) == 0:
            return 0.0
        Kb = self.kernel.block_matrix(self.times, self.times)
        return float(max(np.einsum("ai,abij,bj->", self.coeffs, Kb, self.coeffs), 0.0))

    def norm(self) -> float:
        return float(np.sqrt(self.norm_sq()))

    def scaled(self, factor) -> "RepresenterFunction":
        return RepresenterFunction(self.kernel, self.times, factor * self.coeffs)


@dataclass
class GramianResult:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    invertible: bool


def k0(kernel: LQKernel, s, t):
    return kernel.k0(s, t)


def k1(kernel: LQKernel, s, t):
    return kernel.k1(s, t)


def k(kernel: LQKernel, s, t):
    return kernel.k(s, t)


def evaluate(f: RepresenterFunction, t):
    return f(t)


def control_of(f: RepresenterFunction, s, side: str = "left"):
    return f.control(s, side=side)


def inner(f: RepresenterFunction, g: RepresenterFunction) -> float:
    """``<f, g>_K = sum_{m,n} q_n^T K(s_n, t_m) p_m`` by the reproducing property."""
    if f.kernel is not g.kernel:
        raise UsageError("inner product of functions from different kernels")
    if len(f.times) == 0 or len(g.times) == 0:
        return 0.0
    Kb = f.kernel.block_matrix(g.times, f.times)
    return float(np.einsum("ni,nmij,mj->", g.coeffs, Kb, f.coeffs))


def gramian(kernel: LQKernel, rel_threshold: float = 1e-10) -> GramianResult:
    """Controllability Gramian ``K1(T, T)`` computed with ``R = I``."""
    sys_ = kernel.system
    unit = LQKernel(sys_.with_weights(Q=None, R=np.eye(sys_.M)), mode=ZERO_Q,
                    transition=kernel.transition)
    G = unit.k1(sys_.T, sys_.T)
    G = 0.5 * (G + G.T)
    eig = np.linalg.eigvalsh(G)
    top = max(abs(eig[-1]), 0.0)
    invertible = bool(top > 0 and eig[0] > rel_threshold * top)
    return GramianResult(G, eig, invertible)


def gamma_k(kernel: LQKernel) -> float:
    """Grid maximum of ``sqrt(lambda_max(K(t, t)))``; a lower estimate of the true sup."""
    return kernel.gamma


def transversality_check(kernel: LQKernel, g_gradient, p_T) -> float:
    """Residual ``|K1(T,T) (grad g(K1(T,T) p_T) + p_T)|`` of the unconstrained problem."""
    G = kernel.k1(kernel.T, kernel.T)
    p_T = np.asarray(p_T, dtype=float)
    return float(np.linalg.norm(G @ (np.asarray(g_gradient(G @ p_T), dtype=float) + p_T)))
