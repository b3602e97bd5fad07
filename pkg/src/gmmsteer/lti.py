"""Discrete-time linear system and the stacked steering operators.

Everything downstream (closed-form steering, policies, the bilinear programs)
works on the stacked form of the dynamics: with ``X = [x_0; ...; x_N]`` and
``U = [u_0; ...; u_{N-1}]``,

    X = Gamma x_0 + Hu U,        x_N = Phi(N, 0) x_0 + BN U,

where ``Gamma`` stacks the transition maps from time 0, ``Hu`` is the lower
block-triangular input map, ``BN`` is its terminal block row, and the horizon
controllability Grammian is ``G = BN BN^T``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import DimensionMismatch, NotSymmetric

__all__ = [
    "LinearSystem",
    "SteeringOperators",
    "CostWeights",
    "build_operators",
    "check_controllable",
]


@dataclass(frozen=True)
class LinearSystem:
    """Time-varying linear system x_{k+1} = A_k x_k + B_k u_k over N steps."""

    A: list
    B: list
    n: int
    m: int
    N: int

    def __post_init__(self):
        if self.N < 1 or self.n < 1 or self.m < 1:
            raise ValueError("N, n, m must all be >= 1")
        if len(self.A) != self.N or len(self.B) != self.N:
            raise DimensionMismatch(
                f"need {self.N} A and B matrices, got {len(self.A)} and {len(self.B)}"
            )
        A = [np.asarray(Ak, dtype=float) for Ak in self.A]
        B = [np.asarray(Bk, dtype=float) for Bk in self.B]
        for k, (Ak, Bk) in enumerate(zip(A, B)):
            if Ak.shape != (self.n, self.n):
                raise DimensionMismatch(f"A[{k}] has shape {Ak.shape}, expected {(self.n, self.n)}")
            if Bk.shape != (self.n, self.m):
                raise DimensionMismatch(f"B[{k}] has shape {Bk.shape}, expected {(self.n, self.m)}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @classmethod
    def time_invariant(cls, A, B, N):
        """Replicate a single (A, B) pair across the horizon."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        n, m = B.shape
        return cls(A=[A] * N, B=[B] * N, n=n, m=m, N=N)

    @classmethod
    def single_integrator(cls, dim, dt, N):
        """x_{k+1} = x_k + dt * u_k in `dim` spatial dimensions."""
        return cls.time_invariant(np.eye(dim), dt * np.eye(dim), N)

    @classmethod
    def double_integrator(cls, dim, dt, N):
        """Position/velocity chain driven by acceleration, per spatial axis."""
        I = np.eye(dim)
        A = np.block([[I, dt * I], [np.zeros((dim, dim)), I]])
        B = np.vstack([0.5 * dt**2 * I, I])
        return cls.time_invariant(A, B, N)


class SteeringOperators:
    """Stacked operators for a :class:`LinearSystem`.

    Attributes
    ----------
    Gamma : ((N+1)n, n) stack of Phi(k, 0)
    Hu : ((N+1)n, Nm) lower block-triangular input map
    BN : (n, Nm) terminal input map (last block row of Hu)
    G : (n, n) horizon controllability Grammian, BN @ BN.T
    D : (Nm, Nm - n) orthonormal basis of the null space of BN
    """

    def __init__(self, sys):
        n, m, N = sys.n, sys.m, sys.N
        self.sys = sys
        self.n, self.m, self.N = n, m, N

        # Phi(k2, k1) for all 0 <= k1 <= k2 <= N, cached as a dict.
        phi = {}
        for k1 in range(N + 1):
            phi[(k1, k1)] = np.eye(n)
            for k2 in range(k1 + 1, N + 1):
                phi[(k2, k1)] = sys.A[k2 - 1] @ phi[(k2 - 1, k1)]
        self._phi = phi

        self.Gamma = np.vstack([phi[(k, 0)] for k in range(N + 1)])
        Hu = np.zeros(((N + 1) * n, N * m))
        for k in range(1, N + 1):
            for j in range(k):
                Hu[k * n:(k + 1) * n, j * m:(j + 1) * m] = phi[(k, j + 1)] @ sys.B[j]
        self.Hu = Hu
        self.BN = Hu[N * n:, :].copy()
        self.G = self.BN @ self.BN.T
        # Orthonormal null-space basis of BN from a rank-revealing SVD; when
        # Nm == n the basis is empty and all formulas degrade to that case.
        self.D = scipy.linalg.null_space(self.BN)
        if self.D.size == 0:
            self.D = np.zeros((N * m, 0))

    def Phi(self, k2, k1):
        """Transition map Phi(k2, k1) = A_{k2-1} ... A_{k1}."""
        return self._phi[(k2, k1)]

    @property
    def PhiN(self):
        """Full-horizon transition map Phi(N, 0)."""
        return self._phi[(self.N, 0)]

    def state_selector(self, k):
        """P_k^x with x_k = P_k^x X for the (N+1)-block state stack."""
        n, N = self.n, self.N
        if not 0 <= k <= N:
            raise IndexError(f"state index {k} outside 0..{N}")
        P = np.zeros((n, (N + 1) * n))
        P[:, k * n:(k + 1) * n] = np.eye(n)
        return P

    def input_selector(self, k):
        """P_k^u with u_k = P_k^u U for the N-block input stack."""
        m, N = self.m, self.N
        if not 0 <= k <= N - 1:
            raise IndexError(f"input index {k} outside 0..{N - 1}")
        P = np.zeros((m, N * m))
        P[:, k * m:(k + 1) * m] = np.eye(m)
        return P


def build_operators(sys):
    """Precompute the stacked steering operators for `sys`."""
    return SteeringOperators(sys)


def check_controllable(ops, tol=1e-10):
    """True iff the horizon Grammian is numerically nonsingular.

    The test is relative: min eig(G) > tol * max eig(G).
    """
    eigs = np.linalg.eigvalsh(ops.G)
    return bool(eigs[0] > tol * eigs[-1])


def _sym_check(Mtx, name, tol=1e-8):
    Mtx = np.asarray(Mtx, dtype=float)
    if Mtx.ndim != 2 or Mtx.shape[0] != Mtx.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {Mtx.shape}")
    scale = max(1.0, np.abs(Mtx).max())
    if np.abs(Mtx - Mtx.T).max() > tol * scale:
        raise NotSymmetric(f"{name} is not symmetric within {tol}")
    return 0.5 * (Mtx + Mtx.T)


def _clamp_psd(Mtx, tol):
    """Project onto the PSD cone if the smallest eigenvalue is in [-tol, 0)."""
    w, V = np.linalg.eigh(Mtx)
    if w[0] >= 0.0:
        return Mtx
    if w[0] < -tol:
        raise ValueError(f"matrix has eigenvalue {w[0]:.3e} below -{tol:.1e}")
    return (V * np.clip(w, 0.0, None)) @ V.T


@dataclass
class CostWeights:
    """Per-step quadratic weights and their block-diagonal stacks.

    Q : N+1 state weights (PSD), R : N input weights (PD), x_ref : N+1
    reference states.  The stacked forms Qhat, Rhat and Xref drive every
    closed-form steering expression.
    """

    Q: list
    R: list
    x_ref: list = None
    Qhat: np.ndarray = field(init=False, repr=False)
    Rhat: np.ndarray = field(init=False, repr=False)
    Xref: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Q = [np.atleast_2d(np.asarray(Qk, dtype=float)) for Qk in self.Q]
        R = [np.atleast_2d(np.asarray(Rk, dtype=float)) for Rk in self.R]
        if len(Q) != len(R) + 1:
            raise DimensionMismatch(
                f"need N+1 state weights and N input weights, got {len(Q)} and {len(R)}"
            )
        n = Q[0].shape[0]
        m = R[0].shape[0]
        N = len(R)
        checked_Q = []
        for k, Qk in enumerate(Q):
            Qk = _sym_check(Qk, f"Q[{k}]")
            if Qk.shape != (n, n):
                raise DimensionMismatch(f"Q[{k}] has shape {Qk.shape}, expected {(n, n)}")
            checked_Q.append(_clamp_psd(Qk, tol=1e-10 * max(1.0, np.abs(Qk).max())))
        checked_R = []
        for k, Rk in enumerate(R):
            Rk = _sym_check(Rk, f"R[{k}]")
            if Rk.shape != (m, m):
                raise DimensionMismatch(f"R[{k}] has shape {Rk.shape}, expected {(m, m)}")
            if np.linalg.eigvalsh(Rk)[0] <= 0.0:
                raise ValueError(f"R[{k}] must be positive definite")
            checked_R.append(Rk)
        if self.x_ref is None:
            x_ref = [np.zeros(n) for _ in range(N + 1)]
        else:
            x_ref = [np.asarray(x, dtype=float).reshape(n) for x in self.x_ref]
            if len(x_ref) != N + 1:
                raise DimensionMismatch(f"need N+1 reference states, got {len(x_ref)}")
        self.Q = checked_Q
        self.R = checked_R
        self.x_ref = x_ref
        self.Qhat = scipy.linalg.block_diag(*checked_Q)
        self.Rhat = scipy.linalg.block_diag(*checked_R)
        self.Xref = np.concatenate(x_ref)

    @property
    def n(self):
        return self.Q[0].shape[0]

    @property
    def m(self):
        return self.R[0].shape[0]

    @property
    def N(self):
        return len(self.R)

    @classmethod
    def uniform(cls, sys, R=None, Q=None, Q_terminal=None, x_ref=None):
        """Constant weights over the horizon of `sys`.

        R defaults to identity, Q to zero; scalars are scaled identities.
        """
        def as_mat(val, size, default):
            if val is None:
                return default(size)
            val = np.asarray(val, dtype=float)
            if val.ndim == 0:
                return float(val) * np.eye(size)
            return np.atleast_2d(val)

        Rk = as_mat(R, sys.m, np.eye)
        Qk = as_mat(Q, sys.n, lambda s: np.zeros((s, s)))
        QN = Qk if Q_terminal is None else as_mat(Q_terminal, sys.n, lambda s: np.zeros((s, s)))
        refs = None
        if x_ref is not None:
            x_ref = np.asarray(x_ref, dtype=float)
            if x_ref.ndim == 1:
                refs = [x_ref] * (sys.N + 1)
            else:
                refs = list(x_ref)
        return cls(Q=[Qk] * sys.N + [QN], R=[Rk] * sys.N, x_ref=refs)
