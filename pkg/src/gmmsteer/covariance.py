"""Closed-form Gaussian mean and covariance steering.

The mean problem is an equality-constrained convex QP solved through its KKT
conditions.  The covariance problem has a closed form built on the null-space
split L = h + D Z of the feedback stack, an orthogonal matrix chosen by SVD
(Von Neumann trace minimization), and a nuclear-norm term; the same optimal
value is also available as a small SDP used as a cross-check and as
constraint material for the bilinear solvers.
"""

from dataclasses import dataclass

import cvxpy as cp
import numpy as np
import scipy.linalg

from . import conic
from .exceptions import SingularGrammian, SvdFailure
from .gaussians import sqrtm_psd
from .lti import check_controllable

__all__ = [
    "ThetaSet",
    "MeanSteerSolution",
    "CovSteerSolution",
    "build_thetas",
    "mean_steer",
    "cov_steer",
    "cov_steer_sdp_value",
    "mean_cost",
    "cov_cost",
]


def mean_cost(ops, w, Ubar, mu0):
    """Feed-forward cost Ubar' Rhat Ubar + ||Gamma mu0 + Hu Ubar - Xref||^2_Qhat."""
    dev = ops.Gamma @ mu0 + ops.Hu @ Ubar - w.Xref
    return float(Ubar @ w.Rhat @ Ubar + dev @ w.Qhat @ dev)


def cov_cost(ops, w, L, Sigma0):
    """Feedback cost tr(Rhat L S L') + tr(Qhat (Gamma + Hu L) S (Gamma + Hu L)')."""
    GL = ops.Gamma + ops.Hu @ L
    return float(np.trace(w.Rhat @ L @ Sigma0 @ L.T) + np.trace(w.Qhat @ GL @ Sigma0 @ GL.T))


@dataclass(frozen=True)
class ThetaSet:
    """System/weight-dependent matrices shared by every steering pair.

    M = Rhat + Hu' Qhat Hu drives the null-space projections; Theta6/Theta7
    collect the quadratic trace terms of the optimal covariance cost and
    Theta8 its nuclear-norm factor (Omega = S0^{1/2} Theta8 Sd^{1/2}).
    """

    M: np.ndarray
    Theta1: np.ndarray
    Theta2: np.ndarray
    Theta3: np.ndarray
    Theta4: np.ndarray
    Theta5: np.ndarray
    Theta6: np.ndarray
    Theta7: np.ndarray
    Theta8: np.ndarray
    # factorizations reused by the per-pair solves
    Ginv: np.ndarray
    Gm: np.ndarray
    Gm_inv: np.ndarray
    Gm_inv_sqrt: np.ndarray
    M_cho: object
    DtMD_cho: object


def _require_controllable(ops, tol=1e-10):
    if not check_controllable(ops, tol):
        raise SingularGrammian("horizon controllability Grammian is numerically singular")


def build_thetas(ops, w):
    """Assemble the shared steering matrices for (ops, w)."""
    _require_controllable(ops)
    Nm = ops.N * ops.m
    D = ops.D
    M = w.Rhat + ops.Hu.T @ w.Qhat @ ops.Hu
    M = 0.5 * (M + M.T)
    M_cho = scipy.linalg.cho_factor(M)
    HtQGamma = ops.Hu.T @ w.Qhat @ ops.Gamma

    if D.shape[1] > 0:
        DtMD = D.T @ M @ D
        DtMD_cho = scipy.linalg.cho_factor(0.5 * (DtMD + DtMD.T))
        proj = D @ scipy.linalg.cho_solve(DtMD_cho, D.T)
        Theta1 = np.eye(Nm) - proj @ M
        Theta2 = proj @ HtQGamma
    else:
        DtMD_cho = None
        Theta1 = np.eye(Nm)
        Theta2 = np.zeros((Nm, ops.n))

    Ginv = np.linalg.inv(ops.G)
    Theta3 = ops.BN.T @ Ginv @ ops.PhiN
    Theta4 = Theta1 @ Theta3 + Theta2
    Theta5 = ops.Gamma - ops.Hu @ Theta4
    T1BtGinv = Theta1 @ ops.BN.T @ Ginv
    Theta6 = T1BtGinv.T @ M @ T1BtGinv
    Theta7 = Theta4.T @ w.Rhat @ Theta4 + Theta5.T @ w.Qhat @ Theta5
    Theta8 = (Theta5.T @ w.Qhat @ ops.Hu - Theta4.T @ w.Rhat) @ Theta1 @ ops.BN.T @ Ginv

    Gm = ops.BN @ scipy.linalg.cho_solve(M_cho, ops.BN.T)
    Gm = 0.5 * (Gm + Gm.T)
    Gm_inv = np.linalg.inv(Gm)
    Gm_inv = 0.5 * (Gm_inv + Gm_inv.T)
    return ThetaSet(
        M=M,
        Theta1=Theta1,
        Theta2=Theta2,
        Theta3=Theta3,
        Theta4=Theta4,
        Theta5=Theta5,
        Theta6=0.5 * (Theta6 + Theta6.T),
        Theta7=0.5 * (Theta7 + Theta7.T),
        Theta8=Theta8,
        Ginv=Ginv,
        Gm=Gm,
        Gm_inv=Gm_inv,
        Gm_inv_sqrt=sqrtm_psd(Gm_inv),
        M_cho=M_cho,
        DtMD_cho=DtMD_cho,
    )


@dataclass(frozen=True)
class MeanSteerSolution:
    """Optimal feed-forward stack, its cost, and the equality multiplier."""

    Ubar: np.ndarray
    cost: float
    multiplier: np.ndarray


def mean_steer(ops, w, mu0, mud, thetas=None):
    """Steer the state mean from mu0 to mud at minimum quadratic cost.

    Solves the KKT system of the equality-constrained QP: with
    M = Rhat + Hu' Qhat Hu and g = Hu' Qhat (Gamma mu0 - Xref),

        multiplier = 2 (BN M^-1 BN')^-1 (BN M^-1 g + mud - Phi mu0)
        Ubar       = (1/2) M^-1 (BN' multiplier - 2 g).
    """
    if thetas is None:
        thetas = build_thetas(ops, w)
    mu0 = np.asarray(mu0, dtype=float).reshape(ops.n)
    mud = np.asarray(mud, dtype=float).reshape(ops.n)
    g = ops.Hu.T @ (w.Qhat @ (ops.Gamma @ mu0 - w.Xref))
    b = mud - ops.PhiN @ mu0
    lam = 2.0 * thetas.Gm_inv @ (ops.BN @ scipy.linalg.cho_solve(thetas.M_cho, g) + b)
    Ubar = 0.5 * scipy.linalg.cho_solve(thetas.M_cho, ops.BN.T @ lam - 2.0 * g)
    return MeanSteerSolution(Ubar=Ubar, cost=mean_cost(ops, w, Ubar, mu0), multiplier=lam)


def mean_cost_quadratic(ops, w, mu0, thetas):
    """Coefficients of mud -> optimal mean-steering cost as a quadratic.

    Returns (b, c0) with cost = ||Gm^{-1/2}(mud - b)||^2 + c0; the Hessian
    factor Gm^{-1/2} lives in `thetas`.
    """
    mu0 = np.asarray(mu0, dtype=float).reshape(ops.n)
    Y = ops.Gamma @ mu0 - w.Xref
    g = ops.Hu.T @ (w.Qhat @ Y)
    Minv_g = scipy.linalg.cho_solve(thetas.M_cho, g)
    b = ops.PhiN @ mu0 - ops.BN @ Minv_g
    c0 = float(Y @ w.Qhat @ Y - g @ Minv_g)
    return b, c0


@dataclass(frozen=True)
class CovSteerSolution:
    """Optimal feedback stack with its orthogonal/null-space factors."""

    L: np.ndarray
    cost: float
    T: np.ndarray
    Z: np.ndarray
    Omega: np.ndarray


def cov_steer(ops, w, Sigma0, Sigmad, thetas=None):
    """Steer the state covariance from Sigma0 to Sigmad at minimum cost.

    The terminal map Phi + BN L equals Sd^{1/2} T S0^{-1/2} by construction,
    so the covariance constraint holds exactly; T = -V U' from the SVD of
    Omega minimizes the trace term, and the optimal cost is the constant
    part minus twice the nuclear norm of Omega.
    """
    if thetas is None:
        thetas = build_thetas(ops, w)
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    Sigmad = np.atleast_2d(np.asarray(Sigmad, dtype=float))
    s0_half = sqrtm_psd(Sigma0)
    sd_half = sqrtm_psd(Sigmad)
    s0_half_inv = np.linalg.inv(s0_half)

    Omega = s0_half @ (thetas.Theta8 @ sd_half)
    try:
        U, sing, Vt = np.linalg.svd(Omega)
    except np.linalg.LinAlgError as exc:
        raise SvdFailure("SVD of the trace-term factor did not converge") from exc
    T = -(Vt.T @ U.T)

    W = ops.BN.T @ thetas.Ginv
    h = W @ (sd_half @ T @ s0_half_inv - ops.PhiN)
    if ops.D.shape[1] > 0:
        rhs = ops.D.T @ (thetas.M @ h + ops.Hu.T @ (w.Qhat @ ops.Gamma))
        Z = -scipy.linalg.cho_solve(thetas.DtMD_cho, rhs)
        L = h + ops.D @ Z
    else:
        Z = np.zeros((0, ops.n))
        L = h

    Zcal = W @ Sigmad @ W.T
    T1 = thetas.Theta1
    const = float(
        np.trace(w.Rhat @ (T1 @ Zcal @ T1.T + thetas.Theta4 @ Sigma0 @ thetas.Theta4.T))
        + np.trace(
            w.Qhat
            @ (ops.Hu @ T1 @ Zcal @ T1.T @ ops.Hu.T + thetas.Theta5 @ Sigma0 @ thetas.Theta5.T)
        )
    )
    cost = const - 2.0 * float(np.sum(sing))
    return CovSteerSolution(L=L, cost=cost, T=T, Z=Z, Omega=Omega)


def cov_steer_sdp_value(ops, w, Sigma0, Sigmad, thetas=None, tol=1e-9):
    """Optimal covariance-steering cost via the equivalent SDP.

    min tr(Theta6 Sd) + tr(Theta7 S0) + tr(L + L') over the single LMI
    [[Theta8 Sd Theta8', L], [L', S0]] >= 0.  Used as a cross-check of the
    closed form and as the template for the bilinear-program constraints.
    """
    if thetas is None:
        thetas = build_thetas(ops, w)
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    Sigmad = np.atleast_2d(np.asarray(Sigmad, dtype=float))
    n = ops.n
    prog = conic.ConicProgram()
    L = prog.matrix("L", n, n)
    corner = thetas.Theta8 @ Sigmad @ thetas.Theta8.T
    corner = 0.5 * (corner + corner.T)
    prog.add_psd(cp.bmat([[cp.Constant(corner), L], [L.T, cp.Constant(Sigma0)]]))
    offset = float(np.trace(thetas.Theta6 @ Sigmad) + np.trace(thetas.Theta7 @ Sigma0))
    prog.minimize(cp.trace(L + L.T) + offset)
    sol = conic.require_optimal(conic.solve_conic(prog, tol=tol), "covariance steering SDP")
    return sol.objective_value
