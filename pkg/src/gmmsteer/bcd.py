"""Block-coordinate descent for the soft, total-cost and step-cost
constrained mixture steering problems.

Each problem is a bilinear program: fixing the coupling weights makes the
remaining blocks a semidefinite program, and fixing those makes the coupling
update a linear program.  The SDP step optimizes terminal component
parameters together with epigraph values of the pairwise steering costs and
pairwise Wasserstein distances (both exact at optimality, re-tightened in
closed form after every solve); the LP step reassigns coupling mass.  The
constrained variants start from a slack feasibility phase, and the step
variant recovers realizable feedback gains from the relaxed covariance
variables at the end.
"""

import time
from dataclasses import dataclass, field
from enum import Enum

import cvxpy as cp
import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse

from . import conic
from .covariance import (
    build_thetas,
    cov_cost,
    cov_steer,
    mean_cost,
    mean_cost_quadratic,
    mean_steer,
)
from .exceptions import (
    InfeasibleStart,
    RecoveryFailure,
    SingularStepCovariance,
    SolverFailure,
)
from .gaussians import Gaussian, Gmm, sqrtm_psd, w2_gaussian
from .lti import CostWeights, build_operators
from .policy import GmmPolicy, predict_terminal, step_cost
from .transport import gmm_wasserstein

__all__ = [
    "BcdConfig",
    "BcdState",
    "BcdReport",
    "BcdStatus",
    "solve_soft",
    "solve_total",
    "solve_step",
    "recover_feedback",
    "check_feasibility",
    "FeasibilityCertificate",
]

_ACTIVE_TOL = 1e-9


class BcdStatus(Enum):
    Converged = "converged"
    MaxIter = "max_iter"
    InfeasibleStart = "infeasible_start"


@dataclass
class BcdConfig:
    """Iteration limits, convergence threshold, terminal component count.

    q defaults to max(r, t).  The seed drives the product-coupling
    initialization of the selection and transport weights.
    """

    max_iter: int = 100
    eps: float = 1e-5
    q: int = None
    seed: int = 0
    feasibility_max_iter: int = 50
    solver_tol: float = 1e-8

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.q is not None and self.q < 1:
            raise ValueError("q must be at least 1")


@dataclass
class BcdState:
    """Current iterate of the alternating scheme."""

    lambda_tilde: np.ndarray
    beta: np.ndarray
    p_N: np.ndarray
    mu_N: np.ndarray
    Sigma_N: np.ndarray
    C: np.ndarray = None
    T: np.ndarray = None
    L_blocks: dict = field(default_factory=dict)
    Y_blocks: dict = field(default_factory=dict)
    Ubar: dict = field(default_factory=dict)
    M_big: dict = field(default_factory=dict)
    Y_big: dict = field(default_factory=dict)
    Sigma_path: dict = field(default_factory=dict)


@dataclass
class BcdReport:
    objective_trace: list
    status: BcdStatus
    iterations: int
    policy: GmmPolicy = None
    terminal: Gmm = None
    w2_to_desired: float = None
    state: BcdState = None
    wall_time: float = None


# ---------------------------------------------------------------------------
# shared context


class _Context:
    def __init__(self, sys, w, initial, desired, cfg):
        self.sys = sys
        self.w = w
        self.initial = initial
        self.desired = desired
        self.cfg = cfg
        self.ops = build_operators(sys)
        self.thetas = build_thetas(self.ops, w)
        self.r = initial.size
        self.t = desired.size
        self.q = cfg.q if cfg.q is not None else max(self.r, self.t)
        self.n = sys.n
        self.mu0 = initial.means()
        self.S0 = initial.covs()
        self.mud = desired.means()
        self.Sd = desired.covs()
        # mean-steering cost as a quadratic in the terminal mean, per source i
        self.mean_b = np.empty((self.r, self.n))
        self.mean_c0 = np.empty(self.r)
        for i in range(self.r):
            self.mean_b[i], self.mean_c0[i] = mean_cost_quadratic(
                self.ops, w, self.mu0[i], self.thetas
            )

    def init_couplings(self):
        """Seeded product couplings; always satisfy the marginal constraints."""
        rng = np.random.default_rng(self.cfg.seed)
        u = rng.dirichlet(np.ones(self.q))
        lam_t = np.outer(self.initial.weights, u)
        p_N = lam_t.sum(axis=0)
        beta = np.outer(p_N, self.desired.weights)
        return lam_t, beta, p_N

    def candidate_targets(self):
        """Terminal component candidates seeded from the desired mixture."""
        mu = np.stack([self.mud[j % self.t] for j in range(self.q)])
        Sig = np.stack([self.Sd[j % self.t] for j in range(self.q)])
        return mu, Sig

    # closed-form epigraph values used to re-tighten after each SDP step
    def tight_C(self, mu_N, Sigma_N):
        C = np.empty((self.r, self.q))
        for j in range(self.q):
            sd_half = sqrtm_psd(Sigma_N[j])
            for i in range(self.r):
                dev = self.thetas.Gm_inv_sqrt @ (mu_N[j] - self.mean_b[i])
                mean_val = float(dev @ dev) + self.mean_c0[i]
                s0_half = self.s0_half[i]
                omega = s0_half @ self.thetas.Theta8 @ sd_half
                nuc = np.linalg.svd(omega, compute_uv=False).sum()
                cov_val = (
                    float(np.trace(self.thetas.Theta6 @ Sigma_N[j]))
                    + float(np.trace(self.thetas.Theta7 @ self.S0[i]))
                    - 2.0 * float(nuc)
                )
                C[i, j] = mean_val + cov_val
        return C

    def tight_T(self, mu_N, Sigma_N):
        T = np.empty((self.q, self.t))
        for jq in range(self.q):
            a = Gaussian(mu_N[jq], _pd_floor(Sigma_N[jq]))
            for jt in range(self.t):
                T[jq, jt] = w2_gaussian(a, self.desired.components[jt])
        return T

    @property
    def s0_half(self):
        if not hasattr(self, "_s0_half"):
            self._s0_half = [sqrtm_psd(S) for S in self.S0]
        return self._s0_half


def _pd_floor(S, floor_rel=1e-12):
    """Symmetrize and floor eigenvalues so the matrix is strictly PD."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    floor = floor_rel * max(1.0, w[-1])
    return (V * np.maximum(w, floor)) @ V.T


# ---------------------------------------------------------------------------
# SDP step for the soft and total variants


class _SoftSdp:
    """Compiled SDP over the non-coupling block, reused across iterations.

    mode is one of 'soft' (weighted cost + distance objective), 'total'
    (distance objective, cost budget constraint) or 'total_feas' (slack
    objective over the cost budget).
    """

    def __init__(self, ctx, mode, kappa=None):
        self.ctx = ctx
        self.mode = mode
        r, q, t, n = ctx.r, ctx.q, ctx.t, ctx.n
        prog = conic.ConicProgram()
        self.prog = prog
        self.lam_p = prog.parameter("lam", (r, q))
        self.beta_p = prog.parameter("beta", (q, t))
        C = prog.matrix("C", r, q)
        T = prog.matrix("T", q, t)
        mu = [prog.vector(f"mu_{j}", n) for j in range(q)]
        Sig = [prog.symmetric(f"Sig_{j}", n) for j in range(q)]
        L = {(i, j): prog.matrix(f"L_{i}_{j}", n, n) for i in range(r) for j in range(q)}
        Y = {(j, k): prog.matrix(f"Y_{j}_{k}", n, n) for j in range(q) for k in range(t)}

        I_n = np.eye(n)
        Wm = ctx.thetas.Gm_inv_sqrt
        for i in range(r):
            for j in range(q):
                # pairwise steering-cost epigraph: mean quadratic via Schur
                # complement plus the SDP form of the covariance cost
                dev = cp.reshape(Wm @ (mu[j] - ctx.mean_b[i]), (n, 1), order="C")
                corner = (
                    C[i, j]
                    - ctx.mean_c0[i]
                    - cp.trace(ctx.thetas.Theta6 @ Sig[j])
                    - float(np.trace(ctx.thetas.Theta7 @ ctx.S0[i]))
                    - cp.trace(L[(i, j)] + L[(i, j)].T)
                )
                prog.add_psd(
                    cp.bmat([[I_n, dev], [dev.T, cp.reshape(corner, (1, 1), order="C")]])
                )
                t8 = ctx.thetas.Theta8
                prog.add_psd(
                    cp.bmat([[t8 @ Sig[j] @ t8.T, L[(i, j)]], [L[(i, j)].T, ctx.S0[i]]])
                )
        for j in range(q):
            for k in range(t):
                # pairwise squared-Wasserstein epigraph
                dev = cp.reshape(ctx.mud[k] - mu[j], (n, 1), order="C")
                corner = (
                    T[j, k]
                    - cp.trace(Sig[j])
                    - float(np.trace(ctx.Sd[k]))
                    - cp.trace(Y[(j, k)] + Y[(j, k)].T)
                )
                prog.add_psd(
                    cp.bmat([[I_n, dev], [dev.T, cp.reshape(corner, (1, 1), order="C")]])
                )
                prog.add_psd(cp.bmat([[Sig[j], Y[(j, k)]], [Y[(j, k)].T, ctx.Sd[k]]]))

        cost_term = cp.sum(cp.multiply(self.lam_p, C))
        dist_term = cp.sum(cp.multiply(self.beta_p, T))
        if mode == "soft":
            prog.minimize(cost_term + kappa * dist_term)
        elif mode == "total":
            prog.add_nonneg(kappa - cost_term)
            prog.minimize(dist_term)
        elif mode == "total_feas":
            slack = prog.scalar("slack")
            prog.add_nonneg(slack - cost_term)
            prog.minimize(slack)
        else:
            raise ValueError(mode)
        self._names_mu = [f"mu_{j}" for j in range(q)]
        self._names_Sig = [f"Sig_{j}" for j in range(q)]

    def solve(self, lam_t, beta):
        self.prog.set_parameter("lam", lam_t)
        self.prog.set_parameter("beta", beta)
        sol = conic.solve_conic(self.prog, tol=self.ctx.cfg.solver_tol)
        conic.require_optimal(sol, f"{self.mode} SDP step")
        mu = np.stack([np.asarray(sol[name]).reshape(-1) for name in self._names_mu])
        Sig = np.stack([0.5 * (sol[name] + sol[name].T) for name in self._names_Sig])
        return sol, mu, Sig


def _lp_step(ctx, c_lam, c_beta, extra_ub=None, minimize_slack=False):
    """Coupling update: an LP over (lambda_tilde, beta, p_N [, slack]).

    Equality rows encode the four marginal constraints; `extra_ub` rows are
    (coeffs over lambda, rhs) pairs for budget constraints.  When
    minimize_slack is set the budget right-hand sides become a shared slack
    variable which is minimized instead of the bilinear objective.
    """
    r, q, t = ctx.r, ctx.q, ctx.t
    n_lam, n_beta = r * q, q * t
    n_var = n_lam + n_beta + q + (1 if minimize_slack else 0)

    rows, cols, vals = [], [], []
    b_eq = []
    row = 0
    for i in range(r):  # lambda row sums = p0
        for j in range(q):
            rows.append(row), cols.append(i * q + j), vals.append(1.0)
        b_eq.append(ctx.initial.weights[i])
        row += 1
    for j in range(q):  # lambda column sums = p_N
        for i in range(r):
            rows.append(row), cols.append(i * q + j), vals.append(1.0)
        rows.append(row), cols.append(n_lam + n_beta + j), vals.append(-1.0)
        b_eq.append(0.0)
        row += 1
    for j in range(q):  # beta row sums = p_N
        for k in range(t):
            rows.append(row), cols.append(n_lam + j * t + k), vals.append(1.0)
        rows.append(row), cols.append(n_lam + n_beta + j), vals.append(-1.0)
        b_eq.append(0.0)
        row += 1
    for k in range(t):  # beta column sums = p_d
        for j in range(q):
            rows.append(row), cols.append(n_lam + j * t + k), vals.append(1.0)
        b_eq.append(ctx.desired.weights[k])
        row += 1
    A_eq = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(row, n_var))

    A_ub = None
    b_ub = None
    if extra_ub:
        u_rows, u_cols, u_vals, b_ub = [], [], [], []
        for ridx, (coeffs, rhs) in enumerate(extra_ub):
            flat = np.asarray(coeffs, dtype=float).reshape(-1)
            for k, val in enumerate(flat):
                if val != 0.0:
                    u_rows.append(ridx), u_cols.append(k), u_vals.append(val)
            if minimize_slack:
                u_rows.append(ridx), u_cols.append(n_var - 1), u_vals.append(-1.0)
                b_ub.append(0.0)
            else:
                b_ub.append(rhs)
        A_ub = scipy.sparse.coo_matrix((u_vals, (u_rows, u_cols)), shape=(len(extra_ub), n_var))
        b_ub = np.array(b_ub)

    c = np.zeros(n_var)
    if minimize_slack:
        c[-1] = 1.0
    else:
        c[:n_lam] = np.asarray(c_lam, dtype=float).reshape(-1)
        c[n_lam:n_lam + n_beta] = np.asarray(c_beta, dtype=float).reshape(-1)

    res = scipy.optimize.linprog(
        c, A_eq=A_eq, b_eq=np.array(b_eq), A_ub=A_ub, b_ub=b_ub,
        bounds=(0, None), method="highs",
    )
    if not res.success:
        raise SolverFailure(f"coupling LP failed: {res.message}", status=res.status)
    x = res.x
    lam_t = np.clip(x[:n_lam].reshape(r, q), 0.0, None)
    beta = np.clip(x[n_lam:n_lam + n_beta].reshape(q, t), 0.0, None)
    p_N = lam_t.sum(axis=0)
    slack = float(x[-1]) if minimize_slack else None
    return lam_t, beta, p_N, slack


def _converged(f_prev, f, eps):
    if f <= eps:
        return True
    return f_prev is not None and (f_prev - f) / max(abs(f), 1e-300) <= eps


def _extract_policy(ctx, lam_t, mu_N, Sigma_N, blocks=None):
    """Assemble the randomized policy from a converged iterate.

    Selection weights are the coupling rows normalized by the source weights
    (zero-weight rows become uniform); affine blocks default to the
    closed-form optimal steering laws onto the achieved terminal components.
    """
    r, q = ctx.r, ctx.q
    p0 = ctx.initial.weights
    lam = np.full((r, q), 1.0 / q)
    live = p0 > 0.0
    lam[live] = lam_t[live] / p0[live, None]
    # guard round-off: renormalize rows onto the simplex
    lam = np.clip(lam, 0.0, None)
    lam /= lam.sum(axis=1, keepdims=True)

    Ubar, L = {}, {}
    targets = [(_pd_floor(Sigma_N[j]), mu_N[j]) for j in range(q)]
    for i in range(r):
        for j in range(q):
            if blocks is not None and (i, j) in blocks:
                Ubar[(i, j)], L[(i, j)] = blocks[(i, j)]
                continue
            Sd_j, mud_j = targets[j]
            ms = mean_steer(ctx.ops, ctx.w, ctx.mu0[i], mud_j, ctx.thetas)
            cs = cov_steer(ctx.ops, ctx.w, ctx.S0[i], Sd_j, ctx.thetas)
            Ubar[(i, j)], L[(i, j)] = ms.Ubar, cs.L
    return GmmPolicy(
        source=ctx.initial, lam=lam, Ubar=Ubar, L=L,
        horizon=ctx.sys.N, n=ctx.sys.n, m=ctx.sys.m,
    )


def _finish(ctx, trace, status, iterations, lam_t, beta, p_N, mu_N, Sigma_N,
            state, blocks=None, t0=None):
    policy = _extract_policy(ctx, lam_t, mu_N, Sigma_N, blocks)
    terminal = predict_terminal(policy, ctx.initial, ctx.ops, tol=1e-4).gmm
    w2, _ = gmm_wasserstein(terminal, ctx.desired)
    return BcdReport(
        objective_trace=trace,
        status=status,
        iterations=iterations,
        policy=policy,
        terminal=terminal,
        w2_to_desired=w2,
        state=state,
        wall_time=None if t0 is None else time.perf_counter() - t0,
    )


def _warm_couplings_total(ctx, kappa):
    """Assignment-seeded coupling start for the budgeted alternation.

    The symmetric product coupling is a fixpoint of the alternation whenever
    the budget is slack (every terminal target collapses onto the barycenter
    of the desired components), so phase 2 is seeded by the coupling LP
    evaluated at closed-form costs onto the desired components themselves.
    Returns None when that LP is infeasible under the budget.
    """
    mu, Sig = ctx.candidate_targets()
    C0 = ctx.tight_C(mu, Sig)
    T0 = ctx.tight_T(mu, Sig)
    try:
        lam_t, beta, p_N, _ = _lp_step(ctx, np.zeros_like(C0), T0, extra_ub=[(C0, kappa)])
    except SolverFailure:
        return None
    return lam_t, beta, p_N


def _warm_couplings_step(ctx, kappas, with_budget=True):
    """Assignment-seeded coupling start for the stage-budgeted alternation.

    With with_budget the seeding LP carries the stage budgets evaluated at
    the closed-form (minimum total energy) blocks; those spread effort
    unevenly across stages, so near the feasibility boundary the LP can be
    infeasible even though a budget-respecting block exists — the caller then
    retries without budget rows and lets the first SDP arbitrate.
    """
    mu, Sig = ctx.candidate_targets()
    T0 = ctx.tight_T(mu, Sig)
    rows = None
    if with_budget:
        vals = np.zeros((ctx.r, ctx.q, ctx.ops.N))
        for i in range(ctx.r):
            for j in range(ctx.q):
                ms = mean_steer(ctx.ops, ctx.w, ctx.mu0[i], mu[j], ctx.thetas)
                cs = cov_steer(ctx.ops, ctx.w, ctx.S0[i], _pd_floor(Sig[j]), ctx.thetas)
                for k in range(ctx.ops.N):
                    vals[i, j, k] = step_cost(
                        ms.Ubar, cs.L, ctx.mu0[i], ctx.S0[i], ctx.ops, ctx.w, k
                    ) / kappas[k]
        rows = [(vals[:, :, k], 1.0) for k in range(ctx.ops.N)]
    try:
        lam_t, beta, p_N, _ = _lp_step(ctx, np.zeros((ctx.r, ctx.q)), T0, extra_ub=rows)
    except SolverFailure:
        return None
    return lam_t, beta, p_N


# ---------------------------------------------------------------------------
# soft variant


def solve_soft(sys, w, initial, desired, kappa, cfg=None):
    """Minimize expected cost + kappa * squared mixture-Wasserstein distance.

    Alternates the terminal-parameter SDP and the coupling LP until the
    relative objective decrease drops below cfg.eps.  Returns (policy, report).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    cfg = cfg or BcdConfig()
    ctx = _Context(sys, w, initial, desired, cfg)
    t0 = time.perf_counter()
    sdp = _SoftSdp(ctx, "soft", kappa=kappa)
    lam_t, beta, p_N = ctx.init_couplings()

    trace = []
    f_prev = None
    status = BcdStatus.MaxIter
    mu_N = Sigma_N = None
    iterations = 0
    for it in range(cfg.max_iter):
        iterations = it + 1
        _, mu_N, Sigma_N = sdp.solve(lam_t, beta)
        C = ctx.tight_C(mu_N, Sigma_N)
        T = ctx.tight_T(mu_N, Sigma_N)
        lam_t, beta, p_N, _ = _lp_step(ctx, C, kappa * T)
        f = float(np.sum(lam_t * C) + kappa * np.sum(beta * T))
        trace.append(f)
        if _converged(f_prev, f, cfg.eps):
            status = BcdStatus.Converged
            break
        f_prev = f

    state = BcdState(lambda_tilde=lam_t, beta=beta, p_N=p_N, mu_N=mu_N,
                     Sigma_N=Sigma_N, C=C, T=T)
    report = _finish(ctx, trace, status, iterations, lam_t, beta, p_N, mu_N,
                     Sigma_N, state, t0=t0)
    return report.policy, report


# ---------------------------------------------------------------------------
# step-cost constrained variant


class _StepSdp:
    """Compiled SDP block for the per-step constrained problem.

    Covariance assignments are convexified through the relaxed second-moment
    variables (Y_big = L Sigma0, M_big >= Y_big Sigma0^-1 Y_big'); the path
    covariance blocks entering the stage costs are affine in those.  Stage
    costs are normalized by their budgets so every right-hand side is 1 (or a
    shared slack during the feasibility phase).
    """

    def __init__(self, ctx, kappas, feas=False):
        self.ctx = ctx
        self.feas = feas
        ops, w = ctx.ops, ctx.w
        r, q, t, n = ctx.r, ctx.q, ctx.t, ctx.n
        N, m = ops.N, ops.m
        Nm = N * m
        kappas = np.asarray(kappas, dtype=float).reshape(N)
        if np.any(kappas <= 0):
            raise ValueError("all stage budgets must be positive")
        self.kappas = kappas

        prog = conic.ConicProgram()
        self.prog = prog
        self.lam_p = prog.parameter("lam", (r, q))
        self.beta_p = prog.parameter("beta", (q, t))
        T = prog.matrix("T", q, t)
        mu = [prog.vector(f"mu_{j}", n) for j in range(q)]
        Sig = [prog.symmetric(f"Sig_{j}", n) for j in range(q)]
        Yw = {(j, k): prog.matrix(f"Yw_{j}_{k}", n, n) for j in range(q) for k in range(t)}
        Ubar = {(i, j): prog.vector(f"Ubar_{i}_{j}", Nm) for i in range(r) for j in range(q)}
        Mb = {(i, j): prog.symmetric(f"M_{i}_{j}", Nm) for i in range(r) for j in range(q)}
        Yb = {(i, j): prog.matrix(f"Yb_{i}_{j}", Nm, n) for i in range(r) for j in range(q)}
        slack = prog.scalar("slack") if feas else None

        Phi, BN, Gam, Hu = ops.PhiN, ops.BN, ops.Gamma, ops.Hu
        I_n = np.eye(n)
        # per-stage selector products and normalized weight factors
        Rt_half = [sqrtm_psd(w.R[k] / kappas[k]) for k in range(N)]
        Qt = [w.Q[k] / kappas[k] for k in range(N)]
        Qt_half = [sqrtm_psd(Qk) for Qk in Qt]
        Gam_k = [ops.state_selector(k) @ Gam for k in range(N)]
        Hu_k = [ops.state_selector(k) @ Hu for k in range(N)]

        stage_terms = {k: [] for k in range(N)}
        for i in range(r):
            S0i = ctx.S0[i]
            mu0i = ctx.mu0[i]
            for j in range(q):
                U, M, Yg = Ubar[(i, j)], Mb[(i, j)], Yb[(i, j)]
                prog.add_equality(mu[j] - (Phi @ mu0i + BN @ U))
                cross = Phi @ Yg.T @ BN.T
                prog.add_equality(
                    Sig[j] - (Phi @ S0i @ Phi.T + cross + cross.T + BN @ M @ BN.T)
                )
                prog.add_psd(cp.bmat([[M, Yg], [Yg.T, S0i]]))
                for k in range(N):
                    # stage input terms: mean-energy epigraph + covariance trace
                    vu = cp.reshape(Rt_half[k] @ U[k * m:(k + 1) * m], (m, 1), order="C")
                    su = prog.scalar(f"su_{i}_{j}_{k}")
                    prog.add_psd(
                        cp.bmat([[np.eye(m), vu],
                                 [vu.T, cp.reshape(su, (1, 1), order="C")]])
                    )
                    Pu = ops.input_selector(k)
                    RtPu = (Pu.T @ (w.R[k] / kappas[k]) @ Pu)
                    term = su + cp.sum(cp.multiply(RtPu, M))
                    if np.any(Qt[k]):
                        # stage state terms via the path covariance block
                        vx = cp.reshape(
                            Qt_half[k] @ (Gam_k[k] @ mu0i + Hu_k[k] @ U - w.x_ref[k]),
                            (n, 1), order="C",
                        )
                        sx = prog.scalar(f"sx_{i}_{j}_{k}")
                        prog.add_psd(
                            cp.bmat([[I_n, vx],
                                     [vx.T, cp.reshape(sx, (1, 1), order="C")]])
                        )
                        const = float(np.trace(Qt[k] @ Gam_k[k] @ S0i @ Gam_k[k].T))
                        cross_coef = 2.0 * (Hu_k[k].T @ Qt[k] @ Gam_k[k])
                        quad_coef = Hu_k[k].T @ Qt[k] @ Hu_k[k]
                        term = term + sx + const
                        term = term + cp.sum(cp.multiply(cross_coef, Yg))
                        term = term + cp.sum(cp.multiply(quad_coef, M))
                    stage_terms[k].append((i, j, term))
        for k in range(N):
            total = sum(self.lam_p[i, j] * term for i, j, term in stage_terms[k])
            if feas:
                prog.add_nonneg(slack - total)
            else:
                prog.add_nonneg(1.0 - total)

        for j in range(q):
            for k in range(t):
                dev = cp.reshape(ctx.mud[k] - mu[j], (n, 1), order="C")
                corner = (
                    T[j, k]
                    - cp.trace(Sig[j])
                    - float(np.trace(ctx.Sd[k]))
                    - cp.trace(Yw[(j, k)] + Yw[(j, k)].T)
                )
                prog.add_psd(
                    cp.bmat([[I_n, dev], [dev.T, cp.reshape(corner, (1, 1), order="C")]])
                )
                prog.add_psd(cp.bmat([[Sig[j], Yw[(j, k)]], [Yw[(j, k)].T, ctx.Sd[k]]]))

        if feas:
            prog.minimize(slack)
        else:
            prog.minimize(cp.sum(cp.multiply(self.beta_p, T)))

    def solve(self, lam_t, beta):
        self.prog.set_parameter("lam", lam_t)
        self.prog.set_parameter("beta", beta)
        sol = conic.solve_conic(self.prog, tol=self.ctx.cfg.solver_tol)
        conic.require_optimal(sol, "step SDP")
        ctx = self.ctx
        mu = np.stack([np.asarray(sol[f"mu_{j}"]).reshape(-1) for j in range(ctx.q)])
        Sig = np.stack(
            [0.5 * (sol[f"Sig_{j}"] + sol[f"Sig_{j}"].T) for j in range(ctx.q)]
        )
        Ubar = {k: np.asarray(sol[f"Ubar_{k[0]}_{k[1]}"]).reshape(-1)
                for k in self._pairs()}
        Mb = {k: 0.5 * (sol[f"M_{k[0]}_{k[1]}"] + sol[f"M_{k[0]}_{k[1]}"].T)
              for k in self._pairs()}
        Yb = {k: np.asarray(sol[f"Yb_{k[0]}_{k[1]}"]) for k in self._pairs()}
        return sol, mu, Sig, Ubar, Mb, Yb

    def _pairs(self):
        return [(i, j) for i in range(self.ctx.r) for j in range(self.ctx.q)]


def _stage_values(ctx, kappas, Ubar, Mb, Yb):
    """Normalized stage-cost value of every (i, j) block at every stage."""
    ops, w = ctx.ops, ctx.w
    N, m = ops.N, ops.m
    vals = np.zeros((ctx.r, ctx.q, N))
    for (i, j), U in Ubar.items():
        M, Yg = Mb[(i, j)], Yb[(i, j)]
        S0i, mu0i = ctx.S0[i], ctx.mu0[i]
        for k in range(N):
            Pu = ops.input_selector(k)
            Px = ops.state_selector(k)
            Rt = w.R[k] / kappas[k]
            uk = Pu @ U
            v = float(uk @ Rt @ uk + np.trace(Rt @ Pu @ M @ Pu.T))
            Qt = w.Q[k] / kappas[k]
            if np.any(Qt):
                Gk = Px @ ops.Gamma
                Hk = Px @ ops.Hu
                xk = Gk @ mu0i + Hk @ U - w.x_ref[k]
                block = (
                    Gk @ S0i @ Gk.T + Gk @ Yg.T @ Hk.T + Hk @ Yg @ Gk.T + Hk @ M @ Hk.T
                )
                v += float(xk @ Qt @ xk + np.trace(Qt @ block))
            vals[i, j, k] = v
    return vals


class _StepTighten:
    """Minimum-energy re-solve at fixed couplings and terminal targets.

    The alternation's objective never penalizes the relaxed second moments,
    so they can retain slack; this pass minimizes the true expected quadratic
    cost subject to the converged targets and stage budgets, which drives the
    relaxation tight wherever a deterministic feedback realization exists.
    """

    def __init__(self, ctx, kappas):
        self.ctx = ctx
        self.kappas = np.asarray(kappas, dtype=float).reshape(ctx.ops.N)

    def solve(self, lam_t, mu_N, Sigma_N):
        ctx, kappas = self.ctx, self.kappas
        ops, w = ctx.ops, ctx.w
        r, q, n = ctx.r, ctx.q, ctx.n
        N, m = ops.N, ops.m
        Nm = N * m
        Phi, BN, Gam, Hu = ops.PhiN, ops.BN, ops.Gamma, ops.Hu

        prog = conic.ConicProgram()
        Ubar = {(i, j): prog.vector(f"Ubar_{i}_{j}", Nm) for i in range(r) for j in range(q)}
        Mb = {(i, j): prog.symmetric(f"M_{i}_{j}", Nm) for i in range(r) for j in range(q)}
        Yb = {(i, j): prog.matrix(f"Yb_{i}_{j}", Nm, n) for i in range(r) for j in range(q)}

        M_half = sqrtm_psd(ctx.thetas.M)
        HtQH = Hu.T @ w.Qhat @ Hu
        HtQG = Hu.T @ w.Qhat @ Gam
        Rt_half = [sqrtm_psd(w.R[k] / kappas[k]) for k in range(N)]
        Qt = [w.Q[k] / kappas[k] for k in range(N)]
        Qt_half = [sqrtm_psd(Qk) for Qk in Qt]
        Gam_k = [ops.state_selector(k) @ Gam for k in range(N)]
        Hu_k = [ops.state_selector(k) @ Hu for k in range(N)]

        objective = 0.0
        stage_totals = {k: 0.0 for k in range(N)}
        weights = np.maximum(lam_t, 1e-6)
        for i in range(r):
            S0i, mu0i = ctx.S0[i], ctx.mu0[i]
            g_i = Hu.T @ (w.Qhat @ (Gam @ mu0i - w.Xref))
            v_i = scipy.linalg.cho_solve(ctx.thetas.M_cho, g_i)
            for j in range(q):
                U, M, Yg = Ubar[(i, j)], Mb[(i, j)], Yb[(i, j)]
                prog.add_equality(BN @ U - (mu_N[j] - Phi @ mu0i))
                cross = Phi @ Yg.T @ BN.T
                prog.add_equality(
                    cp.Constant(Sigma_N[j]) - (Phi @ S0i @ Phi.T + cross + cross.T + BN @ M @ BN.T)
                )
                prog.add_psd(cp.bmat([[M, Yg], [Yg.T, S0i]]))
                # true quadratic cost: mean epigraph + relaxed covariance traces
                tm = prog.scalar(f"tmean_{i}_{j}")
                vm = cp.reshape(M_half @ (U + v_i), (Nm, 1), order="C")
                prog.add_psd(
                    cp.bmat([[np.eye(Nm), vm], [vm.T, cp.reshape(tm, (1, 1), order="C")]])
                )
                cov_cost_expr = (
                    cp.sum(cp.multiply(w.Rhat + HtQH, M))
                    + 2.0 * cp.sum(cp.multiply(HtQG, Yg))
                    + float(np.trace(w.Qhat @ Gam @ S0i @ Gam.T))
                )
                objective = objective + weights[i, j] * (tm + cov_cost_expr)
                for k in range(N):
                    vu = cp.reshape(Rt_half[k] @ U[k * m:(k + 1) * m], (m, 1), order="C")
                    su = prog.scalar(f"su_{i}_{j}_{k}")
                    prog.add_psd(
                        cp.bmat([[np.eye(m), vu], [vu.T, cp.reshape(su, (1, 1), order="C")]])
                    )
                    Pu = ops.input_selector(k)
                    term = su + cp.sum(cp.multiply(Pu.T @ (w.R[k] / kappas[k]) @ Pu, M))
                    if np.any(Qt[k]):
                        vx = cp.reshape(
                            Qt_half[k] @ (Gam_k[k] @ mu0i + Hu_k[k] @ U - w.x_ref[k]),
                            (n, 1), order="C",
                        )
                        sx = prog.scalar(f"sx_{i}_{j}_{k}")
                        prog.add_psd(
                            cp.bmat([[np.eye(n), vx], [vx.T, cp.reshape(sx, (1, 1), order="C")]])
                        )
                        term = (
                            term + sx
                            + float(np.trace(Qt[k] @ Gam_k[k] @ S0i @ Gam_k[k].T))
                            + cp.sum(cp.multiply(2.0 * (Hu_k[k].T @ Qt[k] @ Gam_k[k]), Yg))
                            + cp.sum(cp.multiply(Hu_k[k].T @ Qt[k] @ Hu_k[k], M))
                        )
                    stage_totals[k] = stage_totals[k] + lam_t[i, j] * term
        for k in range(N):
            prog.add_nonneg(1.0 + 1e-9 - stage_totals[k])
        prog.minimize(objective)
        sol = conic.solve_conic(prog, tol=ctx.cfg.solver_tol)
        if sol.status is not conic.ConicStatus.Optimal:
            return None
        U = {(i, j): np.asarray(sol[f"Ubar_{i}_{j}"]).reshape(-1)
             for i in range(r) for j in range(q)}
        M = {(i, j): 0.5 * (sol[f"M_{i}_{j}"] + sol[f"M_{i}_{j}"].T)
             for i in range(r) for j in range(q)}
        Y = {(i, j): np.asarray(sol[f"Yb_{i}_{j}"]) for i in range(r) for j in range(q)}
        return U, M, Y


def recover_feedback(sigma_path, sys, w, tol=1e-9):
    """Recover per-step feedback gains from a path covariance.

    For each stage the minimum-input-energy one-step realization
    (M_k, Y_k) of the covariance transition is found by a small SDP, the gain
    is K_k = Y_k (Sigma^k)^-1, and the initial-state parametrization is
    L_k = K_k (A_{k-1} + B_{k-1} K_{k-1}) ... (A_0 + B_0 K_0).
    Returns the stacked (Nm, n) feedback matrix.
    """
    N, n, m = sys.N, sys.n, sys.m
    sigma_path = np.asarray(sigma_path, dtype=float)
    blocks = [sigma_path[k * n:(k + 1) * n, k * n:(k + 1) * n] for k in range(N + 1)]
    Ks = []
    for k in range(N):
        Sk = 0.5 * (blocks[k] + blocks[k].T)
        Sk1 = 0.5 * (blocks[k + 1] + blocks[k + 1].T)
        eigs = np.linalg.eigvalsh(Sk)
        if eigs[0] <= tol * max(1.0, eigs[-1]):
            raise SingularStepCovariance(f"path covariance block {k} is singular")
        prog = conic.ConicProgram()
        Mk = prog.symmetric("M", m)
        Yk = prog.matrix("Y", m, n)
        A, B = sys.A[k], sys.B[k]
        cross = A @ Yk.T @ B.T
        prog.add_equality(
            cp.Constant(Sk1) - (A @ Sk @ A.T + cross + cross.T + B @ Mk @ B.T)
        )
        prog.add_psd(cp.bmat([[Mk, Yk], [Yk.T, cp.Constant(Sk)]]))
        prog.minimize(cp.trace(w.R[k] @ Mk))
        sol = conic.solve_conic(prog, tol=1e-10)
        conic.require_optimal(sol, f"feedback recovery stage {k}")
        Ks.append(np.asarray(sol["Y"]).reshape(m, n) @ np.linalg.inv(Sk))

    L_rows = []
    prod = np.eye(n)  # running product of closed-loop maps
    for k in range(N):
        L_rows.append(Ks[k] @ prod)
        prod = (sys.A[k] + sys.B[k] @ Ks[k]) @ prod
    return np.vstack(L_rows)


def _step_blocks(ctx, lam_t, mu_N, Sigma_N, Ubar, Mb, Yb):
    """Turn the relaxed step-variant variables into policy blocks.

    Active pairs use the naive L = Y Sigma0^-1 when the joint-moment
    relaxation is tight, and the per-stage recovery otherwise; inactive pairs
    fall back to the closed-form steering laws onto the achieved targets.
    """
    ops, w, sys = ctx.ops, ctx.w, ctx.sys
    blocks = {}
    paths = {}
    for (i, j), U in Ubar.items():
        if lam_t[i, j] <= _ACTIVE_TOL:
            continue
        S0 = ctx.S0[i]
        M, Yg = Mb[(i, j)], Yb[(i, j)]
        gap = M - Yg @ np.linalg.solve(S0, Yg.T)
        slack = float(np.linalg.eigvalsh(0.5 * (gap + gap.T))[-1])
        if slack <= 1e-6 * max(1.0, np.abs(M).max()):
            L = Yg @ np.linalg.inv(S0)
        else:
            path = (
                ops.Gamma @ S0 @ ops.Gamma.T
                + ops.Gamma @ Yg.T @ ops.Hu.T
                + ops.Hu @ Yg @ ops.Gamma.T
                + ops.Hu @ M @ ops.Hu.T
            )
            paths[(i, j)] = path
            L = recover_feedback(path, sys, w)
        H = ops.PhiN + ops.BN @ L
        resid = H @ S0 @ H.T - Sigma_N[j]
        scale = max(1.0, np.abs(Sigma_N[j]).max())
        if np.abs(resid).max() > 1e-3 * scale:
            raise RecoveryFailure(
                f"recovered feedback for pair {(i, j)} misses the terminal "
                f"covariance by {np.abs(resid).max():.2e}"
            )
        blocks[(i, j)] = (U, L)
    return blocks, paths


def solve_step(sys, w, initial, desired, kappas, cfg=None):
    """Minimize the squared mixture-Wasserstein distance under per-stage
    expected-cost budgets kappas (length N).

    Runs the slack feasibility phase, the budgeted alternation, a
    minimum-energy tightening pass at the converged targets, and feedback
    recovery.  Returns (policy, report).
    """
    cfg = cfg or BcdConfig()
    ctx = _Context(sys, w, initial, desired, cfg)
    t0 = time.perf_counter()
    kappas = np.asarray(kappas, dtype=float).reshape(sys.N)
    lam_t, beta, p_N = ctx.init_couplings()

    sdp_feas = _StepSdp(ctx, kappas, feas=True)
    feasible = False
    for _ in range(cfg.feasibility_max_iter):
        _, mu_N, Sigma_N, Ubar, Mb, Yb = sdp_feas.solve(lam_t, beta)
        vals = _stage_values(ctx, kappas, Ubar, Mb, Yb)
        worst = max(
            float(np.sum(lam_t * vals[:, :, k])) for k in range(sys.N)
        )
        if worst <= 1.0:
            feasible = True
            break
        rows = [(vals[:, :, k], 1.0) for k in range(sys.N)]
        lam_t, beta, p_N, slack = _lp_step(
            ctx, None, None, extra_ub=rows, minimize_slack=True
        )
        if slack is not None and slack <= 1.0:
            feasible = True
            break
    if not feasible:
        report = BcdReport(objective_trace=[], status=BcdStatus.InfeasibleStart,
                           iterations=0, wall_time=time.perf_counter() - t0)
        raise InfeasibleStart("slack phase could not satisfy the stage budgets",
                              report=report)

    # phase 2 start: assignment seeding with the feasibility iterate as the
    # last resort (the product coupling is a merged-target fixpoint when the
    # budgets are slack)
    starts = [(lam_t, beta, p_N)]
    marginal_warm = _warm_couplings_step(ctx, kappas, with_budget=False)
    if marginal_warm is not None:
        starts.insert(0, marginal_warm)
    budgeted_warm = _warm_couplings_step(ctx, kappas, with_budget=True)
    if budgeted_warm is not None:
        starts.insert(0, budgeted_warm)

    sdp = _StepSdp(ctx, kappas, feas=False)
    last_error = None
    for lam_t, beta, p_N in starts:
        trace = []
        f_prev = None
        status = BcdStatus.MaxIter
        iterations = 0
        try:
            for it in range(cfg.max_iter):
                iterations = it + 1
                _, mu_N, Sigma_N, Ubar, Mb, Yb = sdp.solve(lam_t, beta)
                T = ctx.tight_T(mu_N, Sigma_N)
                vals = _stage_values(ctx, kappas, Ubar, Mb, Yb)
                rows = [(vals[:, :, k], 1.0) for k in range(sys.N)]
                lam_t, beta, p_N, _ = _lp_step(
                    ctx, np.zeros((ctx.r, ctx.q)), T, extra_ub=rows
                )
                f = float(np.sum(beta * T))
                trace.append(f)
                if _converged(f_prev, f, cfg.eps):
                    status = BcdStatus.Converged
                    break
                f_prev = f
            last_error = None
            break
        except SolverFailure as exc:
            # a seeded coupling can make the fixed-lambda SDP infeasible;
            # retry from the next (always-feasible) start
            last_error = exc
    if last_error is not None:
        raise last_error

    tightened = _StepTighten(ctx, kappas).solve(lam_t, mu_N, Sigma_N)
    if tightened is not None:
        Ubar, Mb, Yb = tightened
    blocks, paths = _step_blocks(ctx, lam_t, mu_N, Sigma_N, Ubar, Mb, Yb)
    state = BcdState(lambda_tilde=lam_t, beta=beta, p_N=p_N, mu_N=mu_N,
                     Sigma_N=Sigma_N, T=T, Ubar=Ubar, M_big=Mb, Y_big=Yb,
                     Sigma_path=paths)
    report = _finish(ctx, trace, status, iterations, lam_t, beta, p_N, mu_N,
                     Sigma_N, state, blocks=blocks, t0=t0)
    return report.policy, report


# ---------------------------------------------------------------------------
# feasibility certificate (sufficient condition)


@dataclass
class FeasibilityCertificate:
    sufficient: bool
    witnesses: dict
    margins: np.ndarray


def check_feasibility(sys, w, initial, kappa=None, kappas=None, mode="total", q=None):
    """Sufficient feasibility test for the constrained variants.

    For each source component the unconstrained (free-terminal) minimizer of
    the relevant quadratic cost is used as a witness; if every witness meets
    the budget (total cost under kappa, or every stage cost under its
    kappa_k), the constrained problem is feasible whenever q >= r.  A False
    result is inconclusive.
    """
    r = initial.size
    if q is not None and q < r:
        raise ValueError("the sufficient condition requires q >= r terminal components")
    ops = build_operators(sys)
    if mode == "total":
        weights = w
        if kappa is None:
            raise ValueError("mode 'total' needs kappa")
    elif mode == "step":
        if kappas is None:
            raise ValueError("mode 'step' needs kappas")
        kappas = np.asarray(kappas, dtype=float).reshape(sys.N)
        weights = CostWeights(
            Q=[w.Q[k] / kappas[k] for k in range(sys.N)] + [np.zeros((sys.n, sys.n))],
            R=[w.R[k] / kappas[k] for k in range(sys.N)],
            x_ref=w.x_ref,
        )
    else:
        raise ValueError(mode)

    M = weights.Rhat + ops.Hu.T @ weights.Qhat @ ops.Hu
    M_cho = scipy.linalg.cho_factor(0.5 * (M + M.T))
    HtQG = ops.Hu.T @ weights.Qhat @ ops.Gamma
    witnesses = {}
    margins = []
    ok = True
    for i in range(r):
        mu_i = initial.components[i].mean
        S_i = initial.components[i].cov
        g = ops.Hu.T @ (weights.Qhat @ (ops.Gamma @ mu_i - weights.Xref))
        U_i = -scipy.linalg.cho_solve(M_cho, g)
        L_i = -scipy.linalg.cho_solve(M_cho, HtQG)
        witnesses[i] = (U_i, L_i)
        if mode == "total":
            cost = mean_cost(ops, w, U_i, mu_i) + cov_cost(ops, w, L_i, S_i)
            margins.append(kappa - cost)
            ok = ok and cost <= kappa
        else:
            worst = -np.inf
            for k in range(sys.N):
                hk = step_cost(U_i, L_i, mu_i, S_i, ops, w, k)
                worst = max(worst, hk - kappas[k])
            margins.append(-worst)
            ok = ok and worst <= 0.0
    return FeasibilityCertificate(sufficient=ok, witnesses=witnesses,
                                  margins=np.array(margins))



def solve_total(sys, w, initial, desired, kappa, cfg=None):
    """Minimize the squared mixture-Wasserstein distance under a total
    expected-cost budget kappa.

    Phase 1 replaces the budget by a slack variable and alternates until the
    slack drops below kappa; phase 2 runs the budgeted alternation.  Raises
    InfeasibleStart when phase 1 stalls above the budget.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    cfg = cfg or BcdConfig()
    ctx = _Context(sys, w, initial, desired, cfg)
    t0 = time.perf_counter()
    lam_t, beta, p_N = ctx.init_couplings()

    # phase 1: drive the cost budget feasible by minimizing its slack
    sdp_feas = _SoftSdp(ctx, "total_feas")
    feasible = False
    mu_N = Sigma_N = None
    for _ in range(cfg.feasibility_max_iter):
        _, mu_N, Sigma_N = sdp_feas.solve(lam_t, beta)
        C = ctx.tight_C(mu_N, Sigma_N)
        T = ctx.tight_T(mu_N, Sigma_N)
        lam_t, beta, p_N, _ = _lp_step(ctx, C, np.zeros_like(T))
        if float(np.sum(lam_t * C)) <= kappa:
            feasible = True
            break
    if not feasible:
        report = BcdReport(objective_trace=[], status=BcdStatus.InfeasibleStart,
                           iterations=0, wall_time=time.perf_counter() - t0)
        raise InfeasibleStart(
            f"slack phase could not reach the cost budget {kappa}", report=report
        )

    warm = _warm_couplings_total(ctx, kappa)
    if warm is not None:
        lam_t, beta, p_N = warm
    sdp = _SoftSdp(ctx, "total", kappa=kappa)
    trace = []
    f_prev = None
    status = BcdStatus.MaxIter
    iterations = 0
    for it in range(cfg.max_iter):
        iterations = it + 1
        _, mu_N, Sigma_N = sdp.solve(lam_t, beta)
        C = ctx.tight_C(mu_N, Sigma_N)
        T = ctx.tight_T(mu_N, Sigma_N)
        budget = [(C, kappa)]
        lam_t, beta, p_N, _ = _lp_step(ctx, np.zeros_like(C), T, extra_ub=budget)
        f = float(np.sum(beta * T))
        trace.append(f)
        if _converged(f_prev, f, cfg.eps):
            status = BcdStatus.Converged
            break
        f_prev = f

    state = BcdState(lambda_tilde=lam_t, beta=beta, p_N=p_N, mu_N=mu_N,
                     Sigma_N=Sigma_N, C=C, T=T)
    report = _finish(ctx, trace, status, iterations, lam_t, beta, p_N, mu_N,
                     Sigma_N, state, t0=t0)
    return report.policy, report
