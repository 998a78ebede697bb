"""Saddle-point state estimation for possibly singular covariances.

States, residuals, and multipliers jointly solve the stationarity system
of the Lagrangian of

    min l_p(r_p) + l_m(r_m)  s.t.  Q^{1/2} r_p = G(theta) x - zeta,
                                   R^{1/2} r_m = H(theta) x - z,

which accommodates rank-deficient covariance factors (zero-variance rows
become exact constraints).  Newton steps use the structured saddle solve;
with the constraint-penalty form of the objective (penalty weight one) the
augmented system is a row-scaled copy of the plain KKT system, so the two
Newton step maps coincide and we iterate on the KKT residual directly.
Value-function derivatives come from the same KKT matrix: grad = f_theta
at the saddle and hess = -Hth^T Hy^{-1} Hth (the pure second derivative in
theta vanishes for affine families).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import losses as L
from .exceptions import DualSingular, MaxIterations, SchurSingular, SingularCovariance
from .linalg import (
    KktSystem,
    bidiag_apply,
    bidiag_solve,
    blockdiag_apply,
    cov_apply,
    factor_apply,
    factor_apply_t,
    factor_dense,
    factor_solve,
    kkt_reduce_solve,
)
from .model import (
    SsmProblem,
    assemble,
    jac_apply_duals,
    jac_apply_duals_H,
    jac_apply_states,
    jac_apply_states_H,
)
from .smoother_nonsingular import ValueReport, default_state_tol, propagate_initial_state

MAX_BACKTRACKS = 30
BOOST_ESCALATIONS = 4


@dataclass
class SaddleState:
    """Stacked unknowns of the constrained formulation."""

    x: np.ndarray
    r_p: np.ndarray
    r_m: np.ndarray
    lam_p: np.ndarray
    lam_m: np.ndarray

    def pack(self):
        return np.concatenate([self.x, self.r_p, self.r_m, self.lam_p, self.lam_m])

    @classmethod
    def unpack(cls, flat, problem: SsmProblem):
        nx = problem.N * problem.n
        tq = problem.Q_fac.total_rank
        tr = problem.R_fac.total_rank
        nm = problem.N * problem.m
        off = np.cumsum([0, nx, tq, tr, nx, nm])
        return cls(*(flat[off[i] : off[i + 1]] for i in range(5)))

    def copy(self):
        return SaddleState(
            self.x.copy(), self.r_p.copy(), self.r_m.copy(),
            self.lam_p.copy(), self.lam_m.copy(),
        )


def _cold_start(problem: SsmProblem, theta) -> SaddleState:
    x = propagate_initial_state(problem, theta)
    return SaddleState(
        x=x,
        r_p=np.zeros(problem.Q_fac.total_rank),
        r_m=np.zeros(problem.R_fac.total_rank),
        lam_p=np.zeros(problem.N * problem.n),
        lam_m=np.zeros(problem.N * problem.m),
    )


def kkt_residual(problem: SsmProblem, asm, s: SaddleState):
    """The five stationarity blocks of the Lagrangian, stacked."""
    b1 = bidiag_apply(asm.G, s.lam_p, transposed=True) + blockdiag_apply(
        asm.H, s.lam_m, transposed=True
    )
    b2 = L.loss_grad(problem.loss_p, s.r_p) - factor_apply_t(problem.Q_fac, s.lam_p)
    b3 = L.loss_grad(problem.loss_m, s.r_m) - factor_apply_t(problem.R_fac, s.lam_m)
    b4 = bidiag_apply(asm.G, s.x) - asm.zeta - factor_apply(problem.Q_fac, s.r_p)
    b5 = blockdiag_apply(asm.H, s.x) - problem.z_flat - factor_apply(problem.R_fac, s.r_m)
    return np.concatenate([b1, b2, b3, b4, b5])


def lagrangian_value(problem: SsmProblem, asm, s: SaddleState) -> float:
    c_p = factor_apply(problem.Q_fac, s.r_p) - (bidiag_apply(asm.G, s.x) - asm.zeta)
    c_m = factor_apply(problem.R_fac, s.r_m) - (blockdiag_apply(asm.H, s.x) - problem.z_flat)
    return (
        L.loss_value(problem.loss_p, s.r_p)
        + L.loss_value(problem.loss_m, s.r_m)
        - float(s.lam_p @ c_p)
        - float(s.lam_m @ c_m)
    )


def augmented_value(problem: SsmProblem, asm, s: SaddleState) -> float:
    """Lagrangian plus unit-weight quadratic penalties on both constraints."""
    c_p = factor_apply(problem.Q_fac, s.r_p) - (bidiag_apply(asm.G, s.x) - asm.zeta)
    c_m = factor_apply(problem.R_fac, s.r_m) - (blockdiag_apply(asm.H, s.x) - problem.z_flat)
    return lagrangian_value(problem, asm, s) + 0.5 * float(c_p @ c_p) + 0.5 * float(c_m @ c_m)


def _kkt_at(problem, asm, s: SaddleState, extra_p=0.0, extra_m=0.0) -> KktSystem:
    lp = L.loss_hess_diag(problem.loss_p, s.r_p) + extra_p
    lm = L.loss_hess_diag(problem.loss_m, s.r_m) + extra_m
    return KktSystem(asm.G, asm.H, problem.Q_fac, problem.R_fac, lp, lm)


def _newton_saddle(problem, theta, y_init, tol, max_iter):
    asm = assemble(problem, theta)
    s = _cold_start(problem, theta) if y_init is None else y_init.copy()
    F = kkt_residual(problem, asm, s)
    merit = float(F @ F)
    iters = 0
    boosted = False
    for _ in range(max_iter):
        if np.abs(F).max() <= tol:
            return s, iters, True, boosted, asm
        bp = L.min_psd_boost(problem.loss_p, s.r_p)
        bm = L.min_psd_boost(problem.loss_m, s.r_m)
        boosted = boosted or bp > 0 or bm > 0
        accepted = False
        for _ in range(BOOST_ESCALATIONS):
            step = kkt_reduce_solve(_kkt_at(problem, asm, s, bp, bm), -F)
            delta = SaddleState.unpack(step, problem)
            t = 1.0
            for _ in range(MAX_BACKTRACKS):
                trial = SaddleState(
                    s.x + t * delta.x,
                    s.r_p + t * delta.r_p,
                    s.r_m + t * delta.r_m,
                    s.lam_p + t * delta.lam_p,
                    s.lam_m + t * delta.lam_m,
                )
                F_new = kkt_residual(problem, asm, trial)
                merit_new = float(F_new @ F_new)
                if merit_new <= (1.0 - 1e-4 * t) * merit or merit_new < tol * tol:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
            # Nonconvex curvature can defeat the plain step; damp it harder.
            bp = 10.0 * bp + 1e-4
            bm = 10.0 * bm + 1e-4 if L.min_psd_boost(problem.loss_m, s.r_m) > 0 else bm
            boosted = True
        if not accepted:
            raise MaxIterations("saddle line search stalled before reaching tolerance")
        s, F, merit = trial, F_new, merit_new
        iters += 1
    if np.abs(F).max() <= tol:
        return s, iters, True, boosted, asm
    raise MaxIterations(f"saddle Newton did not converge in {max_iter} iterations")


def solve_saddle(problem: SsmProblem, theta, y_init=None, tol=None, max_iter: int = 200) -> SaddleState:
    """Newton-solve the saddle system at fixed theta."""
    tol = default_state_tol(problem) if tol is None else tol
    s, _, _, _, _ = _newton_saddle(problem, theta, y_init, tol, max_iter)
    return s


def _theta_jacobian_stack(problem, theta, s: SaddleState):
    """Mixed second derivative of the Lagrangian: d(stationarity)/dtheta."""
    A = jac_apply_states(problem, theta, s.x)
    B = jac_apply_states_H(problem, theta, s.x)
    top = jac_apply_duals(problem, theta, s.lam_p) + jac_apply_duals_H(problem, theta, s.lam_m)
    tq = problem.Q_fac.total_rank
    tr = problem.R_fac.total_rank
    p = problem.theta_dim
    return np.concatenate(
        [top, np.zeros((tq, p)), np.zeros((tr, p)), A, B], axis=0
    ), A, B


def value_report_singular(problem: SsmProblem, theta, warm_start=None, tol=None) -> ValueReport:
    """Solve the saddle and return v(theta) and its exact derivatives."""
    theta = np.asarray(theta, dtype=float)
    tol = default_state_tol(problem) if tol is None else tol
    s, iters, converged, _, asm = _newton_saddle(problem, theta, warm_start, tol, 200)
    v = lagrangian_value(problem, asm, s)
    p = problem.theta_dim
    if p == 0:
        return ValueReport(v, np.zeros(0), np.zeros((0, 0)), iters, converged, True, s)

    Hth, A, B = _theta_jacobian_stack(problem, theta, s)
    grad = A.T @ s.lam_p + B.T @ s.lam_m

    hess_psd = True
    try:
        X = kkt_reduce_solve(_kkt_at(problem, asm, s), Hth)
    except SchurSingular:
        bp = L.min_psd_boost(problem.loss_p, s.r_p)
        bm = L.min_psd_boost(problem.loss_m, s.r_m)
        if bp == 0.0 and bm == 0.0:
            raise
        hess_psd = False
        X = kkt_reduce_solve(_kkt_at(problem, asm, s, bp, bm), Hth)
    hess = -Hth.T @ X
    hess = 0.5 * (hess + hess.T)
    return ValueReport(v, grad, hess, iters, converged, hess_psd, s)


def primal_grad_invertible_R(problem: SsmProblem, theta, x):
    """Value gradient rebuilt from primal quantities when R is invertible.

    Multipliers follow from the optimality conditions: lam_m from the
    whitened measurement residual, lam_p = -G^{-T} H^T lam_m.
    """
    if not problem.R_fac.is_square_invertible():
        raise SingularCovariance("measurement factor must be square and invertible")
    theta = np.asarray(theta, dtype=float)
    asm = assemble(problem, theta)
    r_m = factor_solve(problem.R_fac, blockdiag_apply(asm.H, x) - problem.z_flat)
    lam_m = factor_solve(problem.R_fac, L.loss_grad(problem.loss_m, r_m), transposed=True)
    lam_p = -bidiag_solve(
        asm.G, blockdiag_apply(asm.H, lam_m, transposed=True), transposed=True
    )
    A = jac_apply_states(problem, theta, x)
    B = jac_apply_states_H(problem, theta, x)
    return A.T @ lam_p + B.T @ lam_m


@dataclass(frozen=True)
class LsDualResult:
    lam_m: np.ndarray
    lam_p: np.ndarray
    v: float


def ls_dual_solve(problem: SsmProblem, theta) -> LsDualResult:
    """Closed-form saddle multipliers when both losses are least squares.

    Maximizing the dual -1/2 lam_m^T (H G^{-1} Q G^{-T} H^T + R) lam_m
    - lam_m^T (z - H G^{-1} zeta) gives
    lam_m = (H G^{-1} Q G^{-T} H^T + R)^{-1} (H G^{-1} zeta - z).
    """
    if problem.loss_p.kind != L.LS or problem.loss_m.kind != L.LS:
        raise ValueError("closed-form dual requires least-squares losses on both blocks")
    theta = np.asarray(theta, dtype=float)
    asm = assemble(problem, theta)
    nm = problem.N * problem.m
    # W = G^{-T} H^T as dense columns; measurement count stays moderate.
    HT = blockdiag_apply(asm.H, np.eye(nm), transposed=True)
    Wt = bidiag_solve(asm.G, HT, transposed=True)
    V = factor_apply_t(problem.Q_fac, Wt)
    M = V.T @ V
    m = problem.m
    for k, C in enumerate(problem.R_fac.blocks):
        M[k * m : (k + 1) * m, k * m : (k + 1) * m] += C @ C.T
    rhs = blockdiag_apply(asm.H, bidiag_solve(asm.G, asm.zeta)) - problem.z_flat
    try:
        cho = scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError as exc:
        raise DualSingular(str(exc)) from exc
    lam_m = scipy.linalg.cho_solve(cho, rhs)
    lam_p = -bidiag_solve(
        asm.G, blockdiag_apply(asm.H, lam_m, transposed=True), transposed=True
    )
    v = (
        -0.5 * float(lam_p @ cov_apply(problem.Q_fac, lam_p))
        - 0.5 * float(lam_m @ cov_apply(problem.R_fac, lam_m))
        - float(lam_p @ asm.zeta)
        - float(lam_m @ problem.z_flat)
    )
    return LsDualResult(lam_m=lam_m, lam_p=lam_p, v=v)


def make_oracle(problem: SsmProblem, tol=None, warm: bool = True):
    """Callable theta -> ValueReport with a caller-owned warm-start cache."""

    cache = {"y": None}

    def oracle(theta):
        rep = value_report_singular(
            problem, theta, warm_start=cache["y"] if warm else None, tol=tol
        )
        cache["y"] = rep.state
        return rep

    return oracle
