"""State estimation and value-function derivatives for invertible covariances.

The states minimize
    f(theta, x) = l_p(Q^{-1/2}(G(theta) x - zeta)) + l_m(R^{-1/2}(H(theta) x - z)),
solved by Newton steps on the block-tridiagonal state Hessian.  With the
minimizer projected out, v(theta) = f(theta, x(theta)) has the closed-form
gradient f_theta and Hessian f_thth - Hth^T Hy^{-1} Hth obtained from the
stationarity system by implicit differentiation; both are assembled here
from p extra tridiagonal solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .exceptions import HessianSingular, MaxIterations, SingularSystem
from .linalg import (
    BlockTridiag,
    bidiag_apply,
    blockdiag_apply,
    factor_solve,
    tridiag_factor,
)
from .model import (
    SsmProblem,
    assemble,
    jac_apply_duals,
    jac_apply_duals_H,
    jac_apply_states,
    jac_apply_states_H,
    residuals_nonsingular,
)

ARMIJO_C = 1e-4
MAX_BACKTRACKS = 50


@dataclass
class ValueReport:
    """Value, gradient, Hessian, and solver diagnostics at one theta."""

    v: float
    grad: np.ndarray
    hess: np.ndarray
    inner_iters: int
    converged: bool
    hess_psd: bool
    state: object = None  # solved states (or saddle point) for warm starting

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=float)
        self.hess = np.asarray(self.hess, dtype=float)


def default_state_tol(problem: SsmProblem) -> float:
    scale = float(np.abs(problem.z_flat).max()) if problem.z_flat.size else 0.0
    return 1e-9 * (1.0 + scale)


def propagate_initial_state(problem: SsmProblem, theta):
    """Run x0 through the noiseless dynamics to get a starting trajectory."""
    Gk = problem.G_mats(theta)
    x = np.empty((problem.N, problem.n))
    prev = problem.x0
    for k in range(problem.N):
        prev = Gk[k] @ prev
        x[k] = prev
    return x.ravel()


def objective(problem: SsmProblem, theta, x) -> float:
    res = residuals_nonsingular(problem, theta, x)
    return L.loss_value(problem.loss_p, res.r_p) + L.loss_value(problem.loss_m, res.r_m)


def _state_gradient(problem, asm, res):
    u = factor_solve(problem.Q_fac, L.loss_grad(problem.loss_p, res.r_p), transposed=True)
    w = factor_solve(problem.R_fac, L.loss_grad(problem.loss_m, res.r_m), transposed=True)
    return (
        bidiag_apply(asm.G, u, transposed=True)
        + blockdiag_apply(asm.H, w, transposed=True)
    ), u, w


def _state_hessian(problem, theta, res, boost_p=0.0, boost_m=0.0) -> BlockTridiag:
    """G^T Q^{-T/2} Lp Q^{-1/2} G + H^T R^{-T/2} Lm R^{-1/2} H as block tridiagonal."""
    N, n = problem.N, problem.n
    lp = L.loss_hess_diag(problem.loss_p, res.r_p) + boost_p
    lm = L.loss_hess_diag(problem.loss_m, res.r_m) + boost_m
    Gk = problem.G_mats(theta)
    Hk = problem.H_mats(theta)
    W = np.empty((N, n, n))
    for k, B in enumerate(problem.Q_fac.blocks):
        Binv = np.linalg.inv(B)
        W[k] = Binv.T @ (lp[k * n : (k + 1) * n, None] * Binv)
    m = problem.m
    diag = W.copy()
    for k, C in enumerate(problem.R_fac.blocks):
        Cinv = np.linalg.inv(C)
        V = Cinv.T @ (lm[k * m : (k + 1) * m, None] * Cinv)
        diag[k] += Hk[k].T @ V @ Hk[k]
    offdiag = np.empty((N - 1, n, n))
    for k in range(N - 1):
        diag[k] += Gk[k + 1].T @ W[k + 1] @ Gk[k + 1]
        offdiag[k] = -(Gk[k + 1].T @ W[k + 1])
    diag = 0.5 * (diag + np.swapaxes(diag, 1, 2))
    return BlockTridiag(diag, offdiag)


def _newton_states(problem, theta, x_init, tol, max_iter):
    x = propagate_initial_state(problem, theta) if x_init is None else np.asarray(x_init, dtype=float).copy()
    asm = assemble(problem, theta)
    res = residuals_nonsingular(problem, theta, x)
    f = L.loss_value(problem.loss_p, res.r_p) + L.loss_value(problem.loss_m, res.r_m)
    iters = 0
    for _ in range(max_iter):
        g, _, _ = _state_gradient(problem, asm, res)
        if np.abs(g).max() <= tol:
            return x, iters, True
        bp = L.min_psd_boost(problem.loss_p, res.r_p)
        bm = L.min_psd_boost(problem.loss_m, res.r_m)
        Hy = _state_hessian(problem, theta, res, boost_p=bp, boost_m=bm)
        step = -tridiag_factor(Hy).solve(g)
        slope = float(g @ step)
        if slope >= 0:  # boosted Hessian should rule this out; safeguard anyway
            step = -g
            slope = -float(g @ g)
        t = 1.0
        for _ in range(MAX_BACKTRACKS):
            x_new = x + t * step
            res_new = residuals_nonsingular(problem, theta, x_new)
            f_new = L.loss_value(problem.loss_p, res_new.r_p) + L.loss_value(
                problem.loss_m, res_new.r_m
            )
            if f_new <= f + ARMIJO_C * t * slope:
                break
            t *= 0.5
        else:
            raise MaxIterations("state line search stalled before reaching tolerance")
        x, res, f = x_new, res_new, f_new
        iters += 1
    g, _, _ = _state_gradient(problem, asm, res)
    if np.abs(g).max() <= tol:
        return x, iters, True
    raise MaxIterations(f"state Newton did not converge in {max_iter} iterations")


def solve_states(problem: SsmProblem, theta, x_init=None, tol=None, max_iter: int = 100):
    """Minimize over states at fixed theta; returns the stacked solution."""
    tol = default_state_tol(problem) if tol is None else tol
    x, _, _ = _newton_states(problem, theta, x_init, tol, max_iter)
    return x


def value_report(problem: SsmProblem, theta, warm_start=None, tol=None) -> ValueReport:
    """Solve for the states and return v(theta) with its exact derivatives."""
    theta = np.asarray(theta, dtype=float)
    tol = default_state_tol(problem) if tol is None else tol
    x, iters, converged = _newton_states(problem, theta, warm_start, tol, 100)
    asm = assemble(problem, theta)
    res = residuals_nonsingular(problem, theta, x)
    v = L.loss_value(problem.loss_p, res.r_p) + L.loss_value(problem.loss_m, res.r_m)
    p = problem.theta_dim
    if p == 0:
        return ValueReport(v, np.zeros(0), np.zeros((0, 0)), iters, converged, True, x)

    _, u, w = _state_gradient(problem, asm, res)
    wA = factor_solve(problem.Q_fac, jac_apply_states(problem, theta, x))
    wB = factor_solve(problem.R_fac, jac_apply_states_H(problem, theta, x))
    grad = wA.T @ L.loss_grad(problem.loss_p, res.r_p) + wB.T @ L.loss_grad(
        problem.loss_m, res.r_m
    )

    lp = L.loss_hess_diag(problem.loss_p, res.r_p)
    lm = L.loss_hess_diag(problem.loss_m, res.r_m)
    f_thth = wA.T @ (lp[:, None] * wA) + wB.T @ (lm[:, None] * wB)
    Hth = (
        jac_apply_duals(problem, theta, u)
        + bidiag_apply(
            asm.G, factor_solve(problem.Q_fac, lp[:, None] * wA, transposed=True), transposed=True
        )
        + jac_apply_duals_H(problem, theta, w)
        + blockdiag_apply(
            asm.H, factor_solve(problem.R_fac, lm[:, None] * wB, transposed=True), transposed=True
        )
    )

    hess_psd = True
    try:
        fac = tridiag_factor(_state_hessian(problem, theta, res))
        if not fac.pivot_pd:
            raise SingularSystem("state Hessian not positive definite")
    except SingularSystem:
        hess_psd = False
        bp = L.min_psd_boost(problem.loss_p, res.r_p)
        bm = L.min_psd_boost(problem.loss_m, res.r_m)
        try:
            fac = tridiag_factor(_state_hessian(problem, theta, res, boost_p=bp, boost_m=bm))
        except SingularSystem as exc:
            raise HessianSingular(str(exc)) from exc
    X = fac.solve(Hth)
    hess = f_thth - Hth.T @ X
    hess = 0.5 * (hess + hess.T)
    return ValueReport(v, grad, hess, iters, converged, hess_psd, x)


def make_oracle(problem: SsmProblem, tol=None, warm: bool = True):
    """Callable theta -> ValueReport with a caller-owned warm-start cache."""

    state = {"x": None}

    def oracle(theta):
        rep = value_report(problem, theta, warm_start=state["x"] if warm else None, tol=tol)
        state["x"] = rep.state
        return rep

    return oracle
