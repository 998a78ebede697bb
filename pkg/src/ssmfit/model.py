"""Problem definition: affine parameterized dynamics and measurements.

A problem couples per-step affine matrix families G_k(theta), H_k(theta)
with covariance factors, losses, observations, and an initial state
estimate.  The stacked dynamics operator has identity diagonal blocks and
-G_k(theta) below it; the prior enters through zeta = (G_1(theta) x0, 0,
..., 0), so the first step obeys the same dynamics as the rest and the
prior term is differentiated through theta like any other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .linalg import (
    BlockBidiag,
    BlockDiag,
    CovFactor,
    bidiag_apply,
    bidiag_solve,
    blockdiag_apply,
    factor_apply_t,
    factor_solve,
)
from .losses import LossSpec


@dataclass(frozen=True)
class AffineFamily:
    """Matrix family M(theta) = base + sum_j theta_j * directions[j]."""

    base: np.ndarray
    directions: np.ndarray  # (p, rows, cols); p may be 0

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        dirs = np.asarray(self.directions, dtype=float)
        if dirs.ndim == 2 and dirs.size == 0:
            dirs = dirs.reshape((0,) + base.shape)
        if dirs.ndim != 3 or dirs.shape[1:] != base.shape:
            raise ValueError(
                f"directions shape {dirs.shape} incompatible with base {base.shape}"
            )
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "directions", dirs)

    @property
    def theta_dim(self):
        return self.directions.shape[0]

    def at(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.theta_dim,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.theta_dim},)")
        if self.theta_dim == 0:
            return self.base.copy()
        return self.base + np.tensordot(theta, self.directions, axes=1)


def constant_family(mat, theta_dim):
    """Family that ignores theta entirely."""
    mat = np.asarray(mat, dtype=float)
    return AffineFamily(mat, np.zeros((theta_dim,) + mat.shape))


@dataclass(frozen=True)
class SsmProblem:
    """Full estimation problem over a fixed horizon."""

    G_fams: tuple
    H_fams: tuple
    Q_fac: CovFactor
    R_fac: CovFactor
    loss_p: LossSpec
    loss_m: LossSpec
    z: np.ndarray  # (N, m) observations
    x0: np.ndarray  # (n,) initial state estimate

    def __post_init__(self):
        object.__setattr__(self, "G_fams", tuple(self.G_fams))
        object.__setattr__(self, "H_fams", tuple(self.H_fams))
        object.__setattr__(self, "z", np.atleast_2d(np.asarray(self.z, dtype=float)))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        n = self.G_fams[0].base.shape[0]
        m = self.H_fams[0].base.shape[0]
        N = len(self.G_fams)
        if len(self.H_fams) != N:
            raise ValueError("G and H family lists must have equal length")
        p = self.G_fams[0].theta_dim
        for fam in self.G_fams:
            if fam.base.shape != (n, n) or fam.theta_dim != p:
                raise ValueError("inconsistent dynamics family shapes")
        for fam in self.H_fams:
            if fam.base.shape != (m, n) or fam.theta_dim != p:
                raise ValueError("inconsistent measurement family shapes")
        if self.z.shape != (N, m):
            raise ValueError(f"observations have shape {self.z.shape}, expected {(N, m)}")
        if self.x0.shape != (n,):
            raise ValueError(f"x0 has shape {self.x0.shape}, expected ({n},)")
        if self.Q_fac.n_blocks != N or self.Q_fac.dim != n:
            raise ValueError("process factor does not match horizon/state dim")
        if self.R_fac.n_blocks != N or self.R_fac.dim != m:
            raise ValueError("measurement factor does not match horizon/measurement dim")

    @property
    def N(self):
        return len(self.G_fams)

    @property
    def n(self):
        return self.G_fams[0].base.shape[0]

    @property
    def m(self):
        return self.H_fams[0].base.shape[0]

    @property
    def theta_dim(self):
        return self.G_fams[0].theta_dim

    @cached_property
    def _G_bases(self):
        return np.stack([f.base for f in self.G_fams])

    @cached_property
    def _G_dirs(self):
        return np.stack([f.directions for f in self.G_fams])  # (N, p, n, n)

    @cached_property
    def _H_bases(self):
        return np.stack([f.base for f in self.H_fams])

    @cached_property
    def _H_dirs(self):
        return np.stack([f.directions for f in self.H_fams])  # (N, p, m, n)

    @cached_property
    def z_flat(self):
        return self.z.ravel().copy()

    def G_mats(self, theta):
        """All G_k(theta) stacked as (N, n, n)."""
        theta = np.asarray(theta, dtype=float)
        if self.theta_dim == 0:
            return self._G_bases.copy()
        return self._G_bases + np.einsum("p,kpij->kij", theta, self._G_dirs)

    def H_mats(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.theta_dim == 0:
            return self._H_bases.copy()
        return self._H_bases + np.einsum("p,kpij->kij", theta, self._H_dirs)


@dataclass(frozen=True)
class Assembled:
    G: BlockBidiag
    H: BlockDiag
    zeta: np.ndarray


@dataclass(frozen=True)
class ResidualPair:
    r_p: np.ndarray
    r_m: np.ndarray


@dataclass(frozen=True)
class NullCondition:
    ok: bool
    witness: np.ndarray | None = None


def assemble(problem: SsmProblem, theta) -> Assembled:
    """Evaluate the stacked operators and prior vector at theta."""
    Gk = problem.G_mats(theta)
    Hk = problem.H_mats(theta)
    G = BlockBidiag(-Gk[1:], problem.N, problem.n)
    zeta = np.zeros(problem.N * problem.n)
    zeta[: problem.n] = Gk[0] @ problem.x0
    return Assembled(G, BlockDiag(Hk), zeta)


def _lagged(problem: SsmProblem, x):
    """States shifted one step back, with x0 in the first slot: (N, n)."""
    xb = np.asarray(x, dtype=float).reshape(problem.N, problem.n)
    return np.concatenate([problem.x0[None, :], xb[:-1]], axis=0)


def jac_apply_states(problem: SsmProblem, theta, x):
    """Columns d/dtheta_j of (G(theta) x - zeta(theta)), shape (N*n, p).

    Block k of column j is -G_k^j x_{k-1}, with the initial estimate x0
    standing in for the (absent) state before the horizon.
    """
    lag = _lagged(problem, x)
    cols = -np.einsum("kpij,kj->kpi", problem._G_dirs, lag)
    return cols.transpose(0, 2, 1).reshape(problem.N * problem.n, problem.theta_dim)


def jac_apply_states_H(problem: SsmProblem, theta, x):
    """Columns d/dtheta_j of H(theta) x, shape (N*m, p)."""
    xb = np.asarray(x, dtype=float).reshape(problem.N, problem.n)
    cols = np.einsum("kpij,kj->kpi", problem._H_dirs, xb)
    return cols.transpose(0, 2, 1).reshape(problem.N * problem.m, problem.theta_dim)


def jac_apply_duals(problem: SsmProblem, theta, lam):
    """Columns d/dtheta_j of G(theta)^T lam, shape (N*n, p).

    Adjoint of the operator part of jac_apply_states: block k of column j
    is -(G_{k+1}^j)^T lam_{k+1}, zero in the last block.
    """
    lb = np.asarray(lam, dtype=float).reshape(problem.N, problem.n)
    out = np.zeros((problem.N, problem.theta_dim, problem.n))
    if problem.N > 1:
        out[:-1] = -np.einsum("kpji,kj->kpi", problem._G_dirs[1:], lb[1:])
    return out.transpose(0, 2, 1).reshape(problem.N * problem.n, problem.theta_dim)


def jac_apply_duals_H(problem: SsmProblem, theta, w):
    """Columns d/dtheta_j of H(theta)^T w, shape (N*n, p)."""
    wb = np.asarray(w, dtype=float).reshape(problem.N, problem.m)
    out = np.einsum("kpji,kj->kpi", problem._H_dirs, wb)
    return out.transpose(0, 2, 1).reshape(problem.N * problem.n, problem.theta_dim)


def residuals_nonsingular(problem: SsmProblem, theta, x) -> ResidualPair:
    """Whitened residuals; requires square invertible covariance factors."""
    asm = assemble(problem, theta)
    raw_p = bidiag_apply(asm.G, x) - asm.zeta
    raw_m = blockdiag_apply(asm.H, x) - problem.z_flat
    return ResidualPair(
        factor_solve(problem.Q_fac, raw_p), factor_solve(problem.R_fac, raw_m)
    )


def check_null_condition(problem: SsmProblem, theta, tol: float = 1e-10) -> NullCondition:
    """Test that no nonzero null direction of R is killed by Q G^{-T} H^T.

    Builds a basis of the measurement-covariance null space (blockwise from
    the factors), pushes it through H^T, G^{-T}, and Q^{T/2}, and inspects
    the singular values of the stacked image.  A (near-)zero singular value
    yields a witness direction.
    """
    R = problem.R_fac
    basis_cols = []
    for k, C in enumerate(R.blocks):
        if C.shape[1] == 0:
            null = np.eye(R.dim)
        else:
            u, s, _ = np.linalg.svd(C, full_matrices=True)
            nullity = R.dim - int(np.sum(s > tol * max(1.0, s[0] if s.size else 1.0)))
            null = u[:, R.dim - nullity :] if nullity else None
        if null is not None and null.shape[1]:
            for col in null.T:
                v = np.zeros(R.out_size)
                v[k * R.dim : (k + 1) * R.dim] = col
                basis_cols.append(v)
    if not basis_cols:
        return NullCondition(ok=True)
    V = np.stack(basis_cols, axis=1)
    asm = assemble(problem, theta)
    M = factor_apply_t(
        problem.Q_fac, bidiag_solve(asm.G, blockdiag_apply(asm.H, V, transposed=True), transposed=True)
    )
    if M.shape[0] == 0:
        # Q has no range at all; every null direction of R violates the condition.
        return NullCondition(ok=False, witness=V[:, 0])
    u, s, vt = np.linalg.svd(M)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol * max(1.0, smax)))
    if rank == V.shape[1]:
        return NullCondition(ok=True)
    witness = V @ vt[-1]
    return NullCondition(ok=False, witness=witness / np.linalg.norm(witness))


def freeze(problem: SsmProblem, theta) -> SsmProblem:
    """Fold theta into the bases, producing a parameter-free problem."""
    theta = np.asarray(theta, dtype=float)
    G_fams = tuple(AffineFamily(f.at(theta), np.zeros((0, problem.n, problem.n))) for f in problem.G_fams)
    H_fams = tuple(AffineFamily(f.at(theta), np.zeros((0, problem.m, problem.n))) for f in problem.H_fams)
    return SsmProblem(
        G_fams=G_fams,
        H_fams=H_fams,
        Q_fac=problem.Q_fac,
        R_fac=problem.R_fac,
        loss_p=problem.loss_p,
        loss_m=problem.loss_m,
        z=problem.z,
        x0=problem.x0,
    )
