"""Structure-exploiting kernels for stacked state-space operators.

The dynamics operator is unit-lower block-bidiagonal, the measurement
operator block-diagonal, the state Hessian symmetric block-tridiagonal,
and the saddle (KKT) matrix a five-by-five block system that reduces to a
dense measurement-space Schur complement.  All kernels work on flat
stacked vectors (or matrices of stacked columns); block structure is
recovered by reshaping, and nothing here ever forms a dense state-by-state
matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .exceptions import SchurSingular, SingularCovariance, SingularSystem

# A block pivot counts as singular once its condition estimate passes this.
PIVOT_COND_LIMIT = 1e12


def _as_columns(v):
    """View `v` as a 2-d column block, remembering if it was 1-d."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return v[:, None], True
    return v, False


def _restore(v, was_1d):
    return v[:, 0] if was_1d else v


# ---------------------------------------------------------------------------
# unit-lower block-bidiagonal operator (stacked dynamics)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockBidiag:
    """Unit-lower block-bidiagonal operator.

    Diagonal blocks are implicit identities; `sub_blocks[k]` sits at block
    row k+1, block column k.  With sub-blocks -G_k this is the stacked
    dynamics map x -> (x_1, x_2 - G_2 x_1, ..., x_N - G_N x_{N-1}).
    """

    sub_blocks: np.ndarray  # (n_blocks - 1, dim, dim)
    n_blocks: int
    block_dim: int

    def __post_init__(self):
        sub = np.asarray(self.sub_blocks, dtype=float)
        if sub.shape != (self.n_blocks - 1, self.block_dim, self.block_dim):
            raise ValueError(
                f"sub_blocks shape {sub.shape} inconsistent with "
                f"{self.n_blocks} blocks of dim {self.block_dim}"
            )
        object.__setattr__(self, "sub_blocks", sub)

    @property
    def size(self):
        return self.n_blocks * self.block_dim


def bidiag_apply(G: BlockBidiag, x, transposed: bool = False):
    """Apply G (or its transpose) to a stacked vector or column block."""
    xc, was_1d = _as_columns(x)
    if xc.shape[0] != G.size:
        raise ValueError(f"operand has {xc.shape[0]} rows, expected {G.size}")
    xb = xc.reshape(G.n_blocks, G.block_dim, -1)
    out = xb.copy()
    if G.n_blocks > 1:
        if transposed:
            out[:-1] += np.einsum("kji,kjc->kic", G.sub_blocks, xb[1:])
        else:
            out[1:] += np.einsum("kij,kjc->kic", G.sub_blocks, xb[:-1])
    return _restore(out.reshape(G.size, -1), was_1d)


def bidiag_solve(G: BlockBidiag, b, transposed: bool = False):
    """Solve G y = b (forward sweep) or G^T y = b (backward sweep).

    The unit diagonal makes the sweep unconditionally well posed.
    """
    bc, was_1d = _as_columns(b)
    if bc.shape[0] != G.size:
        raise ValueError(f"rhs has {bc.shape[0]} rows, expected {G.size}")
    bb = bc.reshape(G.n_blocks, G.block_dim, -1)
    out = np.empty_like(bb)
    if transposed:
        out[-1] = bb[-1]
        for k in range(G.n_blocks - 2, -1, -1):
            out[k] = bb[k] - G.sub_blocks[k].T @ out[k + 1]
    else:
        out[0] = bb[0]
        for k in range(1, G.n_blocks):
            out[k] = bb[k] - G.sub_blocks[k - 1] @ out[k - 1]
    return _restore(out.reshape(G.size, -1), was_1d)


# ---------------------------------------------------------------------------
# block-diagonal operator (stacked measurements)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockDiag:
    """Block-diagonal operator with one (rows x cols) block per step."""

    blocks: np.ndarray  # (n_blocks, rows, cols)

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=float)
        if blocks.ndim != 3:
            raise ValueError("blocks must be a (n_blocks, rows, cols) array")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_blocks(self):
        return self.blocks.shape[0]

    @property
    def out_size(self):
        return self.blocks.shape[0] * self.blocks.shape[1]

    @property
    def in_size(self):
        return self.blocks.shape[0] * self.blocks.shape[2]


def blockdiag_apply(H: BlockDiag, x, transposed: bool = False):
    """Apply a block-diagonal operator (or its transpose) blockwise."""
    xc, was_1d = _as_columns(x)
    n, rows, cols = H.blocks.shape
    if transposed:
        if xc.shape[0] != n * rows:
            raise ValueError(f"operand has {xc.shape[0]} rows, expected {n * rows}")
        xb = xc.reshape(n, rows, -1)
        out = np.einsum("kji,kjc->kic", H.blocks, xb).reshape(n * cols, -1)
    else:
        if xc.shape[0] != n * cols:
            raise ValueError(f"operand has {xc.shape[0]} rows, expected {n * cols}")
        xb = xc.reshape(n, cols, -1)
        out = np.einsum("kij,kjc->kic", H.blocks, xb).reshape(n * rows, -1)
    return _restore(out, was_1d)


# ---------------------------------------------------------------------------
# covariance factors
# ---------------------------------------------------------------------------


class CovFactor:
    """Per-step covariance factors B_k with Q_k = B_k B_k^T.

    Blocks are (dim x rank_k); rank_k = 0 encodes an exact equality
    constraint for that step, rank_k = dim an invertible covariance.
    Residual-space vectors are stacked in factor-column coordinates, so
    their total length is sum(rank_k).
    """

    def __init__(self, blocks):
        blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
        if not blocks:
            raise ValueError("need at least one block")
        dim = blocks[0].shape[0]
        for b in blocks:
            if b.shape[0] != dim:
                raise ValueError("all factor blocks must share their row dimension")
        self.blocks = tuple(blocks)
        self.dim = dim
        self.n_blocks = len(blocks)
        self.ranks = tuple(b.shape[1] for b in blocks)
        self.offsets = tuple(np.concatenate([[0], np.cumsum(self.ranks)]))
        self.total_rank = int(self.offsets[-1])

    @cached_property
    def _uniform(self):
        """Stacked (n_blocks, dim, rank) array when all ranks agree, else None."""
        if len(set(self.ranks)) == 1:
            return np.stack(self.blocks)
        return None

    @property
    def out_size(self):
        return self.n_blocks * self.dim

    def is_square_invertible(self, cond_limit=PIVOT_COND_LIMIT):
        for b in self.blocks:
            if b.shape[1] != self.dim:
                return False
            s = np.linalg.svd(b, compute_uv=False)
            if s[0] == 0 or s[-1] <= s[0] / cond_limit:
                return False
        return True


def factor_apply(F: CovFactor, r):
    """B r: map residual coordinates to step space."""
    rc, was_1d = _as_columns(r)
    if rc.shape[0] != F.total_rank:
        raise ValueError(f"operand has {rc.shape[0]} rows, expected {F.total_rank}")
    stacked = F._uniform
    if stacked is not None and F.ranks[0] > 0:
        rb = rc.reshape(F.n_blocks, F.ranks[0], -1)
        out = np.einsum("kij,kjc->kic", stacked, rb).reshape(F.out_size, -1)
        return _restore(out, was_1d)
    out = np.zeros((F.out_size, rc.shape[1]))
    for k, b in enumerate(F.blocks):
        lo, hi = F.offsets[k], F.offsets[k + 1]
        if hi > lo:
            out[k * F.dim : (k + 1) * F.dim] = b @ rc[lo:hi]
    return _restore(out, was_1d)


def factor_apply_t(F: CovFactor, x):
    """B^T x: map step space to residual coordinates."""
    xc, was_1d = _as_columns(x)
    if xc.shape[0] != F.out_size:
        raise ValueError(f"operand has {xc.shape[0]} rows, expected {F.out_size}")
    stacked = F._uniform
    if stacked is not None and F.ranks[0] > 0:
        xb = xc.reshape(F.n_blocks, F.dim, -1)
        out = np.einsum("kji,kjc->kic", stacked, xb).reshape(F.total_rank, -1)
        return _restore(out, was_1d)
    out = np.zeros((F.total_rank, xc.shape[1]))
    for k, b in enumerate(F.blocks):
        lo, hi = F.offsets[k], F.offsets[k + 1]
        if hi > lo:
            out[lo:hi] = b.T @ xc[k * F.dim : (k + 1) * F.dim]
    return _restore(out, was_1d)


def factor_solve(F: CovFactor, w, transposed: bool = False):
    """Solve B r = w (or B^T r = w) blockwise; factors must be square."""
    wc, was_1d = _as_columns(w)
    if wc.shape[0] != F.out_size:
        raise ValueError(f"rhs has {wc.shape[0]} rows, expected {F.out_size}")
    out = np.empty_like(wc)
    for k, b in enumerate(F.blocks):
        if b.shape[1] != F.dim:
            raise SingularCovariance(
                f"factor block {k} is {b.shape[0]}x{b.shape[1]}, not invertible"
            )
        mat = b.T if transposed else b
        try:
            out[k * F.dim : (k + 1) * F.dim] = np.linalg.solve(
                mat, wc[k * F.dim : (k + 1) * F.dim]
            )
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(f"factor block {k} is singular") from exc
    return _restore(out, was_1d)


def cov_apply(F: CovFactor, x):
    """B B^T x: apply the full covariance."""
    return factor_apply(F, factor_apply_t(F, x))


def factor_dense(F: CovFactor):
    """Stack the factor blocks into a dense (n*dim x total_rank) matrix."""
    out = np.zeros((F.out_size, F.total_rank))
    for k, b in enumerate(F.blocks):
        lo, hi = F.offsets[k], F.offsets[k + 1]
        out[k * F.dim : (k + 1) * F.dim, lo:hi] = b
    return out


# ---------------------------------------------------------------------------
# symmetric block-tridiagonal systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockTridiag:
    """Symmetric block-tridiagonal matrix.

    `offdiag[k]` is the block at (k, k+1); the (k+1, k) block is its
    transpose.  Diagonal blocks must be symmetric.
    """

    diag: np.ndarray  # (n_blocks, dim, dim)
    offdiag: np.ndarray  # (n_blocks - 1, dim, dim)

    def __post_init__(self):
        diag = np.asarray(self.diag, dtype=float)
        off = np.asarray(self.offdiag, dtype=float)
        if diag.ndim != 3 or diag.shape[1] != diag.shape[2]:
            raise ValueError("diag must be (n_blocks, dim, dim)")
        if off.shape != (diag.shape[0] - 1, diag.shape[1], diag.shape[2]):
            raise ValueError("offdiag shape inconsistent with diag")
        if not np.allclose(diag, np.swapaxes(diag, 1, 2), atol=1e-10 * (1 + np.abs(diag).max())):
            raise ValueError("diagonal blocks must be symmetric")
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "offdiag", off)

    @property
    def n_blocks(self):
        return self.diag.shape[0]

    @property
    def block_dim(self):
        return self.diag.shape[1]

    @property
    def size(self):
        return self.n_blocks * self.block_dim


def tridiag_apply(A: BlockTridiag, x):
    """Apply the block-tridiagonal matrix to a stacked vector or columns."""
    xc, was_1d = _as_columns(x)
    xb = xc.reshape(A.n_blocks, A.block_dim, -1)
    out = np.einsum("kij,kjc->kic", A.diag, xb)
    if A.n_blocks > 1:
        out[:-1] += np.einsum("kij,kjc->kic", A.offdiag, xb[1:])
        out[1:] += np.einsum("kji,kjc->kic", A.offdiag, xb[:-1])
    return _restore(out.reshape(A.size, -1), was_1d)


class _TridiagFactor:
    """Block LDL^T-style factorization of a symmetric block tridiagonal."""

    def __init__(self, A: BlockTridiag):
        self.A = A
        n = A.n_blocks
        self.lu_pivots = []
        self.gain = []  # C_k^{-1} E_k, used in the backward sweep
        self.pivot_pd = True
        C = A.diag[0]
        for k in range(n):
            s = np.linalg.svd(C, compute_uv=False)
            if s[0] == 0.0 or s[-1] <= s[0] / PIVOT_COND_LIMIT:
                raise SingularSystem(f"pivot block {k} is numerically singular")
            if self.pivot_pd:
                self.pivot_pd = bool(np.linalg.eigvalsh(0.5 * (C + C.T)).min() > 0)
            lu = scipy.linalg.lu_factor(C)
            self.lu_pivots.append(lu)
            if k < n - 1:
                g = scipy.linalg.lu_solve(lu, A.offdiag[k])
                self.gain.append(g)
                C = A.diag[k + 1] - A.offdiag[k].T @ g

    def solve(self, b):
        bc, was_1d = _as_columns(b)
        A = self.A
        if bc.shape[0] != A.size:
            raise ValueError(f"rhs has {bc.shape[0]} rows, expected {A.size}")
        bb = bc.reshape(A.n_blocks, A.block_dim, -1)
        fwd = np.empty_like(bb)
        fwd[0] = scipy.linalg.lu_solve(self.lu_pivots[0], bb[0])
        for k in range(1, A.n_blocks):
            u = bb[k] - A.offdiag[k - 1].T @ fwd[k - 1]
            fwd[k] = scipy.linalg.lu_solve(self.lu_pivots[k], u)
        out = np.empty_like(bb)
        out[-1] = fwd[-1]
        for k in range(A.n_blocks - 2, -1, -1):
            out[k] = fwd[k] - self.gain[k] @ out[k + 1]
        return _restore(out.reshape(A.size, -1), was_1d)


def tridiag_factor(A: BlockTridiag) -> _TridiagFactor:
    """Factor a symmetric block tridiagonal for repeated solves."""
    return _TridiagFactor(A)


def tridiag_factor_solve(A: BlockTridiag, B):
    """Solve A X = B by a block elimination sweep; O(n_blocks) memory."""
    return _TridiagFactor(A).solve(B)


# ---------------------------------------------------------------------------
# saddle (KKT) system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KktSystem:
    """Assembled pieces of the saddle matrix at a given point.

    Unknown ordering is (x, r_p, r_m, lam_p, lam_m).  `lrr_p` and `lrr_m`
    are the diagonal loss curvatures in residual coordinates; they must be
    nonzero (boosted beforehand if a nonconvex loss made them vanish).
    """

    G: BlockBidiag
    H: BlockDiag
    Q_fac: CovFactor
    R_fac: CovFactor
    lrr_p: np.ndarray
    lrr_m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lrr_p", np.asarray(self.lrr_p, dtype=float))
        object.__setattr__(self, "lrr_m", np.asarray(self.lrr_m, dtype=float))
        if self.lrr_p.shape != (self.Q_fac.total_rank,):
            raise ValueError("lrr_p length must match process residual dim")
        if self.lrr_m.shape != (self.R_fac.total_rank,):
            raise ValueError("lrr_m length must match measurement residual dim")

    @property
    def dims(self):
        nx = self.G.size
        return (nx, self.Q_fac.total_rank, self.R_fac.total_rank, nx, self.H.out_size)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.dims)])

    @property
    def size(self):
        return int(sum(self.dims))

    def split(self, w):
        off = self.offsets
        return tuple(w[off[i] : off[i + 1]] for i in range(5))


def kkt_apply(kkt: KktSystem, w):
    """Apply the full saddle matrix to a stacked vector or columns."""
    wc, was_1d = _as_columns(w)
    wx, wp, wm, wlp, wlm = kkt.split(wc)
    r1 = bidiag_apply(kkt.G, wlp, transposed=True) + blockdiag_apply(
        kkt.H, wlm, transposed=True
    )
    r2 = kkt.lrr_p[:, None] * wp - factor_apply_t(kkt.Q_fac, wlp)
    r3 = kkt.lrr_m[:, None] * wm - factor_apply_t(kkt.R_fac, wlm)
    r4 = bidiag_apply(kkt.G, wx) - factor_apply(kkt.Q_fac, wp)
    r5 = blockdiag_apply(kkt.H, wx) - factor_apply(kkt.R_fac, wm)
    return _restore(np.concatenate([r1, r2, r3, r4, r5], axis=0), was_1d)


def _schur_complement(kkt: KktSystem):
    """Dense measurement-space Schur complement of the saddle matrix."""
    nm = kkt.H.out_size
    # W = H G^{-1} Q^{1/2}, built column-batched through the bidiagonal sweep.
    QL = factor_dense(kkt.Q_fac)
    W = blockdiag_apply(kkt.H, bidiag_solve(kkt.G, QL))
    S = (W / kkt.lrr_p[None, :]) @ W.T if kkt.Q_fac.total_rank else np.zeros((nm, nm))
    m = kkt.R_fac.dim
    for k, C in enumerate(kkt.R_fac.blocks):
        lo, hi = kkt.R_fac.offsets[k], kkt.R_fac.offsets[k + 1]
        if hi > lo:
            S[k * m : (k + 1) * m, k * m : (k + 1) * m] += (
                C / kkt.lrr_m[None, lo:hi]
            ) @ C.T
    return S


def kkt_reduce_solve(kkt: KktSystem, rhs):
    """Solve the saddle system by block elimination.

    The loss-curvature and dynamics rows are eliminated first (diagonal
    and bidiagonal solves), leaving a dense symmetric system in the
    measurement multipliers; the remaining unknowns come back through the
    same sweeps in reverse.  Raises SchurSingular when the reduced system
    cannot be factored, which is exactly failure of the saddle matrix to
    be invertible at this point.
    """
    rc, was_1d = _as_columns(rhs)
    if rc.shape[0] != kkt.size:
        raise ValueError(f"rhs has {rc.shape[0]} rows, expected {kkt.size}")
    if kkt.lrr_p.size and np.any(kkt.lrr_p == 0.0):
        raise SchurSingular("process loss curvature has exact zeros; boost first")
    if kkt.lrr_m.size and np.any(kkt.lrr_m == 0.0):
        raise SchurSingular("measurement loss curvature has exact zeros; boost first")
    b1, b2, b3, b4, b5 = kkt.split(rc)
    lp = kkt.lrr_p[:, None]
    lm = kkt.lrr_m[:, None]

    t1 = bidiag_solve(kkt.G, b1, transposed=True)
    core = b4 + factor_apply(kkt.Q_fac, (b2 + factor_apply_t(kkt.Q_fac, t1)) / lp)
    rhs_s = (
        blockdiag_apply(kkt.H, bidiag_solve(kkt.G, core))
        - factor_apply(kkt.R_fac, b3 / lm)
        - b5
    )

    S = _schur_complement(kkt)
    convex = (kkt.lrr_p.min(initial=np.inf) > 0) and (kkt.lrr_m.min(initial=np.inf) > 0)
    if convex:
        try:
            cho = scipy.linalg.cho_factor(S)
        except np.linalg.LinAlgError as exc:
            raise SchurSingular(str(exc)) from exc
        wlm = scipy.linalg.cho_solve(cho, rhs_s)
    else:
        # Indefinite curvature: fall back to a dense solve with a condition gate.
        cond = np.linalg.cond(S)
        if not np.isfinite(cond) or cond > PIVOT_COND_LIMIT:
            raise SchurSingular(f"Schur complement condition {cond:.2e}")
        wlm = np.linalg.solve(S, rhs_s)

    wlp = bidiag_solve(
        kkt.G, b1 - blockdiag_apply(kkt.H, wlm, transposed=True), transposed=True
    )
    wp = (b2 + factor_apply_t(kkt.Q_fac, wlp)) / lp
    wm = (b3 + factor_apply_t(kkt.R_fac, wlm)) / lm
    wx = bidiag_solve(kkt.G, b4 + factor_apply(kkt.Q_fac, wp))
    return _restore(np.concatenate([wx, wp, wm, wlp, wlm], axis=0), was_1d)
