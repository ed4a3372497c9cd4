"""Residual and Jacobian assembly for the cell-centered finite-volume scheme.

The steady residual of cell K is the sum of numerical fluxes over its faces,

    R_K(u) = sum_e |e| H(u_L, u_R, n_e),

with ghost construction at wall and far-field edges. The Jacobian is built
by per-edge forward differences of the order-0 residual path, which is the
operator the damped Newton iteration and the discrete adjoint both use.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .gasdynamics import (
    InadmissibleStateError,
    WALL_PROJECTION,
    farfield_ghost,
    get_flux,
    is_admissible,
    lax_friedrichs,
    wall_boundary_flux,
)
from .reconstruction import build_reconstruction

# forward-difference step: relative to the state, floored by free-stream scales
FD_EPS = 1e-8


def _accumulate(res, cells, contrib, sign=1.0):
    n = res.shape[0]
    for k in range(res.shape[1]):
        res[:, k] += sign * np.bincount(cells, weights=contrib[:, k], minlength=n)


def assemble_residual(
    mesh,
    u,
    config,
    order=0,
    flux=lax_friedrichs,
    wall_mode=WALL_PROJECTION,
    limit=True,
):
    """Steady residual, shape (n_cells, 4).

    order 1 evaluates fluxes at limited linear traces; an inadmissible trace
    falls back to its cell average so the residual stays defined whenever the
    cell averages themselves are admissible.
    """
    if isinstance(flux, str):
        flux = get_flux(flux)
    u = np.asarray(u, dtype=float)
    gamma = config.gamma
    if not np.all(is_admissible(u, gamma)):
        bad = int(np.count_nonzero(~is_admissible(u, gamma)))
        raise InadmissibleStateError(
            f"{bad} cell average(s) with nonpositive density or pressure"
        )

    left = mesh.edge_cells[:, 0]
    right = mesh.edge_cells[:, 1]
    if order == 0:
        ul = u[left]
        ur = u[np.where(right >= 0, right, left)]
    else:
        recon = build_reconstruction(mesh, u, order=order, limit=limit)
        ul, ur = recon.edge_traces()
        owner_r = np.where(right >= 0, right, left)
        bad_l = ~is_admissible(ul, gamma)
        bad_r = ~is_admissible(ur, gamma)
        ul[bad_l] = u[left[bad_l]]
        ur[bad_r] = u[owner_r[bad_r]]

    normals = mesh.edge_normals
    lengths = mesh.edge_lengths
    res = np.zeros((mesh.n_cells, 4))

    inter = mesh.interior_edges()
    h = flux(ul[inter], ur[inter], normals[inter], gamma)
    contrib = lengths[inter, None] * h
    _accumulate(res, left[inter], contrib)
    _accumulate(res, right[inter], contrib, sign=-1.0)

    wall = mesh.wall_edges()
    if len(wall):
        hw = wall_boundary_flux(ul[wall], normals[wall], wall_mode, flux, gamma)
        _accumulate(res, left[wall], lengths[wall, None] * hw)

    far = mesh.farfield_edges()
    if len(far):
        ghost = farfield_ghost(ul[far], normals[far], config.freestream(), gamma)
        hf = flux(ul[far], ghost, normals[far], gamma)
        _accumulate(res, left[far], lengths[far, None] * hf)

    if not np.all(np.isfinite(res)):
        raise InadmissibleStateError("residual contains non-finite entries")
    return res


def fd_jacobian_blocks(fun, u0, ref):
    """Forward-difference Jacobian of a batched (m, 4) -> (m, 4) map.

    Steps are signed and relative, floored by the per-component reference
    scales; a step that drives a state inadmissible (detected through
    non-finite output) is retried three times at a tenth of the size.
    Returns (m, 4, 4) with entry [.., i, j] = d fun_i / d u_j.
    """
    u0 = np.asarray(u0, dtype=float)
    base = fun(u0)
    if not np.all(np.isfinite(base)):
        raise InadmissibleStateError("flux evaluation at the base state failed")
    m, k = u0.shape
    out = np.empty((m, k, k))
    sign = np.where(u0 >= 0.0, 1.0, -1.0)
    eps0 = FD_EPS * sign * np.maximum(np.abs(u0), ref)
    for j in range(k):
        eps = eps0[:, j].copy()
        col = None
        bad = None
        for _ in range(4):
            up = u0.copy()
            up[:, j] += eps
            col = (fun(up) - base) / eps[:, None]
            bad = ~np.all(np.isfinite(col), axis=1)
            if not bad.any():
                break
            eps[bad] /= 10.0
        if bad.any():
            raise InadmissibleStateError(
                f"finite-difference step on component {j} kept leaving the "
                f"admissible set for {int(bad.sum())} edge state(s)"
            )
        out[:, :, j] = col
    return out


class BlockMatrix:
    """Square sparse operator over 4-vectors per cell, stored as BSR.

    Wraps the scipy block-sparse matrix so the solver can add per-cell
    diagonal regularization, transpose for the adjoint, and hand the raw
    block arrays to the smoother kernels.
    """

    def __init__(self, bsr):
        if bsr.blocksize != (4, 4):
            raise ValueError("expected 4x4 blocks")
        bsr.sort_indices()
        self.bsr = bsr
        self._diag_pos = None

    @classmethod
    def from_blocks(cls, rows, cols, blocks, n):
        """Assemble from block triplets, given flat or as lists of chunks;
        duplicate positions are summed."""
        if not isinstance(rows, np.ndarray):
            rows = np.concatenate([np.asarray(r, dtype=np.int64) for r in rows])
        if not isinstance(cols, np.ndarray):
            cols = np.concatenate([np.asarray(c, dtype=np.int64) for c in cols])
        if not isinstance(blocks, np.ndarray):
            blocks = np.concatenate([np.asarray(b, dtype=float) for b in blocks])
        rows = rows.astype(np.int64, copy=False).ravel()
        cols = cols.astype(np.int64, copy=False).ravel()
        blocks = blocks.astype(float, copy=False).reshape(-1, 4, 4)
        order = np.lexsort((cols, rows))
        rows, cols, blocks = rows[order], cols[order], blocks[order]
        first = np.ones(len(rows), dtype=bool)
        first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(first)
        data = np.add.reduceat(blocks, starts, axis=0)
        indices = cols[starts].astype(np.int32)
        indptr = np.zeros(n + 1, dtype=np.int32)
        np.cumsum(np.bincount(rows[starts], minlength=n), out=indptr[1:])
        return cls(sp.bsr_matrix((data, indices, indptr), shape=(4 * n, 4 * n)))

    @property
    def n(self):
        """Number of block rows (cells)."""
        return self.bsr.shape[0] // 4

    def matvec(self, x):
        x = np.asarray(x)
        y = self.bsr @ x.reshape(-1)
        return y.reshape(x.shape)

    def transpose(self):
        return BlockMatrix(self.bsr.transpose().tobsr(blocksize=(4, 4)))

    def to_dense(self):
        return self.bsr.toarray()

    def diag_positions(self):
        """Index into the block data array of each row's diagonal block."""
        if self._diag_pos is None:
            indptr, indices = self.bsr.indptr, self.bsr.indices
            counts = np.diff(indptr)
            owner = np.repeat(np.arange(self.n), counts)
            pos = np.flatnonzero(indices == owner)
            if len(pos) != self.n:
                raise ValueError("a block row is missing its diagonal block")
            self._diag_pos = pos
        return self._diag_pos

    def diagonal_blocks(self):
        return self.bsr.data[self.diag_positions()].copy()

    def with_added_diagonal(self, blocks):
        """New operator with (n, 4, 4) blocks added on the block diagonal."""
        data = self.bsr.data.copy()
        data[self.diag_positions()] += blocks
        out = BlockMatrix(
            sp.bsr_matrix(
                (data, self.bsr.indices, self.bsr.indptr), shape=self.bsr.shape
            )
        )
        out._diag_pos = self._diag_pos
        return out


def assemble_jacobian(mesh, u, config, flux=lax_friedrichs, wall_mode=WALL_PROJECTION):
    """Jacobian of the order-0 residual as a BlockMatrix.

    Differentiation runs edge by edge: each numerical flux is perturbed in
    its left and right argument, and the four incidence combinations of the
    edge scatter into the matrix. Ghost-state dependencies at the boundary
    are differenced through the composite flux.
    """
    if isinstance(flux, str):
        flux = get_flux(flux)
    u = np.asarray(u, dtype=float)
    gamma = config.gamma
    ref = config.reference_scales()
    nc = mesh.n_cells
    left = mesh.edge_cells[:, 0]
    right = mesh.edge_cells[:, 1]
    normals = mesh.edge_normals
    lengths = mesh.edge_lengths

    rows, cols, blocks = [], [], []

    inter = mesh.interior_edges()
    li, ri = left[inter], right[inter]
    ni, wi = normals[inter], lengths[inter, None, None]
    ul, ur = u[li], u[ri]
    dhl = fd_jacobian_blocks(lambda v: flux(v, ur, ni, gamma), ul, ref)
    dhr = fd_jacobian_blocks(lambda v: flux(ul, v, ni, gamma), ur, ref)
    rows += [li, li, ri, ri]
    cols += [li, ri, li, ri]
    blocks += [wi * dhl, wi * dhr, -wi * dhl, -wi * dhr]

    wall = mesh.wall_edges()
    if len(wall):
        lw = left[wall]
        nw, ww = normals[wall], lengths[wall, None, None]
        dw = fd_jacobian_blocks(
            lambda v: wall_boundary_flux(v, nw, wall_mode, flux, gamma), u[lw], ref
        )
        rows.append(lw)
        cols.append(lw)
        blocks.append(ww * dw)

    far = mesh.farfield_edges()
    if len(far):
        lf = left[far]
        nf, wf = normals[far], lengths[far, None, None]
        u_inf = config.freestream()
        df = fd_jacobian_blocks(
            lambda v: flux(v, farfield_ghost(v, nf, u_inf, gamma), nf, gamma),
            u[lf],
            ref,
        )
        rows.append(lf)
        cols.append(lf)
        blocks.append(wf * df)

    # explicit zero diagonal so every row owns a diagonal block
    rows.append(np.arange(nc))
    cols.append(np.arange(nc))
    blocks.append(np.zeros((nc, 4, 4)))

    return BlockMatrix.from_blocks(rows, cols, blocks, nc)
