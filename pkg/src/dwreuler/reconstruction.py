"""Piecewise-linear solution representation on cell-centered data.

Gradients come from inverse-distance-weighted least squares over edge
neighbors; cells touching the boundary fall back to the richer vertex
stencil so the normal direction stays resolved. Slopes are optionally
limited per component in the Barth-Jespersen sense so reconstructed face
values stay inside the local envelope of cell averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import INTERIOR, Mesh


def _stencils(mesh: Mesh):
    """Per-cell neighbor lists as CSR; vertex-augmented along the boundary."""
    indptr, indices = mesh.cell_adjacency()
    boundary_cell = np.zeros(mesh.n_cells, dtype=bool)
    b = mesh.boundary_tag != INTERIOR
    boundary_cell[mesh.edge_cells[b, 0]] = True

    if not boundary_cell.any():
        return indptr, indices

    vptr, vcells = mesh.vertex_cells()
    lists = []
    counts = np.zeros(mesh.n_cells, dtype=np.int64)
    for i in range(mesh.n_cells):
        if boundary_cell[i]:
            nb = set()
            for v in mesh.cells[i]:
                nb.update(vcells[vptr[v] : vptr[v + 1]].tolist())
            nb.discard(i)
            nb = sorted(nb)
        else:
            nb = indices[indptr[i] : indptr[i + 1]].tolist()
        lists.append(nb)
        counts[i] = len(nb)
    new_indptr = np.zeros(mesh.n_cells + 1, dtype=np.int64)
    np.cumsum(counts, out=new_indptr[1:])
    new_indices = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
    return new_indptr, new_indices


def lsq_gradients(mesh: Mesh, field: np.ndarray, stencil=None):
    """Weighted least-squares gradients, (nc, ncomp, 2).

    Returns (gradients, n_rank_deficient); cells whose stencil directions
    are linearly dependent get a zero gradient and are counted.
    """
    field = np.atleast_2d(np.asarray(field, dtype=float))
    if field.shape[0] == mesh.n_cells and field.ndim == 2:
        comps = field
    else:
        raise ValueError("field must have one row per cell")
    indptr, indices = _stencils(mesh) if stencil is None else stencil
    owner = np.repeat(np.arange(mesh.n_cells), np.diff(indptr))

    d = mesh.cell_centroids[indices] - mesh.cell_centroids[owner]
    w = 1.0 / np.linalg.norm(d, axis=1)
    wdx = w * d[:, 0]
    wdy = w * d[:, 1]

    nc = mesh.n_cells
    gxx = np.zeros(nc)
    gxy = np.zeros(nc)
    gyy = np.zeros(nc)
    np.add.at(gxx, owner, wdx * d[:, 0])
    np.add.at(gxy, owner, wdx * d[:, 1])
    np.add.at(gyy, owner, wdy * d[:, 1])
    det = gxx * gyy - gxy * gxy
    scale = np.maximum(gxx * gyy, 1e-300)
    ok = det > 1e-12 * scale
    n_bad = int(np.count_nonzero(~ok))
    det_safe = np.where(ok, det, 1.0)

    du = comps[indices] - comps[owner]  # (nstencil, ncomp)
    bx = np.zeros((nc, du.shape[1]))
    by = np.zeros((nc, du.shape[1]))
    np.add.at(bx, owner, wdx[:, None] * du)
    np.add.at(by, owner, wdy[:, None] * du)

    gx = (gyy[:, None] * bx - gxy[:, None] * by) / det_safe[:, None]
    gy = (gxx[:, None] * by - gxy[:, None] * bx) / det_safe[:, None]
    grads = np.stack([gx, gy], axis=2)
    grads[~ok] = 0.0
    return grads, n_bad


def barth_jespersen(mesh: Mesh, field: np.ndarray, grads: np.ndarray, stencil=None):
    """Per-cell, per-component limiter factors in [0, 1].

    Face-midpoint reconstructions are confined to the envelope of the cell's
    own and neighboring averages.
    """
    indptr, indices = _stencils(mesh) if stencil is None else stencil
    owner = np.repeat(np.arange(mesh.n_cells), np.diff(indptr))
    u = np.asarray(field, dtype=float)

    umin = u.copy()
    umax = u.copy()
    np.minimum.at(umin, owner, u[indices])
    np.maximum.at(umax, owner, u[indices])

    mids = mesh.edge_midpoints()[mesh.cell_edges]  # (nc, 3, 2)
    dx = mids - mesh.cell_centroids[:, None, :]
    # delta: (nc, 3, ncomp)
    delta = np.einsum("nfx,ncx->nfc", dx, grads)
    pos = delta > 0.0
    neg = delta < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        r_up = (umax[:, None, :] - u[:, None, :]) / delta
        r_dn = (umin[:, None, :] - u[:, None, :]) / delta
    phi_f = np.ones_like(delta)
    phi_f = np.where(pos, np.minimum(1.0, r_up), phi_f)
    phi_f = np.where(neg, np.minimum(1.0, r_dn), phi_f)
    return np.clip(phi_f.min(axis=1), 0.0, 1.0)


@dataclass
class Reconstruction:
    """Evaluable linear representation u(x) = u_K + g_K (x - x_K)."""

    mesh: Mesh
    field: np.ndarray  # (nc, ncomp) cell averages
    gradients: np.ndarray  # (nc, ncomp, 2), limiter already folded in
    raw_gradients: np.ndarray
    limiter: np.ndarray | None
    order: int
    n_rank_deficient: int = 0

    def evaluate_many(self, cells, points):
        """Reconstructed values of given cells at given points, (n, ncomp)."""
        cells = np.asarray(cells)
        points = np.asarray(points, dtype=float)
        base = self.field[cells]
        if self.order == 0:
            return base.copy()
        d = points - self.mesh.cell_centroids[cells]
        return base + np.einsum("ncx,nx->nc", self.gradients[cells], d)

    def edge_traces(self):
        """Left/right states at edge midpoints; right rows of boundary edges
        repeat the left state (ghosts are the flux routines' business)."""
        mesh = self.mesh
        mids = mesh.edge_midpoints()
        left = mesh.edge_cells[:, 0]
        right = mesh.edge_cells[:, 1]
        interior = right >= 0
        ul = self.evaluate_many(left, mids)
        ur = ul.copy()
        ur[interior] = self.evaluate_many(right[interior], mids[interior])
        return ul, ur


def build_reconstruction(mesh: Mesh, field, order=1, limit=True):
    """Construct the reconstruction used for traces and prolongation."""
    field = np.asarray(field, dtype=float)
    if field.ndim == 1:
        field = field[:, None]
    if order == 0:
        zeros = np.zeros((mesh.n_cells, field.shape[1], 2))
        return Reconstruction(mesh, field, zeros, zeros, None, 0)
    stencil = _stencils(mesh)
    raw, n_bad = lsq_gradients(mesh, field, stencil)
    if limit:
        phi = barth_jespersen(mesh, field, raw, stencil)
        grads = raw * phi[:, :, None]
    else:
        phi = None
        grads = raw
    return Reconstruction(mesh, field, grads, raw, phi, 1, n_bad)
