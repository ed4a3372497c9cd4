"""Unstructured triangular meshes for the adaptive Euler solver.

Covers deterministic O-grid generation around airfoil profiles (multi-body
via a slit cut), red refinement with green closure under a 2:1 level balance,
agglomeration coarsening for multigrid, solution prolongation, and a
versioned ASCII exchange format.

Conventions: cells are counter-clockwise vertex triples; every edge stores
the cell on its left (the one traversing the edge in CCW order) and the unit
normal pointing away from it, so boundary normals point out of the domain.
"""

from __future__ import annotations

import hashlib
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import CircleProfile, GeometryError, Profile

INTERIOR = 0
WALL = 1
FARFIELD = 2

_TAG_NAMES = {WALL: "wall", FARFIELD: "farfield"}
_TAG_VALUES = {v: k for k, v in _TAG_NAMES.items()}

MESH_FORMAT_HEADER = "dwrmesh 1"


class MeshError(ValueError):
    """Raised for topologically or geometrically invalid mesh input."""


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


@dataclass(eq=False)
class Mesh:
    """Immutable triangular mesh with derived edge/adjacency structure."""

    vertices: np.ndarray  # (nv, 2)
    cells: np.ndarray  # (nc, 3) CCW
    edges: np.ndarray  # (ne, 2) directed as traversed by the left cell
    edge_cells: np.ndarray  # (ne, 2), right = -1 on boundary
    edge_normals: np.ndarray  # (ne, 2) unit, outward from left cell
    edge_lengths: np.ndarray  # (ne,)
    cell_edges: np.ndarray  # (nc, 3) edge index per local edge
    boundary_tag: np.ndarray  # (ne,) INTERIOR / WALL / FARFIELD
    boundary_body: np.ndarray  # (ne,) wall body index, -1 elsewhere
    cell_levels: np.ndarray  # (nc,)
    cell_areas: np.ndarray  # (nc,)
    cell_centroids: np.ndarray  # (nc, 2)
    # refinement lineage: index into the parent mesh per cell (identity-free
    # meshes such as generated or loaded ones carry None)
    parent_cell: np.ndarray | None = None
    # green-closure bookkeeping: pairs of cell indices forming one bisected
    # red parent, plus that parent's vertex triple and level
    green_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    green_parent_tris: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), int))
    green_parent_levels: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    # projection targets for refinement: wall profiles per body, far-field circle
    wall_profiles: tuple = ()
    farfield_circle: CircleProfile | None = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    def interior_edges(self):
        return np.flatnonzero(self.boundary_tag == INTERIOR)

    def wall_edges(self):
        return np.flatnonzero(self.boundary_tag == WALL)

    def farfield_edges(self):
        return np.flatnonzero(self.boundary_tag == FARFIELD)

    def cell_adjacency(self):
        """Cell-to-cell adjacency over interior edges as CSR (indptr, indices)."""
        if not hasattr(self, "_adjacency"):
            inter = self.interior_edges()
            a = self.edge_cells[inter, 0]
            b = self.edge_cells[inter, 1]
            src = np.concatenate([a, b])
            dst = np.concatenate([b, a])
            order = np.lexsort((dst, src))
            src, dst = src[order], dst[order]
            indptr = np.zeros(self.n_cells + 1, dtype=np.int64)
            np.add.at(indptr, src + 1, 1)
            np.cumsum(indptr, out=indptr)
            self._adjacency = (indptr, dst.astype(np.int64))
        return self._adjacency

    def vertex_cells(self):
        """Vertex-to-cell incidence as CSR (indptr, indices)."""
        if not hasattr(self, "_vertex_cells"):
            v = self.cells.ravel()
            c = np.repeat(np.arange(self.n_cells), 3)
            order = np.lexsort((c, v))
            v, c = v[order], c[order]
            indptr = np.zeros(self.n_vertices + 1, dtype=np.int64)
            np.add.at(indptr, v + 1, 1)
            np.cumsum(indptr, out=indptr)
            self._vertex_cells = (indptr, c.astype(np.int64))
        return self._vertex_cells

    def edge_midpoints(self):
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def edge_sign(self):
        """Per (cell, local edge): +1 where the cell is the edge's left cell."""
        if not hasattr(self, "_edge_sign"):
            left = self.edge_cells[self.cell_edges, 0]
            self._edge_sign = np.where(
                left == np.arange(self.n_cells)[:, None], 1.0, -1.0
            )
        return self._edge_sign

    def validate(self, check_balance=True):
        """Assert structural invariants; raises MeshError on violation."""
        if np.any(self.cell_areas <= 0.0):
            bad = int(np.argmin(self.cell_areas))
            raise MeshError(f"nonpositive area in cell {bad}")
        ln = self.edge_lengths[:, None] * self.edge_normals
        closure = np.zeros((self.n_cells, 2))
        np.add.at(closure, self.edge_cells[:, 0], ln)
        inter = self.edge_cells[:, 1] >= 0
        np.subtract.at(closure, self.edge_cells[inter, 1], ln[inter])
        scale = np.sqrt(self.cell_areas)[:, None]
        worst = np.abs(closure / scale).max()
        if worst > 1e-10:
            raise MeshError(f"geometric closure violated: max |sum l*n| = {worst:.3e}")
        boundary = self.edge_cells[:, 1] < 0
        if np.any(self.boundary_tag[boundary] == INTERIOR):
            raise MeshError("boundary edge without a wall/farfield tag")
        if np.any(self.boundary_tag[~boundary] != INTERIOR):
            raise MeshError("interior edge carrying a boundary tag")
        if check_balance:
            lv = self.cell_levels
            il = self.edge_cells[~boundary]
            if len(il) and np.abs(lv[il[:, 0]] - lv[il[:, 1]]).max() > 1:
                raise MeshError("2:1 refinement balance violated")
        return self

    def retagged(self, tag_map):
        """Copy with boundary tags replaced via {old_tag: new_tag}; test helper."""
        tags = self.boundary_tag.copy()
        for old, new in tag_map.items():
            tags[self.boundary_tag == old] = new
        out = Mesh(
            vertices=self.vertices,
            cells=self.cells,
            edges=self.edges,
            edge_cells=self.edge_cells,
            edge_normals=self.edge_normals,
            edge_lengths=self.edge_lengths,
            cell_edges=self.cell_edges,
            boundary_tag=tags,
            boundary_body=self.boundary_body.copy(),
            cell_levels=self.cell_levels,
            cell_areas=self.cell_areas,
            cell_centroids=self.cell_centroids,
            wall_profiles=self.wall_profiles,
            farfield_circle=self.farfield_circle,
        )
        return out

    def content_hash(self):
        """SHA-256 of the ASCII serialization, for output provenance headers."""
        buf = io.StringIO()
        _write_mesh_stream(self, buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def build_mesh(
    vertices,
    cells,
    tagged_edges,
    levels=None,
    parent_cell=None,
    green_pairs=None,
    green_parent_tris=None,
    green_parent_levels=None,
    wall_profiles=(),
    farfield_circle=None,
):
    """Construct a Mesh from raw arrays, deriving all edge structure.

    tagged_edges maps canonical (min_vertex, max_vertex) pairs to either a
    tag or a (tag, body) pair; every boundary edge must be covered.
    """
    vertices = np.asarray(vertices, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    nc = len(cells)
    if nc == 0:
        raise MeshError("empty mesh")

    p0 = vertices[cells[:, 0]]
    p1 = vertices[cells[:, 1]]
    p2 = vertices[cells[:, 2]]
    twice_area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (
        p1[:, 1] - p0[:, 1]
    ) * (p2[:, 0] - p0[:, 0])
    if np.any(twice_area <= 0.0):
        bad = int(np.argmin(twice_area))
        raise MeshError(f"cell {bad} is degenerate or clockwise")
    areas = 0.5 * twice_area
    centroids = (p0 + p1 + p2) / 3.0

    directed = np.concatenate(
        [cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]], axis=0
    )
    owner = np.tile(np.arange(nc, dtype=np.int64), 3)
    lo = directed.min(axis=1)
    hi = directed.max(axis=1)
    key = lo * len(vertices) + hi
    order = np.argsort(key, kind="stable")
    key_sorted = key[order]
    first = np.ones(len(key_sorted), dtype=bool)
    first[1:] = key_sorted[1:] != key_sorted[:-1]
    edge_of = np.cumsum(first) - 1
    ne = int(edge_of[-1]) + 1 if len(edge_of) else 0

    counts = np.bincount(edge_of, minlength=ne)
    if np.any(counts > 2):
        raise MeshError("non-manifold edge (more than two adjacent cells)")

    edges = np.empty((ne, 2), dtype=np.int64)
    edge_cells = np.full((ne, 2), -1, dtype=np.int64)
    first_pos = np.flatnonzero(first)
    edges[:] = directed[order[first_pos]]
    edge_cells[:, 0] = owner[order[first_pos]]
    second_pos = np.flatnonzero(~first)
    second_edges = edge_of[second_pos]
    # the partner must traverse the edge in the opposite direction
    if np.any(
        (directed[order[second_pos]] != edges[second_edges][:, ::-1]).any(axis=1)
    ):
        raise MeshError("inconsistent cell orientation across an edge")
    edge_cells[second_edges, 1] = owner[order[second_pos]]

    cell_edges = np.empty((nc, 3), dtype=np.int64)
    inv = np.empty(3 * nc, dtype=np.int64)
    inv[order] = edge_of
    cell_edges[:, 0] = inv[0:nc]
    cell_edges[:, 1] = inv[nc : 2 * nc]
    cell_edges[:, 2] = inv[2 * nc : 3 * nc]

    dvec = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    lengths = np.linalg.norm(dvec, axis=1)
    if np.any(lengths <= 0.0):
        raise MeshError("zero-length edge")
    normals = np.stack([dvec[:, 1], -dvec[:, 0]], axis=1) / lengths[:, None]

    tags = np.zeros(ne, dtype=np.int8)
    bodies = np.full(ne, -1, dtype=np.int32)
    boundary_idx = np.flatnonzero(edge_cells[:, 1] < 0)
    for e in boundary_idx:
        a, b = int(edges[e, 0]), int(edges[e, 1])
        entry = tagged_edges.get(_edge_key(a, b))
        if entry is None:
            raise MeshError(f"boundary edge ({a},{b}) has no tag")
        if isinstance(entry, tuple):
            tags[e], bodies[e] = entry
        else:
            tags[e] = entry

    if levels is None:
        levels = np.zeros(nc, dtype=np.int32)
    return Mesh(
        vertices=vertices,
        cells=cells,
        edges=edges,
        edge_cells=edge_cells,
        edge_normals=normals,
        edge_lengths=lengths,
        cell_edges=cell_edges,
        boundary_tag=tags,
        boundary_body=bodies,
        cell_levels=np.asarray(levels, dtype=np.int32),
        cell_areas=areas,
        cell_centroids=centroids,
        parent_cell=None if parent_cell is None else np.asarray(parent_cell),
        green_pairs=(
            np.zeros((0, 2), int) if green_pairs is None else np.asarray(green_pairs)
        ),
        green_parent_tris=(
            np.zeros((0, 3), int)
            if green_parent_tris is None
            else np.asarray(green_parent_tris)
        ),
        green_parent_levels=(
            np.zeros(0, int)
            if green_parent_levels is None
            else np.asarray(green_parent_levels)
        ),
        wall_profiles=tuple(wall_profiles),
        farfield_circle=farfield_circle,
    )


# ---------------------------------------------------------------------------
# generation


def _as_profiles(profile):
    from .geometry import Naca4Profile, PointListProfile

    if isinstance(profile, (list, tuple)) and not isinstance(profile[0], (int, float)):
        out = []
        for p in profile:
            out.extend(_as_profiles(p))
        return out
    if isinstance(profile, Profile):
        return [profile]
    if isinstance(profile, str):
        return [Naca4Profile(profile, closed_te=True)]
    arr = np.asarray(profile, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 2:
        return [PointListProfile(arr)]
    raise GeometryError(f"cannot interpret profile spec: {profile!r}")


def _radial_fractions(m, first_step):
    """Geometrically stretched fractions t_0=0..t_m=1 with t_1 ~ first_step."""
    if first_step * m >= 1.0:
        return np.linspace(0.0, 1.0, m + 1)
    lo, hi = 1.0 + 1e-12, 2.0
    while (hi - 1.0) / (hi**m - 1.0) > first_step:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (mid - 1.0) / (mid**m - 1.0) > first_step:
            lo = mid
        else:
            hi = mid
    g = 0.5 * (lo + hi)
    steps = first_step * g ** np.arange(m)
    t = np.concatenate([[0.0], np.cumsum(steps)])
    return t / t[-1]


def _mirror_points(upper):
    """Complete an upper-half point set [j=0..n/2] to a full mirrored ring."""
    lower = upper[1:-1][::-1].copy()
    lower[:, 1] = -lower[:, 1]
    return np.vstack([upper, lower])


def _ring_smooth(ring, weight, passes):
    """Periodic Laplacian smoothing within one ring of points."""
    for _ in range(passes):
        avg = 0.5 * (np.roll(ring, 1, axis=0) + np.roll(ring, -1, axis=0))
        ring = ring + weight * (avg - ring)
    return ring


def _ring_normals(ring):
    """Outward vertex normals of a CCW closed polyline."""
    d = np.roll(ring, -1, axis=0) - ring
    seg = np.stack([d[:, 1], -d[:, 0]], axis=1)
    seg /= np.linalg.norm(seg, axis=1)[:, None]
    vn = seg + np.roll(seg, 1, axis=0)
    norms = np.linalg.norm(vn, axis=1)
    thin = norms < 0.1
    if thin.any():
        # opposite adjacent normals (slit tip): fall back to the chord normal
        chord = np.roll(ring, -1, axis=0) - np.roll(ring, 1, axis=0)
        alt = np.stack([chord[:, 1], -chord[:, 0]], axis=1)
        alt /= np.maximum(np.linalg.norm(alt, axis=1), 1e-300)[:, None]
        vn[thin] = alt[thin]
        norms = np.linalg.norm(vn, axis=1)
    return vn / norms[:, None]


def _march_rings(ring0, center, radius, m_rings):
    """Advancing-front ring construction for multi-body contours.

    Rings march along smoothed vertex normals (the slit opens into a fan)
    until the front is comfortably star-shaped around the center, then blend
    radially onto the far-field circle along each vertex's own ray.
    """
    r0 = np.linalg.norm(ring0 - center, axis=1)
    span = radius - r0.mean()
    r_switch = min(2.2 * r0.max(), 0.45 * radius)
    spacing = np.linalg.norm(np.roll(ring0, -1, axis=0) - ring0, axis=1).mean()
    t = _radial_fractions(m_rings, min(0.5, 0.3 * spacing / span))

    rings = [ring0]
    front = ring0.copy()
    k = 0
    while k < m_rings - 2 and np.linalg.norm(front - center, axis=1).min() < r_switch:
        step = (t[k + 1] - t[k]) * span
        normals = _ring_normals(front)
        normals = _ring_smooth(normals, 0.5, passes=4)
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        # scale steps by local spacing so clustered regions keep thin layers
        seg = np.linalg.norm(np.roll(front, -1, axis=0) - front, axis=1)
        local = 0.5 * (seg + np.roll(seg, 1))
        local = _ring_smooth(local[:, None], 0.5, passes=3)[:, 0]
        scale = np.clip(local / local.mean(), 0.35, 1.0)
        front = front + (step * scale)[:, None] * normals
        # position smoothing ramps in once layers are thick enough to absorb it
        front = _ring_smooth(front, 0.35 * min(1.0, k / 5.0), passes=2)
        rings.append(front.copy())
        k += 1

    # monotone angles make the remaining radial rays non-crossing
    ang = np.unwrap(np.arctan2(front[:, 1] - center[1], front[:, 0] - center[0]))
    eps = 1e-4 * 2.0 * np.pi / len(front)
    for i in range(1, len(ang)):
        if ang[i] < ang[i - 1] + eps:
            ang[i] = ang[i - 1] + eps
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    rad = np.linalg.norm(front - center, axis=1)
    rings[-1] = center + rad[:, None] * dirs

    n_rad = m_rings - k
    for i in range(1, n_rad + 1):
        f = (t[k + i] - t[k]) / (1.0 - t[k])
        rings.append(center + ((1.0 - f) * rad + f * radius)[:, None] * dirs)
    return rings


def _single_contour(profiles, n_around, symmetric):
    """Ring-0 points, wall edge list with bodies, and slit merge pairs."""
    if len(profiles) == 1:
        prof = profiles[0]
        if symmetric:
            half = n_around // 2
            upper = prof.point(np.arange(half + 1) / n_around)
            upper[0, 1] = 0.0
            upper[-1, 1] = 0.0
            pts = _mirror_points(upper)
        else:
            pts = prof.points(n_around)
        n = len(pts)
        wall_edges = [((j, (j + 1) % n), 0) for j in range(n)]
        return pts, wall_edges, []

    # multi-body: join the contours with a zero-width slit so the exterior
    # becomes an annulus; slit twins are merged after grid construction
    per = [p.points(n_around // len(profiles)) for p in profiles]
    if len(profiles) != 2:
        raise GeometryError("mesh generation supports one or two bodies")
    a_pts, b_pts = per
    # bounding boxes intersecting in both axes means the bodies interleave
    # (or coincide); the slit construction needs clear space between them
    a_lo, a_hi = a_pts.min(axis=0), a_pts.max(axis=0)
    b_lo, b_hi = b_pts.min(axis=0), b_pts.max(axis=0)
    if np.all(a_lo <= b_hi) and np.all(b_lo <= a_hi):
        raise GeometryError(
            "the two profiles overlap; offset the second body clear of the first"
        )
    d2 = ((a_pts[:, None, :] - b_pts[None, :, :]) ** 2).sum(axis=-1)
    # keep anchors off the sharp trailing-edge corner (parameter 0), where
    # sample clustering and the wedge make the slit fan degenerate
    for pts, axis in ((a_pts, 0), (b_pts, 1)):
        nn = len(pts)
        j = np.arange(nn)
        near_te = np.minimum(j, nn - j) < max(2, nn // 10)
        if axis == 0:
            d2[near_te, :] = np.inf
        else:
            d2[:, near_te] = np.inf
    ia, ib = np.unravel_index(np.argmin(d2), d2.shape)
    gap = np.sqrt(d2[ia, ib])
    spacing = max(
        np.linalg.norm(np.diff(a_pts, axis=0), axis=1).mean(),
        np.linalg.norm(np.diff(b_pts, axis=0), axis=1).mean(),
    )
    n_bridge = max(1, int(round(gap / spacing)) - 1)
    tb = np.arange(1, n_bridge + 1) / (n_bridge + 1)
    bridge = a_pts[ia] * (1 - tb[:, None]) + b_pts[ib] * tb[:, None]

    a_loop = np.roll(a_pts, -ia, axis=0)  # starts at the bridge anchor on A
    b_loop = np.roll(b_pts, -ib, axis=0)
    blocks = [
        a_loop,  # 0 .. nA-1, wall body 0, starts/ends at anchor A
        a_loop[:1],  # duplicate anchor A (slit twin)
        bridge,  # slit side 1
        b_loop,  # wall body 1
        b_loop[:1],  # duplicate anchor B (slit twin)
        bridge[::-1],  # slit side 2 (twins of side 1)
    ]
    pts = np.vstack(blocks)
    nA, nB, m = len(a_loop), len(b_loop), len(bridge)
    idx_a_dup = nA
    idx_bridge1 = nA + 1
    idx_b = nA + 1 + m
    idx_b_dup = idx_b + nB
    idx_bridge2 = idx_b_dup + 1
    n = len(pts)

    wall_edges = []
    for j in range(nA - 1):
        wall_edges.append(((j, j + 1), 0))
    wall_edges.append(((nA - 1, idx_a_dup), 0))  # closes A through the twin
    for j in range(nB - 1):
        wall_edges.append(((idx_b + j, idx_b + j + 1), 1))
    wall_edges.append(((idx_b + nB - 1, idx_b_dup), 1))

    merge_pairs = [(0, idx_a_dup), (idx_b, idx_b_dup)]
    for k in range(m):
        merge_pairs.append((idx_bridge1 + k, idx_bridge2 + (m - 1 - k)))
    assert n == idx_bridge2 + m
    return pts, wall_edges, merge_pairs


def generate_airfoil_mesh(profile, farfield_radius, target_cells, symmetric=False):
    """Deterministic O-type triangulation between profile(s) and a circle.

    profile accepts a NACA 4-digit code string, an (n, 2) point array, a
    Profile instance, or a list of one or two of those (two-body). With
    symmetric=True (single symmetric profile only) the vertex set is exactly
    mirror-symmetric about the chord line.
    """
    if farfield_radius < 10.0:
        raise GeometryError("far-field radius must be at least 10 chords")
    profiles = _as_profiles(profile)
    if symmetric and len(profiles) > 1:
        raise GeometryError("symmetric generation supports a single profile")
    if symmetric and getattr(profiles[0], "symmetric", False) is False:
        raise GeometryError("symmetric generation needs a symmetric profile")

    # ring/point counts: 2*n*m cells, biased toward more points around
    n_around = int(round(np.sqrt(max(target_cells, 24))))
    n_around = max(16, n_around + (n_around % 2))
    if len(profiles) == 2:
        n_around = max(n_around, 64)
        n_around += n_around % 2
    m_rings = max(6, int(round(target_cells / (2 * n_around))))
    if len(profiles) == 2:
        # the slit fan needs room to open before the radial blend takes over
        m_rings = max(m_rings, 32)
    achieved = 2 * n_around * m_rings
    if abs(achieved - target_cells) > 0.5 * target_cells:
        warnings.warn(
            f"target of {target_cells} cells unreachable; generating {achieved}",
            stacklevel=2,
        )

    ring0, wall_edges, merge_pairs = _single_contour(profiles, n_around, symmetric)
    n = len(ring0)
    center = np.array([ring0[:, 0].mean(), 0.0 if symmetric else ring0[:, 1].mean()])
    circle = CircleProfile(farfield_radius, center)

    # outer ring: uniform angles aligned with the first contour point
    phi0 = np.arctan2(ring0[0, 1] - center[1], ring0[0, 0] - center[0])
    if symmetric:
        half = n // 2
        ang = phi0 + 2.0 * np.pi * np.arange(half + 1) / n
        upper = center + farfield_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        upper[0, 1] = center[1]
        upper[-1, 1] = center[1]
        ring_out = _mirror_points(upper)
    else:
        ang = phi0 + 2.0 * np.pi * np.arange(n) / n
        ring_out = center + farfield_radius * np.stack(
            [np.cos(ang), np.sin(ang)], axis=1
        )

    mean_spacing = np.linalg.norm(np.roll(ring0, -1, axis=0) - ring0, axis=1).mean()
    first_step = min(0.5, mean_spacing / max(farfield_radius - 1.0, 1.0) * 1.5)
    t = _radial_fractions(m_rings, first_step)

    if len(profiles) == 1:
        rings = [ring0]
        for k in range(1, m_rings + 1):
            rings.append((1.0 - t[k]) * ring0 + t[k] * ring_out)
    else:
        rings = _march_rings(ring0, center, farfield_radius, m_rings)
        m_rings = len(rings) - 1  # the march may extend the radial budget
    vertices = np.vstack(rings)

    def vid(k, j):
        return k * n + j % n

    tris = []
    if symmetric:
        half = n // 2
        cols = list(range(half))
    else:
        cols = list(range(n))
    for k in range(m_rings):
        for j in cols:
            a = vid(k, j)
            b = vid(k, j + 1)
            c = vid(k + 1, j + 1)
            d = vid(k + 1, j)
            # contour runs CCW around the body, so the domain-side CCW order
            # of the quad is a, d, c, b; split along the shorter diagonal
            if np.sum((vertices[a] - vertices[c]) ** 2) <= np.sum(
                (vertices[b] - vertices[d]) ** 2
            ):
                tris.append((a, d, c))
                tris.append((a, c, b))
            else:
                tris.append((a, d, b))
                tris.append((b, d, c))
    if symmetric:
        mirrored = []
        reflect = lambda j: (n - j) % n  # noqa: E731 - local index map
        for k in range(m_rings):
            base = 2 * k * half
            for idx in range(base, base + 2 * half):
                i0, i1, i2 = tris[idx]
                m0 = vid(i0 // n, reflect(i0 % n))
                m1 = vid(i1 // n, reflect(i1 % n))
                m2 = vid(i2 // n, reflect(i2 % n))
                mirrored.append((m0, m2, m1))  # reversed for CCW
        tris.extend(mirrored)
        # mirror vertex coordinates exactly
        for k in range(m_rings + 1):
            for j in range(1, half):
                src = vid(k, j)
                dst = vid(k, n - j)
                vertices[dst, 0] = vertices[src, 0]
                vertices[dst, 1] = -vertices[src, 1]
    tris = np.asarray(tris, dtype=np.int64)

    # merge slit twins (two-body): remap and compress vertex indices
    if merge_pairs:
        remap = np.arange(len(vertices))
        for keep, drop in merge_pairs:  # twins only exist on ring 0
            remap[vid(0, drop)] = vid(0, keep)
        used = np.zeros(len(vertices), dtype=bool)
        used[remap[tris.ravel()]] = True
        new_index = np.cumsum(used) - 1
        vertices = vertices[used]
        tris = new_index[remap[tris.ravel()]].reshape(-1, 3)
        wall_map = lambda j: int(new_index[remap[vid(0, j)]])  # noqa: E731
    else:
        wall_map = lambda j: vid(0, j)  # noqa: E731

    tagged = {}
    for (ja, jb), body in wall_edges:
        tagged[_edge_key(wall_map(ja), wall_map(jb))] = (WALL, body)
    if merge_pairs:
        off = len(vertices) - n  # outer ring survived the compression intact
        outer_ids = [off + j for j in range(n)]
    else:
        outer_ids = [vid(m_rings, j) for j in range(n)]
    for j in range(n):
        tagged[_edge_key(outer_ids[j], outer_ids[(j + 1) % n])] = (FARFIELD, -1)

    if merge_pairs:
        fixed = np.zeros(len(vertices), dtype=bool)
        for a, b in tagged:
            fixed[a] = True
            fixed[b] = True
        vertices = _untangle(vertices, tris, fixed)

    mesh = build_mesh(
        vertices,
        tris,
        tagged,
        wall_profiles=profiles,
        farfield_circle=circle,
    )
    return mesh.validate()


def _tri_areas(verts, tris):
    p0 = verts[tris[:, 0]]
    p1 = verts[tris[:, 1]]
    p2 = verts[tris[:, 2]]
    return 0.5 * (
        (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
        - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    )


def _untangle(verts, tris, fixed, max_passes=600):
    """Local Laplacian smoothing until all triangle areas are positive.

    Multi-body marched grids can fold in small pockets near the slit tips;
    only vertices in a growing neighborhood of inverted triangles move, so
    the stretched wall layers elsewhere stay untouched.
    """
    verts = verts.copy()
    pairs = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    lo = pairs.min(axis=1)
    hi = pairs.max(axis=1)
    uniq = np.unique(lo * len(verts) + hi)
    ea = uniq // len(verts)
    eb = uniq % len(verts)
    src = np.concatenate([ea, eb])
    dst = np.concatenate([eb, ea])
    counts = np.maximum(np.bincount(src, minlength=len(verts)), 1)

    for it in range(max_passes):
        areas = _tri_areas(verts, tris)
        bad = areas <= 0.0
        if not bad.any():
            break
        active = np.zeros(len(verts), dtype=bool)
        active[tris[bad].ravel()] = True
        for _ in range(1 + it // 25):  # widen the stencil if progress stalls
            grown = active.copy()
            grown[dst[active[src]]] = True
            active = grown
        active &= ~fixed
        sums = np.zeros_like(verts)
        np.add.at(sums, src, verts[dst])
        avg = sums / counts[:, None]
        verts = np.where(active[:, None], verts + 0.5 * (avg - verts), verts)
    if _tri_areas(verts, tris).min() <= 0.0:
        raise GeometryError("could not untangle multi-body mesh")
    return verts


# ---------------------------------------------------------------------------
# refinement


def _project_midpoint(mesh, tag, body, mid):
    if tag == WALL and 0 <= body < len(mesh.wall_profiles):
        return mesh.wall_profiles[body].project(mid[None])[0]
    if tag == FARFIELD and mesh.farfield_circle is not None:
        return mesh.farfield_circle.project(mid[None])[0]
    return mid


def uniform_refine(mesh, times=1, project_boundary=True):
    """Red-split every cell `times` times; parent_cell points one level up.

    Conforming by construction, so no closure is needed; green bookkeeping
    resets (the result is treated as a fresh red mesh).
    """
    out = mesh
    for _ in range(times):
        out, _ = _uniform_refine_once(out, project_boundary)
    return out


def _uniform_refine_once(mesh, project_boundary):
    nv = mesh.n_vertices
    ne = mesh.n_edges
    mids = mesh.edge_midpoints()
    if project_boundary:
        for e in np.flatnonzero(mesh.boundary_tag != INTERIOR):
            mids[e] = _project_midpoint(
                mesh, int(mesh.boundary_tag[e]), int(mesh.boundary_body[e]), mids[e]
            )
    vertices = np.vstack([mesh.vertices, mids])
    mid_id = nv + np.arange(ne)

    c = mesh.cells
    # local edges: (v0,v1), (v1,v2), (v2,v0)
    m01 = mid_id[mesh.cell_edges[:, 0]]
    m12 = mid_id[mesh.cell_edges[:, 1]]
    m20 = mid_id[mesh.cell_edges[:, 2]]
    children = np.empty((4 * mesh.n_cells, 3), dtype=np.int64)
    children[0::4] = np.stack([c[:, 0], m01, m20], axis=1)
    children[1::4] = np.stack([m01, c[:, 1], m12], axis=1)
    children[2::4] = np.stack([m20, m12, c[:, 2]], axis=1)
    children[3::4] = np.stack([m01, m12, m20], axis=1)

    tagged = {}
    for e in np.flatnonzero(mesh.boundary_tag != INTERIOR):
        a, b = int(mesh.edges[e, 0]), int(mesh.edges[e, 1])
        m = int(mid_id[e])
        entry = (int(mesh.boundary_tag[e]), int(mesh.boundary_body[e]))
        tagged[_edge_key(a, m)] = entry
        tagged[_edge_key(m, b)] = entry

    out = build_mesh(
        vertices,
        children,
        tagged,
        levels=np.repeat(mesh.cell_levels + 1, 4),
        parent_cell=np.repeat(np.arange(mesh.n_cells), 4),
        wall_profiles=mesh.wall_profiles,
        farfield_circle=mesh.farfield_circle,
    )
    return out, np.repeat(np.arange(mesh.n_cells), 4)


def refine_cells(mesh, marked, project_boundary=True):
    """Red-refine the marked cells with green closure and 2:1 balance.

    Green cells are never refined directly: marking one re-refines its red
    parent. Existing green closures adjacent to new refinement are reverted
    before splitting. parent_cell on the result maps every new cell to the
    input cell containing it.
    """
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if len(marked) == 0:
        raise MeshError("refine_cells needs a nonempty marked set")
    if marked.min() < 0 or marked.max() >= mesh.n_cells:
        raise MeshError("marked cell index out of range")

    # --- assemble the red skeleton: green pairs collapse to their parents
    nc = mesh.n_cells
    in_green = np.full(nc, -1, dtype=np.int64)  # green-record index per cell
    for g, (c1, c2) in enumerate(mesh.green_pairs):
        in_green[c1] = g
        in_green[c2] = g

    red_tris = []
    red_levels = []
    red_sources = []  # current-cell indices covering each skeleton cell
    skel_of_cell = np.full(nc, -1, dtype=np.int64)
    seen_green = set()
    pre_mid = {}  # parent-edge key -> existing hanging midpoint vertex
    for i in range(nc):
        g = in_green[i]
        if g < 0:
            skel_of_cell[i] = len(red_tris)
            red_tris.append(mesh.cells[i])
            red_levels.append(int(mesh.cell_levels[i]))
            red_sources.append([i])
        elif g not in seen_green:
            seen_green.add(g)
            c1, c2 = (int(x) for x in mesh.green_pairs[g])
            sk = len(red_tris)
            skel_of_cell[c1] = sk
            skel_of_cell[c2] = sk
            parent_tri = mesh.green_parent_tris[g]
            red_tris.append(parent_tri)
            red_levels.append(int(mesh.green_parent_levels[g]))
            red_sources.append([c1, c2])
            # recover the bisected edge: the midpoint is the child vertex
            # missing from the parent, flanked by one parent vertex per child
            pv = set(int(v) for v in parent_tri)
            s1 = set(int(v) for v in mesh.cells[c1])
            s2 = set(int(v) for v in mesh.cells[c2])
            mid = (s1 & s2) - pv
            if len(mid) != 1:
                raise MeshError("corrupt green-closure record")
            (mid,) = mid
            ea = (s1 - s2) & pv
            eb = (s2 - s1) & pv
            (ea,) = ea
            (eb,) = eb
            pre_mid[_edge_key(ea, eb)] = (mid, sk)
    red_tris = np.asarray(red_tris, dtype=np.int64)
    red_levels = np.asarray(red_levels, dtype=np.int64)
    n_skel = len(red_tris)

    # skeleton adjacency via shared (min,max) vertex pairs
    edge_map = {}
    skel_edges = [[None, None, None] for _ in range(n_skel)]
    for s in range(n_skel):
        tri = red_tris[s]
        for le, (a, b) in enumerate(((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0]))):
            k = _edge_key(int(a), int(b))
            rec = edge_map.setdefault(k, [])
            rec.append((s, le))
            skel_edges[s][le] = k
    # a green parent is also adjacent, across its pre-split edge halves, to
    # the neighbor children living at the finer level
    for k, (mid, sk) in pre_mid.items():
        edge_map.setdefault(_edge_key(k[0], mid), []).append((sk, -1))
        edge_map.setdefault(_edge_key(mid, k[1]), []).append((sk, -1))

    split = np.zeros(n_skel, dtype=bool)
    split[skel_of_cell[marked]] = True

    # closure: 2:1 level balance plus at-most-one-hanging-node per cell;
    # hanging nodes are new neighbor splits or surviving green midpoints
    changed = True
    while changed:
        changed = False
        for k, rec in edge_map.items():
            if len(rec) != 2:
                continue
            (s1, _), (s2, _) = rec
            l1 = red_levels[s1] + (1 if split[s1] else 0)
            l2 = red_levels[s2] + (1 if split[s2] else 0)
            if l1 - l2 > 1 and not split[s2]:
                split[s2] = True
                changed = True
            elif l2 - l1 > 1 and not split[s1]:
                split[s1] = True
                changed = True
        for s in range(n_skel):
            if split[s]:
                continue
            hanging = 0
            for k in skel_edges[s]:
                if k in pre_mid:
                    hanging += 1
                    continue
                for so, _ in edge_map[k]:
                    if so != s and split[so]:
                        hanging += 1
            if hanging >= 2:
                split[s] = True
                changed = True

    # --- midpoints on every edge of a split cell (reusing green midpoints)
    vertices = [mesh.vertices]
    next_vid = mesh.n_vertices
    mid_of = {k: mid for k, (mid, _) in pre_mid.items()}
    tag_of_key = {}
    for e in range(mesh.n_edges):
        a, b = int(mesh.edges[e, 0]), int(mesh.edges[e, 1])
        tag_of_key[_edge_key(a, b)] = (
            int(mesh.boundary_tag[e]),
            int(mesh.boundary_body[e]),
        )
    new_mids = []
    for s in np.flatnonzero(split):
        for k in skel_edges[s]:
            if k in mid_of:
                continue
            mid = 0.5 * (mesh.vertices[k[0]] + mesh.vertices[k[1]])
            tag, body = tag_of_key.get(k, (INTERIOR, -1))
            if project_boundary and tag != INTERIOR:
                mid = _project_midpoint(mesh, tag, body, mid)
            mid_of[k] = next_vid
            new_mids.append(mid)
            next_vid += 1
    if new_mids:
        vertices.append(np.asarray(new_mids))
    vertices = np.vstack(vertices)

    # --- emit children
    new_tris = []
    new_levels = []
    new_sources = []  # skeleton index, for parent mapping below
    new_green_pairs = []
    new_green_tris = []
    new_green_levels = []

    def emit(tri, level, s):
        # plain copy, or green bisection toward a single hanging midpoint;
        # closure guarantees a triangle never faces two of them
        keys = [
            _edge_key(tri[0], tri[1]),
            _edge_key(tri[1], tri[2]),
            _edge_key(tri[2], tri[0]),
        ]
        hang = [k for k in keys if k in mid_of]
        if len(hang) > 1:
            raise MeshError("refinement closure failed to isolate hanging nodes")
        if not hang:
            new_tris.append(tri)
            new_levels.append(level)
            new_sources.append(s)
            return
        le = keys.index(hang[0])
        m = mid_of[hang[0]]
        a, b, c = tri[le], tri[(le + 1) % 3], tri[(le + 2) % 3]
        i1 = len(new_tris)
        new_tris.append((a, m, c))
        new_tris.append((m, b, c))
        new_levels.extend([level, level])
        new_sources.extend([s, s])
        new_green_pairs.append((i1, i1 + 1))
        new_green_tris.append(tri)
        new_green_levels.append(level)

    for s in range(n_skel):
        tri = tuple(int(v) for v in red_tris[s])
        if split[s]:
            keys = skel_edges[s]
            m01 = mid_of[keys[0]]
            m12 = mid_of[keys[1]]
            m20 = mid_of[keys[2]]
            for child in (
                (tri[0], m01, m20),
                (m01, tri[1], m12),
                (m20, m12, tri[2]),
                (m01, m12, m20),
            ):
                emit(child, red_levels[s] + 1, s)
        else:
            emit(tri, red_levels[s], s)
    new_tris = np.asarray(new_tris, dtype=np.int64)

    # --- boundary tags for child edges
    tagged = {}
    for k, (tag, body) in tag_of_key.items():
        if tag == INTERIOR:
            continue
        if k in mid_of:
            m = mid_of[k]
            tagged[_edge_key(k[0], m)] = (tag, body)
            tagged[_edge_key(m, k[1])] = (tag, body)
        else:
            tagged[k] = (tag, body)

    # --- parent mapping: containment within the source skeleton cell
    parent = np.empty(len(new_tris), dtype=np.int64)
    cent = vertices[new_tris].mean(axis=1)
    for i, s in enumerate(new_sources):
        cands = red_sources[s]
        if len(cands) == 1:
            parent[i] = cands[0]
        else:
            best, best_d = cands[0], np.inf
            for cc in cands:
                tri = mesh.vertices[mesh.cells[cc]]
                if _point_in_tri(cent[i], tri):
                    best = cc
                    best_d = -1.0
                    break
                d = np.linalg.norm(tri.mean(axis=0) - cent[i])
                if d < best_d:
                    best, best_d = cc, d
            parent[i] = best

    out = build_mesh(
        vertices,
        new_tris,
        tagged,
        levels=np.asarray(new_levels),
        parent_cell=parent,
        green_pairs=np.asarray(new_green_pairs, dtype=np.int64).reshape(-1, 2),
        green_parent_tris=np.asarray(new_green_tris, dtype=np.int64).reshape(-1, 3),
        green_parent_levels=np.asarray(new_green_levels, dtype=np.int64),
        wall_profiles=mesh.wall_profiles,
        farfield_circle=mesh.farfield_circle,
    )
    return out.validate()


def _point_in_tri(p, tri, eps=1e-12):
    d1 = _cross2(tri[1] - tri[0], p - tri[0])
    d2 = _cross2(tri[2] - tri[1], p - tri[1])
    d3 = _cross2(tri[0] - tri[2], p - tri[2])
    return d1 >= -eps and d2 >= -eps and d3 >= -eps


def _cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


# ---------------------------------------------------------------------------
# agglomeration and prolongation


@dataclass
class Agglomeration:
    """Grouping maps for multigrid coarsening, finest first.

    maps[k] assigns a group index to every entity of level k (level 0 =
    mesh cells); group counts shrink by roughly the target size per level.
    """

    maps: list
    group_counts: list

    @property
    def n_levels(self):
        return len(self.maps)


def _greedy_groups(indptr, indices, n, target):
    group = np.full(n, -1, dtype=np.int64)
    gid = 0
    for seed in range(n):
        if group[seed] >= 0:
            continue
        group[seed] = gid
        members = [seed]
        frontier = [seed]
        while len(members) < target and frontier:
            new_frontier = []
            for c in frontier:
                for nb in indices[indptr[c] : indptr[c + 1]]:
                    if group[nb] < 0 and len(members) < target:
                        group[nb] = gid
                        members.append(nb)
                        new_frontier.append(nb)
            frontier = new_frontier
        gid += 1
    # fold isolated singleton groups into an adjacent group
    sizes = np.bincount(group, minlength=gid)
    for seed in np.flatnonzero(sizes[group] == 1):
        nbrs = indices[indptr[seed] : indptr[seed + 1]]
        if len(nbrs):
            group[seed] = group[nbrs[0]]
    # compress group ids
    uniq, compressed = np.unique(group, return_inverse=True)
    return compressed, len(uniq)


def _quotient_graph(indptr, indices, group, n_groups):
    src = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    gs, gd = group[src], group[indices]
    keep = gs != gd
    pairs = np.unique(np.stack([gs[keep], gd[keep]], axis=1), axis=0)
    new_indptr = np.zeros(n_groups + 1, dtype=np.int64)
    np.add.at(new_indptr, pairs[:, 0] + 1, 1)
    np.cumsum(new_indptr, out=new_indptr)
    return new_indptr, pairs[:, 1].copy()


def agglomerate(mesh, levels, group_size_target=4):
    """Greedy seed-and-grow agglomeration over the cell adjacency graph."""
    if levels < 1:
        raise MeshError("need at least one agglomeration level")
    indptr, indices = mesh.cell_adjacency()
    n = mesh.n_cells
    maps = []
    counts = []
    for _ in range(levels):
        if group_size_target <= 1:
            maps.append(np.arange(n, dtype=np.int64))
            counts.append(n)
            continue
        if n // group_size_target < 8:
            break
        group, n_groups = _greedy_groups(indptr, indices, n, group_size_target)
        maps.append(group)
        counts.append(n_groups)
        indptr, indices = _quotient_graph(indptr, indices, group, n_groups)
        n = n_groups
    if not maps:
        # mesh too small to coarsen even once: identity grouping
        maps.append(np.arange(mesh.n_cells, dtype=np.int64))
        counts.append(mesh.n_cells)
    return Agglomeration(maps=maps, group_counts=counts)


def prolong_solution(coarse_field, fine_mesh, recon=None):
    """Transfer a per-cell field from the parent mesh to its refinement.

    Order-0 injection by default; with a reconstruction (built on the parent
    mesh) the linear representation is evaluated at child centroids.
    """
    if fine_mesh.parent_cell is None:
        raise MeshError("fine mesh carries no refinement lineage")
    coarse_field = np.asarray(coarse_field)
    parent = fine_mesh.parent_cell
    if parent.max() >= len(coarse_field):
        raise MeshError("field does not match the parent mesh")
    if recon is None:
        return coarse_field[parent]
    return recon.evaluate_many(parent, fine_mesh.cell_centroids)


# ---------------------------------------------------------------------------
# ASCII exchange format


def _write_mesh_stream(mesh, fh):
    fh.write(MESH_FORMAT_HEADER + "\n")
    fh.write(f"{mesh.n_vertices}\n")
    for x, y in mesh.vertices:
        fh.write(f"{x:.17g} {y:.17g}\n")
    fh.write(f"{mesh.n_cells}\n")
    for a, b, c in mesh.cells:
        fh.write(f"{a} {b} {c}\n")
    bidx = np.flatnonzero(mesh.boundary_tag != INTERIOR)
    fh.write(f"{len(bidx)}\n")
    for e in bidx:
        a, b = mesh.edges[e]
        fh.write(f"{a} {b} {_TAG_NAMES[int(mesh.boundary_tag[e])]}\n")


def write_mesh(mesh, path):
    """Write the versioned ASCII format; coordinates round-trip bit-exactly."""
    with open(path, "w") as fh:
        _write_mesh_stream(mesh, fh)


def read_mesh(path):
    """Read the ASCII format written by write_mesh.

    The result carries topology, coordinates, and boundary tags; projection
    geometry and refinement history are not part of the exchange format.
    """
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MESH_FORMAT_HEADER:
        raise MeshError(f"not a {MESH_FORMAT_HEADER!r} file: {path}")
    pos = 1
    nv = int(lines[pos])
    pos += 1
    vertices = np.array(
        [[float(t) for t in lines[pos + i].split()] for i in range(nv)]
    )
    pos += nv
    nc = int(lines[pos])
    pos += 1
    cells = np.array(
        [[int(t) for t in lines[pos + i].split()] for i in range(nc)], dtype=np.int64
    )
    pos += nc
    nb = int(lines[pos])
    pos += 1
    tagged = {}
    for i in range(nb):
        a, b, name = lines[pos + i].split()
        tag = _TAG_VALUES.get(name)
        if tag is None:
            raise MeshError(f"unknown boundary tag {name!r}")
        body = 0 if tag == WALL else -1
        tagged[_edge_key(int(a), int(b))] = (tag, body)
    return build_mesh(vertices, cells, tagged)
