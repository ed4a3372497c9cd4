"""Airfoil contours: analytic NACA 4-digit sections and point-list profiles.

A profile is a closed curve parameterized by s in [0, 1), starting at the
trailing edge, running over the upper surface to the leading edge at s = 0.5
and back along the lower surface (counter-clockwise). Uniform parameter
sampling therefore clusters points at both edges through the cosine map
x = (1 + cos(2*pi*s))/2, and symmetric sections pair s with 1 - s exactly,
which the mirror-symmetric mesh generator relies on.
"""

from __future__ import annotations

import numpy as np

# standard 4-digit half-thickness polynomial coefficients; the last one is
# -0.1015 for the open (tabulated) trailing edge and -0.1036 for a closed one
_THICKNESS_COEFFS_OPEN = (0.2969, -0.1260, -0.3516, 0.2843, -0.1015)
_THICKNESS_COEFFS_CLOSED = (0.2969, -0.1260, -0.3516, 0.2843, -0.1036)


class GeometryError(ValueError):
    """Raised for degenerate or unusable profile input."""


def naca4_half_thickness(x, thickness=0.12, closed_te=False):
    """Half-thickness of a symmetric NACA 4-digit section at chord fraction x."""
    x = np.asarray(x, dtype=float)
    a0, a1, a2, a3, a4 = (
        _THICKNESS_COEFFS_CLOSED if closed_te else _THICKNESS_COEFFS_OPEN
    )
    return (
        5.0
        * thickness
        * (a0 * np.sqrt(x) + x * (a1 + x * (a2 + x * (a3 + x * a4))))
    )


class Profile:
    """Closed contour with parametric evaluation and nearest-point projection."""

    name = "profile"

    def point(self, s):
        """Contour point at parameter s (wraps mod 1); broadcasts over s."""
        raise NotImplementedError

    def points(self, n):
        """n contour vertices at uniform parameter spacing, CCW from the TE."""
        if n < 3:
            raise GeometryError("a closed contour needs at least 3 points")
        return self.point(np.arange(n) / n)

    def project(self, xy, samples=2048, iters=80):
        """Nearest contour points to the queries, shape (m, 2).

        Golden-section refinement of the squared distance over the bracket
        around the best dense sample; deterministic and accurate to roughly
        the square root of machine epsilon in parameter.
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        s_dense = np.arange(samples) / samples
        pts = self.point(s_dense)
        d2 = ((xy[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        best = np.argmin(d2, axis=1)
        a = (best - 1.0) / samples
        b = (best + 1.0) / samples

        invphi = (np.sqrt(5.0) - 1.0) / 2.0
        x1 = b - invphi * (b - a)
        x2 = a + invphi * (b - a)
        f1 = ((self.point(x1) - xy) ** 2).sum(axis=-1)
        f2 = ((self.point(x2) - xy) ** 2).sum(axis=-1)
        for _ in range(iters):
            take1 = f1 < f2
            b = np.where(take1, x2, b)
            a = np.where(take1, a, x1)
            x2_new = np.where(take1, x1, a + invphi * (b - a))
            x1_new = np.where(take1, b - invphi * (b - a), x2)
            px1 = self.point(x1_new)
            px2 = self.point(x2_new)
            f1 = ((px1 - xy) ** 2).sum(axis=-1)
            f2 = ((px2 - xy) ** 2).sum(axis=-1)
            x1, x2 = x1_new, x2_new
        s_best = 0.5 * (a + b)
        return self.point(s_best)


class Naca4Profile(Profile):
    """Symmetric or cambered NACA 4-digit section of unit chord.

    The closed-TE thickness variant is the default so the contour closes;
    the open variant matches the published polynomial exactly.
    """

    def __init__(self, code="0012", closed_te=True, offset=(0.0, 0.0)):
        code = str(code)
        if len(code) != 4 or not code.isdigit():
            raise GeometryError(f"not a NACA 4-digit code: {code!r}")
        self.code = code
        self.camber_max = int(code[0]) / 100.0
        self.camber_pos = int(code[1]) / 10.0
        self.thickness = int(code[2:]) / 100.0
        if self.thickness <= 0.0:
            raise GeometryError("zero-thickness section is degenerate")
        self.closed_te = closed_te
        self.offset = np.asarray(offset, dtype=float)
        self.name = f"naca{code}"

    @property
    def symmetric(self):
        return self.camber_max == 0.0 or self.camber_pos == 0.0

    def _camber(self, x):
        m, p = self.camber_max, self.camber_pos
        if m == 0.0 or p == 0.0:
            z = np.zeros_like(x)
            return z, z
        fore = x < p
        yc = np.where(
            fore,
            m / p**2 * (2.0 * p * x - x**2),
            m / (1.0 - p) ** 2 * (1.0 - 2.0 * p + 2.0 * p * x - x**2),
        )
        dyc = np.where(
            fore,
            2.0 * m / p**2 * (p - x),
            2.0 * m / (1.0 - p) ** 2 * (p - x),
        )
        return yc, dyc

    def point(self, s):
        s = np.mod(np.asarray(s, dtype=float), 1.0)
        x = 0.5 * (1.0 + np.cos(2.0 * np.pi * s))
        upper = s < 0.5
        yt = naca4_half_thickness(x, self.thickness, self.closed_te)
        yc, dyc = self._camber(x)
        theta = np.arctan(dyc)
        sign = np.where(upper, 1.0, -1.0)
        px = x - sign * yt * np.sin(theta)
        py = yc + sign * yt * np.cos(theta)
        return np.stack([px, py], axis=-1) + self.offset


class PointListProfile(Profile):
    """Closed contour through given points via a periodic cubic spline.

    Points run CCW from the trailing edge (upper surface first); the first
    point must not repeat at the end. Arc-length parameterization normalized
    to [0, 1).
    """

    def __init__(self, points, name="points", offset=(0.0, 0.0)):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise GeometryError("point list must be (n >= 3, 2)")
        if len(np.unique(pts.round(decimals=12), axis=0)) != len(pts):
            raise GeometryError("profile contains repeated points")
        self._pts = pts + np.asarray(offset, dtype=float)
        self.name = name
        self.offset = np.asarray(offset, dtype=float)

        closed = np.vstack([self._pts, self._pts[:1]])
        seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
        if np.any(seg <= 0.0):
            raise GeometryError("profile contains zero-length segments")
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        self._param = arc / arc[-1]

        from scipy.interpolate import CubicSpline

        self._spline_x = CubicSpline(self._param, closed[:, 0], bc_type="periodic")
        self._spline_y = CubicSpline(self._param, closed[:, 1], bc_type="periodic")

    @property
    def raw_points(self):
        return self._pts.copy()

    def point(self, s):
        s = np.mod(np.asarray(s, dtype=float), 1.0)
        return np.stack([self._spline_x(s), self._spline_y(s)], axis=-1)


class CircleProfile(Profile):
    """Circular contour, handy for annulus meshes and far-field tests."""

    def __init__(self, radius, center=(0.0, 0.0)):
        if radius <= 0.0:
            raise GeometryError("circle radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)
        self.name = f"circle-r{radius:g}"

    def point(self, s):
        s = np.asarray(s, dtype=float)
        ang = 2.0 * np.pi * s
        return self.center + self.radius * np.stack(
            [np.cos(ang), np.sin(ang)], axis=-1
        )

    def project(self, xy, samples=0, iters=0):
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        d = xy - self.center
        r = np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d / r


def read_profile_dat(path, name=None):
    """Load a point-list profile from a whitespace-delimited x-y file.

    Lines that do not parse as two floats (titles, comments) are skipped.
    A repeated closing point is dropped. Points are expected CCW from the
    trailing edge, the layout written by write_profile_dat.
    """
    pts = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            try:
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError:
                continue
    if len(pts) >= 2 and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    if name is None:
        name = str(path)
    return PointListProfile(np.asarray(pts), name=name)


def write_profile_dat(profile, path, n=256, comment=""):
    """Sample a profile to a point-list file readable by read_profile_dat."""
    pts = profile.points(n)
    with open(path, "w") as fh:
        fh.write(f"# {profile.name}")
        if comment:
            fh.write(f" - {comment}")
        fh.write("\n")
        for x, y in pts:
            fh.write(f"{x:.17g} {y:.17g}\n")
