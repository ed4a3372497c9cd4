"""Gas dynamics for the steady 2D compressible Euler equations.

Conservative state layout is (rho, rho*ux, rho*uy, E) with the ideal-gas
closure E = p/(gamma - 1) + rho*|v|^2/2. Every function broadcasts over
leading axes: states have shape (..., 4), unit normals (..., 2), so the same
code serves a single state and a batch of edge traces.

Free-stream normalization: rho_inf = 1, |v_inf| = 1, chord = 1, which puts
p_inf = 1/(gamma*Ma^2) and makes the force normalization constant equal 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAMMA = 1.4

WALL_PROJECTION = "projection"
WALL_MIRROR = "mirror"
WALL_MODES = (WALL_PROJECTION, WALL_MIRROR)


class InadmissibleStateError(ValueError):
    """Raised when a state with nonpositive density or pressure is rejected."""


def pressure(u, gamma=GAMMA):
    """Static pressure from the conservative state."""
    u = np.asarray(u)
    rho = u[..., 0]
    kinetic = 0.5 * (u[..., 1] ** 2 + u[..., 2] ** 2) / rho
    return (gamma - 1.0) * (u[..., 3] - kinetic)


def sound_speed(u, gamma=GAMMA):
    """Speed of sound sqrt(gamma*p/rho); nan for inadmissible states."""
    u = np.asarray(u)
    with np.errstate(invalid="ignore"):
        return np.sqrt(gamma * pressure(u, gamma) / u[..., 0])


def is_admissible(u, gamma=GAMMA):
    """Elementwise check for positive density and pressure."""
    u = np.asarray(u)
    return (u[..., 0] > 0.0) & (pressure(u, gamma) > 0.0)


def check_admissible(u, gamma=GAMMA, context=""):
    ok = is_admissible(u, gamma)
    if not np.all(ok):
        bad = int(np.count_nonzero(~ok))
        where = f" in {context}" if context else ""
        raise InadmissibleStateError(
            f"{bad} state(s) with nonpositive density or pressure{where}"
        )


def state_from_primitive(rho, vx, vy, p, gamma=GAMMA):
    """Conservative state from primitive variables; broadcasts."""
    rho, vx, vy, p = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (rho, vx, vy, p))
    )
    energy = p / (gamma - 1.0) + 0.5 * rho * (vx**2 + vy**2)
    return np.stack([rho, rho * vx, rho * vy, energy], axis=-1)


def velocity(u):
    u = np.asarray(u)
    return u[..., 1:3] / u[..., 0:1]


def flux_tensor(u, gamma=GAMMA):
    """Physical flux F(u) with shape (..., 4, 2); columns are x and y fluxes."""
    u = np.asarray(u)
    rho = u[..., 0]
    ux = u[..., 1] / rho
    uy = u[..., 2] / rho
    p = pressure(u, gamma)
    ep = u[..., 3] + p
    fx = np.stack([u[..., 1], u[..., 1] * ux + p, u[..., 2] * ux, ep * ux], axis=-1)
    fy = np.stack([u[..., 2], u[..., 1] * uy, u[..., 2] * uy + p, ep * uy], axis=-1)
    return np.stack([fx, fy], axis=-1)


def normal_flux(u, n, gamma=GAMMA):
    """Projected physical flux F(u)·n for unit normal n."""
    u = np.asarray(u)
    n = np.asarray(n)
    rho = u[..., 0]
    vn = (u[..., 1] * n[..., 0] + u[..., 2] * n[..., 1]) / rho
    p = pressure(u, gamma)
    return np.stack(
        [
            rho * vn,
            u[..., 1] * vn + p * n[..., 0],
            u[..., 2] * vn + p * n[..., 1],
            (u[..., 3] + p) * vn,
        ],
        axis=-1,
    )


def max_normal_speed(u, n, gamma=GAMMA):
    """|v·n| + c, the largest characteristic speed normal to the edge."""
    u = np.asarray(u)
    n = np.asarray(n)
    vn = (u[..., 1] * n[..., 0] + u[..., 2] * n[..., 1]) / u[..., 0]
    return np.abs(vn) + sound_speed(u, gamma)


def lax_friedrichs(ul, ur, n, gamma=GAMMA):
    """Local Lax-Friedrichs numerical flux.

    H = (F(ul) + F(ur))·n/2 - lam*(ur - ul)/2 with lam the larger of the two
    normal characteristic speeds. Consistent (H(u,u,n) = F(u)·n) and
    conservative (H(ul,ur,n) = -H(ur,ul,-n)).
    """
    lam = np.maximum(max_normal_speed(ul, n, gamma), max_normal_speed(ur, n, gamma))
    avg = 0.5 * (normal_flux(ul, n, gamma) + normal_flux(ur, n, gamma))
    return avg - 0.5 * lam[..., None] * (np.asarray(ur) - np.asarray(ul))


def flux_jacobian(u, n, gamma=GAMMA):
    """Jacobian of normal_flux with respect to the conservative state."""
    u = np.asarray(u)
    n = np.asarray(n)
    rho = u[..., 0]
    ux = u[..., 1] / rho
    uy = u[..., 2] / rho
    nx = n[..., 0]
    ny = n[..., 1]
    vn = ux * nx + uy * ny
    ke = 0.5 * (ux**2 + uy**2)
    ht = (u[..., 3] + pressure(u, gamma)) / rho
    g1 = gamma - 1.0
    z = np.zeros_like(rho)
    one = np.ones_like(rho)
    rows = [
        [z, nx + z, ny + z, z],
        [
            g1 * ke * nx - ux * vn,
            vn + (2.0 - gamma) * ux * nx,
            ux * ny - g1 * uy * nx,
            g1 * nx * one,
        ],
        [
            g1 * ke * ny - uy * vn,
            uy * nx - g1 * ux * ny,
            vn + (2.0 - gamma) * uy * ny,
            g1 * ny * one,
        ],
        [
            vn * (g1 * ke - ht),
            ht * nx - g1 * ux * vn,
            ht * ny - g1 * uy * vn,
            gamma * vn,
        ],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _eigensystem(u, n, gamma):
    """Right/left eigenvector matrices and eigenvalues of flux_jacobian."""
    u = np.asarray(u)
    n = np.asarray(n)
    rho = u[..., 0]
    ux = u[..., 1] / rho
    uy = u[..., 2] / rho
    nx = n[..., 0]
    ny = n[..., 1]
    tx = -ny
    ty = nx
    vn = ux * nx + uy * ny
    vt = ux * tx + uy * ty
    ke = 0.5 * (ux**2 + uy**2)
    c = sound_speed(u, gamma)
    ht = (u[..., 3] + pressure(u, gamma)) / rho
    g1 = gamma - 1.0
    b1 = g1 / c**2
    b2 = b1 * ke

    z = np.zeros_like(rho)
    one = np.ones_like(rho)
    # columns: acoustic vn-c, entropy, shear, acoustic vn+c
    right = np.stack(
        [
            np.stack([one, one, z, one], axis=-1),
            np.stack([ux - c * nx, ux, tx + z, ux + c * nx], axis=-1),
            np.stack([uy - c * ny, uy, ty + z, uy + c * ny], axis=-1),
            np.stack([ht - c * vn, ke, vt, ht + c * vn], axis=-1),
        ],
        axis=-2,
    )
    left = np.stack(
        [
            np.stack(
                [
                    0.5 * (b2 + vn / c),
                    -0.5 * (b1 * ux + nx / c),
                    -0.5 * (b1 * uy + ny / c),
                    0.5 * b1,
                ],
                axis=-1,
            ),
            np.stack([one - b2, b1 * ux, b1 * uy, -b1], axis=-1),
            np.stack([-vt, tx + z, ty + z, z], axis=-1),
            np.stack(
                [
                    0.5 * (b2 - vn / c),
                    -0.5 * (b1 * ux - nx / c),
                    -0.5 * (b1 * uy - ny / c),
                    0.5 * b1,
                ],
                axis=-1,
            ),
        ],
        axis=-2,
    )
    lam = np.stack([vn - c, vn, vn, vn + c], axis=-1)
    return right, left, lam


def split_flux_jacobians(u, n, gamma=GAMMA):
    """Characteristic splitting A = A+ + A- with A± = R diag(lam±) R^-1."""
    right, left, lam = _eigensystem(u, n, gamma)
    lam_p = 0.5 * (lam + np.abs(lam))
    lam_m = 0.5 * (lam - np.abs(lam))
    a_p = np.einsum("...ik,...k,...kj->...ij", right, lam_p, left)
    a_m = np.einsum("...ik,...k,...kj->...ij", right, lam_m, left)
    return a_p, a_m


def vijayasundaram(ul, ur, n, gamma=GAMMA):
    """Flux-splitting scheme at the arithmetic average state.

    H = A+(u_avg)·ul + A-(u_avg)·ur. Consistency at ul = ur = u follows from
    the degree-1 homogeneity of the Euler flux, A(u)·u = F(u)·n.
    """
    ubar = 0.5 * (np.asarray(ul) + np.asarray(ur))
    a_p, a_m = split_flux_jacobians(ubar, n, gamma)
    return np.einsum("...ij,...j->...i", a_p, np.asarray(ul)) + np.einsum(
        "...ij,...j->...i", a_m, np.asarray(ur)
    )


FLUXES = {
    "lax_friedrichs": lax_friedrichs,
    "vijayasundaram": vijayasundaram,
}


def get_flux(name):
    try:
        return FLUXES[name]
    except KeyError:
        raise ValueError(
            f"unknown flux scheme {name!r}; expected one of {sorted(FLUXES)}"
        ) from None


def wall_projection(n):
    """Matrix that zeroes the wall-normal momentum component (idempotent)."""
    n = np.asarray(n)
    nx = n[..., 0]
    ny = n[..., 1]
    z = np.zeros_like(nx)
    one = np.ones_like(nx)
    return np.stack(
        [
            np.stack([one, z, z, z], axis=-1),
            np.stack([z, one - nx * nx, -nx * ny, z], axis=-1),
            np.stack([z, -nx * ny, one - ny * ny, z], axis=-1),
            np.stack([z, z, z, one], axis=-1),
        ],
        axis=-2,
    )


def mirror_reflection(n):
    """Matrix reflecting the momentum across the wall plane (involutory)."""
    n = np.asarray(n)
    nx = n[..., 0]
    ny = n[..., 1]
    z = np.zeros_like(nx)
    one = np.ones_like(nx)
    return np.stack(
        [
            np.stack([one, z, z, z], axis=-1),
            np.stack([z, one - 2.0 * nx * nx, -2.0 * nx * ny, z], axis=-1),
            np.stack([z, -2.0 * nx * ny, one - 2.0 * ny * ny, z], axis=-1),
            np.stack([z, z, z, one], axis=-1),
        ],
        axis=-2,
    )


def project_wall(u, n):
    """Apply the zero-normal-momentum projection without forming the matrix."""
    u = np.asarray(u)
    n = np.asarray(n)
    mn = u[..., 1] * n[..., 0] + u[..., 2] * n[..., 1]
    out = u.astype(float, copy=True)
    out[..., 1] -= mn * n[..., 0]
    out[..., 2] -= mn * n[..., 1]
    return out


def reflect_mirror(u, n):
    """Apply the momentum mirror reflection without forming the matrix."""
    u = np.asarray(u)
    n = np.asarray(n)
    mn = u[..., 1] * n[..., 0] + u[..., 2] * n[..., 1]
    out = u.astype(float, copy=True)
    out[..., 1] -= 2.0 * mn * n[..., 0]
    out[..., 2] -= 2.0 * mn * n[..., 1]
    return out


def wall_pressure(u, n, mode=WALL_PROJECTION, gamma=GAMMA):
    """Pressure of the boundary-modified state on a wall edge."""
    if mode == WALL_PROJECTION:
        return pressure(project_wall(u, n), gamma)
    if mode == WALL_MIRROR:
        # reflection preserves rho, E and |m|, hence the pressure
        return pressure(reflect_mirror(u, n), gamma)
    raise ValueError(f"unknown wall mode {mode!r}; expected one of {WALL_MODES}")


def wall_boundary_flux(u, n, mode=WALL_PROJECTION, flux=lax_friedrichs, gamma=GAMMA):
    """Boundary flux through a solid wall edge with outward unit normal n.

    Projection mode evaluates the physical flux of the projected state, which
    collapses to a pure pressure force (0, p*nx, p*ny, 0) because the
    projected state has no normal velocity. Mirror mode runs the numerical
    flux against the reflected ghost state; its mass component cancels
    exactly for symmetric schemes.
    """
    u = np.asarray(u)
    n = np.asarray(n)
    if mode == WALL_PROJECTION:
        pw = pressure(project_wall(u, n), gamma)
        z = np.zeros_like(pw)
        return np.stack([z, pw * n[..., 0], pw * n[..., 1], z], axis=-1)
    if mode == WALL_MIRROR:
        return flux(u, reflect_mirror(u, n), n, gamma)
    raise ValueError(f"unknown wall mode {mode!r}; expected one of {WALL_MODES}")


def farfield_ghost(u, n, u_inf, gamma=GAMMA):
    """Ghost state at a far-field edge from 1D characteristic reconstruction.

    The outgoing invariant v·n + 2c/(gamma-1) is taken from the interior
    trace, the incoming one from the free stream; entropy and tangential
    velocity are upwinded by the sign of the reconstructed normal velocity.
    Supersonic normal flow falls back to full upwinding.
    """
    if isinstance(u_inf, FlowConfig):
        u_inf = u_inf.freestream()
    u = np.asarray(u, dtype=float)
    n = np.asarray(n, dtype=float)
    u_inf = np.broadcast_to(np.asarray(u_inf, dtype=float), u.shape)

    rho_i = u[..., 0]
    v_i = u[..., 1:3] / rho_i[..., None]
    vn_i = v_i[..., 0] * n[..., 0] + v_i[..., 1] * n[..., 1]
    c_i = sound_speed(u, gamma)

    rho_f = u_inf[..., 0]
    v_f = u_inf[..., 1:3] / rho_f[..., None]
    vn_f = v_f[..., 0] * n[..., 0] + v_f[..., 1] * n[..., 1]
    c_f = sound_speed(u_inf, gamma)

    g1 = gamma - 1.0
    r_out = vn_i + 2.0 * c_i / g1
    r_in = vn_f - 2.0 * c_f / g1
    vn_b = 0.5 * (r_out + r_in)
    c_b = 0.25 * g1 * (r_out - r_in)

    outflow = vn_b > 0.0
    p_i = pressure(u, gamma)
    p_f = pressure(u_inf, gamma)
    entropy = np.where(outflow, p_i / rho_i**gamma, p_f / rho_f**gamma)
    v_src = np.where(outflow[..., None], v_i, v_f)
    vt = v_src - (v_src[..., 0] * n[..., 0] + v_src[..., 1] * n[..., 1])[
        ..., None
    ] * n

    rho_b = (c_b**2 / (gamma * entropy)) ** (1.0 / g1)
    p_b = rho_b * c_b**2 / gamma
    vel_b = vt + vn_b[..., None] * n
    ghost = state_from_primitive(rho_b, vel_b[..., 0], vel_b[..., 1], p_b, gamma)

    # supersonic normal flow: every characteristic runs one way
    sup_out = vn_i >= c_i
    sup_in = vn_i <= -c_i
    ghost = np.where(sup_out[..., None], u, ghost)
    ghost = np.where(sup_in[..., None], u_inf, ghost)
    return ghost


def farfield_flux(u, n, u_inf, flux=lax_friedrichs, gamma=GAMMA):
    """Far-field boundary flux: numerical flux against the characteristic ghost."""
    return flux(u, farfield_ghost(u, n, u_inf, gamma), n, gamma)


@dataclass(frozen=True)
class FlowConfig:
    """Free-stream definition: Mach number, attack angle, gas constant.

    Normalization fixes rho_inf = 1, |v_inf| = 1 and chord = 1, so the
    free-stream pressure follows from the Mach number alone and the force
    normalization constant comes out to chord/2.
    """

    mach_inf: float
    aoa_deg: float = 0.0
    gamma: float = GAMMA
    rho_inf: float = 1.0
    chord: float = 1.0

    def __post_init__(self):
        if self.mach_inf <= 0.0:
            raise ValueError("free-stream Mach number must be positive")
        if self.chord <= 0.0 or self.rho_inf <= 0.0:
            raise ValueError("chord and free-stream density must be positive")

    @property
    def alpha(self):
        return float(np.deg2rad(self.aoa_deg))

    @property
    def p_inf(self):
        return self.rho_inf / (self.gamma * self.mach_inf**2)

    def freestream(self):
        """Free-stream conservative state, shape (4,)."""
        return state_from_primitive(
            self.rho_inf,
            np.cos(self.alpha),
            np.sin(self.alpha),
            self.p_inf,
            self.gamma,
        )

    def force_normalization(self):
        """Dynamic-pressure force scale gamma*p_inf*Ma^2*chord/2 (== chord/2)."""
        return 0.5 * self.gamma * self.p_inf * self.mach_inf**2 * self.chord

    def reference_scales(self):
        """Per-variable magnitude floors for finite-difference step sizing.

        Momentum components share the scale rho_inf*|v_inf| so that a zero
        free-stream component (alpha = 0) cannot degenerate the floor.
        """
        u = self.freestream()
        return np.array([u[0], self.rho_inf, self.rho_inf, u[3]])
