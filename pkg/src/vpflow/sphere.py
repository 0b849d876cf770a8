"""Nearly spherical sets described as radial graphs over a sphere.

A set ``E_{f,mu}`` is ``{t * r * x : x on the unit sphere, 0 <= t <= 1 + f(x)}``
with ``r = r(mu)`` the radius of the ball of volume ``mu``. Functions on the
sphere are sampled on a product quadrature grid and differentiated
spectrally through an orthonormal real harmonic basis:

* N = 2: ``M = 4 * l_max`` equispaced angles, Fourier modes up to ``l_max``;
* N = 3: Gauss-Legendre nodes in ``cos(theta)`` times ``2 * l_max + 2``
  equispaced longitudes, spherical harmonics up to degree ``l_max``.

Both rules integrate products of two basis functions exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .shapes import radius_for_volume, unit_ball_volume

DELTA = 0.1  # C1 smallness threshold for curvature-based operations
CURVATURE_GUARD = 1e3


class NormalizationError(ValueError):
    """A set is not volume- and barycentre-normalised."""


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# basis functions


def _legendre(l_max: int, theta: np.ndarray, order: int):
    """Orthonormal associated Legendre functions and theta-derivatives.

    Returns arrays indexed ``[l, m, point]`` (zero where ``m > l``) such that
    ``P[l, 0]`` and ``sqrt(2) * P[l, m] * cos(m phi)`` are orthonormal on the
    unit sphere.
    """
    x = np.cos(theta)
    s = np.sin(theta)
    npt = theta.shape[0]
    P = np.zeros((l_max + 1, l_max + 1, npt))
    P[0, 0] = 1.0 / math.sqrt(4.0 * math.pi)
    for m in range(1, l_max + 1):
        P[m, m] = math.sqrt((2 * m + 1) / (2 * m)) * s * P[m - 1, m - 1]
    for m in range(0, l_max):
        P[m + 1, m] = math.sqrt(2 * m + 3) * x * P[m, m]
    for m in range(0, l_max + 1):
        for l in range(m + 2, l_max + 1):
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            P[l, m] = a * (x * P[l - 1, m] - b * P[l - 2, m])
    out = [P]
    if order >= 1:
        # nodes never sit on a pole; the guard only protects arbitrary points
        s_safe = np.where(np.abs(s) < 1e-300, 1e-300, s)
        dP = np.zeros_like(P)
        for l in range(1, l_max + 1):
            for m in range(0, l + 1):
                c = math.sqrt((2 * l + 1) * (l * l - m * m) / (2 * l - 1))
                prev = P[l - 1, m] if m <= l - 1 else 0.0
                dP[l, m] = (l * x * P[l, m] - c * prev) / s_safe
        out.append(dP)
        if order >= 2:
            d2P = np.zeros_like(P)
            cot = x / s_safe
            for l in range(0, l_max + 1):
                for m in range(0, l + 1):
                    d2P[l, m] = -cot * dP[l, m] - (l * (l + 1) - m * m / s_safe**2) * P[l, m]
            out.append(d2P)
    return out


def _basis3(l_max: int, theta, phi, order: int) -> dict:
    """Real spherical harmonics (and angle derivatives) at the given points.

    Column ``l*l + l + m`` holds degree ``l``, order ``m`` (``m < 0`` are sine
    terms). Keys: ``f``, and with ``order >= 1`` also ``t``, ``p``; with
    ``order >= 2`` also ``tt``, ``tp``, ``pp`` (derivatives in colatitude
    ``t`` and longitude ``p``).
    """
    leg = _legendre(l_max, theta, order)
    npt = theta.shape[0]
    n = (l_max + 1) ** 2
    keys = ["f"] + (["t", "p"] if order >= 1 else []) + (["tt", "tp", "pp"] if order >= 2 else [])
    out = {k: np.zeros((npt, n)) for k in keys}
    for m in range(0, l_max + 1):
        if m == 0:
            trig = [(0, np.ones(npt), np.zeros(npt), 1.0)]
        else:
            c, s = np.cos(m * phi), np.sin(m * phi)
            r2 = math.sqrt(2.0)
            # (signed order, trig, d/dphi trig, normalisation)
            trig = [(m, c, -m * s, r2), (-m, s, m * c, r2)]
        for mm, T, dT, norm in trig:
            for l in range(m, l_max + 1):
                col = l * l + l + mm
                P = leg[0][l, m] * norm
                out["f"][:, col] = P * T
                if order >= 1:
                    dP = leg[1][l, m] * norm
                    out["t"][:, col] = dP * T
                    out["p"][:, col] = P * dT
                if order >= 2:
                    out["tt"][:, col] = leg[2][l, m] * norm * T
                    out["tp"][:, col] = dP * dT
                    out["pp"][:, col] = -m * m * P * T
    return out


def _basis2(l_max: int, theta, order: int) -> dict:
    """Orthonormal Fourier basis on the circle: 1, cos k t, sin k t."""
    npt = theta.shape[0]
    n = 2 * l_max + 1
    out = {"f": np.zeros((npt, n))}
    if order >= 1:
        out["t"] = np.zeros((npt, n))
    if order >= 2:
        out["tt"] = np.zeros((npt, n))
    out["f"][:, 0] = 1.0 / math.sqrt(2 * math.pi)
    c0 = 1.0 / math.sqrt(math.pi)
    for k in range(1, l_max + 1):
        c, s = np.cos(k * theta) * c0, np.sin(k * theta) * c0
        out["f"][:, 2 * k - 1] = c
        out["f"][:, 2 * k] = s
        if order >= 1:
            out["t"][:, 2 * k - 1] = -k * s
            out["t"][:, 2 * k] = k * c
        if order >= 2:
            out["tt"][:, 2 * k - 1] = -k * k * c
            out["tt"][:, 2 * k] = -k * k * s
    return out


# ---------------------------------------------------------------------------
# quadrature grid


class SphereGrid:
    """Quadrature nodes and weights on the unit sphere ``S^{N-1}``."""

    def __init__(self, ndim: int, l_max: int = 32):
        if ndim not in (2, 3):
            raise ValueError("ndim must be 2 or 3")
        if l_max < 1:
            raise ValueError("l_max must be >= 1")
        self.ndim = ndim
        self.l_max = int(l_max)
        if ndim == 2:
            M = 4 * self.l_max
            self.theta = 2 * math.pi * np.arange(M) / M
            self.weights = np.full(M, 2 * math.pi / M)
            self.nodes = np.stack([np.cos(self.theta), np.sin(self.theta)], axis=1)
            self.degrees = np.array([0] + [k for k in range(1, self.l_max + 1) for _ in (0, 1)])
        else:
            nt = self.l_max + 1
            nphi = 2 * self.l_max + 2
            x, w = np.polynomial.legendre.leggauss(nt)
            th = np.arccos(x)
            ph = 2 * math.pi * np.arange(nphi) / nphi
            T, PH = np.meshgrid(th, ph, indexing="ij")
            self.theta = T.reshape(-1)
            self.phi = PH.reshape(-1)
            self.weights = np.repeat(w, nphi) * (2 * math.pi / nphi)
            st = np.sin(self.theta)
            self.nodes = np.stack(
                [st * np.cos(self.phi), st * np.sin(self.phi), np.cos(self.theta)], axis=1
            )
            self.degrees = np.array([l for l in range(self.l_max + 1) for _ in range(2 * l + 1)])

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_coeffs(self) -> int:
        return self.degrees.shape[0]

    @property
    def area(self) -> float:
        return self.ndim * unit_ball_volume(self.ndim)

    @cached_property
    def _node_basis(self) -> dict:
        return self.basis_at(self.nodes, order=2)

    def basis_at(self, directions: np.ndarray, order: int = 0) -> dict:
        """Basis matrices (points x coefficients) at unit ``directions``."""
        directions = np.atleast_2d(directions)
        if self.ndim == 2:
            th = np.arctan2(directions[:, 1], directions[:, 0])
            return _basis2(self.l_max, th, order)
        th = np.arccos(np.clip(directions[:, 2], -1.0, 1.0))
        ph = np.arctan2(directions[:, 1], directions[:, 0])
        return _basis3(self.l_max, th, ph, order)

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def analyze(self, values) -> np.ndarray:
        """Harmonic coefficients by quadrature projection."""
        return self._node_basis["f"].T @ (self.weights * np.asarray(values, dtype=float))

    def synthesize(self, coeffs, kind: str = "f") -> np.ndarray:
        """Values (or an angular derivative, see :func:`_basis3`) at the nodes."""
        return self._node_basis[kind] @ coeffs

    def harmonic(self, degree: int, index: int = 0) -> np.ndarray:
        """Orthonormal basis function of the given degree at the nodes.

        ``index`` runs over the ``2*degree + 1`` (N=3) or 2 (N=2) functions of
        that degree.
        """
        cols = np.flatnonzero(self.degrees == degree)
        if cols.size == 0:
            raise ValueError(f"degree {degree} exceeds l_max = {self.l_max}")
        return self._node_basis["f"][:, cols[index]].copy()

    def laplacian_eigenvalue(self, degree):
        return degree * (degree + self.ndim - 2)


# ---------------------------------------------------------------------------
# radial graphs


@dataclass(frozen=True)
class RadialGraph:
    """Scalar ``f > -1`` on the nodes of ``grid`` and reference volume ``mu``."""

    grid: SphereGrid = field(repr=False)
    values: np.ndarray = field(repr=False)
    mu: float

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.shape != (self.grid.n_nodes,):
            raise ValueError("values must have one entry per node")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zero(cls, grid: SphereGrid, mu: float) -> "RadialGraph":
        return cls(grid, np.zeros(grid.n_nodes), mu)

    @classmethod
    def from_coeffs(cls, grid: SphereGrid, coeffs, mu: float) -> "RadialGraph":
        return cls(grid, grid.synthesize(np.asarray(coeffs, dtype=float)), mu)

    @property
    def radius(self) -> float:
        """``r(mu)``, the radius of the reference ball."""
        return radius_for_volume(self.mu, self.grid.ndim)

    @cached_property
    def coeffs(self) -> np.ndarray:
        return self.grid.analyze(self.values)

    @cached_property
    def derivatives(self) -> dict:
        g = self.grid
        keys = ["t", "tt"] if g.ndim == 2 else ["t", "p", "tt", "tp", "pp"]
        return {k: g.synthesize(self.coeffs, k) for k in keys}

    @cached_property
    def grad_sq(self) -> np.ndarray:
        """``|grad f|**2`` on the unit sphere."""
        d = self.derivatives
        if self.grid.ndim == 2:
            return d["t"] ** 2
        return d["t"] ** 2 + d["p"] ** 2 / np.sin(self.grid.theta) ** 2

    @property
    def c1_norm(self) -> float:
        return float(np.abs(self.values).max() + np.sqrt(self.grad_sq).max())

    def degree_energy(self) -> np.ndarray:
        """Squared L2 mass of ``f`` per harmonic degree."""
        return np.bincount(self.grid.degrees, weights=self.coeffs**2, minlength=self.grid.l_max + 1)

    def check_star_shaped(self):
        if self.values.min() <= -1.0:
            raise ValueError("f <= -1 somewhere: the radial graph is not star-shaped")

    def with_values(self, values) -> "RadialGraph":
        return RadialGraph(self.grid, values, self.mu)


def _same_grid(g1: RadialGraph, g2: RadialGraph):
    if g1.grid is not g2.grid and (
        g1.grid.ndim != g2.grid.ndim or g1.grid.l_max != g2.grid.l_max
    ):
        raise ValueError("radial graphs live on different sphere grids")


# ---------------------------------------------------------------------------
# geometric functionals


def volume_radial(g: RadialGraph) -> float:
    g.check_star_shaped()
    N = g.grid.ndim
    return g.radius**N / N * g.grid.integrate((1.0 + g.values) ** N)


def barycenter_radial(g: RadialGraph) -> np.ndarray:
    g.check_star_shaped()
    N = g.grid.ndim
    r = g.radius
    vol = volume_radial(g)
    rho = (1.0 + g.values) ** (N + 1)
    return r ** (N + 1) / ((N + 1) * vol) * (g.grid.weights * rho) @ g.grid.nodes


def perimeter_radial(g: RadialGraph) -> float:
    g.check_star_shaped()
    N = g.grid.ndim
    one_f = 1.0 + g.values
    integrand = one_f ** (N - 1) * np.sqrt(1.0 + g.grad_sq / one_f**2)
    return g.radius ** (N - 1) * g.grid.integrate(integrand)


def _surface_frame(g: RadialGraph):
    """Points, first and second fundamental forms and unit normal per node."""
    grid = g.grid
    r = g.radius
    d = g.derivatives
    rho = r * (1.0 + g.values)
    th, ph = grid.theta, grid.phi
    st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
    x = grid.nodes
    e_t = np.stack([ct * cp, ct * sp, -st], axis=1)
    e_p = np.stack([-sp, cp, np.zeros_like(sp)], axis=1)
    x_p = st[:, None] * e_p
    x_tp = ct[:, None] * e_p
    x_pp = -st[:, None] * (st[:, None] * x + ct[:, None] * e_t)
    rt, rp = r * d["t"], r * d["p"]
    rtt, rtp, rpp = r * d["tt"], r * d["tp"], r * d["pp"]
    R = rho[:, None]
    p_t = rt[:, None] * x + R * e_t
    p_p = rp[:, None] * x + R * x_p
    p_tt = rtt[:, None] * x + 2 * rt[:, None] * e_t - R * x
    p_tp = rtp[:, None] * x + rt[:, None] * x_p + rp[:, None] * e_t + R * x_tp
    p_pp = rpp[:, None] * x + 2 * rp[:, None] * x_p + R * x_pp
    n = np.cross(p_t, p_p)
    n /= np.linalg.norm(n, axis=1)[:, None]
    n *= np.sign((n * x).sum(axis=1))[:, None]
    E = (p_t * p_t).sum(1)
    F = (p_t * p_p).sum(1)
    G = (p_p * p_p).sum(1)
    e = (p_tt * n).sum(1)
    f = (p_tp * n).sum(1)
    gg = (p_pp * n).sum(1)
    return E, F, G, e, f, gg


def mean_curvature_radial(g: RadialGraph, delta: float = DELTA) -> np.ndarray:
    """Sum of principal curvatures of ``partial E_{f,mu}`` (outward normal) per node."""
    g.check_star_shaped()
    if g.c1_norm > delta:
        raise ValueError(f"||f||_C1 = {g.c1_norm:.3g} exceeds delta = {delta}")
    r = g.radius
    if g.grid.ndim == 2:
        d = g.derivatives
        rho = r * (1.0 + g.values)
        r1, r2 = r * d["t"], r * d["tt"]
        H = (rho**2 + 2 * r1**2 - rho * r2) / (rho**2 + r1**2) ** 1.5
    else:
        E, F, G, e, f, gg = _surface_frame(g)
        H = -(e * G - 2 * f * F + gg * E) / (E * G - F * F)
    if np.abs(H).max() > CURVATURE_GUARD / r:
        raise ValueError("mean curvature blow-up: |H| exceeds 1e3 / r(mu)")
    return H


def curvature_weak_form(g: RadialGraph, psi) -> float:
    """``d/dt P(E_{f + t psi})`` at ``t = 0`` written with the curvature."""
    H = mean_curvature_radial(g)
    N = g.grid.ndim
    r = g.radius
    return r * g.grid.integrate(H * np.asarray(psi) * (r * (1.0 + g.values)) ** (N - 1))


def _sphere_norms(g: RadialGraph):
    N = g.grid.ndim
    r = g.radius
    l2 = r ** (N - 1) * g.grid.integrate(g.values**2)
    grad = r ** (N - 3) * g.grid.integrate(g.grad_sq)
    return l2, grad


def check_normalized(g: RadialGraph, rtol: float = 1e-10):
    vol = volume_radial(g)
    if abs(vol - g.mu) > rtol * g.mu:
        raise NormalizationError(f"volume {vol!r} differs from mu = {g.mu!r} (run normalize first)")
    b = barycenter_radial(g)
    if np.linalg.norm(b) > rtol * g.radius:
        raise NormalizationError(f"barycentre {b.tolist()} is off the origin (run normalize first)")


def alexandrov_ratio(g: RadialGraph, delta: float = DELTA):
    """``||f||_{H1} / ||H - mean H||_{L2}`` on the reference sphere of radius ``r(mu)``.

    The mean is the quadrature average of ``H`` composed with the graph map
    over the reference sphere. ``details`` also carries the average over the
    surface itself and the ratio computed with it.
    """
    check_normalized(g)
    if g.c1_norm > delta:
        raise NormalizationError(f"||f||_C1 = {g.c1_norm:.3g} exceeds delta = {delta}")
    N = g.grid.ndim
    r = g.radius
    H = mean_curvature_radial(g, delta)
    w = g.grid.weights
    H_ref = g.grid.integrate(H) / g.grid.area
    one_f = 1.0 + g.values
    area_el = one_f ** (N - 1) * np.sqrt(1.0 + g.grad_sq / one_f**2)
    H_surf = float(np.dot(w * area_el, H) / np.dot(w, area_el))
    l2, grad = _sphere_norms(g)
    h1 = math.sqrt(l2 + grad)
    dev = math.sqrt(r ** (N - 1) * g.grid.integrate((H - H_ref) ** 2))
    dev_surf = math.sqrt(r ** (N - 1) * g.grid.integrate((H - H_surf) ** 2))
    ratio = h1 / dev if dev > 0 else (0.0 if h1 == 0 else math.inf)
    details = {
        "h1_norm": h1,
        "l2_norm": math.sqrt(l2),
        "curvature_deviation": dev,
        "mean_curvature_reference": H_ref,
        "mean_curvature_surface": H_surf,
        "ratio_surface_mean": h1 / dev_surf if dev_surf > 0 else math.inf,
    }
    return ratio, details


# ---------------------------------------------------------------------------
# evaluation off the nodes


def _eval_radius(g_coeffs, grid: SphereGrid, r: float, directions, order: int = 0):
    """``rho = r (1 + f)`` and its angular derivatives at arbitrary directions."""
    B = grid.basis_at(directions, order)
    out = {k: r * (v @ g_coeffs) for k, v in B.items()}
    out["f"] = out["f"] + r
    return out


def _angles(directions, ndim):
    if ndim == 2:
        return (np.arctan2(directions[:, 1], directions[:, 0]),)
    return (
        np.arccos(np.clip(directions[:, 2], -1.0, 1.0)),
        np.arctan2(directions[:, 1], directions[:, 0]),
    )


def _dir_from_angles(angles):
    if len(angles) == 1:
        (t,) = angles
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    t, p = angles
    st = np.sin(t)
    return np.stack([st * np.cos(p), st * np.sin(p), np.cos(t)], axis=1)


def _surface_point(g: RadialGraph, angles, order=1):
    grid = g.grid
    d = _dir_from_angles(angles)
    ev = _eval_radius(g.coeffs, grid, g.radius, d, order)
    rho = ev["f"]
    p = rho[:, None] * d
    if order == 0:
        return p, None
    if grid.ndim == 2:
        (t,) = angles
        e_t = np.stack([-np.sin(t), np.cos(t)], axis=1)
        tangents = [ev["t"][:, None] * d + rho[:, None] * e_t]
    else:
        t, ph = angles
        ct, st, cp, sp = np.cos(t), np.sin(t), np.cos(ph), np.sin(ph)
        e_t = np.stack([ct * cp, ct * sp, -st], axis=1)
        e_p = np.stack([-sp, cp, np.zeros_like(sp)], axis=1)
        tangents = [
            ev["t"][:, None] * d + rho[:, None] * e_t,
            ev["p"][:, None] * d + (rho * st)[:, None] * e_p,
        ]
    return p, tangents


def distance_to_surface(g: RadialGraph, points: np.ndarray, max_iter: int = 50, tol: float = 1e-13):
    """Unsigned distance from ``points`` to ``partial E_{f,mu}``.

    Foot points are found by Gauss-Newton on the surface parametrisation,
    starting from the radial projection; this converges for C1-small graphs
    and points near the surface.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    nd = g.grid.ndim
    norm = np.linalg.norm(points, axis=1)
    if np.any(norm == 0):
        raise ValueError("points at the centre have no radial projection")
    angles = list(_angles(points / norm[:, None], nd))
    scale = g.radius
    for _ in range(max_iter):
        p, T = _surface_point(g, angles, order=1)
        res = points - p
        if nd == 2:
            (t1,) = T
            step = (res * t1).sum(1) / (t1 * t1).sum(1)
            steps = [step]
        else:
            t1, t2 = T
            a11 = (t1 * t1).sum(1)
            a12 = (t1 * t2).sum(1)
            a22 = (t2 * t2).sum(1)
            b1 = (res * t1).sum(1)
            b2 = (res * t2).sum(1)
            det = a11 * a22 - a12 * a12
            steps = [(a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det]
        angles = [a + s for a, s in zip(angles, steps)]
        move = max(float(np.abs(s).max()) for s in steps)
        if move * scale < tol * scale:
            break
    else:
        raise ConvergenceError("foot-point projection did not converge")
    p, _ = _surface_point(g, angles, order=0)
    return np.linalg.norm(points - p, axis=1)


def signed_distance_radial(g: RadialGraph, points: np.ndarray) -> np.ndarray:
    """Distance to ``partial E_{f,mu}``, negative inside."""
    points = np.atleast_2d(points)
    dist = distance_to_surface(g, points)
    norm = np.linalg.norm(points, axis=1)
    rho = _eval_radius(g.coeffs, g.grid, g.radius, points / norm[:, None])["f"]
    return np.where(norm < rho, -dist, dist)


# ---------------------------------------------------------------------------
# dissipation


_RAY_NODES = 8


def dissipation_radial(g1: RadialGraph, g2: RadialGraph) -> float:
    """``D(E1, E2)``: integral over ``E1 xor E2`` of the distance to ``partial E2``.

    Along every node direction the symmetric difference is the segment between
    the two radii; it is integrated with Gauss-Legendre in the radius.
    """
    _same_grid(g1, g2)
    g1.check_star_shaped()
    g2.check_star_shaped()
    grid = g1.grid
    N = grid.ndim
    r1 = g1.radius * (1.0 + g1.values)
    r2 = g2.radius * (1.0 + g2.values)
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    half = 0.5 * (hi - lo)
    if not np.any(half > 0):
        return 0.0
    xg, wg = np.polynomial.legendre.leggauss(_RAY_NODES)
    t = 0.5 * (hi + lo)[:, None] + half[:, None] * xg[None, :]
    pts = (t[:, :, None] * grid.nodes[:, None, :]).reshape(-1, N)
    dist = distance_to_surface(g2, pts).reshape(t.shape)
    per_ray = half * ((dist * t ** (N - 1)) @ wg)
    return float(np.dot(grid.weights, per_ray))


def sandwich_bounds(g1: RadialGraph, g2: RadialGraph, eta: float):
    """``r**2 (1 -+ eta) ||f1 - f2||**2 / 2`` with the norm on the reference sphere."""
    _same_grid(g1, g2)
    N = g1.grid.ndim
    r = g1.radius
    sq = r ** (N - 1) * g1.grid.integrate((g1.values - g2.values) ** 2)
    return r**2 * (1 - eta) * sq / 2, r**2 * (1 + eta) * sq / 2


# ---------------------------------------------------------------------------
# normalisation


def _shift_to_volume(g: RadialGraph, tol: float = 1e-15) -> RadialGraph:
    """Dilate about the origin so the volume equals ``mu``."""
    kappa = (g.mu / volume_radial(g)) ** (1.0 / g.grid.ndim)
    return g.with_values(kappa - 1.0 + kappa * g.values)


def _recenter(g: RadialGraph, b: np.ndarray, max_iter: int = 100) -> RadialGraph:
    """Radial function of the same set seen from the point ``b``."""
    grid = g.grid
    r = g.radius
    x = grid.nodes
    t = r * (1.0 + g.values)
    for _ in range(max_iter):
        q = b[None, :] + t[:, None] * x
        qn = np.linalg.norm(q, axis=1)
        rho = _eval_radius(g.coeffs, grid, r, q / qn[:, None])["f"]
        gap = rho - qn
        t = t + gap / np.maximum((x * q).sum(1) / qn, 0.5)
        if np.abs(gap).max() < 1e-15 * r:
            break
    else:
        raise ConvergenceError("ray intersection did not converge while recentring")
    return g.with_values(t / r - 1.0)


def normalize(g: RadialGraph, rtol: float = 1e-12, max_iter: int = 50) -> RadialGraph:
    """Rescale to volume ``mu`` and move the barycentre to the origin."""
    g.check_star_shaped()
    for _ in range(max_iter):
        g = _shift_to_volume(g)
        b = barycenter_radial(g)
        vol_err = abs(volume_radial(g) - g.mu) / g.mu
        if np.linalg.norm(b) <= rtol * g.radius and vol_err <= rtol:
            return g
        g = _recenter(g, b)
    raise ConvergenceError("normalisation did not converge in 50 iterations")


# ---------------------------------------------------------------------------
# one implicit step among radial graphs


def _set_volume(g: RadialGraph) -> RadialGraph:
    """Add the constant that restores volume ``mu`` (Newton in the constant)."""
    N = g.grid.ndim
    r = g.radius
    f = g.values
    c = 0.0
    for _ in range(50):
        one = 1.0 + f + c
        vol = r**N / N * g.grid.integrate(one**N)
        dvol = r**N * g.grid.integrate(one ** (N - 1))
        dc = (g.mu - vol) / dvol
        c += dc
        if abs(dc) < 1e-16:
            break
    return g.with_values(f + c)


@dataclass(frozen=True)
class ProbeReport:
    f2: RadialGraph = field(repr=False)
    D_ball: float
    D_step: float
    ratio: float
    residual: float
    lam: float
    iterations: int
    degenerate: bool


def euler_lagrange_residual(g2: RadialGraph, g1: RadialGraph, h: float):
    """``H + d_{E1}/h - lam`` on ``partial E2`` with ``lam`` its mean; returns (field, lam, L2 norm)."""
    N = g2.grid.ndim
    r = g2.radius
    H = mean_curvature_radial(g2)
    pts = (r * (1.0 + g2.values))[:, None] * g2.grid.nodes
    d = signed_distance_radial(g1, pts)
    G = H + d / h
    lam = g2.grid.integrate(G) / g2.grid.area
    res = G - lam
    norm = math.sqrt(r ** (N - 1) * g2.grid.integrate(res**2))
    return res, lam, norm


def dissipation_comparison_probe(g1: RadialGraph, h: float, tol: float = 1e-6, max_iter: int = 200) -> ProbeReport:
    """Solve the one-step optimality condition among radial graphs from ``g1``.

    The update is a gradient step on the step energy preconditioned by its
    linearisation at the round sphere, mode by mode; volume is restored by a
    constant shift after every update. Reports ``D(B, E2) / D(E2, E1)`` with
    ``B`` the ball centred at the barycentre of ``E2``.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    g1.check_star_shaped()
    grid = g1.grid
    N = grid.ndim
    r = g1.radius
    lam_l = grid.laplacian_eigenvalue(grid.degrees)
    precond = (lam_l - (N - 1)) / r**2 + 1.0 / h
    g2 = _set_volume(g1)
    for it in range(1, max_iter + 1):
        res, lam, norm = euler_lagrange_residual(g2, g1, h)
        if norm <= tol:
            break
        coeffs = grid.analyze(res)
        update = -coeffs / precond / r
        update[grid.degrees == 0] = 0.0
        g2 = _set_volume(g2.with_values(g2.values + grid.synthesize(update)))
    else:
        raise ConvergenceError(f"probe descent stalled with residual {norm:.3e}")
    D_step = dissipation_radial(g2, g1)
    centred = normalize(g2)
    D_ball = dissipation_radial(RadialGraph.zero(grid, g1.mu), centred)
    degenerate = D_step == 0.0
    ratio = float("nan") if degenerate else D_ball / D_step
    return ProbeReport(g2, D_ball, D_step, ratio, norm, lam, it, degenerate)


# ---------------------------------------------------------------------------
# random test functions and sweeps


def random_band_limited(grid: SphereGrid, rng: np.random.Generator, degrees=(2, 6), c1: float = 0.05):
    """Random combination of harmonics with degrees in ``degrees`` scaled to a C1 norm."""
    lo, hi = degrees
    if hi > grid.l_max:
        raise ValueError("requested degrees exceed l_max")
    coeffs = np.zeros(grid.n_coeffs)
    band = (grid.degrees >= lo) & (grid.degrees <= hi)
    coeffs[band] = rng.standard_normal(int(band.sum())) / (1.0 + grid.degrees[band])
    g = RadialGraph.from_coeffs(grid, coeffs, 1.0)
    return g.values * (c1 / g.c1_norm)


def alexandrov_sweep(grid: SphereGrid, n_trials: int, seed: int, degrees=(2, 6), c1_max: float = 0.05, mu=None):
    """Rows ``(trial, c1, h1_norm, curvature_deviation, ratio)`` for random normalised graphs."""
    mu = unit_ball_volume(grid.ndim) if mu is None else mu
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_trials):
        # leave room for the C1 growth that normalisation may cause
        target = c1_max * rng.uniform(0.2, 0.9)
        g = normalize(RadialGraph(grid, random_band_limited(grid, rng, degrees, target), mu))
        ratio, det = alexandrov_ratio(g, delta=max(DELTA, c1_max))
        rows.append((k, g.c1_norm, det["h1_norm"], det["curvature_deviation"], ratio))
    return rows


def eps_halving(grid: SphereGrid, degree: int = 2, eps0: float = 1e-3, n: int = 4, mu=None):
    """Rows ``(eps, ratio)`` for normalised ``eps * Y`` with eps halved each row."""
    mu = unit_ball_volume(grid.ndim) if mu is None else mu
    Y = grid.harmonic(degree)
    rows = []
    for k in range(n):
        eps = eps0 / 2**k
        g = normalize(RadialGraph(grid, eps * Y, mu))
        ratio, _ = alexandrov_ratio(g)
        rows.append((eps, ratio))
    return rows


def linearized_ratio(degree: int, ndim: int, radius: float = 1.0) -> float:
    """Ratio predicted by linearising curvature around the sphere for one degree."""
    lam = degree * (degree + ndim - 2)
    r = radius
    h1 = math.sqrt(r ** (ndim - 1) * (1.0 + lam / r**2))
    dev = r ** ((ndim - 1) / 2) * (lam - (ndim - 1)) / r**2
    return h1 / dev


def sandwich_sweep(grid: SphereGrid, n_pairs: int, seed: int, eta: float = 0.2, c1: float = 0.05, degrees=(1, 6), mu=None):
    """Rows ``(pair, D, lower, upper, passed)`` for random pairs of small graphs."""
    mu = unit_ball_volume(grid.ndim) if mu is None else mu
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_pairs):
        f1 = random_band_limited(grid, rng, degrees, c1 * rng.uniform(0.2, 1.0))
        f2 = random_band_limited(grid, rng, degrees, c1 * rng.uniform(0.2, 1.0))
        g1, g2 = RadialGraph(grid, f1, mu), RadialGraph(grid, f2, mu)
        D = dissipation_radial(g1, g2)
        lo, hi = sandwich_bounds(g1, g2, eta)
        rows.append((k, D, lo, hi, bool(lo <= D <= hi)))
    return rows


def concentric_dissipation(r1: float, r2: float, ndim: int) -> float:
    """Closed form of ``D(B_{r2}, B_{r1})`` for concentric balls."""
    area = ndim * unit_ball_volume(ndim)
    a, b = min(r1, r2), max(r1, r2)
    # integral of |t - r1| * area * t**(N-1) dt over [a, b]
    F = lambda t: area * (t ** (ndim + 1) / (ndim + 1) - r1 * t**ndim / ndim)  # noqa: E731
    return abs(F(b) - F(a))


# ---------------------------------------------------------------------------
# serialisation


def radial_graph_csv(g: RadialGraph) -> str:
    from .io import csv_text

    nd = g.grid.ndim
    header = ["node", "x", "y", "z"][: nd + 1] + ["f"]
    rows = ([k, *g.grid.nodes[k], g.values[k]] for k in range(g.grid.n_nodes))
    return csv_text(header, rows)


def radial_graph_header(g: RadialGraph) -> dict:
    return {"N": g.grid.ndim, "L_max": g.grid.l_max, "mu": g.mu, "n_nodes": g.grid.n_nodes}


def read_radial_graph(csv_text_value: str, header: dict) -> RadialGraph:
    import csv
    import io

    grid = SphereGrid(int(header["N"]), int(header["L_max"]))
    rows = list(csv.reader(io.StringIO(csv_text_value)))[1:]
    values = np.array([float(r[-1]) for r in rows])
    return RadialGraph(grid, values, float(header["mu"]))
