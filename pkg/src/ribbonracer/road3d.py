"""3D ribbon-road model.

A road is a ribbon around a spine curve parameterized by arc length ``zeta``.
Its shape is stored as three curvature profiles:

* ``kappa``   -- geodesic (horizontal) curvature, turns the heading ``theta``
* ``upsilon`` -- sagittal curvature, drives the slope ``mu``
* ``tau``     -- frontal (twist) curvature, drives the banking ``phi``

plus left/right lateral widths. Slope and banking must stay inside the
small-angle region (|mu|, |phi| <= 0.25 rad); heading is unrestricted. The
angles follow the coupled ODEs

    theta' = kappa + phi * upsilon
    mu'    = upsilon - kappa * phi
    phi'   = tau + kappa * mu

which notably means a level banked arc (mu == 0, phi != 0) carries an implied
sagittal curvature upsilon = kappa * phi. The track synthesizer in this module
authors tracks in angle space and recovers curvatures through the inverse of
the ODEs, so that coupling is always honored.

File format: ``<name>.csv`` with header ``zeta,kappa,upsilon,tau,d_left,d_right``
and a ``<name>.meta.json`` sidecar holding ``theta0, mu0, phi0, closed, name``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.interpolate import CubicSpline, make_interp_spline

from .errors import AngleBoundError, TrackFormatError, TrackInvariantError

ANGLE_BOUND = 0.25          # rad, validity limit for |mu| and |phi|
CLOSURE_TOL_ANGLE = 1e-6    # rad, heading/slope/banking closure for closed tracks
CLOSURE_TOL_POSITION = 1e-3  # m, spine closure for closed tracks
DEFAULT_GRID_STEP = 1.0     # m
_CSV_HEADER = ["zeta", "kappa", "upsilon", "tau", "d_left", "d_right"]


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rotation_exact(theta: float, mu: float, phi: float) -> np.ndarray:
    """Exact road-frame rotation R_z(theta) @ R_y(-mu) @ R_x(-phi)."""
    ct, st = math.cos(theta), math.sin(theta)
    cm, sm = math.cos(mu), math.sin(mu)
    cp, sp = math.cos(phi), math.sin(phi)
    return np.array([
        [ct * cm, ct * sm * sp - st * cp, -ct * sm * cp - st * sp],
        [st * cm, st * sm * sp + ct * cp, -st * sm * cp + ct * sp],
        [sm, -cm * sp, cm * cp],
    ])


def rotation_small_angle(theta: float, mu: float, phi: float) -> np.ndarray:
    """First-order (in mu, phi) road-frame rotation; theta stays exact."""
    ct, st = math.cos(theta), math.sin(theta)
    return np.array([
        [ct, -st, -st * phi - ct * mu],
        [st, ct, ct * phi - st * mu],
        [mu, -phi, 1.0],
    ])


def skew_from_curvatures(kappa: float, upsilon: float, tau: float) -> np.ndarray:
    """Skew matrix pairing the three curvatures, W = [[0, -k, u], [k, 0, -t], [-u, t, 0]]."""
    return np.array([
        [0.0, -kappa, upsilon],
        [kappa, 0.0, -tau],
        [-upsilon, tau, 0.0],
    ])


@dataclass(frozen=True)
class RoadFrame:
    """Road-frame rotation at one station: exact and small-angle forms."""

    theta: float
    mu: float
    phi: float
    exact: np.ndarray
    small_angle: np.ndarray

    def deviation(self) -> float:
        """Max elementwise |exact - small_angle|, O(mu^2, phi^2, mu*phi)."""
        return float(np.max(np.abs(self.exact - self.small_angle)))


def road_rotation(theta: float, mu: float, phi: float) -> RoadFrame:
    """Build the road frame at given angles (exact plus small-angle form)."""
    if abs(mu) > ANGLE_BOUND or abs(phi) > ANGLE_BOUND:
        raise AngleBoundError(
            f"slope/banking out of small-angle region: mu={mu:.4f}, phi={phi:.4f}, "
            f"bound {ANGLE_BOUND}")
    return RoadFrame(theta, mu, phi,
                     rotation_exact(theta, mu, phi),
                     rotation_small_angle(theta, mu, phi))


# ---------------------------------------------------------------------------
# ribbon container
# ---------------------------------------------------------------------------

class RoadSample(NamedTuple):
    """Road data interpolated at query stations (arrays aligned with the query)."""

    kappa: np.ndarray
    upsilon: np.ndarray
    tau: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    d_left: np.ndarray
    d_right: np.ndarray


@dataclass
class RoadRibbon:
    """Sampled ribbon road. Treat as immutable after construction.

    Instances should be created through :func:`build_ribbon`, :func:`load_track`
    or :func:`synthesize_track`, which integrate the angle tables and build the
    interpolants exactly once; afterwards the object is safe for concurrent reads.
    """

    zeta: np.ndarray
    kappa: np.ndarray
    upsilon: np.ndarray
    tau: np.ndarray
    d_left: np.ndarray
    d_right: np.ndarray
    theta0: float = 0.0
    mu0: float = 0.0
    phi0: float = 0.0
    closed: bool = False
    name: str = "unnamed"
    # filled by build_ribbon
    theta: np.ndarray = field(default=None, repr=False)
    mu: np.ndarray = field(default=None, repr=False)
    phi: np.ndarray = field(default=None, repr=False)
    _interp: dict = field(default=None, repr=False, compare=False)

    @property
    def length(self) -> float:
        return float(self.zeta[-1] - self.zeta[0])

    @property
    def grid_step(self) -> float:
        return float(np.max(np.diff(self.zeta)))

    @property
    def turns(self) -> int:
        """Net number of full heading revolutions (closed tracks)."""
        return int(round((self.theta[-1] - self.theta[0]) / (2.0 * math.pi)))

    # -- queries ------------------------------------------------------------

    def wrap(self, zeta) -> np.ndarray:
        """Map stations into the base interval (modulo length for closed tracks)."""
        z = np.asarray(zeta, dtype=float)
        z0 = self.zeta[0]
        if self.closed:
            return z0 + np.mod(z - z0, self.length)
        return z

    def sample(self, zeta) -> RoadSample:
        """Interpolate curvatures, angles and widths at the given stations.

        Closed tracks wrap the query; open tracks raise on out-of-range stations.
        """
        z = np.atleast_1d(np.asarray(zeta, dtype=float))
        z0, z1 = self.zeta[0], self.zeta[-1]
        if self.closed:
            laps = np.floor((z - z0) / self.length)
            zq = z0 + (z - z0) - laps * self.length
            # guard against roundoff landing a hair outside the base interval
            zq = np.clip(zq, z0, z1)
        else:
            if np.any(z < z0 - 1e-9) or np.any(z > z1 + 1e-9):
                raise TrackInvariantError(
                    f"station query outside open track range [{z0:g}, {z1:g}]")
            laps = np.zeros_like(z)
            zq = np.clip(z, z0, z1)
        itp = self._interp
        theta = itp["theta"](zq) + 2.0 * math.pi * self.turns * laps if self.closed \
            else itp["theta"](zq)
        return RoadSample(
            kappa=itp["kappa"](zq), upsilon=itp["upsilon"](zq), tau=itp["tau"](zq),
            theta=theta, mu=itp["mu"](zq), phi=itp["phi"](zq),
            d_left=itp["d_left"](zq), d_right=itp["d_right"](zq))

    def sample_curvature_slopes(self, zeta) -> tuple:
        """d(kappa)/dz, d(upsilon)/dz, d(tau)/dz at the given stations."""
        zq = self.wrap(np.atleast_1d(np.asarray(zeta, dtype=float)))
        zq = np.clip(zq, self.zeta[0], self.zeta[-1])
        itp = self._interp
        return (itp["dkappa"](zq), itp["dupsilon"](zq), itp["dtau"](zq))


# ---------------------------------------------------------------------------
# angle integration and its inverse
# ---------------------------------------------------------------------------

def _angle_rates(kappa, upsilon, tau, theta, mu, phi):
    """Right-hand side of the coupled angle ODEs (vector friendly)."""
    dtheta = kappa + phi * upsilon
    dmu = upsilon - kappa * phi
    dphi = tau + kappa * mu
    return dtheta, dmu, dphi


def integrate_angles(zeta, kappa_fn, upsilon_fn, tau_fn,
                     theta0=0.0, mu0=0.0, phi0=0.0, check_bounds=True):
    """Integrate heading/slope/banking along the grid with fixed-step RK4.

    ``kappa_fn`` etc. are callables evaluating the curvature profiles at
    arbitrary stations (one RK4 step per grid interval, so the step never
    exceeds the grid spacing).

    Returns (theta, mu, phi) tables aligned with ``zeta``.
    """
    z = np.asarray(zeta, dtype=float)
    n = z.size
    mids = 0.5 * (z[:-1] + z[1:])
    k_n, u_n, t_n = kappa_fn(z), upsilon_fn(z), tau_fn(z)
    k_m, u_m, t_m = kappa_fn(mids), upsilon_fn(mids), tau_fn(mids)

    theta = np.empty(n)
    mu = np.empty(n)
    phi = np.empty(n)
    theta[0], mu[0], phi[0] = theta0, mu0, phi0
    for i in range(n - 1):
        h = z[i + 1] - z[i]
        y = (theta[i], mu[i], phi[i])
        k1 = _angle_rates(k_n[i], u_n[i], t_n[i], *y)
        y2 = tuple(y[j] + 0.5 * h * k1[j] for j in range(3))
        k2 = _angle_rates(k_m[i], u_m[i], t_m[i], *y2)
        y3 = tuple(y[j] + 0.5 * h * k2[j] for j in range(3))
        k3 = _angle_rates(k_m[i], u_m[i], t_m[i], *y3)
        y4 = tuple(y[j] + h * k3[j] for j in range(3))
        k4 = _angle_rates(k_n[i + 1], u_n[i + 1], t_n[i + 1], *y4)
        theta[i + 1] = y[0] + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        mu[i + 1] = y[1] + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        phi[i + 1] = y[2] + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if check_bounds and (abs(mu[i + 1]) > ANGLE_BOUND or abs(phi[i + 1]) > ANGLE_BOUND):
            raise AngleBoundError(
                f"integrated angles left the small-angle region near zeta="
                f"{z[i + 1]:.1f} m (mu={mu[i + 1]:.4f}, phi={phi[i + 1]:.4f})")
    return theta, mu, phi


def curvatures_from_angles(zeta, theta, mu, phi, closed=False, max_iter=50, tol=1e-12):
    """Recover (kappa, upsilon, tau) tables from angle tables.

    Differentiates the angle tables with a cubic spline and solves the coupled
    relations by fixed-point iteration (contraction rate ~ phi^2 inside the
    small-angle region). For closed tracks the tables are wrap-padded before
    differentiation so the spline sees no artificial boundary.
    """
    z = np.asarray(zeta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)

    if closed and z.size > 16:
        pad = 8
        length = z[-1] - z[0]
        dth_total = theta[-1] - theta[0]
        zp = np.concatenate([z[-1 - pad:-1] - length, z, z[1:1 + pad] + length])

        def deriv(y, offset=0.0):
            yp = np.concatenate([y[-1 - pad:-1] - offset, y, y[1:1 + pad] + offset])
            return make_interp_spline(zp, yp, k=5).derivative()(z)

        dtheta = deriv(theta, dth_total)
        dmu = deriv(mu)
        dphi = deriv(phi)
    else:
        k = 5 if z.size > 8 else 3
        dtheta = make_interp_spline(z, theta, k=k).derivative()(z)
        dmu = make_interp_spline(z, mu, k=k).derivative()(z)
        dphi = make_interp_spline(z, phi, k=k).derivative()(z)

    kappa = dtheta.copy()
    upsilon = dmu.copy()
    tau = dphi.copy()
    for _ in range(max_iter):
        kappa_new = dtheta - phi * upsilon
        upsilon_new = dmu + kappa_new * phi
        tau_new = dphi - kappa_new * mu
        delta = max(np.max(np.abs(kappa_new - kappa)),
                    np.max(np.abs(upsilon_new - upsilon)),
                    np.max(np.abs(tau_new - tau)))
        kappa, upsilon, tau = kappa_new, upsilon_new, tau_new
        if delta < tol:
            return kappa, upsilon, tau
    raise TrackInvariantError(
        f"curvature recovery did not converge in {max_iter} iterations "
        f"(last update {delta:.2e}); angles are likely out of the valid region")


def _exact_curvatures_from_rates(dtheta, mu, dmu, phi, dphi):
    """Closed-form inverse of the angle ODEs given analytic angle rates."""
    kappa = (dtheta - phi * dmu) / (1.0 + phi ** 2)
    upsilon = dmu + kappa * phi
    tau = dphi - kappa * mu
    return kappa, upsilon, tau


# ---------------------------------------------------------------------------
# construction / IO / validation
# ---------------------------------------------------------------------------

def _build_interpolants(ribbon: RoadRibbon) -> None:
    z = ribbon.zeta
    closed = ribbon.closed

    def curv_spline(y):
        if closed:
            yy = y.copy()
            yy[-1] = yy[0]  # periodic BC requires exact equality
            return CubicSpline(z, yy, bc_type="periodic")
        return CubicSpline(z, y, bc_type="clamped")

    itp = {}
    for nm in ("kappa", "upsilon", "tau", "d_left", "d_right"):
        itp[nm] = curv_spline(getattr(ribbon, nm))
    for nm in ("kappa", "upsilon", "tau"):
        itp["d" + nm] = itp[nm].derivative()

    # angle splines: clamp end slopes to the ODE right-hand side so the
    # interpolant's derivative is consistent with the curvature tables
    for nm, idx in (("theta", 0), ("mu", 1), ("phi", 2)):
        y = getattr(ribbon, nm)
        d0 = _angle_rates(ribbon.kappa[0], ribbon.upsilon[0], ribbon.tau[0],
                          ribbon.theta[0], ribbon.mu[0], ribbon.phi[0])[idx]
        d1 = _angle_rates(ribbon.kappa[-1], ribbon.upsilon[-1], ribbon.tau[-1],
                          ribbon.theta[-1], ribbon.mu[-1], ribbon.phi[-1])[idx]
        itp[nm] = CubicSpline(z, y, bc_type=((1, d0), (1, d1)))
    ribbon._interp = itp


def build_ribbon(zeta, kappa, upsilon, tau, d_left, d_right,
                 theta0=0.0, mu0=0.0, phi0=0.0, closed=False,
                 name="unnamed") -> RoadRibbon:
    """Assemble a RoadRibbon: checks the grid, integrates angles, builds interpolants."""
    z = np.asarray(zeta, dtype=float)
    if z.ndim != 1 or z.size < 2:
        raise TrackInvariantError("station grid must be 1-D with at least 2 samples")
    if np.any(np.diff(z) <= 0):
        raise TrackInvariantError("station grid must be strictly increasing")
    cols = {}
    for nm, arr in (("kappa", kappa), ("upsilon", upsilon), ("tau", tau),
                    ("d_left", d_left), ("d_right", d_right)):
        a = np.asarray(arr, dtype=float)
        if a.shape != z.shape:
            raise TrackInvariantError(f"column '{nm}' shape {a.shape} != grid {z.shape}")
        if not np.all(np.isfinite(a)):
            raise TrackInvariantError(f"column '{nm}' contains non-finite values")
        cols[nm] = a
    if np.any(cols["d_left"] <= 0) or np.any(cols["d_right"] <= 0):
        raise TrackInvariantError("lateral widths must be strictly positive")

    ribbon = RoadRibbon(zeta=z, theta0=theta0, mu0=mu0, phi0=phi0,
                        closed=closed, name=name, **cols)
    # temporary linear interpolation for the angle integration pass
    if closed:
        per = ribbon.length

        def mk(nm):
            y = cols[nm].copy()
            y[-1] = y[0]
            sp = CubicSpline(z, y, bc_type="periodic")
            return lambda q, sp=sp: sp(z[0] + np.mod(q - z[0], per))
    else:
        def mk(nm):
            sp = CubicSpline(z, cols[nm], bc_type="clamped")
            return lambda q, sp=sp: sp(np.clip(q, z[0], z[-1]))

    theta, mu, phi = integrate_angles(z, mk("kappa"), mk("upsilon"), mk("tau"),
                                      theta0, mu0, phi0)
    ribbon.theta, ribbon.mu, ribbon.phi = theta, mu, phi
    _build_interpolants(ribbon)
    return ribbon


def integrate_position(ribbon: RoadRibbon) -> np.ndarray:
    """Integrate the spine position r'(z) = (cos(theta)cos(mu), sin(theta)cos(mu), sin(mu)).

    Returns an (N, 3) array aligned with the ribbon grid. Used for closure
    validation and export; the planner and plant never need world positions.
    """
    z = ribbon.zeta
    mids = 0.5 * (z[:-1] + z[1:])
    itp = ribbon._interp
    th_n, mu_n = itp["theta"](z), itp["mu"](z)
    th_m, mu_m = itp["theta"](mids), itp["mu"](mids)

    def tangent(th, m):
        return np.array([math.cos(th) * math.cos(m),
                         math.sin(th) * math.cos(m),
                         math.sin(m)])

    pos = np.empty((z.size, 3))
    pos[0] = 0.0
    for i in range(z.size - 1):
        h = z[i + 1] - z[i]
        k1 = tangent(th_n[i], mu_n[i])
        k23 = tangent(th_m[i], mu_m[i])  # rhs depends on z only
        k4 = tangent(th_n[i + 1], mu_n[i + 1])
        pos[i + 1] = pos[i] + h / 6.0 * (k1 + 4.0 * k23 + k4)
    return pos


def validate_ribbon(ribbon: RoadRibbon, half_width: float = 0.0) -> dict:
    """Check ribbon invariants; raises TrackInvariantError on the first failure.

    Returns a small report dict (lengths, closure residuals, angle ranges) on
    success. ``half_width`` is the vehicle half width the widths must clear.
    """
    z = ribbon.zeta
    if np.any(np.diff(z) <= 0):
        raise TrackInvariantError("station grid must be strictly increasing")
    if np.any(ribbon.d_left < half_width) or np.any(ribbon.d_right < half_width):
        raise TrackInvariantError(
            f"track narrower than vehicle half-width {half_width:.2f} m somewhere")
    mu_max = float(np.max(np.abs(ribbon.mu)))
    phi_max = float(np.max(np.abs(ribbon.phi)))
    if mu_max > ANGLE_BOUND or phi_max > ANGLE_BOUND:
        raise AngleBoundError(
            f"slope/banking tables exceed the small-angle bound "
            f"(|mu|max={mu_max:.3f}, |phi|max={phi_max:.3f})")

    report = {"name": ribbon.name, "length": ribbon.length, "closed": ribbon.closed,
              "samples": int(z.size), "mu_max": mu_max, "phi_max": phi_max,
              "kappa_max": float(np.max(np.abs(ribbon.kappa)))}
    if ribbon.closed:
        dth = ribbon.theta[-1] - ribbon.theta[0]
        k = round(dth / (2 * math.pi))
        res_theta = abs(dth - 2 * math.pi * k)
        res_mu = abs(ribbon.mu[-1] - ribbon.mu[0])
        res_phi = abs(ribbon.phi[-1] - ribbon.phi[0])
        if k == 0:
            raise TrackInvariantError("closed track with zero net heading turns")
        if max(res_theta, res_mu, res_phi) > CLOSURE_TOL_ANGLE:
            raise TrackInvariantError(
                f"closed track angle closure failed: dtheta={res_theta:.2e}, "
                f"dmu={res_mu:.2e}, dphi={res_phi:.2e} rad (tol {CLOSURE_TOL_ANGLE})")
        pos = integrate_position(ribbon)
        res_pos = float(np.linalg.norm(pos[-1] - pos[0]))
        if res_pos > CLOSURE_TOL_POSITION:
            raise TrackInvariantError(
                f"closed track spine closure failed: {res_pos:.2e} m "
                f"(tol {CLOSURE_TOL_POSITION})")
        report.update(closure_angle=float(max(res_theta, res_mu, res_phi)),
                      closure_position=res_pos, turns=int(k))
    return report


def save_track(ribbon: RoadRibbon, path) -> Path:
    """Write ``<path>.csv`` + ``<path>.meta.json``; floats keep full precision."""
    path = Path(path)
    if path.suffix != ".csv":
        path = path.with_suffix(".csv")
    data = np.column_stack([ribbon.zeta, ribbon.kappa, ribbon.upsilon,
                            ribbon.tau, ribbon.d_left, ribbon.d_right])
    np.savetxt(path, data, delimiter=",", header=",".join(_CSV_HEADER),
               comments="", fmt="%.17g")
    meta = {"name": ribbon.name, "closed": ribbon.closed,
            "theta0": ribbon.theta0, "mu0": ribbon.mu0, "phi0": ribbon.phi0}
    meta_path = path.with_name(path.stem + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_track(path) -> RoadRibbon:
    """Load a track CSV (+ meta sidecar) and rebuild the ribbon.

    A missing sidecar is tolerated: the track is assumed open with zero initial
    angles and a warning is emitted. Malformed CSV raises TrackFormatError.
    """
    path = Path(path)
    if not path.exists():
        raise TrackFormatError(f"track file not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip()
    names = [c.strip() for c in header.split(",")]
    if names != _CSV_HEADER:
        raise TrackFormatError(
            f"unexpected track CSV header {names!r}; expected {_CSV_HEADER!r}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise TrackFormatError(f"could not parse track CSV {path}: {exc}") from exc
    if data.shape[1] != len(_CSV_HEADER):
        raise TrackFormatError(
            f"track CSV has {data.shape[1]} columns, expected {len(_CSV_HEADER)}")
    if not np.all(np.isfinite(data)):
        raise TrackFormatError(f"track CSV {path} contains non-finite values")

    meta_path = path.with_name(path.stem + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    else:
        warnings.warn(f"no meta sidecar next to {path}; assuming an open track "
                      "with zero initial angles", stacklevel=2)
        meta = {}
    return build_ribbon(
        zeta=data[:, 0], kappa=data[:, 1], upsilon=data[:, 2], tau=data[:, 3],
        d_left=data[:, 4], d_right=data[:, 5],
        theta0=float(meta.get("theta0", 0.0)), mu0=float(meta.get("mu0", 0.0)),
        phi0=float(meta.get("phi0", 0.0)), closed=bool(meta.get("closed", False)),
        name=str(meta.get("name", path.stem)))


def flatten(ribbon: RoadRibbon) -> RoadRibbon:
    """Planar copy of a track: zero slope/banking/vertical curvature.

    Keeps arc length and widths. For closed tracks the geodesic curvature is
    re-closed in the plane (the 3D coupling term phi*upsilon contributed to the
    heading, so a uniform rescale plus a smooth zero-mean correction of order
    phi^2 is applied); open tracks keep kappa untouched. Idempotent.
    """
    zero = np.zeros_like(ribbon.zeta)
    kappa = ribbon.kappa.copy()
    if ribbon.closed:
        kappa = _close_planar_kappa(ribbon.zeta, kappa, ribbon.theta0,
                                    turns=ribbon.turns)
    return build_ribbon(ribbon.zeta, kappa, zero, zero,
                        ribbon.d_left, ribbon.d_right,
                        theta0=ribbon.theta0, mu0=0.0, phi0=0.0,
                        closed=ribbon.closed, name=ribbon.name + "-flat")


def _close_planar_kappa(zeta, kappa, theta0, turns):
    """Adjust a kappa table so the planar spine closes (heading and position).

    Applies kappa <- a*kappa + b*sin + c*cos with the fundamental harmonics and
    solves the three closure residuals with damped Newton on (a, b, c).
    """
    z = np.asarray(zeta, dtype=float)
    length = z[-1] - z[0]
    w = 2.0 * math.pi * (z - z[0]) / length
    basis_s, basis_c = np.sin(w), np.cos(w)
    target_turn = 2.0 * math.pi * turns

    def residual(p):
        a, b, c = p
        kap = a * kappa + b * basis_s + c * basis_c
        theta = theta0 + _cumtrapz(kap, z)
        dx = np.trapezoid(np.cos(theta), z)
        dy = np.trapezoid(np.sin(theta), z)
        dth = theta[-1] - theta0 - target_turn
        return np.array([dx, dy, dth])

    p = np.array([1.0, 0.0, 0.0])
    for _ in range(25):
        r = residual(p)
        if np.max(np.abs(r)) < 1e-10:
            break
        jac = np.empty((3, 3))
        for j in range(3):
            dp = np.zeros(3)
            dp[j] = 1e-6
            jac[:, j] = (residual(p + dp) - r) / 1e-6
        p = p - np.linalg.solve(jac, r)
    a, b, c = p
    return a * kappa + b * basis_s + c * basis_c


def _cumtrapz(y, x):
    out = np.empty_like(y)
    out[0] = 0.0
    np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x), out=out[1:])
    return out


# ---------------------------------------------------------------------------
# synthesizer
# ---------------------------------------------------------------------------

def _smooth_ramp(x, ramp):
    """Ninth-order 0 -> 1 ramp over [0, ramp] (C4, clipped outside).

    High ramp smoothness matters: the angle tables are then C5 and spline
    differentiation in curvature recovery stays clean at ramp joins.
    """
    t = np.clip(x / ramp, 0.0, 1.0)
    t5 = t ** 5
    return t5 * (126.0 + t * (-420.0 + t * (540.0 + t * (-315.0 + 70.0 * t))))


def _smooth_ramp_slope(x, ramp):
    """Derivative of :func:`_smooth_ramp` with respect to x."""
    t = np.clip(x / ramp, 0.0, 1.0)
    return 630.0 * (t * (1.0 - t)) ** 4 / ramp


def _segment_profiles(segments, blend, zeta):
    """Turn-rate and banking profiles (with analytic banking rate) on the grid."""
    dtheta = np.zeros_like(zeta)
    phi = np.zeros_like(zeta)
    dphi = np.zeros_like(zeta)
    start = 0.0
    for seg in segments:
        seg_len = float(seg["length"])
        if seg.get("type", "straight") == "arc":
            radius = float(seg["radius"])
            if radius <= 0:
                raise TrackFormatError("arc radius must be positive; use "
                                       "'direction' for the turn sense")
            sign = -1.0 if str(seg.get("direction", "left")).lower() == "right" else 1.0
            rate = sign / radius
            b = min(blend, seg_len / 3.0)
            s = zeta - start
            inside = (s >= 0) & (s <= seg_len)
            r_in = _smooth_ramp(s, b)
            r_out = _smooth_ramp(seg_len - s, b)
            ramp = r_in * r_out
            dtheta[inside] += rate * ramp[inside]
            bank = float(seg.get("bank", 0.0)) * sign
            if bank != 0.0:
                dr_in = _smooth_ramp_slope(s, b) * ((s >= 0) & (s <= b))
                dr_out = (-_smooth_ramp_slope(seg_len - s, b)
                          * ((seg_len - s >= 0) & (seg_len - s <= b)))
                phi[inside] += bank * ramp[inside]
                dphi[inside] += bank * (dr_in * r_out + r_in * dr_out)[inside]
        start += seg_len
    return dtheta, phi, dphi, start


def _elevation_profiles(features, zeta):
    """Slope profile mu (and analytic rate) from hill/dip features.

    A feature spans six equal spans r: ramp to +-m, hold, swing to -+m through
    the crest/dip, hold, ramp back to zero. The profile is antisymmetric about
    the feature center so the elevation gain cancels exactly.
    """
    mu = np.zeros_like(zeta)
    dmu = np.zeros_like(zeta)
    for feat in features or []:
        m = float(feat["slope"])
        if str(feat.get("kind", feat.get("type", "hill"))).lower() == "dip":
            m = -m
        start = float(feat["start"])
        span = float(feat["length"])
        r = span / 6.0
        s = zeta - start
        breaks = np.array([0, 1, 2, 4, 5, 6]) * r

        # piecewise: smooth ramps between holds
        def ramp(a, b, lo, hi):
            sel = (s >= a) & (s < b)
            x = s[sel] - a
            mu[sel] += lo + (hi - lo) * _smooth_ramp(x, b - a)
            dmu[sel] += (hi - lo) * _smooth_ramp_slope(x, b - a)

        ramp(breaks[0], breaks[1], 0.0, m)
        hold1 = (s >= breaks[1]) & (s < breaks[2])
        mu[hold1] += m
        ramp(breaks[2], breaks[3], m, -m)
        hold2 = (s >= breaks[3]) & (s < breaks[4])
        mu[hold2] += -m
        ramp(breaks[4], breaks[5], -m, 0.0)
    return mu, dmu


def synthesize_track(spec: dict) -> RoadRibbon:
    """Build a RoadRibbon from a segment-list specification.

    Spec keys: ``name``, ``closed``, ``grid_step``, ``width`` (or
    ``width_left``/``width_right``), ``blend`` (curvature ramp length),
    ``segments`` (list of straights and arcs; arcs take ``radius``,
    ``direction`` = left|right and optional ``bank`` > 0 banked toward the
    turn), and ``elevation`` (list of hill/dip features with ``start``,
    ``length``, ``slope``).

    The geometry is authored in angle space and converted to curvature space
    through the inverse angle ODEs, so banked arcs automatically carry the
    sagittal curvature needed to stay level. For closed specs the heading is
    closed exactly by rescaling the turn rate and the spine position is closed
    by a short Newton polish on two zero-mean curvature harmonics.
    """
    segments = spec.get("segments")
    if not segments:
        raise TrackFormatError("track spec needs a non-empty 'segments' list")
    closed = bool(spec.get("closed", False))
    step = float(spec.get("grid_step", DEFAULT_GRID_STEP))
    blend = float(spec.get("blend", 24.0))
    name = str(spec.get("name", "synthetic"))
    width = float(spec.get("width", 5.0))
    w_left = float(spec.get("width_left", width))
    w_right = float(spec.get("width_right", width))

    total = sum(float(s["length"]) for s in segments)
    n = max(2, int(round(total / step)))
    zeta = np.linspace(0.0, total, n + 1)

    dtheta, phi, dphi, _ = _segment_profiles(segments, blend, zeta)
    mu, dmu = _elevation_profiles(spec.get("elevation"), zeta)

    if closed:
        turn = np.trapezoid(dtheta, zeta)
        k = round(turn / (2 * math.pi))
        if k == 0:
            raise TrackFormatError(
                "closed spec must turn through a whole number of revolutions; "
                f"net turn is {turn:.3f} rad")
        dtheta = dtheta * (2 * math.pi * k / turn)

    def assemble(dtheta_prof, ups_corr, tau_corr):
        kappa, upsilon, tau = _exact_curvatures_from_rates(dtheta_prof, mu, dmu,
                                                           phi, dphi)
        upsilon = upsilon + ups_corr
        tau = tau + tau_corr
        if closed:
            kappa[-1], upsilon[-1], tau[-1] = kappa[0], upsilon[0], tau[0]
        return build_ribbon(zeta, kappa, upsilon, tau,
                            np.full_like(zeta, w_left), np.full_like(zeta, w_right),
                            theta0=0.0, mu0=float(mu[0]), phi0=float(phi[0]),
                            closed=closed, name=name)

    zero = np.zeros_like(zeta)
    ribbon = assemble(dtheta, zero, zero)
    if closed:
        # The RK4 pass integrates spline interpolants of the curvature tables,
        # which deviate from the authored profiles by O(h^2) near the ramp
        # boundaries, so the integrated angles pick up a small closure drift.
        # The (mu, phi) subsystem rotates by exactly 2*pi*k per lap, so only
        # forcing resonant with the heading produces net closure motion:
        #   ups_corr = e1*cos(Theta) - e2*sin(Theta)
        #   tau_corr = e1*sin(Theta) + e2*cos(Theta)
        # moves (mu, phi) closure by (e1*L, e2*L). Heading closure responds to a
        # constant kappa offset, and the planar spine position is closed with
        # two zero-mean heading-rate harmonics (short Newton). Alternate until
        # all residuals sit far inside tolerance.
        k_turns = round(float(np.trapezoid(dtheta, zeta)) / (2 * math.pi))
        w = 2 * math.pi * zeta / total
        harm = [np.sin(w), np.cos(w)]
        p = np.zeros(2)     # position harmonics
        e = np.zeros(2)     # resonant (mu, phi) closure amplitudes
        ck = 0.0            # constant kappa offset for heading closure

        def build(pvec, evec, ckv):
            big_theta = ribbon.theta - ribbon.theta[0]
            cos_t, sin_t = np.cos(big_theta), np.sin(big_theta)
            ups_corr = evec[0] * cos_t - evec[1] * sin_t
            tau_corr = evec[0] * sin_t + evec[1] * cos_t
            dth = dtheta + pvec[0] * harm[0] + pvec[1] * harm[1] + ckv
            return assemble(dth, ups_corr, tau_corr)

        for _ in range(5):
            dth_res = (ribbon.theta[-1] - ribbon.theta[0]) - 2 * math.pi * k_turns
            dmu_res = ribbon.mu[-1] - ribbon.mu[0]
            dphi_res = ribbon.phi[-1] - ribbon.phi[0]
            ck -= dth_res / total
            e -= np.array([dmu_res, dphi_res]) / total
            ribbon = build(p, e, ck)

            def closure(pvec):
                rb = build(pvec, e, ck)
                pos = integrate_position(rb)
                return rb, pos[-1, :2] - pos[0, :2]

            ribbon, res = closure(p)
            for _ in range(8):
                if np.linalg.norm(res) < 1e-9:
                    break
                jac = np.empty((2, 2))
                for j in range(2):
                    dpv = p.copy()
                    dpv[j] += 1e-7
                    _, rj = closure(dpv)
                    jac[:, j] = (rj - res) / 1e-7
                p = p - np.linalg.solve(jac, res)
                ribbon, res = closure(p)

            dth_res = abs((ribbon.theta[-1] - ribbon.theta[0]) - 2 * math.pi * k_turns)
            dmu_res = abs(ribbon.mu[-1] - ribbon.mu[0])
            dphi_res = abs(ribbon.phi[-1] - ribbon.phi[0])
            if max(dth_res, dmu_res, dphi_res) < 1e-8 and np.linalg.norm(res) < 1e-6:
                break

    if bool(spec.get("flatten", False)):
        ribbon = flatten(ribbon)
    return ribbon
