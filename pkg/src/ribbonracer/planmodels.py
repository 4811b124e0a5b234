"""Vehicle models the minimum-time planner can transcribe.

The planner works in road coordinates with arc length as the independent
variable, so each model here provides the same three ingredients: state
derivatives with respect to station, a stack of pointwise inequality rows
(negative inside the feasible set), and metadata (names, scales, the index
of the lateral offset) that lets the transcription wire up track edges and
terminal costs without knowing the physics.

Two families are provided.  `KdPlanModel` wraps the identified kinodynamic
model with its fitted acceleration envelope; it is the planner the vehicle
actually runs.  `PointPlanModel` is a quasi-static point mass whose
feasible set comes from an envelope object, either the per-speed diamond
(the coarser benchmark) or a full polytope envelope such as the one
`plant_qss_envelope` derives from simulator parameters, which serves as the
lap-time reference the learned models are judged against.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.polynomial import polynomial as npoly

from .curvilinear import GRAVITY, gravity_components, simplified_vertical
from .ggv import DiamondGgv, GgvModel
from .kdmodel import V_MIN, KdParams, fv_lateral
from .plant import RHO_AIR, PlantParams, _vertical_loads, static_wheel_loads

# Guards applied inside model evaluations.  Iterates may wander into poses
# the road frame cannot represent (deep off-track, reversed motion); the
# clamps keep derivatives finite there so the line search can pull back.
RATIO_FLOOR = 0.1
ZETA_DOT_FLOOR = 0.8


class MeshRoad(NamedTuple):
    """Road geometry evaluated once per mesh node."""

    zeta: np.ndarray
    kappa: np.ndarray
    upsilon: np.ndarray
    tau: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    d_left: np.ndarray
    d_right: np.ndarray
    dkappa: np.ndarray
    dupsilon: np.ndarray
    dtau: np.ndarray


def sample_road(ribbon, mesh) -> MeshRoad:
    """Evaluate ribbon geometry and curvature slopes at the mesh stations."""
    z = np.asarray(mesh, dtype=float)
    s = ribbon.sample(z)
    dk, du, dt = ribbon.sample_curvature_slopes(z)
    return MeshRoad(zeta=z, kappa=s.kappa, upsilon=s.upsilon, tau=s.tau,
                    mu=s.mu, phi=s.phi, d_left=s.d_left, d_right=s.d_right,
                    dkappa=dk, dupsilon=du, dtau=dt)


def _advance(v, v_y, n, xi, kappa):
    """Guarded station rate and lateral rate shared by the models."""
    cxi, sxi = np.cos(xi), np.sin(xi)
    ratio = np.maximum(1.0 - n * kappa, RATIO_FLOOR)
    zdot = np.maximum((v * cxi - v_y * sxi) / ratio, ZETA_DOT_FLOOR)
    ndot = v * sxi + v_y * cxi
    return zdot, ndot, cxi, sxi


class KdPlanModel:
    """Identified kinodynamic model in station-domain form.

    States are [omega_z, v_y, v_x, a_x, n, xi, t]; time is carried as a
    state so the transcription can treat station as the independent
    variable.  Controls are the yaw-rate fraction omega_z0 in [-1, 1] and
    the longitudinal command a_x0.

    With ``full_3d_terms`` the vertical acceleration entering the envelope
    uses the exact angular-rate expression plus the lateral-motion
    correction; by default it uses the simplified small-angle estimate,
    which is also what the identification consumed.
    """

    state_names = ("omega_z", "v_y", "v_x", "a_x", "n", "xi", "t")
    control_names = ("omega_z0", "a_x0")
    time_index = 6
    n_index = 4
    v_index = 2
    xi_index = 5

    def __init__(self, params: KdParams, ggv: GgvModel, full_3d_terms=False,
                 xi_max=0.8, ax0_limit=25.0):
        params.validate()
        self.params = params
        self.ggv = ggv
        self.full_3d_terms = bool(full_3d_terms)
        self.xi_max = float(xi_max)
        self.ax0_limit = float(ax0_limit)
        self.state_scale = np.array([1.0, 2.0, 50.0, 10.0, 2.0, 0.3, 10.0])
        self.control_scale = np.array([1.0, 10.0])
        self.n_ineq = ggv.P.shape[0] + 11

    def _vertical(self, v, v_y, n, xi, road, zdot, ndot, cxi, sxi):
        if not self.full_3d_terms:
            _, a_z = simplified_vertical(v, n, xi, road.kappa, road.upsilon,
                                         road.tau)
            return a_z
        omega_y = (road.tau * sxi - road.upsilon * cxi) * zdot
        return -omega_y * v - (ndot * road.tau + n * road.dtau * zdot) * zdot

    def f_zeta(self, X, U, road):
        wz, vy, ax, n, xi = X[0], X[1], X[3], X[4], X[5]
        v = np.maximum(X[2], V_MIN)
        zdot, ndot, cxi, sxi = _advance(v, vy, n, xi, road.kappa)
        a_z = self._vertical(v, vy, n, xi, road, zdot, ndot, cxi, sxi)
        _, g_lat = gravity_components(xi, road.mu, road.phi)
        ay_cap = self.ggv.ay_max_2d(v) * self.ggv.s_scale(a_z) + g_lat
        wz_dot = (U[0] * ay_cap / v - wz) / self.params.tau_omega(v)
        vy_dot = (fv_lateral(wz * v, v, ax, a_z, self.params) - vy) \
            / self.params.tau_v(v)
        ax_dot = (U[1] - ax) / self.params.tau_a
        xi_dot = wz - road.kappa * zdot
        return np.stack([wz_dot, vy_dot, ax, ax_dot, ndot, xi_dot,
                         np.ones_like(zdot)]) / zdot

    def inequalities(self, X, U, road):
        wz, vy, ax, n, xi = X[0], X[1], X[3], X[4], X[5]
        v = np.maximum(X[2], V_MIN)
        zdot, ndot, cxi, sxi = _advance(v, vy, n, xi, road.kappa)
        a_z = self._vertical(v, vy, n, xi, road, zdot, ndot, cxi, sxi)
        g_long, g_lat = gravity_components(xi, road.mu, road.phi)
        ax_s = ax - g_long
        ay_s = (wz * v - g_lat) / self.ggv.s_scale(a_z)
        g = self.ggv
        facets = g.P @ np.stack([ay_s, ax_s, v]) - g.r[:, None]
        rows = [ax_s - g.ax_max_2d(v),
                g.ax_min_2d(v) - ax_s,
                facets,
                g.s_bar * (ay_s - g.ay_bar) - ax_s,
                g.s_bar * (-ay_s - g.ay_bar) - ax_s,
                U[0] - 1.0,
                -U[0] - 1.0,
                U[1] - self.ax0_limit,
                -U[1] - self.ax0_limit,
                V_MIN - X[2],
                xi - self.xi_max,
                -xi - self.xi_max]
        return np.vstack([r if r.ndim == 2 else r[None, :] for r in rows])

    def envelope_caps(self, v):
        g = self.ggv
        return g.ay_max_2d(v), g.ax_max_2d(v), g.ax_min_2d(v)

    def fill_guess(self, v, t, road, mesh):
        """Rough feasible trajectory around a given speed profile."""
        ax = v * np.gradient(v, mesh)
        wz = road.kappa * v
        cap = np.maximum(self.ggv.ay_max_2d(v), 0.5)
        zero = np.zeros_like(v)
        X = np.stack([wz, zero, v, ax, zero, zero, t])
        U = np.stack([np.clip(wz * v / cap, -0.9, 0.9),
                      np.clip(ax, -0.9 * self.ax0_limit, 0.9 * self.ax0_limit)])
        return X, U

    def terminal_target(self, x0):
        return np.array([0.0, 0.0, x0[2], 0.0, 0.0, 0.0, 0.0])

    def map_terminal_weights(self, weights7):
        w = np.asarray(weights7, dtype=float)
        return np.array([w[0], w[1], w[2], w[3], w[5], w[6], 0.0])


class PointPlanModel:
    """Quasi-static point mass bounded by an acceleration envelope.

    States are [v_x, n, xi, t] and the accelerations themselves are the
    controls, so the model has no actuator or tire dynamics at all.  The
    envelope argument picks the feasible set: a `DiamondGgv` gives the
    four-facet benchmark shape, a `GgvModel` the full polytope with load
    scaling.  Diamond vertices are interpolated tables, so they are refit
    with smooth polynomials once at construction.
    """

    state_names = ("v_x", "n", "xi", "t")
    control_names = ("a_x", "a_y")
    time_index = 3
    n_index = 1
    v_index = 0
    xi_index = 2

    def __init__(self, envelope, xi_max=0.8, v_floor=V_MIN):
        self.envelope = envelope
        self.xi_max = float(xi_max)
        self.v_floor = float(v_floor)
        self.state_scale = np.array([50.0, 2.0, 0.3, 10.0])
        self.control_scale = np.array([10.0, 20.0])
        self._diamond = isinstance(envelope, DiamondGgv)
        if self._diamond:
            vg = np.asarray(envelope.v_grid, dtype=float)
            deg = min(4, len(vg) - 1)
            self._v_range = (float(vg[0]), float(vg[-1]))
            self._ay_poly = npoly.polyfit(vg, envelope.ay_max, deg)
            self._up_poly = npoly.polyfit(vg, envelope.ax_max, deg)
            self._dn_poly = npoly.polyfit(vg, envelope.ax_min, deg)
            self.n_ineq = 7
        else:
            self.n_ineq = envelope.P.shape[0] + 7

    def f_zeta(self, X, U, road):
        n, xi = X[1], X[2]
        v = np.maximum(X[0], self.v_floor)
        zdot, ndot, _, _ = _advance(v, 0.0, n, xi, road.kappa)
        xi_dot = U[1] / v - road.kappa * zdot
        return np.stack([U[0], ndot, xi_dot, np.ones_like(zdot)]) / zdot

    def inequalities(self, X, U, road):
        n, xi = X[1], X[2]
        v = np.maximum(X[0], self.v_floor)
        g_long, g_lat = gravity_components(xi, road.mu, road.phi)
        ax_s = U[0] - g_long
        if self._diamond:
            vc = np.clip(v, *self._v_range)
            ay_v = np.maximum(npoly.polyval(vc, self._ay_poly), 0.1)
            up = np.maximum(npoly.polyval(vc, self._up_poly), 0.1)
            dn = np.minimum(npoly.polyval(vc, self._dn_poly), -0.1)
            ay_s = U[1] - g_lat
            rows = [ay_s / ay_v + ax_s / up - 1.0,
                    -ay_s / ay_v + ax_s / up - 1.0,
                    ay_s / ay_v + ax_s / dn - 1.0,
                    -ay_s / ay_v + ax_s / dn - 1.0]
        else:
            _, a_z = simplified_vertical(v, n, xi, road.kappa, road.upsilon,
                                         road.tau)
            g = self.envelope
            ay_s = (U[1] - g_lat) / g.s_scale(a_z)
            facets = g.P @ np.stack([ay_s, ax_s, v]) - g.r[:, None]
            rows = [ax_s - g.ax_max_2d(v),
                    g.ax_min_2d(v) - ax_s,
                    facets,
                    g.s_bar * (ay_s - g.ay_bar) - ax_s,
                    g.s_bar * (-ay_s - g.ay_bar) - ax_s]
        rows += [self.v_floor - X[0],
                 xi - self.xi_max,
                 -xi - self.xi_max]
        return np.vstack([r if r.ndim == 2 else r[None, :] for r in rows])

    def envelope_caps(self, v):
        if self._diamond:
            vc = np.clip(v, *self._v_range)
            return (np.maximum(npoly.polyval(vc, self._ay_poly), 0.1),
                    npoly.polyval(vc, self._up_poly),
                    np.minimum(npoly.polyval(vc, self._dn_poly), -0.1))
        g = self.envelope
        return g.ay_max_2d(v), g.ax_max_2d(v), g.ax_min_2d(v)

    def fill_guess(self, v, t, road, mesh):
        ay_cap, _, _ = self.envelope_caps(v)
        ax = v * np.gradient(v, mesh)
        ay = np.clip(road.kappa * v * v, -0.9 * ay_cap, 0.9 * ay_cap)
        zero = np.zeros_like(v)
        X = np.stack([v, zero, zero, t])
        U = np.stack([ax, ay])
        return X, U

    def terminal_target(self, x0):
        return np.array([x0[0], 0.0, 0.0, 0.0])

    def map_terminal_weights(self, weights7):
        w = np.asarray(weights7, dtype=float)
        return np.array([w[2], w[5], w[6], 0.0])


# ---------------------------------------------------------------------------
# quasi-static envelope from simulator parameters
# ---------------------------------------------------------------------------


def plant_qss_envelope(params: PlantParams, v_grid=None, az_grid=None,
                       n_facets=16, n_dirs=48) -> GgvModel:
    """Acceleration envelope implied by the simulator's force balance.

    Solves the steady-state axle force balance (yaw moment zero, loads from
    quasi-static transfer, load-sensitive friction, aero and rolling drag)
    for the reachable acceleration boundary at each speed, then packs the
    result into a `GgvModel` so the point-mass planner can consume it.  No
    telemetry or fitting noise is involved; this is the reference envelope
    a perfect identification would recover.
    """
    params.validate()
    if v_grid is None:
        v_grid = np.linspace(V_MIN, 90.0, 18)
    if az_grid is None:
        az_grid = np.linspace(-6.0, 6.0, 9)
    v_grid = np.asarray(v_grid, dtype=float)
    az_grid = np.asarray(az_grid, dtype=float)

    m = params.mass
    wb = params.wheelbase
    a_f = params.dist_front_axle
    b_r = params.dist_rear_axle
    statics = static_wheel_loads(params)
    mu_f, mu_r = params.tire_front[0], params.tire_rear[0]
    split_f, split_r = params.drive_split()

    def wheel_cap(fz, static, mu_t):
        mu_eff = mu_t * (1.0 - params.mu_load_slope * (fz / static - 1.0))
        return min(max(mu_eff, 0.3 * mu_t), 1.3 * mu_t) * fz

    def axle_caps(v, ax, ay, az):
        weight = m * (GRAVITY + az)
        loads, _ = _vertical_loads(params, weight, v, ax, ay)
        cap_f = wheel_cap(loads[0], statics[0], mu_f) \
            + wheel_cap(loads[1], statics[1], mu_f)
        cap_r = wheel_cap(loads[2], statics[2], mu_r) \
            + wheel_cap(loads[3], statics[3], mu_r)
        return cap_f, cap_r, loads

    def resist(v, loads):
        drag = 0.5 * RHO_AIR * params.drag_area * v * v
        return drag + params.rolling_resistance * sum(loads)

    def lateral_limit(v, az):
        # Moment balance puts b/L of the lateral force on the front axle;
        # iterate because the transfer feeds back into the axle caps.
        ay = 8.0
        for _ in range(30):
            cap_f, cap_r, _ = axle_caps(v, 0.0, ay, az)
            target = min(cap_f * wb / (m * b_r), cap_r * wb / (m * a_f))
            if abs(target - ay) < 1e-10:
                break
            ay = 0.5 * (ay + target)
        return max(ay, 0.1)

    def drive_limit(v, az):
        ax = 5.0
        for _ in range(30):
            cap_f, cap_r, loads = axle_caps(v, ax, 0.0, az)
            caps = [c / s for c, s in ((cap_f, split_f), (cap_r, split_r))
                    if s > 0.0]
            force = min(min(caps), params.max_power / max(v, V_MIN),
                        params.max_drive_force)
            target = (force - resist(v, loads)) / m
            if abs(target - ax) < 1e-10:
                break
            ax = 0.5 * (ax + target)
        return ax

    def brake_limit(v, az):
        bias = params.brake_bias_front
        ax = -20.0
        for _ in range(30):
            cap_f, cap_r, loads = axle_caps(v, ax, 0.0, az)
            force = min(params.max_brake_force, cap_f / bias,
                        cap_r / (1.0 - bias))
            target = -(force + resist(v, loads)) / m
            if abs(target - ax) < 1e-10:
                break
            ax = 0.5 * (ax + target)
        return min(ax, -1.0)

    def feasible(v, ax, ay, az):
        cap_f, cap_r, loads = axle_caps(v, ax, ay, az)
        # an axle whose both wheels lift has zero capacity; floor it at 1 N
        # so the probe reports "infeasible" instead of dividing by zero
        cap_f, cap_r = max(cap_f, 1.0), max(cap_r, 1.0)
        fy_f = m * abs(ay) * b_r / wb
        fy_r = m * abs(ay) * a_f / wb
        fx = m * ax + resist(v, loads)
        if fx >= 0.0:
            if fx > min(params.max_power / max(v, V_MIN),
                        params.max_drive_force):
                return False
            use_f = (split_f * fx / cap_f) ** 2 if split_f > 0 else 0.0
            use_r = (split_r * fx / cap_r) ** 2 if split_r > 0 else 0.0
            return use_f + (fy_f / cap_f) ** 2 <= 1.0 \
                and use_r + (fy_r / cap_r) ** 2 <= 1.0
        fb = -fx
        if fb > params.max_brake_force:
            return False
        bias = params.brake_bias_front
        return (bias * fb / cap_f) ** 2 + (fy_f / cap_f) ** 2 <= 1.0 \
            and ((1.0 - bias) * fb / cap_r) ** 2 + (fy_r / cap_r) ** 2 <= 1.0

    ay_tbl = np.array([lateral_limit(v, 0.0) for v in v_grid])
    up_tbl = np.array([drive_limit(v, 0.0) for v in v_grid])
    dn_tbl = np.array([brake_limit(v, 0.0) for v in v_grid])

    # Boundary cloud: radial bisection along each direction, per speed.
    psis = 2.0 * np.pi * np.arange(n_dirs) / n_dirs
    clouds = []
    for k, v in enumerate(v_grid):
        pts = np.empty((n_dirs, 2))
        for j, psi in enumerate(psis):
            ref_ax = up_tbl[k] if np.sin(psi) >= 0.0 else -dn_tbl[k]
            ref = np.array([np.cos(psi) * ay_tbl[k], np.sin(psi) * ref_ax])
            lo, hi = 0.0, 1.6
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if feasible(v, mid * ref[1], mid * ref[0], 0.0):
                    lo = mid
                else:
                    hi = mid
            pts[j] = lo * ref
        clouds.append(pts)

    phis = 2.0 * np.pi * np.arange(n_facets) / n_facets
    dirs = np.stack([np.cos(phis), np.sin(phis)], axis=1)
    P = np.empty((n_facets, 3))
    r = np.empty(n_facets)
    for i, d in enumerate(dirs):
        support = np.array([np.max(cloud @ d) for cloud in clouds])
        slope, icept = np.polyfit(v_grid, support, 1)
        icept += np.max(support - (slope * v_grid + icept))
        P[i] = (d[0], d[1], -slope)
        r[i] = icept

    v_mid = float(np.median(v_grid))
    base = lateral_limit(v_mid, 0.0)
    ratios = np.array([lateral_limit(v_mid, az) / base for az in az_grid]) - 1.0
    A = np.stack([az_grid, az_grid ** 2], axis=1)
    s1, s2 = np.linalg.lstsq(A, ratios, rcond=None)[0]

    deg = min(4, len(v_grid) - 1)
    return GgvModel(
        ayM2d_coeffs=npoly.polyfit(v_grid, ay_tbl, deg),
        axm_coeffs=npoly.polyfit(v_grid, dn_tbl, deg),
        axM_coeffs=npoly.polyfit(v_grid, up_tbl, deg),
        s1=float(s1), s2=float(s2), P=P, r=r,
        s_bar=1.0, ay_bar=1e9,
        v_range=(float(v_grid[0]), float(v_grid[-1])),
        az_range=(float(az_grid[0]), float(az_grid[-1])),
        meta={"source": "plant quasi-static balance",
              "n_dirs": int(n_dirs), "n_speeds": int(len(v_grid))})
