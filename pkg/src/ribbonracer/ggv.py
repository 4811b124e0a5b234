"""Performance-envelope identification and evaluation (the g-g-v surface).

The planner never sees tires or loads; it sees this envelope:

* polynomial a_x bounds over speed (identified from full-throttle / full-brake
  telemetry),
* a polytope over (a_y, a_x, v_x) with facets linear in speed,
* a vertical-load scaling S(a_z) = 1 + s1*a_z + s2*a_z^2 that stretches the
  lateral axis (compression a_z > 0 raises grip on our plant, so s1 > 0),
* a combined-braking restriction line with learnable slope and knee,
* and a diamond-shaped benchmark envelope sharing the same vertices.

On a 3D road the whole picture rigidly translates by the gravity projections
(g_long, g_lat), so every evaluator works in gravity-shifted coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.spatial import QhullError, ConvexHull

from .curvilinear import gravity_components
from .errors import FitError

N_FACETS = 16
HULL_SHRINK = 0.98
#: below this spread of observed a_z there is nothing for S(a_z) to learn
AZ_EXCITATION_FLOOR = 0.5  # m/s^2


def s_scale(a_z, s1, s2, az_range):
    """S(a_z) = 1 + s1 a_z + s2 a_z^2, clamped to the fitted range +-20% of span."""
    lo, hi = az_range
    pad = 0.2 * max(hi - lo, 1.0)
    a = np.clip(a_z, lo - pad, hi + pad)
    return 1.0 + s1 * a + s2 * a * a


def _shifted_coords(log):
    """Gravity-shifted (a_y, a_x) plus the vertical-acceleration estimate.

    Prefers the planner-computable a_z estimate column when the log carries
    one; the accelerometer channel is the fallback.
    """
    g_long, g_lat = gravity_components(log["xi"], log["mu"], log["phi"])
    a_z = log["a_z_est"] if "a_z_est" in log.data.columns else log["a_z"]
    return log["a_y"] - g_lat, log["a_x"] - g_long, a_z


@dataclass
class GgvModel:
    """Fitted g-g-v envelope; immutable after fitting, evaluation is pure."""

    ayM2d_coeffs: np.ndarray
    axm_coeffs: np.ndarray
    axM_coeffs: np.ndarray
    s1: float = 0.0
    s2: float = 0.0
    P: np.ndarray = None
    r: np.ndarray = None
    s_bar: float = 0.0
    ay_bar: float = 1e9
    v_range: tuple = (5.0, 90.0)
    az_range: tuple = (0.0, 0.0)
    meta: dict = field(default_factory=dict)

    # -- building-block evaluations -------------------------------------------

    def clamp_v(self, v_x):
        return np.clip(v_x, self.v_range[0], self.v_range[1])

    def ay_max_2d(self, v_x):
        return npoly.polyval(self.clamp_v(v_x), self.ayM2d_coeffs)

    def ax_min_2d(self, v_x):
        return npoly.polyval(self.clamp_v(v_x), self.axm_coeffs)

    def ax_max_2d(self, v_x):
        return npoly.polyval(self.clamp_v(v_x), self.axM_coeffs)

    def s_scale(self, a_z):
        return s_scale(a_z, self.s1, self.s2, self.az_range)

    # -- constraint evaluation --------------------------------------------------

    def residuals(self, a_x, a_y, a_z, v_x, xi, mu, phi):
        """Signed constraint residuals, <= 0 when inside the envelope.

        Layout: [a_x upper bound, a_x lower bound, polytope facets (n_facets),
        combined-braking restriction]. Accepts scalars or arrays; array inputs
        give a (n_points, n_facets + 3) matrix.
        """
        g_long, g_lat = gravity_components(xi, mu, phi)
        ax_s = np.atleast_1d(np.asarray(a_x, dtype=float) - g_long)
        ay_s = np.atleast_1d((np.asarray(a_y, dtype=float) - g_lat)
                             / self.s_scale(a_z))
        v = np.atleast_1d(np.asarray(v_x, dtype=float))
        ax_s, ay_s, v = np.broadcast_arrays(ax_s, ay_s, v)

        upper = ax_s - self.ax_max_2d(v)
        lower = self.ax_min_2d(v) - ax_s
        x = np.stack([ay_s, ax_s, v], axis=-1)
        facets = x @ self.P.T - self.r
        brake = self.s_bar * (np.abs(ay_s) - self.ay_bar) - ax_s
        res = np.concatenate([upper[..., None], lower[..., None],
                              facets, brake[..., None]], axis=-1)
        return res[0] if res.shape[0] == 1 and np.isscalar(a_x) else res

    # -- persistence ------------------------------------------------------------

    def to_json(self, path=None) -> str:
        payload = {
            "ayM2d_coeffs": list(self.ayM2d_coeffs),
            "axm_coeffs": list(self.axm_coeffs),
            "axM_coeffs": list(self.axM_coeffs),
            "s1": self.s1, "s2": self.s2,
            "P": np.asarray(self.P).tolist() if self.P is not None else None,
            "r": np.asarray(self.r).tolist() if self.r is not None else None,
            "s_bar": self.s_bar, "ay_bar": self.ay_bar,
            "v_range": list(self.v_range), "az_range": list(self.az_range),
            "meta": self.meta,
        }
        text = json.dumps(payload, indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "GgvModel":
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text()
        d = json.loads(text)
        return cls(
            ayM2d_coeffs=np.array(d["ayM2d_coeffs"]),
            axm_coeffs=np.array(d["axm_coeffs"]),
            axM_coeffs=np.array(d["axM_coeffs"]),
            s1=d["s1"], s2=d["s2"],
            P=np.array(d["P"]) if d["P"] is not None else None,
            r=np.array(d["r"]) if d["r"] is not None else None,
            s_bar=d["s_bar"], ay_bar=d["ay_bar"],
            v_range=tuple(d["v_range"]), az_range=tuple(d["az_range"]),
            meta=d.get("meta", {}))


def ggv_residuals(a_x, a_y, a_z, v_x, xi, mu, phi, ggv: GgvModel):
    return ggv.residuals(a_x, a_y, a_z, v_x, xi, mu, phi)


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------

def _speed_bins(v, n_bins):
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi - lo < 1.0:
        raise FitError(f"speed range too narrow to bin: [{lo:.1f}, {hi:.1f}] m/s")
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.digitize(v, edges) - 1, 0, n_bins - 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return idx, centers


def fit_ax_bounds(log, degree=4, n_bins=24):
    """Polynomials through the per-speed-bin extrema of gravity-corrected a_x.

    Needs full-throttle and full-braking coverage; more than 10% empty bins
    inside the observed speed range is treated as insufficient excitation.
    """
    ay_s, ax_s, _ = _shifted_coords(log)
    v = log["v_x"]
    idx, centers = _speed_bins(v, n_bins)
    top, bot, filled = [], [], []
    for b in range(n_bins):
        sel = idx == b
        if not np.any(sel):
            continue
        filled.append(b)
        top.append(np.max(ax_s[sel]))
        bot.append(np.min(ax_s[sel]))
    if len(filled) < n_bins * 0.9:
        raise FitError(
            f"a_x envelope needs coverage across speed: {n_bins - len(filled)} of "
            f"{n_bins} bins are empty")
    top, bot = np.array(top), np.array(bot)
    if np.min(bot) > -1.0:
        raise FitError("no braking present in telemetry; cannot fit the lower a_x bound")
    vc = centers[filled]
    axM = npoly.polyfit(vc, top, degree)
    axm = npoly.polyfit(vc, bot, degree)
    return axm, axM


def fit_ay_max(log, degree=4, n_bins=24, s1=0.0, s2=0.0, az_range=(0.0, 0.0)):
    """Polynomial through per-speed-bin maxima of |a_y|, S-corrected.

    With s1 = s2 = 0 this is the flat-road envelope; passing a fitted S lets
    3D telemetry contribute without biasing the 2D curve.
    """
    ay_s, _, a_z = _shifted_coords(log)
    scale = s_scale(a_z, s1, s2, az_range)
    v = log["v_x"]
    idx, centers = _speed_bins(v, n_bins)
    top, vc = [], []
    for b in range(n_bins):
        sel = idx == b
        if np.count_nonzero(sel) < 5:
            continue
        top.append(np.max(np.abs(ay_s[sel] / scale[sel])))
        vc.append(centers[b])
    if len(vc) < max(4, degree + 1):
        raise FitError("not enough populated speed bins to fit the a_y envelope")
    return npoly.polyfit(np.array(vc), np.array(top), degree)


def fit_polytope(log, s1=0.0, s2=0.0, az_range=(0.0, 0.0),
                 n_facets=N_FACETS, n_slices=8, rho=HULL_SHRINK):
    """Fit the speed-dependent acceleration polytope P x <= r.

    Per speed slice, take the convex hull of gravity-shifted (S-corrected)
    acceleration samples; per facet direction, fit the hull support values
    linearly in speed and lift the line so it upper-bounds every slice; the
    safety shrink rho then pulls all facets inward. By construction every
    telemetry point then violates a facet by at most (1 - rho) times the
    facet's support scale.
    """
    ay_s, ax_s, a_z = _shifted_coords(log)
    ay_s = ay_s / s_scale(a_z, s1, s2, az_range)
    v = log["v_x"]
    idx, centers = _speed_bins(v, n_slices)

    phis = 2.0 * np.pi * np.arange(n_facets) / n_facets
    dirs = np.stack([np.cos(phis), np.sin(phis)], axis=1)

    supports, vc = [], []
    for b in range(n_slices):
        sel = idx == b
        if np.count_nonzero(sel) < 10:
            continue
        pts = np.stack([ay_s[sel], ax_s[sel]], axis=1)
        try:
            hull = ConvexHull(pts)
        except QhullError as exc:
            raise FitError(f"degenerate acceleration hull in speed slice {b}: "
                           f"{exc}") from exc
        corners = pts[hull.vertices]
        supports.append(np.max(corners @ dirs.T, axis=0))
        vc.append(centers[b])
    if len(vc) < 2:
        raise FitError("need at least two populated speed slices for the polytope")
    supports = np.array(supports)      # (slices, facets)
    vc = np.array(vc)

    P = np.empty((n_facets, 3))
    r = np.empty(n_facets)
    for j in range(n_facets):
        slope, intercept = np.polyfit(vc, supports[:, j], 1)
        lift = np.max(supports[:, j] - (slope * vc + intercept))
        intercept += max(lift, 0.0)
        P[j, :2] = dirs[j]
        P[j, 2] = -rho * slope
        r[j] = rho * intercept
    # the polytope must keep coasting (the origin) feasible at every speed
    for v_test in np.linspace(vc[0], vc[-1], 9):
        if np.any(P[:, 2] * v_test > r - 1e-9):
            raise FitError("fitted polytope excludes the coasting point at "
                           f"v_x = {v_test:.1f} m/s")
    return P, r


def fit_s_az(log, aym2d_coeffs, near_limit=0.9, min_samples=50):
    """Fit S(a_z) = 1 + s1 a_z + s2 a_z^2 from near-limit cornering samples.

    Regresses the ratio of measured to flat-road lateral limit against a_z
    with the intercept pinned at 1. Flat telemetry (no a_z spread) returns
    zeros rather than fitting noise.
    """
    ay_s, _, a_z = _shifted_coords(log)
    if np.ptp(a_z) < AZ_EXCITATION_FLOOR:
        return 0.0, 0.0
    aym2d = npoly.polyval(log["v_x"], aym2d_coeffs)

    s1 = s2 = 0.0
    for _ in range(2):
        limit_3d = aym2d * (1.0 + s1 * a_z + s2 * a_z * a_z)
        sel = np.abs(ay_s) >= near_limit * limit_3d
        sel &= aym2d > 1.0
        if np.count_nonzero(sel) < min_samples:
            raise FitError(
                f"only {int(np.count_nonzero(sel))} near-limit cornering samples; "
                f"need {min_samples} to fit S(a_z)")
        ratio = np.abs(ay_s[sel]) / aym2d[sel]
        basis = np.stack([a_z[sel], a_z[sel] ** 2], axis=1)
        coef, *_ = np.linalg.lstsq(basis, ratio - 1.0, rcond=None)
        s1, s2 = float(coef[0]), float(coef[1])
    return s1, s2


def fit_brake_restriction(log, s1=0.0, s2=0.0, az_range=(0.0, 0.0),
                          spin_points=None, margin=0.2):
    """Slope and knee of the combined-braking restriction line.

    Fits the lower-left boundary of the braking-while-cornering cloud: bins
    |a_y| and regresses the per-bin minimum a_x beyond the knee, choosing the
    knee that minimizes the residual. Optional spin_points (shifted (ay, ax)
    pairs from instability events) pull the knee inward so the restriction
    excludes them with a margin.
    """
    ay_s, ax_s, a_z = _shifted_coords(log)
    ay_abs = np.abs(ay_s / s_scale(a_z, s1, s2, az_range))
    braking = ax_s < -1.0
    if np.count_nonzero(braking) < 50:
        raise FitError("not enough braking samples to fit the combined restriction")
    ay_b, ax_b = ay_abs[braking], ax_s[braking]

    n_bins = 12
    edges = np.linspace(0.0, np.max(ay_b), n_bins + 1)
    idx = np.clip(np.digitize(ay_b, edges) - 1, 0, n_bins - 1)
    floors, centers = [], []
    for b in range(n_bins):
        sel = idx == b
        if np.count_nonzero(sel) < 5:
            continue
        floors.append(np.min(ax_b[sel]))
        centers.append(0.5 * (edges[b] + edges[b + 1]))
    floors, centers = np.array(floors), np.array(centers)
    if len(floors) < 4:
        raise FitError("braking cloud too sparse across |a_y| for the restriction fit")

    best = None
    for knee_idx in range(1, len(floors) - 2):
        cs, fs = centers[knee_idx:], floors[knee_idx:]
        slope, intercept = np.polyfit(cs, fs, 1)
        sse = float(np.sum((fs - (slope * cs + intercept)) ** 2))
        if slope > 0 and (best is None or sse < best[0]):
            best = (sse, slope, intercept)
    if best is None:
        # monotone floor: no recovery of braking toward high |a_y|; restriction off
        return 0.0, float(np.max(ay_b))
    _, s_bar, intercept = best
    ay_bar = -intercept / s_bar

    # keep every observed point feasible: a_x >= s_bar * (|a_y| - ay_bar)
    violation = s_bar * (ay_b - ay_bar) - ax_b
    worst = np.max(violation)
    if worst > 0:
        ay_bar += worst / s_bar
    if spin_points is not None and len(spin_points):
        for ay_e, ax_e in np.atleast_2d(spin_points):
            ay_bar = min(ay_bar, abs(ay_e) - (ax_e + margin) / s_bar)
        ay_bar = max(ay_bar, 1.0)
    return float(s_bar), float(ay_bar)


def fit_ggv(log, prior: GgvModel = None, n_facets=N_FACETS, rho=HULL_SHRINK) -> GgvModel:
    """One-shot envelope identification from a telemetry log.

    Order matters: a_x bounds and the flat a_y envelope first, then S(a_z)
    against that envelope, then the polytope and the braking restriction in
    S-corrected coordinates. A prior model seeds the S used for the a_y
    envelope so 3D rounds refine rather than contaminate the 2D curve.
    """
    _, _, a_z = _shifted_coords(log)
    az_range = (float(np.min(a_z)), float(np.max(a_z)))
    s1p, s2p = (prior.s1, prior.s2) if prior is not None else (0.0, 0.0)
    azp = prior.az_range if prior is not None else az_range

    axm, axM = fit_ax_bounds(log)
    aym = fit_ay_max(log, s1=s1p, s2=s2p, az_range=azp)
    try:
        s1, s2 = fit_s_az(log, aym)
    except FitError:
        s1, s2 = s1p, s2p
    if s1 != s1p or s2 != s2p:
        aym = fit_ay_max(log, s1=s1, s2=s2, az_range=az_range)
    P, r = fit_polytope(log, s1=s1, s2=s2, az_range=az_range,
                        n_facets=n_facets, rho=rho)
    try:
        s_bar, ay_bar = fit_brake_restriction(log, s1=s1, s2=s2, az_range=az_range)
    except FitError:
        # s_bar must stay positive: with s_bar = 0 the residual row would
        # collapse to -ax_s and forbid braking outright.
        s_bar, ay_bar = 1.0, 1e9
    v = log["v_x"]
    return GgvModel(ayM2d_coeffs=aym, axm_coeffs=axm, axM_coeffs=axM,
                    s1=s1, s2=s2, P=P, r=r, s_bar=s_bar, ay_bar=ay_bar,
                    v_range=(float(np.min(v)), float(np.max(v))),
                    az_range=az_range,
                    meta={"samples": len(log)})


# ---------------------------------------------------------------------------
# diamond benchmark envelope
# ---------------------------------------------------------------------------

@dataclass
class DiamondGgv:
    """Per-speed diamond envelope: the benchmark's coarser g-g shape.

    Vertices are shared with the fitted GgvModel polynomials (same pure-lateral
    and pure-longitudinal limits) but the boundary between vertices is the
    diamond |a_x|/ax_vertex + |a_y|/ay_vertex <= 1, which locally overestimates
    the true envelope at combined-acceleration corners.
    """

    v_grid: np.ndarray
    ay_max: np.ndarray
    ax_max: np.ndarray
    ax_min: np.ndarray
    meta: dict = field(default_factory=dict)

    def vertices(self, v_x):
        ay = np.interp(v_x, self.v_grid, self.ay_max)
        up = np.interp(v_x, self.v_grid, self.ax_max)
        dn = np.interp(v_x, self.v_grid, self.ax_min)
        return ay, up, dn

    def residuals(self, a_x, a_y, a_z, v_x, xi, mu, phi):
        """Diamond residuals in gravity-shifted coordinates, <= 0 inside.

        Two entries per point: one per longitudinal half (accelerating /
        braking); the inactive half is reported with the same formula and is
        usually negative as well.
        """
        g_long, g_lat = gravity_components(xi, mu, phi)
        ax_s = np.asarray(a_x, dtype=float) - g_long
        ay_s = np.asarray(a_y, dtype=float) - g_lat
        ay_v, up, dn = self.vertices(np.asarray(v_x, dtype=float))
        res_up = np.abs(ay_s) / ay_v + ax_s / up - 1.0
        res_dn = np.abs(ay_s) / ay_v + ax_s / dn - 1.0
        return np.stack([res_up, res_dn], axis=-1)

    def to_json(self, path=None) -> str:
        payload = {"v_grid": list(self.v_grid), "ay_max": list(self.ay_max),
                   "ax_max": list(self.ax_max), "ax_min": list(self.ax_min),
                   "meta": self.meta}
        text = json.dumps(payload, indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "DiamondGgv":
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text()
        d = json.loads(text)
        return cls(v_grid=np.array(d["v_grid"]), ay_max=np.array(d["ay_max"]),
                   ax_max=np.array(d["ax_max"]), ax_min=np.array(d["ax_min"]),
                   meta=d.get("meta", {}))


def diamond_envelope(ggv: GgvModel, n_grid=25) -> DiamondGgv:
    """Diamond benchmark sharing the fitted model's per-speed vertices."""
    v = np.linspace(ggv.v_range[0], ggv.v_range[1], n_grid)
    ay = ggv.ay_max_2d(v)
    up = ggv.ax_max_2d(v)
    dn = ggv.ax_min_2d(v)
    # a vanishing acceleration vertex would degenerate the diamond's ratio form
    up = np.maximum(up, 0.1)
    dn = np.minimum(dn, -0.1)
    ay = np.maximum(ay, 0.5)
    return DiamondGgv(v_grid=v, ay_max=ay, ax_max=up, ax_min=dn,
                      meta={"source": "shared-vertices"})
