"""Kineto-dynamical planning model.

Four learned first-order channels over the curvilinear pose: yaw rate chasing
a normalized command scaled by the live grip limit, lateral velocity chasing a
learned multilinear map, longitudinal velocity integrating a lagged
acceleration command. Everything the tires do is absorbed into the fitted
parameter maps and the envelope, which is the point: the planner stays a
7-state ODE no matter how ugly the plant is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.optimize import curve_fit

from . import curvilinear as cv
from .errors import FitError, ValidationError
from .ggv import GgvModel

V_MIN = 5.0  # m/s; the model divides by v_x

P_Y, P_V, P_X, P_Z = 3, 4, 2, 2  # lateral-map polynomial degrees


class KdState(NamedTuple):
    omega_z: float
    v_y: float
    v_x: float
    a_x: float
    zeta: float
    n: float
    xi: float


class KdControl(NamedTuple):
    omega_z0: float  # normalized yaw-rate command in [-1, 1]
    a_x0: float      # longitudinal acceleration command, m/s^2


@dataclass
class KdParams:
    """Fitted model coefficients; treat as frozen once identification is done."""

    tau_omega_coeffs: np.ndarray = field(
        default_factory=lambda: np.array([0.15, 0.0, 0.0]))
    tau_v_coeffs: np.ndarray = field(
        default_factory=lambda: np.array([0.12, 0.0, 0.0]))
    tau_a: float = 0.05
    fv_q: np.ndarray = field(default_factory=lambda: np.zeros((P_V + 1, P_Y)))
    fv_b: np.ndarray = field(default_factory=lambda: np.zeros((P_X, P_Y)))
    fv_c: np.ndarray = field(default_factory=lambda: np.zeros((P_Z, P_Y)))
    meta: dict = field(default_factory=dict)

    def tau_omega(self, v_x):
        return npoly.polyval(v_x, self.tau_omega_coeffs)

    def tau_v(self, v_x):
        return npoly.polyval(v_x, self.tau_v_coeffs)

    def validate(self, v_lo=V_MIN, v_hi=90.0):
        v = np.linspace(v_lo, v_hi, 50)
        if np.any(self.tau_omega(v) <= 0) or np.any(self.tau_v(v) <= 0) \
                or self.tau_a <= 0:
            raise FitError("fitted time constants must stay positive over "
                           f"[{v_lo}, {v_hi}] m/s")

    def to_json(self, path=None) -> str:
        payload = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                   for k, v in asdict(self).items()}
        payload["degrees"] = {"p_y": P_Y, "p_v": P_V, "p_x": P_X, "p_z": P_Z}
        text = json.dumps(payload, indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "KdParams":
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text()
        d = json.loads(text)
        return cls(tau_omega_coeffs=np.array(d["tau_omega_coeffs"]),
                   tau_v_coeffs=np.array(d["tau_v_coeffs"]),
                   tau_a=d["tau_a"],
                   fv_q=np.array(d["fv_q"]), fv_b=np.array(d["fv_b"]),
                   fv_c=np.array(d["fv_c"]), meta=d.get("meta", {}))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def max_lateral_accel_3d(v_x, a_z, xi, mu, phi, ggv: GgvModel):
    """Live lateral-acceleration limit: flat envelope, load-scaled, gravity-shifted."""
    _, g_lat = cv.gravity_components(xi, mu, phi)
    return ggv.ay_max_2d(v_x) * ggv.s_scale(a_z) + g_lat


def max_yaw_rate_3d(v_x, a_z, xi, mu, phi, ggv: GgvModel):
    """Yaw-rate limit a_yM^3D / v_x; refuses speeds under the validity floor."""
    if np.any(np.asarray(v_x) < V_MIN):
        raise ValidationError(f"yaw-rate limit undefined below v_x = {V_MIN} m/s")
    return max_lateral_accel_3d(v_x, a_z, xi, mu, phi, ggv) / v_x


def fv_lateral(a_y, v_x, a_x, a_z, params: KdParams):
    """Steady-state lateral velocity map, odd in a_y by construction.

    Sum over i of Q_i(v_x) * a_y^(2i-1) * (1 + B_i(a_x)) * (1 + C_i(a_z))
    with polynomial factors; the leading 1 in the a_x and a_z factors anchors
    the scale so the q coefficients are identifiable.
    """
    a_y = np.asarray(a_y, dtype=float)
    out = np.zeros(np.broadcast(a_y, v_x, a_x, a_z).shape)
    for i in range(1, P_Y + 1):
        q_i = params.fv_q[:, i - 1]
        term = npoly.polyval(v_x, q_i) * a_y ** (2 * i - 1)
        bx = np.zeros_like(out)
        for j in range(1, P_X + 1):
            bx = bx + params.fv_b[j - 1, i - 1] * np.asarray(a_x) ** j
        cz = np.zeros_like(out)
        for j in range(1, P_Z + 1):
            cz = cz + params.fv_c[j - 1, i - 1] * np.asarray(a_z) ** j
        out = out + term * (1.0 + bx) * (1.0 + cz)
    return out


class KdRates(NamedTuple):
    omega_z_dot: float
    v_y_dot: float
    v_x_dot: float
    a_x_dot: float
    zeta_dot: float
    n_dot: float
    xi_dot: float


def kd_derivatives(state: KdState, control: KdControl, ribbon,
                   params: KdParams, ggv: GgvModel) -> KdRates:
    """Time-domain state derivatives of the planning model.

    The road enters three ways: pose kinematics, the vertical-acceleration
    estimate feeding the grip scale and the lateral map, and the gravity
    shift inside the yaw-rate limit.
    """
    if state.v_x < V_MIN:
        raise ValidationError(
            f"planning model invalid at v_x = {state.v_x:.2f} < {V_MIN} m/s")
    if abs(control.omega_z0) > 1.0 + 1e-9:
        raise ValidationError("normalized yaw-rate command outside [-1, 1]")

    road = ribbon.sample(state.zeta)
    kappa = float(road.kappa[0])
    _, a_z = cv.simplified_vertical(state.v_x, state.n, state.xi, kappa,
                                    float(road.upsilon[0]), float(road.tau[0]))
    omega_z_max = max_yaw_rate_3d(state.v_x, a_z, state.xi,
                                  float(road.mu[0]), float(road.phi[0]), ggv)

    a_y = state.omega_z * state.v_x
    f_v = fv_lateral(a_y, state.v_x, state.a_x, a_z, params)

    s, c = np.sin(state.xi), np.cos(state.xi)
    zeta_dot = (state.v_x * c - state.v_y * s) / cv.advance_ratio(state.n, kappa)
    return KdRates(
        omega_z_dot=(control.omega_z0 * omega_z_max - state.omega_z)
        / params.tau_omega(state.v_x),
        v_y_dot=(f_v - state.v_y) / params.tau_v(state.v_x),
        v_x_dot=state.a_x,
        a_x_dot=(control.a_x0 - state.a_x) / params.tau_a,
        zeta_dot=float(zeta_dot),
        n_dot=state.v_x * s + state.v_y * c,
        xi_dot=state.omega_z - kappa * float(zeta_dot),
    )


def simulate(state: KdState, control_fn, ribbon, params: KdParams,
             ggv: GgvModel, dt: float, steps: int):
    """Fixed-step RK2 rollout; control_fn(t, state) -> KdControl. Returns (t, states)."""
    out = np.empty((steps + 1, len(state)))
    out[0] = state
    t = 0.0
    for k in range(steps):
        s0 = KdState(*out[k])
        u = control_fn(t, s0)
        r1 = kd_derivatives(s0, u, ribbon, params, ggv)
        mid = KdState(*(out[k] + 0.5 * dt * np.array(r1)))
        r2 = kd_derivatives(mid, u, ribbon, params, ggv)
        out[k + 1] = out[k] + dt * np.array(r2)
        t += dt
    return np.arange(steps + 1) * dt, out


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------

def _detect_edges(t, cmd, min_jump, debounce=0.1):
    """Indices where the command steps by at least min_jump, debounced."""
    jumps = np.flatnonzero(np.abs(np.diff(cmd)) >= min_jump) + 1
    edges, last_t = [], -np.inf
    for j in jumps:
        if t[j] - last_t >= debounce:
            edges.append(j)
        last_t = t[j]
    return edges


def _fit_lag(t, y, t0_idx, t1_idx):
    """Time constant of a first-order approach within [t0_idx, t1_idx).

    A log-decrement pass (tail mean as the steady value, log of the remaining
    gap fit by a line) screens the segment and seeds a free-offset exponential
    fit. The window starts at half the gap so a faster upstream lag (the
    response is often a cascade) has died out; a segment the refined model
    cannot explain is rejected entirely.
    """
    seg_t, seg_y = t[t0_idx:t1_idx], y[t0_idx:t1_idx]
    if len(seg_t) < 10:
        return None
    tail = max(3, len(seg_y) // 4)
    y_inf = float(np.mean(seg_y[-tail:]))
    gap0 = seg_y[0] - y_inf
    if abs(gap0) < 1e-3:
        return None
    gap = (seg_y - y_inf) / gap0
    use = (gap > 0.04) & (gap < 0.5)
    if np.count_nonzero(use) < 5:
        return None
    x = seg_t[use] - seg_t[0]
    slope, _ = np.polyfit(x, np.log(gap[use]), 1)
    if slope >= -1e-6:
        return None

    # refine with the steady value free: the tail mean is biased when the
    # segment is short, and that bias leaks straight into the time constant
    start = int(np.argmax(gap < 0.5))
    xs = seg_t[start:] - seg_t[start]
    zs = seg_y[start:]
    try:
        popt, _ = curve_fit(
            lambda xx, yi, amp, tau: yi + amp * np.exp(-xx / tau),
            xs, zs, p0=(y_inf, gap[start] * gap0, -1.0 / slope), maxfev=400)
    except RuntimeError:
        return None
    fit = popt[0] + popt[1] * np.exp(-xs / popt[2])
    ss_res = float(np.sum((zs - fit) ** 2))
    ss_tot = float(np.sum((zs - np.mean(zs)) ** 2))
    if ss_tot > 1e-12 and 1.0 - ss_res / ss_tot < 0.98:
        return None  # visibly not first-order (drifting target, noise)
    tau = float(popt[2])
    return tau if 1e-3 < tau < 5.0 else None


def _fit_tau_poly(samples, degree=2, cond_limit=1e8, label=""):
    """Weighted polynomial fit of per-segment (speed, tau) estimates."""
    if len(samples) < degree + 2:
        raise FitError(f"only {len(samples)} usable step responses for {label}; "
                       "telemetry lacks excitation")
    v = np.array([s[0] for s in samples])
    tau = np.array([s[1] for s in samples])
    design = np.vander(v / 50.0, degree + 1, increasing=True)
    if np.linalg.cond(design) > cond_limit:
        raise FitError(f"insufficient speed excitation to identify {label}(v_x): "
                       "condition number above 1e8")
    coef_scaled, *_ = np.linalg.lstsq(design, tau, rcond=None)
    # undo the v/50 scaling: c_k <- c_k / 50^k
    return coef_scaled / (50.0 ** np.arange(degree + 1))


def _response_segments(log, cmd_col, resp_col, min_jump, steady_speed=False):
    t = log["t"]
    cmd, resp, v = log[cmd_col], log[resp_col], log["v_x"]
    edges = _detect_edges(t, cmd, min_jump)
    edges.append(len(t))
    dt_med = max(float(np.median(np.diff(t))), 1e-6)
    seams = np.flatnonzero((np.diff(t) <= 0) | (np.diff(t) > 5 * dt_med)) + 1
    samples = []
    for a, b in zip(edges[:-1], edges[1:]):
        cut = seams[(seams > a) & (seams < b)]
        if len(cut):  # concatenated logs: never fit across a recording seam
            b = int(cut[0])
        b = min(b, a + int(4.0 / dt_med))
        if steady_speed:
            # a drifting speed drags the response target along, so the
            # segment is not a clean step; yaw/lateral lags need steady v
            v_seg = v[a:b]
            if len(v_seg) == 0 or np.ptp(v_seg) > 0.02 * max(
                    float(np.mean(v_seg)), V_MIN):
                continue
        tau = _fit_lag(t, resp, a, b)
        if tau is not None:
            samples.append((float(np.mean(v[a:b])), tau))
    return samples


def fit_kd_params(log) -> KdParams:
    """Identify the full parameter set from one (or concatenated) telemetry log.

    Time constants come from step-like segments of the steering and
    longitudinal commands: each segment's response is matched to a first-order
    lag, and the per-segment estimates are regressed against speed. The
    lateral map is linear in each coefficient block, so the fit alternates
    exact least-squares steps over q, b, c until the residual settles.
    """
    tau_w = _response_segments(log, "steering", "omega_z", min_jump=5e-3,
                               steady_speed=True)
    tau_v = _response_segments(log, "steering", "v_y", min_jump=5e-3,
                               steady_speed=True)
    throttle = _response_segments(log, "throttle", "a_x", min_jump=0.05)
    brake = _response_segments(log, "brake", "a_x", min_jump=0.05)

    tau_omega_coeffs = _fit_tau_poly(tau_w, label="tau_omega")
    tau_v_coeffs = _fit_tau_poly(tau_v, label="tau_v")
    tau_a_samples = [s[1] for s in throttle + brake]
    tau_a = float(np.median(tau_a_samples)) if tau_a_samples else 0.05

    params = KdParams(tau_omega_coeffs=tau_omega_coeffs,
                      tau_v_coeffs=tau_v_coeffs, tau_a=tau_a)

    # lateral map: target is v_y pulled back through the fitted lag
    t = log["t"]
    dt_med = float(np.median(np.diff(t))) if len(t) > 1 else 1.0
    a_z_col = log["a_z_est"] if "a_z_est" in log.data.columns else log["a_z"]
    # the v_y derivative is a central difference, so mask samples straddling
    # a recording seam or a command step, where it estimates nothing useful
    jump = (np.diff(t) <= 0) | (np.diff(t) > 5 * dt_med)
    for col, lim in (("steering", 1e-6), ("throttle", 1e-3),
                     ("brake", 1e-3)):
        jump |= np.abs(np.diff(log[col])) > lim
    jump |= np.abs(np.diff(a_z_col)) > 0.25
    seam = np.zeros(len(t), dtype=bool)
    for j in np.flatnonzero(jump):
        seam[max(j - 1, 0):j + 3] = True

    v_x = log["v_x"]
    keep = (v_x > V_MIN) & ~seam
    v_x = v_x[keep]
    a_y = (log["omega_z"] * log["v_x"])[keep]
    a_x = log["a_x"][keep]
    a_z = a_z_col[keep]
    target = (log["v_y"] + npoly.polyval(log["v_x"], tau_v_coeffs)
              * log.rate_derivatives("v_y"))[keep]

    q, b, c = _fit_fv(a_y, v_x, a_x, a_z, target)
    params.fv_q, params.fv_b, params.fv_c = q, b, c

    pred = fv_lateral(a_y, v_x, a_x, a_z, params)
    ss_res = float(np.sum((target - pred) ** 2))
    ss_tot = float(np.sum((target - np.mean(target)) ** 2))
    params.meta = {
        "segments": {"tau_omega": len(tau_w), "tau_v": len(tau_v),
                     "tau_a": len(tau_a_samples)},
        "fv_r2": 1.0 - ss_res / max(ss_tot, 1e-12),
        "fv_rmse": float(np.sqrt(ss_res / len(target))),
        "samples": int(len(target)),
    }
    params.validate(v_hi=float(np.max(log["v_x"])))
    return params


def _fit_fv(a_y, v_x, a_x, a_z, target, warm_rounds=6, gn_rounds=40,
            cond_limit=1e8):
    """Fit the three coefficient blocks of the multilinear lateral map.

    Each block enters linearly when the other two are held, so a few
    alternating least-squares rounds give a cheap warm start; b and c begin
    at zero (pure q model). Alternation alone crawls when the blocks are
    correlated, so a joint Gauss-Newton polish over all active coefficients
    finishes the job. Blocks without excitation in their input stay at zero.
    """
    q = np.zeros((P_V + 1, P_Y))
    b = np.zeros((P_X, P_Y))
    c = np.zeros((P_Z, P_Y))
    fit_b = np.ptp(a_x) > 1.0
    fit_c = np.ptp(a_z) > 0.5

    vmat = np.vander(v_x / 50.0, P_V + 1, increasing=True)   # scaled v powers
    ay_pows = np.stack([a_y ** (2 * i - 1) for i in range(1, P_Y + 1)], axis=1)
    ax_pows = np.stack([a_x ** j for j in range(1, P_X + 1)], axis=1)
    az_pows = np.stack([a_z ** j for j in range(1, P_Z + 1)], axis=1)

    def factors():
        bx = 1.0 + ax_pows @ b      # (n, P_Y)
        cz = 1.0 + az_pows @ c
        return bx, cz

    def q_columns(bx, cz):
        return [vmat[:, j] * ay_pows[:, i] * bx[:, i] * cz[:, i]
                for i in range(P_Y) for j in range(P_V + 1)]

    for round_k in range(warm_rounds):
        bx, cz = factors()
        design = np.stack(q_columns(bx, cz), axis=1)
        # normalize columns so the condition check sees collinearity, not units
        norms = np.linalg.norm(design, axis=0)
        norms[norms == 0.0] = 1.0
        if round_k == 0 and np.linalg.cond(design / norms) > cond_limit:
            raise FitError("insufficient excitation for the lateral map: "
                           "condition number above 1e8")
        sol, *_ = np.linalg.lstsq(design / norms, target, rcond=None)
        q = (sol / norms).reshape(P_Y, P_V + 1).T

        base = (vmat @ q) * ay_pows  # (n, P_Y), the Q_i * ay^(2i-1) factor
        if fit_b:
            _, cz = factors()
            known = np.sum(base * cz, axis=1)
            cols = [base[:, i] * cz[:, i] * ax_pows[:, j]
                    for i in range(P_Y) for j in range(P_X)]
            sol, *_ = np.linalg.lstsq(np.stack(cols, axis=1), target - known,
                                      rcond=None)
            b = sol.reshape(P_Y, P_X).T
        if fit_c:
            bx, _ = factors()
            known = np.sum(base * bx, axis=1)
            cols = [base[:, i] * bx[:, i] * az_pows[:, j]
                    for i in range(P_Y) for j in range(P_Z)]
            sol, *_ = np.linalg.lstsq(np.stack(cols, axis=1), target - known,
                                      rcond=None)
            c = sol.reshape(P_Y, P_Z).T

    def predict(qm, bm, cm):
        bx = 1.0 + ax_pows @ bm
        cz = 1.0 + az_pows @ cm
        return np.sum((vmat @ qm) * ay_pows * bx * cz, axis=1)

    def pack(qm, bm, cm):
        parts = [qm.T.ravel()]
        if fit_b:
            parts.append(bm.T.ravel())
        if fit_c:
            parts.append(cm.T.ravel())
        return np.concatenate(parts)

    def unpack(theta):
        qm = theta[:q.size].reshape(P_Y, P_V + 1).T
        k = q.size
        bm, cm = np.zeros_like(b), np.zeros_like(c)
        if fit_b:
            bm = theta[k:k + b.size].reshape(P_Y, P_X).T
            k += b.size
        if fit_c:
            cm = theta[k:k + c.size].reshape(P_Y, P_Z).T
        return qm, bm, cm

    theta = pack(q, b, c)
    sse = float(np.sum((target - predict(*unpack(theta))) ** 2))
    for _ in range(gn_rounds):
        qm, bm, cm = unpack(theta)
        bx = 1.0 + ax_pows @ bm
        cz = 1.0 + az_pows @ cm
        base = (vmat @ qm) * ay_pows
        jac = q_columns(bx, cz)
        if fit_b:
            jac += [base[:, i] * cz[:, i] * ax_pows[:, j]
                    for i in range(P_Y) for j in range(P_X)]
        if fit_c:
            jac += [base[:, i] * bx[:, i] * az_pows[:, j]
                    for i in range(P_Y) for j in range(P_Z)]
        jac = np.stack(jac, axis=1)
        norms = np.linalg.norm(jac, axis=0)
        norms[norms == 0.0] = 1.0
        resid = target - predict(qm, bm, cm)
        step, *_ = np.linalg.lstsq(jac / norms, resid, rcond=None)
        step = step / norms
        alpha, improved = 1.0, False
        for _ in range(12):  # backtracking keeps the polish monotone
            trial = theta + alpha * step
            sse_t = float(np.sum((target - predict(*unpack(trial))) ** 2))
            if sse_t < sse:
                theta, improved = trial, True
                gain, sse = sse - sse_t, sse_t
                break
            alpha *= 0.5
        if not improved or gain < 1e-14 * max(sse, 1e-30):
            break

    q, b, c = unpack(theta)
    # undo the v/50 scaling on the q block
    q = q / (50.0 ** np.arange(P_V + 1))[:, None]
    return q, b, c
