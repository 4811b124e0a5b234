"""Double-track vehicle plant running on a 3D ribbon road.

This is the high-fidelity side of the toolchain: the planner never sees these
equations, it only sees telemetry produced here. The model is a double-track
chassis with magic-formula lateral tires, a friction-ellipse combined-slip
limit, load-sensitive peak friction, quasi-static longitudinal and lateral
load transfer, aero drag and downforce, and first-order actuator lags on
steering rate, drive force and brake force. Roll and pitch degrees of freedom
are absorbed into the load-transfer algebra; the body is assumed to follow
the road surface, so the vertical channel is purely kinematic and shows up
through the compression acceleration ``a_z`` scaling the total wheel load.

Integration is semi-implicit Euler at 1 kHz: body rates are updated from
forces first, then the road-relative pose is advanced with the new rates.
The step is deliberately pure (state in, state out) so runs are reproducible;
anything stochastic, like actuator disturbance injection, belongs to the
driver loop that calls :func:`plant_step`.
"""

from __future__ import annotations

import json
import math
import weakref
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .curvilinear import (CurvilinearPose, GRAVITY, com_acceleration,
                          darboux_rates, simplified_vertical)
from .errors import PoseSingularityError, ValidationError
from .road3d import RoadRibbon
from .telemetry import Telemetry

RHO_AIR = 1.225  # kg/m^3

#: wheel order used for all per-wheel tuples
WHEELS = ("FL", "FR", "RL", "RR")


@dataclass
class PlantParams:
    """Physical and actuator parameters of the plant.

    Tire triples are ``(peak_friction, stiffness, shape)`` for the magic
    formula ``Fy = mu*Fz*sin(shape*atan(stiffness*alpha))``. Downforce
    coefficients are in N per (m/s)^2 and ``drag_area`` is the product
    ``Cd*A`` in m^2. ``front_weight_fraction`` is the share of static weight
    carried by the front axle.
    """

    mass: float = 1200.0
    yaw_inertia: float = 1600.0
    wheelbase: float = 2.8
    front_weight_fraction: float = 0.45
    track_front: float = 1.62
    track_rear: float = 1.58
    com_height: float = 0.30
    tire_front: tuple = (1.62, 9.5, 1.50)
    tire_rear: tuple = (1.68, 10.5, 1.55)
    mu_load_slope: float = 0.10
    relaxation_length: float = 0.35
    roll_balance_front: float = 0.55
    drive_layout: str = "rwd"
    max_power: float = 461e3
    max_drive_force: float = 16e3
    max_brake_force: float = 30e3
    brake_bias_front: float = 0.60
    drag_area: float = 1.00
    downforce_front: float = 0.95
    downforce_rear: float = 1.25
    rolling_resistance: float = 0.012
    steer_max: float = 0.45
    steer_rate_limit: float = 6.0
    drive_lag: float = 0.05
    brake_lag: float = 0.03

    @property
    def dist_front_axle(self) -> float:
        """CoM to front axle distance (m)."""
        return self.wheelbase * (1.0 - self.front_weight_fraction)

    @property
    def dist_rear_axle(self) -> float:
        return self.wheelbase * self.front_weight_fraction

    def drive_split(self) -> tuple:
        """(front, rear) share of the drive force by layout."""
        return {"fwd": (1.0, 0.0), "rwd": (0.0, 1.0),
                "awd": (0.4, 0.6)}[self.drive_layout]

    def validate(self) -> "PlantParams":
        positive = ["mass", "yaw_inertia", "wheelbase", "track_front",
                    "track_rear", "com_height", "max_power", "max_drive_force",
                    "max_brake_force", "drag_area", "relaxation_length",
                    "steer_max", "steer_rate_limit", "drive_lag", "brake_lag"]
        for name in positive:
            if not getattr(self, name) > 0.0:
                raise ValidationError(f"plant parameter {name} must be positive")
        for name in ["downforce_front", "downforce_rear", "rolling_resistance",
                     "mu_load_slope"]:
            if getattr(self, name) < 0.0:
                raise ValidationError(f"plant parameter {name} must be >= 0")
        if not 0.2 < self.front_weight_fraction < 0.8:
            raise ValidationError("front_weight_fraction outside (0.2, 0.8)")
        if not 0.0 < self.brake_bias_front < 1.0:
            raise ValidationError("brake_bias_front outside (0, 1)")
        if not 0.0 <= self.roll_balance_front <= 1.0:
            raise ValidationError("roll_balance_front outside [0, 1]")
        if self.drive_layout not in ("fwd", "rwd", "awd"):
            raise ValidationError(f"unknown drive layout {self.drive_layout!r}")
        for name in ("tire_front", "tire_rear"):
            triple = getattr(self, name)
            if len(triple) != 3 or any(v <= 0.0 for v in triple):
                raise ValidationError(f"{name} must be three positive numbers")
        if self.com_height >= self.wheelbase / 2.0:
            raise ValidationError("com_height implausibly large vs wheelbase")
        loads = static_wheel_loads(self)
        if abs(sum(loads) - self.mass * GRAVITY) > 1e-6 * self.mass * GRAVITY:
            raise ValidationError("static wheel loads do not sum to mass*g")
        return self

    def to_json(self, path=None) -> str:
        payload = asdict(self)
        payload["tire_front"] = list(self.tire_front)
        payload["tire_rear"] = list(self.tire_rear)
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source) -> "PlantParams":
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text()
        payload = json.loads(text)
        payload["tire_front"] = tuple(payload["tire_front"])
        payload["tire_rear"] = tuple(payload["tire_rear"])
        return cls(**payload).validate()


def static_wheel_loads(params: PlantParams) -> tuple:
    """Per-wheel vertical loads at rest on level ground, in WHEELS order."""
    front = params.front_weight_fraction * params.mass * GRAVITY
    rear = params.mass * GRAVITY - front
    return (front / 2.0, front / 2.0, rear / 2.0, rear / 2.0)


class PlantInput(NamedTuple):
    """Driver commands: road-wheel steering target (rad), throttle and brake in [0, 1]."""

    steering: float
    throttle: float
    brake: float


COAST = PlantInput(0.0, 0.0, 0.0)


@dataclass
class PlantState:
    """Full plant state after one integration step.

    ``fy`` carries the relaxed (physical) lateral tire forces, ``fz`` the
    vertical loads used for this step's forces, both in WHEELS order. The
    last specific forces and spine rate are kept so the next step can do
    quasi-static load transfer and finite-difference the frame's angular
    acceleration without re-deriving them.
    """

    zeta: float
    n: float
    xi: float
    v_x: float
    v_y: float
    omega_z: float
    steer: float = 0.0
    drive_force: float = 0.0
    brake_force: float = 0.0
    fy: tuple = (0.0, 0.0, 0.0, 0.0)
    fz: tuple = (0.0, 0.0, 0.0, 0.0)
    a_x_s: float = 0.0
    a_y_s: float = 0.0
    a_z_s: float = 0.0
    prev_zeta_dot: float = 0.0
    lifted: bool = False
    t: float = 0.0

    @property
    def pose(self) -> CurvilinearPose:
        return CurvilinearPose(self.zeta, self.n, self.xi)


def initial_state(params: PlantParams, ribbon: RoadRibbon, zeta: float = 0.0,
                  n: float = 0.0, xi: float = 0.0, v_x: float = 0.0,
                  v_y: float = 0.0, omega_z: float = 0.0) -> PlantState:
    """State at rest (or rolling straight) with untransferred loads and relaxed tires."""
    sample = ribbon.sample(zeta)
    rates = darboux_rates(v_x, v_y, omega_z, n, xi,
                          float(sample.kappa[0]), float(sample.upsilon[0]),
                          float(sample.tau[0]))
    a_z = -float(rates.omega_y) * v_x
    loads, _ = _vertical_loads(params, params.mass * (GRAVITY + a_z), v_x, 0.0, 0.0)
    return PlantState(zeta=zeta, n=n, xi=xi, v_x=v_x, v_y=v_y, omega_z=omega_z,
                      fz=tuple(loads), a_z_s=a_z,
                      prev_zeta_dot=float(rates.zeta_dot))


class RoadTable:
    """Dense scalar-lookup cache of one ribbon's curvatures, angles and slopes.

    ``RoadRibbon.sample`` is vectorized and spline-backed, which is the wrong
    trade for a 1 kHz scalar loop. This table resamples the ribbon once onto
    a fine uniform grid and then serves plain-float linear interpolation.
    """

    def __init__(self, ribbon: RoadRibbon, step: float = 0.25):
        z0, z1 = float(ribbon.zeta[0]), float(ribbon.zeta[-1])
        count = max(int(math.ceil((z1 - z0) / step)), 2)
        grid = np.linspace(z0, z1, count + 1)
        sample = ribbon.sample(grid)
        slopes = ribbon.sample_curvature_slopes(grid)
        self.z0 = z0
        self.length = z1 - z0
        self.step = float(grid[1] - grid[0])
        self.closed = ribbon.closed
        self.ribbon = ribbon
        self._cols = [arr.tolist() for arr in
                      (sample.kappa, sample.upsilon, sample.tau,
                       sample.mu, sample.phi, *slopes)]

    def lookup(self, zeta: float) -> tuple:
        """(kappa, upsilon, tau, mu, phi, dkappa, dupsilon, dtau) at one station."""
        u = (zeta - self.z0) / self.step
        top = self.length / self.step
        if self.closed:
            u %= top
        elif u < 0.0 or u > top:
            u = min(max(u, 0.0), top)
        i = int(u)
        if i >= top:
            i = int(top) - 1
        f = u - i
        j = i + 1
        return tuple(col[i] + f * (col[j] - col[i]) for col in self._cols)


_TABLES: dict = {}


def road_table(ribbon) -> RoadTable:
    """Return the cached RoadTable for a ribbon (build on first use)."""
    if isinstance(ribbon, RoadTable):
        return ribbon
    key = id(ribbon)
    hit = _TABLES.get(key)
    if hit is not None and hit[0]() is ribbon:
        return hit[1]
    table = RoadTable(ribbon)
    _TABLES[key] = (weakref.ref(ribbon), table)
    return table


def _magic_lateral(alpha, mu_eff, fz, stiffness, shape):
    return mu_eff * fz * math.sin(shape * math.atan(stiffness * alpha))


def _vertical_loads(params: PlantParams, weight: float, vx: float,
                    ax_mem: float, ay_mem: float):
    """Per-wheel loads from total weight, downforce and quasi-static transfer.

    The axle shifts cancel in the sum, so whatever accelerations are fed in,
    sum(loads) equals weight plus total downforce until a wheel lifts.
    """
    p = params
    df_front = p.downforce_front * vx * vx
    df_rear = p.downforce_rear * vx * vx
    shift_long = p.mass * ax_mem * p.com_height / p.wheelbase
    f_front = p.front_weight_fraction * weight + df_front - shift_long
    f_rear = (1.0 - p.front_weight_fraction) * weight + df_rear + shift_long
    shift_f = p.mass * ay_mem * p.com_height * p.roll_balance_front / p.track_front
    shift_r = p.mass * ay_mem * p.com_height * (1.0 - p.roll_balance_front) / p.track_rear
    loads = [0.5 * f_front - shift_f, 0.5 * f_front + shift_f,
             0.5 * f_rear - shift_r, 0.5 * f_rear + shift_r]
    lifted = any(load < 0.0 for load in loads)
    if lifted:
        loads = [max(load, 0.0) for load in loads]
    return loads, lifted


def plant_step(params: PlantParams, state: PlantState, u: PlantInput,
               ribbon, dt: float = 1e-3) -> PlantState:
    """Advance the plant one semi-implicit Euler step of at most 1 ms.

    Raises PoseSingularityError when the lateral offset approaches the local
    center of curvature; wheel lift is survivable and only sets the flag.
    """
    if dt > 1.0005e-3:
        raise ValidationError("plant_step requires dt <= 1 ms")
    p = params
    road = road_table(ribbon)
    vx, vy, wz = state.v_x, state.v_y, state.omega_z
    n, xi = state.n, state.xi

    # actuator states: rate-limited steering, lagged drive and brake forces
    target = min(max(u.steering, -p.steer_max), p.steer_max)
    move = min(max(target - state.steer, -p.steer_rate_limit * dt),
               p.steer_rate_limit * dt)
    steer = state.steer + move
    thr = min(max(u.throttle, 0.0), 1.0)
    brk = min(max(u.brake, 0.0), 1.0)
    drive_target = thr * min(p.max_power / max(vx, 5.0), p.max_drive_force)
    drive = state.drive_force + (dt / p.drive_lag) * (drive_target - state.drive_force)
    brake = state.brake_force + (dt / p.brake_lag) * (brk * p.max_brake_force
                                                      - state.brake_force)

    # road geometry and frame rates at the current pose
    kap, ups, tau, mu_r, phi_r, dkap, dups, dtau = road.lookup(state.zeta)
    sxi, cxi = math.sin(xi), math.cos(xi)
    ratio = 1.0 - n * kap
    if ratio < 0.05:
        raise PoseSingularityError(
            "lateral offset reached the local center of curvature "
            f"(1 - n*kappa = {ratio:.3f} at zeta = {state.zeta:.1f})")
    zdot = (vx * cxi - vy * sxi) / ratio
    ndot = vx * sxi + vy * cxi
    xidot = wz - kap * zdot
    along = tau * cxi + ups * sxi
    across = tau * sxi - ups * cxi
    wx = -along * zdot
    wy = across * zdot
    vz = -n * tau * zdot
    zdd = (zdot - state.prev_zeta_dot) / dt
    along_dot = (dtau * zdot) * cxi + (dups * zdot) * sxi \
        + xidot * (ups * cxi - tau * sxi)
    across_dot = (dtau * zdot) * sxi - (dups * zdot) * cxi \
        + xidot * (tau * cxi + ups * sxi)
    wxdot = -along_dot * zdot - along * zdd
    wydot = across_dot * zdot + across * zdd
    vzdot = -(ndot * tau + n * dtau * zdot) * zdot - n * tau * zdd
    a_z = vzdot - wy * vx

    # vertical loads: compression-scaled weight plus downforce, shifted by the
    # previous step's specific forces (quasi-static transfer)
    loads, lifted = _vertical_loads(p, p.mass * (GRAVITY + a_z), vx,
                                    state.a_x_s, state.a_y_s)

    # per-wheel tire forces
    a_cg, b_cg = p.dist_front_axle, p.dist_rear_axle
    geometry = ((a_cg, 0.5 * p.track_front), (a_cg, -0.5 * p.track_front),
                (-b_cg, 0.5 * p.track_rear), (-b_cg, -0.5 * p.track_rear))
    statics = static_wheel_loads(p)
    split_f, split_r = p.drive_split()
    sum_fx = 0.0
    sum_fy = 0.0
    moment = 0.0
    new_fy = []
    for i, (x_w, y_w) in enumerate(geometry):
        front = i < 2
        mu_t, stiff, shape = p.tire_front if front else p.tire_rear
        fz = loads[i]
        vwx = vx - wz * y_w
        vwy = vy + wz * x_w
        alpha = (steer if front else 0.0) - math.atan2(vwy, max(vwx, 0.8))
        mu_eff = mu_t * (1.0 - p.mu_load_slope * (fz / statics[i] - 1.0))
        mu_eff = min(max(mu_eff, 0.3 * mu_t), 1.3 * mu_t)
        fy_ss = _magic_lateral(alpha, mu_eff, fz, stiff, shape)
        blend = min(dt * max(vwx, 5.0) / p.relaxation_length, 1.0)
        fy = state.fy[i] + blend * (fy_ss - state.fy[i])
        fx = 0.5 * drive * (split_f if front else split_r)
        fx -= 0.5 * brake * (p.brake_bias_front if front else
                             1.0 - p.brake_bias_front) * math.tanh(vwx / 0.5)
        cap = mu_eff * fz
        fx = min(max(fx, -cap), cap)
        room = cap * math.sqrt(max(1.0 - (fx / cap) ** 2, 0.0)) if cap > 0.0 else 0.0
        fy = min(max(fy, -room), room)
        new_fy.append(fy)
        if front:
            fx_b = fx * math.cos(steer) - fy * math.sin(steer)
            fy_b = fx * math.sin(steer) + fy * math.cos(steer)
        else:
            fx_b, fy_b = fx, fy
        sum_fx += fx_b
        sum_fy += fy_b
        moment += x_w * fy_b - y_w * fx_b

    sum_fx -= 0.5 * RHO_AIR * p.drag_area * vx * abs(vx)
    sum_fx -= p.rolling_resistance * sum(loads) * math.tanh(vx / 0.5)

    # body accelerations from the specific forces, inverting the CoM kinematics
    ax_s = sum_fx / p.mass
    ay_s = sum_fy / p.mass
    h = p.com_height
    g_long = GRAVITY * (sxi * phi_r - cxi * mu_r)
    g_lat = GRAVITY * (sxi * mu_r + cxi * phi_r)
    vxdot = ax_s + wz * (vy - wx * h) - wy * vz - wydot * h + g_long
    vydot = ay_s - wz * (vx + wy * h) + wx * vz + wxdot * h + g_lat
    wzdot = moment / p.yaw_inertia

    # semi-implicit: new velocities first, pose advances with them
    vx2 = vx + dt * vxdot
    vy2 = vy + dt * vydot
    wz2 = wz + dt * wzdot
    zdot2 = (vx2 * cxi - vy2 * sxi) / ratio
    return PlantState(
        zeta=state.zeta + dt * zdot2,
        n=n + dt * (vx2 * sxi + vy2 * cxi),
        xi=xi + dt * (wz2 - kap * zdot2),
        v_x=vx2, v_y=vy2, omega_z=wz2,
        steer=steer, drive_force=drive, brake_force=brake,
        fy=tuple(new_fy), fz=tuple(loads),
        a_x_s=ax_s, a_y_s=ay_s, a_z_s=a_z,
        prev_zeta_dot=zdot2, lifted=lifted, t=state.t + dt)


def rollout(params: PlantParams, ribbon, control: Callable, duration: float,
            dt: float = 1e-3, state: PlantState = None, log_every: int = 1):
    """Run the plant under a control law and record the trajectory.

    ``control(t, state) -> PlantInput`` is evaluated every step; every
    ``log_every``-th step (plus the final state) lands in the returned
    ``(times, states, inputs)`` lists. Pass a prebuilt RoadTable as ``ribbon``
    to skip the cache lookup in long batch runs.
    """
    road = road_table(ribbon)
    if state is None:
        state = initial_state(params, road.ribbon)
    steps = int(round(duration / dt))
    times, states, inputs = [], [], []
    u = COAST
    for k in range(steps):
        u = control(state.t, state)
        if k % log_every == 0:
            times.append(state.t)
            states.append(state)
            inputs.append(u)
        state = plant_step(params, state, u, road, dt)
    times.append(state.t)
    states.append(state)
    inputs.append(u)
    return np.asarray(times), states, inputs


def plant_telemetry(params: PlantParams, ribbon: RoadRibbon, times,
                    states: Sequence[PlantState], inputs: Sequence[PlantInput],
                    n_sectors: int = 3) -> Telemetry:
    """Post-process a recorded run into the shared Telemetry layout.

    Accelerations are reconstructed from the kinematic histories alone
    (central differences plus the moving-frame terms), the same way a real
    logger would, rather than copied from the plant's internal force sums;
    those sums are kept as ``a_x_force``/``a_y_force`` extras for diagnostics.
    The ``a_z`` column is the planner-grade estimate, with the full expression
    in ``a_z_full``. Requires at least a 100 Hz sample rate.
    """
    t = np.asarray(times, dtype=float)
    if len(t) != len(states) or len(t) != len(inputs):
        raise ValidationError("times, states and inputs must align")
    if len(t) < 5:
        raise ValidationError("telemetry needs at least 5 samples")
    dt_med = float(np.median(np.diff(t)))
    if dt_med > 0.0105:
        raise ValidationError(
            f"plant telemetry must be sampled at 100 Hz or faster (dt={dt_med:.4f})")
    zeta = np.array([s.zeta for s in states])
    n = np.array([s.n for s in states])
    xi = np.array([s.xi for s in states])
    v_x = np.array([s.v_x for s in states])
    v_y = np.array([s.v_y for s in states])
    omega_z = np.array([s.omega_z for s in states])
    road = ribbon.sample(zeta)
    rates = darboux_rates(v_x, v_y, omega_z, n, xi,
                          road.kappa, road.upsilon, road.tau)
    a_x, a_y, a_z_full = com_acceleration(
        v_x, v_y, rates.v_z, rates.omega_x, rates.omega_y, omega_z,
        np.gradient(v_x, t), np.gradient(v_y, t), np.gradient(rates.v_z, t),
        xi, road.mu, road.phi, h=params.com_height,
        omega_x_dot=np.gradient(rates.omega_x, t),
        omega_y_dot=np.gradient(rates.omega_y, t))
    _, a_z = simplified_vertical(v_x, n, xi, road.kappa, road.upsilon, road.tau)

    z0 = float(ribbon.zeta[0])
    length = ribbon.length
    frac = np.mod(zeta - z0, length) / length if ribbon.closed \
        else np.clip((zeta - z0) / length, 0.0, 1.0)
    sector = np.minimum((frac * n_sectors).astype(int), n_sectors - 1)

    lap_time, sector_times = _lap_splits(t, zeta, z0, length, n_sectors)
    tel = Telemetry.from_arrays(
        {"t": t, "zeta": zeta, "n": n, "xi": xi,
         "v_x": v_x, "v_y": v_y, "omega_z": omega_z,
         "a_x": a_x, "a_y": a_y, "a_z": a_z,
         "steering": np.array([u.steering for u in inputs]),
         "throttle": np.array([u.throttle for u in inputs]),
         "brake": np.array([u.brake for u in inputs]),
         "mu": road.mu, "phi": road.phi, "sector": sector,
         "a_z_full": a_z_full,
         "a_x_force": _interval_forces(states, "a_x_s"),
         "a_y_force": _interval_forces(states, "a_y_s")},
        lap_time=lap_time, sector_times=sector_times,
        meta={"source": "plant", "dt": dt_med, "n_sectors": n_sectors,
              "track": ribbon.name})
    return tel


def _interval_forces(states, field_name):
    """Force-sum diagnostics realigned to the sample they were evaluated at.

    A state stores the specific forces that produced it, i.e. the forces at
    the previous state, so shifting by one restores alignment for 1 kHz logs.
    Subsampled logs only get the nearest sub-step, which is fine for plots.
    """
    vals = [getattr(s, field_name) for s in states[1:]]
    vals.append(vals[-1] if vals else 0.0)
    return np.asarray(vals)


def _lap_splits(t, zeta, z0, length, n_sectors):
    """Lap time and sector splits from the first traversal, if completed."""
    bounds = z0 + length * np.arange(1, n_sectors + 1) / n_sectors
    marks = []
    for bound in bounds:
        idx = np.flatnonzero(zeta >= bound)
        if len(idx) == 0:
            return None, []
        j = int(idx[0])
        if j == 0:
            return None, []
        span = zeta[j] - zeta[j - 1]
        back = (zeta[j] - bound) / span if span > 0 else 0.0
        marks.append(float(t[j] - back * (t[j] - t[j - 1])))
    splits = np.diff(np.concatenate([[t[0]], marks]))
    return float(marks[-1] - t[0]), [float(s) for s in splits]
