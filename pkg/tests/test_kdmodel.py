import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ribbonracer import kdmodel as kd
from ribbonracer import telemetry as tm
from ribbonracer.errors import FitError, ValidationError
from ribbonracer.ggv import GgvModel
from ribbonracer.road3d import flatten, synthesize_track


def simple_ggv(ay_coeffs=(14.0, 0.08), s1=0.0, s2=0.0):
    """Envelope stub: only the pieces the planning model reads."""
    return GgvModel(ayM2d_coeffs=np.array(ay_coeffs),
                    axm_coeffs=np.array([-12.0]),
                    axM_coeffs=np.array([6.0]),
                    P=np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
                    r=np.array([30.0, 30.0]),
                    s_bar=3.0, ay_bar=25.0, s1=s1, s2=s2,
                    v_range=(5.0, 80.0), az_range=(-7.0, 8.0))


# Q_i(v) coefficients are easiest to sanity-check on v/50; stored raw.
_Q_SCALED = np.array([[0.12, 2.0e-4, -1.5e-6],
                      [-0.04, 1.0e-4, 5.0e-7],
                      [0.02, -5.0e-5, 3.0e-7],
                      [0.015, 3.0e-5, -2.0e-7],
                      [-0.008, 2.0e-5, 1.0e-7]])

TRUE_PARAMS = kd.KdParams(
    tau_omega_coeffs=np.array([0.012, 1.0e-4, 0.0]),
    tau_v_coeffs=np.array([0.13, 8.0e-4, 0.0]),
    tau_a=0.045,
    fv_q=_Q_SCALED / (50.0 ** np.arange(5))[:, None],
    fv_b=np.array([[0.010, 0.004, -0.006],
                   [-0.002, 0.001, 0.0005]]),
    fv_c=np.array([[0.012, -0.005, 0.008],
                   [0.0015, 0.0008, -0.001]]),
)

BATTERY_GGV = simple_ggv(s1=0.03, s2=0.0012)


def run_battery(params=TRUE_PARAMS, ggv=BATTERY_GGV, dt=1e-3,
                speeds=(15.0, 22.0, 29.0, 36.0, 43.0, 50.0, 57.0)):
    """Open-loop step battery on the four dynamic channels.

    Pose is irrelevant to identification, so only (omega_z, v_y, v_x, a_x)
    are integrated; the vertical acceleration is a held value per block, the
    way a car on a long crest or in a dip would see it.
    """
    az_cycle = [-5.0, -3.0, -1.0, 0.0, 2.0, 4.0, 6.0]
    steer_cycle = [0.5, -0.75, 0.3, -0.9, 0.45]
    rows = {c: [] for c in ("t", "v_x", "v_y", "omega_z", "a_x",
                            "a_z", "steering", "throttle", "brake")}
    t = 0.0
    for k, v0 in enumerate(speeds):
        azs = np.roll(az_cycle, k)
        blocks = [(0.0, 0.0, 0.0, 0.4)]
        blocks += [(s, 0.0, azs[i], 1.5)
                   for i, s in enumerate(steer_cycle)]
        sign = -1.0 if k % 2 else 1.0
        blocks += [(0.8 * sign, 2.0, azs[5], 2.0),    # throttle, hard turn
                   (-0.7 * sign, -3.0, azs[6], 2.0)]  # brake, hard turn
        w, vy, vx, ax = 0.0, 0.0, v0, 0.0

        def rates(state, steer, ax0, az):
            w_, vy_, vx_, ax_ = state
            w_max = (ggv.ay_max_2d(vx_) * ggv.s_scale(az)) / vx_
            f = kd.fv_lateral(w_ * vx_, vx_, ax_, az, params)
            return np.array([(steer * w_max - w_) / params.tau_omega(vx_),
                             (f - vy_) / params.tau_v(vx_),
                             ax_,
                             (ax0 - ax_) / params.tau_a])

        for steer, ax0, az, dur in blocks:
            state = np.array([w, vy, vx, ax])
            for _ in range(int(round(dur / dt))):
                mid = state + 0.5 * dt * rates(state, steer, ax0, az)
                state = state + dt * rates(mid, steer, ax0, az)
                t += dt
                rows["t"].append(t)
                rows["v_x"].append(state[2])
                rows["v_y"].append(state[1])
                rows["omega_z"].append(state[0])
                rows["a_x"].append(state[3])
                rows["a_z"].append(az)
                rows["steering"].append(steer)
                rows["throttle"].append(max(ax0, 0.0))
                rows["brake"].append(max(-ax0, 0.0))
            w, vy, vx, ax = state
        t += 5.0  # reset gap; the fitter masks the seam

    n = len(rows["t"])
    cols = {c: np.zeros(n) for c in tm.CORE_COLUMNS}
    cols.update({k: np.asarray(v) for k, v in rows.items()})
    return tm.Telemetry.from_arrays(cols)


@pytest.fixture(scope="module")
def battery_log():
    return run_battery()


@pytest.fixture(scope="module")
def battery_fit(battery_log):
    return kd.fit_kd_params(battery_log)


# -- evaluation ------------------------------------------------------------------

def test_lateral_map_is_odd():
    rng = np.random.default_rng(7)
    p = kd.KdParams(fv_q=rng.normal(size=(5, 3)) * 0.01,
                    fv_b=rng.normal(size=(2, 3)) * 0.01,
                    fv_c=rng.normal(size=(2, 3)) * 0.01)
    ay = np.linspace(-9.0, 9.0, 13)
    plus = kd.fv_lateral(ay, 30.0, 1.5, -2.0, p)
    minus = kd.fv_lateral(-ay, 30.0, 1.5, -2.0, p)
    assert_allclose(minus, -plus, atol=1e-15)
    assert kd.fv_lateral(0.0, 30.0, 1.5, -2.0, p) == 0.0


def test_lateral_limit_examples():
    g = simple_ggv(ay_coeffs=(10.0,))
    # flat road: the 2D envelope comes back untouched
    assert kd.max_lateral_accel_3d(40.0, 0.0, 0.0, 0.0, 0.0, g) == 10.0
    # banked turn: gravity leans into the ribbon plane and adds grip
    banked = kd.max_lateral_accel_3d(40.0, 0.0, 0.0, 0.0, 0.1, g)
    assert banked == pytest.approx(10.0 + 9.81 * 0.1)
    # compression scales the whole tire budget up
    g2 = simple_ggv(ay_coeffs=(10.0,), s1=0.05)
    assert kd.max_lateral_accel_3d(40.0, 2.0, 0.0, 0.0, 0.0, g2) \
        == pytest.approx(11.0)


def test_yaw_rate_limit_examples():
    g = simple_ggv(ay_coeffs=(10.0,))
    assert kd.max_yaw_rate_3d(50.0, 0.0, 0.0, 0.0, 0.0, g) == pytest.approx(0.2)
    assert kd.max_yaw_rate_3d(25.0, 0.0, 0.0, 0.0, 0.0, g) == pytest.approx(0.4)
    with pytest.raises(ValidationError):
        kd.max_yaw_rate_3d(4.0, 0.0, 0.0, 0.0, 0.0, g)


@pytest.fixture(scope="module")
def flat_oval():
    spec = {
        "name": "flat-oval", "closed": True, "grid_step": 0.5, "width": 10.0,
        "segments": [
            {"type": "straight", "length": 220.0},
            {"type": "arc", "radius": 60.0, "length": 60.0 * math.pi},
            {"type": "straight", "length": 220.0},
            {"type": "arc", "radius": 60.0, "length": 60.0 * math.pi},
        ],
    }
    return flatten(synthesize_track(spec))


def test_equilibrium_on_straight(flat_oval):
    state = kd.KdState(omega_z=0.0, v_y=0.0, v_x=30.0, a_x=0.0,
                       zeta=50.0, n=0.0, xi=0.0)
    r = kd.kd_derivatives(state, kd.KdControl(0.0, 0.0), flat_oval,
                          kd.KdParams(), simple_ggv())
    assert r.zeta_dot == pytest.approx(30.0)
    for name, value in r._asdict().items():
        if name != "zeta_dot":
            assert value == pytest.approx(0.0, abs=1e-12), name


def test_planar_reduction_matches_hand_formulas(flat_oval):
    # mid-corner pose on the flattened track: a_z drops out, S(0) = 1
    zeta = 320.0
    road = flat_oval.sample(zeta)
    kappa = float(road.kappa[0])
    assert kappa > 0.01  # mid-corner station
    g = simple_ggv()
    p = kd.KdParams(fv_q=TRUE_PARAMS.fv_q)
    s = kd.KdState(omega_z=0.2, v_y=0.1, v_x=20.0, a_x=0.5,
                   zeta=zeta, n=0.4, xi=0.05)
    r = kd.kd_derivatives(s, kd.KdControl(0.3, 1.0), flat_oval, p, g)

    w_max = g.ay_max_2d(20.0) / 20.0
    assert r.omega_z_dot == pytest.approx(
        (0.3 * w_max - 0.2) / p.tau_omega(20.0))
    f = kd.fv_lateral(0.2 * 20.0, 20.0, 0.5, 0.0, p)
    assert r.v_y_dot == pytest.approx((f - 0.1) / p.tau_v(20.0))
    assert r.v_x_dot == 0.5
    assert r.a_x_dot == pytest.approx((1.0 - 0.5) / p.tau_a)
    zeta_dot = (20.0 * math.cos(0.05) - 0.1 * math.sin(0.05)) / (1 - 0.4 * kappa)
    assert r.zeta_dot == pytest.approx(zeta_dot)
    assert r.n_dot == pytest.approx(20.0 * math.sin(0.05) + 0.1 * math.cos(0.05))
    assert r.xi_dot == pytest.approx(0.2 - kappa * zeta_dot)


def test_derivatives_guard_rails(flat_oval):
    g = simple_ggv()
    slow = kd.KdState(0.0, 0.0, 4.0, 0.0, 10.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        kd.kd_derivatives(slow, kd.KdControl(0.0, 0.0), flat_oval,
                          kd.KdParams(), g)
    ok = kd.KdState(0.0, 0.0, 30.0, 0.0, 10.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        kd.kd_derivatives(ok, kd.KdControl(1.2, 0.0), flat_oval,
                          kd.KdParams(), g)


# -- closed-loop behavior along the road -------------------------------------------

@pytest.fixture(scope="module")
def straight_road():
    spec = {
        "name": "runway", "closed": False, "grid_step": 0.5, "width": 12.0,
        "segments": [{"type": "straight", "length": 400.0}],
    }
    return synthesize_track(spec)


def test_yaw_rate_settles_at_commanded_fraction(straight_road):
    g = simple_ggv()
    p = kd.KdParams()  # tau_omega = 0.15 flat
    v = 20.0
    state = kd.KdState(0.0, 0.0, v, 0.0, 5.0, 0.0, 0.0)
    dt, horizon = 1e-3, 1.0
    tt, out = kd.simulate(state, lambda t, s: kd.KdControl(0.5, 0.0),
                          straight_road, p, g, dt, int(horizon / dt))
    w_max = g.ay_max_2d(v) / v
    target = 0.5 * w_max
    # fixed point reached well past five time constants
    assert out[-1, 0] == pytest.approx(target, rel=5e-3)
    # and the 63.2% crossing time recovers the time constant within 2%
    gap = 1.0 - out[:, 0] / target
    k = int(np.argmax(gap < math.exp(-1.0)))
    t_cross = np.interp(math.exp(-1.0), gap[[k, k - 1]], tt[[k, k - 1]])
    assert t_cross == pytest.approx(p.tau_omega(v), rel=0.02)


def test_longitudinal_lag_recovered_from_rollout(straight_road):
    g = simple_ggv()
    p = kd.KdParams(tau_a=0.06)
    state = kd.KdState(0.0, 0.0, 25.0, 0.0, 5.0, 0.0, 0.0)
    dt = 1e-3
    tt, out = kd.simulate(state, lambda t, s: kd.KdControl(0.0, 2.0),
                          straight_road, p, g, dt, 600)
    gap = 1.0 - out[:, 3] / 2.0
    k = int(np.argmax(gap < math.exp(-1.0)))
    t_cross = np.interp(math.exp(-1.0), gap[[k, k - 1]], tt[[k, k - 1]])
    assert t_cross == pytest.approx(0.06, rel=0.02)
    # speed integrates the lagged acceleration
    expect_v = 25.0 + 2.0 * (tt[-1] - 0.06 * (1 - math.exp(-tt[-1] / 0.06)))
    assert out[-1, 2] == pytest.approx(expect_v, rel=1e-4)


# -- identification ----------------------------------------------------------------

def test_battery_recovers_time_constants(battery_fit):
    fitted = battery_fit
    v = np.array([15.0, 25.0, 35.0, 45.0, 55.0])
    assert_allclose(fitted.tau_omega(v), TRUE_PARAMS.tau_omega(v), rtol=0.01)
    assert_allclose(fitted.tau_v(v), TRUE_PARAMS.tau_v(v), rtol=0.01)
    assert fitted.tau_a == pytest.approx(TRUE_PARAMS.tau_a, rel=0.01)


def test_battery_recovers_lateral_map(battery_fit):
    fitted = battery_fit
    # compare the speed polynomials where they are actually evaluated
    v = np.linspace(15.0, 55.0, 9)
    from numpy.polynomial import polynomial as npoly
    for i in range(kd.P_Y):
        q_fit = npoly.polyval(v, fitted.fv_q[:, i])
        q_true = npoly.polyval(v, TRUE_PARAMS.fv_q[:, i])
        assert_allclose(q_fit, q_true, rtol=0.01,
                        atol=0.01 * np.abs(q_true).max())
    assert_allclose(fitted.fv_b, TRUE_PARAMS.fv_b, rtol=0.01, atol=1e-5)
    assert_allclose(fitted.fv_c, TRUE_PARAMS.fv_c, rtol=0.01, atol=1e-5)
    assert fitted.meta["fv_r2"] > 0.999


def test_fitted_map_predicts_on_the_battery(battery_log, battery_fit):
    fitted = battery_fit
    keep = battery_log["v_x"] > kd.V_MIN
    ay = (battery_log["omega_z"] * battery_log["v_x"])[keep]
    truth = kd.fv_lateral(ay, battery_log["v_x"][keep],
                          battery_log["a_x"][keep], battery_log["a_z"][keep],
                          TRUE_PARAMS)
    pred = kd.fv_lateral(ay, battery_log["v_x"][keep],
                         battery_log["a_x"][keep], battery_log["a_z"][keep],
                         fitted)
    scale = np.max(np.abs(truth))
    assert np.max(np.abs(pred - truth)) < 0.01 * scale


def test_single_speed_battery_lacks_excitation():
    log = run_battery(speeds=(30.0,))
    with pytest.raises(FitError, match="excitation"):
        kd.fit_kd_params(log)


def test_params_json_round_trip(tmp_path):
    path = tmp_path / "kd.json"
    TRUE_PARAMS.to_json(path)
    back = kd.KdParams.from_json(path)
    assert_allclose(back.tau_omega_coeffs, TRUE_PARAMS.tau_omega_coeffs)
    assert_allclose(back.fv_q, TRUE_PARAMS.fv_q)
    assert_allclose(back.fv_c, TRUE_PARAMS.fv_c)
    assert back.tau_a == TRUE_PARAMS.tau_a
    # a raw JSON string works too
    again = kd.KdParams.from_json(TRUE_PARAMS.to_json())
    assert_allclose(again.fv_b, TRUE_PARAMS.fv_b)


def test_validate_rejects_negative_lag():
    p = kd.KdParams(tau_omega_coeffs=np.array([0.02, -0.001, 0.0]))
    with pytest.raises(FitError):
        p.validate(v_hi=60.0)
