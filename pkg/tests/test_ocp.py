import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from ribbonracer.errors import SolverError, ValidationError
from ribbonracer.ggv import DiamondGgv
from ribbonracer.kdmodel import KdParams
from ribbonracer.ocp import (OcpConfig, PlanSolution, Transcription,
                             plan_step, solve_mlt, solve_nlp)
from ribbonracer.plant import PlantParams
from ribbonracer.planmodels import (KdPlanModel, PointPlanModel,
                                    plant_qss_envelope)
from ribbonracer.road3d import build_ribbon, flatten, synthesize_track


# -- shared geometry and models --------------------------------------------------

def straight_ribbon(length=400.0, width=8.0):
    z = np.linspace(0.0, length, 41)
    zero = np.zeros_like(z)
    half = np.full_like(z, width / 2)
    return build_ribbon(z, zero, zero, zero, half, half)


def circle_ribbon(radius=60.0, width=8.0):
    z = np.linspace(0.0, 2 * np.pi * radius, 181)
    kap = np.full_like(z, 1.0 / radius)
    zero = np.zeros_like(z)
    half = np.full_like(z, width / 2)
    return build_ribbon(z, kap, zero, zero, half, half, closed=True)


@pytest.fixture(scope="module")
def qss():
    return plant_qss_envelope(PlantParams())


@pytest.fixture(scope="module")
def kd_model(qss):
    par = KdParams()
    par.fv_q[1, 0] = 0.004
    return KdPlanModel(par, qss)


@pytest.fixture(scope="module")
def banked_circuit():
    return synthesize_track({
        "name": "test-circuit",
        "closed": True,
        "width": 9.0,
        "segments": [
            {"type": "straight", "length": 250.0},
            {"type": "arc", "radius": 70.0, "length": 219.9, "bank": 0.15},
            {"type": "straight", "length": 250.0},
            {"type": "arc", "radius": 70.0, "length": 219.9, "bank": 0.15},
        ],
        "elevation": [
            {"kind": "hill", "start": 40.0, "length": 170.0, "slope": 0.09},
            {"kind": "dip", "start": 480.0, "length": 170.0, "slope": 0.10},
        ],
    })


@pytest.fixture(scope="module")
def banked_lap(kd_model, banked_circuit):
    cfg = OcpConfig(mesh_points=260, half_width=0.9)
    return solve_mlt(kd_model, banked_circuit, cfg)


class LinearToy:
    """Double integrator with time along for the ride: the NLP is a QP,
    so a dense KKT factorization gives the exact answer to compare with."""

    state_names = ("p", "q", "t")
    control_names = ("u",)
    time_index = 2
    n_index = 0
    v_index = 1
    xi_index = 0
    state_scale = np.array([1.0, 1.0, 1.0])
    control_scale = np.array([1.0])
    n_ineq = 0

    def f_zeta(self, X, U, road):
        return np.stack([X[1], U[0], np.ones_like(X[0])])

    def inequalities(self, X, U, road):
        return np.zeros((0, X.shape[1]))

    def envelope_caps(self, v):
        one = np.ones_like(v)
        return 10.0 * one, 5.0 * one, -5.0 * one

    def fill_guess(self, v, t, road, mesh):
        zero = np.zeros_like(t)
        return np.stack([zero, zero, t]), np.stack([zero])

    def terminal_target(self, x0):
        return np.array([1.0, 0.0, 0.0])

    def map_terminal_weights(self, w7):
        return np.array([50.0, 50.0, 0.0])


def toy_qp_solution(M, L, reg, x_init, x_f, w_term):
    """The same trapezoidal QP assembled densely and solved by its KKT system."""
    nx, nu = 3, 1
    blk = nx + nu
    n_z = M * blk + 1
    h = L / (M - 1)
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    Bm = np.array([[0.0], [1.0], [0.0]])
    c0 = np.array([0.0, 0.0, 1.0])
    m_E = M * nx + 1
    E = np.zeros((m_E, n_z))
    d = np.zeros(m_E)
    E[:nx, :nx] = np.eye(nx)
    d[:nx] = x_init
    for k in range(M - 1):
        r = nx + k * nx
        E[r:r + nx, k * blk:k * blk + nx] = -np.eye(nx) - h / 2 * A
        E[r:r + nx, k * blk + nx:(k + 1) * blk] = -h / 2 * Bm
        E[r:r + nx, (k + 1) * blk:(k + 1) * blk + nx] = np.eye(nx) - h / 2 * A
        E[r:r + nx, (k + 1) * blk + nx:(k + 2) * blk] = -h / 2 * Bm
        d[r:r + nx] = h * c0
    E[-1, -1] = 1.0
    E[-1, (M - 1) * blk + 2] = -1.0
    Q = np.zeros((n_z, n_z))
    g = np.zeros(n_z)
    last = (M - 1) * blk
    for j in range(nx):
        Q[last + j, last + j] = 2.0 * w_term[j]
        g[last + j] = -2.0 * w_term[j] * x_f[j]
    for k in range(M):
        Q[k * blk + nx, k * blk + nx] = 2.0 * reg
    g[-1] = 1.0
    KKT = np.block([[Q, E.T], [E, np.zeros((m_E, m_E))]])
    return np.linalg.solve(KKT, np.concatenate([-g, d]))[:n_z]


# -- transcription layout --------------------------------------------------------

def test_problem_dimensions(kd_model):
    rib = straight_ribbon()
    cfg = OcpConfig(horizon_length=350.0, mesh_points=350)
    mesh = np.linspace(0.0, 350.0, 350)
    x0 = np.array([0.0, 0.0, 30.0, 0.0, 0.0, 0.0, 0.0])
    trans = Transcription(kd_model, rib, mesh, cfg, x_init=x0)
    assert trans.n_z == 350 * 9 + 1 == 3151
    assert trans.m_E == 350 * 7 + 1 == 2451
    assert trans.m_I == 350 * (kd_model.n_ineq + 2)


def test_defect_residual_by_hand():
    toy = LinearToy()
    rib = straight_ribbon(length=10.0, width=200.0)
    cfg = OcpConfig(horizon_length=10.0, mesh_points=3, half_width=0.0)
    mesh = np.array([0.0, 4.0])
    x_init = np.array([1.0, 2.0, 0.0])
    trans = Transcription(toy, rib, mesh, cfg, x_init=x_init)

    X = np.array([[1.0, 3.0], [2.0, 5.0], [0.0, 0.2]])
    U = np.array([[0.5, 1.5]])
    T = 0.25
    F = trans.dynamics(X, U)
    r = trans.eq_residual(X, U, T, F)

    # head pins node 0, one trapezoidal defect row block, tie row last
    assert r.shape == (2 * 3 + 1,)
    assert_allclose(r[:3], X[:, 0] - x_init, atol=1e-14)
    f0 = np.array([2.0, 0.5, 1.0])
    f1 = np.array([5.0, 1.5, 1.0])
    assert_allclose(r[3:6], X[:, 1] - X[:, 0] - 2.0 * (f0 + f1), atol=1e-14)
    assert r[-1] == pytest.approx(T - X[2, 1])


def test_mesh_must_increase():
    toy = LinearToy()
    rib = straight_ribbon(length=10.0, width=200.0)
    cfg = OcpConfig(horizon_length=10.0, mesh_points=3, half_width=0.0)
    with pytest.raises(ValidationError):
        Transcription(toy, rib, np.array([0.0, 5.0, 5.0]), cfg,
                      x_init=np.zeros(3))


def test_config_validation():
    with pytest.raises(ValidationError):
        OcpConfig(mesh_points=2).validate()
    with pytest.raises(ValidationError):
        OcpConfig(half_width=-0.1).validate()
    with pytest.raises(ValidationError):
        OcpConfig(terminal_weights=(1.0, 1.0)).validate()
    with pytest.raises(ValidationError):
        OcpConfig(horizon_length=0.0).validate()


# -- solver against a dense QP oracle --------------------------------------------

def test_linear_problem_matches_dense_kkt():
    M, L, reg = 25, 1.0, 1e-2
    toy = LinearToy()
    rib = straight_ribbon(length=L, width=200.0)
    cfg = OcpConfig(horizon_length=L, mesh_points=M, control_reg=reg,
                    half_width=0.0, kkt_tol=1e-9, cons_tol=1e-11,
                    max_iter=80)
    x_init = np.array([0.0, 0.0, 0.0])
    trans = Transcription(toy, rib, np.linspace(0.0, L, M), cfg,
                          x_init=x_init)
    sol = solve_nlp(trans)
    assert sol.converged

    z_star = toy_qp_solution(M, L, reg, x_init, toy.terminal_target(x_init),
                             toy.map_terminal_weights(None))
    z_sol = trans.pack(sol.states, sol.controls, sol.T)
    assert np.max(np.abs(z_sol - z_star)) < 1e-6


# -- quasi-steady-state envelope sanity ------------------------------------------

def test_qss_envelope_bands(qss):
    assert 12.0 < qss.ay_max_2d(10.0) < 17.0
    assert qss.ay_max_2d(60.0) > qss.ay_max_2d(20.0)
    assert 7.0 < qss.ax_max_2d(10.0) < 12.0
    # drive force fades with speed until the car can barely accelerate
    assert qss.ax_max_2d(80.0) < 0.25 * qss.ax_max_2d(20.0)
    assert -20.0 < qss.ax_min_2d(10.0) < -12.0
    assert qss.ax_min_2d(80.0) < qss.ax_min_2d(10.0)
    assert qss.s1 > 0.0
    assert qss.az_range[0] < 0.0 < qss.az_range[1]


# -- receding-horizon planning ---------------------------------------------------

def test_full_throttle_straight(kd_model, qss):
    rib = straight_ribbon(length=400.0)
    v0 = 30.0
    x0 = np.array([0.0, 0.0, v0, 0.0, 0.0, 0.0, 0.0])
    cfg = OcpConfig(horizon_length=350.0, mesh_points=120)
    sol = plan_step(kd_model, rib, 0.0, x0, cfg)

    assert sol.converged and not sol.degraded
    # flooring it must beat holding the entry speed by a wide margin
    assert sol.T < 0.8 * 350.0 / v0
    assert sol.T == pytest.approx(7.08, abs=0.15)
    v = sol.column("v_x")
    # the terminal pull drags the speed back down to the entry value
    assert abs(v[-1] - v0) < 1.0
    assert v.max() > 55.0
    # mid-horizon the plan leans on the traction cap without crossing it
    gap = sol.column("a_x") - qss.ax_max_2d(v)
    assert gap[20:100].max() < 1e-3
    assert gap[20:100].max() > -0.5
    assert not np.any(np.isnan(sol.states))


def test_plan_step_warm_start(kd_model, banked_circuit):
    cfg = OcpConfig(horizon_length=250.0, mesh_points=90, half_width=0.9)
    x0 = np.array([0.0, 0.0, 22.0, 0.0, 0.0, 0.0, 0.0])
    cold = plan_step(kd_model, banked_circuit, 0.0, x0, cfg)
    assert cold.converged

    x1, _ = cold.sample(3.0)
    warm = plan_step(kd_model, banked_circuit, 3.0, x1, cfg, previous=cold)
    assert warm.converged and not warm.degraded
    assert warm.mesh[0] == pytest.approx(3.0)
    # a good primal guess must not wreck the barrier schedule
    assert warm.diagnostics["iterations"] <= \
        cold.diagnostics["iterations"] + 15


def test_plan_step_carries_over_on_failure(kd_model, banked_circuit):
    cfg = OcpConfig(horizon_length=250.0, mesh_points=90, half_width=0.9)
    x0 = np.array([0.0, 0.0, 22.0, 0.0, 0.0, 0.0, 0.0])
    good = plan_step(kd_model, banked_circuit, 0.0, x0, cfg)

    starved = OcpConfig(horizon_length=250.0, mesh_points=90,
                        half_width=0.9, max_iter=2)
    x1, _ = good.sample(5.0)
    carried = plan_step(kd_model, banked_circuit, 5.0, x1, starved,
                        previous=good)
    assert carried.degraded and not carried.converged
    assert carried.diagnostics.get("carried_over") is True
    assert carried.mesh[0] == pytest.approx(5.0)
    # the carried plan is the old one shifted, so it starts where the car is
    assert_allclose(carried.states[:, 0], np.where(
        np.arange(7) == kd_model.time_index, 0.0, x1), atol=1e-9)


def test_plan_step_rejects_exhausted_horizon(kd_model):
    rib = straight_ribbon(length=400.0)
    x0 = np.array([0.0, 0.0, 30.0, 0.0, 0.0, 0.0, 0.0])
    with pytest.raises(SolverError):
        plan_step(kd_model, rib, 395.0, x0, OcpConfig(horizon_length=350.0))


def test_vehicle_wider_than_track(kd_model):
    rib = straight_ribbon(length=400.0, width=8.0)
    x0 = np.array([0.0, 0.0, 30.0, 0.0, 0.0, 0.0, 0.0])
    cfg = OcpConfig(horizon_length=350.0, mesh_points=60, half_width=5.0)
    with pytest.raises(SolverError, match="does not fit"):
        plan_step(kd_model, rib, 0.0, x0, cfg)


# -- minimum lap time ------------------------------------------------------------

def test_circle_lap_matches_closed_form():
    # on a circle with a flat-speed lateral cap the optimum hugs the inside
    # edge at constant speed; the lap time then has a closed form
    radius, width, half = 60.0, 8.0, 0.9
    circle = circle_ribbon(radius, width)
    ay_cap = 11.0
    dia = DiamondGgv(v_grid=np.array([5.0, 90.0]),
                     ay_max=np.array([ay_cap, ay_cap]),
                     ax_max=np.array([8.0, 8.0]),
                     ax_min=np.array([-14.0, -14.0]))
    cfg = OcpConfig(mesh_points=160, half_width=half, kkt_tol=1e-7,
                    cons_tol=1e-8)
    sol = solve_mlt(PointPlanModel(dia), circle, cfg)

    n_max = width / 2 - half
    T_star = 2 * np.pi * np.sqrt((radius - n_max) / ay_cap)
    assert sol.T == pytest.approx(T_star, rel=1e-3)
    n = sol.column("n")
    assert n.max() < n_max + 1e-6
    assert n.min() > n_max - 0.02

    # growing the whole envelope can only speed the lap up
    dia_big = DiamondGgv(v_grid=dia.v_grid, ay_max=1.3 * dia.ay_max,
                         ax_max=1.3 * dia.ax_max, ax_min=1.3 * dia.ax_min)
    sol_big = solve_mlt(PointPlanModel(dia_big), circle, cfg)
    assert sol_big.T < sol.T


def test_lap_time_ignores_start_line():
    circle = circle_ribbon()
    dia = DiamondGgv(v_grid=np.array([5.0, 90.0]),
                     ay_max=np.array([11.0, 11.0]),
                     ax_max=np.array([8.0, 8.0]),
                     ax_min=np.array([-14.0, -14.0]))
    cfg = OcpConfig(mesh_points=160, half_width=0.9, kkt_tol=1e-7,
                    cons_tol=1e-8)
    a = solve_mlt(PointPlanModel(dia), circle, cfg)
    b = solve_mlt(PointPlanModel(dia), circle, cfg, zeta0=37.0)
    assert b.T == pytest.approx(a.T, rel=1e-8)


def test_lap_time_needs_closed_track(kd_model):
    with pytest.raises(ValidationError):
        solve_mlt(kd_model, straight_ribbon(), OcpConfig(mesh_points=60))


def test_banking_speeds_up_the_lap(kd_model, banked_circuit, banked_lap):
    cfg = OcpConfig(mesh_points=260, half_width=0.9)
    flat_lap = solve_mlt(kd_model, flatten(banked_circuit), cfg)
    assert banked_lap.T == pytest.approx(17.81, abs=0.25)
    # banking props up cornering speed, worth well over a second here
    assert banked_lap.T < flat_lap.T - 1.0


def test_lap_time_stable_under_mesh_refinement(kd_model, banked_circuit,
                                               banked_lap):
    fine = solve_mlt(kd_model, banked_circuit,
                     OcpConfig(mesh_points=520, half_width=0.9))
    assert fine.T == pytest.approx(banked_lap.T, rel=1e-3)


# -- solution container ----------------------------------------------------------

def test_solution_round_trip(tmp_path, kd_model):
    rib = straight_ribbon(length=400.0)
    x0 = np.array([0.0, 0.0, 30.0, 0.0, 0.0, 0.0, 0.0])
    cfg = OcpConfig(horizon_length=350.0, mesh_points=60)
    sol = plan_step(kd_model, rib, 0.0, x0, cfg)

    frame = sol.to_frame()
    assert list(frame.columns) == ["zeta"] + list(sol.state_names) \
        + list(sol.control_names)
    assert len(frame) == 60

    path = tmp_path / "plan.csv"
    sol.to_csv(path)
    back = pd.read_csv(path)
    assert_allclose(back["v_x"].to_numpy(), sol.column("v_x"), rtol=1e-12)

    x_mid, u_mid = sol.sample(0.5 * (sol.mesh[3] + sol.mesh[4]))
    assert_allclose(x_mid, 0.5 * (sol.states[:, 3] + sol.states[:, 4]),
                    atol=1e-12)
    assert u_mid.shape == (2,)
    # sampling clamps at the mesh ends instead of extrapolating
    x_far, _ = sol.sample(1e9)
    assert_allclose(x_far, sol.states[:, -1], atol=1e-12)
    with pytest.raises(KeyError):
        sol.column("nope")
