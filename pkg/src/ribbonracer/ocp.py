"""Minimum-time trajectory optimization over the road ribbon.

Station is the independent variable.  Time rides along as a state and the
horizon duration enters the cost through a free scalar variable, so one
transcription covers both the receding-horizon planner (first node pinned
to the measured state) and the closed minimum-lap-time problem (trajectory
closed on itself, time zeroed at the start line).

The nonlinear program uses trapezoidal collocation on a fixed mesh and is
solved by a primal-dual interior-point method with a Gauss-Newton Hessian.
Model derivatives come from central finite differences, vectorized across
the whole mesh, so plan models only have to provide plain evaluations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import SolverError, ValidationError
from .kdmodel import V_MIN
from .planmodels import MeshRoad, sample_road


@dataclass
class OcpConfig:
    """Planner knobs.

    ``terminal_weights`` follows the published state order (yaw rate,
    lateral velocity, speed, longitudinal acceleration, station, offset,
    heading); the station entry is meaningless once station is the
    independent variable and is ignored.
    """

    horizon_length: float = 300.0
    mesh_points: int = 350
    time_weight: float = 1.0
    terminal_weights: tuple = (1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0)
    control_reg: float = 1e-4
    half_width: float = 0.9
    kkt_tol: float = 1e-5
    cons_tol: float = 1e-6
    max_iter: int = 200
    warm_start: bool = True

    def validate(self):
        if self.mesh_points < 3:
            raise ValidationError("mesh needs at least 3 points")
        if self.horizon_length <= 0.0:
            raise ValidationError("horizon length must be positive")
        if self.half_width < 0.0:
            raise ValidationError("vehicle half width cannot be negative")
        if len(self.terminal_weights) != 7:
            raise ValidationError("terminal_weights must list all 7 states")
        if min(self.time_weight, self.control_reg, self.kkt_tol,
               self.cons_tol) < 0.0:
            raise ValidationError("weights and tolerances cannot be negative")


@dataclass
class PlanSolution:
    """A solved (or carried-over) plan on a station mesh."""

    mesh: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    state_names: tuple
    control_names: tuple
    T: float
    converged: bool
    degraded: bool = False
    diagnostics: dict = field(default_factory=dict)

    def column(self, name):
        if name in self.state_names:
            return self.states[self.state_names.index(name)]
        if name in self.control_names:
            return self.controls[self.control_names.index(name)]
        raise KeyError(name)

    def sample(self, zeta):
        """Interpolate states and controls at a station (clamped to the mesh)."""
        z = np.clip(zeta, self.mesh[0], self.mesh[-1])
        x = np.array([np.interp(z, self.mesh, row) for row in self.states])
        u = np.array([np.interp(z, self.mesh, row) for row in self.controls])
        return x, u

    def to_frame(self) -> pd.DataFrame:
        data = {"zeta": self.mesh}
        for i, name in enumerate(self.state_names):
            data[name] = self.states[i]
        for i, name in enumerate(self.control_names):
            data[name] = self.controls[i]
        return pd.DataFrame(data)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def _norminf(a):
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def _max_step(x, dx, tau=0.995):
    neg = dx < -1e-300
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-tau * x[neg] / dx[neg])))


class Transcription:
    """Collocated NLP for one model on one mesh.

    With ``x_init`` the first node is pinned (receding-horizon mode); with
    ``cyclic=True`` the trajectory closes on itself around a full lap and
    the time state is zeroed at the first node instead.  Exactly one of the
    two must be given.
    """

    def __init__(self, model, ribbon, mesh, config: OcpConfig,
                 x_init=None, cyclic=False):
        if (x_init is None) == (not cyclic):
            raise ValidationError("give either x_init or cyclic=True")
        config.validate()
        self.model = model
        self.config = config
        self.cyclic = bool(cyclic)
        self.mesh = np.asarray(mesh, dtype=float)
        self.road = sample_road(ribbon, self.mesh)
        self.M = M = len(self.mesh)
        self.nx = nx = len(model.state_names)
        self.nu = nu = len(model.control_names)
        self.blk = nx + nu
        self.h = np.diff(self.mesh)
        if np.any(self.h <= 0.0):
            raise ValidationError("mesh stations must increase strictly")
        self.h_wrap = ribbon.length - (self.mesh[-1] - self.mesh[0]) \
            if cyclic else 0.0
        if cyclic and (not ribbon.closed or self.h_wrap <= 0.0):
            raise ValidationError("cyclic transcription needs a closed track "
                                  "and a mesh inside one lap")

        w = config.half_width
        self.n_lo = w - self.road.d_right
        self.n_hi = self.road.d_left - w
        if np.any(self.n_lo > self.n_hi - 1e-9):
            k = int(np.argmax(self.n_lo - self.n_hi))
            raise SolverError(
                f"vehicle of half width {w:g} m does not fit the track near "
                f"station {self.mesh[k]:.1f} m")

        self.m_all = model.n_ineq + 2
        self.m_I = M * self.m_all
        self.m_E = M * nx + 1
        self.n_z = M * self.blk + 1

        if x_init is not None:
            self.x_init = np.asarray(x_init, dtype=float).copy()
            self.x_init[model.time_index] = 0.0
            self.relax = self._node0_relax()
        else:
            self.x_init = None
            self.relax = None

        if cyclic:
            self.w_term = np.zeros(nx)
            self.x_f = np.zeros(nx)
        else:
            self.w_term = model.map_terminal_weights(config.terminal_weights)
            self.x_f = model.terminal_target(self.x_init)

        self._eps_x = 4e-6 * np.maximum(np.asarray(model.state_scale), 1.0)
        self._eps_u = 4e-6 * np.maximum(np.asarray(model.control_scale), 1.0)
        # wider steps for second differences, where roundoff bites harder
        self._eps2_x = 2e-4 * np.maximum(np.asarray(model.state_scale), 1.0)
        self._eps2_u = 2e-4 * np.maximum(np.asarray(model.control_scale), 1.0)

    # -- variable packing -------------------------------------------------------

    def split(self, z):
        body = z[:-1].reshape(self.M, self.blk).T
        return body[:self.nx], body[self.nx:], float(z[-1])

    def pack(self, X, U, T):
        z = np.empty(self.n_z)
        z[:-1] = np.vstack([X, U]).T.ravel()
        z[-1] = T
        return z

    # -- residuals --------------------------------------------------------------

    def _node0_relax(self):
        road0 = MeshRoad(*(np.asarray(a)[:1] for a in self.road))
        c = self.model.inequalities(self.x_init[:, None],
                                    np.zeros((self.nu, 1)), road0)
        n0 = self.x_init[self.model.n_index]
        track = np.array([[n0 - self.n_hi[0]], [self.n_lo[0] - n0]])
        c0 = np.vstack([c, track]).ravel()
        return np.maximum(c0 + 1e-8, 0.0)

    def dynamics(self, X, U):
        return self.model.f_zeta(X, U, self.road)

    def eq_residual(self, X, U, T, F):
        ti = self.model.time_index
        d = X[:, 1:] - X[:, :-1] - (self.h / 2.0) * (F[:, :-1] + F[:, 1:])
        if self.cyclic:
            hw = self.h_wrap
            head = X[:, 0] - X[:, -1] - (hw / 2.0) * (F[:, -1] + F[:, 0])
            head[ti] = X[ti, 0]
            tie = T - X[ti, -1] - (hw / 2.0) * (F[ti, -1] + F[ti, 0])
        else:
            head = X[:, 0] - self.x_init
            tie = T - X[ti, -1]
        return np.concatenate([head, d.T.ravel(), [tie]])

    def ineq_block(self, X, U):
        c = self.model.inequalities(X, U, self.road)
        n = X[self.model.n_index]
        C = np.vstack([c, n - self.n_hi, self.n_lo - n])
        if self.relax is not None:
            C[:, 0] -= self.relax
        return C

    def ineq(self, X, U):
        return self.ineq_block(X, U).T.ravel()

    # -- cost -------------------------------------------------------------------

    def cost(self, X, U, T):
        us = np.asarray(self.model.control_scale)[:, None]
        val = self.config.time_weight * T
        val += float(np.sum(self.w_term * (X[:, -1] - self.x_f) ** 2))
        val += self.config.control_reg * float(np.sum((U / us) ** 2))
        return val

    def cost_grad(self, X, U, T):
        us = np.asarray(self.model.control_scale)[:, None]
        Gx = np.zeros_like(X)
        Gx[:, -1] = 2.0 * self.w_term * (X[:, -1] - self.x_f)
        Gu = 2.0 * self.config.control_reg * U / us ** 2
        return self.pack(Gx, Gu, self.config.time_weight)

    def cost_hess_diag(self):
        us = np.asarray(self.model.control_scale)[:, None]
        Hx = np.zeros((self.nx, self.M))
        Hx[:, -1] = 2.0 * self.w_term
        Hu = np.broadcast_to(2.0 * self.config.control_reg / us ** 2,
                             (self.nu, self.M))
        return self.pack(Hx, Hu, 0.0)

    # -- derivatives ------------------------------------------------------------

    def fd_dynamics(self, X, U):
        nx, nu, M = self.nx, self.nu, self.M
        A = np.empty((M, nx, nx))
        B = np.empty((M, nx, nu))
        for i in range(nx):
            e = self._eps_x[i]
            Xp = X.copy(); Xp[i] += e
            Xm = X.copy(); Xm[i] -= e
            A[:, :, i] = ((self.dynamics(Xp, U) - self.dynamics(Xm, U)).T
                          / (2.0 * e))
        for i in range(nu):
            e = self._eps_u[i]
            Up = U.copy(); Up[i] += e
            Um = U.copy(); Um[i] -= e
            B[:, :, i] = ((self.dynamics(X, Up) - self.dynamics(X, Um)).T
                          / (2.0 * e))
        return A, B

    def fd_ineq(self, X, U):
        nx, nu, M, m = self.nx, self.nu, self.M, self.m_all
        Cx = np.empty((M, m, nx))
        Cu = np.empty((M, m, nu))
        for i in range(nx):
            e = self._eps_x[i]
            Xp = X.copy(); Xp[i] += e
            Xm = X.copy(); Xm[i] -= e
            Cx[:, :, i] = ((self.ineq_block(Xp, U)
                            - self.ineq_block(Xm, U)).T / (2.0 * e))
        for i in range(nu):
            e = self._eps_u[i]
            Up = U.copy(); Up[i] += e
            Um = U.copy(); Um[i] -= e
            Cu[:, :, i] = ((self.ineq_block(X, Up)
                            - self.ineq_block(X, Um)).T / (2.0 * e))
        return Cx, Cu

    def lag_curv_diag(self, X, U, lam):
        """Diagonal curvature of the defect rows, weighted by their duals.

        A Gauss-Newton Hessian has no curvature at all for the running-time
        objective (it is linear in the time states), so near a solution the
        Newton iteration can diverge along speed wiggles in coast stretches.
        The missing term lives in the constraint curvature; its diagonal is
        cheap to measure by differencing the adjoint-weighted dynamics.
        Negative entries are dropped to keep the condensed system positive
        semidefinite.
        """
        nx, nu, M = self.nx, self.nu, self.M
        lam_d = lam[nx:-1].reshape(M - 1, nx)
        Wgt = np.zeros((nx, M))
        Wgt[:, :-1] -= (self.h[:, None] * lam_d).T / 2.0
        Wgt[:, 1:] -= (self.h[:, None] * lam_d).T / 2.0
        if self.cyclic:
            ti = self.model.time_index
            head = lam[:nx].copy()
            head[ti] = 0.0
            Wgt[:, 0] -= self.h_wrap / 2.0 * head
            Wgt[:, -1] -= self.h_wrap / 2.0 * head
            Wgt[ti, 0] -= self.h_wrap / 2.0 * lam[-1]
            Wgt[ti, -1] -= self.h_wrap / 2.0 * lam[-1]

        def psi(Xa, Ua):
            return np.sum(Wgt * self.dynamics(Xa, Ua), axis=0)

        base = psi(X, U)
        Hx = np.zeros((nx, M))
        Hu = np.zeros((nu, M))
        for i in range(nx):
            e = self._eps2_x[i]
            Xp = X.copy(); Xp[i] += e
            Xm = X.copy(); Xm[i] -= e
            Hx[i] = (psi(Xp, U) - 2.0 * base + psi(Xm, U)) / e ** 2
        for i in range(nu):
            e = self._eps2_u[i]
            Up = U.copy(); Up[i] += e
            Um = U.copy(); Um[i] -= e
            Hu[i] = (psi(X, Up) - 2.0 * base + psi(X, Um)) / e ** 2
        return np.clip(self.pack(Hx, Hu, 0.0), 0.0, 1e6)

    def eq_jacobian(self, A, B):
        nx, nu, M = self.nx, self.nu, self.M
        ti = self.model.time_index
        xb = np.arange(M) * self.blk
        ub = xb + nx
        IX = np.arange(nx)
        rows, cols, data = [], [], []

        def stamp(r, c, d):
            rr, cc, dd = np.broadcast_arrays(r, c, d)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            data.append(dd.ravel())

        # head block: identity at the first node in both modes (for the
        # cyclic head the time row reduces to t_0 itself)
        stamp(IX, xb[0] + IX, np.ones(nx))
        if self.cyclic:
            hw = self.h_wrap
            mask = np.ones(nx)
            mask[ti] = 0.0
            A0m = mask[:, None] * A[0]
            B0m = mask[:, None] * B[0]
            ALm = mask[:, None] * A[-1]
            BLm = mask[:, None] * B[-1]
            stamp(IX, xb[-1] + IX, -mask)
            stamp(IX[:, None], xb[0] + IX[None, :], -hw / 2.0 * A0m)
            stamp(IX[:, None], ub[0] + np.arange(nu)[None, :], -hw / 2.0 * B0m)
            stamp(IX[:, None], xb[-1] + IX[None, :], -hw / 2.0 * ALm)
            stamp(IX[:, None], ub[-1] + np.arange(nu)[None, :], -hw / 2.0 * BLm)

        # defect blocks, vectorized over intervals
        K = M - 1
        hk = self.h[:, None, None]
        r_def = (nx + np.arange(K)[:, None, None] * nx
                 + IX[None, :, None])
        eye = np.eye(nx)[None]
        stamp(np.broadcast_to(r_def, (K, nx, nx)),
              xb[:-1, None, None] + IX[None, None, :],
              -eye - hk / 2.0 * A[:-1])
        stamp(np.broadcast_to(r_def, (K, nx, nx)),
              xb[1:, None, None] + IX[None, None, :],
              eye - hk / 2.0 * A[1:])
        stamp(np.broadcast_to(r_def[..., :1], (K, nx, nu)),
              ub[:-1, None, None] + np.arange(nu)[None, None, :],
              -hk / 2.0 * B[:-1])
        stamp(np.broadcast_to(r_def[..., :1], (K, nx, nu)),
              ub[1:, None, None] + np.arange(nu)[None, None, :],
              -hk / 2.0 * B[1:])

        # terminal-time tie row
        rt = self.m_E - 1
        stamp(rt, self.n_z - 1, 1.0)
        stamp(rt, xb[-1] + ti, -1.0)
        if self.cyclic:
            hw = self.h_wrap
            stamp(np.full(nx, rt), xb[-1] + IX, -hw / 2.0 * A[-1][ti])
            stamp(np.full(nu, rt), ub[-1] + np.arange(nu), -hw / 2.0 * B[-1][ti])
            stamp(np.full(nx, rt), xb[0] + IX, -hw / 2.0 * A[0][ti])
            stamp(np.full(nu, rt), ub[0] + np.arange(nu), -hw / 2.0 * B[0][ti])

        J = sp.coo_matrix((np.concatenate(data),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.m_E, self.n_z))
        return J.tocsr()

    def ineq_jacobian(self, Cx, Cu):
        nx, nu, M, m = self.nx, self.nu, self.M, self.m_all
        xb = np.arange(M) * self.blk
        r_node = (np.arange(M)[:, None, None] * m
                  + np.arange(m)[None, :, None])
        rows = [np.broadcast_to(r_node, (M, m, nx)).ravel(),
                np.broadcast_to(r_node, (M, m, nu)).ravel()]
        cols = [np.broadcast_to(xb[:, None, None] + np.arange(nx),
                                (M, m, nx)).ravel(),
                np.broadcast_to(xb[:, None, None] + nx + np.arange(nu),
                                (M, m, nu)).ravel()]
        data = [Cx.ravel(), Cu.ravel()]
        J = sp.coo_matrix((np.concatenate(data),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.m_I, self.n_z))
        return J.tocsr()


# ---------------------------------------------------------------------------
# initial guesses
# ---------------------------------------------------------------------------


def _qss_speeds(model, road, mesh, cyclic, h_wrap, v_start=None):
    """Curvature-capped speed profile with acceleration-limited passes."""
    kap = np.abs(road.kappa) + 1e-9
    v = np.full(len(mesh), 40.0)
    for _ in range(15):
        ay, _, _ = model.envelope_caps(v)
        v_curve = np.sqrt(np.maximum(0.85 * ay, 0.5) / kap)
        v = 0.5 * v + 0.5 * np.minimum(v_curve, 85.0)
    v = np.maximum(v, V_MIN + 0.5)
    if v_start is not None:
        # pin before the passes so the profile accelerates away from the
        # actual start speed instead of jumping to the curve cap
        v[0] = max(float(v_start), V_MIN + 0.2)

    h = np.diff(mesh)
    rounds = 2 if cyclic else 1

    def cap_up(speed):
        _, up, _ = model.envelope_caps(np.array([speed]))
        return max(0.85 * float(up[0]), 0.3)

    def cap_dn(speed):
        _, _, dn = model.envelope_caps(np.array([speed]))
        return max(0.85 * abs(float(dn[0])), 0.3)

    # the traction cap collapses near top speed, so it has to be evaluated
    # at the running speed of each pass, not at the pre-pass profile
    for _ in range(rounds):
        for k in range(len(h)):
            v[k + 1] = min(v[k + 1],
                           np.sqrt(v[k] ** 2 + 2 * cap_up(v[k]) * h[k]))
        if cyclic:
            v[0] = min(v[0], np.sqrt(v[-1] ** 2 + 2 * cap_up(v[-1]) * h_wrap))
            v[-1] = min(v[-1], np.sqrt(v[0] ** 2 + 2 * cap_dn(v[0]) * h_wrap))
        for k in range(len(h) - 1, -1, -1):
            v[k] = min(v[k], np.sqrt(v[k + 1] ** 2 + 2 * cap_dn(v[k + 1]) * h[k]))
    return np.maximum(v, V_MIN + 0.2)


def _initial_guess(trans: Transcription, v_guess=None):
    model, road, mesh = trans.model, trans.road, trans.mesh
    v_start = trans.x_init[model.v_index] if trans.x_init is not None else None
    if v_guess is not None:
        v = np.full(trans.M, max(float(v_guess), V_MIN + 0.5))
        if v_start is not None:
            v[0] = max(float(v_start), V_MIN + 0.2)
    else:
        v = _qss_speeds(model, road, mesh, trans.cyclic, trans.h_wrap,
                        v_start=v_start)

    t = np.zeros(trans.M)
    vm = 0.5 * (v[:-1] + v[1:])
    t[1:] = np.cumsum(trans.h / vm)
    X, U = model.fill_guess(v, t, road, mesh)

    # keep the lateral offset strictly inside the drivable band
    margin = np.minimum(0.25 * (trans.n_hi - trans.n_lo), 0.1)
    X[model.n_index] = np.clip(X[model.n_index],
                               trans.n_lo + margin, trans.n_hi - margin)
    if trans.x_init is not None:
        X[:, 0] = trans.x_init
    T = t[-1] + (trans.h_wrap / v[-1] if trans.cyclic else 0.0)
    return trans.pack(X, U, T)


def _shift_onto(sol: PlanSolution, model, mesh_new):
    """Interpolate a previous plan onto a new mesh, extending past its end."""
    X = np.vstack([np.interp(mesh_new, sol.mesh, row) for row in sol.states])
    U = np.vstack([np.interp(mesh_new, sol.mesh, row) for row in sol.controls])
    ti = model.time_index
    X[ti] -= X[ti, 0]
    beyond = mesh_new > sol.mesh[-1]
    if beyond.any():
        v_last = max(float(sol.states[model.v_index, -1]), V_MIN)
        X[ti, beyond] += (mesh_new[beyond] - sol.mesh[-1]) / v_last
    return X, U, float(X[ti, -1])


# ---------------------------------------------------------------------------
# interior-point solve
# ---------------------------------------------------------------------------


def solve_nlp(trans: Transcription, z0=None, mu0=1e-3,
              verbose=False) -> PlanSolution:
    """Solve the transcribed program from a packed guess (built if omitted)."""
    cfg = trans.config
    started = time.perf_counter()
    z = (z0 if z0 is not None else _initial_guess(trans)).astype(float).copy()

    X, U, T = trans.split(z)
    c_I = trans.ineq(X, U)
    s = np.maximum(-c_I, 1e-3)
    mu = float(mu0)
    mu_min = cfg.kkt_tol / 20.0
    nu_d = np.maximum(mu / s, 1e-10)
    lam = np.zeros(trans.m_E)
    delta = 1e-8
    delta_c = 1e-8
    filt = []
    theta_max = theta_min = None
    stalls = bumps = 0
    converged = False
    it = 0
    dual = viol = compn = np.inf

    for it in range(1, cfg.max_iter + 1):
        X, U, T = trans.split(z)
        F = trans.dynamics(X, U)
        r_E = trans.eq_residual(X, U, T, F)
        c_I = trans.ineq(X, U)
        r_I = c_I + s
        A, B = trans.fd_dynamics(X, U)
        J_E = trans.eq_jacobian(A, B)
        Cx, Cu = trans.fd_ineq(X, U)
        J_I = trans.ineq_jacobian(Cx, Cu)
        g = trans.cost_grad(X, U, T)
        r_d = g + J_E.T @ lam + J_I.T @ nu_d
        comp = s * nu_d

        sd = max(1.0, (np.abs(lam).sum() + np.abs(nu_d).sum())
                 / (trans.m_E + trans.m_I) / 100.0)
        dual = _norminf(r_d) / sd
        viol = max(_norminf(r_E), max(float(c_I.max(initial=0.0)), 0.0))
        compn = _norminf(comp) / sd
        if dual <= cfg.kkt_tol and viol <= cfg.cons_tol \
                and compn <= cfg.kkt_tol:
            converged = True
            break
        err_mu = max(dual, viol, _norminf(comp - mu) / sd)
        if err_mu <= 3.0 * mu and mu > mu_min:
            mu = max(mu / 5.0, mu_min)
            # each barrier subproblem gets a fresh filter
            filt.clear()
            theta_max = None

        # condensed primal-dual step
        W = trans.cost_hess_diag() + trans.lag_curv_diag(X, U, lam)
        rhs1 = -(r_d + J_I.T @ ((mu - comp + nu_d * r_I) / s))
        step = lu = None
        for _ in range(6):
            H = sp.diags(W + delta) + J_I.T @ sp.diags(nu_d / s) @ J_I
            K = sp.bmat([[H, J_E.T],
                         [J_E, -delta_c * sp.eye(trans.m_E)]], format="csc")
            try:
                lu = splu(K)
                cand = lu.solve(np.concatenate([rhs1, -r_E]))
            except RuntimeError:
                delta = max(delta * 100.0, 1e-6)
                bumps += 1
                continue
            if np.all(np.isfinite(cand)):
                step = cand
                break
            delta = max(delta * 100.0, 1e-6)
            bumps += 1
        if step is None:
            break
        dz = step[:trans.n_z]
        dlam = step[trans.n_z:]
        cap = 100.0 * (1.0 + _norminf(z))
        if _norminf(dz) > cap:
            shrink = cap / _norminf(dz)
            dz = dz * shrink
            dlam = dlam * shrink
        ds = -r_I - J_I @ dz
        dnu = (mu - comp - nu_d * ds) / s

        alpha_p0 = _max_step(s, ds)
        alpha_d = _max_step(nu_d, dnu)
        theta_k = float(np.abs(r_E).sum() + np.abs(r_I).sum())
        phi_k = float(trans.cost(X, U, T)) - mu * float(np.log(s).sum())
        dphi = float(g @ dz) - mu * float((ds / s).sum())
        if theta_max is None:
            theta_max = 1e4 * max(1.0, theta_k)
            theta_min = 1e-4 * max(1.0, theta_k)
        flat_tol = 1e-9 * (1.0 + abs(phi_k))

        def barrier_at(z_t, s_t):
            X_t, U_t, T_t = trans.split(z_t)
            F_t = trans.dynamics(X_t, U_t)
            r_E_t = trans.eq_residual(X_t, U_t, T_t, F_t)
            c_I_t = trans.ineq(X_t, U_t)
            theta_t = float(np.abs(r_E_t).sum() + np.abs(c_I_t + s_t).sum())
            with np.errstate(divide="ignore", invalid="ignore"):
                phi_t = float(trans.cost(X_t, U_t, T_t)) \
                    - mu * float(np.log(s_t).sum())
            return theta_t, phi_t, r_E_t

        def acceptable(theta_t, phi_t, alpha):
            """Filter test; returns (accepted, step counts as f-type)."""
            if not np.isfinite(phi_t) or theta_t > theta_max:
                return False, False
            for tj, fj in filt:
                if theta_t >= tj and phi_t >= fj:
                    return False, False
            switching = dphi < 0.0 and \
                alpha * (-dphi) ** 2.3 > theta_k ** 1.1
            if switching and theta_k <= theta_min:
                return (phi_t <= phi_k + 1e-4 * alpha * dphi + flat_tol,
                        True)
            ok = theta_t <= (1.0 - 1e-5) * theta_k \
                or phi_t <= phi_k - 1e-5 * theta_k + flat_tol
            return ok, False

        alpha = alpha_p0
        accepted = ftype = False
        z_new = s_new = None
        for trial in range(30):
            z_t = z + alpha * dz
            s_t = s + alpha * ds
            theta_t, phi_t, r_E_t = barrier_at(z_t, s_t)
            accepted, ftype = acceptable(theta_t, phi_t, alpha)
            if accepted:
                z_new, s_new = z_t, s_t
                break
            if trial == 0 and theta_t >= theta_k:
                # A near-full step often fails only through the curvature the
                # defects pick up along it.  Re-solve the same factorization
                # against the trial point's residuals before shortening.
                corr = lu.solve(np.concatenate([np.zeros(trans.n_z), -r_E_t]))
                dz_c = corr[:trans.n_z]
                ds_c = -(trans.ineq(*trans.split(z_t)[:2]) + s_t) - J_I @ dz_c
                b = min(1.0, _max_step(s_t, ds_c))
                z_c = z_t + b * dz_c
                s_c = np.maximum(s_t + b * ds_c, 1e-300)
                theta_c, phi_c, _ = barrier_at(z_c, s_c)
                accepted, ftype = acceptable(theta_c, phi_c, alpha)
                if accepted:
                    z_new, s_new = z_c, s_c
                    break
            alpha *= 0.5
        if not accepted:
            stalls += 1
            alpha = alpha_d = 0.0
            # damp the next direction rather than re-trying the same one
            delta = min(max(delta * 10.0, 1e-6), 1e-2)
            if stalls >= 5:
                break
        else:
            stalls = 0
            if not ftype:
                # block returning to this corner of (violation, objective)
                filt.append(((1.0 - 1e-5) * theta_k,
                             phi_k - 1e-5 * theta_k))
            z = z_new
            s = np.maximum(s_new, 1e-300)
            delta = max(delta / 10.0, 1e-8)
        if verbose:
            print(f"  it {it:3d} mu={mu:.1e} dual={dual:.2e} viol={viol:.2e} "
                  f"comp={compn:.2e} alpha={alpha:.2e} "
                  f"|dz|={_norminf(dz):.2e}")
        # multipliers move with the primal step; a dual step taken alone
        # breaks the linearized stationarity the direction was built from
        lam = lam + alpha * dlam
        nu_d = np.maximum(nu_d + min(alpha, alpha_d) * dnu, 1e-300)

    X, U, T = trans.split(z)
    diag = {"iterations": it, "kkt": float(dual), "violation": float(viol),
            "complementarity": float(compn), "mu": float(mu),
            "mesh_points": trans.M, "factorization_bumps": bumps,
            "cpu_s": time.perf_counter() - started}
    return PlanSolution(mesh=trans.mesh.copy(), states=X.copy(),
                        controls=U.copy(), state_names=trans.model.state_names,
                        control_names=trans.model.control_names, T=float(T),
                        converged=converged, diagnostics=diag)


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def solve_mlt(model, ribbon, config: OcpConfig = None,
              v_guess=None, zeta0=0.0) -> PlanSolution:
    """Minimum lap time around a closed track, counted from ``zeta0``."""
    cfg = config if config is not None else OcpConfig()
    if not ribbon.closed:
        raise ValidationError("minimum-lap-time needs a closed track")
    mesh = zeta0 + np.linspace(0.0, ribbon.length, cfg.mesh_points,
                               endpoint=False)
    trans = Transcription(model, ribbon, mesh,
                          replace(cfg, terminal_weights=(0.0,) * 7),
                          cyclic=True)
    z0 = _initial_guess(trans, v_guess=v_guess)
    sol = solve_nlp(trans, z0)
    if not sol.converged:
        raise SolverError(
            "lap-time optimization did not converge "
            f"(kkt {sol.diagnostics['kkt']:.2e}, "
            f"violation {sol.diagnostics['violation']:.2e})")
    return sol


def plan_step(model, ribbon, zeta_now, x_now, config: OcpConfig = None,
              previous: PlanSolution = None) -> PlanSolution:
    """One receding-horizon replan from the measured model state.

    On convergence returns the fresh plan.  If the solve fails and a
    previous plan exists, that plan is shifted onto the new horizon and
    returned with the ``degraded`` flag set, so the pilot always has a
    reference to track.
    """
    cfg = config if config is not None else OcpConfig()
    zeta_now = float(zeta_now)
    if ribbon.closed:
        end = zeta_now + cfg.horizon_length
    else:
        end = min(zeta_now + cfg.horizon_length, ribbon.length)
        if end - zeta_now < max(10.0, 0.02 * cfg.horizon_length):
            raise SolverError("horizon ran off the end of the open track")
    mesh = np.linspace(zeta_now, end, cfg.mesh_points)
    x_now = np.asarray(x_now, dtype=float)
    trans = Transcription(model, ribbon, mesh, cfg, x_init=x_now)

    if previous is not None and cfg.warm_start:
        X, U, T = _shift_onto(previous, model, mesh)
        X[:, 0] = trans.x_init
        z0 = trans.pack(X, U, T)
        # a converged plan sits on the envelope boundary, which is a poor
        # start for a small barrier parameter; keep the default schedule
        sol = solve_nlp(trans, z0)
    else:
        sol = solve_nlp(trans, _initial_guess(trans))
    if sol.converged or previous is None:
        return sol

    X, U, T = _shift_onto(previous, model, mesh)
    diag = dict(sol.diagnostics)
    diag["carried_over"] = True
    return PlanSolution(mesh=mesh, states=X, controls=U,
                        state_names=model.state_names,
                        control_names=model.control_names, T=T,
                        converged=False, degraded=True, diagnostics=diag)
