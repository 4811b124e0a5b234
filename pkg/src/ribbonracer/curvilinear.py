"""Curvilinear kinematics on a 3D ribbon road.

The vehicle pose is tracked in road coordinates: station ``zeta`` along the
spine, lateral offset ``n`` and relative yaw ``xi``. The moving frame sits on
the road surface under the vehicle, so the road's three curvature profiles
show up directly in the frame's angular velocity and in the accelerations
felt at the center of mass.

All functions are plain algebra on scalars or numpy arrays; no state is kept.
The sign convention for the vertical specific acceleration ``a_z`` is
compression-positive: a dip or a level banked turn gives ``a_z > 0`` and
presses the car into the road.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import PoseSingularityError

GRAVITY = 9.81  # m/s^2


class CurvilinearPose(NamedTuple):
    """Road-relative pose: station along the spine, lateral offset, relative yaw."""

    zeta: float
    n: float
    xi: float


class FrameRates(NamedTuple):
    """Time derivatives of the road-relative pose plus the induced frame motion."""

    zeta_dot: np.ndarray
    n_dot: np.ndarray
    xi_dot: np.ndarray
    omega_x: np.ndarray
    omega_y: np.ndarray
    v_z: np.ndarray


def advance_ratio(n, kappa):
    """The 1 - n*kappa factor scaling spine advance; raises near the pole.

    The curvilinear parameterization degenerates when the lateral offset
    reaches the local center of curvature (n*kappa -> 1). Any query within 5%
    of the pole is treated as a modeling error rather than clipped.
    """
    ratio = 1.0 - np.asarray(n) * np.asarray(kappa)
    if np.any(ratio < 0.05):
        raise PoseSingularityError(
            "lateral offset too close to the local center of curvature "
            f"(min 1 - n*kappa = {float(np.min(ratio)):.3f})")
    return ratio


def darboux_rates(v_x, v_y, omega_z, n, xi, kappa, upsilon, tau) -> FrameRates:
    """Pose rates and road-induced frame motion from body velocities.

    Given body-frame velocities (v_x, v_y) and yaw rate omega_z at road pose
    (n, xi) over local curvatures (kappa, upsilon, tau), returns the rates of
    (zeta, n, xi) together with the roll/pitch rates and vertical velocity the
    road geometry imposes on the frame.
    """
    s, c = np.sin(xi), np.cos(xi)
    zeta_dot = (v_x * c - v_y * s) / advance_ratio(n, kappa)
    n_dot = v_x * s + v_y * c
    xi_dot = omega_z - kappa * zeta_dot
    omega_x = -(tau * c + upsilon * s) * zeta_dot
    omega_y = (tau * s - upsilon * c) * zeta_dot
    v_z = -n * tau * zeta_dot
    return FrameRates(zeta_dot, n_dot, xi_dot, omega_x, omega_y, v_z)


def gravity_components(xi, mu, phi, g=GRAVITY):
    """Longitudinal and lateral gravity projections in the vehicle frame.

    Returns (g_long, g_lat) with g_long = g*(sin(xi)*phi - cos(xi)*mu) and
    g_lat = g*(sin(xi)*mu + cos(xi)*phi). Both enter the specific-force
    accelerations with a minus sign: driving uphill (mu > 0, xi = 0) adds
    +g*mu to a_x, and positive banking adds -g*phi to a_y.
    """
    s, c = np.sin(xi), np.cos(xi)
    g_long = g * (s * phi - c * mu)
    g_lat = g * (s * mu + c * phi)
    return g_long, g_lat


def com_acceleration(v_x, v_y, v_z, omega_x, omega_y, omega_z,
                     v_x_dot, v_y_dot, v_z_dot, xi, mu, phi,
                     h=0.0, omega_x_dot=0.0, omega_y_dot=0.0, g=GRAVITY):
    """Specific-force accelerations at the center of mass, height h above the road.

    These are the accelerometer readings (gravity included), so they are what
    the performance envelope is expressed in:

        a_x = v_x' - omega_z*(v_y - omega_x*h) + omega_y*v_z + omega_y'*h - g_long
        a_y = v_y' + omega_z*(v_x + omega_y*h) - omega_x*v_z - omega_x'*h - g_lat
        a_z = v_z' - omega_y*v_x

    Returns (a_x, a_y, a_z).
    """
    g_long, g_lat = gravity_components(xi, mu, phi, g)
    a_x = v_x_dot - omega_z * (v_y - omega_x * h) + omega_y * v_z \
        + omega_y_dot * h - g_long
    a_y = v_y_dot + omega_z * (v_x + omega_y * h) - omega_x * v_z \
        - omega_x_dot * h - g_lat
    a_z = v_z_dot - omega_y * v_x
    return a_x, a_y, a_z


def simplified_vertical(v_x, n, xi, kappa, upsilon, tau):
    """Cheap estimate of (omega_y, a_z) for planning.

    Linearizes the relative yaw (sin(xi) ~ xi, cos(xi) ~ 1) and drops the
    vertical-velocity rate, leaving

        omega_y = v_x * (xi*tau - upsilon) / (1 - n*kappa)
        a_z     = -omega_y * v_x

    which needs only the planner states and the road tables.
    """
    omega_y = v_x * (xi * tau - upsilon) / advance_ratio(n, kappa)
    a_z = -omega_y * v_x
    return omega_y, a_z
