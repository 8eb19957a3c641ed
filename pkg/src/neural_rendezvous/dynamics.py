"""Spacecraft dynamics relative to a hyperbolic target in its LVLH frame.

Units throughout: km, s, kg. Control forces are in newtons at every public
boundary; internally they are converted to kN (``N_TO_KN``) so that
``m * a`` with ``a`` in km/s^2 is directly comparable to ``C v + G``.

The relative equation of motion is

    m p'' + C(oe) p' + G(p, oe) = u

with ``C = 2 m [w]x`` the Coriolis matrix of the rotating LVLH frame and
``G`` collecting centrifugal, Euler and differential solar-gravity terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

MU_SUN = 1.32712440018e11  # km^3/s^2
AU_KM = 1.495978707e8
G0_KM = 9.80665e-3  # km/s^2
N_TO_KN = 1e-3

KEPLER_TOL = 1e-13
KEPLER_MAX_ITER = 100


class KeplerError(RuntimeError):
    """Anomaly solve did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class DynamicsError(RuntimeError):
    """Singular geometry or a non-finite control during integration."""

    def __init__(self, message: str, t: Optional[float] = None):
        super().__init__(message if t is None else f"{message} at t={t:.6f} s")
        self.t = t


@dataclass(frozen=True, eq=False)
class SpacecraftState:
    """Relative position (km) and velocity (km/s) in the target LVLH frame."""

    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(3)
        v = np.asarray(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise ValueError("spacecraft state must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "v", v)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])

    @classmethod
    def from_vector(cls, x) -> "SpacecraftState":
        x = np.asarray(x, dtype=float)
        if x.shape != (6,):
            raise ValueError(f"state vector must have shape (6,), got {x.shape}")
        return cls(x[:3], x[3:])


@dataclass(frozen=True)
class IsoElements:
    """Classical heliocentric elements of the target, tagged with an epoch.

    ``anomaly`` is the true anomaly at ``epoch``. Hyperbolic orbits carry a
    negative semi-major axis.
    """

    semi_major_axis: float
    eccentricity: float
    inclination: float
    raan: float
    arg_periapsis: float
    anomaly: float
    epoch: float = 0.0
    mu_sun: float = MU_SUN

    def __post_init__(self):
        e, a = self.eccentricity, self.semi_major_axis
        if not e >= 0.0:
            raise ValueError("eccentricity must be >= 0")
        if self.mu_sun <= 0.0:
            raise ValueError("mu_sun must be positive")
        if e == 1.0:
            raise ValueError("parabolic orbits are not supported")
        if (e > 1.0) != (a < 0.0):
            raise ValueError("hyperbolic orbits need e > 1 and a < 0")
        if e > 1.0 and abs(math.cos(self.anomaly)) >= 1.0 / e and math.cos(self.anomaly) < 0:
            raise ValueError("true anomaly beyond the hyperbolic asymptote")

    @property
    def hyperbolic(self) -> bool:
        return self.eccentricity > 1.0

    @property
    def mean_motion(self) -> float:
        return math.sqrt(self.mu_sun / abs(self.semi_major_axis) ** 3)

    @property
    def semi_latus_rectum(self) -> float:
        return self.semi_major_axis * (1.0 - self.eccentricity**2)

    def as_vector(self) -> np.ndarray:
        """(a, e, i, raan, argp, nu) as a float array."""
        return np.array([self.semi_major_axis, self.eccentricity, self.inclination,
                         self.raan, self.arg_periapsis, self.anomaly])

    def state(self) -> tuple[np.ndarray, np.ndarray]:
        """Heliocentric position (km) and velocity (km/s)."""
        return _cartesian(self)

    @classmethod
    def from_state(cls, r, v, epoch: float = 0.0, mu_sun: float = MU_SUN) -> "IsoElements":
        return _elements_from_state(np.asarray(r, float), np.asarray(v, float), epoch, mu_sun)


@dataclass(frozen=True)
class MassModel:
    """Rocket-equation mass bookkeeping. ``isp = inf`` gives constant mass."""

    wet_mass: float = 150.0
    isp: float = 3000.0
    g0: float = G0_KM
    min_mass: float = 50.0

    def __post_init__(self):
        if not (self.wet_mass > self.min_mass > 0.0):
            raise ValueError("need wet_mass > min_mass > 0")
        if not self.isp > 0.0:
            raise ValueError("isp must be positive")

    def mass_rate(self, u_newton, mass: float) -> float:
        """dm/dt in kg/s for a thrust vector in N."""
        if math.isinf(self.isp) or mass <= self.min_mass:
            return 0.0
        return -float(np.linalg.norm(u_newton)) * N_TO_KN / (self.isp * self.g0)


@dataclass(frozen=True)
class DynamicsParams:
    iso: IsoElements
    mass: MassModel = field(default_factory=MassModel)
    u_max: float = 3.0

    def __post_init__(self):
        if not self.u_max > 0.0:
            raise ValueError("u_max must be positive")


# ---------------------------------------------------------------------------
# Kepler machinery


def solve_kepler(mean_anomaly: float, e: float, tol: float = KEPLER_TOL,
                 max_iter: int = KEPLER_MAX_ITER) -> float:
    """Eccentric (e < 1) or hyperbolic (e > 1) anomaly for a mean anomaly.

    Newton iterations safeguarded by a bracketing interval; a step leaving
    the bracket is replaced by bisection.
    """
    M = float(mean_anomaly)
    if e < 1.0:
        f = lambda E: E - e * math.sin(E) - M
        df = lambda E: 1.0 - e * math.cos(E)
        lo, hi = M - e - 1e-12, M + e + 1e-12
        x = M + e * math.sin(M) if e < 0.8 else M + math.copysign(e, math.sin(M) or 1.0)
    elif e > 1.0:
        f = lambda H: e * math.sinh(H) - H - M
        df = lambda H: e * math.cosh(H) - 1.0
        bound = math.asinh(abs(M) / (e - 1.0)) + 1e-12
        lo, hi = (0.0, bound) if M >= 0 else (-bound, 0.0)
        x = math.copysign(math.asinh(abs(M) / e) if abs(M) > 0 else 0.0, M)
        x = min(max(x, lo), hi)
    else:
        raise ValueError("parabolic anomaly solve is not supported")

    x = min(max(x, lo), hi)
    fx = f(x)
    for _ in range(max_iter):
        if fx == 0.0:
            return x
        if fx > 0.0:
            hi = x
        else:
            lo = x
        d = df(x)
        x_new = x - fx / d if d > 0 else 0.5 * (lo + hi)
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        step = abs(x_new - x)
        x = x_new
        fx = f(x)
        if step <= tol * max(1.0, abs(x)):
            return x
    raise KeplerError("anomaly solve did not converge", abs(fx))


def true_to_mean(nu: float, e: float) -> float:
    if e < 1.0:
        E = 2.0 * math.atan2(math.sqrt(1.0 - e) * math.sin(nu / 2.0),
                             math.sqrt(1.0 + e) * math.cos(nu / 2.0))
        E += 2.0 * math.pi * round((nu - E) / (2.0 * math.pi))
        return E - e * math.sin(E)
    H = 2.0 * math.atanh(math.sqrt((e - 1.0) / (e + 1.0)) * math.tan(nu / 2.0))
    return e * math.sinh(H) - H


def anomaly_to_true(x: float, e: float) -> float:
    """True anomaly from an eccentric or hyperbolic anomaly."""
    if e < 1.0:
        nu = 2.0 * math.atan2(math.sqrt(1.0 + e) * math.sin(x / 2.0),
                              math.sqrt(1.0 - e) * math.cos(x / 2.0))
        return nu + 2.0 * math.pi * round((x - nu) / (2.0 * math.pi))
    return 2.0 * math.atan(math.sqrt((e + 1.0) / (e - 1.0)) * math.tanh(x / 2.0))


@lru_cache(maxsize=65536)
def iso_flow(oe: IsoElements, dt: float) -> IsoElements:
    """Two-body flow of the target elements over ``dt`` seconds."""
    if dt == 0.0:
        return oe
    e = oe.eccentricity
    M = true_to_mean(oe.anomaly, e) + oe.mean_motion * dt
    nu = anomaly_to_true(solve_kepler(M, e), e)
    return replace(oe, anomaly=nu, epoch=oe.epoch + dt)


def _perifocal_rotation(i: float, raan: float, argp: float) -> np.ndarray:
    ci, si = math.cos(i), math.sin(i)
    cO, sO = math.cos(raan), math.sin(raan)
    cw, sw = math.cos(argp), math.sin(argp)
    return np.array([
        [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
        [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
        [sw * si, cw * si, ci],
    ])


def _cartesian(oe: IsoElements) -> tuple[np.ndarray, np.ndarray]:
    e, nu, mu = oe.eccentricity, oe.anomaly, oe.mu_sun
    p = oe.semi_latus_rectum
    r = p / (1.0 + e * math.cos(nu))
    R = _perifocal_rotation(oe.inclination, oe.raan, oe.arg_periapsis)
    r_pf = np.array([r * math.cos(nu), r * math.sin(nu), 0.0])
    s = math.sqrt(mu / p)
    v_pf = np.array([-s * math.sin(nu), s * (e + math.cos(nu)), 0.0])
    return R @ r_pf, R @ v_pf


def _elements_from_state(r, v, epoch, mu) -> IsoElements:
    rn = float(np.linalg.norm(r))
    h = np.cross(r, v)
    hn = float(np.linalg.norm(h))
    if rn == 0.0 or hn == 0.0:
        raise DynamicsError("degenerate heliocentric state")
    energy = 0.5 * float(v @ v) - mu / rn
    a = -mu / (2.0 * energy)
    p = hn * hn / mu
    e = math.sqrt(max(0.0, 1.0 - p / a))
    inc = math.acos(max(-1.0, min(1.0, h[2] / hn)))
    if math.hypot(h[0], h[1]) < 1e-12 * hn:
        raan = 0.0
    else:
        raan = math.atan2(h[0], -h[1])
    n_hat = np.array([math.cos(raan), math.sin(raan), 0.0])
    m_hat = np.cross(h / hn, n_hat)
    arg_lat = math.atan2(float(r @ m_hat), float(r @ n_hat))
    nu = math.atan2(math.sqrt(p / mu) * float(r @ v) / rn, p / rn - 1.0)
    return IsoElements(a, e, inc, raan, arg_lat - nu, nu, epoch, mu)


# ---------------------------------------------------------------------------
# LVLH frame and the terms of the relative equation of motion


class Frame:
    """Target-centred LVLH frame at one instant.

    ``rot`` maps inertial vectors to LVLH (rows: radial, along, normal).
    """

    __slots__ = ("r", "w", "wdot", "mu", "_oe", "_rot")

    def __init__(self, r: float, w: float, wdot: float, mu: float, oe: IsoElements):
        self.r, self.w, self.wdot, self.mu = r, w, wdot, mu
        self._oe = oe
        self._rot = None

    @property
    def rot(self) -> np.ndarray:
        if self._rot is None:
            oe = self._oe
            self._rot = _perifocal_rotation(oe.inclination, oe.raan,
                                            oe.arg_periapsis + oe.anomaly).T
        return self._rot

    @property
    def r_vec(self) -> np.ndarray:
        return self._oe.state()[0]

    @property
    def v_vec(self) -> np.ndarray:
        return self._oe.state()[1]


@lru_cache(maxsize=65536)
def frame(oe: IsoElements) -> Frame:
    e, nu, mu = oe.eccentricity, oe.anomaly, oe.mu_sun
    p = oe.semi_latus_rectum
    r = p / (1.0 + e * math.cos(nu))
    h = math.sqrt(mu * p)
    rdot = math.sqrt(mu / p) * e * math.sin(nu)
    return Frame(r, h / r**2, -2.0 * h * rdot / r**3, mu, oe)


def omega_z(oe: IsoElements) -> float:
    return frame(oe).w


def coriolis_matrix(oe: IsoElements, mass: float) -> np.ndarray:
    """C = 2 m [w]x in kN per (km/s); exactly skew-symmetric."""
    c = 2.0 * mass * frame(oe).w
    return np.array([[0.0, -c, 0.0], [c, 0.0, 0.0], [0.0, 0.0, 0.0]])


def frame_arrays(oes) -> np.ndarray:
    """Stack (r, w, wdot, mu) for a sequence of elements, shape (N, 4)."""
    out = np.empty((len(oes), 4))
    for i, oe in enumerate(oes):
        fr = frame(oe)
        out[i] = fr.r, fr.w, fr.wdot, fr.mu
    return out


def frame_accel_batch(P, F) -> np.ndarray:
    """Centrifugal + Euler + differential gravity, km/s^2.

    ``P`` is (..., 3) and ``F`` holds matching (r, w, wdot, mu) in its last axis.
    """
    P = np.asarray(P, dtype=float)
    r, w, wd, mu = F[..., 0], F[..., 1], F[..., 2], F[..., 3]
    px, py, pz = P[..., 0], P[..., 1], P[..., 2]
    Rx = r + px
    d2 = Rx * Rx + py * py + pz * pz
    if np.any(d2 == 0.0):
        raise DynamicsError("spacecraft at the Sun's centre")
    k = mu / (d2 * np.sqrt(d2))
    w2 = w * w
    out = np.empty(P.shape)
    out[..., 0] = -w2 * px - wd * py + k * Rx - mu / r**2
    out[..., 1] = -w2 * py + wd * px + k * py
    out[..., 2] = k * pz
    return out


def frame_accel_jacobian_batch(P, F) -> np.ndarray:
    """d(frame_accel_batch)/dP, shape (..., 3, 3)."""
    P = np.asarray(P, dtype=float)
    r, w, wd, mu = F[..., 0], F[..., 1], F[..., 2], F[..., 3]
    R = P.copy()
    R[..., 0] += r
    d2 = np.sum(R * R, axis=-1)
    d = np.sqrt(d2)
    J = -3.0 * (mu / (d2 * d2 * d))[..., None, None] * R[..., :, None] * R[..., None, :]
    diag = mu / (d2 * d)
    for i in range(3):
        J[..., i, i] += diag
    J[..., 0, 0] -= w * w
    J[..., 1, 1] -= w * w
    J[..., 0, 1] -= wd
    J[..., 1, 0] += wd
    return J


def _frame_accel(p, fr: Frame):
    return frame_accel_batch(p, np.array([fr.r, fr.w, fr.wdot, fr.mu]))


def gravity_term(p, oe: IsoElements, mass: float) -> np.ndarray:
    """G(p, oe) in kN."""
    return mass * _frame_accel(p, frame(oe))


def gravity_jacobian(p, oe: IsoElements, mass: float) -> np.ndarray:
    """dG/dp, kN/km."""
    fr = frame(oe)
    R = np.array([fr.r + p[0], p[1], p[2]])
    d = float(np.linalg.norm(R))
    J = fr.mu * (np.eye(3) / d**3 - 3.0 * np.outer(R, R) / d**5)
    J[0, 0] -= fr.w**2
    J[1, 1] -= fr.w**2
    J[0, 1] -= fr.wdot
    J[1, 0] += fr.wdot
    return mass * J


def pdot_drift(p, v, fr: Frame):
    """Drift acceleration -(C v + G)/m, km/s^2; mass cancels. Broadcasts."""
    a = -_frame_accel(p, fr)
    v = np.asarray(v, dtype=float)
    a[..., 0] += 2.0 * fr.w * v[..., 1]
    a[..., 1] -= 2.0 * fr.w * v[..., 0]
    return a


def drift(x, oe: IsoElements, mass: float) -> np.ndarray:
    """f(x, oe) = [v; -(C v + G)/m]."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x[3:6], pdot_drift(x[:3], x[3:6], frame(oe))])


def input_matrix(mass: float) -> np.ndarray:
    """B = [0; I/m] mapping N to km/s^2."""
    B = np.zeros((6, 3))
    B[3:, :] = np.eye(3) * (N_TO_KN / mass)
    return B


def state_jacobian(x, oe: IsoElements, mass: float) -> np.ndarray:
    """df/dx of the drift (mass held fixed)."""
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    A[3:, :3] = -gravity_jacobian(x[:3], oe, mass) / mass
    A[3:, 3:] = -coriolis_matrix(oe, mass) / mass
    return A


# ---------------------------------------------------------------------------
# Fixed-step RK4

Policy = Callable[[float, np.ndarray, IsoElements, float], np.ndarray]


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n+1, 6)
    masses: np.ndarray  # (n+1,)
    oe_end: IsoElements

    @property
    def final(self) -> SpacecraftState:
        return SpacecraftState.from_vector(self.states[-1])


def _accel_scalar(px, py, pz, vx, vy, vz, fr: Frame):
    w, wd = fr.w, fr.wdot
    Rx = fr.r + px
    d2 = Rx * Rx + py * py + pz * pz
    if d2 == 0.0:
        raise DynamicsError("spacecraft at the Sun's centre")
    k = fr.mu / (d2 * math.sqrt(d2))
    w2 = w * w
    return (w2 * px + wd * py - k * Rx + fr.mu / fr.r**2 + 2.0 * w * vy,
            w2 * py - wd * px - k * py - 2.0 * w * vx,
            -k * pz)


def closed_loop_rhs(t, y, oe0, t0, policy, params: DynamicsParams):
    """Right-hand side of [p, v, m] under ``policy`` (u in N)."""
    oe = iso_flow(oe0, t - t0)
    m = y[6]
    fr = frame(oe)
    px, py, pz, vx, vy, vz = y[0], y[1], y[2], y[3], y[4], y[5]
    ax, ay, az = _accel_scalar(px, py, pz, vx, vy, vz, fr)
    mdot = 0.0
    if policy is not None and m > params.mass.min_mass:
        u = np.asarray(policy(t, y[:6], oe, m), dtype=float)
        if u.shape != (3,) or not np.all(np.isfinite(u)):
            raise DynamicsError("policy returned a non-finite control", t)
        s = N_TO_KN / m
        ax += u[0] * s
        ay += u[1] * s
        az += u[2] * s
        mdot = params.mass.mass_rate(u, m)
    return np.array([vx, vy, vz, ax, ay, az, mdot])


def integrate(x0, oe0: IsoElements, t0: float, t1: float, policy: Optional[Policy],
              params: DynamicsParams, step: float, m0: Optional[float] = None,
              ) -> Trajectory:
    """Classical RK4 from t0 to t1 (backward when t1 < t0).

    ``policy(t, x, oe, m)`` is evaluated at every stage; pass a closure that
    ignores its arguments for zero-order-hold control. The step is shrunk so
    that an integer number of equal steps lands exactly on ``t1``.
    """
    if not step > 0.0:
        raise ValueError("step must be positive")
    if t1 == t0:
        raise ValueError("t1 must differ from t0")
    x0 = x0.x if isinstance(x0, SpacecraftState) else np.asarray(x0, dtype=float)
    n = max(1, int(math.ceil(abs(t1 - t0) / step - 1e-9)))
    h = (t1 - t0) / n
    y = np.empty(7)
    y[:6] = x0
    y[6] = params.mass.wet_mass if m0 is None else m0
    times = t0 + h * np.arange(n + 1)
    times[-1] = t1
    states = np.empty((n + 1, 6))
    masses = np.empty(n + 1)
    states[0], masses[0] = y[:6], y[6]
    for k in range(n):
        y = rk4_step(y, times[k], h, oe0, t0, policy, params)[0]
        states[k + 1], masses[k + 1] = y[:6], y[6]
    return Trajectory(times, states, masses, iso_flow(oe0, t1 - t0))


def rk4_step(y, t, h, oe0, t0, policy, params: DynamicsParams):
    """One classical RK4 step of [p, v, m]; returns (y_next, k1)."""
    rhs = closed_loop_rhs
    k1 = rhs(t, y, oe0, t0, policy, params)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1, oe0, t0, policy, params)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2, oe0, t0, policy, params)
    k4 = rhs(t + h, y + h * k3, oe0, t0, policy, params)
    y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if y[6] < params.mass.min_mass:
        y[6] = params.mass.min_mass
    return y, k1


def zoh(u) -> Policy:
    """Constant-control policy."""
    u = np.asarray(u, dtype=float)
    return lambda t, x, oe, m: u
