"""Desired-trajectory construction and the pointwise min-norm tracking law.

Unit convention: controls are in N; ``N_TO_KN`` converts them so that
forces (kN) and ``mass * acceleration`` (kg km/s^2) line up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .dynamics import (N_TO_KN, DynamicsParams, IsoElements, closed_loop_rhs, coriolis_matrix,
                       frame, gravity_term, iso_flow, pdot_drift, rk4_step)
from .sndnn import HorizonError, SnDnnModel

DENOM_GUARD = 1e-18


@dataclass(frozen=True)
class ControllerGains:
    Lambda: np.ndarray = None
    alpha: float = 8.9e-7

    def __post_init__(self):
        L = np.eye(3) * 1.3e-3 if self.Lambda is None else np.asarray(self.Lambda, dtype=float)
        if np.isscalar(self.Lambda) or L.ndim == 0:
            L = np.eye(3) * float(L)
        if L.shape != (3, 3) or not np.allclose(L, L.T, rtol=0, atol=1e-15):
            raise ValueError("Lambda must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(L)[0] <= 0:
            raise ValueError("Lambda must be positive definite")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        object.__setattr__(self, "Lambda", L)

    @property
    def lambda_min(self) -> float:
        return float(np.linalg.eigvalsh(self.Lambda)[0])

    @property
    def lambda_max(self) -> float:
        return float(np.linalg.eigvalsh(self.Lambda)[-1])


class Reference(NamedTuple):
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray  # closed-loop acceleration of the desired trajectory
    u_l: np.ndarray  # guidance output along the desired trajectory, N
    oe: IsoElements


class DesiredTrajectory:
    """Closed-loop guidance trajectory ending exactly at rho.

    Nodes are the RK4 grid of the backward pass; between nodes position and
    velocity use cubic Hermite interpolation.
    """

    def __init__(self, model, rho, t_d, t_f, X, Acc, oe_d0, x_f, mass):
        self.model = model
        self.rho = np.asarray(rho, dtype=float)
        self.t_d, self.t_f = float(t_d), float(t_f)
        self.X, self.Acc = X, Acc
        self.n = X.shape[0] - 1
        self.h = (self.t_f - self.t_d) / self.n
        self.grid = self.t_d + self.h * np.arange(self.n + 1)
        self.grid[-1] = self.t_f
        self.oe_d0 = oe_d0
        self.x_f = x_f
        self.mass = mass

    def contains(self, t: float) -> bool:
        return self.t_d - 1e-9 <= t <= self.t_f + 1e-9

    def oe(self, t: float) -> IsoElements:
        return iso_flow(self.oe_d0, t - self.t_d)

    def state(self, t: float):
        """(p_d, v_d) at ``t``."""
        if not self.contains(t):
            raise ValueError(f"t={t} outside desired trajectory [{self.t_d}, {self.t_f}]")
        u = (t - self.t_d) / self.h
        k = min(max(int(u), 0), self.n - 1)
        s = u - k
        if s <= 0.0:
            return self.X[k, :3].copy(), self.X[k, 3:].copy()
        if s >= 1.0:
            return self.X[k + 1, :3].copy(), self.X[k + 1, 3:].copy()
        s2, s3 = s * s, s * s * s
        h00, h10, h01, h11 = 2 * s3 - 3 * s2 + 1, s3 - 2 * s2 + s, -2 * s3 + 3 * s2, s3 - s2
        x0, x1, a0, a1, dt = self.X[k], self.X[k + 1], self.Acc[k], self.Acc[k + 1], self.h
        p = h00 * x0[:3] + h10 * dt * x0[3:] + h01 * x1[:3] + h11 * dt * x1[3:]
        v = h00 * x0[3:] + h10 * dt * a0 + h01 * x1[3:] + h11 * dt * a1
        return p, v

    def reference(self, t: float, mass: float) -> Reference:
        """Desired state, its closed-loop acceleration and guidance input at ``t``."""
        p, v = self.state(t)
        oe = self.oe(t)
        u_l = self.model(np.concatenate([p, v]), oe, t, self.rho, self.t_f)
        a = pdot_drift(p, v, frame(oe)) + u_l * (N_TO_KN / mass)
        return Reference(p, v, a, u_l, oe)


class DesiredBuilder:
    """Resumable construction of a desired trajectory.

    Runs the guidance closed loop forward from the estimate at ``t_d`` to
    ``t_f``, replaces the terminal position by rho, then integrates the same
    closed loop backward to ``t_d``. ``advance`` performs at most the given
    number of RK4 steps so the work can be spread over control intervals.
    Mass is frozen at its ``t_d`` value along the desired trajectory.
    """

    def __init__(self, model: SnDnnModel, x_hat_td, oe_hat_td: IsoElements, t_d: float,
                 t_f: float, rho, dyn: DynamicsParams, step: float, mass: Optional[float] = None):
        if not step > 0:
            raise ValueError("step must be positive")
        if t_f - t_d < step - 1e-9:
            raise HorizonError("horizon too short for one integration step")
        self.model, self.rho = model, np.asarray(rho, dtype=float)
        self.t_d, self.t_f = float(t_d), float(t_f)
        self.n = max(1, int(math.ceil((t_f - t_d) / step - 1e-9)))
        self.h = (self.t_f - self.t_d) / self.n
        self.mass = dyn.mass.wet_mass if mass is None else float(mass)
        self.dyn = replace(dyn, mass=replace(dyn.mass, isp=math.inf))
        self.oe_td = oe_hat_td
        self.policy = model.policy(self.rho, self.t_f)
        self.phase = 0  # 0 forward, 1 backward, 2 done
        self.k = 0
        self.y = np.concatenate([np.asarray(x_hat_td, dtype=float)[:6], [self.mass]])
        self.X = np.empty((self.n + 1, 6))
        self.Acc = np.empty((self.n + 1, 3))
        self.steps_taken = 0
        self.result: Optional[DesiredTrajectory] = None

    @property
    def done(self) -> bool:
        return self.phase == 2

    def advance(self, max_steps: float = math.inf) -> bool:
        budget = max_steps
        while budget > 0 and self.phase < 2:
            if self.phase == 0:
                t = self.t_d + self.k * self.h
                self.y = rk4_step(self.y, t, self.h, self.oe_td, self.t_d, self.policy, self.dyn)[0]
                self.k += 1
                if self.k == self.n:
                    self.x_f = np.concatenate([self.rho, self.y[3:6]])
                    self.y = np.concatenate([self.x_f, [self.mass]])
                    self.X[self.n] = self.x_f
                    self.phase, self.k = 1, 0
            else:
                j = self.n - self.k  # node index being left
                t = self.t_f if self.k == 0 else self.t_d + j * self.h
                self.y, k1 = rk4_step(self.y, t, -self.h, self.oe_td, self.t_d, self.policy,
                                      self.dyn)
                self.Acc[j] = k1[3:6]
                self.k += 1
                self.X[j - 1] = self.y[:6]
                if self.k == self.n:
                    k1 = closed_loop_rhs(self.t_d, self.y, self.oe_td, self.t_d, self.policy,
                                         self.dyn)
                    self.Acc[0] = k1[3:6]
                    self.phase = 2
                    self.result = DesiredTrajectory(self.model, self.rho, self.t_d, self.t_f,
                                                    self.X, self.Acc, self.oe_td, self.x_f,
                                                    self.mass)
            budget -= 1
            self.steps_taken += 1
        return self.done


def build_desired(model, x_hat_td, oe_hat_td, t_d, t_f, rho, dyn, step,
                  mass: Optional[float] = None) -> DesiredTrajectory:
    b = DesiredBuilder(model, x_hat_td, oe_hat_td, t_d, t_f, rho, dyn, step, mass)
    b.advance()
    return b.result


# ---------------------------------------------------------------------------
# tracking law


def varrho_d(p_hat, t: float, traj: DesiredTrajectory, gains: ControllerGains) -> np.ndarray:
    p_d, v_d = traj.state(t)
    return -gains.Lambda @ (np.asarray(p_hat, dtype=float) - p_d) + v_d


def _sliding(x_hat, t, traj, gains):
    x_hat = np.asarray(x_hat, dtype=float)
    p_d, v_d = traj.state(t)
    rho_d = -gains.Lambda @ (x_hat[:3] - p_d) + v_d
    return x_hat, p_d, v_d, x_hat[3:] - rho_d, rho_d


def lyapunov_v(x, t: float, traj: DesiredTrajectory, gains: ControllerGains,
               mass: float) -> float:
    """V = m |pdot - varrho_d|^2."""
    s = _sliding(x, t, traj, gains)[3]
    return float(mass * (s @ s))


def lyapunov_sqrt(x, t, traj, gains, mass) -> float:
    return math.sqrt(lyapunov_v(x, t, traj, gains, mass))


def upsilon(x_hat, oe_hat: IsoElements, t: float, traj: DesiredTrajectory,
            gains: ControllerGains, dyn: Optional[DynamicsParams] = None,
            mass: Optional[float] = None) -> float:
    m = _mass(dyn, mass, traj)
    x_hat, p_d, v_d, s, _ = _sliding(x_hat, t, traj, gains)
    f_hat = pdot_drift(x_hat[:3], x_hat[3:], frame(oe_hat))
    f_d = pdot_drift(p_d, v_d, frame(traj.oe(t)))
    return float(m * (s @ (f_hat - f_d + gains.Lambda @ (x_hat[3:] - v_d) + gains.alpha * s)))


def _mass(dyn, mass, traj):
    if mass is not None:
        return float(mass)
    if dyn is not None:
        return dyn.mass.wet_mass
    return traj.mass


@dataclass(frozen=True)
class MinNormResult:
    u: np.ndarray  # unclipped u_l(x_d) + k, N
    k: np.ndarray
    upsilon: float
    u_l: np.ndarray


def min_norm_terms(x_hat, oe_hat, t, traj, gains, dyn=None, mass=None,
                   model: Optional[SnDnnModel] = None) -> MinNormResult:
    m = _mass(dyn, mass, traj)
    model = traj.model if model is None else model
    x_hat, p_d, v_d, s, _ = _sliding(x_hat, t, traj, gains)
    oe_d = traj.oe(t)
    u_l = model(np.concatenate([p_d, v_d]), oe_d, t, traj.rho, traj.t_f)
    f_hat = pdot_drift(x_hat[:3], x_hat[3:], frame(oe_hat))
    f_d = pdot_drift(p_d, v_d, frame(oe_d))
    ups = float(m * (s @ (f_hat - f_d + gains.Lambda @ (x_hat[3:] - v_d) + gains.alpha * s)))
    ss = float(s @ s)
    if ups <= 0.0 or ss < DENOM_GUARD:
        k = np.zeros(3)
    else:
        k = -ups * s / (N_TO_KN * ss)
    return MinNormResult(u_l + k, k, ups, u_l)


def min_norm_control(model, x_hat, oe_hat, t, traj, gains, dyn=None, mass=None) -> np.ndarray:
    """u_l(x_d, oe_d, t) plus the smallest correction meeting the decrease condition."""
    return min_norm_terms(x_hat, oe_hat, t, traj, gains, dyn, mass, model).u


def feedback_linearizing_u_n(x_hat, oe_hat, t, traj, gains, dyn=None, mass=None) -> np.ndarray:
    """M varrho_d' + C varrho_d + G - alpha M (pdot_hat - varrho_d), in N."""
    m = _mass(dyn, mass, traj)
    x_hat = np.asarray(x_hat, dtype=float)
    ref = traj.reference(t, m)
    rho_d = -gains.Lambda @ (x_hat[:3] - ref.p) + ref.v
    rho_d_dot = ref.a - gains.Lambda @ (x_hat[3:] - ref.v)
    s = x_hat[3:] - rho_d
    u_kn = (m * rho_d_dot + coriolis_matrix(oe_hat, m) @ rho_d
            + gravity_term(x_hat[:3], oe_hat, m) - gains.alpha * m * s)
    return u_kn / N_TO_KN


def stability_lhs(u, x_hat, oe_hat, t, traj, gains, dyn=None, mass=None) -> tuple[float, float]:
    """Left side of the Lyapunov decrease condition for control ``u`` and -2 alpha V.

    Returns (lhs, rhs) so feasibility reads lhs <= rhs.
    """
    m = _mass(dyn, mass, traj)
    x_hat = np.asarray(x_hat, dtype=float)
    ref = traj.reference(t, m)
    rho_d = -gains.Lambda @ (x_hat[:3] - ref.p) + ref.v
    s = x_hat[3:] - rho_d
    pdd = pdot_drift(x_hat[:3], x_hat[3:], frame(oe_hat)) + np.asarray(u) * (N_TO_KN / m)
    lhs = 2.0 * m * (s @ pdd) - 2.0 * m * (s @ (ref.a - gains.Lambda @ (x_hat[3:] - ref.v)))
    return float(lhs), float(-2.0 * gains.alpha * m * (s @ s))
