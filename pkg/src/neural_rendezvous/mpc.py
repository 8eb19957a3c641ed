"""Terminal-guidance optimal control by sequential convexification.

Problem: minimize c0 |p(t_f) - rho|^2 + c1 * integral |u|^2 dt over
zero-order-hold controls on a fixed grid, with |u_i| <= u_max, or replace
the terminal penalty by the equality p(t_f) = rho.

Each convex subproblem only couples the controls through the linearized
terminal position, so it is solved exactly in its 3-dimensional dual: the
primal minimizer is a clipped linear function of the multiplier, and the
dual is maximized by a safeguarded semismooth Newton method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .dynamics import (N_TO_KN, IsoElements, _accel_scalar, frame,
                       frame_accel_jacobian_batch, iso_flow)

PENALTY = "penalty"
HARD = "hard"


class MpcInfeasible(RuntimeError):
    """The convex subproblem has no feasible point."""

    def __init__(self, violated: dict):
        self.violated = violated
        super().__init__("infeasible subproblem: " + ", ".join(f"{k}={v}" for k, v in violated.items()))


@dataclass(frozen=True)
class MpcConfig:
    tol_du: float = 1e-6  # N, SCP convergence on max |delta u|
    feas_tol: float = 1e-6  # km, terminal equality tolerance in hard mode
    qp_tol: float = 1e-9  # km, dual-residual tolerance
    max_iter: int = 30
    qp_max_iter: int = 200
    tr_radius: float = 100.0  # km, initial trust region on state deviation
    tr_shrink: float = 0.5
    tr_grow: float = 1.5
    substep: float = 60.0  # s, RK4 substep inside each grid interval


@dataclass(frozen=True)
class MpcProblem:
    x_hat: np.ndarray
    oe_hat: Optional[IsoElements]
    tau: float
    t_f: float
    rho: np.ndarray
    c0: float = 1e4
    c1: float = 1.0
    u_max: float = 3.0
    dt_grid: float = 60.0
    terminal_mode: str = PENALTY
    mass: float = 150.0
    dynamics: Optional[object] = None  # overrides the relative dynamics (toy models)

    def __post_init__(self):
        object.__setattr__(self, "x_hat", np.asarray(self.x_hat, dtype=float).reshape(6))
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))
        if not self.tau < self.t_f:
            raise ValueError("need tau < t_f")
        if not self.dt_grid > 0:
            raise ValueError("dt_grid must be positive")
        if self.terminal_mode not in (PENALTY, HARD):
            raise ValueError(f"unknown terminal mode {self.terminal_mode!r}")
        if self.c0 < 0 or self.c1 < 0:
            raise ValueError("cost weights must be non-negative")
        if self.c1 == 0:
            raise ValueError("c1 must be positive (control cost makes the subproblem strictly convex)")
        if self.terminal_mode == PENALTY and self.c0 == 0:
            raise ValueError("penalty mode needs c0 > 0")
        if not self.u_max > 0 or not self.mass > 0:
            raise ValueError("u_max and mass must be positive")
        if self.dynamics is None and self.oe_hat is None:
            raise ValueError("target elements required for the relative dynamics")

    def grid(self) -> np.ndarray:
        n = max(1, int(math.ceil((self.t_f - self.tau) / self.dt_grid - 1e-9)))
        times = self.tau + self.dt_grid * np.arange(n + 1)
        times[-1] = self.t_f
        if n > 1 and times[-1] - times[-2] < 1e-6 * self.dt_grid:
            times = np.delete(times, -2)
        return times


@dataclass
class MpcSolution:
    times: np.ndarray
    u_seq: np.ndarray  # (N, 3), N
    x_seq: np.ndarray  # (N+1, 6)
    cost: float
    iterations: int
    converged: bool
    terminal_error: float
    merit_history: list = field(default_factory=list)
    mode: str = PENALTY
    multiplier: Optional[np.ndarray] = None

    @property
    def first_control(self) -> np.ndarray:
        return self.u_seq[0].copy()


# ---------------------------------------------------------------------------
# discrete dynamics used by the solver


class RelativeDynamics:
    """ZOH relative dynamics with mass frozen; RK4 substeps and exact Jacobians.

    Rollouts run on Python floats; the stage states are kept so that the
    step Jacobians can be formed afterwards in one batched pass.
    """

    def __init__(self, oe_tau: IsoElements, tau: float, mass: float, substep: float = 60.0):
        self.oe_tau, self.tau, self.mass, self.substep = oe_tau, tau, mass, substep
        self._frames = {}

    def _frame(self, t):
        fr = self._frames.get(t)
        if fr is None:
            fr = frame(iso_flow(self.oe_tau, t - self.tau))
            self._frames[t] = fr
        return fr

    def _substeps(self, h):
        n = max(1, int(math.ceil(abs(h) / self.substep - 1e-9)))
        return n, h / n

    def rollout(self, x0, times, U, jac=False):
        b = N_TO_KN / self.mass
        N = len(times) - 1
        X = np.empty((N + 1, 6))
        X[0] = x0
        y = [float(v) for v in x0]
        stages, frs, hs, owner = [], [], [], []
        for k in range(N):
            n, dt = self._substeps(times[k + 1] - times[k])
            ux, uy, uz = U[k, 0] * b, U[k, 1] * b, U[k, 2] * b
            for i in range(n):
                ti = times[k] + i * dt
                fa, fm, fb = self._frame(ti), self._frame(ti + 0.5 * dt), self._frame(ti + dt)
                s1 = y
                a = _accel_scalar(*s1, fa)
                k1 = (s1[3], s1[4], s1[5], a[0] + ux, a[1] + uy, a[2] + uz)
                s2 = [s1[j] + 0.5 * dt * k1[j] for j in range(6)]
                a = _accel_scalar(*s2, fm)
                k2 = (s2[3], s2[4], s2[5], a[0] + ux, a[1] + uy, a[2] + uz)
                s3 = [s1[j] + 0.5 * dt * k2[j] for j in range(6)]
                a = _accel_scalar(*s3, fm)
                k3 = (s3[3], s3[4], s3[5], a[0] + ux, a[1] + uy, a[2] + uz)
                s4 = [s1[j] + dt * k3[j] for j in range(6)]
                a = _accel_scalar(*s4, fb)
                k4 = (s4[3], s4[4], s4[5], a[0] + ux, a[1] + uy, a[2] + uz)
                y = [s1[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                     for j in range(6)]
                if jac:
                    stages.append((s1, s2, s3, s4))
                    frs.append(tuple((f.r, f.w, f.wdot, f.mu) for f in (fa, fm, fm, fb)))
                    hs.append(dt)
                    owner.append(k)
            X[k + 1] = y
        if not jac:
            return X, None, None
        Ms, Gs = self._stage_jacobians(np.array(stages), np.array(frs), np.array(hs), b)
        Phis = np.empty((N, 6, 6))
        Gams = np.empty((N, 6, 3))
        owner = np.array(owner)
        first = np.searchsorted(owner, np.arange(N))
        for k in range(N):
            j0 = first[k]
            j1 = first[k + 1] if k + 1 < N else len(owner)
            P, G = Ms[j0], Gs[j0]
            for j in range(j0 + 1, j1):
                P = Ms[j] @ P
                G = Ms[j] @ G + Gs[j]
            Phis[k], Gams[k] = P, G
        return X, Phis, Gams

    @staticmethod
    def _stage_jacobians(S, F, h, b):
        """Per-substep transition (n, 6, 6) and input (n, 6, 3) matrices."""
        n = S.shape[0]
        A = np.zeros((n, 4, 6, 6))
        A[..., 0, 3] = A[..., 1, 4] = A[..., 2, 5] = 1.0
        A[..., 3:, :3] = -frame_accel_jacobian_batch(S[..., :3], F)
        w = F[..., 1]
        A[..., 3, 4] = 2.0 * w
        A[..., 4, 3] = -2.0 * w
        B = np.zeros((6, 3))
        B[3:] = b * np.eye(3)
        hh = h[:, None, None]
        I = np.eye(6)
        # K_i = A_i (I + c_i K_{i-1}) for the state part, A_i c_i K_{i-1} + B for the input part
        K1 = A[:, 0]
        K2 = A[:, 1] @ (I + 0.5 * hh * K1)
        K3 = A[:, 2] @ (I + 0.5 * hh * K2)
        K4 = A[:, 3] @ (I + hh * K3)
        M = I + hh / 6.0 * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        L1 = np.broadcast_to(B, (n, 6, 3))
        L2 = 0.5 * hh * (A[:, 1] @ L1) + B
        L3 = 0.5 * hh * (A[:, 2] @ L2) + B
        L4 = hh * (A[:, 3] @ L3) + B
        G = hh / 6.0 * (L1 + 2.0 * L2 + 2.0 * L3 + L4)
        return M, G

    def propagate(self, x, u, t, h, jac=False):
        X, P, G = self.rollout(np.asarray(x, float), np.array([t, t + h]),
                               np.asarray(u, float).reshape(1, 3), jac)
        if jac:
            return X[1], P[0], G[0]
        return X[1]


class DoubleIntegrator:
    """Gravity-free, rotation-free toy: p'' = u / m (u in N)."""

    def __init__(self, mass: float = 150.0):
        self.mass = mass

    def propagate(self, x, u, t, h, jac=False):
        b = N_TO_KN / self.mass
        x = np.asarray(x, dtype=float)
        a = np.asarray(u, dtype=float) * b
        out = np.concatenate([x[:3] + h * x[3:] + 0.5 * h * h * a, x[3:] + h * a])
        if not jac:
            return out
        Phi = np.eye(6)
        Phi[:3, 3:] = h * np.eye(3)
        Gam = np.vstack([0.5 * h * h * b * np.eye(3), h * b * np.eye(3)])
        return out, Phi, Gam


def dynamics_for(problem: MpcProblem, cfg: MpcConfig):
    if problem.dynamics is not None:
        return problem.dynamics
    return RelativeDynamics(problem.oe_hat, problem.tau, problem.mass, cfg.substep)


def rollout(dyn, x0, times, U, jac=False):
    if hasattr(dyn, "rollout"):
        return dyn.rollout(x0, times, U, jac)
    N = len(times) - 1
    X = np.empty((N + 1, 6))
    X[0] = x0
    Phis = np.empty((N, 6, 6)) if jac else None
    Gams = np.empty((N, 6, 3)) if jac else None
    for k in range(N):
        h = times[k + 1] - times[k]
        if jac:
            X[k + 1], Phis[k], Gams[k] = dyn.propagate(X[k], U[k], times[k], h, True)
        else:
            X[k + 1] = dyn.propagate(X[k], U[k], times[k], h)
    return X, Phis, Gams


# ---------------------------------------------------------------------------
# convex subproblem


def _terminal_sensitivities(Phis, Gams):
    """S_k = d p_N / d u_k, shape (N, 3, 3), by backward accumulation."""
    N = Phis.shape[0]
    S = np.empty((N, 3, 3))
    P = np.eye(6)[:3]
    for k in range(N - 1, -1, -1):
        S[k] = P @ Gams[k]
        P = P @ Phis[k]
    return S


def solve_terminal_qp(S, e, w, u_max, inv2c0: float, lam0=None, tol=1e-9, max_iter=200):
    """min sum_k w_k |u_k|^2 + (penalty or equality on) sum_k S_k u_k + e, |u| <= u_max.

    ``inv2c0`` = 1/(2 c0) in penalty mode and 0 for the hard equality.
    Returns (U, lam, residual, iterations). Raises MpcInfeasible when the
    dual is unbounded (equality unreachable within the box).
    """
    St = np.transpose(S, (0, 2, 1))  # (N, 3, 3), S_k^T
    inv2w = 1.0 / (2.0 * w)

    def primal(lam):
        raw = -np.einsum("kij,j->ki", St, lam) * inv2w[:, None]
        U = np.clip(raw, -u_max, u_max)
        return U, np.abs(raw) < u_max

    def dual(lam, U):
        z = np.einsum("kij,kj->i", S, U) + e
        return float(np.sum(w * np.sum(U * U, axis=1)) + lam @ z - 0.5 * inv2c0 * (lam @ lam)), \
            z - inv2c0 * lam

    lam = np.zeros(3) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    U, free = primal(lam)
    g, r = dual(lam, U)
    # absolute tolerance in km, relaxed only by the rounding level of the terms
    scale = max(1.0, 1e-6 * float(np.max(np.abs(e))))
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(r) <= tol * scale:
            return U, lam, r, it
        # generalized Hessian of the concave dual
        H = -np.einsum("kij,kj,klj->il", S, free * inv2w[:, None], S) - inv2c0 * np.eye(3)
        reg = 1e-12 * max(1.0, float(np.abs(H).max()))
        try:
            d = np.linalg.solve(H - reg * np.eye(3), -r)
        except np.linalg.LinAlgError:
            d = r.copy()
        if d @ r <= 0:  # not an ascent direction; fall back to the gradient
            d = r.copy()
        step = 1.0
        while True:
            lam_n = lam + step * d
            U_n, free_n = primal(lam_n)
            g_n, r_n = dual(lam_n, U_n)
            # the residual test takes over near the optimum, where changes in
            # the dual value are below its rounding level
            if (g_n >= g + 1e-4 * step * (d @ r) or step < 1e-12
                    or np.linalg.norm(r_n) <= (1.0 - 1e-4 * step) * np.linalg.norm(r)):
                break
            step *= 0.5
        if step < 1e-12 and g_n <= g and np.linalg.norm(r_n) >= np.linalg.norm(r):
            break
        lam, U, free, g, r = lam_n, U_n, free_n, g_n, r_n
        if inv2c0 == 0.0 and not np.any(free) and np.linalg.norm(lam) > 1e30:
            break
    if inv2c0 == 0.0 and np.linalg.norm(r) > tol * scale:
        # infeasibility certificate: direction where the dual grows without bound
        dirn = lam / max(np.linalg.norm(lam), 1e-300)
        support = u_max * np.sum(np.abs(np.einsum("kij,j->ki", St, dirn)))
        if dirn @ e > support * (1 + 1e-12) or not np.any(free):
            raise MpcInfeasible({
                "terminal_position": float(np.linalg.norm(r)),
                "box_saturated_steps": int(np.sum(~free.any(axis=1))),
            })
    return U, lam, r, it


# ---------------------------------------------------------------------------
# sequential convexification


def _cost(problem, times, U, X):
    dt = np.diff(times)
    ctrl = problem.c1 * float(np.sum(dt * np.sum(U * U, axis=1)))
    miss = float(np.linalg.norm(X[-1, :3] - problem.rho))
    if problem.terminal_mode == PENALTY:
        return ctrl + problem.c0 * miss**2, miss
    return ctrl, miss


def solve(problem: MpcProblem, cfg: MpcConfig = MpcConfig(), warm: Optional[np.ndarray] = None,
          ) -> MpcSolution:
    times = problem.grid()
    N = len(times) - 1
    dt = np.diff(times)
    dyn = dynamics_for(problem, cfg)
    U = np.zeros((N, 3)) if warm is None else np.clip(np.asarray(warm, float)[:N], -problem.u_max,
                                                     problem.u_max)
    if U.shape[0] < N:
        U = np.vstack([U, np.zeros((N - U.shape[0], 3))])
    X, Phis, Gams = rollout(dyn, problem.x_hat, times, U, jac=True)
    hard = problem.terminal_mode == HARD
    inv2c0 = 0.0 if hard else 1.0 / (2.0 * problem.c0)
    w = problem.c1 * dt
    radius = cfg.tr_radius
    cost, miss = _cost(problem, times, U, X)
    mu = None  # exact-penalty weight for the hard-mode merit
    merit = None
    history = []
    lam = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        S = _terminal_sensitivities(Phis, Gams)
        e = X[-1, :3] - np.einsum("kij,kj->i", S, U) - problem.rho
        U_qp, lam, _, _ = solve_terminal_qp(S, e, w, problem.u_max, inv2c0, lam,
                                            cfg.qp_tol, cfg.qp_max_iter)
        if mu is None:
            mu = 10.0 * float(np.linalg.norm(lam)) + 1.0
            merit = cost + (mu * miss if hard else 0.0)
            history.append(merit)
        dU = U_qp - U
        # predicted state deviation of the full step under the linear model
        dx = np.zeros(6)
        dev = 0.0
        for k in range(N):
            dx = Phis[k] @ dx + Gams[k] @ dU[k]
            dev = max(dev, float(np.max(np.abs(dx))))
        accepted = False
        theta = 1.0 if dev <= radius else radius / dev
        while theta > 1e-8:
            U_c = U + theta * dU
            X_c = rollout(dyn, problem.x_hat, times, U_c)[0]
            cost_c, miss_c = _cost(problem, times, U_c, X_c)
            merit_c = cost_c + (mu * miss_c if hard else 0.0)
            if merit_c <= merit:
                accepted = True
                break
            radius *= cfg.tr_shrink
            theta = min(theta, radius / dev) if dev > 0 else theta * cfg.tr_shrink
        step_max = float(np.max(np.abs(theta * dU))) if accepted else 0.0
        if accepted:
            U = U_c
            cost, miss, merit = cost_c, miss_c, merit_c
            history.append(merit)
            radius *= cfg.tr_grow
            X, Phis, Gams = rollout(dyn, problem.x_hat, times, U, jac=True)
        if step_max < cfg.tol_du and (not hard or miss <= cfg.feas_tol):
            converged = True
            break
        if not accepted:
            break
    return MpcSolution(times, U, X, cost, it, converged, miss, history, problem.terminal_mode, lam)


def mpc_policy(x_hat, oe_hat, t, rho, problem_template: MpcProblem,
               cfg: MpcConfig = MpcConfig(), warm=None) -> np.ndarray:
    """First control of the receding-horizon solution started at ``t``."""
    prob = replace(problem_template, x_hat=np.asarray(x_hat, float), oe_hat=oe_hat, tau=t,
                   rho=np.asarray(rho, float))
    return solve(prob, cfg, warm).first_control


def shift_warm_start(sol: MpcSolution, t_new: float) -> np.ndarray:
    """Previous plan re-indexed to start at ``t_new`` (drops elapsed steps)."""
    k = int(np.searchsorted(sol.times, t_new, side="right")) - 1
    return sol.u_seq[max(k, 0):]


def lipschitz_probe(policy: Callable[[np.ndarray], np.ndarray], sampler: Callable, n_pairs: int,
                    seed: int = 0):
    """Running max of |du|/|dinput| over sampled nearby input pairs.

    ``sampler(rng)`` returns two nearby input vectors. Returns
    (estimate, (a, b)) with the maximizing pair.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    best, pair = 0.0, None
    for _ in range(n_pairs):
        a, b = sampler(rng)
        den = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
        if den == 0.0:
            continue
        q = float(np.linalg.norm(policy(a) - policy(b))) / den
        if q > best or pair is None:
            best, pair = max(best, q), (a, b)
    return best, pair
