"""Online terminal-phase loop with bound-gated switching, plus baselines."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .bounds import BoundInputs, delivery_bound
from .dynamics import (N_TO_KN, DynamicsError, DynamicsParams, MassModel, integrate, iso_flow,
                       zoh)
from .mpc import (PENALTY, HARD, MpcInfeasible, MpcProblem, _terminal_sensitivities,
                  dynamics_for, MpcConfig, rollout, solve_terminal_qp)
from .scenario import Scenario, UncertaintyProfile, estimate
from .sndnn import HorizonError, SnDnnModel
from .tracking import (ControllerGains, DesiredBuilder, DesiredTrajectory,
                       feedback_linearizing_u_n, min_norm_terms)

SNDNN, MINNORM, PD, ROBUST, LINMPC = "SNDNN", "MINNORM", "PD", "ROBUST", "LINMPC"
RUNLOG_MAGIC = "# neural_rendezvous runlog v1"


@dataclass(frozen=True)
class LoopConfig:
    dt_ctrl: float = 60.0
    threshold: float = 1.0  # km; gate on the delivery bound
    t_s_override: Optional[float] = None  # gate passes from this time on
    flagA: bool = False
    flagB: bool = False
    step_integrate: float = 60.0  # desired-trajectory RK4 step
    steps_per_interval: int = 1000  # desired-trajectory RK4 budget per control interval
    sim_step: float = 10.0  # truth propagation step
    L_k: float = 1.0  # Lipschitz constant of the tracking feedback, N per unit state error
    k_e: float = 10.0
    mass: MassModel = field(default_factory=MassModel)
    u_max: float = 3.0
    mpc_grid: float = 600.0  # linearized-MPC baseline grid
    delta_v_budget: float = 0.6  # km/s

    def __post_init__(self):
        if not self.dt_ctrl > 0:
            raise ValueError("dt_ctrl must be positive")
        if not self.threshold >= 0:
            raise ValueError("threshold must be >= 0")
        if self.steps_per_interval < 1 or self.sim_step <= 0 or self.step_integrate <= 0:
            raise ValueError("integration settings must be positive")


@dataclass
class StepRecord:
    t: float
    x: np.ndarray
    x_hat: np.ndarray
    mass: float
    u: np.ndarray
    mode: str
    bound: float = math.nan
    clipped: bool = False
    wall: float = 0.0


_RUN_COLUMNS = (["t"] + [f"x{i}" for i in range(6)] + [f"xh{i}" for i in range(6)]
                + ["mass", "ux", "uy", "uz", "mode", "bound", "clipped", "wall"])


@dataclass
class RunLog:
    scenario_id: int
    controller: str
    records: list = field(default_factory=list)
    x_final: Optional[np.ndarray] = None
    mass_final: float = math.nan
    rho: Optional[np.ndarray] = None
    delta_v: float = 0.0
    failed: str = ""
    switch_time: float = math.nan
    n_clipped: int = 0
    builds: int = 0
    desired: Optional[DesiredTrajectory] = None  # trajectory tracked after the latch

    @property
    def delivery_error(self) -> float:
        if self.x_final is None:
            return math.nan
        return float(np.linalg.norm(self.x_final[:3] - self.rho))

    @property
    def modes(self) -> list:
        return [r.mode for r in self.records]

    @property
    def walls(self) -> np.ndarray:
        return np.array([r.wall for r in self.records])

    def summary(self) -> dict:
        w = self.walls
        return {"scenario": self.scenario_id, "controller": self.controller,
                "delivery_error": self.delivery_error, "delta_v": self.delta_v,
                "switch_time": self.switch_time, "n_steps": len(self.records),
                "n_clipped": self.n_clipped, "builds": self.builds,
                "wall_median": float(np.median(w)) if w.size else math.nan,
                "failed": self.failed}

    def to_csv(self, path, echo: str = "") -> None:
        """Header: magic line, summary record, optional config echo, column row."""
        lines = [RUNLOG_MAGIC, "# " + " ".join(f"{k}={v}" for k, v in self.summary().items())]
        if echo:
            lines.append("# config " + echo)
        lines.append(",".join(_RUN_COLUMNS))
        for r in self.records:
            vals = [r.t, *r.x, *r.x_hat, r.mass, *r.u]
            lines.append(",".join(repr(float(v)) for v in vals)
                         + f",{r.mode},{r.bound!r},{int(r.clipped)},{r.wall!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def read_runlog_rows(path) -> list:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != RUNLOG_MAGIC:
        raise ValueError(f"{path}: not a run log")
    k = 2 + text[2].startswith("# config")
    head = text[k].split(",")
    return [dict(zip(head, line.split(","))) for line in text[k + 1:]]


# ---------------------------------------------------------------------------
# generic closed loop


Controller = Callable[[float, np.ndarray, object, float, np.ndarray], tuple]


def _simulate(scenario: Scenario, controller, profile: UncertaintyProfile, cfg: LoopConfig,
              rng, name: str, after_step=None) -> RunLog:
    """Zero-order-hold loop; ``controller(t, x_hat, oe_hat, m)`` -> (u, mode, bound)."""
    log = RunLog(scenario.id, name, rho=scenario.rho)
    x = scenario.x0.x.copy()
    m = cfg.mass.wet_mass
    t, t_f = 0.0, scenario.t_f
    dv = 0.0
    while t < t_f - 1e-9:
        dt = min(cfg.dt_ctrl, t_f - t)
        oe_true = iso_flow(scenario.iso, t)
        x_hat, oe_hat = estimate(x, oe_true, t, profile, rng)
        w0 = time.perf_counter()
        u, mode, bound = controller(t, x_hat, oe_hat, m)
        wall = time.perf_counter() - w0
        u = np.asarray(u, dtype=float)
        uc = np.clip(u, -cfg.u_max, cfg.u_max)
        clipped = bool(np.any(uc != u))
        log.n_clipped += clipped
        log.records.append(StepRecord(t, x.copy(), x_hat.copy(), m, uc, mode, bound, clipped,
                                      wall))
        if m > cfg.mass.min_mass:
            dv += float(np.linalg.norm(uc)) * N_TO_KN * dt / m
        params = DynamicsParams(oe_true, cfg.mass, cfg.u_max)
        try:
            tr = integrate(x, oe_true, t, t + dt, zoh(uc), params, cfg.sim_step, m0=m)
        except DynamicsError as ex:
            log.failed = f"dynamics: {ex}"
            return log
        x, m = tr.states[-1].copy(), float(tr.masses[-1])
        if after_step is not None:
            after_step(t, dt, x_hat, oe_hat, m)
        t += dt
    log.x_final, log.mass_final, log.delta_v = x, m, dv
    return log


# ---------------------------------------------------------------------------
# Neural-Rendezvous


def gate_inputs(t, x_hat, traj: DesiredTrajectory, gains: ControllerGains,
                profile: UncertaintyProfile, cfg: LoopConfig, mass: float) -> BoundInputs:
    """Bound inputs for a switch at ``t`` measured on the current estimate."""
    p_d, v_d = traj.state(t)
    x_hat = np.asarray(x_hat, float)
    env = profile.envelope()
    return BoundInputs(alpha=gains.alpha, lambda_min=gains.lambda_min,
                       lambda_max=gains.lambda_max, L_k=cfg.L_k * N_TO_KN, m_f=mass,
                       t_s=t, t_f=traj.t_f, p_err_s=float(np.linalg.norm(x_hat[:3] - p_d)),
                       x_err_s=float(np.linalg.norm(x_hat - np.concatenate([p_d, v_d]))),
                       c_e=profile.err0(t), beta=env.beta, c=env.c, k_e=cfg.k_e)


class NeuralRendezvous:
    """Stateful controller implementing the two-flag switching loop."""

    def __init__(self, scenario: Scenario, model: SnDnnModel, gains: ControllerGains,
                 profile: UncertaintyProfile, cfg: LoopConfig,
                 desired: Optional[DesiredTrajectory] = None):
        self.sc, self.model, self.gains, self.profile, self.cfg = (scenario, model, gains,
                                                                   profile, cfg)
        self.flagA, self.flagB = cfg.flagA, cfg.flagB
        self.traj = desired
        if desired is not None:
            self.flagA = True
        if self.flagA and self.traj is None:
            raise ValueError("flagA set without a desired trajectory")
        self.builder: Optional[DesiredBuilder] = None
        self.builds = 0
        self.switch_time = math.nan
        self.dyn = DynamicsParams(scenario.iso, cfg.mass, cfg.u_max)

    def _u_ell(self, t, x_hat, oe_hat):
        return self.model(x_hat, oe_hat, t, self.sc.rho, self.sc.t_f)

    def _u_star(self, t, x_hat, oe_hat, m):
        return min_norm_terms(x_hat, oe_hat, t, self.traj, self.gains, mass=m,
                              model=self.model).u

    def control(self, t, x_hat, oe_hat, m):
        if not self.flagA:
            return self._u_ell(t, x_hat, oe_hat), SNDNN, math.nan
        if self.flagB:
            return self._u_star(t, x_hat, oe_hat, m), MINNORM, math.nan
        try:
            bound = delivery_bound(gate_inputs(t, x_hat, self.traj, self.gains, self.profile,
                                               self.cfg, m))
        except ValueError:
            bound = math.inf
        if self.cfg.t_s_override is not None:
            passed = t >= self.cfg.t_s_override - 1e-9
        else:
            passed = bound <= self.cfg.threshold
        if not passed:
            return self._u_ell(t, x_hat, oe_hat), SNDNN, bound
        self.flagB = True
        self.switch_time = t
        return self._u_star(t, x_hat, oe_hat, m), MINNORM, bound

    def integrate_desired(self, t, dt, x_hat, oe_hat, m):
        """Spend this interval's integration budget on the desired trajectory."""
        if self.flagB:
            return
        if self.builder is None:
            try:
                self.builder = DesiredBuilder(self.model, x_hat, oe_hat, t, self.sc.t_f,
                                              self.sc.rho, self.dyn, self.cfg.step_integrate, m)
            except HorizonError:
                return
        if self.builder.advance(self.cfg.steps_per_interval):
            self.traj = self.builder.result
            self.builder = None
            self.builds += 1
            self.flagA = True


def run(scenario: Scenario, model: SnDnnModel, gains: ControllerGains,
        profile: UncertaintyProfile, cfg: LoopConfig = LoopConfig(), seed: int = 0,
        desired: Optional[DesiredTrajectory] = None) -> RunLog:
    """One closed-loop encounter under the switching guidance/control law.

    The desired trajectory is (re)built from the estimate at the start of
    each build, using a fixed RK4 budget per control interval, until the
    min-norm law latches.
    """
    nr = NeuralRendezvous(scenario, model, gains, profile, cfg, desired)
    rng = np.random.default_rng(seed)

    def after(t, dt, x_hat, oe_hat, m):
        nr.integrate_desired(t, dt, x_hat, oe_hat, m)

    log = _simulate(scenario, nr.control, profile, cfg, rng, "NR", after)
    log.switch_time, log.builds = nr.switch_time, nr.builds
    if nr.flagB:
        log.desired = nr.traj
    return log


def run_sndnn_only(scenario, model, profile, cfg: LoopConfig = LoopConfig(), seed: int = 0):
    rng = np.random.default_rng(seed)

    def ctrl(t, x_hat, oe_hat, m):
        return model(x_hat, oe_hat, t, scenario.rho, scenario.t_f), SNDNN, math.nan

    return _simulate(scenario, ctrl, profile, cfg, rng, SNDNN)


# ---------------------------------------------------------------------------
# baselines


def pd_gains(mass: float, omega: float = 1.3e-3) -> tuple[float, float]:
    """Critically damped (kp, kd) in N/km and N/(km/s) for natural frequency ``omega``."""
    return mass * omega**2 / N_TO_KN, 2.0 * mass * omega / N_TO_KN


def baseline_pd(scenario, traj_fixed: DesiredTrajectory, kp: float, kd: float,
                profile: UncertaintyProfile, cfg: LoopConfig = LoopConfig(), seed: int = 0):
    rng = np.random.default_rng(seed)

    def ctrl(t, x_hat, oe_hat, m):
        if not traj_fixed.contains(t):
            return np.zeros(3), PD, math.nan
        p_d, v_d = traj_fixed.state(t)
        return -kp * (x_hat[:3] - p_d) - kd * (x_hat[3:] - v_d), PD, math.nan

    return _simulate(scenario, ctrl, profile, cfg, rng, PD)


def baseline_robust(scenario, traj_fixed: DesiredTrajectory, gains: ControllerGains,
                    profile: UncertaintyProfile, cfg: LoopConfig = LoopConfig(), seed: int = 0):
    rng = np.random.default_rng(seed)

    def ctrl(t, x_hat, oe_hat, m):
        if not traj_fixed.contains(t):
            return np.zeros(3), ROBUST, math.nan
        return feedback_linearizing_u_n(x_hat, oe_hat, t, traj_fixed, gains, mass=m), ROBUST, \
            math.nan

    return _simulate(scenario, ctrl, profile, cfg, rng, ROBUST)


def linearized_first_control(problem: MpcProblem, mpc_cfg: MpcConfig = MpcConfig()):
    """One convexification about the ballistic prediction; returns (u_seq, ok)."""
    times = problem.grid()
    dyn = dynamics_for(problem, mpc_cfg)
    U = np.zeros((len(times) - 1, 3))
    X, Phis, Gams = rollout(dyn, problem.x_hat, times, U, jac=True)
    S = _terminal_sensitivities(Phis, Gams)
    e = X[-1, :3] - problem.rho
    inv2c0 = 0.0 if problem.terminal_mode == HARD else 1.0 / (2.0 * problem.c0)
    try:
        U, _, _, _ = solve_terminal_qp(S, e, problem.c1 * np.diff(times), problem.u_max, inv2c0,
                                       None, mpc_cfg.qp_tol, mpc_cfg.qp_max_iter)
    except MpcInfeasible:
        return np.zeros_like(U), False
    return U, True


def baseline_linear_mpc(scenario, profile: UncertaintyProfile, cfg: LoopConfig = LoopConfig(),
                        seed: int = 0, terminal_mode: str = PENALTY, c0: float = 1e4):
    rng = np.random.default_rng(seed)
    flags = []

    def ctrl(t, x_hat, oe_hat, m):
        dt_grid = min(cfg.mpc_grid, scenario.t_f - t)
        prob = MpcProblem(x_hat, oe_hat, t, scenario.t_f, scenario.rho, c0=c0, u_max=cfg.u_max,
                          dt_grid=dt_grid, terminal_mode=terminal_mode, mass=m)
        U, ok = linearized_first_control(prob)
        flags.append(not ok)
        return U[0], LINMPC, math.nan

    log = _simulate(scenario, ctrl, profile, cfg, rng, LINMPC)
    log.failed = log.failed or ("qp-infeasible-steps=%d" % sum(flags) if any(flags) else "")
    return log


# ---------------------------------------------------------------------------
# sweeps


def sweep_control_interval(scenarios, model, gains, profile, dts=(60.0, 300.0, 600.0),
                           cfg: LoopConfig = LoopConfig(), reps: int = 1, seed: int = 0):
    """Per (dt, controller) delivery-error and delta-V statistics, NR vs SN-DNN only."""
    if not len(dts):
        raise ValueError("dt list must be nonempty")
    rows, runs = [], []
    for dt in dts:
        c = replace(cfg, dt_ctrl=float(dt))
        per = {"NR": [], SNDNN: []}
        for sc in scenarios:
            for r in range(reps):
                s = int(np.random.SeedSequence([seed, sc.id, r]).generate_state(1)[0])
                per["NR"].append(run(sc, model, gains, profile, c, s))
                per[SNDNN].append(run_sndnn_only(sc, model, profile, c, s))
        for name, logs in per.items():
            err = np.array([lg.delivery_error for lg in logs])
            dv = np.array([lg.delta_v for lg in logs])
            rows.append({"dt": float(dt), "controller": name, "n": len(logs),
                         "err_mean": float(np.mean(err)), "err_std": float(np.std(err)),
                         "err_median": float(np.median(err)), "dv_mean": float(np.mean(dv)),
                         "dv_std": float(np.std(dv))})
            runs.extend((float(dt), lg) for lg in logs)
    return rows, runs


def estimate_L_k(traj: DesiredTrajectory, gains: ControllerGains, mass: float, rng,
                 n_pairs: int = 1000, t_range=None, scale=(10.0, 1e-3), rel: float = 1e-3):
    """Empirical Lipschitz constant of the min-norm feedback k, N per state-error norm.

    Returns (estimate, spread) where spread is the half-range of the last
    tenth of the running max, a crude confidence radius.
    """
    lo, hi = t_range or (traj.t_d, traj.t_f - traj.h)
    best, hist = 0.0, []
    sc6 = np.array([scale[0]] * 3 + [scale[1]] * 3)
    for _ in range(n_pairs):
        t = rng.uniform(lo, hi)
        p_d, v_d = traj.state(t)
        oe = traj.oe(t)
        xa = np.concatenate([p_d, v_d]) + rng.standard_normal(6) * sc6
        xb = xa + rng.standard_normal(6) * sc6 * rel
        ka = min_norm_terms(xa, oe, t, traj, gains, mass=mass).k
        kb = min_norm_terms(xb, oe, t, traj, gains, mass=mass).k
        best = max(best, float(np.linalg.norm(ka - kb) / np.linalg.norm(xa - xb)))
        hist.append(best)
    tail = hist[-max(1, n_pairs // 10):]
    return best, 0.5 * (tail[-1] - tail[0])


def config_echo(cfg: LoopConfig) -> dict:
    d = asdict(cfg)
    d["mass"] = asdict(cfg.mass)
    return d
