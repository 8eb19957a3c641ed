"""Imitation training of the guidance network against optimal-control labels.

Each dataset row holds a perturbed state, the optimal first control from
that state, and the state reached after a short zero-order-hold rollout
under that control. The loss combines control imitation with a rollout
term: the network is put in the loop, integrated with RK4, and compared
with the labelled end state. Gradients are exact reverse-mode derivatives
of the implemented discretization.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import (N_TO_KN, DynamicsParams, IsoElements, MassModel, frame_arrays,
                       frame_accel_batch, frame_accel_jacobian_batch, integrate, iso_flow, zoh)
from .mpc import HARD, MpcConfig, MpcInfeasible, MpcProblem, RelativeDynamics, solve
from .scenario import Catalog, UncertaintyProfile, estimate
from .sndnn import (SnDnnModel, feature_jacobians, normalize_weight, normalize_weight_backward,
                    raw_features)

DATA_MAGIC = b"NRDATA\x00\x00"
DATA_VERSION = 1
VEL_WEIGHT = 1e7  # velocity block of the rollout weight
# Labels start from states perturbed by up to ~1e4 km; the nearly linear
# dynamics make a wide initial trust region safe and much faster.
LABEL_MPC = MpcConfig(tr_radius=1e6)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    c_u: float = 1.0
    c_x: float = 100.0

    def __post_init__(self):
        if self.c_u < 0 or self.c_x < 0 or self.c_u + self.c_x <= 0:
            raise ValueError("need c_u, c_x >= 0 with c_u + c_x > 0")

    @property
    def C_u(self) -> np.ndarray:
        return self.c_u * np.eye(3)

    @property
    def C_x(self) -> np.ndarray:
        return self.c_x * np.diag([1.0, 1.0, 1.0, VEL_WEIGHT, VEL_WEIGHT, VEL_WEIGHT])


@dataclass(frozen=True)
class TrainingSample:
    x_bar: np.ndarray
    oe_bar: IsoElements
    t_bar: float
    rho_bar: np.ndarray
    dt_bar: float
    u_label: np.ndarray
    x_rollout_label: np.ndarray
    t_f: float
    mass: float
    scenario_id: int = -1


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 500
    state_fraction: float = 0.5  # rows drawn from the early window [0, t_state]
    t_state: float = 3600.0
    dt_bar: float = 10.0
    rollout_steps: int = 1
    dt_grid: float = 60.0
    terminal_mode: str = HARD
    c0: float = 1e4
    c1: float = 1.0
    u_max: float = 3.0
    margin: float = 60.0  # keep t_bar + dt_bar at least this far from t_f

    def validate(self):
        if self.n_samples < 1 or self.rollout_steps < 1:
            raise ValueError("n_samples and rollout_steps must be >= 1")
        if not 0.0 <= self.state_fraction <= 1.0:
            raise ValueError("state_fraction must lie in [0, 1]")
        if self.dt_bar <= 0 or self.dt_grid <= 0 or self.t_state <= 0 or self.margin < 0:
            raise ValueError("time parameters must be positive")


# ---------------------------------------------------------------------------
# dataset container

_ROW_FIELDS = (["scenario", "t_f", "t_bar", "dt_bar", "mass"]
               + [f"x{i}" for i in range(6)]
               + ["a", "e", "i", "raan", "argp", "nu", "epoch", "mu"]
               + ["rho_x", "rho_y", "rho_z", "u_x", "u_y", "u_z"]
               + [f"xr{i}" for i in range(6)]
               + ["iterations", "converged", "terminal_error", "cost"])
_NCOL = len(_ROW_FIELDS)


class Dataset:
    """Column-oriented rows; see ``_ROW_FIELDS`` for the record layout."""

    def __init__(self, rows: np.ndarray, meta: Optional[dict] = None):
        rows = np.asarray(rows, dtype=float).reshape(-1, _NCOL)
        self.rows = rows
        self.meta = dict(meta or {})
        self._frames = None
        self._oes = None

    def __len__(self):
        return self.rows.shape[0]

    def col(self, name):
        return self.rows[:, _ROW_FIELDS.index(name)]

    @property
    def X(self):
        return self.rows[:, 5:11]

    @property
    def OE(self):
        return self.rows[:, 11:19]

    @property
    def RHO(self):
        return self.rows[:, 19:22]

    @property
    def U(self):
        return self.rows[:, 22:25]

    @property
    def XR(self):
        return self.rows[:, 25:31]

    @property
    def T(self):
        return self.col("t_bar")

    @property
    def TF(self):
        return self.col("t_f")

    @property
    def DT(self):
        return self.col("dt_bar")

    @property
    def M(self):
        return self.col("mass")

    def oes(self) -> list:
        if self._oes is None:
            self._oes = [IsoElements(*r) for r in self.OE]
        return self._oes

    def sample(self, i: int) -> TrainingSample:
        r = self.rows[i]
        return TrainingSample(r[5:11].copy(), self.oes()[i], r[2], r[19:22].copy(), r[3],
                              r[22:25].copy(), r[25:31].copy(), r[1], r[4], int(r[0]))

    def subset(self, idx) -> "Dataset":
        d = Dataset(self.rows[idx], self.meta)
        if self._frames is not None:
            d._frames = self._frames[idx]
        return d

    @property
    def rollout_steps(self) -> int:
        return int(self.meta.get("rollout_steps", 1))

    def frames(self) -> np.ndarray:
        """Frame parameters at every RK4 node: (n, steps, 3, 4) for start/mid/end."""
        if self._frames is None:
            ns = self.rollout_steps
            out = np.empty((len(self), ns, 3, 4))
            for i, oe in enumerate(self.oes()):
                h = self.DT[i] / ns
                offs = [(j + c) * h for j in range(ns) for c in (0.0, 0.5, 1.0)]
                out[i] = frame_arrays([iso_flow(oe, o) if o else oe for o in offs]).reshape(ns, 3, 4)
            self._frames = out
        return self._frames

    def embedding(self) -> np.ndarray:
        return embed(self.X, self.OE, self.T, self.RHO)


def oe_record(oe: IsoElements) -> list:
    return [*oe.as_vector(), oe.epoch, oe.mu_sun]


def embed(X, OE, T, RHO) -> np.ndarray:
    """Concatenated (state, elements, time, goal) with angles as (sin, cos)."""
    X, OE, RHO = np.atleast_2d(X), np.atleast_2d(OE), np.atleast_2d(RHO)
    ang = OE[:, 2:6]
    return np.hstack([X, OE[:, :2], np.sin(ang), np.cos(ang), np.atleast_1d(T)[:, None], RHO])


_HDR = struct.Struct("<8sIQI")


def save_dataset(ds: Dataset, path) -> None:
    meta = json.dumps(ds.meta, sort_keys=True).encode()
    head = _HDR.pack(DATA_MAGIC, DATA_VERSION, len(ds), len(meta))
    Path(path).write_bytes(head + meta + np.ascontiguousarray(ds.rows, "<f8").tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HDR.size or data[:8] != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    _, version, n, lmeta = _HDR.unpack_from(data)
    if version != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = _HDR.size + lmeta
    if len(data) != off + 8 * n * _NCOL:
        raise ValueError(f"{path}: truncated or corrupt dataset file")
    meta = json.loads(data[_HDR.size:off].decode())
    rows = np.frombuffer(data, "<f8", offset=off).reshape(n, _NCOL).astype(float)
    return Dataset(rows, meta)


# ---------------------------------------------------------------------------
# dataset generation


def ideal_plan(scenario, cfg: DataConfig, mpc_cfg: MpcConfig = LABEL_MPC,
               wet_mass: float = 150.0):
    """Noiseless optimal plan from the scenario's initial state."""
    prob = MpcProblem(scenario.x0.x, scenario.iso, 0.0, scenario.t_f, scenario.rho, cfg.c0,
                      cfg.c1, cfg.u_max, cfg.dt_grid, cfg.terminal_mode, wet_mass)
    return solve(prob, mpc_cfg)


def _ideal_state(plan, scenario, t, mass_model: MassModel, cfg: DataConfig,
                 mpc_cfg: MpcConfig):
    k = min(int(np.searchsorted(plan.times, t, side="right")) - 1, len(plan.u_seq) - 1)
    x = plan.x_seq[k]
    if t > plan.times[k]:
        dyn = RelativeDynamics(scenario.iso, 0.0, mass_model.wet_mass, mpc_cfg.substep)
        x = dyn.propagate(x, plan.u_seq[k], plan.times[k], t - plan.times[k])
    dt = np.diff(plan.times)
    spent = np.sum(np.linalg.norm(plan.u_seq[:k], axis=1) * dt[:k])
    spent += np.linalg.norm(plan.u_seq[k]) * (t - plan.times[k])
    m = mass_model.wet_mass - spent * N_TO_KN / (mass_model.isp * mass_model.g0)
    return x, max(m, mass_model.min_mass)


def label_row(x_bar, oe_bar, t_bar, rho, t_f, mass, cfg: DataConfig,
              mpc_cfg: MpcConfig = LABEL_MPC):
    """(u_label, x_rollout_label, solution) for one perturbed state."""
    prob = MpcProblem(x_bar, oe_bar, t_bar, t_f, rho, cfg.c0, cfg.c1, cfg.u_max, cfg.dt_grid,
                      cfg.terminal_mode, mass)
    sol = solve(prob, mpc_cfg)
    u = sol.first_control
    xr = rollout_label(x_bar, oe_bar, t_bar, cfg.dt_bar, u, mass, cfg.rollout_steps)
    return u, xr, sol


def rollout_label(x_bar, oe_bar, t_bar, dt_bar, u, mass, steps):
    params = DynamicsParams(oe_bar, MassModel(wet_mass=mass, isp=math.inf, min_mass=0.5 * mass))
    tr = integrate(np.asarray(x_bar, float), oe_bar, t_bar, t_bar + dt_bar, zoh(u), params,
                   dt_bar / steps, m0=mass)
    return tr.states[-1]


def generate_dataset(catalog: Catalog, profile: UncertaintyProfile, cfg: DataConfig = DataConfig(),
                     rng_seed: int = 0, mpc_cfg: MpcConfig = LABEL_MPC,
                     mass_model: MassModel = MassModel(), progress=None) -> Dataset:
    """Sample perturbed states around noiseless plans and label them.

    Rows whose label problem is infeasible are dropped; the count is kept
    in ``meta["dropped"]``.
    """
    cfg.validate()
    train = catalog.train
    if not train:
        raise ValueError("catalog has no training scenarios")
    plans = {}
    rng = np.random.default_rng(rng_seed)
    n_state = int(round(cfg.state_fraction * cfg.n_samples))
    rows, dropped = [], 0
    for i in range(cfg.n_samples):
        sc = train[int(rng.integers(len(train)))]
        t_hi = sc.t_f - cfg.dt_bar - cfg.margin
        if i < n_state:
            t_hi = min(t_hi, cfg.t_state)
        t_bar = float(rng.uniform(0.0, t_hi))
        row_rng = np.random.default_rng([rng_seed, i])
        if sc.id not in plans:
            plans[sc.id] = ideal_plan(sc, cfg, mpc_cfg, mass_model.wet_mass)
        x_id, m = _ideal_state(plans[sc.id], sc, t_bar, mass_model, cfg, mpc_cfg)
        oe_true = iso_flow(sc.iso, t_bar)
        x_bar, oe_bar = estimate(x_id, oe_true, t_bar, profile, row_rng)
        try:
            u, xr, sol = label_row(x_bar, oe_bar, t_bar, sc.rho, sc.t_f, m, cfg, mpc_cfg)
        except MpcInfeasible:
            dropped += 1
            continue
        rows.append([sc.id, sc.t_f, t_bar, cfg.dt_bar, m, *x_bar, *oe_record(oe_bar),
                     *sc.rho, *u, *xr, sol.iterations, float(sol.converged),
                     sol.terminal_error, sol.cost])
        if progress:
            progress(i + 1, cfg.n_samples)
    meta = {"requested": cfg.n_samples, "dropped": dropped, "seed": rng_seed,
            "catalog_seed": catalog.seed, "config": asdict(cfg), "mpc": asdict(mpc_cfg),
            "profile": {k: list(v) if isinstance(v, tuple) else v
                        for k, v in asdict(profile).items()},
            "rollout_steps": cfg.rollout_steps}
    return Dataset(np.array(rows).reshape(-1, _NCOL), meta)


# ---------------------------------------------------------------------------
# network pieces with caches


def _net_forward(W, b, onorm, H):
    acts = [H]
    a = H
    for Wl, bl in zip(W, b):
        a = np.tanh(a @ Wl.T + bl)
        acts.append(a)
    return onorm * a, acts


def _net_backward(W, onorm, acts, gu, gW, gb):
    """Accumulate parameter grads; returns d/dH."""
    g = gu * onorm
    for l in range(len(W) - 1, -1, -1):
        gz = g * (1.0 - acts[l + 1] ** 2)
        gW[l] += gz.T @ acts[l]
        gb[l] += gz.sum(axis=0)
        g = gz @ W[l]
    return g


class _Normalized:
    """Effective weights plus what the backward pass through normalization needs."""

    def __init__(self, model: SnDnnModel, starts=None):
        self.model = model
        self.W, self.trip = [], []
        for l, om in enumerate(model.raw_weights):
            Wl, s, u, v = normalize_weight(om, model.c_nn, None if starts is None else starts[l])
            self.W.append(Wl)
            self.trip.append((s, u, v))

    def raw_grads(self, gW):
        m = self.model
        return [normalize_weight_backward(om, m.c_nn, s, u, v, g)
                for om, (s, u, v), g in zip(m.raw_weights, self.trip, gW)]

    def starts(self):
        return [v if np.any(v) else None for _, _, v in self.trip]


def _drift_batch(P, V, F):
    a = -frame_accel_batch(P, F)
    w = F[:, 1]
    a[:, 0] += 2.0 * w * V[:, 1]
    a[:, 1] -= 2.0 * w * V[:, 0]
    return a


def loss_and_grad(model: SnDnnModel, batch: Dataset, weights: LossWeights = LossWeights(),
                  need_grad: bool = True, norm: Optional[_Normalized] = None):
    """Summed loss over the batch and its gradient w.r.t. (raw weights, biases)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    norm = norm or _Normalized(model)
    W, b = norm.W, model.biases
    inorm, onorm = model.input_norm, model.output_norm
    B = len(batch)
    ns = batch.rollout_steps
    Fr = batch.frames()
    rho, tf, m = batch.RHO, batch.TF, batch.M
    bscale = (N_TO_KN / m)[:, None]
    t0 = batch.T
    h = (batch.DT / ns)[:, None]
    cx = weights.C_x.diagonal()
    use_x = weights.c_x > 0

    stages = []  # (P, V, tau, F, acts)
    # the rollout is carried as an increment from the start state so the
    # end-state residual keeps full relative precision
    x0 = batch.X
    y = np.zeros_like(x0)
    u0 = None
    n_eval = ns if use_x else 0
    for j in range(max(n_eval, 1)):
        k_prev = None
        ks = []
        for s, (c, fi) in enumerate(((0.0, 0), (0.5, 1), (0.5, 1), (1.0, 2))):
            Y = x0 + (y if k_prev is None else y + c * h * k_prev)
            F = Fr[:, j, fi]
            tau = tf - (t0 + (j + c) * h[:, 0])
            Hr = raw_features(Y[:, :3], Y[:, 3:], rho, tau, F)
            u, acts = _net_forward(W, b, onorm, Hr / inorm)
            if u0 is None:
                u0 = u
            a = _drift_batch(Y[:, :3], Y[:, 3:], F) + bscale * u
            k = np.hstack([Y[:, 3:], a])
            stages.append((Y, tau, F, acts))
            ks.append(k)
            k_prev = k
            if not use_x:
                break
        if not use_x:
            break
        y = y + h / 6.0 * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])

    du = u0 - batch.U
    per_row = weights.c_u * np.sum(du * du, axis=1)
    if use_x:
        dx = (x0 - batch.XR) + y
        per_row = per_row + np.sum(cx * dx * dx, axis=1)
    if not np.all(np.isfinite(per_row)):
        bad = int(np.flatnonzero(~np.isfinite(per_row))[0])
        raise TrainingError(f"non-finite loss at sample {int(batch.col('scenario')[bad])}:{bad}")
    loss = float(per_row.sum())
    if not need_grad:
        return loss, None

    gW = [np.zeros_like(w) for w in W]
    gb = [np.zeros_like(v) for v in b]

    def stage_back(idx, gk, gu_extra=None):
        """Pull a gradient on stage derivative k back to the stage state."""
        Y, tau, F, acts = stages[idx]
        gkp, gkv = gk[:, :3], gk[:, 3:]
        gu = bscale * gkv
        if gu_extra is not None:
            gu = gu + gu_extra
        gH = _net_backward(W, onorm, acts, gu, gW, gb) / inorm
        dP, dV = feature_jacobians(Y[:, :3], tau, F)
        gP = np.einsum("bfi,bf->bi", dP, gH)
        gV = np.einsum("bfi,bf->bi", dV, gH) + gkp
        gP -= np.einsum("bij,bi->bj", frame_accel_jacobian_batch(Y[:, :3], F), gkv)
        w = F[:, 1]
        gV[:, 1] += 2.0 * w * gkv[:, 0]
        gV[:, 0] -= 2.0 * w * gkv[:, 1]
        return np.hstack([gP, gV])

    gu0 = 2.0 * weights.c_u * du
    if use_x:
        gy = 2.0 * cx * dx
        for j in range(ns - 1, -1, -1):
            base = 4 * j
            gk4 = gy * h / 6.0
            gk3 = 2.0 * gy * h / 6.0
            gk2 = 2.0 * gy * h / 6.0
            gk1 = gy * h / 6.0
            gY = stage_back(base + 3, gk4)
            gy = gy + gY
            gk3 = gk3 + h * gY
            gY = stage_back(base + 2, gk3)
            gy = gy + gY
            gk2 = gk2 + 0.5 * h * gY
            gY = stage_back(base + 1, gk2)
            gy = gy + gY
            gk1 = gk1 + 0.5 * h * gY
            gy = gy + stage_back(base, gk1, gu0 if j == 0 else None)
    else:
        stage_back(0, np.zeros((B, 6)), gu0)
    return loss, (norm.raw_grads(gW), gb)


def loss(model, batch, weights: LossWeights = LossWeights()) -> float:
    return loss_and_grad(model, batch, weights, need_grad=False)[0]


def grad(model, batch, weights: LossWeights = LossWeights()):
    return loss_and_grad(model, batch, weights)[1]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    holdout_fraction: float = 0.1
    cosine: bool = False
    n_hidden: int = 6
    width: int = 64
    c_nn: float = 25.0
    u_max: float = 3.0
    output_margin: float = 1.5
    stop_test_loss: Optional[float] = None  # early-stop gate, per-row mean
    stop_eps_train: Optional[float] = None
    eval_every: int = 1

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.eval_every < 1:
            raise ValueError("invalid training configuration")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


def normalization_constants(ds: Dataset, u_max: float, margin: float = 1.5):
    """Per-feature max-abs input scales and per-axis output scales (<= u_max)."""
    tau = ds.TF - ds.T
    F = frame_arrays(ds.oes())
    Hr = raw_features(ds.X[:, :3], ds.X[:, 3:], ds.RHO, tau, F)
    inorm = np.max(np.abs(Hr), axis=0)
    inorm[inorm == 0] = 1.0
    onorm = np.minimum(u_max, margin * np.max(np.abs(ds.U), axis=0))
    onorm[onorm <= 0] = u_max
    return inorm, onorm


def split(ds: Dataset, holdout_fraction: float, seed: int):
    idx = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(math.floor(holdout_fraction * len(ds)))
    if n_test >= len(ds):
        n_test = len(ds) - 1
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def train(dataset: Dataset, cfg: TrainConfig = TrainConfig(), model: Optional[SnDnnModel] = None,
          progress=None):
    """Plain minibatch SGD on the mean per-row loss. Returns (model, history)."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    tr_idx, te_idx = split(dataset, cfg.holdout_fraction, cfg.seed)
    tr = dataset.subset(tr_idx)
    te = dataset.subset(te_idx) if len(te_idx) else None
    tr.frames()
    if te is not None:
        te.frames()
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        inorm, onorm = normalization_constants(tr, cfg.u_max, cfg.output_margin)
        model = SnDnnModel.init(rng, cfg.n_hidden, cfg.width, cfg.c_nn, cfg.u_max,
                                input_norm=inorm, output_norm=onorm)
    Wr = [w.copy() for w in model.raw_weights]
    br = [v.copy() for v in model.biases]
    starts = None
    history = []

    def record(epoch, model):
        row = {"epoch": epoch, "lr": lr_at(epoch),
               "train_loss": loss(model, tr, cfg.weights) / len(tr),
               "test_loss": loss(model, te, cfg.weights) / len(te) if te is not None else float("nan"),
               "eps_train": training_sup_error(model, tr)}
        history.append(row)
        return row

    def lr_at(epoch):
        if not cfg.cosine or cfg.epochs == 0:
            return cfg.lr
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))

    record(0, model)
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch)
        perm = rng.permutation(len(tr))
        for s in range(0, len(tr), cfg.batch_size):
            bidx = np.sort(perm[s:s + cfg.batch_size])
            cur = model.replace_params(Wr, br)
            norm = _Normalized(cur, starts)
            starts = norm.starts()
            _, (gW, gb) = loss_and_grad(cur, tr.subset(bidx), cfg.weights, norm=norm)
            scale = lr / len(bidx)
            for l in range(len(Wr)):
                Wr[l] = Wr[l] - scale * gW[l]
                br[l] = br[l] - scale * gb[l]
        model = model.replace_params(Wr, br)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            row = record(epoch, model)
            if not math.isfinite(row["train_loss"]) or row["train_loss"] > 1e12:
                raise TrainingError(f"training diverged at epoch {epoch}")
            if progress:
                progress(epoch, row)
            if (cfg.stop_test_loss is not None and cfg.stop_eps_train is not None
                    and row["test_loss"] <= cfg.stop_test_loss
                    and row["eps_train"] <= cfg.stop_eps_train):
                break
    return model, history


# ---------------------------------------------------------------------------
# certificate inputs


def predict(model: SnDnnModel, ds: Dataset) -> np.ndarray:
    """Network controls at the dataset rows (no time-to-go clamp needed there)."""
    tau = np.maximum(ds.TF - ds.T, model.tau_floor)
    Hr = raw_features(ds.X[:, :3], ds.X[:, 3:], ds.RHO, tau, frame_arrays(ds.oes()))
    return model.forward_raw(Hr)


def training_sup_error(model: SnDnnModel, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    return float(np.max(np.linalg.norm(predict(model, ds) - ds.U, axis=1)))


def nearest_training_distance(query, ds: Dataset) -> float:
    """Exact nearest-row distance; ``query`` is (x, oe, t, rho)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    x, oe, t, rho = query
    q = embed(np.asarray(x, float), np.asarray(oe.as_vector() if isinstance(oe, IsoElements) else oe,
                                               float), t, np.asarray(rho, float))[0]
    return float(np.min(np.linalg.norm(ds.embedding() - q, axis=1)))
