"""Spectrally normalized tanh MLP used as the terminal guidance policy.

Every affine layer uses W = c_nn * Omega / ||Omega||_2 so the network is
Lipschitz by construction; the last layer is also squashed by tanh and scaled
by u_max, which keeps each control component inside the thrust box.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import DynamicsParams, IsoElements, SpacecraftState, frame, frame_accel_batch, \
    frame_accel_jacobian_batch

N_FEATURES = 14
MODEL_MAGIC = b"NRSNDNN\x00"
MODEL_VERSION = 1
TAU_EPS = 1e-9


class HorizonError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceInput:
    x_hat: np.ndarray
    oe_hat: IsoElements
    t: float
    rho: np.ndarray
    t_f: float

    def __post_init__(self):
        if not self.t < self.t_f:
            raise HorizonError("guidance input needs t < t_f")


# ---------------------------------------------------------------------------
# spectral normalization


def power_iteration(M: np.ndarray, start: Optional[np.ndarray] = None, tol: float = 1e-10,
                    max_iter: int = 200):
    """Top singular triple (sigma, u, v) of ``M``.

    Starts from the normalized all-ones vector unless ``start`` is given.
    Stops once the right vector moves less than ``tol``; if the cap is hit
    the dense SVD is used instead, so the result is always accurate.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[1]
    scale = float(np.max(np.abs(M))) if M.size else 0.0
    if scale == 0.0:
        return 0.0, np.zeros(M.shape[0]), np.zeros(n)
    if not 1e-100 < scale < 1e100:
        # keep tiny or huge entries away from under/overflow
        s, u, v = power_iteration(M / scale, start, tol, max_iter)
        return s * scale, u, v
    v = np.ones(n) / math.sqrt(n) if start is None else start / np.linalg.norm(start)
    for _ in range(max_iter):
        u = M @ v
        un = np.linalg.norm(u)
        if un == 0.0:
            break
        u /= un
        v_new = M.T @ u
        sigma = np.linalg.norm(v_new)
        v_new /= sigma
        if np.linalg.norm(v_new - v) < tol:
            return float(u @ M @ v_new), u, v_new
        v = v_new
    U, S, Vt = np.linalg.svd(M)
    return float(S[0]), U[:, 0], Vt[0]


def spectral_norm(matrix) -> float:
    """Largest singular value; 0 for the zero matrix."""
    return power_iteration(matrix)[0]


def normalize_weight(omega: np.ndarray, c_nn: float, start=None):
    """Effective weight c_nn*Omega/||Omega|| with the singular triple used."""
    sigma, u, v = power_iteration(omega, start)
    if sigma == 0.0:
        return np.zeros_like(omega), sigma, u, v
    return c_nn * (omega / sigma), sigma, u, v


def normalize_weight_backward(omega, c_nn, sigma, u, v, grad_w):
    """Pull a gradient on W back to the raw matrix Omega."""
    if sigma == 0.0:
        return np.zeros_like(omega)
    return (c_nn / sigma) * (grad_w - (np.sum(grad_w * omega) / sigma) * np.outer(u, v))


# ---------------------------------------------------------------------------
# features


def raw_features(P, V, rho, tau, F) -> np.ndarray:
    """Un-normalized features, shape (N, 14).

    Blocks: offset to goal, closing-velocity residual, goal, time to go,
    frame rate, frame/gravity acceleration at p (per unit mass).
    """
    P, V, rho = np.atleast_2d(P), np.atleast_2d(V), np.atleast_2d(rho)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    F = np.atleast_2d(F)
    d = P - rho
    out = np.empty((P.shape[0], N_FEATURES))
    out[:, 0:3] = d
    out[:, 3:6] = d / tau[:, None] + V
    out[:, 6:9] = rho
    out[:, 9] = tau
    out[:, 10] = F[:, 1]
    out[:, 11:14] = frame_accel_batch(P, F)
    return out


def feature_jacobians(P, tau, F):
    """d features / dP and d features / dV, each (N, 14, 3)."""
    P = np.atleast_2d(P)
    n = P.shape[0]
    eye = np.eye(3)
    dP = np.zeros((n, N_FEATURES, 3))
    dV = np.zeros((n, N_FEATURES, 3))
    dP[:, 0:3] = eye
    dP[:, 3:6] = eye[None] / np.asarray(tau, float)[:, None, None]
    dP[:, 11:14] = frame_accel_jacobian_batch(P, np.atleast_2d(F))
    dV[:, 3:6] = eye
    return dP, dV


def featurize(inp: GuidanceInput, dyn: Optional[DynamicsParams] = None,
              input_norm: Optional[np.ndarray] = None) -> np.ndarray:
    """Normalized feature vector for one guidance query."""
    tau = inp.t_f - inp.t
    if tau < TAU_EPS:
        raise HorizonError(f"time to go {tau:.3e} s is too small")
    fr = frame(inp.oe_hat)
    x = np.asarray(inp.x_hat.x if isinstance(inp.x_hat, SpacecraftState) else inp.x_hat, float)
    f = raw_features(x[:3], x[3:6], inp.rho, tau, np.array([fr.r, fr.w, fr.wdot, fr.mu]))[0]
    return f if input_norm is None else f / input_norm


# ---------------------------------------------------------------------------
# model


@dataclass
class SnDnnModel:
    raw_weights: list
    biases: list
    c_nn: float = 25.0
    u_max: float = 3.0
    input_norm: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    output_norm: Optional[np.ndarray] = None
    tau_floor: float = 1.0  # time-to-go clamp used by the closed-loop policy

    def __post_init__(self):
        if len(self.raw_weights) != len(self.biases) or len(self.raw_weights) < 1:
            raise ValueError("need matching weight and bias lists")
        self.raw_weights = [np.asarray(w, dtype=float) for w in self.raw_weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        prev = self.raw_weights[0].shape[1]
        for w, b in zip(self.raw_weights, self.biases):
            if w.shape[1] != prev or b.shape != (w.shape[0],):
                raise ValueError("inconsistent layer shapes")
            prev = w.shape[0]
        self.input_norm = np.asarray(self.input_norm, dtype=float)
        if self.input_norm.shape != (self.n_inputs,) or np.any(self.input_norm <= 0):
            raise ValueError("input_norm must be positive with one entry per input")
        if self.output_norm is None:
            self.output_norm = np.full(self.n_outputs, self.u_max)
        self.output_norm = np.asarray(self.output_norm, dtype=float)
        if np.any(self.output_norm > self.u_max) or np.any(self.output_norm <= 0):
            raise ValueError("output_norm must lie in (0, u_max]")
        self._eff = None

    @classmethod
    def init(cls, rng, n_hidden: int = 6, width: int = 64, c_nn: float = 25.0,
             u_max: float = 3.0, n_in: int = N_FEATURES, n_out: int = 3, **kw) -> "SnDnnModel":
        sizes = [n_in] + [width] * n_hidden + [n_out]
        W = [rng.standard_normal((o, i)) / math.sqrt(i) for i, o in zip(sizes[:-1], sizes[1:])]
        b = [np.zeros(o) for o in sizes[1:]]
        return cls(W, b, c_nn, u_max, **kw)

    @property
    def n_layers(self) -> int:
        """Hidden-layer count."""
        return len(self.raw_weights) - 1

    @property
    def width(self) -> int:
        return self.raw_weights[0].shape[0]

    @property
    def n_inputs(self) -> int:
        return self.raw_weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.raw_weights[-1].shape[0]

    def effective_weights(self) -> list:
        if self._eff is None:
            self._eff = [normalize_weight(w, self.c_nn)[0] for w in self.raw_weights]
        return self._eff

    def replace_params(self, raw_weights, biases) -> "SnDnnModel":
        return SnDnnModel(raw_weights, biases, self.c_nn, self.u_max, self.input_norm,
                          self.output_norm, self.tau_floor)

    # -- evaluation -------------------------------------------------------
    def forward_normalized(self, H) -> np.ndarray:
        """Controls (N, 3) in N from normalized features (N, n_in)."""
        H = np.atleast_2d(H)
        if H.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} features, got {H.shape[1]}")
        H = H.T
        for W, b in zip(self.effective_weights(), self.biases):
            H = np.tanh(W @ H + b[:, None])
        return (self.output_norm[:, None] * H).T

    def forward_raw(self, F_raw) -> np.ndarray:
        return self.forward_normalized(np.atleast_2d(F_raw) / self.input_norm)

    def __call__(self, x, oe: IsoElements, t: float, rho, t_f: float) -> np.ndarray:
        """u_l(x, oe, t, rho) in N, with time-to-go clamped at ``tau_floor``."""
        tau = max(t_f - t, self.tau_floor)
        fr = frame(oe)
        px, py, pz, vx, vy, vz = (float(c) for c in x[:6])
        rx, ry, rz = float(rho[0]), float(rho[1]), float(rho[2])
        dx, dy, dz = px - rx, py - ry, pz - rz
        Rx = fr.r + px
        d2 = Rx * Rx + py * py + pz * pz
        k = fr.mu / (d2 * math.sqrt(d2))
        w2, wd = fr.w * fr.w, fr.wdot
        h = np.array([dx, dy, dz, dx / tau + vx, dy / tau + vy, dz / tau + vz, rx, ry, rz,
                      tau, fr.w,
                      -w2 * px - wd * py + k * Rx - fr.mu / fr.r**2,
                      -w2 * py + wd * px + k * py, k * pz]) / self.input_norm
        for W, b in zip(self.effective_weights(), self.biases):
            h = np.tanh(W @ h + b)
        return self.output_norm * h

    def policy(self, rho, t_f: float):
        """Closed-loop callback for ``dynamics.integrate``."""
        rho = np.asarray(rho, dtype=float)
        return lambda t, x, oe, m: self(x, oe, t, rho, t_f)


def forward(model: SnDnnModel, inp: GuidanceInput, dyn: Optional[DynamicsParams] = None):
    if dyn is not None and dyn.u_max < model.u_max:
        raise ValueError("model output scale exceeds the dynamics thrust box")
    return model.forward_normalized(featurize(inp, dyn, model.input_norm))[0]


def core_lipschitz(model: SnDnnModel) -> float:
    """c_nn^(hidden+1), the bound for the tanh stack alone (L_tanh = 1)."""
    return model.c_nn ** (model.n_layers + 1)


def lipschitz_bound(model: SnDnnModel) -> float:
    """2-norm Lipschitz bound of raw features -> control in N.

    Chain rule: input scaling contributes 1/min(input_norm), the stack
    c_nn^(hidden+1), and the output scaling max(output_norm).
    """
    return core_lipschitz(model) * float(np.max(model.output_norm)) / float(np.min(model.input_norm))


def empirical_lipschitz(model: SnDnnModel, rng, n_pairs: int = 10000, scale: float = 1.0,
                        rel_step: float = 1e-3) -> float:
    """Max ||du||/||df|| over random nearby raw-feature pairs."""
    F = rng.standard_normal((n_pairs, model.n_inputs)) * model.input_norm * scale
    D = rng.standard_normal((n_pairs, model.n_inputs)) * model.input_norm * rel_step
    du = model.forward_raw(F + D) - model.forward_raw(F)
    return float(np.max(np.linalg.norm(du, axis=1) / np.linalg.norm(D, axis=1)))


# ---------------------------------------------------------------------------
# serialization

_HEADER = struct.Struct("<8sIIIIIddd")


def save(model: SnDnnModel, path) -> None:
    head = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.n_layers, model.width,
                        model.n_inputs, model.n_outputs, model.c_nn, model.u_max,
                        model.tau_floor)
    body = [np.ascontiguousarray(a, dtype="<f8").tobytes()
            for w, b in zip(model.raw_weights, model.biases) for a in (w, b)]
    body += [np.asarray(model.input_norm, "<f8").tobytes(),
             np.asarray(model.output_norm, "<f8").tobytes()]
    Path(path).write_bytes(head + b"".join(body))


def load(path) -> SnDnnModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    _, version, n_hidden, width, n_in, n_out, c_nn, u_max, tau_floor = _HEADER.unpack_from(data)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    sizes = [n_in] + [width] * n_hidden + [n_out]
    need = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:])) + n_in + n_out
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if flat.size != need or (len(data) - _HEADER.size) % 8:
        raise ValueError(f"{path}: truncated or corrupt model file")
    W, b, k = [], [], 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        W.append(flat[k:k + o * i].reshape(o, i).astype(float))
        k += o * i
        b.append(flat[k:k + o].astype(float))
        k += o
    inorm = flat[k:k + n_in].astype(float)
    onorm = flat[k + n_in:k + n_in + n_out].astype(float)
    return SnDnnModel(W, b, c_nn, u_max, inorm, onorm, tau_floor)
