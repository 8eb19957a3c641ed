"""Closed-form and quadrature evaluators for the guidance/control guarantees."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

RATE_COLLISION = 1e-12


class RateCollisionError(ValueError):
    """Closed form undefined because two decay rates coincide."""


@dataclass(frozen=True)
class BoundInputs:
    """Scalars feeding the delivery-error and probability bounds.

    Errors at the switch time ``t_s`` are measured on estimates; ``c_e``
    inflates them to cover every true state consistent with the estimate.
    ``varsigma`` (absolute time -> expected error) overrides the default
    envelope c_e*exp(-beta (t - t_s)) + c in the quadrature evaluator.
    """

    alpha: float
    lambda_min: float
    lambda_max: float
    L_k: float
    m_f: float
    t_s: float
    t_f: float
    p_err_s: float = 0.0  # ||p_hat(t_s) - p_d(t_s)||, km
    x_err_s: float = 0.0  # ||x_hat(t_s) - x_d(t_s)||
    c_e: float = 0.0
    beta: float = 0.0
    c: float = 0.0
    sigma_bar: float = 0.0
    k_e: float = 10.0
    eps_est: float = 0.0
    eps_err: float = 0.0
    delta_p: Optional[float] = None
    v_bar: float = 1.0
    v_s: Optional[float] = None
    varsigma: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if not (self.alpha > 0 and self.lambda_min > 0):
            raise ValueError("alpha and lambda_min must be positive")
        if self.lambda_max < self.lambda_min:
            raise ValueError("lambda_max must be >= lambda_min")
        if not self.t_s < self.t_f:
            raise ValueError("need t_s < t_f")
        if not self.m_f > 0:
            raise ValueError("m_f must be positive")
        if min(self.L_k, self.p_err_s, self.x_err_s, self.c_e, self.c, self.sigma_bar) < 0:
            raise ValueError("L_k, errors and envelope constants must be non-negative")

    @property
    def horizon(self) -> float:
        return self.t_f - self.t_s

    def v_sup(self, inflation: Optional[float] = None) -> float:
        """Bound on v(x_s, t_s) over the estimation set."""
        if self.v_s is not None:
            return self.v_s
        ce = self.c_e if inflation is None else inflation
        return (self.lambda_max + 1.0) * (self.x_err_s + ce)

    def envelope(self, t):
        if self.varsigma is not None:
            return np.vectorize(self.varsigma, otypes=[float])(t)
        return self.c_e * np.exp(-self.beta * (np.asarray(t) - self.t_s)) + self.c

    def echo(self) -> dict:
        d = asdict(self)
        d["varsigma"] = "callback" if self.varsigma is not None else "exponential"
        return d


def decay_gap(a: float, b: float, T: float) -> float:
    """(e^{-bT} - e^{-aT})/(a - b), continuous at a = b where it is T e^{-bT}.

    Symmetric in (a, b); factoring out the slower decay keeps it finite.
    """
    lo, d = min(a, b), abs(a - b)
    x = d * T
    if x < 1e-8:
        return T * math.exp(-lo * T) * (1.0 - 0.5 * x)
    return math.exp(-lo * T) * (-math.expm1(-x)) / d


def _first_and_third(inp: BoundInputs, inflation: float) -> tuple[float, float]:
    T = inp.horizon
    first = math.exp(-inp.lambda_min * T) * (inp.p_err_s + inflation)
    third = decay_gap(inp.alpha, inp.lambda_min, T) * inp.v_sup(inflation) / math.sqrt(inp.m_f)
    return first, third


# ---------------------------------------------------------------------------
# guidance and control optimality gaps


def guidance_gap(eps_train: float, r: float, L_ell: float, L_mpc: float) -> float:
    if min(eps_train, r, L_ell, L_mpc) < 0:
        raise ValueError("inputs must be non-negative")
    return eps_train + r * (L_ell + L_mpc)


def control_gap(eps_lu, L_ell, L_f, m0, lambda_max, alpha, d_oe, d_x) -> float:
    if min(eps_lu, L_ell, L_f, m0, lambda_max, alpha, d_oe, d_x) < 0:
        raise ValueError("inputs must be non-negative")
    return (eps_lu + (L_ell + m0 * L_f) * d_oe
            + (L_ell + m0 * (L_f + lambda_max * (alpha + 1.0) + alpha)) * d_x)


# ---------------------------------------------------------------------------
# delivery error


def _trapezoid_term(inp: BoundInputs, n: int) -> float:
    """e^{-lmin t_f} int_{t_s}^{t_f} varpi, trapezoid rule on n intervals.

    Written in shifted time so no exponential overflows:
    integrand(tau) = e^{-lmin (t_f - tau)} J(tau), J(tau) = int e^{-alpha(tau - s)} sigma(s) ds.
    """
    T = inp.horizon
    h = T / n
    tau = inp.t_s + h * np.arange(n + 1)
    sig = inp.envelope(tau)
    decay = math.exp(-inp.alpha * h)
    # J_{k+1} = decay J_k + h/2 (decay sig_k + sig_{k+1})
    incr = 0.5 * h * (decay * sig[:-1] + sig[1:])
    J = np.empty(n + 1)
    J[0] = 0.0
    acc = 0.0
    for k in range(n):
        acc = decay * acc + incr[k]
        J[k + 1] = acc
    g = np.exp(-inp.lambda_min * (inp.t_f - tau)) * J
    return h * (g.sum() - 0.5 * (g[0] + g[-1]))


def varpi_integral(inp: BoundInputs, step: Optional[float] = None, rtol: float = 1e-8):
    """Richardson-extrapolated trapezoid value of the varpi double integral.

    Returns (value, agreed) where ``agreed`` tells whether two successive
    extrapolations matched to ``rtol``.
    """
    if step is None:
        step = inp.horizon / 1e4
    if not step > 0:
        raise ValueError("quadrature step must be positive")
    n = max(2, int(math.ceil(inp.horizon / step)))
    t1, t2, t4 = (_trapezoid_term(inp, k * n) for k in (1, 2, 4))
    r1 = (4.0 * t2 - t1) / 3.0
    r2 = (4.0 * t4 - t2) / 3.0
    agreed = abs(r2 - r1) <= rtol * max(abs(r2), 1e-300)
    return r2, agreed


def delivery_bound_quadrature(inp: BoundInputs, step: Optional[float] = None) -> float:
    """Three-term delivery-error bound with the envelope integral done numerically."""
    first, third = _first_and_third(inp, inp.c_e)
    integral, agreed = varpi_integral(inp, step)
    if not agreed:
        warnings.warn("delivery bound quadrature did not pass the halving check", RuntimeWarning)
    return first + inp.L_k / inp.m_f * integral + third


def _check_rates(*pairs):
    for a, b, name in pairs:
        if abs(a - b) <= RATE_COLLISION * max(abs(a), abs(b)):
            raise RateCollisionError(f"rates {name} coincide; use delivery_bound_quadrature")


def example1_varpi_term(inp: BoundInputs) -> float:
    a, l, b, T = inp.alpha, inp.lambda_min, inp.beta, inp.horizon
    gl_a = decay_gap(a, l, T)
    exp_part = inp.c_e / (a - b) * (decay_gap(b, l, T) - gl_a)
    const_part = inp.c / a * (-math.expm1(-l * T) / l - gl_a)
    return inp.L_k / inp.m_f * (exp_part + const_part)


def delivery_bound_example1(inp: BoundInputs) -> float:
    """Closed-form bound for an exponentially decaying estimation envelope."""
    _check_rates((inp.alpha, inp.beta, "alpha/beta"), (inp.beta, inp.lambda_min, "beta/lambda"),
                 (inp.lambda_min, inp.alpha, "lambda/alpha"))
    first, third = _first_and_third(inp, inp.c_e)
    return first + third + example1_varpi_term(inp)


def example1_limit(inp: BoundInputs) -> float:
    """Large-horizon value L_k c / (m_f alpha lambda_min)."""
    return inp.L_k * inp.c / (inp.m_f * inp.alpha * inp.lambda_min)


def delivery_bound_example2(inp: BoundInputs) -> float:
    """Bound when only a constant expected-error level sigma_bar is known.

    The envelope is the constant sigma_bar, so it also sets the level of
    the integral term.
    """
    if inp.sigma_bar < 0:
        raise ValueError("sigma_bar must be >= 0")
    first, third = _first_and_third(inp, inp.sigma_bar)
    a, l, T = inp.alpha, inp.lambda_min, inp.horizon
    last = inp.L_k * inp.sigma_bar / (inp.m_f * a) * (-math.expm1(-l * T) / l - decay_gap(a, l, T))
    return first + third + last


def delivery_bound(inp: BoundInputs) -> float:
    """Example-1 closed form, falling back to quadrature on rate collisions."""
    try:
        return delivery_bound_example1(inp)
    except RateCollisionError:
        return delivery_bound_quadrature(inp)


# ---------------------------------------------------------------------------
# probabilities


@dataclass(frozen=True)
class ExitResult:
    eps_exit: float
    branch: int
    prob_branch1: float
    prob_branch2: float
    alpha_bar: float
    H: float
    h_sup: float


def exit_probability(inp: BoundInputs, n: int = 10000, detail: bool = False):
    """Probability mass of leaving the tracking tube, two-branch form."""
    delta_p = 0.5 * inp.alpha * math.sqrt(inp.m_f) if inp.delta_p is None else inp.delta_p
    a_bar = min(inp.alpha - delta_p / math.sqrt(inp.m_f), inp.lambda_min)
    if not a_bar > 0:
        raise ValueError("alpha_bar <= 0; reduce delta_p")
    if not inp.v_bar > 0:
        raise ValueError("v_bar must be positive")
    tau = np.linspace(inp.t_s, inp.t_f, n + 1)
    h = inp.L_k * inp.envelope(tau) / math.sqrt(inp.m_f)
    H = float(np.trapezoid(h, tau))
    h_sup = float(np.max(h))
    E_s = inp.v_sup() + delta_p * inp.p_err_s
    p1 = (1.0 - E_s / inp.v_bar) * math.exp(-H / inp.v_bar)
    if h_sup > 0:
        Hb = 2.0 * H * a_bar / h_sup
        p2 = 1.0 - (a_bar * E_s + math.expm1(Hb) * h_sup) / (a_bar * inp.v_bar * math.exp(Hb))
    else:
        p2 = 1.0 - E_s / inp.v_bar
    branch = 1 if inp.v_bar >= h_sup / a_bar else 2
    p = min(1.0, max(0.0, p1 if branch == 1 else p2))
    eps = 1.0 - p
    if detail:
        return ExitResult(eps, branch, p1, p2, a_bar, H, h_sup)
    return eps


def ctrl_probability(eps_exit: float, eps_est: float, eps_err: float, k_e: float) -> float:
    """Probability 1 - eps_ctrl that the delivery bound holds."""
    for e in (eps_exit, eps_est, eps_err):
        if not 0.0 <= e <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
    if not k_e > 0:
        raise ValueError("k_e must be positive")
    markov = 1.0 if math.isinf(k_e) else 1.0 - 1.0 / k_e
    p = (1.0 - eps_exit) * (1.0 - eps_est) * (1.0 - eps_err) * markov
    return min(1.0, max(0.0, p))


def bound_report(inp: BoundInputs, eps_train: float = 0.0, r: float = 0.0, L_ell: float = 0.0,
                 L_mpc: float = 0.0, L_f: float = 0.0, m0: Optional[float] = None,
                 d_oe: float = 0.0, d_x: float = 0.0) -> dict:
    """Every calculator evaluated on one input set; plain dict for serialization."""
    out = {"inputs": inp.echo()}
    eps_lu = guidance_gap(eps_train, r, L_ell, L_mpc)
    out["guidance_gap"] = eps_lu
    out["control_gap"] = control_gap(eps_lu, L_ell, L_f, inp.m_f if m0 is None else m0,
                                     inp.lambda_max, inp.alpha, d_oe, d_x)
    step = inp.horizon / 1e4
    out["quadrature_step"] = step
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out["delivery_quadrature"] = delivery_bound_quadrature(inp, step)
    out["quadrature_warning"] = bool(caught)
    try:
        out["delivery_example1"] = delivery_bound_example1(inp)
        out["example1_branch"] = "closed-form"
    except RateCollisionError:
        out["delivery_example1"] = out["delivery_quadrature"]
        out["example1_branch"] = "quadrature-fallback"
    out["example1_limit"] = example1_limit(inp)
    out["delivery_example2"] = delivery_bound_example2(inp)
    ex = exit_probability(inp, detail=True)
    out["eps_exit"] = ex.eps_exit
    out["exit_branch"] = ex.branch
    out["alpha_bar"] = ex.alpha_bar
    out["prob_ctrl"] = ctrl_probability(ex.eps_exit, inp.eps_est, inp.eps_err, inp.k_e)
    return out


def format_report(report: dict) -> str:
    lines = ["# neural_rendezvous bound report v1"]
    for k, v in report.items():
        if isinstance(v, dict):
            for kk, vv in v.items():
                lines.append(f"{k}.{kk} = {vv!r}")
        else:
            lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"
