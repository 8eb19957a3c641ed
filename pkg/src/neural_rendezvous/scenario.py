"""Synthetic hyperbolic-target scenarios and the navigation-error model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dynamics import (AU_KM, MU_SUN, DynamicsParams, IsoElements, SpacecraftState,
                       frame, integrate, iso_flow)

CATALOG_MAGIC = "# neural_rendezvous catalog v1"


@dataclass(frozen=True)
class Scenario:
    id: int
    iso: IsoElements  # at t = 0
    x0: SpacecraftState
    t_f: float
    rho: np.ndarray
    seed: int

    def __post_init__(self):
        if not self.t_f > 0.0:
            raise ValueError("t_f must be positive")
        rho = np.asarray(self.rho, dtype=float).reshape(3)
        if not np.all(np.isfinite(rho)):
            raise ValueError("rho must be finite")
        object.__setattr__(self, "rho", rho)


@dataclass(frozen=True)
class CatalogRanges:
    """Sampling ranges for synthetic flyby scenarios."""

    perihelion_au: tuple = (0.5, 3.0)
    v_inf: tuple = (10.0, 40.0)  # hyperbolic excess speed, km/s
    inclination: tuple = (0.0, math.pi)
    # true anomaly at encounter as a fraction of the asymptote angle
    encounter_fraction: tuple = (-0.7, 0.7)
    rel_speed: tuple = (10.0, 60.0)  # km/s at encounter
    miss_km: tuple = (0.0, 1000.0)  # ballistic miss without guidance
    t_f: float = 86400.0
    rho_radius: float = 100.0
    step: float = 60.0

    def validate(self):
        for name in ("perihelion_au", "v_inf", "inclination", "encounter_fraction",
                     "rel_speed", "miss_km"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"invalid range {name}: min {lo} > max {hi}")
        if self.perihelion_au[0] <= 0 or self.v_inf[0] <= 0:
            raise ValueError("perihelion and v_inf must be positive")
        if not -1.0 < self.encounter_fraction[0] and self.encounter_fraction[1] < 1.0:
            raise ValueError("encounter_fraction must lie inside (-1, 1)")
        if self.t_f <= 0 or self.rho_radius < 0 or self.step <= 0:
            raise ValueError("t_f, step must be positive and rho_radius non-negative")


@dataclass
class Catalog:
    scenarios: list
    n_train: int
    seed: int = 0
    ranges: CatalogRanges = field(default_factory=CatalogRanges)

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self) -> Iterator[Scenario]:
        return iter(self.scenarios)

    def __getitem__(self, i):
        return self.scenarios[i]

    @property
    def train(self) -> list:
        return self.scenarios[:self.n_train]

    @property
    def test(self) -> list:
        return self.scenarios[self.n_train:]


def _unit(rng) -> np.ndarray:
    d = rng.standard_normal(3)
    return d / np.linalg.norm(d)


def generate_catalog(n: int, rng_seed: int, ranges: CatalogRanges | None = None,
                     train_fraction: float = 0.8) -> Catalog:
    """Deterministic catalog of ``n`` flyby scenarios.

    Each target is a hyperbolic heliocentric orbit; the spacecraft initial
    state is obtained by integrating a ballistic arc backward from a point
    near the desired terminal position, so the uncontrolled miss is bounded
    by ``ranges.miss_km``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ranges = ranges or CatalogRanges()
    ranges.validate()
    rng = np.random.default_rng(rng_seed)
    seeds = rng.integers(0, 2**63, size=n)
    out = []
    for i in range(n):
        u = lambda r: rng.uniform(*r)
        q = u(ranges.perihelion_au) * AU_KM
        vinf = u(ranges.v_inf)
        a = -MU_SUN / vinf**2
        e = 1.0 - q / a
        nu_inf = math.acos(-1.0 / e)
        nu_f = u(ranges.encounter_fraction) * nu_inf
        oe_f = IsoElements(a, e, u(ranges.inclination), rng.uniform(0, 2 * math.pi),
                           rng.uniform(0, 2 * math.pi), nu_f, ranges.t_f)
        oe0 = iso_flow(oe_f, -ranges.t_f)
        rho = ranges.rho_radius * _unit(rng)
        p_f = rho + u(ranges.miss_km) * _unit(rng)
        v_f = u(ranges.rel_speed) * _unit(rng)
        back = integrate(np.concatenate([p_f, v_f]), oe_f, ranges.t_f, 0.0, None,
                         DynamicsParams(oe_f), ranges.step)
        out.append(Scenario(i, oe0, SpacecraftState.from_vector(back.states[-1]),
                            ranges.t_f, rho, int(seeds[i])))
    n_train = int(math.floor(train_fraction * n + 1e-9))
    n_train = min(n - 1, n_train) if n > 1 else n
    return Catalog(out, n_train, rng_seed, ranges)


_CAT_COLUMNS = ("id", "a", "e", "i", "raan", "argp", "nu", "epoch", "mu",
                "px", "py", "pz", "vx", "vy", "vz", "t_f", "rho_x", "rho_y", "rho_z", "seed")


def save_catalog(catalog: Catalog, path) -> None:
    lines = [CATALOG_MAGIC, f"# n_train={catalog.n_train} seed={catalog.seed}",
             ",".join(_CAT_COLUMNS)]
    for s in catalog:
        o = s.iso
        vals = [s.id, o.semi_major_axis, o.eccentricity, o.inclination, o.raan,
                o.arg_periapsis, o.anomaly, o.epoch, o.mu_sun, *s.x0.p, *s.x0.v,
                s.t_f, *s.rho, s.seed]
        lines.append(",".join(repr(float(v)) if not isinstance(v, int) else str(v)
                              for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_catalog(path) -> Catalog:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != CATALOG_MAGIC:
        raise ValueError(f"{path}: not a catalog file")
    meta = dict(kv.split("=") for kv in text[1][2:].split())
    if tuple(text[2].split(",")) != _CAT_COLUMNS:
        raise ValueError(f"{path}: unexpected column layout")
    out = []
    for line in text[3:]:
        f = line.split(",")
        v = [float(x) for x in f[1:-1]]
        oe = IsoElements(*v[0:8])
        out.append(Scenario(int(f[0]), oe, SpacecraftState(v[8:11], v[11:14]), v[14],
                            np.array(v[15:18]), int(f[-1])))
    return Catalog(out, int(meta["n_train"]), int(meta["seed"]))


# ---------------------------------------------------------------------------
# navigation error model


@dataclass(frozen=True)
class Envelope:
    """Expected-error bound e^{-beta (t - t_s)} err0 + c."""

    beta: float
    c: float


@dataclass(frozen=True)
class UncertaintyProfile:
    """Per-axis 1-sigma schedule (along pos, cross pos, along vel, cross vel).

    sigma(t) = (sigma0 - c) exp(-beta t) + c with floor c = floor_ratio*sigmaf
    and beta chosen so that sigma(t_f) = sigmaf.
    """

    sigma0: tuple = (1e4, 1e2, 1e-2, 1e-2)
    sigmaf: tuple = (1e1, 1e0, 1e-4, 1e-4)
    t_f: float = 86400.0
    floor_ratio: float = 0.1

    def __post_init__(self):
        s0, sf = np.asarray(self.sigma0, float), np.asarray(self.sigmaf, float)
        if s0.shape != (4,) or sf.shape != (4,):
            raise ValueError("sigma0 and sigmaf need 4 entries")
        if np.any(s0 < 0) or np.any(sf < 0) or np.any(sf > s0):
            raise ValueError("need 0 <= sigmaf <= sigma0")
        if not (0.0 <= self.floor_ratio < 1.0) or self.t_f <= 0:
            raise ValueError("floor_ratio in [0, 1) and t_f > 0 required")

    @classmethod
    def zero(cls, t_f: float = 86400.0) -> "UncertaintyProfile":
        return cls((0.0,) * 4, (0.0,) * 4, t_f)

    @property
    def c(self) -> np.ndarray:
        return self.floor_ratio * np.asarray(self.sigmaf, float)

    @property
    def beta(self) -> np.ndarray:
        s0, sf, c = np.asarray(self.sigma0, float), np.asarray(self.sigmaf, float), self.c
        out = np.zeros(4)
        ok = (sf - c > 0) & (s0 > sf)
        out[ok] = np.log((s0[ok] - c[ok]) / (sf[ok] - c[ok])) / self.t_f
        return out

    def sigma(self, t: float) -> np.ndarray:
        c = self.c
        return (np.asarray(self.sigma0, float) - c) * np.exp(-self.beta * t) + c

    def sigma6(self, t: float) -> np.ndarray:
        s = self.sigma(t)
        return np.array([s[0], s[1], s[1], s[2], s[3], s[3]])

    @property
    def is_zero(self) -> bool:
        return not any(self.sigma0)

    def envelope(self) -> Envelope:
        """Single-rate envelope dominating the expected 6-vector error norm."""
        c6 = self.c[[0, 1, 1, 2, 3, 3]]
        b = self.beta
        active = b[b > 0]
        return Envelope(float(active.min()) if active.size else 0.0, float(np.linalg.norm(c6)))

    def err0(self, t_s: float) -> float:
        """Decaying part of the expected-error envelope at ``t_s``."""
        c6 = self.c[[0, 1, 1, 2, 3, 3]]
        return float(np.linalg.norm(self.sigma6(t_s) - c6))


def varsigma(env, err0: float, t: float, t_s: float) -> float:
    """Expected-error envelope e^{-beta (t - t_s)} err0 + c."""
    if isinstance(env, UncertaintyProfile):
        env = env.envelope()
    if t < t_s:
        raise ValueError("t must be >= t_s")
    return math.exp(-env.beta * (t - t_s)) * err0 + env.c


def noise_axes(oe: IsoElements) -> np.ndarray:
    """Rows: along-track, two cross-track unit vectors, expressed in LVLH.

    Along-track is the target's heliocentric velocity direction.
    """
    nu, e = oe.anomaly, oe.eccentricity
    # velocity direction in LVLH: radial and transverse components
    along = np.array([e * math.sin(nu), 1.0 + e * math.cos(nu), 0.0])
    along /= np.linalg.norm(along)
    normal = np.array([0.0, 0.0, 1.0])
    return np.vstack([along, normal, np.cross(along, normal)])


def _draw(sig6, axes, rng):
    n = rng.standard_normal(6) * sig6
    return axes.T @ n[:3], axes.T @ n[3:]


def estimate(x_true, oe_true: IsoElements, t: float, profile: UncertaintyProfile, rng):
    """Noisy estimates of the relative state and of the target elements.

    The relative state and the target heliocentric state receive independent
    zero-mean Gaussian errors with the profile's per-axis sigma at ``t``.
    """
    x = x_true.x if isinstance(x_true, SpacecraftState) else np.asarray(x_true, float)
    if profile.is_zero:
        return x.copy(), oe_true
    sig6 = profile.sigma6(t)
    axes = noise_axes(oe_true)
    dp, dv = _draw(sig6, axes, rng)
    x_hat = x + np.concatenate([dp, dv])
    rot = frame(oe_true).rot
    r, v = oe_true.state()
    dr, dvi = _draw(sig6, axes @ rot, rng)
    oe_hat = IsoElements.from_state(r + dr, v + dvi, oe_true.epoch, oe_true.mu_sun)
    return x_hat, oe_hat
