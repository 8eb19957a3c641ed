import math

import numpy as np
import pytest

from neural_rendezvous.dynamics import AU_KM, MU_SUN, DynamicsParams, IsoElements, MassModel
from neural_rendezvous.sndnn import SnDnnModel
from neural_rendezvous.tracking import build_desired


def hyperbolic_elements(q_au=1.2, v_inf=26.0, inc=1.1, raan=0.4, argp=2.0, nu=0.3):
    a = -MU_SUN / v_inf**2
    e = 1.0 - q_au * AU_KM / a
    return IsoElements(a, e, inc, raan, argp, nu)


@pytest.fixture
def oe():
    return hyperbolic_elements()


@pytest.fixture
def dyn(oe):
    return DynamicsParams(oe, MassModel(), 3.0)


def small_model(seed=0, n_hidden=2, width=16, c_nn=2.0, scale=None):
    """Randomly initialized network with realistic feature scales."""
    rng = np.random.default_rng(seed)
    inorm = np.array([1e4] * 3 + [1.0] * 3 + [100.0] * 3 + [86400.0, 1e-7] + [1e-8] * 3)
    return SnDnnModel.init(rng, n_hidden, width, c_nn, 3.0, input_norm=inorm,
                           output_norm=np.full(3, 0.05 if scale is None else scale))


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def rho():
    return np.array([60.0, -70.0, 30.0])


@pytest.fixture
def traj(model, oe, dyn, rho):
    x0 = np.array([800.0, -300.0, 200.0, -0.01, 0.005, -0.002])
    return build_desired(model, x0, oe, 0.0, 6 * 3600.0, rho, dyn, 60.0, 150.0)


MASS = 150.0


def short_trajectories(n=6):
    """A handful of short desired trajectories from different models and start states."""
    rng = np.random.default_rng(0)
    out = []
    for k in range(n):
        oe = hyperbolic_elements(q_au=float(rng.uniform(0.6, 2.0)), nu=float(rng.uniform(-0.5, 0.5)))
        dyn = DynamicsParams(oe, MassModel(), 3.0)
        x0 = np.concatenate([rng.uniform(-2000, 2000, 3), rng.uniform(-0.02, 0.02, 3)])
        out.append(build_desired(small_model(seed=k), x0, oe, 0.0, 3600.0,
                                 rng.uniform(-100, 100, 3), dyn, 300.0, MASS))
    return out


def finite(x):
    return bool(np.all(np.isfinite(x)))


TWO_PI = 2.0 * math.pi


# acceptance verdict lines, echoed once more at the end of the session
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
