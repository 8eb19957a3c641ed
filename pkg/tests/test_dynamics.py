import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import hyperbolic_elements
from neural_rendezvous.dynamics import (AU_KM, MU_SUN, DynamicsError, DynamicsParams,
                                        IsoElements, KeplerError, MassModel, SpacecraftState,
                                        coriolis_matrix, drift, frame, gravity_term,
                                        input_matrix, integrate, iso_flow, omega_z,
                                        solve_kepler, zoh)

# mpmath findroot at 30 digits
H_E32_M5 = 1.4506984276393948013508582412
E_E03_M2 = 2.2360314951724365012799635489


def test_state_vector_layout():
    s = SpacecraftState([1, 2, 3], [4, 5, 6])
    assert s.x.tolist() == [1, 2, 3, 4, 5, 6]
    with pytest.raises(ValueError):
        SpacecraftState([1, 2, math.nan], [0, 0, 0])


def test_elements_validation():
    with pytest.raises(ValueError):
        IsoElements(1e8, 1.5, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        IsoElements(-1e8, -0.1, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        IsoElements(-1e8, 2.0, 0, 0, 0, 0, mu_sun=0.0)


def test_kepler_frozen_roots():
    assert solve_kepler(5.0, 3.2) == pytest.approx(H_E32_M5, abs=1e-13)
    assert solve_kepler(2.0, 0.3) == pytest.approx(E_E03_M2, abs=1e-13)


def _bisect(f, lo, hi):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50.0, 50.0))
def test_hyperbolic_kepler_residual(M):
    e = 3.2
    H = solve_kepler(M, e)
    assert abs(e * math.sinh(H) - H - M) < 1e-12 * max(1.0, abs(M))
    ref = _bisect(lambda x: e * math.sinh(x) - x - M, -10.0, 10.0)
    assert H == pytest.approx(ref, abs=1e-11)


def test_kepler_nonconvergence_reports_residual():
    with pytest.raises(KeplerError) as ex:
        solve_kepler(1e6, 1.0001, max_iter=2)
    assert ex.value.residual > 0


def test_iso_flow_zero_is_identity(oe):
    assert iso_flow(oe, 0.0) == oe


@settings(max_examples=50, deadline=None)
@given(st.floats(-2e5, 2e5), st.floats(-2e5, 2e5))
def test_iso_flow_semigroup(a, b):
    oe = hyperbolic_elements()
    one = iso_flow(iso_flow(oe, a), b)
    two = iso_flow(oe, a + b)
    assert one.anomaly == pytest.approx(two.anomaly, rel=1e-9, abs=1e-12)
    assert one.semi_major_axis == oe.semi_major_axis


def test_iso_flow_matches_cartesian_two_body(oe):
    """Elements flow vs direct RK4 of the inertial two-body problem."""
    r, v = oe.state()
    y = np.concatenate([r, v])

    def f(y):
        d = np.linalg.norm(y[:3])
        return np.concatenate([y[3:], -MU_SUN * y[:3] / d**3])

    h = 10.0
    for _ in range(8640):
        k1 = f(y); k2 = f(y + h / 2 * k1); k3 = f(y + h / 2 * k2); k4 = f(y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    r1, _ = iso_flow(oe, 86400.0).state()
    assert np.linalg.norm(r1 - y[:3]) < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(50.0, 500.0))
def test_coriolis_skew(t, m):
    oe = iso_flow(hyperbolic_elements(), t)
    C = coriolis_matrix(oe, m)
    assert np.array_equal(C, -C.T)
    v = np.random.default_rng(int(abs(t)) % 1000).standard_normal((100, 3))
    q = np.einsum("ki,ij,kj->k", v, C, v)
    assert np.max(np.abs(q)) <= 1e-15 * abs(C[1, 0]) * np.max(np.sum(v * v, axis=1))


def test_coriolis_circular_mean_motion():
    a = 1.3 * AU_KM
    oe = IsoElements(a, 0.0, 0.2, 0.1, 0.0, 1.0)
    C = coriolis_matrix(oe, 150.0)
    assert C[1, 0] / (2 * 150.0) == pytest.approx(math.sqrt(MU_SUN / a**3), rel=1e-13)


def test_coriolis_mass_independent(oe):
    assert np.allclose(coriolis_matrix(oe, 100.0) / 100.0, coriolis_matrix(oe, 300.0) / 300.0,
                       rtol=1e-15, atol=0)


def test_gravity_zero_at_origin(oe):
    assert np.all(gravity_term(np.zeros(3), oe, 150.0) == 0.0)


def test_gravity_linear_in_mass(oe):
    p = np.array([1e4, -3e3, 5e2])
    assert np.allclose(gravity_term(p, oe, 300.0), 2 * gravity_term(p, oe, 150.0), rtol=1e-15)


def test_gravity_tidal_tensor(oe):
    """Small offsets: differential gravity = finite-difference tidal tensor of the point mass."""
    fr = frame(oe)
    R = np.array([fr.r, 0.0, 0.0])
    field = lambda x: -MU_SUN * x / np.linalg.norm(x) ** 3
    T = np.empty((3, 3))
    h = 1.0
    for j in range(3):
        e = np.zeros(3); e[j] = h
        T[:, j] = (field(R + e) - field(R - e)) / (2 * h)
    p = np.array([300.0, -200.0, 100.0])
    w, wd = fr.w, fr.wdot
    frame_part = -np.array([w**2 * p[0] + wd * p[1], w**2 * p[1] - wd * p[0], 0.0])
    # G/m = frame terms - differential gravity
    diff_grav = -(gravity_term(p, oe, 1.0) - frame_part)
    assert np.allclose(diff_grav, T @ p, rtol=1e-2)


def _inertial_oracle(x, oe):
    """Relative LVLH acceleration assembled in the inertial frame."""
    r, v = oe.state()
    Q = frame(oe).rot  # inertial -> LVLH
    hvec = np.cross(r, v)
    w = np.linalg.norm(hvec) / (r @ r)
    w_vec = np.array([0.0, 0.0, w])
    rdot = (r @ v) / np.linalg.norm(r)
    wd_vec = np.array([0.0, 0.0, -2.0 * w * rdot / np.linalg.norm(r)])
    p, pd = x[:3], x[3:]
    R_sc = r + Q.T @ p
    a_t = -MU_SUN * r / np.linalg.norm(r) ** 3
    a_sc = -MU_SUN * R_sc / np.linalg.norm(R_sc) ** 3
    a_rel_lvlh = Q @ (a_sc - a_t)
    return (a_rel_lvlh - 2 * np.cross(w_vec, pd) - np.cross(w_vec, np.cross(w_vec, p))
            - np.cross(wd_vec, p))


def test_drift_matches_inertial_derivation(oe):
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = np.concatenate([rng.uniform(-1e5, 1e5, 3), rng.uniform(-20, 20, 3)])
        f = drift(x, oe, 150.0)
        assert np.array_equal(f[:3], x[3:])
        assert np.allclose(f[3:], _inertial_oracle(x, oe), rtol=1e-7, atol=1e-16)


def test_drift_zero_at_rest(oe):
    assert np.all(drift(np.zeros(6), oe, 150.0) == 0.0)


def test_feedback_linearization_cancels(oe):
    x = np.array([1e3, 2e3, -5e2, 0.01, -0.02, 0.03])
    m = 150.0
    u = (coriolis_matrix(oe, m) @ x[3:] + gravity_term(x[:3], oe, m)) * 1e3  # kN -> N
    xdot = drift(x, oe, m) + input_matrix(m) @ u
    assert np.allclose(xdot[3:], 0.0, atol=1e-18)


def test_mass_model():
    with pytest.raises(ValueError):
        MassModel(50.0, 3000.0, min_mass=60.0)
    mm = MassModel()
    assert mm.mass_rate(np.zeros(3), 150.0) == 0.0
    assert mm.mass_rate(np.ones(3), 150.0) < 0.0
    assert mm.mass_rate(np.ones(3), mm.min_mass) == 0.0
    assert MassModel(isp=math.inf).mass_rate(np.ones(3), 150.0) == 0.0


def test_integrate_taylor_step(oe, dyn):
    x0 = np.array([500.0, -300.0, 100.0, -0.5, 0.2, 0.1])
    h = 1.0
    tr = integrate(x0, oe, 0.0, h, None, dyn, h)
    f0 = drift(x0, oe, 150.0)
    # second-order Taylor: x + h f + h^2/2 J f, with J f by central differences
    eps = 1e-3
    Jf = (drift(x0 + eps * f0, oe, 150.0) - drift(x0 - eps * f0, oe, 150.0)) / (2 * eps)
    taylor = x0 + h * f0 + 0.5 * h * h * Jf
    assert np.allclose(tr.states[-1], taylor, rtol=0, atol=1e-9)


def test_integrate_fourth_order():
    # close perihelion and a wide offset so truncation dominates roundoff
    oe = hyperbolic_elements(q_au=0.3, nu=-0.2)
    dyn = DynamicsParams(oe)
    x0 = np.array([3e6, -2e6, 1e6, -5.0, 3.0, 1.0])
    T = 20 * 86400.0
    ref = integrate(x0, oe, 0.0, T, None, dyn, 3600.0 / 8).states[-1]
    e1 = np.linalg.norm(integrate(x0, oe, 0.0, T, None, dyn, 7200.0).states[-1] - ref)
    e2 = np.linalg.norm(integrate(x0, oe, 0.0, T, None, dyn, 3600.0).states[-1] - ref)
    assert 16 * 0.7 <= e1 / e2 <= 16 * 1.3


def test_integrate_reversible(oe, dyn):
    x0 = np.array([2e4, -1e4, 3e3, -10.0, 5.0, 1.0])
    fw = integrate(x0, oe, 0.0, 3600.0, None, dyn, 10.0)
    bw = integrate(fw.states[-1], fw.oe_end, 3600.0, 0.0, None, dyn, 10.0)
    assert np.linalg.norm(bw.states[-1][:3] - x0[:3]) < 1e-6


def test_integrate_deterministic_and_mass(oe, dyn):
    x0 = np.zeros(6)
    a = integrate(x0, oe, 0.0, 3600.0, zoh([3.0, -3.0, 3.0]), dyn, 10.0)
    b = integrate(x0, oe, 0.0, 3600.0, zoh([3.0, -3.0, 3.0]), dyn, 10.0)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.masses, b.masses)
    assert np.all(np.diff(a.masses) < 0) and a.masses[-1] >= dyn.mass.min_mass
    c = integrate(x0, oe, 0.0, 3600.0, None, dyn, 10.0)
    assert np.all(c.masses == dyn.mass.wet_mass)


def test_integrate_rejects_nonfinite_policy(oe, dyn):
    with pytest.raises(DynamicsError) as ex:
        integrate(np.zeros(6), oe, 0.0, 100.0, lambda t, x, o, m: np.full(3, np.nan), dyn, 10.0)
    assert ex.value.t == 0.0


def test_integrate_arg_checks(oe, dyn):
    with pytest.raises(ValueError):
        integrate(np.zeros(6), oe, 0.0, 10.0, None, dyn, 0.0)
    with pytest.raises(ValueError):
        integrate(np.zeros(6), oe, 5.0, 5.0, None, dyn, 1.0)
    with pytest.raises(ValueError):
        DynamicsParams(oe, u_max=0.0)


def test_omega_z_positive(oe):
    assert omega_z(oe) > 0
