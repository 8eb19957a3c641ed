import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import small_model
from neural_rendezvous.dynamics import DynamicsParams, SpacecraftState, frame
from neural_rendezvous.sndnn import (GuidanceInput, HorizonError, N_FEATURES, SnDnnModel,
                                     core_lipschitz, empirical_lipschitz, featurize, forward,
                                     lipschitz_bound, load, normalize_weight, power_iteration,
                                     raw_features, save, spectral_norm)
from neural_rendezvous.training import DATA_MAGIC


def test_spectral_norm_examples():
    assert spectral_norm(np.eye(3)) == pytest.approx(1.0, abs=1e-12)
    assert spectral_norm(np.diag([2.0, 0.5])) == pytest.approx(2.0, abs=1e-12)
    assert spectral_norm(np.zeros((4, 3))) == 0.0
    W, s, _, _ = normalize_weight(np.zeros((2, 2)), 5.0)
    assert s == 0.0 and not np.any(W)


def test_spectral_norm_vs_svd():
    rng = np.random.default_rng(0)
    for _ in range(5):
        M = rng.standard_normal((64, 64))
        assert spectral_norm(M) == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], rel=1e-8)


def test_power_iteration_deterministic():
    M = np.random.default_rng(1).standard_normal((10, 7))
    a, b = power_iteration(M), power_iteration(M)
    assert a[0] == b[0] and np.array_equal(a[2], b[2])


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 5), elements=st.floats(-10, 10)), st.floats(0.1, 30))
def test_effective_weight_cap(M, c):
    W = normalize_weight(M, c)[0]
    assert np.linalg.svd(W, compute_uv=False)[0] <= c + 1e-6


def _inp(oe, t=1000.0, t_f=86400.0, x=None, rho=None):
    x = np.array([500.0, -200.0, 100.0, -0.01, 0.0, 0.01]) if x is None else x
    rho = np.array([60.0, -70.0, 30.0]) if rho is None else rho
    return GuidanceInput(x, oe, t, rho, t_f)


def test_featurize_at_goal(oe):
    rho = np.array([10.0, 20.0, 30.0])
    f = featurize(_inp(oe, x=np.concatenate([rho, np.zeros(3)]), rho=rho))
    assert np.all(f[:6] == 0.0)


def test_featurize_unit_norm_is_raw(oe):
    inp = _inp(oe)
    fr = frame(oe)
    F = np.array([fr.r, fr.w, fr.wdot, fr.mu])
    raw = raw_features(inp.x_hat[:3], inp.x_hat[3:], inp.rho, inp.t_f - inp.t, F)[0]
    assert np.array_equal(featurize(inp, None, np.ones(N_FEATURES)), raw)


def test_featurize_closing_velocity_identity(oe):
    rho = np.array([60.0, -70.0, 30.0])
    tau = 5000.0
    v = np.array([0.3, -0.1, 0.2])
    p = rho - tau * v
    f = featurize(_inp(oe, t=86400.0 - tau, x=np.concatenate([p, v]), rho=rho))
    assert np.allclose(f[3:6], 0.0, atol=1e-15)


def test_featurize_horizon_errors(oe):
    with pytest.raises(HorizonError):
        _inp(oe, t=86400.0)
    with pytest.raises(HorizonError):
        featurize(GuidanceInput(np.zeros(6), oe, 86400.0 - 1e-12, np.zeros(3), 86400.0))


def test_featurize_accepts_state_object(oe):
    x = np.array([1.0, 2, 3, 4, 5, 6])
    a = featurize(_inp(oe, x=x))
    b = featurize(GuidanceInput(SpacecraftState(x[:3], x[3:]), oe, 1000.0,
                                np.array([60.0, -70.0, 30.0]), 86400.0))
    assert np.array_equal(a, b)


def test_zero_weights_give_zero(oe):
    m = small_model()
    m0 = m.replace_params([0 * w for w in m.raw_weights], [0 * b for b in m.biases])
    assert np.all(forward(m0, _inp(oe)) == 0.0)


def test_call_matches_forward(oe, model):
    inp = _inp(oe)
    assert np.allclose(model(inp.x_hat, oe, inp.t, inp.rho, inp.t_f), forward(model, inp),
                       rtol=1e-12, atol=1e-15)


def test_saturation_sweep():
    rng = np.random.default_rng(3)
    m = SnDnnModel.init(rng, 6, 64, 25.0, 3.0)
    H = rng.standard_normal((10000, N_FEATURES)) * 1e3
    U = m.forward_normalized(H)
    assert np.max(np.abs(U)) <= 3.0


def test_default_configuration_box():
    m = SnDnnModel.init(np.random.default_rng(0))
    assert (m.n_layers, m.width, m.c_nn, m.u_max) == (6, 64, 25.0, 3.0)
    U = m.forward_normalized(np.random.default_rng(1).standard_normal((1000, N_FEATURES)) * 50)
    assert np.max(np.abs(U)) <= 3.0


def test_forward_dimension_mismatch():
    m = small_model()
    with pytest.raises(ValueError):
        m.forward_normalized(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        SnDnnModel([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])


def test_output_norm_bounded_by_box():
    with pytest.raises(ValueError):
        SnDnnModel.init(np.random.default_rng(0), 1, 4, 2.0, 3.0, output_norm=np.full(3, 4.0))


def test_forward_rejects_larger_box(oe, model):
    with pytest.raises(ValueError):
        forward(model, _inp(oe), DynamicsParams(oe, u_max=1.0))


def test_lipschitz_bound_examples():
    m = SnDnnModel.init(np.random.default_rng(0), 1, 8, 2.0, 3.0)
    assert core_lipschitz(m) == 4.0
    assert lipschitz_bound(m) == 4.0 * 3.0
    p = SnDnnModel.init(np.random.default_rng(0))
    assert core_lipschitz(p) == 25.0**7


def test_empirical_lipschitz_below_bound():
    for c in (1.0, 2.0, 25.0):
        m = SnDnnModel.init(np.random.default_rng(2), 3, 16, c, 3.0,
                            input_norm=np.linspace(1, 5, N_FEATURES))
        assert empirical_lipschitz(m, np.random.default_rng(0), 10000) <= lipschitz_bound(m)


def test_round_trip(tmp_path, oe):
    m = small_model(seed=5)
    save(m, tmp_path / "m.bin")
    m2 = load(tmp_path / "m.bin")
    rng = np.random.default_rng(0)
    H = rng.standard_normal((100, N_FEATURES))
    assert np.array_equal(m.forward_normalized(H), m2.forward_normalized(H))
    assert np.array_equal(m.input_norm, m2.input_norm)
    assert np.array_equal(m.output_norm, m2.output_norm)


def test_truncated_and_foreign_files(tmp_path):
    m = small_model()
    save(m, tmp_path / "m.bin")
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-16])
    with pytest.raises(ValueError):
        load(tmp_path / "t.bin")
    (tmp_path / "d.bin").write_bytes(DATA_MAGIC + data[8:])
    with pytest.raises(ValueError):
        load(tmp_path / "d.bin")
    bad = bytearray(data)
    bad[8] = 99
    (tmp_path / "v.bin").write_bytes(bytes(bad))
    with pytest.raises(ValueError, match="version"):
        load(tmp_path / "v.bin")


def test_forward_pure(oe, model):
    inp = _inp(oe)
    assert np.array_equal(forward(model, inp), forward(model, inp))
