import math

import numpy as np
import pytest

from conftest import hyperbolic_elements, small_model
from neural_rendezvous.dynamics import iso_flow
from neural_rendezvous.scenario import UncertaintyProfile, generate_catalog
from neural_rendezvous.sndnn import spectral_norm
from neural_rendezvous.training import (DataConfig, Dataset, LossWeights, TrainConfig, embed,
                                        generate_dataset, load_dataset, loss, loss_and_grad,
                                        nearest_training_distance, oe_record, predict,
                                        rollout_label, save_dataset, split, train,
                                        training_sup_error)


def synthetic(n=24, seed=0, steps=1, dt_bar=10.0):
    """Rows with random states and labels; the rollout label is the true ZOH end state."""
    rng = np.random.default_rng(seed)
    base = hyperbolic_elements()
    rows = []
    for i in range(n):
        t = float(rng.uniform(0, 80000))
        oe = iso_flow(base, t)
        x = np.concatenate([rng.uniform(-3000, 3000, 3), rng.uniform(-0.05, 0.05, 3)])
        u = rng.uniform(-3, 3, 3)
        rho = rng.uniform(-100, 100, 3)
        m = float(rng.uniform(140, 150))
        xr = rollout_label(x, oe, t, dt_bar, u, m, steps)
        rows.append([i % 5, 86400.0, t, dt_bar, m, *x, *oe_record(oe), *rho, *u, *xr, 3, 1.0, 0.0, 1.0])
    return Dataset(np.array(rows), {"rollout_steps": steps})


def _fd_check(model, ds, weights, n_coords=50, seed=0, rel=1e-4):
    _, (gW, gb) = loss_and_grad(model, ds, weights)
    rng = np.random.default_rng(seed)
    params = [("W", l) for l in range(len(gW))] + [("b", l) for l in range(len(gb))]
    worst = 0.0
    for _ in range(n_coords):
        kind, l = params[int(rng.integers(len(params)))]
        arr = (model.raw_weights if kind == "W" else model.biases)[l]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        g = (gW if kind == "W" else gb)[l][idx]
        h = 1e-6 * max(1.0, abs(arr[idx]))

        def shifted(d):
            W = [w.copy() for w in model.raw_weights]
            b = [v.copy() for v in model.biases]
            (W if kind == "W" else b)[l][idx] += d
            return loss(model.replace_params(W, b), ds, weights)

        fd = (shifted(h) - shifted(-h)) / (2 * h)
        scale = max(abs(fd), abs(g), 1e-8 * abs(loss(model, ds, weights)) / h)
        worst = max(worst, abs(fd - g) / scale)
    return worst


@pytest.mark.parametrize("steps", [1, 3])
def test_gradient_matches_central_differences(steps):
    ds = synthetic(steps=steps)
    m = small_model(seed=1, scale=2.0)
    for w in (LossWeights(1.0, 100.0), LossWeights(1.0, 0.0), LossWeights(0.0, 1.0)):
        assert _fd_check(m, ds, w) <= 1e-4


def test_zero_loss_zero_gradient():
    ds = synthetic(n=8)
    m = small_model(seed=2)
    # only the control term can be zeroed exactly: the closed-loop end state
    # under the network is not a ZOH label
    rows = ds.rows.copy()
    rows[:, 22:25] = predict(m, ds)
    ds0 = Dataset(rows, ds.meta)
    L, (gW, gb) = loss_and_grad(m, ds0, LossWeights(1.0, 0.0))
    assert L == 0.0
    assert all(not np.any(g) for g in gW + gb)


def test_loss_linear_in_control_weight():
    ds = synthetic(n=10)
    m = small_model(seed=3)
    a = loss(m, ds, LossWeights(1.0, 0.0))
    b = loss(m, ds, LossWeights(2.5, 0.0))
    x = loss(m, ds, LossWeights(0.0, 1.0))
    mix = loss(m, ds, LossWeights(2.5, 7.0))
    assert b == pytest.approx(2.5 * a, rel=1e-12)
    assert mix == pytest.approx(2.5 * a + 7.0 * x, rel=1e-12)


def test_zero_lr_keeps_model_and_training_is_deterministic():
    ds = synthetic(n=30)
    cfg = TrainConfig(epochs=2, lr=0.0, n_hidden=2, width=8, c_nn=2.0, eval_every=1)
    m0 = small_model(seed=4)
    m1, hist = train(ds, cfg, m0)
    assert all(np.array_equal(a, b) for a, b in zip(m0.raw_weights, m1.raw_weights))
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    cfg = TrainConfig(epochs=3, lr=1e-3, n_hidden=2, width=8, c_nn=2.0, seed=5)
    a, ha = train(ds, cfg)
    b, hb = train(ds, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.raw_weights, b.raw_weights))
    assert ha == hb


def test_training_reduces_loss_and_keeps_spectral_cap():
    ds = synthetic(n=40)
    cfg = TrainConfig(epochs=30, lr=3e-3, n_hidden=2, width=16, c_nn=2.0, eval_every=30,
                      weights=LossWeights(1.0, 0.0))
    m, hist = train(ds, cfg)
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    assert all(spectral_norm(W) <= 2.0 + 1e-6 for W in m.effective_weights())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1).validate()
    with pytest.raises(ValueError):
        TrainConfig(holdout_fraction=1.0).validate()
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0)
    with pytest.raises(ValueError):
        train(Dataset(np.empty((0, synthetic(1).rows.shape[1]))), TrainConfig(epochs=1))


def test_split_partitions():
    tr, te = split(synthetic(n=20), 0.25, 0)
    assert len(te) == 5 and len(np.intersect1d(tr, te)) == 0
    assert sorted(np.concatenate([tr, te])) == list(range(20))


def test_sup_error_brute_force():
    ds = synthetic(n=12)
    m = small_model(seed=6)
    brute = 0.0
    for i in range(len(ds)):
        s = ds.sample(i)
        u = m(s.x_bar, s.oe_bar, s.t_bar, s.rho_bar, s.t_f)
        brute = max(brute, float(np.linalg.norm(u - s.u_label)))
    assert training_sup_error(m, ds) == pytest.approx(brute, rel=1e-10)


def test_nearest_distance_linear_scan():
    ds = synthetic(n=15)
    s = ds.sample(4)
    assert nearest_training_distance((s.x_bar, s.oe_bar, s.t_bar, s.rho_bar), ds) == 0.0
    q = (s.x_bar + 1.0, s.oe_bar, s.t_bar + 3.0, s.rho_bar)
    E = ds.embedding()
    qe = embed(q[0], s.oe_bar.as_vector(), q[2], q[3])[0]
    scan = min(math.sqrt(sum((a - b) ** 2 for a, b in zip(row, qe))) for row in E)
    assert nearest_training_distance(q, ds) == pytest.approx(scan, rel=1e-12)


def test_rollout_label_refines():
    ds = synthetic(n=3, steps=1)
    s = ds.sample(0)
    fine = rollout_label(s.x_bar, s.oe_bar, s.t_bar, s.dt_bar, s.u_label, s.mass, 10)
    assert np.max(np.abs(fine - s.x_rollout_label)) <= 1e-9 * max(1.0, np.max(np.abs(fine)))


@pytest.fixture(scope="module")
def tiny_data():
    cat = generate_catalog(6, 11)
    cfg = DataConfig(n_samples=6, dt_grid=3600.0)
    return cat, cfg, generate_dataset(cat, UncertaintyProfile(), cfg, 3)


def test_generated_dataset_deterministic_and_round_trips(tiny_data, tmp_path):
    cat, cfg, ds = tiny_data
    again = generate_dataset(cat, UncertaintyProfile(), cfg, 3)
    assert np.array_equal(ds.rows, again.rows)
    assert len(ds) + ds.meta["dropped"] == 6
    assert set(ds.col("scenario").astype(int)) <= {sc.id for sc in cat.train}
    assert np.all(np.abs(ds.U) <= 3.0 + 1e-9)
    # early rows come from the state window
    assert np.all(ds.T[: len(ds) // 2] <= cfg.t_state + 1e-9) or ds.meta["dropped"]
    p = tmp_path / "d.bin"
    save_dataset(ds, p)
    back = load_dataset(p)
    assert np.array_equal(back.rows, ds.rows) and back.meta == ds.meta


def test_generated_rollout_labels_reintegrate(tiny_data):
    _, cfg, ds = tiny_data
    for i in range(len(ds)):
        s = ds.sample(i)
        xr = rollout_label(s.x_bar, s.oe_bar, s.t_bar, s.dt_bar, s.u_label, s.mass, cfg.rollout_steps)
        assert np.max(np.abs(xr - s.x_rollout_label)) <= 1e-9


def test_load_rejects_corrupt(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_dataset(p)
    ds = synthetic(n=2)
    save_dataset(ds, p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_dataset(p)
