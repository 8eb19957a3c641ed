import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from neural_rendezvous.dynamics import iso_flow
from neural_rendezvous.scenario import (CatalogRanges, UncertaintyProfile, estimate,
                                        generate_catalog, load_catalog, noise_axes,
                                        save_catalog, varsigma)

FAST = CatalogRanges(step=3600.0)


def test_catalog_deterministic(tmp_path):
    a, b = generate_catalog(6, 11, FAST), generate_catalog(6, 11, FAST)
    save_catalog(a, tmp_path / "a.csv")
    save_catalog(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert generate_catalog(6, 12, FAST)[0].rho.tolist() != a[0].rho.tolist()


def test_catalog_round_trip(tmp_path):
    a = generate_catalog(5, 3, FAST)
    save_catalog(a, tmp_path / "c.csv")
    b = load_catalog(tmp_path / "c.csv")
    assert b.n_train == a.n_train and len(b) == len(a)
    for s, t in zip(a, b):
        assert s.iso == t.iso and np.array_equal(s.x0.x, t.x0.x)
        assert np.array_equal(s.rho, t.rho) and s.seed == t.seed and s.t_f == t.t_f


def test_catalog_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("hello\n")
    with pytest.raises(ValueError):
        load_catalog(p)


def test_rho_on_sphere():
    cat = generate_catalog(30, 5, FAST)
    r = np.array([np.linalg.norm(s.rho) for s in cat])
    assert np.all(np.abs(r - 100.0) <= 1e-9)
    assert len({s.id for s in cat}) == 30


def test_default_partition_sizes():
    cat = generate_catalog(499, 0, CatalogRanges(step=86400.0))
    assert len(cat.train) == 399 and len(cat.test) == 100


def test_catalog_hyperbolic_and_bounded_miss():
    cat = generate_catalog(8, 2)
    for s in cat:
        assert s.iso.eccentricity > 1 and s.iso.semi_major_axis < 0
        assert s.t_f == 86400.0


def test_invalid_ranges():
    with pytest.raises(ValueError):
        generate_catalog(3, 0, CatalogRanges(v_inf=(40.0, 10.0)))
    with pytest.raises(ValueError):
        generate_catalog(0, 0)


def test_profile_default_endpoints():
    p = UncertaintyProfile()
    assert p.sigma0 == (1e4, 1e2, 1e-2, 1e-2)
    assert np.allclose(p.sigma(0.0), p.sigma0, rtol=1e-12)
    assert np.allclose(p.sigma(p.t_f), p.sigmaf, rtol=1e-2)
    assert np.allclose(p.c, np.asarray(p.sigmaf) / 10)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 86400), st.floats(0, 86400))
def test_profile_monotone(t1, t2):
    p = UncertaintyProfile()
    lo, hi = sorted((t1, t2))
    assert np.all(p.sigma(hi) <= p.sigma(lo) + 1e-15)
    assert np.all(p.sigma(hi) >= p.c)


def test_profile_validation():
    with pytest.raises(ValueError):
        UncertaintyProfile((1, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        UncertaintyProfile((1, 1, 1, 1), (2, 1, 1, 1))


def test_zero_profile_returns_truth(oe):
    x = np.arange(6.0)
    xh, oh = estimate(x, oe, 100.0, UncertaintyProfile.zero(), np.random.default_rng(0))
    assert np.array_equal(xh, x) and oh == oe


def _samples(oe, t, n, seed=0):
    p = UncertaintyProfile()
    rng = np.random.default_rng(seed)
    x = np.zeros(6)
    E = np.array([estimate(x, oe, t, p, rng)[0] for _ in range(n)])
    return p, E


def test_folded_normal_means(oe):
    t = 3600.0
    p, E = _samples(oe, t, 100000)
    A = noise_axes(oe)
    sig = p.sigma6(t)
    proj = np.hstack([E[:, :3] @ A.T, E[:, 3:] @ A.T])
    mean_abs = np.mean(np.abs(proj), axis=0)
    assert np.allclose(mean_abs, sig * math.sqrt(2 / math.pi), rtol=0.02)
    # chi-squared goodness of fit of the whitened squared norm
    q = np.sum((proj / sig) ** 2, axis=1)
    counts, _ = np.histogram(stats.chi2.cdf(q, 6), bins=20, range=(0, 1))
    assert stats.chisquare(counts).pvalue > 0.01
    # expected 2-norm error within the single-rate envelope at t_s = t
    env = p.envelope()
    assert np.mean(np.linalg.norm(E, axis=1)) <= varsigma(env, p.err0(t), t, t)


def test_element_estimate_is_perturbed_but_close(oe):
    rng = np.random.default_rng(1)
    _, oh = estimate(np.zeros(6), oe, 80000.0, UncertaintyProfile(), rng)
    r0, _ = oe.state()
    r1, _ = oh.state()
    assert 0 < np.linalg.norm(r1 - r0) < 1e3


def test_varsigma_examples():
    from neural_rendezvous.scenario import Envelope
    assert varsigma(Envelope(0.3, 2.0), 5.0, 10.0, 10.0) == 7.0
    assert varsigma(Envelope(0.0, 2.0), 5.0, 1e6, 0.0) == 7.0
    assert varsigma(Envelope(math.log(2), 0.0), 1.0, 1.0, 0.0) == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(ValueError):
        varsigma(Envelope(1.0, 0.0), 1.0, 0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1e-3), st.floats(0, 10), st.floats(0, 10), st.floats(0, 1e5), st.floats(0, 1e5))
def test_varsigma_monotone_floor(beta, c, err0, a, b):
    from neural_rendezvous.scenario import Envelope
    env = Envelope(beta, c)
    lo, hi = sorted((a, b))
    assert varsigma(env, err0, hi, 0.0) <= varsigma(env, err0, lo, 0.0) + 1e-12
    assert varsigma(env, err0, hi, 0.0) >= c


def test_iso_flow_used_by_catalog_is_consistent():
    s = generate_catalog(1, 9, FAST)[0]
    assert iso_flow(s.iso, s.t_f).epoch == pytest.approx(s.t_f)
