import io

import numpy as np
import pytest
from scipy import stats

from dynsurv.data import load_dataset, write_dataset
from dynsurv.metrics import concordance_index
from dynsurv.simulate import SimConfig, exponential_censoring_rate, simulate_prclmm_data, simulate_t_weibull

KS_SETTINGS = [(0.5, 1.7, 0.0), (1.0, 1.0, 0.0), (0.2, 0.8, 0.3)]


def weibull_cdf(t, lam, nu, lp):
    return 1.0 - np.exp(-lam * t**nu * np.exp(lp))


def test_closed_form_inversion():
    # lam = nu = 1, lp = 0 gives T = -log U, so U = exp(-1) maps to T = 1
    u = np.random.default_rng(3).uniform(size=5)
    t = simulate_t_weibull(5, 1.0, 1.0, rng=np.random.default_rng(3))
    np.testing.assert_allclose(t, -np.log(u), rtol=1e-15)
    np.testing.assert_allclose(np.exp(-t), u, rtol=1e-14)


def test_exponential_median():
    lam, lp = 0.7, 0.4
    t = simulate_t_weibull(100_000, lam, 1.0, lp, rng=np.random.default_rng(0))
    target = np.log(2) / (lam * np.exp(lp))
    assert abs(np.median(t) / target - 1) < 0.03


@pytest.mark.parametrize("lam, nu, lp", KS_SETTINGS)
def test_ks_against_analytic_cdf(lam, nu, lp):
    n = 10_000
    t = simulate_t_weibull(n, lam, nu, lp, rng=np.random.default_rng(1))
    d = stats.kstest(t, weibull_cdf, args=(lam, nu, lp)).statistic
    assert d < stats.kstwo.ppf(0.99, n)


def test_weibull_rejects_bad_parameters():
    with pytest.raises(ValueError):
        simulate_t_weibull(5, 0.0, 1.0)
    with pytest.raises(ValueError):
        simulate_t_weibull(5, 1.0, -1.0)


def test_shape_contract():
    ds, truth = simulate_prclmm_data(n=10, p=2, p_relevant=1, visits=(0.0, 1.0, 2.0), seed=4)
    assert len(ds.survival) == 10
    assert len(ds.longitudinal) <= 30
    assert ds.longitudinal_vars == ("y1", "y2")
    assert truth.u.shape == (10, 2, 2)
    assert ds.longitudinal[["y1", "y2"]].notna().all().all()


def test_null_effect_concordance():
    cs = []
    for s in range(200):
        ds, truth = simulate_prclmm_data(n=100, p=2, p_relevant=0, seed=s)
        score = truth.u[:, 0, 0]
        cs.append(concordance_index(score, ds.survival["time"].to_numpy(), ds.survival["event"].to_numpy()))
    assert abs(np.mean(cs) - 0.5) < 0.02


def test_relevant_effect_is_detectable():
    ds, truth = simulate_prclmm_data(n=500, p=2, p_relevant=1, effect=1.0, seed=2)
    c = concordance_index(truth.u[:, 0, 0], ds.survival["time"].to_numpy(), ds.survival["event"].to_numpy())
    assert c > 0.6


def test_random_effect_covariance():
    D = ((1.0, 0.5), (0.5, 2.0))
    _, truth = simulate_prclmm_data(n=10_000, p=1, p_relevant=0, D=D, seed=7)
    emp = np.cov(truth.u[:, 0, :].T)
    assert np.all(np.abs(emp - np.array(D)) <= 0.05 * np.abs(np.array(D)))


def test_exponential_censoring_proportion():
    lam, window = 0.2, (0.0, 10.0)
    ds, _ = simulate_prclmm_data(
        n=10_000, p=1, p_relevant=0, lam=lam, nu=1.0, baseline_effects=(0.0,),
        landmark=None, censor_window=window, seed=3,
    )
    censored = 1 - ds.survival["event"].mean()
    assert abs(censored - exponential_censoring_rate(lam, window)) < 0.03


def test_landmark_and_horizon():
    ds, _ = simulate_prclmm_data(n=50, p=1, p_relevant=1, landmark=2.0, horizon=6.0, seed=1)
    assert (ds.survival["time"] > 2.0).all() and (ds.survival["time"] <= 6.0).all()
    assert (ds.longitudinal["fuptime"] <= 2.0).all()
    assert (ds.survival.loc[ds.survival["time"] == 6.0, "event"] == 0).all()


def test_truncation_keeps_first_visit():
    ds, truth = simulate_prclmm_data(n=60, p=1, p_relevant=1, landmark=None, truncate=True, seed=2)
    first = ds.longitudinal.groupby("id")["fuptime"].min()
    assert (first == 0.0).all()
    obs = ds.survival.set_index("id")["time"]
    later = ds.longitudinal[ds.longitudinal["fuptime"] > 0]
    assert (later["fuptime"].to_numpy() <= obs.loc[later["id"]].to_numpy()).all()


def test_round_trip_lossless():
    ds, _ = simulate_prclmm_data(n=25, p=3, seed=5)
    s, l = io.StringIO(), io.StringIO()
    write_dataset(ds, s, l)
    again = load_dataset(io.StringIO(s.getvalue()), io.StringIO(l.getvalue()), ds.schema())
    assert again.equals(ds)


def test_deterministic():
    def dump(ds):
        s, l = io.StringIO(), io.StringIO()
        write_dataset(ds, s, l)
        return s.getvalue() + l.getvalue()

    a, ta = simulate_prclmm_data(n=30, p=2, seed=8)
    b, tb = simulate_prclmm_data(n=30, p=2, seed=8)
    c, _ = simulate_prclmm_data(n=30, p=2, seed=9)
    assert dump(a) == dump(b) != dump(c)
    np.testing.assert_array_equal(ta.u, tb.u)


@pytest.mark.parametrize("kw", [dict(n=1), dict(p=0), dict(p=2, p_relevant=3), dict(lam=0.0),
                                dict(D=((1.0, 2.0), (2.0, 1.0))), dict(censor_window=(5.0, 1.0))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_censoring_rate_formula():
    assert exponential_censoring_rate(0.5, (2.0, 2.0)) == pytest.approx(np.exp(-1.0))
    # Monte Carlo check of P(C < T)
    rng = np.random.default_rng(0)
    T = rng.exponential(1 / 0.3, 200_000)
    C = rng.uniform(1.0, 4.0, 200_000)
    assert exponential_censoring_rate(0.3, (1.0, 4.0)) == pytest.approx(np.mean(C < T), abs=0.005)
