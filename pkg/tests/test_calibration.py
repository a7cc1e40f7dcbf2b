import math
import types
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import telad.calibration as cal
from telad.calibration import (
    CalibrationConfig,
    DecisionFrame,
    NEResiduals,
    ResidualFrame,
    Threshold,
    ThresholdTable,
    compare_exp_gamma,
    compute_residuals,
    exp_gamma_aic,
    exp_threshold,
    fit_exponential,
    fit_pot,
    flag_anomalies,
    gpd_pwm,
)
from telad.errors import ConfigurationError, ContractError, DegenerateFitWarning, SmallSampleWarning


def frame_from(values, split="val", features=("a",), ne="n1"):
    """ResidualFrame with e_for = e_rec = values (so e = values)."""
    v = np.asarray(values, dtype=float).reshape(len(values), -1)
    ts = np.arange(len(v)) * 3600
    r = NEResiduals(ts, np.full(len(v), split, dtype=object), v.copy(), v.copy())
    return ResidualFrame(list(features), {ne: r})


def two_split_frame(val, test, features=("a",)):
    val = np.asarray(val, float).reshape(len(val), -1)
    test = np.asarray(test, float).reshape(len(test), -1)
    e = np.vstack([val, test])
    split = np.array(["val"] * len(val) + ["test"] * len(test), dtype=object)
    return ResidualFrame(list(features), {"n1": NEResiduals(np.arange(len(e)) * 60, split, e.copy(), e.copy())})


# ---------------------------------------------------------------- residual combination


def test_combination_arithmetic():
    r = NEResiduals(np.arange(3), np.array(["val"] * 3, dtype=object),
                    np.array([[0.2], [np.nan], [0.6]]), np.array([[0.4], [0.7], [np.nan]]))
    np.testing.assert_allclose(r.combined(0.5), [[0.3], [0.7], [0.6]])
    np.testing.assert_allclose(r.combined(1.0), [[0.2], [0.7], [0.6]])


class _Stub:
    def __init__(self, L):
        self.config = types.SimpleNamespace(L=L)


@pytest.fixture
def tiny_ds():
    from telad.synth import SynthSpec, generate
    from telad.data import split_timeline

    ds, _ = generate(SynthSpec(n_nes=1, T=60, k=2, seed=0))
    return ds, split_timeline(ds)


def test_perfect_model_gives_zero_residuals(tiny_ds, monkeypatch):
    ds, splits = tiny_ds
    monkeypatch.setattr(cal, "predict", lambda b, s: (b.targets.copy(), b.inputs.copy()))
    frame = compute_residuals(_Stub(4), ds, splits)
    r = frame.nes["ne000"]
    assert np.all(np.nan_to_num(r.e_for) == 0) and np.all(r.e_rec == 0)


def test_offset_model_gives_known_residuals(tiny_ds, monkeypatch):
    ds, splits = tiny_ds
    monkeypatch.setattr(cal, "predict", lambda b, s: (b.targets + 0.2, b.inputs - 0.4))
    frame = compute_residuals(_Stub(4), ds, splits)
    r = frame.nes["ne000"]
    both = ~np.isnan(r.e_for[:, 0])
    np.testing.assert_allclose(frame.e("ne000")[both], 0.3)
    # the first scored step of each block has no forecast from inside the block
    assert (~both).sum() == 2


def test_stride_two_coverage(tiny_ds, monkeypatch):
    ds, splits = tiny_ds
    monkeypatch.setattr(cal, "predict", lambda b, s: (b.targets + 0.2, b.inputs + 0.4))
    L = 4
    frame = compute_residuals(_Stub(L), ds, splits, blocks=("test",), stride=2)
    r = frame.nes["ne000"]
    a, b = splits["ne000"].block("test")
    # oracle: enumerate window ends of starts a, a+2, ... and the step after each
    rec_t = {t0 + L - 1 for t0 in range(a, b - L + 1, 2)}
    for_t = {t + 1 for t in rec_t if t + 1 < b}
    ts = ds.nes["ne000"].timestamps
    got_rec = {int(np.searchsorted(ts, t)) for t, v in zip(r.timestamps, r.e_rec[:, 0]) if not np.isnan(v)}
    got_for = {int(np.searchsorted(ts, t)) for t, v in zip(r.timestamps, r.e_for[:, 0]) if not np.isnan(v)}
    assert got_rec == rec_t and got_for == for_t
    only_rec = np.isnan(r.e_for[:, 0])
    assert only_rec.any()
    np.testing.assert_allclose(frame.e("ne000")[only_rec], 0.4)


def test_residual_csv_round_trip(tmp_path, rng):
    e = rng.random((5, 2))
    ef = e.copy()
    ef[0] = np.nan
    r = NEResiduals(np.arange(5) * 3600 + 1_700_000_000, np.array(["val"] * 3 + ["test"] * 2, dtype=object),
                    ef, rng.random((5, 2)))
    frame = ResidualFrame(["x", "y"], {"007": r}, weight=0.3)
    frame.to_csv(tmp_path / "r.csv")
    back = ResidualFrame.read_csv(tmp_path / "r.csv", weight=0.3)
    b = back.nes["007"]
    np.testing.assert_array_equal(b.timestamps, r.timestamps)
    np.testing.assert_array_equal(b.split, r.split)
    np.testing.assert_array_equal(b.e_for, r.e_for)
    np.testing.assert_array_equal(b.e_rec, r.e_rec)


# ---------------------------------------------------------------- exponential


def test_theta_is_sample_mean():
    t = fit_exponential(frame_from([1.0, 2.0, 3.0]), 0.99, min_count=3)
    assert t[("n1", "a")].theta == 2.0


def test_tau_closed_form_example():
    assert exp_threshold(2.0, 0.99) == pytest.approx(9.210340371976182, rel=1e-15)


def test_tau_vanishes_as_p_to_zero():
    assert exp_threshold(2.0, 1e-12) < 1e-11


@settings(max_examples=200)
@given(st.floats(1e-6, 1e6), st.floats(1e-6, 1 - 1e-9))
def test_tau_survival_identity(theta, p):
    tau = exp_threshold(theta, p)
    assert math.exp(-tau / theta) == pytest.approx(1 - p, rel=1e-9, abs=1e-15)


@settings(max_examples=100)
@given(st.floats(1e-3, 1e3), st.floats(0.01, 0.98), st.floats(0.001, 0.0199))
def test_tau_monotone(theta, p, dp):
    assert exp_threshold(theta, p + dp) > exp_threshold(theta, p)
    assert exp_threshold(theta * 1.5, p) > exp_threshold(theta, p)


def test_pooled_fallback_for_thin_units():
    r1 = NEResiduals(np.arange(3), np.array(["val"] * 3, dtype=object), np.ones((3, 1)), np.ones((3, 1)))
    r2 = NEResiduals(np.arange(20), np.array(["val"] * 20, dtype=object), np.full((20, 1), 4.0),
                     np.full((20, 1), 4.0))
    t = fit_exponential(ResidualFrame(["a"], {"thin": r1, "fat": r2}), 0.99)
    assert t[("thin", "a")].extras["fallback"] == "pooled"
    assert t[("thin", "a")].theta == pytest.approx((3 * 1 + 20 * 4) / 23)
    assert "fallback" not in t[("fat", "a")].extras


def test_degenerate_fit_warns_and_flags_every_positive():
    f = two_split_frame(np.zeros(20), [0.0, 1e-9, 0.5])
    with pytest.warns(DegenerateFitWarning):
        t = fit_exponential(f, 0.99)
    assert t[("n1", "a")].tau == 0.0
    y = flag_anomalies(f, t).nes["n1"][1][:, 0]
    assert y.tolist() == [0, 1, 1]


def test_strict_inequality_at_tau():
    f = two_split_frame(np.ones(20), [exp_threshold(1.0, 0.9), exp_threshold(1.0, 0.9) + 1e-12])
    y = flag_anomalies(f, fit_exponential(f, 0.9)).nes["n1"][1][:, 0]
    assert y.tolist() == [0, 1]


def test_missing_unit_is_contract_error():
    f = frame_from([1.0] * 12)
    with pytest.raises(ContractError):
        flag_anomalies(f, ThresholdTable(0.99))


def test_flag_rate_matches_p():
    rng = np.random.default_rng(7)
    theta, p, n = 1.7, 0.99, 100_000
    val = rng.exponential(theta, 50_000)
    test = rng.exponential(theta, n)
    f = two_split_frame(val, test)
    y = flag_anomalies(f, fit_exponential(f, p)).nes["n1"][1][:, 0]
    sd = math.sqrt(n * p * (1 - p))
    assert abs(y.sum() - n * (1 - p)) <= 3 * sd + n * (1 - p) * 0.03  # theta-hat error adds ~1% bias


def test_higher_p_flags_subset(rng):
    f = two_split_frame(rng.exponential(1, 500), rng.exponential(1, 500))
    lo = flag_anomalies(f, fit_exponential(f, 0.9)).keys()
    hi = flag_anomalies(f, fit_exponential(f, 0.99)).keys()
    assert hi <= lo


def test_threshold_csv_round_trip(tmp_path):
    t = ThresholdTable(0.995, {("01", "x"): Threshold(0.1, 0.5, "pot", {"xi": 0.1}),
                               ("01", "y"): Threshold(0.2, 1.0, "exponential", {"fallback": "pooled"})})
    t.to_csv(tmp_path / "t.csv")
    back = ThresholdTable.read_csv(tmp_path / "t.csv")
    assert back.p == 0.995 and back.entries == t.entries


def test_decision_csv_round_trip(tmp_path, rng):
    d = DecisionFrame(["a", "b"], {"x": (np.array([0, 3600]), np.array([[1, 0], [0, 1]], np.uint8),
                                         rng.random((2, 2)))})
    d.to_csv(tmp_path / "d.csv")
    back = DecisionFrame.read_csv(tmp_path / "d.csv")
    assert back.keys() == d.keys() == {("x", "a", 0), ("x", "b", 3600)}
    np.testing.assert_array_equal(back.nes["x"][2], d.nes["x"][2])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        CalibrationConfig(p=1.0)
    with pytest.raises(ConfigurationError):
        CalibrationConfig(method="spot")
    with pytest.raises(ConfigurationError):
        CalibrationConfig(priority_quantiles=(0.9, 0.8, 0.95, 0.99))


# ---------------------------------------------------------------- POT


def test_pot_on_exponential_tail_matches_exact_quantile():
    rng = np.random.default_rng(3)
    theta, p = 2.0, 0.999
    t = fit_pot(frame_from(rng.exponential(theta, 100_000)), p)[("n1", "a")]
    assert t.method == "pot"
    assert abs(t.tau / exp_threshold(theta, p) - 1) < 0.05


def test_pwm_against_known_gpd():
    rng = np.random.default_rng(4)
    y = stats.genpareto.rvs(0.3, scale=1.5, size=20_000, random_state=rng)
    xi, sigma = gpd_pwm(y)
    assert xi > 0
    assert abs(xi - 0.3) < 0.05 and abs(sigma - 1.5) < 0.1


def test_pareto_sample_has_positive_shape():
    rng = np.random.default_rng(5)
    t = fit_pot(frame_from(rng.pareto(2.5, 20_000) + 1), 0.999)[("n1", "a")]
    assert t.extras["xi"] > 0


def test_pwm_limit_exponential():
    # exact PWM moments of Exp(1): a0 = 1, a1 = 1/4 -> xi = 0, sigma = 1
    rng = np.random.default_rng(6)
    xi, sigma = gpd_pwm(rng.exponential(1.0, 200_000))
    assert abs(xi) < 0.02 and abs(sigma - 1) < 0.02


def test_pot_threshold_xi_zero_limit():
    a = cal.pot_threshold(1.0, 1e-12, 2.0, 1000, 20, 0.999)
    b = cal.pot_threshold(1.0, 1e-6, 2.0, 1000, 20, 0.999)
    assert a == pytest.approx(1.0 - 2.0 * math.log(1000 * 0.001 / 20))
    assert b == pytest.approx(a, rel=1e-5)


def test_pot_thin_tail_falls_back():
    t = fit_pot(frame_from(np.linspace(0, 1, 500)), 0.999)[("n1", "a")]
    assert t.method == "exponential" and t.extras["fallback"] == "exponential"
    assert t.tau == pytest.approx(exp_threshold(0.5, 0.999))


# ---------------------------------------------------------------- exponential vs gamma


def test_aic_matches_scipy_loglikelihood(rng):
    x = rng.gamma(2.5, 1.3, 400)
    r = exp_gamma_aic(x)
    ll_exp = stats.expon.logpdf(x, scale=x.mean()).sum()
    assert r["aic_exp"] == pytest.approx(2 - 2 * ll_exp, rel=1e-12)
    ll_g = stats.gamma.logpdf(x, r["shape"], scale=r["scale"]).sum()
    assert r["aic_gamma"] == pytest.approx(4 - 2 * ll_g, rel=1e-10)
    # one Newton step from the moment estimate lands near the MLE
    a_mle = stats.gamma.fit(x, floc=0)[0]
    assert abs(r["shape"] - a_mle) / a_mle < 0.05


def _units(draw, n_units=100, n=200):
    rng = np.random.default_rng(11)
    nes = {}
    for u in range(n_units):
        v = draw(rng, n).reshape(n, 1)
        nes[f"u{u}"] = NEResiduals(np.arange(n), np.array(["val"] * n, dtype=object), v, v.copy())
    return ResidualFrame(["a"], nes)


def test_exponential_data_prefers_exponential():
    rep = compare_exp_gamma(_units(lambda r, n: r.exponential(2.0, n)))
    assert rep["exponential_fraction"] >= 0.8


def test_gamma_data_prefers_gamma():
    rep = compare_exp_gamma(_units(lambda r, n: r.gamma(3.0, 1.0, n)))
    assert rep["exponential_fraction"] < 0.5


def test_small_unit_warns():
    with pytest.warns(SmallSampleWarning):
        rep = compare_exp_gamma(frame_from(np.random.default_rng(0).exponential(1, 10)))
    assert rep["n_units"] == 1 and rep["units"][0]["small_sample"]


def test_zero_residual_clamped():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = exp_gamma_aic(np.array([0.0, 1.0, 2.0, 0.5]))
    assert np.isfinite(r["aic_exp"]) and np.isfinite(r["aic_gamma"])
