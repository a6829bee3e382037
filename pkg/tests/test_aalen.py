import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctmsm import AalenAdditiveRegression, CumCoef, DesignSpec, fit_additive, nelson_aalen
from ctmsm.weights import StepWeightSet, unit_weights

from conftest import history_from, random_history


def brute_force_increments(history, kind, columns, weight_fn=None):
    """Per-event-time weighted least squares, built subject by subject."""
    out = []
    times = sorted({r.time for r in history.records if r.kind == kind})
    for s in times:
        rows, w, dn = [], [], []
        for i, sid in enumerate(history.ids):
            own = {k: history.event_times[k][i] for k in "DALC"}
            if min(own["D"], own["C"], own[kind]) < s:
                continue
            row = []
            for col in columns:
                v = 1.0
                for f in col.split(":"):
                    if f in ("A", "L"):
                        v *= float(own[f] < s)
                    elif f != "1":
                        v *= history.baseline_column(f)[i]
                row.append(v)
            rows.append(row)
            w.append(1.0 if weight_fn is None else weight_fn(i, s))
            dn.append(float(own[kind] == s))
        X, W, y = np.array(rows), np.diag(w), np.array(dn)
        G = X.T @ W @ X
        ok = np.linalg.matrix_rank(G) == len(columns)
        out.append(np.linalg.solve(G, X.T @ W @ y) if ok else np.full(len(columns), np.nan))
    return np.array(times), np.array(out)


def test_nelson_aalen_hand():
    h = history_from([(1, 1.0, "D"), (2, 2.0, "D")])
    c = fit_additive(h, "D", ["1"])
    assert c.increments[:, 0].tolist() == [0.5, 1.0]
    assert c.cumulative[:, 0].tolist() == [0.5, 1.5]


def test_nelson_aalen_three_at_risk():
    h = history_from([(1, 1.0, "A")], n=3)
    assert nelson_aalen(h, "A").increments[0, 0] == pytest.approx(1 / 3)


def test_weighted_nelson_aalen_hand():
    h = history_from([(1, 1.0, "A")], n=3)
    w = StepWeightSet(h.ids, [], np.empty((3, 0)), [2.0, 1.0, 1.0], "combined")
    assert nelson_aalen(h, "A", w).increments[0, 0] == pytest.approx(2 / 4)


@pytest.mark.parametrize("weighted", [False, True])
def test_matches_brute_force_with_design(rng, weighted):
    h = random_history(rng, 12, p_treat=0.8)
    t, inc = brute_force_increments(h, "D", ["1", "A"])
    c = fit_additive(h, "D", ["1", "A"], unit_weights(h) if weighted else None, singular="skip")
    assert np.array_equal(c.times, t)
    singular = np.isnan(inc[:, 0])
    assert np.array_equal(np.isin(c.times, c.skipped_times), singular)
    assert np.all(c.increments[singular] == 0)
    np.testing.assert_allclose(c.increments[~singular], inc[~singular], atol=1e-10)


def test_unit_weights_identical(rng):
    h = random_history(rng, 40)
    a = fit_additive(h, "D", ["1", "A", "L"])
    b = fit_additive(h, "D", ["1", "A", "L"], unit_weights(h))
    assert np.array_equal(a.increments, b.increments)


def test_scale_invariance(rng):
    h = random_history(rng, 40)
    vals = rng.uniform(0.5, 2, size=(h.n, 3))
    w = StepWeightSet(h.ids, [2.0, 4.0, 6.0], vals, 1.0, "combined")
    w3 = StepWeightSet(h.ids, [2.0, 4.0, 6.0], 3.0 * vals, 3.0, "combined")
    np.testing.assert_allclose(fit_additive(h, "D", ["1", "A"], w).increments, fit_additive(h, "D", ["1", "A"], w3).increments, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_nelson_aalen_equals_intercept_fit(seed):
    h = random_history(np.random.default_rng(seed), 15)
    assert np.array_equal(nelson_aalen(h, "D").increments, fit_additive(h, "D", ["1"], unit_weights(h)).increments)


def test_singular_time_recorded_and_skipped():
    # at t=1 nobody at risk is treated, so the A column is identically zero
    h = history_from([(1, 1.0, "D"), (2, 2.0, "A"), (2, 3.0, "D"), (3, 4.0, "D")])
    skip = fit_additive(h, "D", ["1", "A"], singular="skip")
    assert 1.0 in skip.skipped_times
    assert np.all(skip.increments[skip.times == 1.0] == 0)
    pinv = fit_additive(h, "D", ["1", "A"], singular="pinv")
    assert 1.0 in pinv.skipped_times
    # minimum-norm solution puts the whole jump on the intercept
    np.testing.assert_allclose(pinv.increments[pinv.times == 1.0], [[1 / 3, 0.0]])


def test_bad_singular_policy(rng):
    with pytest.raises(ValueError):
        fit_additive(random_history(rng, 5), "D", ["1"], singular="drop")


def test_non_finite_weight_rejected():
    h = history_from([(1, 1.0, "D")], n=2)
    w = StepWeightSet(h.ids, [0.5], np.array([[np.inf], [1.0]]), 1.0, "combined")
    with pytest.raises(ValueError, match="non-finite"):
        fit_additive(h, "D", ["1"], w)


def test_no_events():
    h = history_from([(1, 1.0, "A")], n=2)
    c = fit_additive(h, "D", ["1", "A"])
    assert c.increments.shape == (0, 2)


def test_csv_round_trip(tmp_path, rng):
    c = fit_additive(random_history(rng, 30), "D", ["1", "A"])
    c.write(tmp_path / "c.csv", tmp_path / "c.json")
    r = CumCoef.read(tmp_path / "c.csv", tmp_path / "c.json")
    assert np.array_equal(r.increments, c.increments)
    assert r.columns == ("1", "A")
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "time,increment_1,increment_2,cumulative_1,cumulative_2"


def test_estimator_api(rng):
    h = random_history(rng, 30)
    est = AalenAdditiveRegression(design=("1", "A"))
    assert est.get_params() == {"design": ("1", "A"), "outcome": "D", "singular": "pinv"}
    est.fit(h)
    assert est.predict([0.0, 10.0]).shape == (2, 2)
    assert np.array_equal(est.predict([10.0])[0], est.cumcoef_.cumulative[-1])


@given(st.integers(0, 2**31 - 1), st.sampled_from([("1", "A"), ("1", "L", "A:L"), ("1", "x", "A:x", "L")]))
def test_sweep_matches_dense_path(seed, design):
    h = random_history(np.random.default_rng(seed), 25, baseline=True)
    a = fit_additive(h, "D", design)
    b = fit_additive(h, "D", design, unit_weights(h))
    np.testing.assert_allclose(a.increments, b.increments, atol=1e-10)
    assert np.array_equal(a.skipped_times, b.skipped_times)
