import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from ctmsm import (
    CumCoef,
    PluginEstimator,
    StepPath,
    cumulative_incidence_spec,
    identity_spec,
    nelson_aalen,
    relative_survival_spec,
    rmst_spec,
    solve_plugin,
    survival_spec,
)
from ctmsm.transform import bind, get_spec

from conftest import history_from, random_history


def step(times, jumps):
    jumps = np.asarray(jumps, dtype=float)
    return StepPath(np.asarray(times, float), np.cumsum(jumps, axis=0), 0.0, jumps)


def kaplan_meier(history, kind="D"):
    """Product-limit estimator from raw counts."""
    t_ev = history.times(kind)
    stop = np.minimum(history.exit_times, t_ev)
    times = np.unique(t_ev[np.isfinite(t_ev)])
    s, out = 1.0, []
    for t in times:
        d = np.sum(t_ev == t)
        r = np.sum(stop >= t)
        s *= 1.0 - d / r
        out.append(s)
    return times, np.array(out)


def test_identity_reproduces_integrators():
    a = step([1.0, 2.0], [0.3, -0.1])
    b = step([1.5, 2.0], [0.7, 0.2])
    p = solve_plugin(identity_spec(2), [a, b])
    assert np.array_equal(p.times, [1.0, 1.5, 2.0])
    assert np.array_equal(p.states[:, 0], a(p.times))
    assert np.array_equal(p.states[:, 1], b(p.times))


def test_survival_two_steps():
    p = solve_plugin(survival_spec(), [step([1.0, 2.0], [0.1, 0.2])])
    np.testing.assert_allclose(p.states[:, 0], [0.9, 0.72], rtol=1e-15)
    assert p(0.5)[0] == 1.0


def test_survival_zero_hazard():
    p = solve_plugin(survival_spec(), [step([1.0, 3.0], [0.0, 0.0])])
    assert np.all(p.states == 1.0)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30))
def test_survival_product_oracle(jumps):
    times = np.arange(1, len(jumps) + 1, dtype=float)
    p = solve_plugin(survival_spec(), [step(times, jumps)])
    np.testing.assert_allclose(p.states[:, 0], np.cumprod(1 - np.asarray(jumps)), atol=1e-12)
    assert np.all(np.diff(p.states[:, 0]) <= 0)
    assert np.all((p.states >= 0) & (p.states <= 1))


def test_kaplan_meier_equivalence(rng):
    for _ in range(10):
        h = random_history(rng, 80)
        p = solve_plugin(survival_spec(), [nelson_aalen(h, "D")])
        t, km = kaplan_meier(h)
        assert np.array_equal(p.times, t)
        np.testing.assert_allclose(p.states[:, 0], km, atol=1e-12, rtol=0)


def test_km_with_ties():
    h = history_from([(1, 1.0, "D"), (2, 1.0, "D"), (3, 2.0, "C"), (4, 3.0, "D")], n=5)
    p = solve_plugin(survival_spec(), [nelson_aalen(h, "D")])
    np.testing.assert_allclose(p.states[:, 0], [3 / 5, 3 / 5 * 1 / 2], atol=1e-15)


def test_relative_survival():
    same = step([1.0, 2.0], [0.2, 0.1])
    assert np.all(solve_plugin(relative_survival_spec(), [same, same]).states == 1.0)
    p = solve_plugin(relative_survival_spec(), [step([1.0], [0.2]), step([1.0], [0.1])])
    assert p.states[0, 0] == pytest.approx(0.9)


def test_relative_survival_binding():
    coef = CumCoef([1.0, 2.0], [[0.1, 0.05], [0.1, 0.0]], ("1", "A"))
    p = solve_plugin(relative_survival_spec(), bind(relative_survival_spec(), coef, [[1, 1], [1, 0]]))
    np.testing.assert_allclose(p.states[:, 0], [0.95, 0.95])
    with pytest.raises(ValueError, match="combinations"):
        bind(relative_survival_spec(), coef, [[1, 1]])


def test_cumulative_incidence_single_cause():
    b = step([1.0, 2.0, 4.0], [0.25, 0.4, 0.5])
    p = solve_plugin(cumulative_incidence_spec(), [b, b])
    np.testing.assert_allclose(p.states[:, 1], 1 - p.states[:, 0], atol=1e-15)


def test_cumulative_incidence_zero_cause():
    p = solve_plugin(cumulative_incidence_spec(), [step([1.0], [0.0]), step([1.0], [0.5])])
    assert np.all(p.states[:, 1] == 0.0)


def test_aalen_johansen_hand():
    # 4 subjects: cause 1 at t=1, cause 2 at t=2, cause 1 at t=3
    all_cause = step([1.0, 2.0, 3.0], [1 / 4, 1 / 3, 1 / 2])
    cause1 = step([1.0, 2.0, 3.0], [1 / 4, 0.0, 1 / 2])
    p = solve_plugin(cumulative_incidence_spec(), [cause1, all_cause])
    np.testing.assert_allclose(p.states[:, 1], [0.25, 0.25, 0.5], atol=1e-15)
    np.testing.assert_allclose(p.states[:, 0], [0.75, 0.5, 0.25], atol=1e-15)


def test_rmst_zero_hazard():
    p = solve_plugin(rmst_spec(5.0), [step([1.0, 2.5], [0.0, 0.0])], horizon=5.0)
    np.testing.assert_allclose(p.states[:, 1], p.times)


def test_rmst_constant_hazard_quadrature():
    lam, dt, T = 0.3, 1e-3, 4.0
    times = np.arange(1, int(T / dt) + 1) * dt
    p = solve_plugin(rmst_spec(T), [step(times, np.full(len(times), lam * dt))], horizon=T)
    exact = quad(lambda s: np.exp(-lam * s), 0, T)[0]
    assert p.states[-1, 1] == pytest.approx(exact, rel=1e-3)
    mu = p.states[:, 1]
    assert np.all(np.diff(mu) >= 0) and np.all(mu <= p.times + 1e-12)


def test_rmst_needs_horizon():
    with pytest.raises(ValueError, match="horizon"):
        solve_plugin(rmst_spec(1.0), [step([0.5], [0.1])])
    with pytest.raises(ValueError):
        rmst_spec(0.0)


@pytest.mark.parametrize("name", ["survival", "relative_survival", "cumulative_incidence", "rmst"])
def test_lipschitz_bound(rng, name):
    spec = get_spec(name, horizon=5.0)
    for _ in range(20):
        times = np.sort(rng.uniform(0, 5, 15))
        paths = [step(times, rng.uniform(-0.2, 0.3, 15)) for _ in range(spec.n_hazards)]
        delta = rng.normal(size=spec.d) * 1e-3
        base = solve_plugin(spec, paths, 5.0)
        pert = solve_plugin(_shift(spec, delta), paths, 5.0)
        V = sum(np.abs(p.jumps).sum() for p in paths) + (5.0 if spec.time_columns else 0.0)
        gap = np.abs(pert.states[-1] - base.states[-1]).max()
        assert gap <= np.exp(spec.lipschitz * V) * np.abs(delta).max() * (1 + 1e-9)


def _shift(spec, delta):
    from dataclasses import replace

    return replace(spec, eta0=tuple(np.add(spec.eta0, delta)))


def test_simultaneous_jumps_joint_update():
    # sequential updates would give (1-0.5)(1+0.5) = 0.75; the joint step gives 1
    same_time = [step([1.0], [0.5]), step([1.0], [0.5])]
    assert solve_plugin(relative_survival_spec(), same_time).states[0, 0] == 1.0


def test_errors():
    with pytest.raises(KeyError, match="unknown transform"):
        get_spec("median")
    with pytest.raises(ValueError, match="needs 2"):
        solve_plugin(relative_survival_spec(), [step([1.0], [0.1])])
    blow = identity_spec(1)
    with pytest.raises(FloatingPointError, match="t=2.0"):
        solve_plugin(blow, [step([1.0, 2.0], [1.0, np.inf])])


def test_plugin_estimator(rng):
    coef = nelson_aalen(random_history(rng, 50), "D")
    est = PluginEstimator("survival")
    assert est.get_params() == {"spec": "survival", "combos": None, "horizon": None}
    s = est.fit(coef).transform([0.0, 10.0])
    assert s[0, 0] == 1.0 and 0 < s[1, 0] < 1


def test_param_csv(tmp_path):
    p = solve_plugin(survival_spec(), [step([1.0, 2.0], [0.1, 0.2])])
    p.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "time,state_1" and lines[1] == "0.0,1.0" and len(lines) == 4
