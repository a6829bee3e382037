import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctmsm import DesignSpec, EventRecord, StepPath, at_risk, build_history, design_row, expand_to_event_grid
from ctmsm.core import read_history_csv, write_history_csv
from ctmsm.weights import StepWeightSet

from conftest import history_from, random_history


def kinds(h):
    return [(r.time, r.kind, r.subject_id) for r in h.records]


class TestBuildHistory:
    def test_sorted_by_time(self):
        h = history_from([(1, 1.0, "D"), (2, 0.5, "A")])
        assert kinds(h) == [(0.5, "A", 2), (1.0, "D", 1)]

    def test_event_after_exit_rejected(self):
        with pytest.raises(ValueError, match="after leaving"):
            history_from([(1, 1.0, "D"), (1, 2.0, "A")])

    def test_ties_use_kind_priority(self):
        h = history_from([(2, 2.0, "C"), (1, 2.0, "D")])
        assert [r.kind for r in h.records] == ["D", "C"]

    def test_ties_then_subject_id(self):
        h = history_from([(3, 1.0, "A"), (1, 1.0, "A"), (2, 1.0, "L")])
        assert [(r.kind, r.subject_id) for r in h.records] == [("A", 1), ("A", 3), ("L", 2)]

    def test_duplicate_terminal(self):
        with pytest.raises(ValueError, match="terminal"):
            history_from([(1, 1.0, "D"), (1, 1.0, "C")])

    def test_negative_time(self):
        with pytest.raises(ValueError, match="nonnegative"):
            history_from([(1, -0.1, "A")])

    def test_beyond_horizon(self):
        with pytest.raises(ValueError, match="horizon"):
            history_from([(1, 11.0, "A")])

    def test_payload_arity(self):
        recs = [EventRecord(1, 1.0, "L", (1.0,)), EventRecord(2, 2.0, "L", (1.0, 2.0))]
        with pytest.raises(ValueError, match="arity"):
            build_history(recs, None, 5.0)

    def test_reserved_baseline_name(self):
        with pytest.raises(ValueError, match="reserved"):
            build_history([], {1: (0.0,)}, 5.0, names=("A",))

    def test_idempotent(self, rng):
        h = random_history(rng, 30)
        h2 = build_history(h.records, {i: () for i in h.ids}, h.horizon, names=())
        assert kinds(h) == kinds(h2)

    @given(st.lists(st.tuples(st.integers(1, 6), st.floats(0, 10, allow_nan=False), st.sampled_from("DALC")), max_size=25))
    def test_sort_is_total_and_deterministic(self, raw):
        # keep one event per (subject, kind) and nothing after exit
        seen, events = {}, []
        for i, t, k in raw:
            if (i, k) in seen or (k in "DC" and any((i, c) in seen for c in "DC")):
                continue
            seen[(i, k)] = t
            events.append((i, t, k))
        events = [(i, t, k) for i, t, k in events if t <= min([seen.get((i, c), np.inf) for c in "DC"])]
        if not events:
            return
        a = history_from(events, n=6)
        b = history_from(list(reversed(events)), n=6)
        assert kinds(a) == kinds(b)
        keys = [r.sort_key() for r in a.records]
        assert keys == sorted(keys)


class TestAtRisk:
    def test_left_limit_at_death(self):
        h = history_from([(1, 3.0, "D")])
        assert at_risk(h, 1, "D", 3.0) == 1
        assert at_risk(h, 1, "D", 3.0 + 1e-9) == 0

    def test_treated_leaves_treatment_risk_set(self):
        h = history_from([(1, 2.0, "A")])
        assert at_risk(h, 1, "A", 2.5) == 0
        assert at_risk(h, 1, "D", 2.5) == 1

    def test_censoring(self):
        h = history_from([(1, 1.0, "C")])
        assert at_risk(h, 1, "D", 1.5) == 0

    def test_unknown_subject_and_process(self):
        h = history_from([(1, 1.0, "C")])
        with pytest.raises(KeyError):
            at_risk(h, 9, "D", 0.5)
        with pytest.raises(KeyError):
            at_risk(h, 1, "Q", 0.5)

    def test_non_increasing(self, rng):
        h = random_history(rng, 40)
        ts = np.linspace(0, 10, 101)
        for proc in "DALC":
            y = h.at_risk_matrix(proc, ts)
            assert np.all(np.diff(y.astype(int), axis=1) <= 0)


class TestDesign:
    def test_untreated_row(self):
        h = history_from([(1, 5.0, "D")])
        assert design_row(h, DesignSpec(["1", "A"]), 1, 3.0).tolist() == [1.0, 0.0]

    def test_left_limit_excludes_jump_at_t(self):
        h = history_from([(1, 1.0, "L"), (1, 2.0, "A")])
        row = design_row(h, DesignSpec(["1", "A", "L", "A:L"]), 1, 2.0)
        assert row.tolist() == [1.0, 0.0, 1.0, 0.0]

    def test_unknown_column(self):
        h = history_from([(1, 1.0, "L")])
        with pytest.raises(ValueError, match="unknown variable"):
            design_row(h, DesignSpec(["1", "Z"]), 1, 2.0)

    def test_five_subject_hand_matrix(self):
        events = [(1, 1.0, "L"), (1, 2.0, "A"), (2, 0.5, "A"), (3, 3.0, "L"), (4, 0.2, "L"), (4, 0.3, "A"), (5, 4.0, "D")]
        base = {1: (2.0,), 2: (0.0,), 3: (1.0,), 4: (-1.0,), 5: (3.0,)}
        h = history_from(events, baseline=base, names=("x",))
        spec = DesignSpec(["1", "A", "L", "A:L", "x", "A:x"])
        expected = np.array(
            [
                [1, 1, 1, 1, 2, 2],
                [1, 1, 0, 0, 0, 0],
                [1, 0, 0, 0, 1, 0],
                [1, 1, 1, 1, -1, -1],
                [1, 0, 0, 0, 3, 0],
            ],
            dtype=float,
        )
        for i in range(5):
            assert np.array_equal(design_row(h, spec, i + 1, 2.5), expected[i])

    def test_piecewise_constant(self, rng):
        h = random_history(rng, 20)
        spec = DesignSpec(["1", "A", "L", "A:L"])
        ts = np.sort(rng.uniform(0, 10, 50))
        X = spec.tensor(h, ts)
        for i in range(h.n):
            own = np.array([h.event_times[k][i] for k in "AL"])
            for a, b in zip(ts[:-1], ts[1:]):
                if not np.any((own >= a) & (own < b)):
                    assert np.array_equal(X[i, np.searchsorted(ts, a)], X[i, np.searchsorted(ts, b)])


class TestStepPath:
    def test_right_continuous_and_left_limit(self):
        p = StepPath([1.0, 2.0], [5.0, 7.0], 3.0)
        assert p(np.array([0.5, 1.0, 1.5, 2.0])).tolist() == [3.0, 5.0, 5.0, 7.0]
        assert p.left_limit(np.array([1.0, 2.0, 2.5])).tolist() == [3.0, 5.0, 7.0]

    def test_jumps(self):
        p = StepPath([1.0, 2.0], [5.0, 7.0], 3.0)
        assert p.jumps.tolist() == [2.0, 2.0]

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            StepPath([2.0, 1.0], [1.0, 2.0])


class TestExpand:
    def test_rows_and_risk_sets(self):
        h = history_from([(1, 1.0, "D"), (2, 2.0, "D")])
        df = expand_to_event_grid(h, "D", design=["1"])
        assert list(zip(df["id"], df["time"])) == [(1, 1.0), (2, 1.0), (2, 2.0)]
        assert df["event"].tolist() == [1, 0, 1]

    def test_unit_weights(self):
        h = history_from([(1, 1.0, "D"), (2, 2.0, "D")])
        assert (expand_to_event_grid(h, "D")["weight"] == 1).all()

    def test_weight_is_left_limit(self):
        h = history_from([(1, 0.9, "D"), (2, 1.0, "D"), (3, 5.0, "C")])
        w = StepWeightSet(h.ids, [0.9], np.array([[2.0], [2.0], [2.0]]), 1.0, "combined")
        df = expand_to_event_grid(h, "D", w, ["1"])
        assert df.loc[df.time == 0.9, "weight"].unique().tolist() == [1.0]
        assert df.loc[df.time == 1.0, "weight"].unique().tolist() == [2.0]

    def test_row_count_matches_risk_sets(self, rng):
        h = random_history(rng, 60)
        grid = h.event_grid("D")
        df = expand_to_event_grid(h, "D")
        assert len(df) == int(h.at_risk_matrix("D", grid).sum())


def test_csv_round_trip(tmp_path, rng):
    h = random_history(rng, 25, baseline=True)
    write_history_csv(h, tmp_path / "e.csv", tmp_path / "b.csv")
    h2 = read_history_csv(tmp_path / "e.csv", tmp_path / "b.csv", h.horizon)
    assert kinds(h) == kinds(h2)
    assert np.array_equal(h.baseline, h2.baseline)
    assert np.array_equal(h.ids, h2.ids)
