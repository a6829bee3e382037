import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctmsm import EventRecord, build_history

settings.register_profile("ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def history_from(events, n=None, horizon=10.0, baseline=None, names=None):
    """Build a history from ``(id, time, kind)`` tuples; ids ``1..n`` all exist."""
    records = [EventRecord(int(i), float(t), k) for i, t, k in events]
    if baseline is None:
        ids = range(1, (n or max(r.subject_id for r in records)) + 1)
        baseline = {i: () for i in ids}
        names = ()
    return build_history(records, baseline, horizon, names=names)


def random_history(rng, n, horizon=10.0, p_treat=0.6, p_cov=0.5, p_cens=0.2, baseline=False):
    """Random valid history with distinct event times."""
    events = []
    for i in range(1, n + 1):
        exit_t = rng.uniform(0.5, horizon)
        kind = "C" if rng.random() < p_cens else "D"
        if rng.random() < 0.85:
            events.append((i, exit_t, kind))
        if rng.random() < p_treat:
            events.append((i, rng.uniform(0, exit_t), "A"))
        if rng.random() < p_cov:
            events.append((i, rng.uniform(0, exit_t), "L"))
    base = None
    names = None
    if baseline:
        base = {i: (float(rng.random() < 0.5),) for i in range(1, n + 1)}
        names = ("x",)
    if base is None:
        return history_from(events, n=n, horizon=horizon)
    return history_from(events, horizon=horizon, baseline=base, names=names)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
