"""Event-history data model, step paths, and design matrices.

Every subject carries at most one jump of each of the processes
``A`` (treatment), ``L`` (covariate change), ``D`` (outcome) and ``C``
(censoring).  ``A`` and ``L`` are monotone 0 -> 1 indicators; ``D`` and ``C``
are terminal.  All design and weight evaluations at a time ``t`` use left
limits, i.e. only events strictly before ``t`` are visible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

KINDS = ("D", "A", "L", "C")
# tie-breaking order at equal times
KIND_PRIORITY = {"D": 0, "A": 1, "L": 2, "C": 3}
INDICATORS = ("A", "L")
TERMINAL = ("D", "C")
RESERVED = frozenset(KINDS) | {"1"}


@dataclass(frozen=True)
class EventRecord:
    subject_id: int
    time: float
    kind: str
    payload: tuple[float, ...] | None = None

    def sort_key(self):
        return (self.time, KIND_PRIORITY[self.kind], self.subject_id)


class EventHistory:
    """Validated, deterministically ordered collection of event records.

    Use :func:`build_history` to construct one.  Per-subject event times are
    exposed as arrays aligned with :attr:`ids` (``np.inf`` when the event
    never happens), which is what all the estimators consume.
    """

    def __init__(self, records, ids, event_times, baseline, baseline_names, horizon):
        self.records = tuple(records)
        self.ids = ids
        self.event_times = event_times
        self.baseline = baseline
        self.baseline_names = tuple(baseline_names)
        self.horizon = float(horizon)
        self._index = {int(s): k for k, s in enumerate(ids)}

    @property
    def n(self) -> int:
        return len(self.ids)

    def times(self, kind: str) -> np.ndarray:
        """Per-subject time of the ``kind`` event (``inf`` if absent)."""
        try:
            return self.event_times[kind]
        except KeyError:
            raise KeyError(f"unknown process {kind!r}; expected one of {KINDS}") from None

    @property
    def exit_times(self) -> np.ndarray:
        """Time each subject leaves follow-up through D or C."""
        return np.minimum(self.event_times["D"], self.event_times["C"])

    def index_of(self, subject: int) -> int:
        try:
            return self._index[int(subject)]
        except KeyError:
            raise KeyError(f"unknown subject {subject!r}") from None

    def baseline_column(self, name: str) -> np.ndarray:
        try:
            j = self.baseline_names.index(name)
        except ValueError:
            raise KeyError(f"unknown baseline variable {name!r}") from None
        return self.baseline[:, j]

    def event_grid(self, kind: str) -> np.ndarray:
        """Sorted distinct times at which a ``kind`` event occurs."""
        t = self.times(kind)
        return np.unique(t[np.isfinite(t)])

    def at_risk_matrix(self, process: str, times) -> np.ndarray:
        """Boolean ``(n, m)`` at-risk indicators for ``process`` at ``times``.

        A subject is at risk at ``t`` when neither the process's own event
        nor D nor C happened strictly before ``t``.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        last = np.minimum(self.exit_times, self.times(process))
        return last[:, None] >= times[None, :]

    def subset(self, n: int) -> "EventHistory":
        """History restricted to the first ``n`` subjects (in id order)."""
        keep = set(int(s) for s in self.ids[:n])
        records = [r for r in self.records if r.subject_id in keep]
        baseline = {int(s): self.baseline[k] for k, s in enumerate(self.ids[:n])}
        return build_history(records, baseline, self.horizon, names=self.baseline_names)

    def __len__(self):
        return self.n

    def __repr__(self):
        counts = {k: int(np.isfinite(v).sum()) for k, v in self.event_times.items()}
        return f"EventHistory(n={self.n}, horizon={self.horizon}, events={counts})"


def build_history(
    records: Iterable[EventRecord],
    baseline: Mapping[int, Sequence[float]] | pd.DataFrame | None = None,
    horizon: float = 1.0,
    names: Sequence[str] | None = None,
) -> EventHistory:
    """Validate and sort raw event records.

    Parameters
    ----------
    records : iterable of EventRecord
    baseline : mapping or DataFrame, optional
        Per-subject baseline variables.  A DataFrame must carry an ``id``
        column (or index); a mapping goes from subject id to a vector whose
        entries are named by ``names``.
    horizon : float
        End of follow-up ``T``.
    names : sequence of str, optional
        Baseline variable names for mapping input.

    Returns
    -------
    EventHistory
        Records ordered by ``(time, kind priority D < A < L < C, subject id)``.
    """
    horizon = float(horizon)
    if not np.isfinite(horizon) or horizon <= 0:
        raise ValueError(f"horizon must be positive and finite, got {horizon}")

    ids_b, base, base_names = _coerce_baseline(baseline, names)
    recs = []
    for r in records:
        if not isinstance(r, EventRecord):
            r = EventRecord(*r)
        if r.kind not in KIND_PRIORITY:
            raise ValueError(f"unknown event kind {r.kind!r}")
        t = float(r.time)
        if not np.isfinite(t) or t < 0:
            raise ValueError(f"event time must be a finite nonnegative number, got {r.time}")
        if t > horizon:
            raise ValueError(f"event time {t} lies beyond the horizon {horizon}")
        payload = None if r.payload is None else tuple(float(v) for v in r.payload)
        recs.append(EventRecord(int(r.subject_id), t, r.kind, payload))
    recs.sort(key=EventRecord.sort_key)

    arity: dict[str, int] = {}
    seen: dict[int, dict[str, float]] = {}
    for r in recs:
        if r.payload is not None:
            if arity.setdefault(r.kind, len(r.payload)) != len(r.payload):
                raise ValueError(
                    f"payload arity mismatch for kind {r.kind}: "
                    f"expected {arity[r.kind]}, got {len(r.payload)} (subject {r.subject_id})"
                )
        mine = seen.setdefault(r.subject_id, {})
        if r.kind in mine:
            raise ValueError(f"subject {r.subject_id} has more than one {r.kind} event")
        if r.kind in TERMINAL and any(k in mine for k in TERMINAL):
            raise ValueError(f"subject {r.subject_id} has duplicate terminal events")
        end = min((mine[k] for k in TERMINAL if k in mine), default=np.inf)
        if r.time > end:
            raise ValueError(
                f"subject {r.subject_id} has a {r.kind} event at {r.time} after leaving follow-up at {end}"
            )
        mine[r.kind] = r.time

    all_ids = sorted(set(seen) | set(ids_b))
    ids = np.asarray(all_ids, dtype=np.int64)
    index = {s: k for k, s in enumerate(all_ids)}
    event_times = {k: np.full(len(ids), np.inf) for k in KINDS}
    for s, mine in seen.items():
        for k, t in mine.items():
            event_times[k][index[s]] = t

    baseline_arr = np.full((len(ids), len(base_names)), np.nan)
    for s, row in zip(ids_b, base):
        baseline_arr[index[s]] = row
    if base_names and np.isnan(baseline_arr).any():
        missing = ids[np.isnan(baseline_arr).any(axis=1)]
        raise ValueError(f"baseline values missing for subjects {missing[:5].tolist()}")
    return EventHistory(recs, ids, event_times, baseline_arr, base_names, horizon)


def _coerce_baseline(baseline, names):
    if baseline is None:
        return [], np.empty((0, 0)), ()
    if isinstance(baseline, pd.DataFrame):
        df = baseline.reset_index() if "id" not in baseline.columns else baseline
        if "id" not in df.columns:
            raise ValueError("baseline table needs an 'id' column")
        cols = [c for c in df.columns if c not in ("id", "index")]
        ids = [int(v) for v in df["id"]]
        values = df[cols].to_numpy(dtype=float).reshape(len(ids), len(cols))
        names = tuple(str(c) for c in cols)
    else:
        ids = [int(k) for k in baseline]
        values = np.array([np.atleast_1d(np.asarray(v, dtype=float)) for v in baseline.values()])
        values = values.reshape(len(ids), -1)
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(values.shape[1]))
        names = tuple(names)
        if len(names) != values.shape[1]:
            raise ValueError(f"got {len(names)} baseline names for {values.shape[1]} columns")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids in baseline table")
    bad = RESERVED.intersection(names)
    if bad:
        raise ValueError(f"baseline variable names {sorted(bad)} are reserved")
    return ids, values, names


def at_risk(history: EventHistory, subject: int, process: str, t: float) -> int:
    """1 if ``subject`` is at risk for ``process`` at ``t`` (left-limit rule)."""
    if not 0 <= t <= history.horizon:
        raise ValueError(f"t={t} outside [0, {history.horizon}]")
    i = history.index_of(subject)
    return int(history.at_risk_matrix(process, [t])[i, 0])


class StepPath:
    """Right-continuous piecewise-constant function with left limits.

    ``values[k]`` holds on ``[jump_times[k], jump_times[k + 1])`` and
    ``initial_value`` before the first jump.  Values may be vectors.
    """

    def __init__(self, jump_times, values, initial_value=0.0, jumps=None):
        self.jump_times = np.asarray(jump_times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.initial_value = np.asarray(initial_value, dtype=float)
        # exact jump sizes when the path was built by summing them
        self._jumps = None if jumps is None else np.asarray(jumps, dtype=float)
        if self.jump_times.ndim != 1:
            raise ValueError("jump_times must be one-dimensional")
        if len(self.values) != len(self.jump_times):
            raise ValueError("values and jump_times differ in length")
        if np.any(np.diff(self.jump_times) <= 0):
            raise ValueError("jump_times must be strictly increasing")
        if len(self.values) and self.values.shape[1:] != self.initial_value.shape:
            raise ValueError("initial_value shape does not match values")

    def _lookup(self, t, side):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side=side) - 1
        table = np.concatenate([self.initial_value[None], self.values]) if len(self.values) else self.initial_value[None]
        return table[idx + 1]

    def __call__(self, t):
        return self._lookup(t, "right")

    @property
    def jumps(self) -> np.ndarray:
        if self._jumps is not None:
            return self._jumps
        prev = np.concatenate([self.initial_value[None], self.values[:-1]]) if len(self.values) else self.values
        return self.values - prev

    def left_limit(self, t):
        return self._lookup(t, "left")

    def __repr__(self):
        return f"StepPath(jumps={len(self.jump_times)}, initial={self.initial_value})"


class DesignSpec:
    """Named design columns built from indicators and baseline variables.

    Each column is a product of factors separated by ``:``.  A factor is
    ``1`` (intercept), an indicator process ``A`` or ``L``, or a baseline
    variable name.  Because indicators switch on once, every column is
    ``scale * 1[onset < t]`` for a per-subject scale and onset time.

    >>> DesignSpec(["1", "A", "L", "A:L"]).columns
    ('1', 'A', 'L', 'A:L')
    """

    def __init__(self, columns: Sequence[str]):
        if isinstance(columns, str):
            columns = [columns]
        cols = tuple(str(c).strip() for c in columns)
        if not cols:
            raise ValueError("a design needs at least one column")
        self.columns = cols
        self._factors = [tuple(f.strip() for f in c.split(":")) for c in cols]

    @property
    def p(self) -> int:
        return len(self.columns)

    def validate(self, history: EventHistory):
        for col, factors in zip(self.columns, self._factors):
            for f in factors:
                if f in ("1", *INDICATORS) or f in history.baseline_names:
                    continue
                raise ValueError(f"design column {col!r} references unknown variable {f!r}")
        return self

    def components(self, history: EventHistory):
        """Per-subject ``(scale, onset)`` arrays, each of shape ``(n, p)``."""
        self.validate(history)
        n = history.n
        scale = np.ones((n, self.p))
        onset = np.full((n, self.p), -np.inf)
        for j, factors in enumerate(self._factors):
            for f in factors:
                if f == "1":
                    continue
                if f in INDICATORS:
                    onset[:, j] = np.maximum(onset[:, j], history.times(f))
                else:
                    scale[:, j] *= history.baseline_column(f)
        return scale, onset

    def tensor(self, history: EventHistory, times) -> np.ndarray:
        """Left-limit design values, shape ``(n, m, p)``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        scale, onset = self.components(history)
        return scale[:, None, :] * (onset[:, None, :] < times[None, :, None])

    def matrix(self, history: EventHistory, t: float) -> np.ndarray:
        return self.tensor(history, [t])[:, 0, :]

    def __eq__(self, other):
        return isinstance(other, DesignSpec) and other.columns == self.columns

    def __hash__(self):
        return hash(self.columns)

    def __repr__(self):
        return f"DesignSpec({list(self.columns)})"


def design_row(history: EventHistory, spec: DesignSpec, subject: int, t: float) -> np.ndarray:
    """Covariate row of ``subject`` evaluated as a left limit at ``t``."""
    i = history.index_of(subject)
    return spec.matrix(history, t)[i]


def expand_to_event_grid(history: EventHistory, event_kind: str = "D", weights=None, design=None) -> pd.DataFrame:
    """One row per at-risk subject per ``event_kind`` event time.

    Each row carries left-limit design values and the weight evaluated just
    before the event time, plus an ``event`` column with the subject's jump.
    """
    if design is None:
        design = DesignSpec(["1", *INDICATORS, *history.baseline_names])
    elif not isinstance(design, DesignSpec):
        design = DesignSpec(design)
    grid = history.event_grid(event_kind)
    risk = history.at_risk_matrix(event_kind, grid)
    rows_i, rows_k = np.nonzero(risk.T)[::-1]
    order = np.lexsort((history.ids[rows_i], rows_k))
    rows_i, rows_k = rows_i[order], rows_k[order]
    X = design.tensor(history, grid)
    if weights is None:
        w = np.ones(len(rows_i))
    else:
        w = weights.evaluate(grid, left=True)[rows_i, rows_k]
    out = {"id": history.ids[rows_i], "time": grid[rows_k]}
    for j, c in enumerate(design.columns):
        out[c] = X[rows_i, rows_k, j]
    out["weight"] = w
    out["event"] = (history.times(event_kind)[rows_i] == grid[rows_k]).astype(int)
    return pd.DataFrame(out)


def fmt(x) -> str:
    """Shortest round-trip decimal representation of a float."""
    return repr(float(x))


def read_history_csv(events_path, baseline_path=None, horizon=None) -> EventHistory:
    """Load the long-format event CSV (``id,time,kind,value``)."""
    records = []
    with open(events_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "time", "kind"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"event file lacks columns {sorted(missing)}")
        for row in reader:
            value = (row.get("value") or "").strip()
            payload = tuple(float(v) for v in value.split(";")) if value else None
            records.append(EventRecord(int(row["id"]), float(row["time"]), row["kind"].strip(), payload))
    baseline = pd.read_csv(baseline_path, float_precision="round_trip") if baseline_path else None
    if horizon is None:
        raise ValueError("a horizon is required to read an event history")
    return build_history(records, baseline, horizon)


def write_history_csv(history: EventHistory, events_path, baseline_path=None):
    with open(events_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", "kind", "value"])
        for r in history.records:
            value = "" if r.payload is None else ";".join(fmt(v) for v in r.payload)
            w.writerow([r.subject_id, fmt(r.time), r.kind, value])
    if baseline_path is not None:
        with open(baseline_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *history.baseline_names])
            for s, row in zip(history.ids, history.baseline):
                w.writerow([int(s), *(fmt(v) for v in row)])


@dataclass
class HistoryConfig:
    """JSON-side description of an analysis: horizon and named designs."""

    horizon: float
    designs: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        return cls(float(raw["horizon"]), dict(raw.get("designs", {})))

    def design(self, name: str) -> DesignSpec:
        try:
            return DesignSpec(self.designs[name])
        except KeyError:
            raise KeyError(f"no design named {name!r} in config") from None
