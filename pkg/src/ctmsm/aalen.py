"""Aalen additive hazard regression with optional subject weights."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import DesignSpec, EventHistory, StepPath, fmt
from .validation import check_design, check_history

RANK_TOL = 1e-12
# cap on n * chunk * p elements held at once
_CHUNK_BUDGET = 4_000_000


@dataclass
class CumCoef:
    """Cumulative regression coefficients as a step function of time.

    ``skipped_times`` lists event times where the Gram matrix was singular
    or ill-conditioned; how those increments were formed is recorded in
    ``singular_policy``.
    """

    times: np.ndarray
    increments: np.ndarray
    columns: tuple[str, ...]
    skipped_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    singular_policy: str = "pinv"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.columns = tuple(self.columns)
        self.increments = np.asarray(self.increments, dtype=float).reshape(len(self.times), len(self.columns))
        self.skipped_times = np.asarray(self.skipped_times, dtype=float)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments, axis=0)

    @property
    def p(self) -> int:
        return self.increments.shape[1]

    def path(self) -> StepPath:
        return StepPath(self.times, self.cumulative, np.zeros(self.p), self.increments)

    def column(self, j) -> StepPath:
        if isinstance(j, str):
            j = self.columns.index(j)
        return StepPath(self.times, self.cumulative[:, j], 0.0, self.increments[:, j])

    def combine(self, coefs) -> StepPath:
        """Step path of the linear combination ``sum_j coefs[j] * B_j``."""
        coefs = np.asarray(coefs, dtype=float)
        if coefs.shape != (self.p,):
            raise ValueError(f"need {self.p} coefficients, got shape {coefs.shape}")
        inc = self.increments @ coefs
        return StepPath(self.times, np.cumsum(inc), 0.0, inc)

    def __call__(self, t):
        return self.path()(t)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            p = self.p
            w.writerow(["time", *(f"increment_{j + 1}" for j in range(p)), *(f"cumulative_{j + 1}" for j in range(p))])
            for t, inc, cum in zip(self.times, self.increments, self.cumulative):
                w.writerow([fmt(t), *map(fmt, inc), *map(fmt, cum)])

    def metadata(self) -> dict:
        return {
            "columns": list(self.columns),
            "skipped_times": [float(t) for t in self.skipped_times],
            "singular_policy": self.singular_policy,
        }

    def write(self, csv_path, json_path=None):
        self.to_csv(csv_path)
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.metadata(), fh, indent=2)

    @classmethod
    def read(cls, csv_path, json_path=None):
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        p = sum(h.startswith("increment_") for h in header)
        arr = np.array(body, dtype=float).reshape(len(body), 1 + 2 * p)
        meta = {}
        if json_path is not None:
            with open(json_path) as fh:
                meta = json.load(fh)
        columns = meta.get("columns", [f"b{j + 1}" for j in range(p)])
        return cls(arr[:, 0], arr[:, 1 : 1 + p], columns, meta.get("skipped_times", []), meta.get("singular_policy", "pinv"))


def _solve_increments(G, rhs, policy):
    """Solve the stacked normal equations ``G x = rhs``.

    Returns the increments and a mask of rank-deficient systems.
    """
    s = np.linalg.svd(G, compute_uv=False)
    top = s[:, 0]
    singular = (top <= 0) | (s[:, -1] <= RANK_TOL * top) | ~np.isfinite(top)
    out = np.zeros_like(rhs)
    ok = ~singular
    if ok.any():
        out[ok] = np.linalg.solve(G[ok], rhs[ok][..., None])[..., 0]
    if singular.any() and policy == "pinv":
        bad = singular & np.isfinite(top)
        out[bad] = (np.linalg.pinv(G[bad], rcond=RANK_TOL) @ rhs[bad][..., None])[..., 0]
    return out, singular


def _sweep_gram(scale, onset, last, grid):
    """Unweighted Gram matrices at every grid time by a sweep over breakpoints.

    A subject's contribution ``Y x x'`` only changes when ``t`` passes one of
    its covariate onsets or its exit, so ``G(t)`` is a running sum of
    contribution differences over all breakpoints strictly before ``t``.
    """
    n, p = scale.shape
    bps = np.sort(np.concatenate([np.full((n, 1), -np.inf), onset, last[:, None]], axis=1), axis=1)
    x = scale[:, None, :] * (onset[:, None, :] <= bps[:, :, None])
    x *= (bps < last[:, None])[:, :, None]
    contrib = x[..., :, None] * x[..., None, :]
    delta = np.diff(contrib, axis=1, prepend=0.0).reshape(-1, p, p)
    b = bps.ravel()
    order = np.argsort(b, kind="stable")
    running = np.cumsum(delta[order], axis=0)
    pos = np.searchsorted(b[order], grid, side="left")
    G = np.zeros((len(grid), p, p))
    G[pos > 0] = running[pos[pos > 0] - 1]
    return G


def fit_additive(history: EventHistory, outcome_kind: str, design_spec, weights=None, singular="pinv") -> CumCoef:
    """Weighted Aalen estimator of the cumulative regression coefficients.

    At every distinct ``outcome_kind`` event time ``s`` the increment solves
    ``(X' W X) dB = X' W dN`` where ``X`` holds left-limit covariates and
    ``W = diag(Y_i(s) R_i(s-))``.

    Parameters
    ----------
    history : EventHistory
    outcome_kind : {"D", "A", "L", "C"}
        Process whose hazard is regressed.
    design_spec : DesignSpec or sequence of str
    weights : WeightSet, optional
        Evaluated as left limits at the event times; unit weights if None.
    singular : {"pinv", "skip"}
        Treatment of rank-deficient Gram matrices: minimum-norm solution, or a
        zero increment.  Either way the time is listed in ``skipped_times``.

    Returns
    -------
    CumCoef
    """
    history = check_history(history)
    spec = check_design(design_spec, history)
    if singular not in ("pinv", "skip"):
        raise ValueError(f"singular must be 'pinv' or 'skip', got {singular!r}")
    grid = history.event_grid(outcome_kind)
    p = spec.p
    increments = np.zeros((len(grid), p))
    skipped = np.zeros(len(grid), dtype=bool)
    if len(grid) == 0:
        return CumCoef(grid, increments, spec.columns, grid, singular)

    last = np.minimum(history.exit_times, history.times(outcome_kind))
    event_t = history.times(outcome_kind)
    if weights is None and spec.columns == ("1",):
        # Nelson-Aalen by counting: events over the size of the risk set
        d = np.bincount(np.searchsorted(grid, event_t[np.isfinite(event_t)]), minlength=len(grid))
        r = len(last) - np.searchsorted(np.sort(last), grid, side="left")
        return CumCoef(grid, (d / r)[:, None], spec.columns, np.empty(0), singular)

    scale, onset = spec.components(history)
    if weights is None:
        G = _sweep_gram(scale, onset, last, grid)
        hit = np.isfinite(event_t) & (event_t <= grid[-1])
        pos = np.searchsorted(grid, event_t[hit])
        x = scale[hit] * (onset[hit] < event_t[hit, None])
        rhs = np.zeros((len(grid), p))
        np.add.at(rhs, pos, x)
        increments, skipped = _solve_increments(G, rhs, singular)
        return CumCoef(grid, increments, spec.columns, grid[skipped], singular)
    chunk = max(1, _CHUNK_BUDGET // max(1, history.n * p))
    for lo in range(0, len(grid), chunk):
        ts = grid[lo : lo + chunk]
        W = (last[:, None] >= ts[None, :]).astype(float)
        if weights is not None:
            R = weights.evaluate(ts, left=True)
            if not np.all(np.isfinite(R[W > 0])):
                raise ValueError("non-finite weight inside a risk set")
            W = W * R
        X = scale[:, None, :] * (onset[:, None, :] < ts[None, :, None])
        WX = W[:, :, None] * X
        G = np.einsum("icp,icq->cpq", WX, X, optimize=True)
        dN = event_t[:, None] == ts[None, :]
        rhs = np.einsum("icp,ic->cp", WX, dN, optimize=True)
        inc, sing = _solve_increments(G, rhs, singular)
        increments[lo : lo + chunk] = inc
        skipped[lo : lo + chunk] = sing
    return CumCoef(grid, increments, spec.columns, grid[skipped], singular)


def nelson_aalen(history: EventHistory, kind: str, weights=None) -> CumCoef:
    """(Weighted) Nelson-Aalen estimator: the intercept-only additive fit."""
    return fit_additive(history, kind, DesignSpec(["1"]), weights)


class AalenAdditiveRegression(BaseEstimator):
    """Estimator wrapper around :func:`fit_additive`.

    Parameters
    ----------
    design : sequence of str
        Design columns, e.g. ``("1", "A")``.
    outcome : str
        Event kind whose hazard is modelled.
    singular : {"pinv", "skip"}
    """

    def __init__(self, design=("1", "A"), outcome="D", singular="pinv"):
        self.design = design
        self.outcome = outcome
        self.singular = singular

    def fit(self, history, y=None, weights=None):
        self.cumcoef_ = fit_additive(history, self.outcome, DesignSpec(self.design), weights, self.singular)
        self.columns_ = self.cumcoef_.columns
        return self

    def predict(self, times):
        """Cumulative coefficients at ``times``, shape ``(m, p)``."""
        check_is_fitted(self, "cumcoef_")
        return self.cumcoef_.path()(np.atleast_1d(np.asarray(times, dtype=float)))
