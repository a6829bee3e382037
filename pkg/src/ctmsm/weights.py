"""Likelihood-ratio weight processes.

The estimated weights solve the pure-jump equation
``R_t = R_0 + int_0^t R_{s-} dK_s`` where ``K`` collects the estimated
intensity-ratio jump at the subject's own treatment time and the difference
between the factual and hypothetical compensators, both taken from
additive hazard fits of the treatment (or censoring) process.
"""

from __future__ import annotations

import copy
import csv
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .aalen import CumCoef, fit_additive
from .core import DesignSpec, EventHistory, StepPath, fmt
from .validation import check_design, check_history, check_positive, check_same_subjects

PROVENANCES = ("estimated-treatment", "estimated-censoring", "baseline", "theoretical", "iptw", "combined")
# denominators at or below this magnitude count as empty windows
ZERO_WINDOW = 1e-12


class WeightSet:
    """Per-subject weight paths.

    Subclasses implement :meth:`_raw`; :meth:`evaluate` applies the
    truncation bound.  ``flags`` maps subject ids to lists of diagnostic tags.
    """

    def __init__(self, subject_ids, provenance, truncation_bound=None, flags=None):
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        self.subject_ids = np.asarray(subject_ids, dtype=np.int64)
        self.provenance = provenance
        self.truncation_bound = None if truncation_bound is None else check_positive("truncation bound", truncation_bound, allow_inf=True)
        self.flags = dict(flags or {})

    @property
    def n(self):
        return len(self.subject_ids)

    def _raw(self, times, left):
        raise NotImplementedError

    def evaluate(self, times, left=False) -> np.ndarray:
        """Weights at ``times`` (right-continuous, or left limits), shape ``(n, m)``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        v = self._raw(times, left)
        if self.truncation_bound is not None:
            v = np.minimum(v, self.truncation_bound)
        return v

    def export_grid(self) -> np.ndarray:
        raise NotImplementedError

    def truncated(self, bound):
        out = self._copy()
        out.truncation_bound = None if bound is None else check_positive("truncation bound", bound, allow_inf=True)
        return out

    def _copy(self):
        return copy.copy(self)

    def mean_curve(self, grid) -> np.ndarray:
        return self.evaluate(grid).mean(axis=0)

    def truncation_count(self) -> int:
        """Number of subjects whose untruncated path exceeds the bound."""
        if self.truncation_bound is None:
            return 0
        grid = np.concatenate([[0.0], self.export_grid()])
        return int((self._raw(grid, False) > self.truncation_bound).any(axis=1).sum())

    def path(self, subject) -> StepPath:
        i = int(np.searchsorted(self.subject_ids, subject))
        if i >= self.n or self.subject_ids[i] != subject:
            raise KeyError(f"unknown subject {subject!r}")
        grid = self.export_grid()
        return StepPath(grid, self.evaluate(grid)[i], self.evaluate([0.0], left=True)[i, 0])

    def diagnostics(self, grid) -> dict:
        return {
            "provenance": self.provenance,
            "flagged_subjects": {str(k): v for k, v in sorted(self.flags.items())},
            "n_flagged": len(self.flags),
            "truncation_bound": self.truncation_bound,
            "truncation_count": self.truncation_count(),
            "mean_weight_curve": {"time": [float(t) for t in grid], "mean": [float(v) for v in self.mean_curve(grid)]},
        }

    def to_csv(self, path):
        """Write ``id,time,value`` rows: the value at 0 and every change after."""
        grid = np.concatenate([[0.0], self.export_grid()])
        grid = np.unique(grid)
        vals = self.evaluate(grid)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "time", "value"])
            for s, row in zip(self.subject_ids, vals):
                keep = np.concatenate([[True], row[1:] != row[:-1]])
                for t, v in zip(grid[keep], row[keep]):
                    w.writerow([int(s), fmt(t), fmt(v)])


class StepWeightSet(WeightSet):
    """Weights that are piecewise constant on a shared jump grid.

    ``values[i, k]`` holds for subject ``i`` on ``[jump_times[k], jump_times[k+1])``.
    """

    def __init__(self, subject_ids, jump_times, values, initial, provenance, truncation_bound=None, flags=None):
        super().__init__(subject_ids, provenance, truncation_bound, flags)
        self.jump_times = np.asarray(jump_times, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(self.n, len(self.jump_times))
        self.initial = np.broadcast_to(np.asarray(initial, dtype=float), (self.n,)).copy()
        if np.any(np.diff(self.jump_times) <= 0):
            raise ValueError("jump_times must be strictly increasing")
        if np.any(self.initial <= 0):
            raise ValueError("initial weights must be positive")
        if np.any(self.values < 0):
            raise ValueError("weights must be nonnegative")

    def _raw(self, times, left):
        idx = np.searchsorted(self.jump_times, times, side="left" if left else "right")
        table = np.concatenate([self.initial[:, None], self.values], axis=1)
        return table[:, idx]

    def export_grid(self):
        return self.jump_times


class ExactWeightSet(WeightSet):
    """Weights given by a closed-form evaluator ``func(times, left) -> (n, m)``."""

    def __init__(self, subject_ids, func, grid, provenance, truncation_bound=None, flags=None):
        super().__init__(subject_ids, provenance, truncation_bound, flags)
        self.func = func
        self.grid = np.asarray(grid, dtype=float)

    def _raw(self, times, left):
        return self.func(times, left)

    def export_grid(self):
        return self.grid


def unit_weights(history: EventHistory) -> StepWeightSet:
    return StepWeightSet(history.ids, [], np.empty((history.n, 0)), 1.0, "baseline")


def _aligned_increments(fit: CumCoef, grid: np.ndarray) -> np.ndarray:
    out = np.zeros((len(grid), fit.p))
    pos = np.searchsorted(grid, fit.times)
    out[pos] = fit.increments
    return out


def _compensator(history, process, spec, fit, grid):
    """``Y_i(s) Z_i(s-)' dH(s)`` for every subject and grid time, shape ``(n, m)``."""
    if fit.p != spec.p:
        raise ValueError(f"fit has {fit.p} columns but design {spec} has {spec.p}")
    dH = _aligned_increments(fit, grid)
    scale, onset = spec.components(history)
    Y = history.at_risk_matrix(process, grid)
    out = np.zeros((history.n, len(grid)))
    for j in range(spec.p):
        out += scale[:, j, None] * (onset[:, j, None] < grid[None, :]) * dH[None, :, j]
    return out * Y


class ThetaPath:
    """Windowed estimate of the hypothetical-to-factual intensity ratio.

    For ``t >= 1/kappa`` the value is the ratio of the two compensator sums
    over the window ``(t - 1/kappa, t]``; before that it equals ``theta0``.
    Windows with an empty denominator fall back to the last finite value,
    and the subject is flagged.
    """

    def __init__(self, subject_ids, times, num, den, kappa, theta0, policy, flags):
        self.subject_ids = subject_ids
        self.times = times
        self.kappa = kappa
        self.theta0 = theta0
        self.policy = policy
        self.flags = flags
        self._den = den
        self._cnum = np.concatenate([np.zeros((len(num), 1)), np.cumsum(num, axis=1)], axis=1)
        self._cden = np.concatenate([np.zeros((len(den), 1)), np.cumsum(den, axis=1)], axis=1)

    @property
    def window(self):
        return 1.0 / self.kappa

    def _ratio(self, rows, t, left):
        side = "left" if left else "right"
        hi = np.searchsorted(self.times, t, side=side)
        lo = np.searchsorted(self.times, t - self.window, side=side)
        num = self._cnum[rows, hi] - self._cnum[rows, lo]
        den = self._cden[rows, hi] - self._cden[rows, lo]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = num / den
        ratio[np.abs(den) <= ZERO_WINDOW] = np.nan
        return ratio

    def at(self, rows, t, left=False) -> np.ndarray:
        """Values for paired ``(rows[k], t[k])``."""
        rows = np.asarray(rows, dtype=np.intp)
        t = np.asarray(t, dtype=float)
        early = t <= self.window if left else t < self.window
        out = np.where(early, self.theta0[rows], np.nan)
        late = ~early
        if late.any():
            out[late] = self._ratio(rows[late], t[late], left)
        for k in np.flatnonzero(~np.isfinite(out)):
            out[k] = self._carry_forward(rows[k], t[k])
            self.flags.setdefault(int(self.subject_ids[rows[k]]), []).append("theta_carried_forward")
        return out

    def _carry_forward(self, i, t):
        # last jump that fed the denominator; its window ends at tau + 1/kappa
        before = np.flatnonzero((self.times < t) & (np.abs(self._den[i]) > ZERO_WINDOW))
        if len(before):
            u = min(self.times[before[-1]] + self.window, t)
            if u > self.window:
                val = self._ratio(np.array([i]), np.array([u]), True)[0]
                if np.isfinite(val):
                    return val
        return self.theta0[i]

    def evaluate(self, times, left=False) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        rows, cols = np.meshgrid(np.arange(len(self.subject_ids)), np.arange(len(times)), indexing="ij")
        return self.at(rows.ravel(), times[cols.ravel()], left).reshape(rows.shape)


def _prepare(history, factual_fit, hypo_fit, factual_spec, hypo_spec, process):
    history = check_history(history)
    fspec = check_design(factual_spec, history)
    hspec = check_design(hypo_spec, history)
    grid = np.union1d(factual_fit.times, hypo_fit.times)
    if process == "A":
        own = history.times("A")
        grid = np.union1d(grid, own[np.isfinite(own)])
    num = _compensator(history, process, hspec, hypo_fit, grid)
    den = _compensator(history, process, fspec, factual_fit, grid)
    return history, grid, num, den


def estimate_theta(history, factual_fit, hypo_fit, factual_spec, hypo_spec, kappa, theta0="window") -> ThetaPath:
    """Windowed intensity-ratio estimator for every subject.

    Parameters
    ----------
    kappa : float
        Bandwidth; the window length is ``1 / kappa``.
    theta0 : "window" or float
        Value used on ``[0, 1/kappa)``.  ``"window"`` takes the ratio over the
        first full window ``(0, 1/kappa]``; a number is used as is.
    """
    kappa = check_positive("kappa", kappa)
    history, grid, num, den = _prepare(history, factual_fit, hypo_fit, factual_spec, hypo_spec, "A")
    return _theta_from(history, grid, num, den, kappa, theta0)


def _theta_from(history, grid, num, den, kappa, theta0):
    flags: dict[int, list[str]] = {}
    n = history.n
    if isinstance(theta0, str):
        if theta0 != "window":
            raise ValueError(f"unknown theta0 policy {theta0!r}")
        k = np.searchsorted(grid, 1.0 / kappa, side="right")
        s_num, s_den = num[:, :k].sum(axis=1), den[:, :k].sum(axis=1)
        empty = np.abs(s_den) <= ZERO_WINDOW
        with np.errstate(divide="ignore", invalid="ignore"):
            th0 = np.where(empty, 1.0, s_num / s_den)
        for i in np.flatnonzero(empty):
            flags.setdefault(int(history.ids[i]), []).append("theta0_fallback")
        policy = "window"
    else:
        th0 = np.full(n, float(theta0))
        policy = "constant"
    return ThetaPath(history.ids, grid, num, den, kappa, th0, policy, flags)


def _product_integral(ids, grid, dK, R0, provenance, truncation, flags):
    factor = 1.0 + dK
    bad = factor <= 0
    if bad.any():
        for i in np.flatnonzero(bad.any(axis=1)):
            flags.setdefault(int(ids[i]), []).append("nonpositive_factor")
        factor = np.where(bad, 0.0, factor)
    R = R0[:, None] * np.cumprod(factor, axis=1)
    return StepWeightSet(ids, grid, R, R0, provenance, truncation, flags)


def _initial(R0, n):
    if R0 is None:
        return np.ones(n)
    R0 = np.broadcast_to(np.asarray(R0, dtype=float), (n,)).copy()
    if np.any(~np.isfinite(R0)) or np.any(R0 <= 0):
        raise ValueError("initial weights must be positive and finite")
    return R0


def estimate_weights(
    history,
    factual_fit: CumCoef,
    hypo_fit: CumCoef,
    factual_spec,
    hypo_spec,
    kappa: float,
    R0=None,
    truncation=None,
    theta0="window",
) -> StepWeightSet:
    """Continuous-time treatment weights from two additive hazard fits.

    ``factual_fit`` models treatment initiation given the full covariate
    history (design ``factual_spec``); ``hypo_fit`` models it under the
    hypothetical regime (design ``hypo_spec``, typically intercept only).

    Returns
    -------
    StepWeightSet
        Jumps occur only at the fits' jump times and at treatment times.
        Subjects are flagged when their intensity-ratio window is empty or a
        multiplicative factor ``1 + dK`` is not positive (the weight is then
        floored at 0).
    """
    kappa = check_positive("kappa", kappa)
    history, grid, num, den = _prepare(history, factual_fit, hypo_fit, factual_spec, hypo_spec, "A")
    theta = _theta_from(history, grid, num, den, kappa, theta0)
    dK = den - num
    t_a = history.times("A")
    treated = np.flatnonzero(np.isfinite(t_a))
    if len(treated):
        th = theta.at(treated, t_a[treated], left=True)
        dK[treated, np.searchsorted(grid, t_a[treated])] += th - 1.0
    R0 = _initial(R0, history.n)
    return _product_integral(history.ids, grid, dK, R0, "estimated-treatment", truncation, theta.flags)


def censoring_weights(history, factual_fit, hypo_fit, factual_spec, hypo_spec, truncation=None) -> StepWeightSet:
    """Weights that re-weight to a regime with the hypothetical censoring hazard.

    Only the compensator difference enters, since the weights are applied
    strictly before censoring.
    """
    history, grid, num, den = _prepare(history, factual_fit, hypo_fit, factual_spec, hypo_spec, "C")
    return _product_integral(history.ids, grid, den - num, np.ones(history.n), "estimated-censoring", truncation, {})


def baseline_weight(numerator_density, denominator_density, baseline_data=None) -> np.ndarray:
    """Propensity-type ratio of hypothetical to observed baseline densities.

    Each density is either an array of per-subject values or a callable
    applied to ``baseline_data``.
    """
    num = numerator_density(baseline_data) if callable(numerator_density) else numerator_density
    den = denominator_density(baseline_data) if callable(denominator_density) else denominator_density
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    num, den = np.broadcast_arrays(num, den)
    if np.any(den <= 0):
        raise ValueError("positivity violation: observed baseline density is zero for some subjects")
    if np.any(num < 0) or not np.all(np.isfinite(num)):
        raise ValueError("numerator density must be finite and nonnegative")
    return num / den


class AdditiveIntensity:
    """Known additive intensity ``Y_t Z_{t-}' h_t`` used for exact weights.

    Parameters
    ----------
    design : DesignSpec or sequence of str
    rates : sequence of float or callable
        Coefficient functions ``h_j(t)``; numbers mean constants.
    cumulatives : sequence of callable, optional
        Integrals ``H_j(t)``; derived for constants, required otherwise.
    """

    def __init__(self, design, rates: Sequence, cumulatives: Sequence[Callable] | None = None):
        self.design = check_design(design)
        if len(rates) != self.design.p:
            raise ValueError(f"need {self.design.p} coefficient functions, got {len(rates)}")
        self.rates = [self._as_rate(r) for r in rates]
        if cumulatives is None:
            if not all(np.isscalar(r) for r in rates):
                raise ValueError("cumulatives are required for time-varying coefficients")
            cumulatives = [(lambda t, c=float(r): c * np.asarray(t, dtype=float)) for r in rates]
        self.cumulatives = list(cumulatives)

    @staticmethod
    def _as_rate(r):
        if np.isscalar(r):
            return lambda t, c=float(r): np.full(np.shape(t), c)
        return r

    def rate_at(self, history, t) -> np.ndarray:
        """Intensity of each subject at its own time ``t[i]`` (left-limit covariates)."""
        scale, onset = self.design.components(history)
        t = np.asarray(t, dtype=float)
        z = scale * (onset < t[:, None])
        h = np.column_stack([np.asarray(f(t), dtype=float) for f in self.rates])
        return (z * h).sum(axis=1)

    def integrated(self, history, process, times) -> np.ndarray:
        """``int_0^t Y_s Z_{s-}' dH_s`` for each subject and time, ``(n, m)``."""
        scale, onset = self.design.components(history)
        last = np.minimum(history.exit_times, history.times(process))
        upper = np.minimum(np.asarray(times, dtype=float)[None, :], last[:, None])
        out = np.zeros(upper.shape)
        for j, H in enumerate(self.cumulatives):
            # clip the onset to the upper limit so absent indicators add zero
            lo = np.minimum(np.maximum(onset[:, j], 0.0)[:, None], upper)
            out += scale[:, j, None] * (H(upper) - H(lo))
        return out


def theoretical_weights(history, true_lambda: AdditiveIntensity, true_lambda_tilde: AdditiveIntensity, process="A", R0=None, include_jump=None) -> ExactWeightSet:
    """Exact likelihood-ratio paths for known intensities.

    ``R_t = R_0 (lambda~/lambda)(T)^{1[T <= t]} exp(int_0^t lambda - lambda~ ds)``
    where ``T`` is the subject's ``process`` event time.  The jump factor is
    omitted for censoring, whose weights are only used before the event.
    """
    history = check_history(history)
    true_lambda.design.validate(history)
    true_lambda_tilde.design.validate(history)
    if include_jump is None:
        include_jump = process != "C"
    R0 = _initial(R0, history.n)
    t_ev = history.times(process)
    theta = np.ones(history.n)
    hit = np.isfinite(t_ev)
    if include_jump and hit.any():
        lam = true_lambda.rate_at(history, np.where(hit, t_ev, 0.0))
        lam_t = true_lambda_tilde.rate_at(history, np.where(hit, t_ev, 0.0))
        if np.any(lam[hit] <= 0):
            bad = history.ids[hit & (lam <= 0)]
            raise ValueError(f"positivity violation: zero intensity at the event time of subjects {bad[:5].tolist()}")
        theta[hit] = lam_t[hit] / lam[hit]

    def func(times, left):
        expo = true_lambda.integrated(history, process, times) - true_lambda_tilde.integrated(history, process, times)
        out = R0[:, None] * np.exp(expo)
        if include_jump:
            seen = t_ev[:, None] < times[None, :] if left else t_ev[:, None] <= times[None, :]
            out = np.where(seen, out * theta[:, None], out)
        return out

    grid = np.unique(np.concatenate([t[np.isfinite(t)] for t in history.event_times.values()]))
    return ExactWeightSet(history.ids, func, grid, "theoretical")


def combine_weights(parts: Sequence[WeightSet], truncation=None) -> WeightSet:
    """Pointwise product of weight sets; ``truncation`` is applied last."""
    if not parts:
        raise ValueError("nothing to combine")
    ids = check_same_subjects(*parts)
    flags: dict[int, list[str]] = {}
    for p in parts:
        for k, v in p.flags.items():
            flags.setdefault(k, []).extend(v)
    if all(isinstance(p, StepWeightSet) for p in parts):
        grid = np.unique(np.concatenate([p.jump_times for p in parts]))
        values = np.prod([p.evaluate(grid) for p in parts], axis=0) if len(grid) else np.empty((len(ids), 0))
        initial = np.prod([p.evaluate([0.0], left=True)[:, 0] for p in parts], axis=0)
        return StepWeightSet(ids, grid, values, initial, "combined", truncation, flags)

    def func(times, left):
        return np.prod([p.evaluate(times, left) for p in parts], axis=0)

    grid = np.unique(np.concatenate([p.export_grid() for p in parts]))
    return ExactWeightSet(ids, func, grid, "combined", truncation, flags)


def default_bandwidth(history: EventHistory, anchor_n=None, quantile=0.1, process="A") -> float:
    """``kappa = c n^{1/3}`` with ``1/kappa`` equal to the treatment-time quantile at ``anchor_n``.

    With ``anchor_n`` left at None the anchor is the sample itself, so the
    window is exactly the ``quantile`` of the observed times to treatment.
    """
    t = history.times(process)
    t = t[np.isfinite(t)]
    if len(t) == 0:
        raise ValueError(f"no {process} events to calibrate a bandwidth")
    q = float(np.quantile(t, quantile))
    if q <= 0:
        raise ValueError("treatment-time quantile is zero; pass an explicit bandwidth")
    anchor = history.n if anchor_n is None else anchor_n
    return (history.n / anchor) ** (1.0 / 3.0) / q


def read_weights_csv(path, provenance="combined") -> StepWeightSet:
    """Inverse of :meth:`WeightSet.to_csv`: one step path per subject on the union grid."""
    import pandas as pd

    df = pd.read_csv(path, float_precision="round_trip")
    missing = {"id", "time", "value"} - set(df.columns)
    if missing:
        raise ValueError(f"weight file lacks columns {sorted(missing)}")
    df = df.sort_values(["id", "time"], kind="stable")
    ids = np.unique(df["id"].to_numpy(dtype=np.int64))
    grid = np.unique(df["time"].to_numpy(dtype=float))
    table = np.full((len(ids), len(grid)), np.nan)
    table[np.searchsorted(ids, df["id"].to_numpy()), np.searchsorted(grid, df["time"].to_numpy())] = df["value"].to_numpy(dtype=float)
    # carry each subject's last written value forward
    table = pd.DataFrame(table.T).ffill().to_numpy().T
    if np.isnan(table[:, 0]).any():
        raise ValueError("every subject needs a weight at the first time in the file")
    if grid[0] == 0.0:
        return StepWeightSet(ids, grid[1:], table[:, 1:], table[:, 0], provenance)
    return StepWeightSet(ids, grid, table, np.ones(len(ids)), provenance)


class ContinuousTimeWeights(BaseEstimator):
    """Fit the factual and hypothetical treatment models, then build weights.

    Parameters
    ----------
    factual_design : sequence of str
        Treatment-hazard covariates under observation, e.g. ``("1", "L")``.
    hypothetical_design : sequence of str
        Covariates of the hypothetical regime; ``("1",)`` is the marginal
        (Nelson-Aalen) treatment hazard.
    bandwidth : float, optional
        ``kappa``; chosen by :func:`default_bandwidth` if None.
    theta0 : "window" or float
    truncation : float, optional
    """

    def __init__(self, factual_design=("1", "L"), hypothetical_design=("1",), bandwidth=None, theta0="window", truncation=None):
        self.factual_design = factual_design
        self.hypothetical_design = hypothetical_design
        self.bandwidth = bandwidth
        self.theta0 = theta0
        self.truncation = truncation

    def fit(self, history, y=None):
        self.factual_fit_ = fit_additive(history, "A", DesignSpec(self.factual_design))
        self.hypothetical_fit_ = fit_additive(history, "A", DesignSpec(self.hypothetical_design))
        self.bandwidth_ = default_bandwidth(history) if self.bandwidth is None else check_positive("bandwidth", self.bandwidth)
        return self

    def transform(self, history, R0=None):
        check_is_fitted(self, "factual_fit_")
        return estimate_weights(
            history,
            self.factual_fit_,
            self.hypothetical_fit_,
            DesignSpec(self.factual_design),
            DesignSpec(self.hypothetical_design),
            self.bandwidth_,
            R0=R0,
            truncation=self.truncation,
            theta0=self.theta0,
        )

    def fit_transform(self, history, y=None, R0=None):
        return self.fit(history).transform(history, R0=R0)


class CensoringWeights(BaseEstimator):
    """Censoring weights from factual and hypothetical censoring-hazard fits."""

    def __init__(self, factual_design=("1", "L"), hypothetical_design=("1",), truncation=None):
        self.factual_design = factual_design
        self.hypothetical_design = hypothetical_design
        self.truncation = truncation

    def fit(self, history, y=None):
        self.factual_fit_ = fit_additive(history, "C", DesignSpec(self.factual_design))
        self.hypothetical_fit_ = fit_additive(history, "C", DesignSpec(self.hypothetical_design))
        return self

    def transform(self, history):
        check_is_fitted(self, "factual_fit_")
        return censoring_weights(
            history,
            self.factual_fit_,
            self.hypothetical_fit_,
            DesignSpec(self.factual_design),
            DesignSpec(self.hypothetical_design),
            self.truncation,
        )

    def fit_transform(self, history, y=None):
        return self.fit(history).transform(history)
