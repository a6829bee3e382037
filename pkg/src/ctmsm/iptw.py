"""Discrete-time stabilized IPTW from pooled logistic regressions.

Follow-up ``[0, T]`` is cut into ``K`` equal intervals ``((k-1)T/K, kT/K]``.
A subject contributes a person-period row for every interval it enters
untreated, alive and uncensored; covariates are read at the interval start.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import EventHistory
from .validation import check_history
from .weights import StepWeightSet

GRAD_TOL = 1e-8
MAX_ITER = 50
# fitted probabilities within ~3e-7 of 0 or 1 signal separation
SEPARATION_ETA = 15.0


def discretize(history: EventHistory, K: int, horizon: float | None = None, covariates=("L",)) -> pd.DataFrame:
    """Person-period table with interval dummies and a treatment indicator.

    Columns are ``id``, ``k`` (1-based), ``start``, ``stop``, ``treated``,
    ``at_risk`` and one column per covariate, plus ``interval_k`` dummies.
    """
    history = check_history(history)
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    K = int(K)
    T = history.horizon if horizon is None else float(horizon)
    edges = np.linspace(0.0, T, K + 1)
    starts = edges[:-1]
    t_a = history.times("A")
    # rows exist while untreated, alive and uncensored at the interval start
    alive = (np.minimum(t_a, history.exit_times)[:, None] > starts[None, :]) | (starts[None, :] == 0.0)
    alive &= ~((t_a[:, None] <= starts[None, :]) & (starts[None, :] > 0))
    i_idx, k_idx = np.nonzero(alive)
    treated = (t_a[i_idx] > edges[k_idx]) & (t_a[i_idx] <= edges[k_idx + 1])
    # a subject treated at exactly 0 lands in interval 1
    treated |= (k_idx == 0) & (t_a[i_idx] == 0.0)
    out = {
        "id": history.ids[i_idx],
        "k": k_idx + 1,
        "start": edges[k_idx],
        "stop": edges[k_idx + 1],
        "treated": treated.astype(int),
        "at_risk": np.ones(len(i_idx), dtype=int),
    }
    for c in covariates:
        if c in ("A", "L"):
            out[c] = (history.times(c)[i_idx] < edges[k_idx]).astype(float)
        else:
            out[c] = history.baseline_column(c)[i_idx]
    for k in range(1, K + 1):
        out[f"interval_{k}"] = (k_idx + 1 == k).astype(float)
    table = pd.DataFrame(out)
    table.attrs["K"] = K
    table.attrs["horizon"] = T
    return table


@dataclass
class LogisticFit:
    coef: np.ndarray
    columns: tuple[str, ...]
    converged: bool
    n_iter: int
    loglik: float
    dropped: tuple[str, ...] = ()
    separated: bool = False
    grad_norm: float = field(default=np.nan)

    def linear_predictor(self, table: pd.DataFrame) -> np.ndarray:
        if not self.columns:
            return np.zeros(len(table))
        X = np.column_stack([np.ones(len(table)) if c == "intercept" and c not in table else table[c].to_numpy(dtype=float) for c in self.columns])
        return X @ self.coef

    def predict_proba(self, table: pd.DataFrame) -> np.ndarray:
        return _expit(self.linear_predictor(table))


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _loglik(eta, y):
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def irls(X: np.ndarray, y: np.ndarray, max_iter=MAX_ITER, tol=GRAD_TOL):
    """Newton / IRLS for logistic regression.

    Stops when the gradient sup-norm drops to ``tol``.  Returns
    ``(beta, converged, n_iter, grad_norm)``.
    """
    beta = np.zeros(X.shape[1])
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = _expit(eta)
        grad = X.T @ (y - mu)
        grad_norm = float(np.max(np.abs(grad))) if len(grad) else 0.0
        if grad_norm <= tol:
            return beta, True, it - 1, grad_norm
        w = mu * (1.0 - mu)
        H = X.T @ (X * w[:, None])
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        beta = beta + step
    eta = X @ beta
    grad_norm = float(np.max(np.abs(X.T @ (y - _expit(eta))))) if X.shape[1] else 0.0
    return beta, grad_norm <= tol, max_iter, grad_norm


def fit_pooled_logistic(table: pd.DataFrame, covariate_columns=(), outcome="treated", time_dummies=True) -> LogisticFit:
    """Pooled logistic regression of ``outcome`` on intercept, intervals and covariates.

    Interval dummies (the first interval is the reference) are dropped when
    their interval has no rows or no events; all-zero covariate columns are
    dropped too, which pins their coefficients at zero.
    """
    y = table[outcome].to_numpy(dtype=float)
    cols = ["intercept"]
    data = {"intercept": np.ones(len(table))}
    dropped = []
    if time_dummies:
        K = table.attrs.get("K") or int(table["k"].max())
        for k in range(2, K + 1):
            name = f"interval_{k}"
            d = table[name].to_numpy(dtype=float) if name in table else np.zeros(len(table))
            if d.sum() == 0 or (d * y).sum() == 0:
                dropped.append(name)
                continue
            cols.append(name)
            data[name] = d
    for c in covariate_columns:
        v = table[c].to_numpy(dtype=float)
        if not np.any(v):
            dropped.append(c)
            continue
        cols.append(c)
        data[c] = v
    X = np.column_stack([data[c] for c in cols]) if len(table) else np.zeros((0, len(cols)))
    beta, converged, n_iter, gnorm = irls(X, y)
    eta = X @ beta
    separated = bool(np.any(np.abs(eta) > SEPARATION_ETA)) or not converged
    fit = LogisticFit(beta, tuple(cols), converged, n_iter, _loglik(eta, y), tuple(dropped), separated, gnorm)
    return fit


def _with_intercept(table):
    if "intercept" not in table:
        table = table.assign(intercept=1.0)
    return table


def stabilized_iptw(numerator_fit: LogisticFit, denominator_fit: LogisticFit, table: pd.DataFrame, history: EventHistory | None = None) -> StepWeightSet:
    """Cumulative product of numerator over denominator treatment probabilities.

    The weight of interval ``k`` holds on ``[(k-1)T/K, kT/K)`` and stays at
    its last value once the subject stops contributing rows.
    """
    t = _with_intercept(table)
    for c in (*numerator_fit.columns, *denominator_fit.columns):
        if c not in t:
            t = t.assign(**{c: 0.0})
    p_num = numerator_fit.predict_proba(t)
    p_den = denominator_fit.predict_proba(t)
    a = t["treated"].to_numpy(dtype=float)
    if np.any((p_den <= 0) | (p_den >= 1)):
        raise ValueError("positivity violation: denominator probability is 0 or 1")
    ratio = np.where(a == 1, p_num / p_den, (1 - p_num) / (1 - p_den))
    K = int(table.attrs.get("K") or table["k"].max())
    T = float(table.attrs.get("horizon") or table["stop"].max())
    ids = np.unique(table["id"].to_numpy()) if history is None else history.ids
    pos = np.searchsorted(ids, t["id"].to_numpy())
    log_factor = np.zeros((len(ids), K))
    np.add.at(log_factor, (pos, t["k"].to_numpy() - 1), np.log(ratio))
    values = np.exp(np.cumsum(log_factor, axis=1))
    # exact ratios when factors are identical (log/exp would round)
    same = np.zeros((len(ids), K), dtype=bool)
    np.logical_or.at(same, (pos, t["k"].to_numpy() - 1), ratio != 1.0)
    values[~same.cumsum(axis=1).astype(bool)] = 1.0
    jump_times = np.linspace(0.0, T, K + 1)[1:-1]
    return StepWeightSet(ids, jump_times, values[:, 1:], values[:, 0], "iptw")


class StabilizedIPTW(BaseEstimator):
    """Discrete-time stabilized IPTW as an estimator.

    Parameters
    ----------
    n_intervals : int
        Number of equal-length intervals ``K``.
    covariates : sequence of str
        Time-updated covariates of the denominator model.
    """

    def __init__(self, n_intervals=8, covariates=("L",)):
        self.n_intervals = n_intervals
        self.covariates = covariates

    def fit(self, history, y=None):
        self.table_ = discretize(history, self.n_intervals, covariates=self.covariates)
        self.numerator_ = fit_pooled_logistic(self.table_, ())
        self.denominator_ = fit_pooled_logistic(self.table_, self.covariates)
        return self

    def transform(self, history):
        check_is_fitted(self, "table_")
        table = discretize(history, self.n_intervals, covariates=self.covariates)
        return stabilized_iptw(self.numerator_, self.denominator_, table, history)

    def fit_transform(self, history, y=None):
        self.fit(history)
        return stabilized_iptw(self.numerator_, self.denominator_, self.table_, history)
