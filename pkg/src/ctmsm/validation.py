"""Input validation helpers shared by the estimators."""

import warnings

import numpy as np

from .core import DesignSpec, EventHistory


def check_history(history) -> EventHistory:
    if not isinstance(history, EventHistory):
        raise TypeError(f"expected an EventHistory, got {type(history).__name__}")
    if history.n == 0:
        raise ValueError("history has no subjects")
    return history


def check_design(spec, history=None) -> DesignSpec:
    if not isinstance(spec, DesignSpec):
        spec = DesignSpec(spec)
    if history is not None:
        spec.validate(history)
    return spec


def check_positive(name, value, allow_inf=False):
    value = float(value)
    if not value > 0 or (not allow_inf and not np.isfinite(value)):
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_same_subjects(*parts):
    ids = parts[0].subject_ids
    for p in parts[1:]:
        if len(p.subject_ids) != len(ids) or np.any(p.subject_ids != ids):
            raise ValueError("weight sets cover different subjects")
    return ids


def check_bandwidth_sequence(ns, kappas, tol=1e-9):
    """Warn unless ``kappa_n`` increases with ``sup kappa_n / sqrt(n)`` bounded.

    On a finite grid the growth rate is read from the log-log slope between
    consecutive sample sizes; any slope above one half is flagged.
    Returns True when the sequence passes.
    """
    ns = np.asarray(ns, dtype=float)
    kappas = np.asarray(kappas, dtype=float)
    order = np.argsort(ns)
    ns, kappas = ns[order], kappas[order]
    ok = True
    if np.any(np.diff(kappas) < 0):
        warnings.warn("bandwidth sequence is not increasing in n", RuntimeWarning, stacklevel=2)
        ok = False
    if len(ns) > 1:
        slopes = np.diff(np.log(kappas)) / np.diff(np.log(ns))
        if np.any(slopes > 0.5 + tol):
            warnings.warn(
                "bandwidth grows faster than sqrt(n); kappa_n / sqrt(n) is not bounded",
                RuntimeWarning,
                stacklevel=2,
            )
            ok = False
    return ok
