"""Event-history generators for the confounded and baseline-covariate scenarios.

Random streams
--------------
Subject ``i`` (ids run ``1..n``) draws from its own Philox counter-based
generator keyed by ``(seed, i)``, i.e.
``numpy.random.Generator(numpy.random.Philox(key=[seed, i]))``.  Subsets of a
sample are therefore prefixes of larger samples with the same seed.

In the confounded scenario every sojourn draws four uniforms, one per clock
in the order D, A, L, C, whether or not the clock is active.  Clock ``k``
fires after ``-log(u_k) / rate_k``; the earliest clock wins.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .core import EventHistory, EventRecord, build_history
from .weights import AdditiveIntensity

CLOCKS = ("D", "A", "L", "C")


def subject_rng(seed: int, subject_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed), int(subject_id)]))


@dataclass(frozen=True)
class ConfoundedScenario:
    """Constant-hazard multistate model over (A, L) with absorbing D.

    The outcome, treatment, covariate and censoring hazards are
    ``D: a_D0 + a_DA A + a_DL L + a_DAL A L``, ``A: a_A0 + a_AL L``,
    ``L: a_L0 + a_LA A`` and ``C: a_C0 + a_CL L``, all with left-limit states.
    """

    alpha_D0: float = 0.1
    alpha_DA: float = 0.05
    alpha_DL: float = 0.1
    alpha_DAL: float = 0.0
    alpha_A0: float = 0.1
    alpha_AL: float = 0.3
    alpha_L0: float = 0.2
    alpha_LA: float = 0.05
    alpha_C0: float = 0.0
    alpha_CL: float = 0.0
    horizon: float = 10.0
    n: int = 1000

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k.startswith("alpha") and not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be a nonnegative number, got {v}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")

    def rates(self, a: int, l: int) -> np.ndarray:
        """Clock rates ``(D, A, L, C)`` in state ``(A, L)``."""
        return np.array(
            [
                self.alpha_D0 + self.alpha_DA * a + self.alpha_DL * l + self.alpha_DAL * a * l,
                0.0 if a else self.alpha_A0 + self.alpha_AL * l,
                0.0 if l else self.alpha_L0 + self.alpha_LA * a,
                self.alpha_C0 + self.alpha_CL * l,
            ]
        )

    def with_(self, **kw) -> "ConfoundedScenario":
        return ConfoundedScenario(**{**asdict(self), **kw})


@dataclass(frozen=True)
class BaselineScenario:
    """Treatment hazard ``alpha_0 + alpha_A x`` with ``x ~ Bernoulli(p)``."""

    alpha_0: float = 0.2
    alpha_A: float = 0.3
    p: float = 0.5
    horizon: float = 5.0
    n: int = 1000

    def __post_init__(self):
        if not self.alpha_0 > 0:
            raise ValueError("alpha_0 must be positive")
        if not self.alpha_A >= 0:
            raise ValueError("alpha_A must be nonnegative")
        if not 0 <= self.p <= 1:
            raise ValueError("p must be a probability")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def with_(self, **kw) -> "BaselineScenario":
        return BaselineScenario(**{**asdict(self), **kw})


def scenario_from_dict(raw: dict):
    raw = dict(raw)
    kind = raw.pop("type", "confounded")
    if kind == "confounded":
        return ConfoundedScenario(**raw)
    if kind == "baseline":
        return BaselineScenario(**raw)
    raise ValueError(f"unknown scenario type {kind!r}")


def scenario_to_dict(scn) -> dict:
    kind = "baseline" if isinstance(scn, BaselineScenario) else "confounded"
    return {"type": kind, **asdict(scn)}


def load_scenario(path):
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


class MarginalHazard:
    """Time-varying hazard tabulated on a fine grid.

    Calling the object gives the rate; :meth:`cumulative` and :meth:`inverse`
    interpolate its integral linearly between grid points.  Beyond the grid
    the last rate is extended.
    """

    def __init__(self, grid, rate, cumulative):
        self.grid = np.asarray(grid, dtype=float)
        self.rate = np.asarray(rate, dtype=float)
        self.cum = np.asarray(cumulative, dtype=float)

    @classmethod
    def constant(cls, value, horizon):
        grid = np.array([0.0, horizon])
        return cls(grid, [value, value], value * grid)

    def __call__(self, t):
        return np.interp(t, self.grid, self.rate)

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        inside = np.interp(t, self.grid, self.cum)
        return np.where(t > self.grid[-1], self.cum[-1] + self.rate[-1] * (t - self.grid[-1]), inside)

    def inverse(self, y):
        """Smallest ``t`` with ``cumulative(t) >= y``."""
        y = np.asarray(y, dtype=float)
        top = self.cum[-1]
        inside = np.interp(y, self.cum, self.grid)
        with np.errstate(divide="ignore"):
            beyond = self.grid[-1] + (y - top) / self.rate[-1] if self.rate[-1] > 0 else np.inf
        return np.where(y > top, beyond, inside)


def _occupancy_ratio(rate_L, exit0, exit1, horizon, points=10001):
    """``P(L=1 | still in the sub-chain)`` for a two-state L chain with exits."""
    grid = np.linspace(0.0, horizon, points)

    def rhs(t, p):
        return [-(rate_L + exit0) * p[0], rate_L * p[0] - exit1 * p[1]]

    sol = solve_ivp(rhs, (0.0, horizon), [1.0, 0.0], t_eval=grid, rtol=1e-11, atol=1e-13, method="DOP853")
    p0, p1 = sol.y
    return grid, p1 / (p0 + p1)


def _tabulate(grid, base, slope, ratio):
    rate = base + slope * ratio
    cum = np.concatenate([[0.0], np.cumsum(np.diff(grid) * (rate[1:] + rate[:-1]) / 2)])
    return MarginalHazard(grid, rate, cum)


def marginal_treatment_hazard(scn) -> MarginalHazard:
    """Treatment hazard with L integrated out among untreated, uncensored survivors."""
    if isinstance(scn, BaselineScenario):
        grid = np.linspace(0.0, scn.horizon, 10001)
        a0, aA, p = scn.alpha_0, scn.alpha_A, scn.p
        w = p * np.exp(-aA * grid)
        rate = a0 + aA * w / (w + 1 - p)
        cum = a0 * grid - np.log(w + 1 - p)
        return MarginalHazard(grid, rate, cum)
    s = scn
    exit0 = s.alpha_A0 + s.alpha_D0 + s.alpha_C0
    exit1 = s.alpha_A0 + s.alpha_AL + s.alpha_D0 + s.alpha_DL + s.alpha_C0 + s.alpha_CL
    grid, ratio = _occupancy_ratio(s.alpha_L0, exit0, exit1, s.horizon)
    return _tabulate(grid, s.alpha_A0, s.alpha_AL, ratio)


def marginal_censoring_hazard(scn: ConfoundedScenario) -> MarginalHazard:
    """Censoring hazard with L integrated out (untreated population only)."""
    if scn.alpha_A0 or scn.alpha_AL:
        raise ValueError("the marginal censoring hazard is only tabulated for scenarios without treatment")
    s = scn
    exit0 = s.alpha_D0 + s.alpha_C0
    exit1 = s.alpha_D0 + s.alpha_DL + s.alpha_C0 + s.alpha_CL
    grid, ratio = _occupancy_ratio(s.alpha_L0, exit0, exit1, s.horizon)
    return _tabulate(grid, s.alpha_C0, s.alpha_CL, ratio)


def marginal_outcome_hazard(scn: ConfoundedScenario) -> MarginalHazard:
    """Outcome hazard with L integrated out when nobody is treated or censored."""
    if scn.alpha_A0 or scn.alpha_AL:
        raise ValueError("only defined for scenarios without treatment")
    s = scn
    grid, ratio = _occupancy_ratio(s.alpha_L0, s.alpha_D0, s.alpha_D0 + s.alpha_DL, s.horizon)
    return _tabulate(grid, s.alpha_D0, s.alpha_DL, ratio)


def _run_chain(scn: ConfoundedScenario, seed, treatment=None, censoring=None) -> EventHistory:
    """Shared generator; ``treatment``/``censoring`` replace those clocks by a marginal hazard."""
    records = []
    T = scn.horizon
    for sid in range(1, int(scn.n) + 1):
        rng = subject_rng(seed, sid)
        t, a, l = 0.0, 0, 0
        while True:
            u = rng.random(4)
            e = -np.log1p(-u)
            rates = scn.rates(a, l)
            with np.errstate(divide="ignore"):
                wait = np.where(rates > 0, e / np.where(rates > 0, rates, 1.0), np.inf)
            fire = t + wait
            if treatment is not None:
                fire[1] = float(treatment.inverse(treatment.cumulative(t) + e[1])) if not a else np.inf
            if censoring is not None:
                fire[3] = float(censoring.inverse(censoring.cumulative(t) + e[3]))
            k = int(np.argmin(fire))
            t = float(fire[k])
            if not t <= T:
                break
            kind = CLOCKS[k]
            records.append(EventRecord(sid, t, kind))
            if kind == "A":
                a = 1
            elif kind == "L":
                l = 1
            else:
                break
    return build_history(records, {sid: () for sid in range(1, int(scn.n) + 1)}, T, names=())


def simulate_confounded(scn: ConfoundedScenario, seed: int) -> EventHistory:
    """Observational data under the constant-hazard multistate model."""
    return _run_chain(scn, seed)


def simulate_hypothetical(scn: ConfoundedScenario, marginal_hazard, seed: int, censoring=None) -> EventHistory:
    """Data from the regime where treatment starts at the marginal hazard.

    All other clocks keep their observational form.  ``censoring``
    optionally swaps the censoring clock for a marginal hazard too.
    """
    if marginal_hazard is not None and not isinstance(marginal_hazard, MarginalHazard):
        marginal_hazard = _tabulate_callable(marginal_hazard, scn.horizon)
    return _run_chain(scn, seed, treatment=marginal_hazard, censoring=censoring)


def simulate_randomized_censoring(scn: ConfoundedScenario, seed: int) -> EventHistory:
    """Data where censoring follows its marginal hazard instead of depending on L."""
    return _run_chain(scn, seed, censoring=marginal_censoring_hazard(scn))


def _tabulate_callable(fn, horizon, points=10001):
    grid = np.linspace(0.0, horizon, points)
    rate = np.asarray([fn(t) for t in grid], dtype=float)
    if np.any(rate < 0):
        raise ValueError("hazard must be nonnegative")
    cum = np.concatenate([[0.0], np.cumsum(np.diff(grid) * (rate[1:] + rate[:-1]) / 2)])
    return MarginalHazard(grid, rate, cum)


def simulate_baseline_scenario(scn: BaselineScenario, seed: int) -> EventHistory:
    """Binary baseline ``x`` and exponential treatment time with rate ``a0 + aA x``.

    Each subject draws two uniforms: the first sets ``x``, the second the
    treatment time.
    """
    records = []
    baseline = {}
    for sid in range(1, int(scn.n) + 1):
        u = subject_rng(seed, sid).random(2)
        x = float(u[0] < scn.p)
        t = -np.log1p(-u[1]) / (scn.alpha_0 + scn.alpha_A * x)
        baseline[sid] = (x,)
        if t <= scn.horizon:
            records.append(EventRecord(sid, float(t), "A"))
    return build_history(records, baseline, scn.horizon, names=("x",))


def treatment_intensities(scn) -> tuple[AdditiveIntensity, AdditiveIntensity]:
    """Observed and hypothetical (marginal) treatment intensities of a scenario."""
    marg = marginal_treatment_hazard(scn)
    hypo = AdditiveIntensity(["1"], [marg], [marg.cumulative])
    if isinstance(scn, BaselineScenario):
        return AdditiveIntensity(["1", "x"], [scn.alpha_0, scn.alpha_A]), hypo
    return AdditiveIntensity(["1", "L"], [scn.alpha_A0, scn.alpha_AL]), hypo


def censoring_intensities(scn: ConfoundedScenario) -> tuple[AdditiveIntensity, AdditiveIntensity]:
    marg = marginal_censoring_hazard(scn)
    return AdditiveIntensity(["1", "L"], [scn.alpha_C0, scn.alpha_CL]), AdditiveIntensity(["1"], [marg], [marg.cumulative])
