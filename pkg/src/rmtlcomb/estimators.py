"""Nonparametric estimators for two-group competing-risks data.

Every estimate here is a right-continuous step function, so all integrals
are evaluated exactly as sums over the constant pieces.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CENSORED, INTEREST, COMPETING = 0, 1, 2

# position of each status within a block of tied times
_TIE_RANK = np.array([2, 0, 1])


@dataclass(frozen=True)
class SurvRecord:
    """One subject: observed time, event status and group label."""

    time: float
    status: int
    group: int

    def __post_init__(self):
        if not (np.isfinite(self.time) and self.time > 0):
            raise ValueError(f"time must be positive and finite, got {self.time!r}")
        if self.status not in (0, 1, 2):
            raise ValueError(f"unknown status {self.status!r}")
        if self.group not in (1, 2):
            raise ValueError(f"unknown group {self.group!r}")


class Sample:
    """Immutable collection of records kept sorted by time.

    Tied times are ordered events of interest first, then competing events,
    then censorings; remaining ties keep input order.

    Parameters
    ----------
    time, status, group : array-like
        Parallel arrays, one entry per subject.
    """

    __slots__ = ("time", "status", "group", "index")

    def __init__(self, time, status, group):
        time = np.asarray(time, dtype=float).ravel()
        status = np.asarray(status).ravel()
        group = np.asarray(group).ravel()
        if time.size == 0:
            raise ValueError("empty input")
        if not (time.size == status.size == group.size):
            raise ValueError("time, status and group must have equal length")
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise ValueError("time must be positive and finite")
        if not np.all(np.isin(status, (0, 1, 2))):
            raise ValueError("status must be 0, 1 or 2")
        if not np.all(np.isin(group, (1, 2))):
            raise ValueError("group must be 1 or 2")
        status = status.astype(np.int64)
        group = group.astype(np.int64)
        index = np.arange(time.size)
        order = np.lexsort((index, _TIE_RANK[status], time))
        object.__setattr__(self, "time", time[order])
        object.__setattr__(self, "status", status[order])
        object.__setattr__(self, "group", group[order])
        object.__setattr__(self, "index", index[order])
        for arr in (self.time, self.status, self.group, self.index):
            arr.setflags(write=False)

    def __setattr__(self, name, value):
        raise AttributeError("Sample is immutable")

    @classmethod
    def from_records(cls, records: Iterable[SurvRecord]) -> "Sample":
        records = list(records)
        if not records:
            raise ValueError("empty input")
        return cls(
            [r.time for r in records],
            [r.status for r in records],
            [r.group for r in records],
        )

    def __len__(self) -> int:
        return self.time.size

    def __repr__(self) -> str:
        n1, n2 = self.group_sizes()
        return f"Sample(n={len(self)}, n1={n1}, n2={n2})"

    def records(self) -> list[SurvRecord]:
        return [
            SurvRecord(float(t), int(s), int(g))
            for t, s, g in zip(self.time, self.status, self.group)
        ]

    def group_sizes(self) -> tuple[int, int]:
        n1 = int(np.count_nonzero(self.group == 1))
        return n1, len(self) - n1

    def subset(self, group: int) -> "Sample":
        """Records of one group as a new sample."""
        mask = self.group == group
        if not mask.any():
            raise ValueError(f"group {group} is empty")
        return Sample(self.time[mask], self.status[mask], self.group[mask])

    def relabel(self, group) -> "Sample":
        """Same times and statuses with a new group vector (sorted order)."""
        return Sample(self.time, self.status, group)

    def require_two_groups(self):
        n1, n2 = self.group_sizes()
        if n1 == 0 or n2 == 0:
            raise ValueError("both groups must be present")


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous piecewise-constant function on ``[0, inf)``.

    ``values[i]`` holds on ``[knots[i], knots[i+1])`` and ``value_at_zero``
    on ``[0, knots[0])``.
    """

    knots: np.ndarray
    values: np.ndarray
    value_at_zero: float = 0.0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if knots.shape != values.shape or knots.ndim != 1:
            raise ValueError("knots and values must be 1-d of equal length")
        if knots.size and (knots[0] <= 0 or np.any(np.diff(knots) <= 0)):
            raise ValueError("knots must be positive and strictly ascending")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "value_at_zero", float(self.value_at_zero))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right")
        padded = np.concatenate(([self.value_at_zero], self.values))
        out = padded[idx]
        return out if out.ndim else float(out)

    def left_limit(self, t):
        """Value just before ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="left")
        padded = np.concatenate(([self.value_at_zero], self.values))
        out = padded[idx]
        return out if out.ndim else float(out)

    def _pieces(self, upper: float):
        """Breakpoints and levels of the pieces covering ``[0, upper]``."""
        inside = self.knots < upper
        edges = np.concatenate(([0.0], self.knots[inside], [upper]))
        levels = np.concatenate(([self.value_at_zero], self.values[inside]))
        return edges[:-1], edges[1:], levels

    def integral(self, upper: float) -> float:
        """Exact ``int_0^upper f(t) dt``."""
        a, b, v = self._pieces(upper)
        return float(np.sum(v * (b - a)))

    def cumulative_integral(self, t) -> np.ndarray:
        """Exact ``int_0^t f(u) du`` for each entry of ``t``."""
        t = np.asarray(t, dtype=float)
        edges = np.concatenate(([0.0], self.knots))
        levels = np.concatenate(([self.value_at_zero], self.values))
        at_edges = np.concatenate(([0.0], np.cumsum(levels[:-1] * np.diff(edges))))
        idx = np.searchsorted(self.knots, t, side="right")
        return at_edges[idx] + levels[idx] * (t - edges[idx])

    def moment_integral(self, upper: float) -> float:
        """Exact ``int_0^upper t f(t) dt``."""
        a, b, v = self._pieces(upper)
        return float(np.sum(v * (b * b - a * a)) / 2.0)

    def __add__(self, other: "StepFunction") -> "StepFunction":
        knots = np.union1d(self.knots, other.knots)
        return StepFunction(
            knots, self(knots) + other(knots), self.value_at_zero + other.value_at_zero
        )

    def complement(self) -> "StepFunction":
        """``1 - f``."""
        return StepFunction(self.knots, 1.0 - self.values, 1.0 - self.value_at_zero)

    def points(self) -> np.ndarray:
        """``(time, value)`` rows starting at time 0, for plotting."""
        return np.column_stack(
            (
                np.concatenate(([0.0], self.knots)),
                np.concatenate(([self.value_at_zero], self.values)),
            )
        )


@dataclass(frozen=True)
class CifEstimate:
    event_type: int
    cif: StepFunction
    overall_survival: StepFunction
    n: int
    max_time: float = np.inf


@dataclass(frozen=True)
class RmtlEstimate:
    """Restricted mean time lost and its per-subject variance."""

    tau: float
    point: float
    per_subject_variance: float
    n: int
    variance_clamped: bool = False

    @property
    def se(self) -> float:
        return float(np.sqrt(self.per_subject_variance / self.n))

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        return _normal_ci(self.point, self.se, alpha)


@dataclass(frozen=True)
class RmstEstimate:
    tau: float
    point: float
    variance_of_point: float
    n: int
    unstable_variance: bool = False

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance_of_point))

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        return _normal_ci(self.point, self.se, alpha)


@dataclass(frozen=True)
class RcEstimate:
    """Restricted mean time free of any event, from the two CIFs."""

    tau: float
    point: float
    per_subject_variance: float
    n: int
    variance_clamped: bool = False

    @property
    def se(self) -> float:
        return float(np.sqrt(self.per_subject_variance / self.n))

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        return _normal_ci(self.point, self.se, alpha)


@dataclass(frozen=True)
class GreenwoodTerms:
    """Distinct event times with event counts and risk-set sizes."""

    times: np.ndarray
    events: np.ndarray
    at_risk: np.ndarray
    n: int
    max_time: float


def _normal_ci(point, se, alpha):
    from scipy.stats import norm

    half = norm.ppf(1 - alpha / 2) * se
    return point - half, point + half


def _event_table(sample: Sample, counted: Sequence[int]):
    """Distinct times of counted events, counts, and numbers at risk."""
    is_event = np.isin(sample.status, list(counted))
    times, first = np.unique(sample.time, return_index=True)
    # sample.time is sorted, so the first index of each distinct time gives
    # the number of records strictly before it
    at_risk = len(sample) - first
    events = np.add.reduceat(is_event.astype(np.int64), first)
    keep = events > 0
    return times[keep], events[keep], at_risk[keep]


def greenwood_terms(sample: Sample, events_counted: Sequence[int] = (1, 2)) -> GreenwoodTerms:
    times, d, y = _event_table(sample, events_counted)
    return GreenwoodTerms(times, d, y, len(sample), float(sample.time[-1]))


def kaplan_meier(sample: Sample, events_counted: Sequence[int] = (1, 2)) -> StepFunction:
    """Product-limit survival estimate.

    Statuses not in ``events_counted`` are treated as censored; the knots are
    the distinct times of counted events.
    """
    if len(sample) == 0:
        raise ValueError("empty input")
    times, d, y = _event_table(sample, events_counted)
    return StepFunction(times, np.cumprod(1.0 - d / y), 1.0)


def censoring_km(sample: Sample) -> StepFunction:
    """Product-limit estimate of the censoring survival function.

    Censorings tied with events are placed after them, so the risk set at a
    censoring time excludes subjects failing at that same time.
    """
    if len(sample) == 0:
        raise ValueError("empty input")
    times, first = np.unique(sample.time, return_index=True)
    is_cens = (sample.status == CENSORED).astype(np.int64)
    is_event = 1 - is_cens
    c = np.add.reduceat(is_cens, first)
    d = np.add.reduceat(is_event, first)
    at_risk = len(sample) - first - d
    keep = c > 0
    return StepFunction(times[keep], np.cumprod(1.0 - c[keep] / at_risk[keep]), 1.0)


def aalen_johansen(sample: Sample, j: int) -> CifEstimate:
    """Cumulative incidence of event type ``j``.

    Increments are ``d_ij / n_i * S(t_i-)`` with ``S`` the all-event
    Kaplan-Meier estimate.
    """
    if j not in (1, 2):
        raise ValueError("event type must be 1 or 2")
    if len(sample) == 0:
        raise ValueError("empty input")
    surv = kaplan_meier(sample, (1, 2))
    times, first = np.unique(sample.time, return_index=True)
    at_risk = len(sample) - first
    dj = np.add.reduceat((sample.status == j).astype(np.int64), first)
    keep = dj > 0
    times, dj, at_risk = times[keep], dj[keep], at_risk[keep]
    increments = dj / at_risk * surv.left_limit(times)
    return CifEstimate(
        j, StepFunction(times, np.cumsum(increments), 0.0), surv, len(sample), float(sample.time[-1])
    )


def _lost_time_variance(cif: StepFunction, tau: float):
    area = cif.integral(tau)
    var = 2.0 * tau * area - 2.0 * cif.moment_integral(tau) - area * area
    clamped = var < 0
    if clamped:
        warnings.warn("negative variance estimate clamped to 0", RuntimeWarning, stacklevel=3)
        var = 0.0
    return area, var, clamped


def _check_tau(tau, max_time):
    if not (np.isfinite(tau) and tau > 0) or tau > max_time:
        raise ValueError(f"invalid tau {tau!r} (data range ends at {max_time})")


def rmtl(cif: CifEstimate, tau: float, max_time: float | None = None) -> RmtlEstimate:
    """Area under the CIF on ``[0, tau]`` with its per-subject variance.

    The variance is ``2 tau A - 2 int_0^tau t I(t) dt - A^2`` with
    ``A = int_0^tau I(t) dt``; divide by ``n`` for the variance of the
    estimate.

    Parameters
    ----------
    cif : CifEstimate
    tau : float
        Restriction horizon; must not exceed ``max_time``.
    max_time : float, optional
        Largest observed time of the sample behind ``cif``; taken from the
        estimate when omitted.
    """
    if max_time is None:
        max_time = cif.max_time
    _check_tau(tau, max_time)
    area, var, clamped = _lost_time_variance(cif.cif, tau)
    return RmtlEstimate(float(tau), area, var, cif.n, clamped)


def rmst_from_survival(
    survival: StepFunction, tau: float, greenwood: GreenwoodTerms, max_time: float | None = None
) -> RmstEstimate:
    """Restricted mean survival time with a Greenwood-type variance."""
    if max_time is None:
        max_time = greenwood.max_time
    _check_tau(tau, max_time)
    point = survival.integral(tau)
    inside = greenwood.times <= tau
    t = greenwood.times[inside]
    d = greenwood.events[inside].astype(float)
    y = greenwood.at_risk[inside].astype(float)
    tail = point - survival.cumulative_integral(t)
    full = y == d
    # 0/0 in the Greenwood weight: drop the term, flag it if it would matter
    unstable = bool(np.any(full & (tail != 0.0)))
    denom = np.where(full, 1.0, y * (y - d))
    var = float(np.sum(np.where(full, 0.0, tail * tail * d / denom)))
    return RmstEstimate(float(tau), point, var, greenwood.n, unstable)


def rmst(sample: Sample, tau: float, events_counted: Sequence[int] = (1, 2)) -> RmstEstimate:
    """RMST of one sample, treating statuses outside ``events_counted`` as censored."""
    return rmst_from_survival(
        kaplan_meier(sample, events_counted),
        tau,
        greenwood_terms(sample, events_counted),
    )


def rc(sample: Sample, tau: float) -> RcEstimate:
    """Restricted mean time free of both event types.

    ``tau - RMTL_1 - RMTL_2``; the per-subject variance applies the RMTL
    variance form to the composite CIF ``I_1 + I_2``.
    """
    max_time = float(sample.time[-1])
    _check_tau(tau, max_time)
    cif1 = aalen_johansen(sample, 1)
    cif2 = aalen_johansen(sample, 2)
    lost1 = cif1.cif.integral(tau)
    lost2 = cif2.cif.integral(tau)
    composite = cif1.cif + cif2.cif
    _, var, clamped = _lost_time_variance(composite, tau)
    return RcEstimate(float(tau), tau - lost1 - lost2, var, len(sample), clamped)


def select_tau(sample: Sample) -> float:
    """Smaller of the two groups' last event-of-interest times."""
    lasts = []
    for g in (1, 2):
        times = sample.time[(sample.group == g) & (sample.status == INTEREST)]
        if times.size == 0:
            raise ValueError("tau undefined; supply tau explicitly")
        lasts.append(times[-1])
    return float(min(lasts))
