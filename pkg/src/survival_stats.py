"""
Survival evaluation: Harrell's concordance index, median risk stratification, Kaplan-Meier curves and
the two-group log-rank test.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

logger = logging.getLogger(__name__)


class NoComparablePairsError(ValueError):
    """No pair (i, j) with t_i < t_j and event_i exists."""


class ZeroVarianceError(ValueError):
    """The log-rank variance is zero: no events, or one group is empty at every event time."""


@dataclass(frozen=True)
class Cohort:
    """
    predicted risks with the matching survival labels.

    Attributes:
        risks (np.ndarray): predicted risk per subject.
        times (np.ndarray): survival or censoring times, > 0.
        events (np.ndarray): True for observed events.
        ids (tuple[str, ...]): subject identifiers.
    """
    risks: np.ndarray
    times: np.ndarray
    events: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        risks = np.asarray(self.risks, dtype=np.float64).reshape(-1)
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        events = np.asarray(self.events, dtype=bool).reshape(-1)
        if not (risks.shape == times.shape == events.shape):
            raise ValueError(f"risks, times and events differ in length: "
                             f"{risks.size}, {times.size}, {events.size}")
        if np.any(times <= 0):
            raise ValueError("survival times must be positive")
        ids = tuple(self.ids) or tuple(str(i) for i in range(risks.size))
        if len(ids) != risks.size:
            raise ValueError(f"{len(ids)} ids for {risks.size} subjects")
        object.__setattr__(self, "risks", risks)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.risks.size

    def subset(self, mask: np.ndarray) -> "Cohort":
        mask = np.asarray(mask, dtype=bool)
        return Cohort(risks=self.risks[mask], times=self.times[mask], events=self.events[mask],
                      ids=tuple(i for i, keep in zip(self.ids, mask) if keep))


@dataclass(frozen=True)
class SurvivalCurve:
    """
    Kaplan-Meier step function.

    Attributes:
        time_points (np.ndarray): distinct observed times, increasing.
        survival (np.ndarray): S(t) right after each time point.
        at_risk (np.ndarray): subjects at risk just before each time point.
        observed_events (np.ndarray): events at each time point.
    """
    time_points: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    observed_events: np.ndarray

    def survival_at(self, t) -> np.ndarray:
        """S evaluated at `t` (1 before the first time point)."""
        t = np.asarray(t, dtype=np.float64)
        index = np.searchsorted(self.time_points, t, side="right")
        padded = np.concatenate([[1.0], self.survival])
        return padded[index]


def c_index(cohort: Cohort) -> float:
    """
    Harrell's concordance index.

    Pair (i, j) is comparable when t_i < t_j and subject i had an event; it is concordant when
    r_i > r_j, and a tie in risk counts one half.

    Args:
        cohort (Cohort): risks and labels.

    Returns:
        float: concordant fraction in [0, 1].

    Raises:
        NoComparablePairsError: when no pair is comparable.
    """
    comparable = cohort.events[:, None] & (cohort.times[:, None] < cohort.times[None, :])
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise NoComparablePairsError("no comparable pairs: every subject is censored or times are all equal")
    risk_i = cohort.risks[:, None]
    risk_j = cohort.risks[None, :]
    score = np.where(risk_i > risk_j, 1.0, np.where(risk_i == risk_j, 0.5, 0.0))
    return float(score[comparable].sum() / n_pairs)


def stratify_by_median(cohort: Cohort) -> tuple[Cohort, Cohort]:
    """
    Split at the median risk: risk > median goes to the high group, the rest to the low group.
    """
    if len(cohort) < 2:
        raise ValueError(f"stratification needs at least 2 subjects, got {len(cohort)}")
    median = float(np.median(cohort.risks))
    high_mask = cohort.risks > median
    if not high_mask.any():
        logger.warning(f"degenerate median split: no risk exceeds the median {median:.6g}; high group is empty")
    return cohort.subset(high_mask), cohort.subset(~high_mask)


def km_curve(times, events) -> SurvivalCurve:
    """
    Product-limit estimate S(t) = prod_{t_i <= t} (1 - d_i / n_i).

    Censored subjects stay at risk at their own time and leave afterwards. Every distinct observed
    time is a point of the curve, so censoring-only times carry the current survival unchanged.

    Args:
        times: survival or censoring times.
        events: event indicators.

    Returns:
        SurvivalCurve: the estimated curve.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events, dtype=bool).reshape(-1)
    if times.size == 0:
        raise ValueError("km_curve needs at least one subject")
    if times.shape != events.shape:
        raise ValueError(f"times and events differ in length: {times.size}, {events.size}")

    time_points, inverse = np.unique(times, return_inverse=True)
    observed = np.bincount(inverse, weights=events, minlength=time_points.size).astype(np.int64)
    leaving = np.bincount(inverse, minlength=time_points.size)
    at_risk = times.size - np.concatenate([[0], np.cumsum(leaving)[:-1]])
    survival = np.cumprod(1.0 - observed / at_risk)
    return SurvivalCurve(time_points=time_points, survival=survival, at_risk=at_risk.astype(np.int64),
                         observed_events=observed)


def log_rank_test(a: Cohort, b: Cohort) -> tuple[float, float]:
    """
    Two-group log-rank test.

    At each distinct event time the expected events of group a are d * n_a / n with hypergeometric
    variance d (n_a / n)(1 - n_a / n)(n - d) / (n - 1). chi_square = (O_a - E_a)^2 / Var and the
    p-value is the chi-square(1) tail Q(1/2, chi_square/2).

    Args:
        a (Cohort): first group.
        b (Cohort): second group.

    Returns:
        tuple[float, float]: (chi_square, p_value).

    Raises:
        ZeroVarianceError: when the variance vanishes.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("log-rank test needs two nonempty groups")
    times = np.concatenate([a.times, b.times])
    events = np.concatenate([a.events, b.events])
    in_a = np.concatenate([np.ones(len(a), dtype=bool), np.zeros(len(b), dtype=bool)])

    event_times = np.unique(times[events])
    at_risk = times[None, :] >= event_times[:, None]
    died = (times[None, :] == event_times[:, None]) & events[None, :]

    n = at_risk.sum(axis=1).astype(np.float64)
    n_a = (at_risk & in_a).sum(axis=1).astype(np.float64)
    d = died.sum(axis=1).astype(np.float64)
    d_a = (died & in_a).sum(axis=1).astype(np.float64)

    expected = d * n_a / n
    with np.errstate(invalid="ignore", divide="ignore"):
        variance_terms = np.where(n > 1, d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0), 0.0)
    variance = float(variance_terms.sum())
    if variance <= 0:
        raise ZeroVarianceError("log-rank variance is zero")
    chi_square = float((d_a.sum() - expected.sum()) ** 2 / variance)
    p_value = float(gammaincc(0.5, chi_square / 2.0))
    return chi_square, p_value
