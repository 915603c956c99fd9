"""Bjontegaard delta rate with the classic cubic fit of log10(rate) against quality."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class BDRateError(ValueError):
    pass


@dataclass(frozen=True)
class RDPoint:
    rate: float
    quality: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted((p if isinstance(p, RDPoint) else RDPoint(*p) for p in self.points),
                             key=lambda p: p.rate)
        if len(self.points) < 4:
            raise BDRateError(f"{self.label}: need at least 4 RD points, got {len(self.points)}")
        rates = [p.rate for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise BDRateError(f"{self.label}: rates must be strictly increasing")
        q = self.qualities
        if any(b < a for a, b in zip(q, q[1:])):
            log.warning("%s: quality decreases with rate somewhere along the curve", self.label)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points], dtype=np.float64)

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points], dtype=np.float64)


@dataclass(frozen=True)
class BDRateResult:
    percent: float
    interval: tuple[float, float]
    monotone: bool

    def __float__(self):
        return self.percent


def _fit_is_monotone(poly: np.ndarray, lo: float, hi: float) -> bool:
    # log-rate should rise with quality across the integration interval
    q = np.linspace(lo, hi, 257)
    return bool(np.all(np.diff(np.polyval(poly, q)) >= 0))


def bd_rate_detail(test: RDCurve, reference: RDCurve) -> BDRateResult:
    lo = max(test.qualities.min(), reference.qualities.min())
    hi = min(test.qualities.max(), reference.qualities.max())
    if not hi > lo:
        raise BDRateError(f"quality ranges of {test.label!r} and {reference.label!r} do not overlap")
    p_test = np.polyfit(test.qualities, np.log10(test.rates), 3)
    p_ref = np.polyfit(reference.qualities, np.log10(reference.rates), 3)
    i_test, i_ref = np.polyint(p_test), np.polyint(p_ref)
    area_test = np.polyval(i_test, hi) - np.polyval(i_test, lo)
    area_ref = np.polyval(i_ref, hi) - np.polyval(i_ref, lo)
    avg_diff = (area_test - area_ref) / (hi - lo)
    monotone = _fit_is_monotone(p_test, lo, hi) and _fit_is_monotone(p_ref, lo, hi)
    if not monotone:
        log.warning("BD-rate %s vs %s: fitted curve is not monotone over [%g, %g]",
                    test.label, reference.label, lo, hi)
    return BDRateResult((math.pow(10.0, avg_diff) - 1.0) * 100.0, (float(lo), float(hi)), monotone)


def bd_rate(test: RDCurve, reference: RDCurve) -> float:
    """Average bitrate difference (percent) of `test` over `reference` at equal quality.

    Negative values mean the test curve needs fewer bits.
    """
    return bd_rate_detail(test, reference).percent
