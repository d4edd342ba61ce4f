"""Calendar decomposition of Unix timestamps into (year, month, day) ordinals.

All arithmetic is integer-exact in the UTC proleptic Gregorian calendar.
Counts are cumulative since 1970-01-01, so 1971-01-01T00:00Z maps to
``(1, 12, 365)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

SECONDS_PER_DAY = 86400
EPOCH_YEAR = 1970


class TemporalTriplet(NamedTuple):
    y: int
    m: int
    d: int


def is_leap_year(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


def days_from_civil(year: int, month: int, day: int) -> int:
    """Day index since 1970-01-01 for a Gregorian date (month 1-12)."""
    # shift the year so it starts in March; Feb 29 becomes the last day
    y = year - (month <= 2)
    era = y // 400
    yoe = y - era * 400
    mp = (month + 9) % 12
    doy = (153 * mp + 2) // 5 + day - 1
    doe = yoe * 365 + yoe // 4 - yoe // 100 + doy
    return era * 146097 + doe - 719468


def civil_from_days(days: int) -> tuple[int, int, int]:
    """Inverse of :func:`days_from_civil`: ``(year, month, day_of_month)``."""
    if days < 0:
        raise ValueError(f"pre-epoch day index: {days}")
    z = days + 719468
    era = z // 146097
    doe = z - era * 146097
    yoe = (doe - doe // 1460 + doe // 36524 - doe // 146096) // 365
    doy = doe - (365 * yoe + yoe // 4 - yoe // 100)
    mp = (5 * doy + 2) // 153
    day = doy - (153 * mp + 2) // 5 + 1
    month = mp + 3 if mp < 10 else mp - 9
    year = yoe + era * 400 + (month <= 2)
    return int(year), int(month), int(day)


def decompose_timestamp(seconds: int) -> TemporalTriplet:
    if seconds < 0:
        raise ValueError(f"pre-epoch timestamp: {seconds}")
    d = int(seconds) // SECONDS_PER_DAY
    year, month, _ = civil_from_days(d)
    y = year - EPOCH_YEAR
    return TemporalTriplet(y, 12 * y + month - 1, d)


def decompose_many(seconds) -> np.ndarray:
    """Vectorised :func:`decompose_timestamp`; returns an int64 array (..., 3)."""
    s = np.asarray(seconds, dtype=np.int64)
    if np.any(s < 0):
        raise ValueError("pre-epoch timestamp")
    d = s // SECONDS_PER_DAY
    z = d + 719468
    era = z // 146097
    doe = z - era * 146097
    yoe = (doe - doe // 1460 + doe // 36524 - doe // 146096) // 365
    doy = doe - (365 * yoe + yoe // 4 - yoe // 100)
    mp = (5 * doy + 2) // 153
    month = np.where(mp < 10, mp + 3, mp - 9)
    year = yoe + era * 400 + (month <= 2)
    y = year - EPOCH_YEAR
    return np.stack([y, 12 * y + month - 1, d], axis=-1)


def month_of_year(seconds: int) -> int:
    """0-based month index (January = 0) of a timestamp."""
    return decompose_timestamp(seconds).m % 12
