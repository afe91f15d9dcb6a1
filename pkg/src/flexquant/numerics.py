"""Shared numeric guards: epsilon clamps, finite checks, event counters.

Every epsilon clamp in the library goes through this module so runs can
report how often the guards actually fired.
"""

from __future__ import annotations

import numpy as np

# Clamp floor used inside log arguments and variance denominators.
EPS = 1e-12

# Learnable clipping values are re-projected to at least this after each step.
ALPHA_FLOOR = 1e-3

_finite_checks = True
_event_counts: dict[str, int] = {}


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf detection (on by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled() -> bool:
    return _finite_checks


def check_finite(arr: np.ndarray, where: str) -> None:
    """Raise NonFiniteError if arr contains NaN or Inf.

    Cheap path: the sum of an array is non-finite iff the array contains a
    non-finite entry (Inf + -Inf collapses to NaN), so one reduction suffices.
    """
    if not _finite_checks:
        return
    if arr.size and not np.isfinite(np.sum(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        if bad == 0:
            # The sum overflowed but every entry is finite; not an op defect.
            return
        raise NonFiniteError(f"{where}: {bad}/{arr.size} non-finite entries")


def count_event(name: str, n: int = 1) -> None:
    if n:
        _event_counts[name] = _event_counts.get(name, 0) + int(n)


def event_counts() -> dict[str, int]:
    return dict(_event_counts)


def reset_events() -> None:
    _event_counts.clear()


def clamped_log(x: np.ndarray, event: str = "log_clamp") -> np.ndarray:
    """log(max(x, EPS)), counting how many entries needed the clamp."""
    n_clamped = int(np.count_nonzero(x < EPS))
    count_event(event, n_clamped)
    return np.log(np.maximum(x, EPS))
