"""Stochastic depth: linearly decaying survival schedule and block masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SurvivalSchedule:
    probs: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if not probs:
            raise ValueError("survival schedule needs at least one block")
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("survival probabilities must lie in [0, 1]")

    def __len__(self):
        return len(self.probs)

    @property
    def p_terminal(self) -> float:
        return self.probs[-1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    @classmethod
    def uniform(cls, L: int, p: float) -> "SurvivalSchedule":
        return cls((float(p),) * L)


def linear_decay(L: int, p_terminal: float) -> SurvivalSchedule:
    """``p_l = 1 - (l / L) * (1 - p_terminal)`` for blocks ``l = 1..L``."""
    if L < 1:
        raise ValueError(f"need at least one block, got L={L}")
    if not 0.0 < p_terminal <= 1.0:
        raise ValueError(f"p_terminal must lie in (0, 1], got {p_terminal}")
    drop = 1.0 - p_terminal
    probs = [1.0 - (l / L) * drop for l in range(1, L + 1)]
    probs[-1] = float(p_terminal)
    return SurvivalSchedule(tuple(probs))


def sample_mask(schedule: SurvivalSchedule, rng) -> np.ndarray:
    """One independent Bernoulli(p_l) keep flag per block.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.random(len(schedule)) < schedule.as_array()


def expected_active(schedule: SurvivalSchedule) -> float:
    return float(np.mean(schedule.as_array()))
