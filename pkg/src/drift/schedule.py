"""Trainable-rank decay schedules.

Each decay kind maps an epoch index ``i`` in ``[0, T]`` to an integer rank
between ``r_min`` and ``r_max``:

    linear       floor(r_max - (r_max - r_min) * i / T)
    cosine       floor(r_min + 0.5 * (r_max - r_min) * (1 + cos(pi * i / T)))
    sigmoid      floor(r_max - (r_max - r_min) / (1 + exp(-tau * (i - t_m))))
    exponential  floor(r_min + (r_max - r_min) * exp(-tau * i))

Results are clamped to ``[r_min, r_max]`` after the floor.

The floor is taken on the exact value, not on a float approximation that
happens to round across an integer. Linear is done in integers. The cosine
term is only rational at ``i / T`` in {0, 1/3, 1/2, 2/3, 1}, and the logistic
and exponential terms only at a zero exponent; those cases use exact
fractions. Everything else is irrational, and the fractional part is
computed in a cancellation-free form so that floor/ceil of the float is
correct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

KINDS = ("linear", "cosine", "sigmoid", "exponential", "constant")

# cos^2(pi * q / 2) for the rational q where it is rational
_EXACT_COS2 = {
    Fraction(0): Fraction(1),
    Fraction(1, 3): Fraction(3, 4),
    Fraction(1, 2): Fraction(1, 2),
    Fraction(2, 3): Fraction(1, 4),
    Fraction(1): Fraction(0),
}


@dataclass(frozen=True)
class RankSchedule:
    kind: str
    r_max: int
    r_min: int
    total_epochs: int
    tau: float = 0.5
    t_mid: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown decay kind {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.r_min <= self.r_max:
            raise ValueError(f"need 1 <= r_min <= r_max, got r_min={self.r_min}, r_max={self.r_max}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.kind in ("sigmoid", "exponential") and not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def midpoint(self) -> int:
        return self.t_mid if self.t_mid is not None else self.total_epochs // 2


def _floor_frac(x: Fraction) -> int:
    return math.floor(x)


def scheduled_rank(s: RankSchedule, i: int) -> int:
    """Trainable rank at epoch ``i``; epochs past ``T`` give ``r_min``."""
    if i < 0:
        raise ValueError(f"epoch index must be >= 0, got {i}")
    if s.kind == "constant":
        return s.r_max
    if i > s.total_epochs:
        return s.r_min
    span = s.r_max - s.r_min
    T = s.total_epochs

    if s.kind == "linear":
        # floor(r_max - span*i/T) == r_max - ceil(span*i/T)
        r = s.r_max - (-(-span * i // T))
    elif s.kind == "cosine":
        # 0.5*(1+cos(x)) == cos^2(x/2)
        q = Fraction(i, T)
        if q in _EXACT_COS2:
            r = s.r_min + _floor_frac(span * _EXACT_COS2[q])
        else:
            c = math.cos(math.pi * i / (2 * T))
            r = s.r_min + math.floor(span * c * c)
    elif s.kind == "sigmoid":
        # floor(r_max - q) == r_max - ceil(q), q = span / (1 + e^{-tau (i - t_m)})
        d = i - s.midpoint
        if d == 0:
            r = s.r_max - math.ceil(Fraction(span, 2))
        else:
            x = -s.tau * d
            q = span / (1.0 + math.exp(x)) if x < 700.0 else span * math.exp(-x)
            # q is strictly positive even where the float underflows
            r = s.r_max - max(math.ceil(q), 1)
    else:  # exponential
        if i == 0:
            r = s.r_max
        else:
            r = s.r_min + math.floor(span * math.exp(-s.tau * i))
    return min(max(r, s.r_min), s.r_max)


def schedule_table(s: RankSchedule) -> list[tuple[int, int]]:
    return [(i, scheduled_rank(s, i)) for i in range(s.total_epochs + 1)]


# the six decay variants compared in the decay-function ablation
DECAY_VARIANTS = {
    "linear": dict(kind="linear"),
    "cosine": dict(kind="cosine"),
    "exp0.1": dict(kind="exponential", tau=0.1),
    "exp0.5": dict(kind="exponential", tau=0.5),
    "sig0.1": dict(kind="sigmoid", tau=0.1),
    "sig0.5": dict(kind="sigmoid", tau=0.5),
}


def variant(name: str, r_max: int, r_min: int, total_epochs: int, t_mid: Optional[int] = None) -> RankSchedule:
    return RankSchedule(r_max=r_max, r_min=r_min, total_epochs=total_epochs, t_mid=t_mid, **DECAY_VARIANTS[name])
