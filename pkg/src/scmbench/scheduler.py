"""Per-step mode selection and adaptive chain bypass.

The schedule is: ``warmup`` fully dense steps, then strict alternation
with even steps pruning (which refresh the cache and log similarities) and
odd steps reusing (which consume it). Every cache entry is therefore
written exactly one step before it is read.

Bypass is driven by the average similarity rate: the mean of all logged
cosines across block kinds, layers, and the compute steps inside a
trailing window of depth ``delta_t``. Once the rate reaches the threshold
``alpha``, all intermediate layers skip their chain for the rest of the
run; the first and last layers keep alternating. The decision is evaluated
once per step boundary, before the step runs, on the window ending at the
latest compute step, and it never un-triggers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .cache import RollingCache

__all__ = ["StepKind", "StepMode", "SchedulerState", "compute_asr", "select_mode"]


class StepKind(enum.Enum):
    DENSE = "dense"
    PRUNE = "prune"
    REUSE = "reuse"


@dataclass(frozen=True)
class StepMode:
    kind: StepKind
    bypassed_layers: frozenset[int] = frozenset()


@dataclass
class SchedulerState:
    delta_t: int
    alpha: float
    warmup: int
    asr_history: list[tuple[int, float]] = field(default_factory=list)
    bypass_active: bool = False
    mode_trace: list[tuple[int, StepMode]] = field(default_factory=list)


def bypass_set(total_layers: int) -> frozenset[int]:
    """Intermediate layers only; the first and last are never bypassed."""
    return frozenset(range(1, total_layers - 1))


def compute_asr(cache: RollingCache, step: int, delta_t: int,
                exclude_layers: frozenset[int] = frozenset()) -> float:
    """Windowed mean of logged similarities; 0.0 when the window is empty.

    The window covers records from compute steps in [step - delta_t, step],
    all block kinds and all non-excluded layers. An empty window is the
    not-ready signal: bypass cannot trigger on it.
    """
    lo = step - delta_t
    values = [
        rec.value
        for rec in cache.similarity_log
        if lo <= rec.step <= step and rec.layer not in exclude_layers
    ]
    if not values:
        return 0.0
    return sum(values) / len(values)


def base_kind(step: int, warmup: int) -> StepKind:
    if step < warmup:
        return StepKind.DENSE
    return StepKind.PRUNE if step % 2 == 0 else StepKind.REUSE


def select_mode(state: SchedulerState, step: int, asr: float,
                total_layers: int,
                kind: StepKind | None = None) -> StepMode:
    """Pick the mode for one step and latch bypass if the rate clears alpha.

    ``kind`` overrides the default dense/prune/reuse pattern (the ablation
    modes reuse the bypass logic with their own patterns).
    """
    if kind is None:
        kind = base_kind(step, state.warmup)
    if not state.bypass_active and step >= state.warmup and asr >= state.alpha:
        state.bypass_active = True
    layers = bypass_set(total_layers) if state.bypass_active else frozenset()
    mode = StepMode(kind=kind, bypassed_layers=layers)
    state.asr_history.append((step, asr))
    state.mode_trace.append((step, mode))
    return mode
