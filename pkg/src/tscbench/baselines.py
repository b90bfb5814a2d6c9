"""Non-learning reference controllers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .sim import N_MOVEMENTS, PHASE_OF_MOVEMENT, PHASES, SV_JAM_VEH, Observation


@dataclass
class FixedTimeConfig:
    phase_duration_s: int = 25

    def validate(self, slot_s: int) -> None:
        if self.phase_duration_s <= 0 or self.phase_duration_s % slot_s:
            raise ConfigError("phase_duration_s", f"must be a positive multiple of slot_s={slot_s}")


@dataclass
class SotlConfig:
    threshold_veh_s: float = 30.0
    min_green_s: int = 10

    def validate(self, slot_s: int) -> None:
        if self.threshold_veh_s <= 0:
            raise ConfigError("threshold_veh_s", "must be positive")
        if self.min_green_s <= 0 or self.min_green_s % slot_s:
            raise ConfigError("min_green_s", f"must be a positive multiple of slot_s={slot_s}")


def fixed_time_policy(clock_s: int, cfg: FixedTimeConfig = FixedTimeConfig()) -> int:
    if clock_s < 0:
        raise ValueError("clock_s must be non-negative")
    return (clock_s // cfg.phase_duration_s) % len(PHASES)


def phase_queues(obs: Observation) -> np.ndarray:
    q = obs.sv[:, SV_JAM_VEH]
    return np.array([q[a] + q[b] for a, b in PHASES])


def longest_queue_policy(obs: Observation) -> int:
    # np.argmax returns the first maximum, i.e. the lower phase index on ties
    return int(np.argmax(phase_queues(obs)))


@dataclass
class SotlState:
    """Per-episode SOTL memory: red-time accumulators and the active phase."""

    accumulators: np.ndarray = field(default_factory=lambda: np.zeros(N_MOVEMENTS))
    phase: int = 0
    held_s: int = 0


def sotl_policy(obs: Observation, state: SotlState, cfg: SotlConfig = SotlConfig(), slot_s: int = 5) -> int:
    """Self-organizing threshold rule. Mutates ``state``; returns the phase for the next slot."""
    green = PHASES[state.phase]
    for m in range(N_MOVEMENTS):
        if m not in green:
            state.accumulators[m] += obs.sv[m, SV_JAM_VEH] * slot_s
    best = int(np.argmax(state.accumulators))
    if state.held_s >= cfg.min_green_s and state.accumulators[best] >= cfg.threshold_veh_s:
        state.phase = PHASE_OF_MOVEMENT[best]
        for m in PHASES[state.phase]:
            state.accumulators[m] = 0.0
        state.held_s = 0
    state.held_s += slot_s
    return state.phase
