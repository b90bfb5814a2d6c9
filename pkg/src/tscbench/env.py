"""Gym-style wrapper around the simulator, used for training."""

from __future__ import annotations

import numpy as np

from .sim import SimConfig, SlotOutcome, new_simulation


class SignalEnv:
    def __init__(self, config: SimConfig, seed: int):
        self.config = config
        self.seed = seed
        self.sim = new_simulation(config, seed)
        self.last_outcome: SlotOutcome | None = None

    def reset(self) -> np.ndarray:
        self.sim = new_simulation(self.config, self.seed)
        self.last_outcome = None
        return self.sim.observe().flat().copy()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        out = self.sim.advance_slot(action)
        self.last_outcome = out
        return out.true_observation.flat().copy(), out.reward, self.sim.done


def make_env_factory(config: SimConfig):
    """``factory(seed)`` builds a fresh environment for one episode."""

    def factory(seed: int) -> SignalEnv:
        return SignalEnv(config, seed)

    return factory
