"""Lossy, noisy observation channel.

Each packet is either dropped (probability ``loss_prob``; payload replaced by
0.0) or delivered with additive Gaussian noise ``noise_scale * N(0, 1)``. The
phase column never crosses the channel: the controller knows its own phase.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError
from .sim import N_MOVEMENTS, SV_PHASE, Observation

LOSS_SENTINEL = 0.0
N_DEGRADED = 4  # SV1..SV4


class Granularity(str, Enum):
    PER_MOVEMENT = "per-movement"
    PER_ELEMENT = "per-element"


@dataclass
class ChannelConfig:
    loss_prob: float = 0.2
    noise_scale: float = 0.1
    seed: int = 0
    granularity: Granularity = Granularity.PER_MOVEMENT

    def __post_init__(self):
        self.granularity = Granularity(self.granularity)
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigError("loss_prob", f"must lie in [0, 1], got {self.loss_prob}")
        if not self.noise_scale >= 0.0:
            raise ConfigError("noise_scale", f"must be >= 0, got {self.noise_scale}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["granularity"] = self.granularity.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ChannelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown ChannelConfig field")
        return cls(**d)


@dataclass
class DegradedObservation:
    sv: np.ndarray
    # shape (8,) for per-movement packets, (8, 4) for per-element
    loss_mask: np.ndarray

    def flat(self) -> np.ndarray:
        return self.sv.reshape(-1)

    def movement_lost(self) -> np.ndarray:
        """True for rows with any lost value."""
        if self.loss_mask.ndim == 1:
            return self.loss_mask.copy()
        return self.loss_mask.any(axis=1)

    def element_lost(self) -> np.ndarray:
        """(8, 4) mask over SV1..SV4."""
        if self.loss_mask.ndim == 1:
            return np.repeat(self.loss_mask[:, None], N_DEGRADED, axis=1)
        return self.loss_mask.copy()

    @classmethod
    def clean(cls, obs: Observation) -> DegradedObservation:
        return cls(obs.sv.copy(), np.zeros(N_MOVEMENTS, dtype=bool))


def _transmit(rng: np.random.Generator, payload: np.ndarray, p: float, beta: float):
    """Send one packet. Always consumes one uniform then one normal per value."""
    lost = rng.random() < p
    eta = rng.standard_normal(payload.shape)
    if lost:
        return np.full_like(payload, LOSS_SENTINEL), True
    return payload + beta * eta, False


class Channel:
    """Stateful channel owning its RNG; one per simulation."""

    def __init__(self, cfg: ChannelConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def degrade(self, obs: Observation) -> DegradedObservation:
        cfg = self.cfg
        sv = obs.sv.astype(float).copy()
        if cfg.granularity is Granularity.PER_MOVEMENT:
            mask = np.zeros(N_MOVEMENTS, dtype=bool)
            for m in range(N_MOVEMENTS):
                sv[m, :N_DEGRADED], mask[m] = _transmit(self.rng, sv[m, :N_DEGRADED], cfg.loss_prob, cfg.noise_scale)
        else:
            mask = np.zeros((N_MOVEMENTS, N_DEGRADED), dtype=bool)
            for m in range(N_MOVEMENTS):
                for c in range(N_DEGRADED):
                    out, mask[m, c] = _transmit(self.rng, sv[m, c:c + 1], cfg.loss_prob, cfg.noise_scale)
                    sv[m, c] = out[0]
        sv[:, SV_PHASE] = obs.sv[:, SV_PHASE]
        return DegradedObservation(sv, mask)


def degrade(obs: Observation, cfg: ChannelConfig) -> DegradedObservation:
    """One-shot degradation with a channel freshly seeded from ``cfg.seed``."""
    return Channel(cfg).degrade(obs)


def loss_statistics(cfg: ChannelConfig, n_packets: int) -> tuple[float, float]:
    """Empirical (loss rate, surviving-noise std) over ``n_packets`` zero-payload packets."""
    if n_packets < 1:
        raise ValueError("n_packets must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    width = 1 if cfg.granularity is Granularity.PER_ELEMENT else N_DEGRADED
    zero = np.zeros(width)
    n_lost = 0
    survivors = []
    for _ in range(n_packets):
        out, lost = _transmit(rng, zero, cfg.loss_prob, cfg.noise_scale)
        if lost:
            n_lost += 1
        else:
            survivors.append(out)
    std = float(np.std(np.concatenate(survivors))) if survivors else 0.0
    return n_lost / n_packets, std
