"""Single-intersection point-queue microsimulator.

Vehicles arrive per movement as Poisson processes, traverse the approach at
free-flow speed, then wait in a FIFO queue at the stop line. Green movements
discharge at the saturation headway. The clock runs at 1 s resolution and the
controller acts once per slot.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericInputError
from .metrics import MetricsReport, Trip, summarize_trips

MOVEMENTS: tuple[str, ...] = ("E0_l", "E0_s", "E1_l", "E1_s", "E2_l", "E2_s", "E3_l", "E3_s")
N_MOVEMENTS = 8
N_PHASES = 4
N_FEATURES = 5

# phase index -> movement indices
PHASES: tuple[tuple[int, int], ...] = (
    (0, 2),  # E0_l, E1_l
    (1, 3),  # E0_s, E1_s
    (5, 7),  # E2_s, E3_s
    (4, 6),  # E2_l, E3_l
)
PHASE_OF_MOVEMENT: tuple[int, ...] = tuple(
    next(p for p, ms in enumerate(PHASES) if m in ms) for m in range(N_MOVEMENTS)
)

# observation columns
SV_SPEED, SV_OCCUPANCY, SV_JAM_M, SV_JAM_VEH, SV_PHASE = range(5)

DEFAULT_ARRIVAL_RATES: tuple[float, ...] = (0.035, 0.09, 0.035, 0.09, 0.03, 0.07, 0.03, 0.07)


def movement_index(name: str) -> int:
    return MOVEMENTS.index(name)


@dataclass
class SimConfig:
    slot_s: int = 5
    yellow_s: int = 3
    lane_length_m: float = 150.0
    free_flow_speed_mps: float = 13.89
    vehicle_footprint_m: float = 7.5
    saturation_headway_s: float = 2.0
    arrival_rate_vps: tuple[float, ...] = DEFAULT_ARRIVAL_RATES
    emergency_prob: float = 0.005
    episode_duration_s: int = 3600

    def __post_init__(self):
        self.arrival_rate_vps = tuple(float(r) for r in self.arrival_rate_vps)
        self.validate()

    def validate(self) -> None:
        if int(self.slot_s) != self.slot_s or self.slot_s <= 0:
            raise ConfigError("slot_s", f"must be a positive integer, got {self.slot_s}")
        if int(self.yellow_s) != self.yellow_s or self.yellow_s < 0:
            raise ConfigError("yellow_s", f"must be a non-negative integer, got {self.yellow_s}")
        if self.slot_s <= self.yellow_s:
            raise ConfigError("slot_s", f"must exceed yellow_s ({self.slot_s} <= {self.yellow_s})")
        if len(self.arrival_rate_vps) != N_MOVEMENTS:
            raise ConfigError("arrival_rate_vps", f"expected {N_MOVEMENTS} rates, got {len(self.arrival_rate_vps)}")
        for r in self.arrival_rate_vps:
            if not math.isfinite(r) or r < 0:
                raise ConfigError("arrival_rate_vps", f"rates must be finite and >= 0, got {r}")
        if not 0.0 <= self.emergency_prob <= 1.0:
            raise ConfigError("emergency_prob", f"must lie in [0, 1], got {self.emergency_prob}")
        if self.free_flow_speed_mps <= 0:
            raise ConfigError("free_flow_speed_mps", "must be positive")
        if self.vehicle_footprint_m <= 0:
            raise ConfigError("vehicle_footprint_m", "must be positive")
        if self.lane_length_m < self.vehicle_footprint_m:
            raise ConfigError("lane_length_m", "must be at least vehicle_footprint_m")
        if self.saturation_headway_s <= 0:
            raise ConfigError("saturation_headway_s", "must be positive")
        if self.episode_duration_s <= 0:
            raise ConfigError("episode_duration_s", "must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown SimConfig field")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "slot_s": self.slot_s,
            "yellow_s": self.yellow_s,
            "lane_length_m": self.lane_length_m,
            "free_flow_speed_mps": self.free_flow_speed_mps,
            "vehicle_footprint_m": self.vehicle_footprint_m,
            "saturation_headway_s": self.saturation_headway_s,
            "arrival_rate_vps": list(self.arrival_rate_vps),
            "emergency_prob": self.emergency_prob,
            "episode_duration_s": self.episode_duration_s,
        }


@dataclass(slots=True)
class Vehicle:
    id: int
    movement: int
    t_arrival: float
    t_join_queue: float
    is_emergency: bool = False
    t_depart: float | None = None
    waiting_s: float = 0.0
    # first whole second at which the vehicle sits in the queue
    join_second: int = 0

    def to_trip(self) -> Trip:
        return Trip(
            id=self.id,
            movement=self.movement,
            t_arrival=self.t_arrival,
            t_depart=self.t_depart,
            waiting_s=self.waiting_s,
            is_emergency=self.is_emergency,
        )


@dataclass
class Observation:
    """8x5 movement-state matrix (rows follow MOVEMENTS)."""

    sv: np.ndarray

    def flat(self) -> np.ndarray:
        return self.sv.reshape(-1)

    @property
    def queues(self) -> np.ndarray:
        return self.sv[:, SV_JAM_VEH]

    @property
    def current_phase(self) -> int:
        active = tuple(int(i) for i in np.flatnonzero(self.sv[:, SV_PHASE] > 0.5))
        return PHASES.index(active)


@dataclass
class SlotOutcome:
    reward: float
    true_observation: Observation
    emergency_present: tuple[bool, ...]
    vehicles_discharged: int
    waiting_accrued_s: float
    arrivals: int = 0
    departures: list[Trip] = field(default_factory=list)


class SimState:
    """Full world state of one intersection. Create with :func:`new_simulation`."""

    def __init__(self, config: SimConfig, seed: int):
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.clock_s = 0
        self.current_phase = 0
        self.yellow_remaining_s = 0
        self.queues: list[deque[Vehicle]] = [deque() for _ in range(N_MOVEMENTS)]
        self.approaching: list[deque[Vehicle]] = [deque() for _ in range(N_MOVEMENTS)]
        self.discharge_credit = [0.0] * N_MOVEMENTS
        self.departed: list[Vehicle] = []
        self.n_spawned = 0
        self._last_join = [0.0] * N_MOVEMENTS
        self._emergency_count = [0] * N_MOVEMENTS
        self._rates = np.asarray(config.arrival_rate_vps, dtype=float)

    # -- bookkeeping -------------------------------------------------------

    @property
    def n_in_flight(self) -> int:
        return sum(len(q) for q in self.queues) + sum(len(a) for a in self.approaching)

    @property
    def done(self) -> bool:
        return self.clock_s >= self.config.episode_duration_s

    def emergency_present(self) -> tuple[bool, ...]:
        return tuple(c > 0 for c in self._emergency_count)

    def spawn(self, movement: int, t: float, is_emergency: bool = False) -> Vehicle:
        """Insert a vehicle arriving on ``movement`` at time ``t``."""
        cfg = self.config
        jam_m = len(self.queues[movement]) * cfg.vehicle_footprint_m
        travel = max(0.0, cfg.lane_length_m - jam_m) / cfg.free_flow_speed_mps
        t_join = max(t + travel, self._last_join[movement])
        self._last_join[movement] = t_join
        v = Vehicle(
            id=self.n_spawned,
            movement=movement,
            t_arrival=float(t),
            t_join_queue=t_join,
            is_emergency=is_emergency,
            join_second=math.ceil(t_join),
        )
        self.n_spawned += 1
        if is_emergency:
            self._emergency_count[movement] += 1
        self.approaching[movement].append(v)
        return v

    def enqueue(self, movement: int, is_emergency: bool = False) -> Vehicle:
        """Place a vehicle directly in the stop-line queue at the current clock.

        Its arrival time is back-dated by the free-flow traversal of the lane.
        """
        t = float(self.clock_s)
        v = Vehicle(
            id=self.n_spawned,
            movement=movement,
            t_arrival=t - self.config.lane_length_m / self.config.free_flow_speed_mps,
            t_join_queue=t,
            is_emergency=is_emergency,
            join_second=self.clock_s,
        )
        self.n_spawned += 1
        if is_emergency:
            self._emergency_count[movement] += 1
        self._last_join[movement] = max(self._last_join[movement], t)
        self.queues[movement].append(v)
        return v

    # -- dynamics ----------------------------------------------------------

    def advance_slot(self, action: int) -> SlotOutcome:
        if not (isinstance(action, (int, np.integer)) and 0 <= action < N_PHASES):
            raise ValueError(f"action must be a phase index in 0..3, got {action!r}")
        action = int(action)
        cfg = self.config
        slot_s = cfg.slot_s
        if action != self.current_phase:
            self.yellow_remaining_s = cfg.yellow_s
            self.discharge_credit = [0.0] * N_MOVEMENTS
        self.current_phase = action
        green = PHASES[action]

        present = self.n_in_flight
        arrivals = self.rng.poisson(self._rates, size=(slot_s, N_MOVEMENTS))
        footprint = cfg.vehicle_footprint_m
        lane = cfg.lane_length_m
        headway_credit = 1.0 / cfg.saturation_headway_s
        occupancy_sum = np.zeros(N_MOVEMENTS)
        waiting = 0
        departures: list[Trip] = []
        n_arrivals = 0

        for s in range(slot_s):
            t = self.clock_s
            row = arrivals[s]
            for m in np.flatnonzero(row):
                for _ in range(int(row[m])):
                    # always draw so the arrival stream does not depend on emergency_prob being zero
                    emv = bool(self.rng.random() < cfg.emergency_prob)
                    self.spawn(int(m), t, emv)
                    n_arrivals += 1
            for m in range(N_MOVEMENTS):
                appr = self.approaching[m]
                while appr and appr[0].t_join_queue <= t:
                    self.queues[m].append(appr.popleft())
            if self.yellow_remaining_s > 0:
                self.yellow_remaining_s -= 1
            else:
                for m in green:
                    credit = self.discharge_credit[m] + headway_credit
                    n = int(credit)
                    self.discharge_credit[m] = credit - n
                    q = self.queues[m]
                    for _ in range(min(n, len(q))):
                        v = q.popleft()
                        v.t_depart = float(t)
                        v.waiting_s = float(t - v.join_second)
                        if v.is_emergency:
                            self._emergency_count[m] -= 1
                        self.departed.append(v)
                        departures.append(v.to_trip())
            for m in range(N_MOVEMENTS):
                nq = len(self.queues[m])
                waiting += nq
                occupancy_sum[m] += (nq + len(self.approaching[m])) * footprint / lane
            self.clock_s = t + 1

        present += n_arrivals
        occ_avg = np.minimum(occupancy_sum / slot_s, 1.0)
        reward = -waiting / max(1, present)
        return SlotOutcome(
            reward=float(reward) if waiting else 0.0,
            true_observation=self.observe(occ_avg),
            emergency_present=self.emergency_present(),
            vehicles_discharged=len(departures),
            waiting_accrued_s=float(waiting),
            arrivals=n_arrivals,
            departures=departures,
        )

    def observe(self, slot_occupancy_avg=None) -> Observation:
        cfg = self.config
        sv = np.zeros((N_MOVEMENTS, N_FEATURES))
        if slot_occupancy_avg is None:
            slot_occupancy_avg = np.zeros(N_MOVEMENTS)
        for m in range(N_MOVEMENTS):
            nq = len(self.queues[m])
            na = len(self.approaching[m])
            total = nq + na
            sv[m, SV_SPEED] = na * cfg.free_flow_speed_mps / total if total else -1.0
            sv[m, SV_OCCUPANCY] = slot_occupancy_avg[m]
            sv[m, SV_JAM_M] = nq * cfg.vehicle_footprint_m
            sv[m, SV_JAM_VEH] = nq
        for m in PHASES[self.current_phase]:
            sv[m, SV_PHASE] = 1.0
        return Observation(sv)

    def metrics_snapshot(self) -> MetricsReport:
        return summarize_trips(
            [v.to_trip() for v in self.departed],
            lane_length_m=self.config.lane_length_m,
            n_in_flight=self.n_in_flight,
        )


def new_simulation(config: SimConfig, seed: int) -> SimState:
    config.validate()
    return SimState(config, seed)


def check_finite(x: np.ndarray, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"non-finite {what}")
    return x
