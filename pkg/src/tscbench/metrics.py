"""Trip-level metrics: travel time, waiting time and speed, overall and for emergency vehicles."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from statistics import fmean


@dataclass(frozen=True)
class Trip:
    id: int
    movement: int
    t_arrival: float
    t_depart: float | None
    waiting_s: float
    is_emergency: bool

    @property
    def travel_time_s(self) -> float:
        return self.t_depart - self.t_arrival

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Trip:
        return cls(**d)


@dataclass
class MetricsReport:
    """Means are ``None`` when the underlying vehicle set is empty."""

    mean_travel_time_s: float | None = None
    mean_waiting_time_s: float | None = None
    mean_speed_mps: float | None = None
    emv_mean_travel_time_s: float | None = None
    emv_mean_waiting_time_s: float | None = None
    emv_mean_speed_mps: float | None = None
    n_completed: int = 0
    n_emv_completed: int = 0
    n_in_flight: int = 0
    per_seed: dict[int, MetricsReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_seed"] = {str(k): v.to_dict() for k, v in self.per_seed.items()}
        return d


def _means(trips: list[Trip], lane_length_m: float) -> tuple[float | None, float | None, float | None]:
    if not trips:
        return None, None, None
    travel = [t.travel_time_s for t in trips]
    return (
        fmean(travel),
        fmean(t.waiting_s for t in trips),
        fmean(lane_length_m / tt for tt in travel),
    )


def summarize_trips(trips: list[Trip], lane_length_m: float, n_in_flight: int = 0) -> MetricsReport:
    trips = sorted(trips, key=lambda t: t.id)
    emv = [t for t in trips if t.is_emergency]
    travel, wait, speed = _means(trips, lane_length_m)
    e_travel, e_wait, e_speed = _means(emv, lane_length_m)
    return MetricsReport(
        mean_travel_time_s=travel,
        mean_waiting_time_s=wait,
        mean_speed_mps=speed,
        emv_mean_travel_time_s=e_travel,
        emv_mean_waiting_time_s=e_wait,
        emv_mean_speed_mps=e_speed,
        n_completed=len(trips),
        n_emv_completed=len(emv),
        n_in_flight=n_in_flight,
    )


def pool_reports(trips_by_seed: dict[int, list[Trip]], lane_length_m: float,
                 in_flight_by_seed: dict[int, int] | None = None) -> MetricsReport:
    """Vehicle-weighted aggregate over seeds, with the per-seed breakdown attached."""
    in_flight_by_seed = in_flight_by_seed or {}
    all_trips: list[Trip] = []
    per_seed = {}
    for seed, trips in trips_by_seed.items():
        per_seed[seed] = summarize_trips(trips, lane_length_m, in_flight_by_seed.get(seed, 0))
        all_trips.extend(trips)
    report = summarize_trips([], lane_length_m)
    if all_trips:
        emv = [t for t in all_trips if t.is_emergency]
        report.mean_travel_time_s, report.mean_waiting_time_s, report.mean_speed_mps = _means(all_trips, lane_length_m)
        report.emv_mean_travel_time_s, report.emv_mean_waiting_time_s, report.emv_mean_speed_mps = _means(emv, lane_length_m)
        report.n_completed = len(all_trips)
        report.n_emv_completed = len(emv)
    report.n_in_flight = sum(in_flight_by_seed.values())
    report.per_seed = per_seed
    return report
