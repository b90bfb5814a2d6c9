"""Experiment orchestration: episode runner, scenario configs, traces, comparisons and replay."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .agent.checkpoint import load_checkpoint
from .agent.nets import NetworkWeights, greedy_action
from .baselines import (
    FixedTimeConfig,
    SotlConfig,
    SotlState,
    fixed_time_policy,
    longest_queue_policy,
    sotl_policy,
)
from .channel import N_DEGRADED, Channel, ChannelConfig, DegradedObservation
from .errors import ConfigError, TraceParseError
from .metrics import MetricsReport, Trip, pool_reports, summarize_trips
from .prompts import PromptLevel
from .refiner import (
    Backend,
    HttpBackend,
    HttpBackendConfig,
    RefinerConfig,
    ScriptedBackend,
    refine,
)
from .sim import (
    DEFAULT_ARRIVAL_RATES,
    MOVEMENTS,
    N_MOVEMENTS,
    PHASES,
    SimConfig,
    movement_index,
    new_simulation,
)

log = logging.getLogger(__name__)

POLICIES = ("fixed", "sotl", "longest-queue", "rl", "illm", "constant")

CSV_COLUMNS = [
    "scenario", "policy", "seed", "n_vehicles", "mean_travel_s", "mean_wait_s", "mean_speed_mps",
    "emv_n", "emv_travel_s", "emv_wait_s", "emv_speed_mps",
]


def demand_profile(name: str) -> tuple[float, ...]:
    base = np.asarray(DEFAULT_ARRIVAL_RATES)
    if name == "default":
        rates = base
    elif name == "light":
        rates = base * 0.5
    elif name == "heavy":
        rates = base * 1.25
    elif name == "zero":
        rates = np.zeros(N_MOVEMENTS)
    elif name == "phase1":
        # all demand on E0_s / E1_s
        rates = np.zeros(N_MOVEMENTS)
        rates[list(PHASES[1])] = 0.2
    else:
        raise ConfigError("demand", f"unknown demand profile {name!r}")
    return tuple(float(r) for r in rates)


@dataclass
class PolicySpec:
    name: str = "rl"
    # for "illm": the proposing policy, normally "rl"
    base: str = "rl"
    backend: str = "scripted"
    prompt_level: int = 3
    max_attempts: int = 3
    constant_phase: int = 0
    fixed: FixedTimeConfig = field(default_factory=FixedTimeConfig)
    sotl: SotlConfig = field(default_factory=SotlConfig)

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ConfigError("policy", f"unknown policy {self.name!r}; choose from {', '.join(POLICIES)}")
        if self.name == "illm" and (self.base == "illm" or self.base not in POLICIES):
            raise ConfigError("base", f"invalid proposing policy {self.base!r}")
        if isinstance(self.fixed, dict):
            self.fixed = FixedTimeConfig(**self.fixed)
        if isinstance(self.sotl, dict):
            self.sotl = SotlConfig(**self.sotl)
        PromptLevel(self.prompt_level)

    @property
    def label(self) -> str:
        if self.name == "illm":
            return f"illm[{self.base},{self.backend},L{int(self.prompt_level)},K{self.max_attempts}]"
        if self.name == "constant":
            return f"constant[{self.constant_phase}]"
        return self.name

    @property
    def needs_weights(self) -> bool:
        return self.name == "rl" or (self.name == "illm" and self.base == "rl")

    @classmethod
    def from_dict(cls, d: dict | str) -> PolicySpec:
        if isinstance(d, str):
            return cls(name=d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown policy field")
        return cls(**d)


@dataclass
class ScenarioConfig:
    name: str = "normal"
    comm: str = "normal"  # or "degraded"
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    emergency: bool = False
    demand: str = "default"
    sim: dict = field(default_factory=dict)
    episodes: int = 1
    seeds: list[int] | None = None
    policy: PolicySpec = field(default_factory=PolicySpec)
    case: str | None = None

    def __post_init__(self):
        if self.comm not in ("normal", "degraded"):
            raise ConfigError("comm", f"must be 'normal' or 'degraded', got {self.comm!r}")
        if isinstance(self.channel, dict):
            self.channel = ChannelConfig.from_dict(self.channel)
        if isinstance(self.policy, (dict, str)):
            self.policy = PolicySpec.from_dict(self.policy)
        if self.episodes < 1:
            raise ConfigError("episodes", "must be >= 1")
        if self.seeds is not None:
            self.seeds = [int(s) for s in self.seeds]
            if len(set(self.seeds)) != len(self.seeds):
                raise ConfigError("seeds", "seeds must be distinct")
        if self.case is not None and self.case not in CASES:
            raise ConfigError("case", f"unknown case {self.case!r}")
        demand_profile(self.demand)

    def seed_list(self, base_seed: int = 0) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [base_seed + i for i in range(self.episodes)]

    def sim_config(self) -> SimConfig:
        d = {"arrival_rate_vps": demand_profile(self.demand)}
        if not self.emergency:
            d["emergency_prob"] = 0.0
        d.update(self.sim)
        return SimConfig.from_dict(d)

    def with_policy(self, policy: PolicySpec) -> ScenarioConfig:
        return dataclasses.replace(self, policy=policy)

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown scenario field")
        return cls(**d)


# -- canned case scenarios ---------------------------------------------------

@dataclass(frozen=True)
class CaseSetup:
    description: str
    # (movement, count, index of an emergency vehicle within the queue or None)
    queued: tuple[tuple[str, int, int | None], ...]
    proposal: int
    forced_loss: tuple[str, ...] = ()
    slots: int = 2


CASES: dict[str, CaseSetup] = {
    "case1": CaseSetup(
        description="normal traffic; the proposal is not the longest queue but is reasonable",
        queued=(("E0_l", 2, None), ("E0_s", 6, None), ("E1_l", 1, None), ("E1_s", 5, None),
                ("E2_l", 1, None), ("E2_s", 4, None), ("E3_l", 2, None), ("E3_s", 8, None)),
        proposal=1,
    ),
    "case2": CaseSetup(
        description="emergency vehicle on E3_s while the proposal serves the heavy left turns",
        queued=(("E0_l", 8, None), ("E1_l", 7, None), ("E0_s", 3, None), ("E1_s", 2, None),
                ("E2_s", 2, None), ("E3_s", 3, 2), ("E2_l", 1, None), ("E3_l", 1, None)),
        proposal=0,
    ),
    "case3": CaseSetup(
        description="E0 packets lost; 21 vehicles queued on E3_s",
        queued=(("E0_l", 1, None), ("E0_s", 9, None), ("E1_l", 4, None), ("E1_s", 3, None),
                ("E2_l", 2, None), ("E2_s", 5, None), ("E3_l", 2, None), ("E3_s", 21, None)),
        proposal=0,
        forced_loss=("E0_l", "E0_s"),
    ),
}


def case_scenario(name: str, backend: str = "scripted", prompt_level: int = 3) -> ScenarioConfig:
    setup = CASES[name]
    return ScenarioConfig(
        name=name,
        comm="normal",
        emergency=False,
        demand="zero",
        sim={"episode_duration_s": setup.slots * SimConfig().slot_s},
        seeds=[0],
        policy=PolicySpec(name="illm", base="constant", constant_phase=setup.proposal,
                          backend=backend, prompt_level=prompt_level),
        case=name,
    )


def _apply_case(sim, setup: CaseSetup) -> None:
    for mname, count, emv_index in setup.queued:
        m = movement_index(mname)
        for i in range(count):
            sim.enqueue(m, is_emergency=(i == emv_index))


def _force_loss(deg: DegradedObservation, movements: Iterable[str]) -> DegradedObservation:
    sv = deg.sv.copy()
    mask = deg.loss_mask.copy()
    for name in movements:
        m = movement_index(name)
        sv[m, :N_DEGRADED] = 0.0
        mask[m] = True
    return DegradedObservation(sv, mask)


# -- episode runner ----------------------------------------------------------

@dataclass
class EpisodeResult:
    report: MetricsReport
    trace: list[dict]
    trips: list[Trip]
    n_in_flight: int


class _Controller:
    def __init__(self, spec: PolicySpec, weights: NetworkWeights | None, slot_s: int):
        self.spec = spec
        self.weights = weights
        self.slot_s = slot_s
        self.sotl_state = SotlState()

    def propose(self, name: str, deg: DegradedObservation, clock_s: int) -> int:
        if name == "fixed":
            return fixed_time_policy(clock_s, self.spec.fixed)
        if name == "sotl":
            return sotl_policy(deg, self.sotl_state, self.spec.sotl, self.slot_s)
        if name == "longest-queue":
            return longest_queue_policy(deg)
        if name == "rl":
            return greedy_action(self.weights, deg.flat())
        if name == "constant":
            return self.spec.constant_phase
        raise ConfigError("policy", f"cannot propose with {name!r}")


def make_backend(spec: PolicySpec, http_cfg: HttpBackendConfig | None = None) -> Backend:
    if spec.backend == "scripted":
        return ScriptedBackend()
    if spec.backend == "http":
        return HttpBackend(http_cfg or HttpBackendConfig())
    raise ConfigError("backend", f"unknown backend {spec.backend!r}")


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=float).tobytes()).hexdigest()[:16]


def _as_list(a: np.ndarray) -> list:
    return [[float(x) for x in row] for row in a] if a.ndim == 2 else [bool(x) for x in a]


def run_episode(
    scenario: ScenarioConfig,
    seed: int,
    weights: NetworkWeights | None = None,
    backend: Backend | None = None,
    http_cfg: HttpBackendConfig | None = None,
    verbose: bool = False,
) -> EpisodeResult:
    """Run one episode of ``scenario`` with its policy stack.

    Per slot: observe, degrade (if configured), propose, refine (illm only),
    then advance the simulator with the executed action.
    """
    spec = scenario.policy
    if spec.needs_weights and weights is None:
        raise ConfigError("checkpoint", f"policy {spec.label} requires a trained checkpoint")
    refiner_cfg = None
    if spec.name == "illm":
        refiner_cfg = RefinerConfig(max_attempts=spec.max_attempts, backend=spec.backend,
                                    prompt_level=spec.prompt_level, verbose=verbose)
        if backend is None:
            backend = make_backend(spec, http_cfg)
    base = spec.base if spec.name == "illm" else spec.name

    sim_cfg = scenario.sim_config()
    sim = new_simulation(sim_cfg, seed)
    setup = CASES.get(scenario.case) if scenario.case else None
    if setup is not None:
        _apply_case(sim, setup)
    channel = None
    if scenario.comm == "degraded":
        ch = scenario.channel
        channel = Channel(dataclasses.replace(ch, seed=ch.seed * 1_000_003 + seed))
    controller = _Controller(spec, weights, sim_cfg.slot_s)

    n_slots = -(-sim_cfg.episode_duration_s // sim_cfg.slot_s)
    occ0 = np.array([
        min(1.0, (len(sim.queues[m]) + len(sim.approaching[m])) * sim_cfg.vehicle_footprint_m / sim_cfg.lane_length_m)
        for m in range(N_MOVEMENTS)
    ])
    obs = sim.observe(occ0)
    emergency = sim.emergency_present()
    trace: list[dict] = []
    trips: list[Trip] = []
    for slot in range(n_slots):
        deg = channel.degrade(obs) if channel is not None else DegradedObservation.clean(obs)
        if setup is not None and setup.forced_loss:
            deg = _force_loss(deg, setup.forced_loss)
        proposal = controller.propose(base, deg, sim.clock_s)
        executed = proposal
        refinement = None
        if refiner_cfg is not None:
            executed, refinement = refine(deg, proposal, emergency, refiner_cfg, backend, slot)
        clock = sim.clock_s
        out = sim.advance_slot(executed)
        trips.extend(out.departures)
        trace.append({
            "scenario": scenario.name,
            "policy": spec.label,
            "seed": seed,
            "slot": slot,
            "clock_s": clock,
            "true_obs_digest": _digest(obs.sv),
            "degraded_obs": _as_list(deg.sv),
            "loss_mask": deg.loss_mask.tolist(),
            "emergency": list(emergency),
            "rl_action": int(proposal),
            "refinement": refinement.to_dict() if refinement else None,
            "executed_action": int(executed),
            "reward": out.reward,
            "arrivals": out.arrivals,
            "departures": [t.to_dict() for t in out.departures],
        })
        obs = out.true_observation
        emergency = out.emergency_present
    report = sim.metrics_snapshot()
    return EpisodeResult(report, trace, trips, sim.n_in_flight)


def report_from_trace(records: list[dict], lane_length_m: float) -> MetricsReport:
    trips = [Trip.from_dict(d) for r in records for d in r["departures"]]
    return summarize_trips(trips, lane_length_m)


@dataclass
class RunResult:
    scenario: ScenarioConfig
    report: MetricsReport
    episodes: dict[int, EpisodeResult]


def run_scenario(scenario: ScenarioConfig, seeds: list[int], weights=None, backend=None,
                 http_cfg=None, verbose=False) -> RunResult:
    episodes = {s: run_episode(scenario, s, weights, backend, http_cfg, verbose) for s in seeds}
    report = pool_reports(
        {s: e.trips for s, e in episodes.items()},
        scenario.sim_config().lane_length_m,
        {s: e.n_in_flight for s, e in episodes.items()},
    )
    return RunResult(scenario, report, episodes)


# -- output formats ----------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_row(scenario: str, policy: str, seed, report: MetricsReport) -> dict:
    return {
        "scenario": scenario,
        "policy": policy,
        "seed": seed,
        "n_vehicles": report.n_completed,
        "mean_travel_s": report.mean_travel_time_s,
        "mean_wait_s": report.mean_waiting_time_s,
        "mean_speed_mps": report.mean_speed_mps,
        "emv_n": report.n_emv_completed,
        "emv_travel_s": report.emv_mean_travel_time_s,
        "emv_wait_s": report.emv_mean_waiting_time_s,
        "emv_speed_mps": report.emv_mean_speed_mps,
    }


def write_csv(rows: list[dict], path, columns: list[str] | None = None) -> str:
    columns = columns or CSV_COLUMNS
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row.get(k)) for k in columns})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def write_trace(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


REQUIRED_TRACE_KEYS = ("slot", "rl_action", "executed_action", "reward", "departures")


def read_trace(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TraceParseError(1, "empty trace")
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            raise TraceParseError(i, "blank line")
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(i, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(rec, dict):
            raise TraceParseError(i, "record is not a JSON object")
        missing = [k for k in REQUIRED_TRACE_KEYS if k not in rec]
        if missing:
            raise TraceParseError(i, f"missing keys {missing}")
        records.append(rec)
    return records


def replay(path, verbose: bool = False) -> str:
    """Human-readable per-slot report of a trace file."""
    records = read_trace(path)
    out = []
    episode = None
    for rec in records:
        key = (rec.get("scenario"), rec.get("policy"), rec.get("seed"))
        if key != episode:
            episode = key
            out.append(f"== scenario={key[0]} policy={key[1]} seed={key[2]}")
        ref = rec.get("refinement")
        tag = ""
        if ref:
            if ref["overridden"]:
                tag = f"  OVERRIDE {ref['rl_action']} -> {ref['executed_action']}"
            elif ref["fallback_used"]:
                tag = "  FALLBACK"
            else:
                tag = "  endorsed"
        emv = [MOVEMENTS[m] for m, f in enumerate(rec.get("emergency", [])) if f]
        emv_s = f"  emv={','.join(emv)}" if emv else ""
        out.append(
            f"slot {rec['slot']:4d}  t={rec.get('clock_s', '?')}s  proposed={rec['rl_action']} "
            f"executed={rec['executed_action']}  reward={rec['reward']:.3f}  "
            f"departures={len(rec['departures'])}{emv_s}{tag}"
        )
        if verbose and ref:
            for i, att in enumerate(ref["attempts"], start=1):
                out.append(f"    attempt {i}: outcome={att['outcome']} prompt={att['prompt_hash']}")
                if att.get("prompt"):
                    out.append("      prompt:")
                    out.extend("        " + ln for ln in att["prompt"].splitlines())
                if att.get("response") is not None:
                    out.append(f"      response: {att['response']}")
    out.append(f"{len(records)} slots")
    return "\n".join(out) + "\n"


# -- comparison and ablation -------------------------------------------------

@dataclass
class CompareConfig:
    scenarios: list[ScenarioConfig]
    policies: list[PolicySpec]
    seeds: list[int]

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "seeds must be distinct")


def compare(cfg: CompareConfig, weights=None, backend_for=None, http_cfg=None) -> list[dict]:
    """One aggregated row per (scenario, policy) cell over the shared seeds.

    A failing cell yields a row with ``status`` set to the error; other cells still run.
    ``backend_for(policy)`` may supply a custom backend per cell.
    """
    rows = []
    seed_label = ";".join(str(s) for s in cfg.seeds)
    for scenario in cfg.scenarios:
        for policy in cfg.policies:
            sc = scenario.with_policy(policy)
            try:
                backend = backend_for(policy) if backend_for else None
                res = run_scenario(sc, cfg.seeds, weights, backend, http_cfg)
            except Exception as exc:  # isolate cells
                log.warning("cell %s/%s failed: %s", scenario.name, policy.label, exc)
                row = {k: None for k in CSV_COLUMNS}
                row.update(scenario=scenario.name, policy=policy.label, seed=seed_label,
                           status=f"failed: {type(exc).__name__}: {exc}")
                rows.append(row)
                continue
            row = metrics_row(scenario.name, policy.label, seed_label, res.report)
            row["status"] = "ok"
            rows.append(row)
    return rows


ABLATION_COLUMNS = ["level", "backend", "n_vehicles", "mean_wait_s", "wait_ratio",
                    "emv_n", "emv_wait_s", "emv_wait_ratio", "status"]


def ablate_prompts(levels: Iterable[int], scenario: ScenarioConfig, seeds: list[int], weights=None,
                   backend: Backend | None = None, backend_name: str = "scripted", http_cfg=None) -> list[dict]:
    """Run the refinement stack at each prompt level over shared seeds.

    Ratios are relative to the Level-1 result, which is always computed.
    An injected ``backend`` object overrides ``backend_name``, which then only labels the rows.
    """
    levels = sorted({int(lv) for lv in levels})
    for lv in levels:
        PromptLevel(lv)
    results = {}
    for lv in sorted(set(levels) | {1}):
        policy = PolicySpec(name="illm", base=scenario.policy.base if scenario.policy.name == "illm" else "rl",
                            backend=backend_name if backend is None else scenario.policy.backend,
                            prompt_level=lv,
                            max_attempts=scenario.policy.max_attempts)
        try:
            results[lv] = run_scenario(scenario.with_policy(policy), seeds, weights, backend, http_cfg).report
        except Exception as exc:
            log.warning("ablation level %d failed: %s", lv, exc)
            results[lv] = exc

    def ratio(a, b):
        if a is None or b is None:
            return None
        if b == 0:
            return 1.0 if a == 0 else None
        return a / b

    ref = results[1]
    rows = []
    for lv in levels:
        r = results[lv]
        if isinstance(r, Exception):
            rows.append({"level": lv, "backend": backend_name, "status": f"failed: {r}"})
            continue
        ok_ref = not isinstance(ref, Exception)
        rows.append({
            "level": lv,
            "backend": backend_name,
            "n_vehicles": r.n_completed,
            "mean_wait_s": r.mean_waiting_time_s,
            "wait_ratio": ratio(r.mean_waiting_time_s, ref.mean_waiting_time_s) if ok_ref else None,
            "emv_n": r.n_emv_completed,
            "emv_wait_s": r.emv_mean_waiting_time_s,
            "emv_wait_ratio": ratio(r.emv_mean_waiting_time_s, ref.emv_mean_waiting_time_s) if ok_ref else None,
            "status": "ok",
        })
    return rows


# -- config files ------------------------------------------------------------

@dataclass
class WorkbenchConfig:
    sim: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    scenarios: list[ScenarioConfig] = field(default_factory=list)
    policies: list[PolicySpec] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    checkpoint: str | None = None
    http: HttpBackendConfig = field(default_factory=HttpBackendConfig)


def parse_config(doc: dict[str, Any]) -> WorkbenchConfig:
    known = set(WorkbenchConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level config key")
    sim = dict(doc.get("sim", {}))
    SimConfig.from_dict(sim)  # validate early

    def scen(d):
        d = dict(d)
        d["sim"] = {**sim, **d.get("sim", {})}
        return ScenarioConfig.from_dict(d)

    http = doc.get("http", {})
    return WorkbenchConfig(
        sim=sim,
        ppo=dict(doc.get("ppo", {})),
        scenario=scen(doc.get("scenario", {})),
        scenarios=[scen(d) for d in doc.get("scenarios", [])],
        policies=[PolicySpec.from_dict(p) for p in doc.get("policies", [])],
        seeds=[int(s) for s in doc.get("seeds", [0, 1, 2])],
        checkpoint=doc.get("checkpoint"),
        http=HttpBackendConfig(**http),
    )


def load_config(path) -> WorkbenchConfig:
    if path is None:
        return WorkbenchConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return parse_config(doc)


def load_weights(path) -> NetworkWeights:
    if path is None:
        raise ConfigError("checkpoint", "no checkpoint given")
    if not Path(path).exists():
        raise ConfigError("checkpoint", f"checkpoint {path} does not exist")
    return load_checkpoint(path)
