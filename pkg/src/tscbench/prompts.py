"""Scenario-to-text encoding and LLM response parsing.

A prompt has up to five parts rendered in a fixed order: role, hints,
scenario, logic, format. The detail level selects which parts are included.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import lru_cache
from importlib import resources
from string import Template

import numpy as np

from .channel import DegradedObservation
from .sim import MOVEMENTS, N_MOVEMENTS, N_PHASES, PHASES, SV_JAM_VEH, SV_OCCUPANCY, SV_PHASE, SV_SPEED

TEMPLATE_VERSION = "v1"
MISSING = "-1 (data missing)"
PART_ORDER = ("role", "hints", "scenario", "logic", "format")


class PromptLevel(IntEnum):
    BASIC = 1
    LOGIC = 2
    FULL = 3

    @property
    def parts(self) -> tuple[str, ...]:
        included = {"role", "scenario", "format"}
        if self >= PromptLevel.LOGIC:
            included.add("logic")
        if self >= PromptLevel.FULL:
            included.add("hints")
        return tuple(p for p in PART_ORDER if p in included)


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    text = resources.files("tscbench").joinpath("templates", version, f"{name}.txt").read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if not ln.startswith("##")]
    return "\n".join(lines).strip("\n")


@dataclass(frozen=True)
class MovementView:
    name: str
    occupancy: float | None  # fraction, None if lost
    queue: int | None
    speed: float | None
    emergency: bool


@dataclass(frozen=True)
class ScenarioView:
    """Structured summary of what the prompt describes; consumed by the scripted oracle."""

    movements: tuple[MovementView, ...]
    rl_action: int
    current_phase: int

    def lost(self, m: int) -> bool:
        return self.movements[m].queue is None

    def to_dict(self) -> dict:
        return {
            "rl_action": self.rl_action,
            "current_phase": self.current_phase,
            "movements": [vars(mv) for mv in self.movements],
        }


@dataclass
class PromptBundle:
    role: str
    scenario: str
    format: str
    level: PromptLevel
    view: ScenarioView
    hints: str | None = None
    logic: str | None = None
    rendered: str = field(init=False)

    def __post_init__(self):
        self.rendered = "\n\n".join(getattr(self, p) for p in self.level.parts)

    @property
    def user_text(self) -> str:
        """Everything except the role part (the chat user message)."""
        return "\n\n".join(getattr(self, p) for p in self.level.parts if p != "role")


@dataclass(frozen=True)
class LlmDecision:
    decision: int
    analysis: str = ""
    explanation: str = ""

    def to_json(self) -> str:
        return json.dumps({"analysis": self.analysis, "decision": self.decision, "explanation": self.explanation})


class ParseErrorKind(str, Enum):
    NO_JSON = "NoJson"
    BAD_DECISION = "BadDecision"
    OUT_OF_RANGE = "OutOfRange"


class ParseError(ValueError):
    def __init__(self, kind: ParseErrorKind, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)


def _fmt_num(x: float, digits: int = 1) -> str:
    s = f"{x:.{digits}f}"
    return "0.0" if s == "-0.0" else s


def build_view(deg_obs: DegradedObservation, rl_action: int, emergency_flags) -> ScenarioView:
    lost = deg_obs.element_lost()
    sv = deg_obs.sv
    movements = []
    for m in range(N_MOVEMENTS):
        occ = None if lost[m, SV_OCCUPANCY] else float(sv[m, SV_OCCUPANCY])
        queue = None if lost[m, SV_JAM_VEH] else max(0, int(round(float(sv[m, SV_JAM_VEH]))))
        speed = None if lost[m, SV_SPEED] else float(sv[m, SV_SPEED])
        movements.append(MovementView(MOVEMENTS[m], occ, queue, speed, bool(emergency_flags[m])))
    active = tuple(int(i) for i in np.flatnonzero(sv[:, SV_PHASE] > 0.5))
    current = PHASES.index(active) if active in PHASES else -1
    return ScenarioView(tuple(movements), int(rl_action), current)


def _movement_line(mv: MovementView) -> str:
    occ = MISSING if mv.occupancy is None else f"{_fmt_num(mv.occupancy * 100.0)}%"
    queue = MISSING if mv.queue is None else f"{mv.queue} waiting vehicles"
    if mv.speed is None:
        speed = MISSING
    elif mv.speed < 0:
        speed = "no vehicles"
    else:
        speed = f"{_fmt_num(mv.speed)} m/s"
    return f"- {mv.name}: occupancy {occ}; queue {queue}; average speed {speed}"


def _phase_movements(p: int) -> str:
    return " and ".join(MOVEMENTS[m] for m in PHASES[p])


def render_scenario(view: ScenarioView) -> str:
    phase_table = "\n".join(f"- Phase {p}: {_phase_movements(p)}" for p in range(N_PHASES))
    emv = [mv.name for mv in view.movements if mv.emergency]
    if emv:
        emergency_lines = "\n".join(f"- EMERGENCY VEHICLE present on {name}" for name in emv)
    else:
        emergency_lines = "- none reported"
    current = f"{view.current_phase}" if view.current_phase >= 0 else "unknown"
    return Template(load_template("scenario")).substitute(
        phase_table=phase_table,
        current_phase=current,
        movement_lines="\n".join(_movement_line(mv) for mv in view.movements),
        emergency_lines=emergency_lines,
        rl_action=view.rl_action,
        rl_movements=_phase_movements(view.rl_action),
    )


def encode_scenario(deg_obs: DegradedObservation, rl_action: int, emergency_flags,
                    level: PromptLevel | int = PromptLevel.FULL) -> PromptBundle:
    level = PromptLevel(level)
    view = build_view(deg_obs, rl_action, emergency_flags)
    return PromptBundle(
        role=load_template("role"),
        hints=load_template("hints") if "hints" in level.parts else None,
        scenario=render_scenario(view),
        logic=load_template("logic") if "logic" in level.parts else None,
        format=load_template("format"),
        level=level,
        view=view,
    )


_decoder = json.JSONDecoder()


def _first_object(text: str) -> dict | None:
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = _decoder.raw_decode(text, pos)
        except (ValueError, RecursionError):
            obj = None
        if isinstance(obj, dict):
            return obj
        pos = text.find("{", pos + 1)
    return None


def parse_response(text: str | bytes) -> LlmDecision:
    """Extract the first JSON object in ``text`` and validate its decision.

    Raises :class:`ParseError` with kind NoJson, BadDecision or OutOfRange.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        raise ParseError(ParseErrorKind.NO_JSON, f"expected text, got {type(text).__name__}")
    obj = _first_object(text)
    if obj is None:
        raise ParseError(ParseErrorKind.NO_JSON)
    decision = obj.get("decision")
    if isinstance(decision, bool) or not isinstance(decision, int):
        raise ParseError(ParseErrorKind.BAD_DECISION, f"decision={decision!r}")
    if not 0 <= decision < N_PHASES:
        raise ParseError(ParseErrorKind.OUT_OF_RANGE, f"decision={decision}")
    analysis = obj.get("analysis", "")
    explanation = obj.get("explanation", "")
    return LlmDecision(
        decision=decision,
        analysis=analysis if isinstance(analysis, str) else json.dumps(analysis),
        explanation=explanation if isinstance(explanation, str) else json.dumps(explanation),
    )
