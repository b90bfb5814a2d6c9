"""LLM refinement of RL decisions with bounded retries and RL fallback.

Backends take a :class:`PromptBundle` and return raw response text. The
scripted backend answers from the bundle's structured view using fixed rules;
the HTTP backend calls a chat-completions endpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Protocol
from urllib.parse import urlparse

import httpx

from .channel import DegradedObservation
from .errors import (
    BackendConfigError,
    BackendError,
    BackendStatusError,
    BackendTimeoutError,
    BackendTransportError,
    ConfigError,
    MalformedResponseError,
)
from .prompts import (
    LlmDecision,
    ParseError,
    PromptBundle,
    PromptLevel,
    ScenarioView,
    encode_scenario,
    parse_response,
)
from .sim import MOVEMENTS, N_PHASES, PHASE_OF_MOVEMENT, PHASES

log = logging.getLogger(__name__)

API_KEY_ENV = "ILLM_TSC_API_KEY"


class Backend(Protocol):
    def complete(self, bundle: PromptBundle) -> str: ...


@dataclass
class RefinerConfig:
    max_attempts: int = 3
    backend: str = "scripted"
    prompt_level: PromptLevel = PromptLevel.FULL
    # keep full prompt text in the trace
    verbose: bool = False

    def __post_init__(self):
        self.prompt_level = PromptLevel(self.prompt_level)
        if self.max_attempts < 1:
            raise ConfigError("max_attempts", "must be >= 1")
        if self.backend not in ("scripted", "http"):
            raise ConfigError("backend", f"unknown backend {self.backend!r}")


@dataclass
class Attempt:
    prompt_hash: str
    response: str | None
    outcome: str  # "ok", a ParseError kind, or "transport: <message>"
    prompt: str | None = None

    def to_dict(self) -> dict:
        d = {"prompt_hash": self.prompt_hash, "response": self.response, "outcome": self.outcome}
        if self.prompt is not None:
            d["prompt"] = self.prompt
        return d


@dataclass
class RefinementTrace:
    slot: int
    rl_action: int
    executed_action: int
    attempts: list[Attempt] = field(default_factory=list)
    overridden: bool = False
    fallback_used: bool = False
    decision: LlmDecision | None = None

    def to_dict(self) -> dict:
        return {
            "slot": self.slot,
            "rl_action": self.rl_action,
            "executed_action": self.executed_action,
            "overridden": self.overridden,
            "fallback_used": self.fallback_used,
            "attempts": [a.to_dict() for a in self.attempts],
            "explanation": self.decision.explanation if self.decision else None,
        }


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def refine(deg_obs: DegradedObservation, rl_action: int, emergency_flags, cfg: RefinerConfig,
           backend: Backend, slot: int = 0) -> tuple[int, RefinementTrace]:
    trace = RefinementTrace(slot=slot, rl_action=int(rl_action), executed_action=int(rl_action))
    for _ in range(cfg.max_attempts):
        bundle = encode_scenario(deg_obs, rl_action, emergency_flags, cfg.prompt_level)
        h = prompt_hash(bundle.rendered)
        keep = bundle.rendered if cfg.verbose else None
        try:
            raw = backend.complete(bundle)
        except BackendError as exc:
            log.info("slot %d: backend failure: %s", slot, exc)
            trace.attempts.append(Attempt(h, None, f"transport: {exc}", keep))
            continue
        try:
            decision = parse_response(raw)
        except ParseError as exc:
            trace.attempts.append(Attempt(h, raw, exc.kind.value, keep))
            continue
        trace.attempts.append(Attempt(h, raw, "ok", keep))
        trace.decision = decision
        trace.executed_action = decision.decision
        trace.overridden = decision.decision != trace.rl_action
        return trace.executed_action, trace
    trace.fallback_used = True
    return trace.executed_action, trace


# -- scripted oracle ---------------------------------------------------------

def _reliable_queue(view: ScenarioView, p: int) -> int:
    """Total queue over the phase's movements whose data arrived."""
    return sum(view.movements[m].queue for m in PHASES[p] if not view.lost(m))


def oracle_decision(view: ScenarioView) -> tuple[int, str, str]:
    """Returns (phase, analysis, explanation) from three ordered rules.

    1. An emergency vehicle pulls the green to its phase (lowest index on ties).
    2. If the proposal covers lost data, or its reliable queue is below half
       the largest reliable phase queue, pick the phase with the largest
       reliable queue. Phases with no reliable movement are not candidates.
    3. Otherwise endorse the proposal.
    """
    emv = [m for m, mv in enumerate(view.movements) if mv.emergency]
    if emv:
        phase = min(PHASE_OF_MOVEMENT[m] for m in emv)
        names = ", ".join(MOVEMENTS[m] for m in emv)
        return (
            phase,
            f"Emergency vehicle present on {names}; the proposed Phase {view.rl_action} "
            f"{'serves' if phase == view.rl_action else 'does not serve'} it.",
            f"Emergency vehicles take priority, so Phase {phase} is activated.",
        )
    rl = view.rl_action
    candidates = [p for p in range(N_PHASES) if any(not view.lost(m) for m in PHASES[p])]
    if candidates:
        queues = {p: _reliable_queue(view, p) for p in candidates}
        best = max(candidates, key=lambda p: (queues[p], -p))
        rl_queue = _reliable_queue(view, rl)
        if any(view.lost(m) for m in PHASES[rl]):
            lost = ", ".join(MOVEMENTS[m] for m in PHASES[rl] if view.lost(m))
            return (
                best,
                f"Data for {lost} (proposed Phase {rl}) was lost in transmission and shows as -1; "
                "the proposal rests on unreliable information.",
                f"Phase {best} has the largest reliable queue ({queues[best]} vehicles).",
            )
        if rl_queue < 0.5 * queues[best]:
            return (
                best,
                f"The proposed Phase {rl} serves only {rl_queue} waiting vehicles "
                f"while Phase {best} has {queues[best]}.",
                f"Phase {best} relieves the heaviest congestion.",
            )
    return (
        rl,
        f"No emergency vehicles or data problems; the proposed Phase {rl} is reasonable.",
        f"Keeping the proposed Phase {rl}.",
    )


def scripted_oracle(view: ScenarioView) -> str:
    phase, analysis, explanation = oracle_decision(view)
    return json.dumps({"analysis": analysis, "decision": phase, "explanation": explanation})


class ScriptedBackend:
    """Deterministic rule-based stand-in for an LLM. Ignores the prompt text."""

    def complete(self, bundle: PromptBundle) -> str:
        return scripted_oracle(bundle.view)


# -- HTTP backend ------------------------------------------------------------

@dataclass
class HttpBackendConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4"
    temperature: float = 0.0
    timeout_s: float = 30.0
    api_key_env: str = API_KEY_ENV

    def __post_init__(self):
        if not self.timeout_s > 0:
            raise ConfigError("timeout_s", "must be positive")

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendConfigError(f"environment variable {self.api_key_env} is not set")
        return key

    def check(self) -> None:
        self.api_key()
        url = urlparse(self.endpoint)
        if url.scheme not in ("http", "https") or not url.netloc:
            raise BackendConfigError(f"invalid endpoint URL {self.endpoint!r}")


def http_complete(prompt: PromptBundle | str, cfg: HttpBackendConfig, client: httpx.Client | None = None) -> str:
    """One chat-completions round trip. Retries are the caller's business."""
    cfg.check()
    key = cfg.api_key()
    if isinstance(prompt, PromptBundle):
        messages = [
            {"role": "system", "content": prompt.role},
            {"role": "user", "content": prompt.user_text},
        ]
    else:
        messages = [{"role": "user", "content": prompt}]
    body = {"model": cfg.model, "temperature": cfg.temperature, "messages": messages}
    headers = {"Authorization": f"Bearer {key}"}
    try:
        if client is None:
            with httpx.Client(timeout=cfg.timeout_s) as c:
                resp = c.post(cfg.endpoint, json=body, headers=headers)
        else:
            resp = client.post(cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout_s)
    except httpx.TimeoutException as exc:
        raise BackendTimeoutError(f"request timed out after {cfg.timeout_s}s") from exc
    except httpx.HTTPError as exc:
        raise BackendTransportError(str(exc)) from exc
    if not 200 <= resp.status_code < 300:
        raise BackendStatusError(resp.status_code, resp.text[:500])
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(f"unexpected response body: {resp.text[:200]!r}") from exc
    if not isinstance(content, str):
        raise MalformedResponseError("message content is not text")
    return content


class HttpBackend:
    def __init__(self, cfg: HttpBackendConfig):
        cfg.check()
        self.cfg = cfg
        self._client = httpx.Client(timeout=cfg.timeout_s)

    def complete(self, bundle: PromptBundle) -> str:
        return http_complete(bundle, self.cfg, self._client)

    def close(self) -> None:
        self._client.close()
