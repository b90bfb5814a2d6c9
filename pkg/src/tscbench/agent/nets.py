"""Policy and value MLPs with hand-written reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericInputError
from ..sim import N_FEATURES, N_MOVEMENTS, N_PHASES, SimConfig


@dataclass
class Architecture:
    obs_dim: int = N_MOVEMENTS * N_FEATURES
    hidden: tuple[int, ...] = (64, 64)
    n_actions: int = N_PHASES
    activation: str = "tanh"
    # elementwise multiplier applied to raw observations before the first layer
    input_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_scale is not None:
            self.input_scale = tuple(float(x) for x in self.input_scale)
            if len(self.input_scale) != self.obs_dim:
                raise ValueError("input_scale length must equal obs_dim")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_sizes(self, head: str) -> list[int]:
        out = self.n_actions if head == "pi" else 1
        return [self.obs_dim, *self.hidden, out]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for head in ("pi", "v"):
            sizes = self.layer_sizes(head)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                shapes[f"{head}.W{i}"] = (a, b)
                shapes[f"{head}.b{i}"] = (b,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "hidden": list(self.hidden),
            "n_actions": self.n_actions,
            "activation": self.activation,
            "input_scale": list(self.input_scale) if self.input_scale is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        return cls(**d)

    @classmethod
    def for_sim(cls, sim: SimConfig, hidden=(64, 64)) -> Architecture:
        """Default architecture with per-column scaling to roughly unit range."""
        row = (
            1.0 / sim.free_flow_speed_mps,
            1.0,
            1.0 / sim.lane_length_m,
            sim.vehicle_footprint_m / sim.lane_length_m,
            1.0,
        )
        return cls(hidden=hidden, input_scale=row * N_MOVEMENTS)


@dataclass
class NetworkWeights:
    arch: Architecture
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> NetworkWeights:
        return NetworkWeights(
            arch=self.arch,
            params={k: v.copy() for k, v in self.params.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
        )


def init_weights(arch: Architecture, rng: np.random.Generator) -> NetworkWeights:
    """Scaled-uniform (Glorot) hidden layers; small final layers so the initial policy is near uniform."""
    params = {}
    for head in ("pi", "v"):
        sizes = arch.layer_sizes(head)
        n = len(sizes) - 1
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (a + b))
            if i == n - 1:
                limit *= 0.01 if head == "pi" else 1.0
            params[f"{head}.W{i}"] = rng.uniform(-limit, limit, size=(a, b))
            params[f"{head}.b{i}"] = np.zeros(b)
    return NetworkWeights(
        arch=arch,
        params=params,
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
    )


def zero_weights(arch: Architecture) -> NetworkWeights:
    params = {k: np.zeros(s) for k, s in arch.param_shapes().items()}
    return NetworkWeights(arch, params, {k: np.zeros_like(v) for k, v in params.items()},
                          {k: np.zeros_like(v) for k, v in params.items()})


def _prep(arch: Architecture, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericInputError("non-finite observation")
    if x.shape[-1] != arch.obs_dim:
        raise NumericInputError(f"expected observation of length {arch.obs_dim}, got {x.shape[-1]}")
    if arch.input_scale is not None:
        x = x * np.asarray(arch.input_scale)
    return x


def mlp_forward(params: dict, head: str, n_layers: int, x: np.ndarray):
    """Returns (output, activations); activations[i] is the input to layer i."""
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ params[f"{head}.W{i}"] + params[f"{head}.b{i}"]
        if i < n_layers - 1:
            h = np.tanh(z)
            acts.append(h)
        else:
            h = z
    return h, acts


def mlp_backward(params: dict, head: str, n_layers: int, acts: list, grad_out: np.ndarray) -> dict:
    grads = {}
    g = grad_out
    for i in reversed(range(n_layers)):
        a = acts[i]
        grads[f"{head}.W{i}"] = a.T @ g
        grads[f"{head}.b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ params[f"{head}.W{i}"].T) * (1.0 - a * a)
    return grads


def _n_layers(arch: Architecture) -> int:
    return len(arch.hidden) + 1


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy_logits(weights: NetworkWeights, obs) -> np.ndarray:
    x = _prep(weights.arch, obs)
    out, _ = mlp_forward(weights.params, "pi", _n_layers(weights.arch), x)
    return out


def policy_forward(weights: NetworkWeights, obs_flat) -> np.ndarray:
    return softmax(policy_logits(weights, obs_flat))


def value_forward(weights: NetworkWeights, obs_flat):
    x = _prep(weights.arch, obs_flat)
    out, _ = mlp_forward(weights.params, "v", _n_layers(weights.arch), x)
    out = out[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def greedy_action(weights: NetworkWeights, obs_flat) -> int:
    return int(np.argmax(policy_logits(weights, obs_flat)))
