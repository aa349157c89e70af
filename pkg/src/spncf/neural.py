"""Dense feed-forward networks with hand-written backprop and Adam.

Parameters live in plain ``dict[str, np.ndarray]`` objects keyed ``W0, b0, W1,
...`` so they can be merged across networks under a prefix.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid")
FORMAT_VERSION = 1

Params = dict[str, np.ndarray]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DenseNetSpec:
    input_dim: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.input_dim < 1 or not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive and non-empty")
        if len(self.activations) != len(self.widths):
            raise ValueError("need one activation per layer")
        bad = set(self.activations) - set(ACTIVATIONS)
        if bad:
            raise ValueError(f"unknown activations {sorted(bad)}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.widths)


def init_params(spec: DenseNetSpec, rng: np.random.Generator) -> Params:
    """He-uniform weights for ReLU layers, Glorot-uniform otherwise; zero biases."""
    params: Params = {}
    fan_in = spec.input_dim
    for i, (width, act) in enumerate(zip(spec.widths, spec.activations)):
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + width))
        params[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, width))
        params[f"b{i}"] = np.zeros(width)
        fan_in = width
    return params


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    return a


def _activation_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (a > 0).astype(a.dtype)
    if name == "sigmoid":
        return h * (1.0 - h)
    return np.ones_like(a)


@dataclass
class Trace:
    """Everything ``backward`` needs from one forward pass."""

    spec: DenseNetSpec
    params: Params
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None


def forward(spec: DenseNetSpec, params: Params, x: np.ndarray,
            rng: np.random.Generator | None = None) -> Trace:
    """Run the network on a batch ``x`` of shape (batch, input_dim).

    Passing ``rng`` selects training mode: zero-mean Gaussian noise of
    ``spec.noise_sigma`` is added to every hidden activation.  Without it the
    pass is deterministic.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of shape (batch, {spec.input_dim}), got {x.shape}")
    trace = Trace(spec, params)
    h = x
    last = spec.num_layers - 1
    for i, act in enumerate(spec.activations):
        trace.inputs.append(h)
        a = h @ params[f"W{i}"] + params[f"b{i}"]
        out = _activate(act, a)
        trace.pre.append(a)
        trace.post.append(out)
        if i < last and rng is not None and spec.noise_sigma > 0:
            out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
        h = out
    trace.output = h
    return trace


def backward(trace: Trace, grad_output: np.ndarray) -> tuple[Params, np.ndarray]:
    """Gradients of a scalar loss for every parameter and for the input."""
    spec, params = trace.spec, trace.params
    g = np.asarray(grad_output, dtype=float)
    grads: Params = {}
    for i in reversed(range(spec.num_layers)):
        g = g * _activation_grad(spec.activations[i], trace.pre[i], trace.post[i])
        grads[f"W{i}"] = trace.inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"W{i}"].T
    return grads, g


def predict(spec: DenseNetSpec, params: Params, x: np.ndarray) -> np.ndarray:
    return forward(spec, params, x).output


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Params) -> Params:
    """One bias-corrected Adam update; returns new parameter arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if state.m.get(name) is None:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        updated[name] = p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return updated


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_relative_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(spec: DenseNetSpec, params: Params, x: np.ndarray,
               loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               tolerance: float, num_checks: int = 50, h: float = 1e-5,
               seed: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences on sampled parameters.

    ``loss_fn`` maps the network output to ``(loss, d loss / d output)``.
    """
    trace = forward(spec, params, x)
    _, g_out = loss_fn(trace.output)
    grads, _ = backward(trace, g_out)

    flat = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(flat), size=min(num_checks, len(flat)), replace=False)
    worst = 0.0
    for k in picks:
        name, idx = flat[k]
        p = params[name]
        orig = p[idx]
        p[idx] = orig + h
        up, _ = loss_fn(predict(spec, params, x))
        p[idx] = orig - h
        down, _ = loss_fn(predict(spec, params, x))
        p[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, float(relative_error(grads[name][idx], numeric)))
    return GradCheckReport(worst, len(picks), tolerance)


# --------------------------------------------------------------------------
# persistence


def net_to_dict(spec: DenseNetSpec, params: Params) -> dict:
    return {
        "version": FORMAT_VERSION,
        "spec": {**asdict(spec), "widths": list(spec.widths),
                 "activations": list(spec.activations)},
        "params": {
            name: {"shape": list(p.shape), "values": [float(v) for v in p.ravel()]}
            for name, p in params.items()
        },
    }


def net_from_dict(doc: dict) -> tuple[DenseNetSpec, Params]:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {doc.get('version')!r}")
    s = doc["spec"]
    spec = DenseNetSpec(int(s["input_dim"]), tuple(s["widths"]), tuple(s["activations"]),
                        float(s["noise_sigma"]))
    params = {
        name: np.array(entry["values"], dtype=float).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return spec, params


def save_net(path: str | Path, spec: DenseNetSpec, params: Params) -> None:
    Path(path).write_text(json.dumps(net_to_dict(spec, params)) + "\n")


def load_net(path: str | Path) -> tuple[DenseNetSpec, Params]:
    return net_from_dict(json.loads(Path(path).read_text()))
