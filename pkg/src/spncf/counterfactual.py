"""Latent-space counterfactual search guided by an SPN or the MLP head.

For an instance ``x`` the encoder is sampled ``R`` times; every sample is then
moved by gradient ascent on

    log p(y_cf | z') - beta * ||z' - z||^2 - gamma * |log p(z') - log p(z)|

and the decoded samples are averaged into a counterfactual image.

Step ``t`` has length ``step_size / (1 + step_decay * t)``; a diminishing step
is needed because the likelihood term is not differentiable where
``log p(z') = log p(z)`` and fixed steps cycle around that set.  With
``proximal`` the quadratic proximity term is applied through its exact
proximal map, which stays stable for any ``beta``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import neural
from .circuit import Circuit
from .vae import VaeModel, log_softmax


class ConfigurationError(ValueError):
    pass


class OptimizationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


BACKENDS = ("spn", "mlp")


@dataclass(frozen=True)
class CfConfig:
    """Counterfactual request.

    ``target_class=None`` targets the most probable class other than the
    current prediction of each instance.
    """

    target_class: int | None = None
    beta: float = 0.0
    gamma: float = 0.0
    replicates: int = 5
    step_size: float = 0.05
    max_steps: int = 1000
    backend: str = "spn"
    seed: int = 0
    early_stop: bool = False
    trace_stride: int = 1
    step_decay: float = 0.01
    proximal: bool = True

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigurationError("beta and gamma must be non-negative")
        if self.backend == "mlp" and self.gamma != 0:
            raise ConfigurationError("gamma must be 0 for the mlp backend (no density)")
        if self.replicates < 1:
            raise ConfigurationError("replicates must be positive")
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be non-negative")
        if self.step_decay < 0:
            raise ConfigurationError("step_decay must be non-negative")
        if self.trace_stride < 1:
            raise ConfigurationError("trace_stride must be positive")


# --------------------------------------------------------------------------
# backends


class SpnBackend:
    name = "spn"

    def __init__(self, circuit: Circuit):
        self.circuit = circuit
        self._children = np.array(circuit.class_children, dtype=np.intp)

    @property
    def num_classes(self) -> int:
        return self.circuit.num_classes

    def predict(self, z: np.ndarray) -> np.ndarray:
        return self.circuit.predict(z)

    def log_density(self, z: np.ndarray) -> np.ndarray:
        return self.circuit.log_marginal_batch(z)

    def evaluate(self, z: np.ndarray, targets: np.ndarray, gamma: float,
                 log_density_ref: np.ndarray | None):
        """Value and gradient of ``log p(y_t|z) - gamma*|log p(z) - ref|`` per row,
        plus the predicted class."""
        c = self.circuit
        vals = c.forward(z)
        log_joint = c.log_joint_from(vals)
        rows = np.arange(len(z))
        root = vals[c.root]
        value = log_joint[rows, targets] - root
        seeds = np.zeros_like(vals)
        np.add.at(seeds, (self._children[targets], rows), 1.0)
        root_seed = -1.0
        if gamma > 0:
            gap = root - log_density_ref
            value = value - gamma * np.abs(gap)
            # subgradient 0 exactly at equality
            root_seed = -1.0 - gamma * np.sign(gap)
        seeds[c.root] += root_seed
        grad = c.backward(z, vals, seeds)
        return value, grad, np.argmax(log_joint, axis=1)


class MlpBackend:
    name = "mlp"

    def __init__(self, model: VaeModel):
        self.spec = model.classifier
        self.params = model.clf_params

    @property
    def num_classes(self) -> int:
        return self.spec.output_dim

    def predict(self, z: np.ndarray) -> np.ndarray:
        return np.argmax(neural.predict(self.spec, self.params, z), axis=1)

    def log_density(self, z: np.ndarray) -> np.ndarray:
        raise ConfigurationError("the mlp backend has no density")

    def evaluate(self, z, targets, gamma, log_density_ref):
        if gamma != 0:
            raise ConfigurationError("gamma must be 0 for the mlp backend")
        trace = neural.forward(self.spec, self.params, z)
        logp = log_softmax(trace.output)
        rows = np.arange(len(z))
        g = -np.exp(logp)
        g[rows, targets] += 1.0
        _, grad = neural.backward(trace, g)
        return logp[rows, targets], grad, np.argmax(trace.output, axis=1)


def make_backend(config: CfConfig, model: VaeModel | None = None,
                 circuit: Circuit | None = None):
    if config.backend == "spn":
        if circuit is None:
            raise ConfigurationError("the spn backend needs a circuit")
        return SpnBackend(circuit)
    if model is None:
        raise ConfigurationError("the mlp backend needs a trained model")
    return MlpBackend(model)


def cf_objective(z_prime: np.ndarray, z_origin: np.ndarray, config: CfConfig, backend,
                 targets: np.ndarray | int | None = None,
                 log_density_origin: np.ndarray | None = None):
    """Objective value and gradient w.r.t. ``z_prime`` (row-wise for 2-D input).

    Returns ``(value, grad, predicted_class)``.
    """
    single = np.ndim(z_prime) == 1
    zp = np.atleast_2d(np.asarray(z_prime, dtype=float))
    z0 = np.atleast_2d(np.asarray(z_origin, dtype=float))
    if zp.shape != z0.shape:
        raise ValueError("z_prime and z_origin must have equal shapes")
    if targets is None:
        if config.target_class is None:
            raise ConfigurationError("no target class given")
        targets = config.target_class
    targets = np.broadcast_to(np.asarray(targets, dtype=np.intp), (len(zp),))
    if np.any(targets < 0) or np.any(targets >= backend.num_classes):
        raise ConfigurationError("target class out of range")
    if config.gamma > 0 and log_density_origin is None:
        log_density_origin = backend.log_density(z0)
    value, grad, pred = backend.evaluate(zp, targets, config.gamma, log_density_origin)
    delta = zp - z0
    value = value - config.beta * (delta * delta).sum(axis=1)
    grad = grad - 2.0 * config.beta * delta
    if single:
        return float(value[0]), grad[0], int(pred[0])
    return value, grad, pred


# --------------------------------------------------------------------------
# results


@dataclass
class ReplicateRecord:
    z_init: np.ndarray
    z_cf: np.ndarray
    switch_epoch: int | None
    final_prediction: int
    objective_trace: np.ndarray


@dataclass
class CfResult:
    config: CfConfig
    target_class: int
    source_prediction: int
    pipeline_prediction: int
    shape: tuple[int, int]
    replicates: list[ReplicateRecord]
    x_tilde: np.ndarray
    x_cf: np.ndarray
    label: int | None = None
    instance: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def difference(self) -> np.ndarray:
        return difference_map(self.x_cf, self.x_tilde)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "instance": self.instance,
            "label": self.label,
            "target_class": self.target_class,
            "source_prediction": self.source_prediction,
            "pipeline_prediction": self.pipeline_prediction,
            "shape": list(self.shape),
            "replicates": [
                {"z_init": r.z_init.tolist(), "z_cf": r.z_cf.tolist(),
                 "switch_epoch": r.switch_epoch, "final_prediction": r.final_prediction,
                 "objective_trace": r.objective_trace.tolist()}
                for r in self.replicates
            ],
            "x_tilde": self.x_tilde.tolist(),
            "x_cf": self.x_cf.tolist(),
            "difference": self.difference.tolist(),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CfResult":
        reps = [ReplicateRecord(np.array(r["z_init"]), np.array(r["z_cf"]), r["switch_epoch"],
                                int(r["final_prediction"]), np.array(r["objective_trace"]))
                for r in doc["replicates"]]
        return cls(CfConfig(**doc["config"]), int(doc["target_class"]),
                   int(doc["source_prediction"]), int(doc["pipeline_prediction"]),
                   tuple(doc["shape"]), reps, np.array(doc["x_tilde"]), np.array(doc["x_cf"]),
                   doc.get("label"), doc.get("instance"), doc.get("extra", {}))


def save_results(results: Sequence[CfResult], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in results]) + "\n")


def load_results(path: str | Path) -> list[CfResult]:
    return [CfResult.from_dict(d) for d in json.loads(Path(path).read_text())]


# --------------------------------------------------------------------------
# generation


def _replicate_noise(seed: int, instance_key: int, r: int, dim: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, instance_key, r])).standard_normal(dim)


def _pick_targets(backend, z_mean: np.ndarray, config: CfConfig,
                  source: np.ndarray) -> np.ndarray:
    if config.target_class is not None:
        if not 0 <= config.target_class < backend.num_classes:
            raise ConfigurationError("target class out of range")
        return np.full(len(source), config.target_class, dtype=np.intp)
    if isinstance(backend, SpnBackend):
        scores = backend.circuit.class_log_joint_batch(z_mean)
    else:
        scores = neural.predict(backend.spec, backend.params, z_mean)
    scores = scores.copy()
    scores[np.arange(len(source)), source] = -np.inf
    return np.argmax(scores, axis=1)


def step_size(config: CfConfig, t: int) -> float:
    """Step length for update ``t`` (0-based): ``step_size / (1 + step_decay * t)``."""
    return config.step_size / (1.0 + config.step_decay * t)


def generate_batch(X: np.ndarray, model: VaeModel, config: CfConfig,
                   circuit: Circuit | None = None, instance_keys: Sequence[int] | None = None,
                   labels: Sequence[int] | None = None) -> list[CfResult]:
    """Run the counterfactual search for every row of ``X`` at once.

    Replicate ``r`` of instance key ``k`` draws its noise from
    ``SeedSequence([config.seed, k, r])``, so results do not depend on ``R``
    or on which other instances share the batch.
    """
    backend = make_backend(config, model, circuit)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.input_dim:
        raise ValueError(f"instances must have {model.input_dim} features")
    n, R, L = len(X), config.replicates, model.latent_dim
    keys = list(range(n)) if instance_keys is None else [int(k) for k in instance_keys]
    if len(keys) != n:
        raise ValueError("need one instance key per row")

    mu, lv = model.encode(X)
    source = backend.predict(mu)
    targets = _pick_targets(backend, mu, config, source)

    eps = np.stack([_replicate_noise(config.seed, keys[i], r, L)
                    for i in range(n) for r in range(R)])
    z0 = np.repeat(mu, R, axis=0) + np.repeat(np.exp(0.5 * lv), R, axis=0) * eps
    row_targets = np.repeat(targets, R)
    ref = backend.log_density(z0) if config.gamma > 0 else None

    z = z0.copy()
    switch = np.full(len(z), -1, dtype=np.int64)
    active = np.ones(len(z), dtype=bool)
    traces = []
    pred = source
    for t in range(config.max_steps + 1):
        value, grad, pred = cf_objective(z, z0, config, backend, row_targets, ref)
        if not (np.all(np.isfinite(value)) and np.all(np.isfinite(grad))):
            raise OptimizationError(f"non-finite objective at step {t}", t)
        if t % config.trace_stride == 0 or t == config.max_steps:
            traces.append(value)
        hit = (switch < 0) & (pred == row_targets)
        switch[hit] = t
        if t == config.max_steps:
            break
        if config.early_stop:
            active = switch < 0
            if not active.any():
                break
        eta = step_size(config, t)
        if config.proximal and config.beta > 0:
            # grad includes -2*beta*(z - z0); strip it and apply the prox instead
            smooth = grad[active] + 2.0 * config.beta * (z[active] - z0[active])
            z[active] = z0[active] + (z[active] - z0[active] + eta * smooth) / (
                1.0 + 2.0 * eta * config.beta)
        else:
            z[active] += eta * grad[active]
    trace = np.stack(traces, axis=1)

    dec0 = model.decode(z0).reshape(n, R, -1)
    dec_cf = model.decode(z).reshape(n, R, -1)
    x_tilde = dec0.mean(axis=1)
    x_cf = dec_cf.mean(axis=1)
    pipeline = backend.predict(model.encode(x_cf)[0])

    results = []
    for i in range(n):
        reps = []
        for r in range(R):
            j = i * R + r
            reps.append(ReplicateRecord(z0[j].copy(), z[j].copy(),
                                        None if switch[j] < 0 else int(switch[j]),
                                        int(pred[j]), trace[j].copy()))
        results.append(CfResult(
            config=config, target_class=int(targets[i]), source_prediction=int(source[i]),
            pipeline_prediction=int(pipeline[i]), shape=tuple(model.input_shape),
            replicates=reps, x_tilde=x_tilde[i], x_cf=x_cf[i],
            label=None if labels is None else int(labels[i]), instance=keys[i]))
    return results


def generate(x: np.ndarray, model: VaeModel, config: CfConfig,
             circuit: Circuit | None = None, instance_key: int = 0) -> CfResult:
    """Counterfactual for a single flattened instance."""
    return generate_batch(np.asarray(x, dtype=float)[None, :], model, config, circuit,
                          [instance_key])[0]


# --------------------------------------------------------------------------
# difference maps


def difference_map(x_cf_mean: np.ndarray, x_tilde_mean: np.ndarray) -> np.ndarray:
    """Signed change ``x_cf - x_tilde``."""
    a, b = np.asarray(x_cf_mean, dtype=float), np.asarray(x_tilde_mean, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def render_difference(diff: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Diverging RGB rendering: red for additions, blue for reductions, white at 0.

    The colour scale is symmetric about zero; ``scale`` defaults to max |diff|.
    """
    diff = np.asarray(diff, dtype=float)
    if scale is None:
        scale = float(np.abs(diff).max())
    t = np.zeros_like(diff) if scale <= 0 else np.clip(diff / scale, -1.0, 1.0)
    pos, neg = np.clip(t, 0, None), np.clip(-t, 0, None)
    rgb = np.stack([1.0 - neg, 1.0 - pos - neg, 1.0 - pos], axis=-1)
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def save_difference_png(path: str | Path, diff: np.ndarray, shape: tuple[int, int],
                        scale: float | None = None) -> None:
    from PIL import Image

    Image.fromarray(render_difference(np.reshape(diff, shape), scale)).save(path)
