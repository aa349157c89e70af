"""Semi-supervised VAE with a classifier head on the latent code.

The training objective is a weighted sum of three per-instance terms,
averaged over the batch:

    beta0 * reconstruction NLL + beta1 * KL(q(z|x) || N(0, I)) + beta2 * CE(y, clf(z))

Reconstruction uses a per-pixel Bernoulli likelihood averaged over pixels, so
the reconstruction weight does not scale with image size.  The
decoder emits logits; :meth:`VaeModel.decode` applies the sigmoid.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .neural import DenseNetSpec, Params, TrainingError
from .structlearn import LatentTable

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    beta0: float = 1.0
    beta1: float = 0.1
    beta2: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 50
    seed: int = 0
    latent_dim: int = 62
    hidden: tuple[int, ...] = (256,)
    classifier_hidden: tuple[int, ...] = (32,)
    noise_sigma: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "classifier_hidden",
                           tuple(int(h) for h in self.classifier_hidden))
        if min(self.beta0, self.beta1, self.beta2) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.beta0, self.beta1, self.beta2) <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.latent_dim < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and latent_dim >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["classifier_hidden"] = list(self.classifier_hidden)
        return d


@dataclass
class VaeModel:
    encoder: DenseNetSpec
    decoder: DenseNetSpec
    classifier: DenseNetSpec
    enc_params: Params
    dec_params: Params
    clf_params: Params
    input_shape: tuple[int, int]
    num_classes: int
    train_config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def latent_dim(self) -> int:
        return self.classifier.input_dim

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and log-variance (noise-free)."""
        out = neural.predict(self.encoder, self.enc_params, np.atleast_2d(x))
        return out[:, : self.latent_dim], out[:, self.latent_dim:]

    def decode_logits(self, z: np.ndarray) -> np.ndarray:
        return neural.predict(self.decoder, self.dec_params, np.atleast_2d(z))

    def decode(self, z: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decode_logits(z))

    def classify_logits(self, z: np.ndarray) -> np.ndarray:
        return neural.predict(self.classifier, self.clf_params, np.atleast_2d(z))

    def classify_proba(self, z: np.ndarray) -> np.ndarray:
        return np.exp(log_softmax(self.classify_logits(z)))


def build_model(input_shape: tuple[int, int], num_classes: int, config: TrainConfig,
                rng: np.random.Generator | None = None) -> VaeModel:
    d = int(input_shape[0]) * int(input_shape[1])
    L = config.latent_dim
    relu = ("relu",) * len(config.hidden)
    enc = DenseNetSpec(d, config.hidden + (2 * L,), relu + ("identity",), config.noise_sigma)
    dec = DenseNetSpec(L, tuple(reversed(config.hidden)) + (d,), relu + ("identity",),
                       config.noise_sigma)
    crelu = ("relu",) * len(config.classifier_hidden)
    clf = DenseNetSpec(L, config.classifier_hidden + (num_classes,), crelu + ("identity",),
                       config.noise_sigma)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    enc_p = neural.init_params(enc, rng)
    # start with small posterior variances so early samples stay near the mean
    enc_p[f"W{enc.num_layers - 1}"][:, L:] *= 0.1
    return VaeModel(enc, dec, clf, enc_p, neural.init_params(dec, rng),
                    neural.init_params(clf, rng), tuple(input_shape), int(num_classes), config)


# --------------------------------------------------------------------------
# loss pieces


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kld_diagonal_gaussian(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray | float:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)); per row for 2-D input."""
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have equal shapes")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise ValueError("mu and logvar must be finite")
    kl = 0.5 * (np.exp(logvar) + mu * mu - 1.0 - logvar).sum(axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def bernoulli_nll_with_logits(logits: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-row mean over pixels of -log Bernoulli(x | sigmoid(logits))."""
    nll = np.maximum(logits, 0.0) - x * logits + np.log1p(np.exp(-np.abs(logits)))
    return nll.mean(axis=-1)


@dataclass
class LossResult:
    total: float
    recon: float
    kld: float
    clf: float
    grads: dict[str, Params] | None = None


def loss(model: VaeModel, x: np.ndarray, y: np.ndarray, config: TrainConfig,
         rng: np.random.Generator, with_grad: bool = True) -> LossResult:
    """Batch loss and (optionally) gradients for encoder, decoder, classifier.

    Random draws happen in a fixed order (encoder noise, reparameterization
    noise, decoder noise, classifier noise) so a seeded ``rng`` makes the loss
    a deterministic function of the parameters.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty batch")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    if np.any(y < 0) or np.any(y >= model.num_classes):
        raise ValueError("labels out of range")
    B, L = len(x), model.latent_dim

    enc_t = neural.forward(model.encoder, model.enc_params, x, rng)
    mu, lv = enc_t.output[:, :L], enc_t.output[:, L:]
    eps = rng.standard_normal(mu.shape)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    dec_t = neural.forward(model.decoder, model.dec_params, z, rng)
    clf_t = neural.forward(model.classifier, model.clf_params, z, rng)

    recon_i = bernoulli_nll_with_logits(dec_t.output, x)
    kld_i = kld_diagonal_gaussian(mu, lv)
    logp = log_softmax(clf_t.output)
    ce_i = -logp[np.arange(B), y]
    recon, kld, ce = float(recon_i.mean()), float(np.mean(kld_i)), float(ce_i.mean())
    total = config.beta0 * recon + config.beta1 * kld + config.beta2 * ce
    result = LossResult(total, recon, kld, ce)
    if not with_grad:
        return result

    g_dec = config.beta0 * (_sigmoid(dec_t.output) - x) / (B * x.shape[1])
    onehot = np.zeros_like(logp)
    onehot[np.arange(B), y] = 1.0
    g_clf = config.beta2 * (np.exp(logp) - onehot) / B
    dec_grads, gz_dec = neural.backward(dec_t, g_dec)
    clf_grads, gz_clf = neural.backward(clf_t, g_clf)
    gz = gz_dec + gz_clf
    g_mu = gz + config.beta1 * mu / B
    g_lv = gz * 0.5 * std * eps + config.beta1 * 0.5 * (np.exp(lv) - 1.0) / B
    enc_grads, _ = neural.backward(enc_t, np.concatenate([g_mu, g_lv], axis=1))
    result.grads = {"encoder": enc_grads, "decoder": dec_grads, "classifier": clf_grads}
    return result


# --------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    loss: float
    mae: float
    mse: float
    kld: float
    accuracy: float


def evaluate(model: VaeModel, x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    """Noise-free reconstruction error, mean KLD and classifier accuracy."""
    mu, lv = model.encode(x)
    recon = model.decode(mu)
    pred = np.argmax(model.classify_logits(mu), axis=1)
    return {
        "mae": float(np.abs(recon - x).mean()),
        "mse": float(((recon - x) ** 2).mean()),
        "kld": float(np.mean(kld_diagonal_gaussian(mu, lv))),
        "accuracy": float((pred == y).mean()),
    }


def train(train_set, config: TrainConfig, val_set=None) -> tuple[VaeModel, list[EpochStats]]:
    """Fit a VAE with Adam; returns the model and per-epoch validation stats.

    ``train_set``/``val_set`` are :class:`~spncf.data.LabeledDataset` objects.
    Validation defaults to the training data.
    """
    if config.beta2 > 0 and len(np.unique(train_set.labels)) < 2:
        raise ValueError("classifier training needs at least two classes")
    if val_set is None:
        val_set = train_set
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    model = build_model(train_set.shape, train_set.num_classes, config,
                        np.random.default_rng(seeds[0]))
    rng = np.random.default_rng(seeds[1])
    states = {k: neural.AdamState(learning_rate=config.learning_rate)
              for k in ("encoder", "decoder", "classifier")}
    x_all, y_all = train_set.instances, train_set.labels
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_all))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            res = loss(model, x_all[idx], y_all[idx], config, rng)
            if not np.isfinite(res.total):
                raise TrainingError(f"loss diverged in epoch {epoch}")
            losses.append(res.total)
            try:
                model.enc_params = neural.adam_step(states["encoder"], model.enc_params,
                                                    res.grads["encoder"])
                model.dec_params = neural.adam_step(states["decoder"], model.dec_params,
                                                    res.grads["decoder"])
                model.clf_params = neural.adam_step(states["classifier"], model.clf_params,
                                                    res.grads["classifier"])
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
        stats = evaluate(model, val_set.instances, val_set.labels)
        history.append(EpochStats(epoch, float(np.mean(losses)), **stats))
        log.info("epoch %d loss %.4f mae %.4f kld %.3f acc %.3f", epoch, history[-1].loss,
                 stats["mae"], stats["kld"], stats["accuracy"])
    return model, history


def export_latents(model: VaeModel, dataset, samples_per_instance: int,
                   seed: int = 0) -> LatentTable:
    """Posterior mean plus ``R - 1`` reparameterized draws per instance."""
    R = int(samples_per_instance)
    if R < 1:
        raise ValueError("samples_per_instance must be >= 1")
    mu, lv = model.encode(dataset.instances)
    n, L = mu.shape
    rows = np.empty((n, R, L))
    rows[:, 0] = mu
    if R > 1:
        eps = np.random.default_rng(seed).standard_normal((n, R - 1, L))
        rows[:, 1:] = mu[:, None, :] + np.exp(0.5 * lv)[:, None, :] * eps
    return LatentTable(rows.reshape(n * R, L), np.repeat(dataset.labels, R),
                       group_ids=np.repeat(dataset.group_ids, R),
                       num_classes=model.num_classes)


# --------------------------------------------------------------------------
# persistence


def model_to_dict(model: VaeModel) -> dict:
    return {
        "version": FORMAT_VERSION,
        "manifest": {
            "latent_dim": model.latent_dim,
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes,
            "train_config": model.train_config.to_dict(),
            "seed": model.train_config.seed,
        },
        "encoder": neural.net_to_dict(model.encoder, model.enc_params),
        "decoder": neural.net_to_dict(model.decoder, model.dec_params),
        "classifier": neural.net_to_dict(model.classifier, model.clf_params),
    }


def model_from_dict(doc: dict) -> VaeModel:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')!r}")
    man = doc["manifest"]
    enc, enc_p = neural.net_from_dict(doc["encoder"])
    dec, dec_p = neural.net_from_dict(doc["decoder"])
    clf, clf_p = neural.net_from_dict(doc["classifier"])
    tc = dict(man["train_config"])
    tc["hidden"] = tuple(tc["hidden"])
    tc["classifier_hidden"] = tuple(tc["classifier_hidden"])
    return VaeModel(enc, dec, clf, enc_p, dec_p, clf_p, tuple(man["input_shape"]),
                    int(man["num_classes"]), TrainConfig(**tc))


def save_model(model: VaeModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path: str | Path) -> VaeModel:
    return model_from_dict(json.loads(Path(path).read_text()))
