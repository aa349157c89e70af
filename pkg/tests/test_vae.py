import numpy as np
import pytest

from spncf import data, vae
from spncf.neural import TrainingError
from spncf.vae import TrainConfig


@pytest.fixture(scope="module")
def small_data():
    return data.gen_ellipse_images(200, 16, class_radii=((2.5, 3.0), (4.5, 5.0)), jitter=1,
                                   seed=0)


@pytest.fixture(scope="module")
def trained(small_data):
    cfg = TrainConfig(epochs=25, latent_dim=4, hidden=(32,), batch_size=20, seed=1)
    return vae.train(small_data, cfg)


def test_kld_examples():
    assert vae.kld_diagonal_gaussian(np.zeros(3), np.zeros(3)) == 0.0
    assert vae.kld_diagonal_gaussian(np.array([1.0]), np.array([0.0])) == 0.5
    with pytest.raises(ValueError):
        vae.kld_diagonal_gaussian(np.array([np.nan]), np.array([0.0]))


def test_kld_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mu, lv = rng.normal(size=3), rng.normal(0, 0.5, size=3)
    std = np.exp(0.5 * lv)
    z = mu + std * rng.standard_normal((10**6, 3))
    # log q(z) - log p(z) per sample
    lq = -0.5 * (((z - mu) / std) ** 2 + lv).sum(axis=1)
    lp = -0.5 * (z**2).sum(axis=1)
    samples = lq - lp
    est, se = samples.mean(), samples.std() / np.sqrt(len(samples))
    assert abs(vae.kld_diagonal_gaussian(mu, lv) - est) < 3 * se


def test_kld_non_negative():
    rng = np.random.default_rng(1)
    kl = vae.kld_diagonal_gaussian(rng.normal(size=(100, 5)), rng.normal(size=(100, 5)))
    assert kl.shape == (100,) and np.all(kl >= 0)


def test_max_entropy_bernoulli_recon():
    x = (np.random.default_rng(0).random((3, 10)) > 0.5).astype(float)
    np.testing.assert_allclose(vae.bernoulli_nll_with_logits(np.zeros_like(x), x), np.log(2))


def test_isolated_classifier_term(small_data):
    cfg = TrainConfig(beta0=0, beta1=0, beta2=1, latent_dim=2, hidden=(8,))
    model = vae.build_model(small_data.shape, 2, cfg, np.random.default_rng(0))
    L = model.classifier.num_layers - 1
    # a classifier that ignores z and outputs huge logits for the true class
    model.clf_params[f"W{L}"][:] = 0.0
    model.clf_params[f"b{L}"][:] = [100.0, -100.0]
    x, y = small_data.instances[:5], np.zeros(5, dtype=int)
    res = vae.loss(model, x, y, cfg, np.random.default_rng(0))
    assert res.total == pytest.approx(0.0, abs=1e-12)
    assert res.recon > 0 and res.kld >= 0


def test_loss_gradient_matches_finite_differences(small_data):
    cfg = TrainConfig(beta0=1.0, beta1=0.3, beta2=0.7, latent_dim=3, hidden=(6,),
                      classifier_hidden=(5,), noise_sigma=0.2)
    model = vae.build_model(small_data.shape, 2, cfg, np.random.default_rng(0))
    x, y = small_data.instances[:6], small_data.labels[:6]

    def total():
        return vae.loss(model, x, y, cfg, np.random.default_rng(42), with_grad=False).total

    grads = vae.loss(model, x, y, cfg, np.random.default_rng(42)).grads
    rng = np.random.default_rng(1)
    h, worst = 1e-5, 0.0
    for part, params in (("encoder", model.enc_params), ("decoder", model.dec_params),
                         ("classifier", model.clf_params)):
        for name, p in params.items():
            for _ in range(5):
                idx = tuple(int(rng.integers(s)) for s in p.shape)
                orig = p[idx]
                p[idx] = orig + h
                up = total()
                p[idx] = orig - h
                down = total()
                p[idx] = orig
                fd = (up - down) / (2 * h)
                a = grads[part][name][idx]
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-7))
    assert worst < 1e-3


def test_loss_rejects_bad_pixels(small_data):
    cfg = TrainConfig(latent_dim=2, hidden=(4,))
    model = vae.build_model(small_data.shape, 2, cfg)
    with pytest.raises(ValueError):
        vae.loss(model, small_data.instances[:2] + 2, [0, 1], cfg, np.random.default_rng(0))


def test_reparameterization_moments():
    rng = np.random.default_rng(0)
    mu, lv = np.array([0.5, -1.0]), np.array([0.2, -0.7])
    z = mu + np.exp(0.5 * lv) * rng.standard_normal((10**4, 2))
    se_mean = np.exp(0.5 * lv) / 100
    assert np.all(np.abs(z.mean(axis=0) - mu) < 4 * se_mean)
    var = np.exp(lv)
    se_var = var * np.sqrt(2 / 10**4)
    assert np.all(np.abs(z.var(axis=0) - var) < 4 * se_var)


def test_zero_epochs(small_data):
    model, history = vae.train(small_data, TrainConfig(epochs=0, latent_dim=2, hidden=(4,)))
    assert history == []
    assert model.latent_dim == 2


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.latent_dim, cfg.learning_rate, cfg.epochs, cfg.batch_size) == (62, 1e-3, 100, 50)
    with pytest.raises(ValueError):
        TrainConfig(beta0=0, beta1=0, beta2=0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=-1)


def test_single_class_rejected(small_data):
    one = small_data.subset(np.flatnonzero(small_data.labels == 0))
    with pytest.raises(ValueError):
        vae.train(one, TrainConfig(epochs=1, latent_dim=2, hidden=(4,)))


def test_training_reduces_loss_and_classifies(trained):
    model, history = trained
    losses = [h.loss for h in history]
    assert np.median(losses[-10:]) < np.median(losses[:10])
    assert history[-1].accuracy >= 0.95
    assert model.encoder.output_dim == 2 * model.latent_dim
    assert model.decoder.output_dim == model.input_dim


def test_training_deterministic(small_data):
    cfg = TrainConfig(epochs=2, latent_dim=2, hidden=(8,), seed=3)
    a, _ = vae.train(small_data, cfg)
    b, _ = vae.train(small_data, cfg)
    for k in a.enc_params:
        assert np.array_equal(a.enc_params[k], b.enc_params[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(small_data):
    cfg = TrainConfig(epochs=3, latent_dim=2, hidden=(4,), learning_rate=1e300)
    with pytest.raises(TrainingError, match="epoch"):
        vae.train(small_data, cfg)


def test_export_latents(trained, small_data):
    model, history = trained
    one = vae.export_latents(model, small_data, 1)
    mu, _ = model.encode(small_data.instances)
    assert np.array_equal(one.rows, mu)
    sub = small_data.subset(np.arange(10))
    five = vae.export_latents(model, sub, 5, seed=0)
    assert five.rows.shape == (50, model.latent_dim)
    assert np.array_equal(five.rows[::5], mu[:10])
    assert np.array_equal(five.labels, np.repeat(sub.labels, 5))
    again = vae.export_latents(model, sub, 5, seed=0)
    assert np.array_equal(again.rows, five.rows)
    # classifier head on exported means reproduces the evaluated accuracy
    acc = np.mean(np.argmax(model.classify_logits(one.rows), axis=1) == one.labels)
    assert abs(acc - history[-1].accuracy) <= 0.01


def test_model_round_trip(trained, tmp_path):
    model, _ = trained
    vae.save_model(model, tmp_path / "m.json")
    back = vae.load_model(tmp_path / "m.json")
    x = np.random.default_rng(0).random((3, model.input_dim))
    assert np.array_equal(model.encode(x)[0], back.encode(x)[0])
    assert np.array_equal(model.decode(np.ones((1, model.latent_dim))),
                          back.decode(np.ones((1, model.latent_dim))))
    assert back.train_config == model.train_config
