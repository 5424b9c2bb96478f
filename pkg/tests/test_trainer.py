import numpy as np
import pytest

from nr_attack import autodiff as ad
from nr_attack import data, trainer
from nr_attack import generator as G
from nr_attack.metrics import MeanIntensity, get_metric

SMALL = dict(depth=2, base_channels=4)


@pytest.fixture(scope="module")
def tiny():
    return data.synth_corpus(21, 12, (8, 8))


def test_zero_init_loss_is_negated_clean_mean(tiny):
    p = G.init_params(G.UNetConfig(**SMALL))
    m = get_metric("frozen_cnn:7")
    loss = trainer.facpa_loss(p, tiny.images, m)
    assert float(loss.data) == pytest.approx(-np.mean(m.scores(tiny.images)), rel=1e-6)


def test_single_image_loss_is_negated_score(tiny):
    p = G.init_params(G.UNetConfig(**SMALL))
    m = get_metric("sobel_sharpness")
    loss = trainer.facpa_loss(p, tiny.images[0], m)
    assert float(loss.data) == pytest.approx(-m.score(tiny.images[0]), rel=1e-6)


def test_clean_term_changes_loss_not_gradient(tiny):
    cfg = G.UNetConfig(**SMALL)
    p = G.init_params(cfg, 1)
    p.tensors["out.w"] = np.random.default_rng(0).uniform(-0.5, 0.5, p.tensors["out.w"].shape).astype(np.float32)
    names = list(p.tensors)
    m = get_metric("frozen_cnn:7")

    def grads(keep):
        leaves = [ad.Tensor(p.tensors[n], requires_grad=True) for n in names]
        loss = trainer.facpa_loss(dict(zip(names, leaves)), tiny.images[:4], m, cfg, keep)
        return float(loss.data), ad.gradients(loss, leaves)

    la, ga = grads(False)
    lb, gb = grads(True)
    assert la != lb
    assert all(np.array_equal(a, b) for a, b in zip(ga, gb))


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        trainer.facpa_loss(G.init_params(G.UNetConfig(**SMALL)), np.zeros((0, 3, 8, 8)), "frozen_cnn:7")


def test_zero_epochs_returns_init(tiny):
    cfg = trainer.TrainConfig(epochs=0, seed=4, **SMALL)
    p, hist = trainer.train_facpa(tiny, cfg)
    assert p.digest() == G.init_params(cfg.unet(), 4).digest() and hist.steps == []


def test_training_reproducible(tiny):
    cfg = trainer.TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=2, **SMALL)
    a, ha = trainer.train_facpa(tiny, cfg)
    b, hb = trainer.train_facpa(tiny, cfg)
    assert a.digest() == b.digest() and ha.digest() == hb.digest()
    assert a.metric == "frozen_cnn:7" and a.meta["train"]["history_digest"] == ha.digest()


def test_training_increases_gain(tiny):
    cfg = trainer.TrainConfig(metric="sobel_sharpness", epochs=5, batch_size=4, lr=1e-2, **SMALL)
    p, hist = trainer.train_facpa(tiny, cfg)
    assert hist.steps[0]["gain"] == 0
    m = get_metric("sobel_sharpness")
    after = m.scores(np.clip(tiny.images + G.unet_forward(p, tiny.images), 0, 1))
    assert np.mean(after - m.scores(tiny.images)) > 0


def test_history_steps_increase():
    h = trainer.TrainHistory()
    h.record(0, 1.0, 0.0)
    with pytest.raises(ValueError):
        h.record(0, 1.0, 0.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        trainer.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        trainer.TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        trainer.TrainConfig(epsilon=1.5)


# -- universal perturbation --------------------------------------------------------------

def test_uap_zero_steps(tiny):
    d = trainer.train_uap(tiny, trainer.TrainConfig(epochs=3), steps=0)
    assert d.shape == (3, 8, 8) and not d.any()


def test_uap_bounded(tiny):
    cfg = trainer.TrainConfig(metric="sobel_sharpness", epochs=3, batch_size=4, lr=0.01)
    d = trainer.train_uap(tiny, cfg)
    assert np.abs(d).max() <= np.float32(cfg.epsilon)


def test_uap_linear_metric_converges_to_eps(tiny):
    cfg = trainer.TrainConfig(epochs=20, batch_size=4)
    d = trainer.train_uap(tiny, trainer.TrainConfig(**{**cfg.__dict__, "metric": "sobel_sharpness"}), steps=0)
    assert not d.any()
    d = _train_uap_linear(tiny, cfg)
    assert np.all(np.abs(d - cfg.epsilon) <= 1e-6)


def _train_uap_linear(ds, cfg):
    from unittest import mock

    with mock.patch.object(trainer, "get_metric", lambda _: MeanIntensity()):
        return trainer.train_uap(ds, cfg)


def test_uap_same_step_budget_as_facpa(tiny):
    cfg = trainer.TrainConfig(epochs=2, batch_size=5)
    n_batches = sum(len(trainer.epoch_batches(tiny.manifest, cfg, e)) for e in range(cfg.epochs))
    full = trainer.train_uap(tiny, cfg)
    capped = trainer.train_uap(tiny, cfg, steps=n_batches)
    assert n_batches == 6 and full.tobytes() == capped.tobytes()


def test_uap_file_round_trip(tmp_path):
    d = np.random.default_rng(0).uniform(-0.03, 0.03, (3, 8, 8)).astype(np.float32)
    trainer.save_uap(tmp_path / "u.fw", d, "frozen_cnn:7", 10 / 255, {"config_digest": "abc"})
    back, header = trainer.load_uap(tmp_path / "u.fw")
    assert back.tobytes() == d.tobytes()
    assert header["kind"] == "uap" and header["metric"] == "frozen_cnn:7" and header["config_digest"] == "abc"


def test_uap_loader_rejects_generator(tmp_path):
    G.save_params(G.init_params(G.UNetConfig(**SMALL)), tmp_path / "g.fw")
    with pytest.raises(ValueError):
        trainer.load_uap(tmp_path / "g.fw")


def test_history_gain_same_with_clean_term(tiny):
    cfg = trainer.TrainConfig(epochs=1, batch_size=4, lr=1e-2, **SMALL)
    _, a = trainer.train_facpa(tiny, cfg)
    _, b = trainer.train_facpa(tiny, cfg, keep_clean_term=True)
    assert np.allclose([s["gain"] for s in a.steps], [s["gain"] for s in b.steps], atol=1e-6)
