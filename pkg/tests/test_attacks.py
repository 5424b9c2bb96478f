import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nr_attack import attacks as A
from nr_attack import autodiff as ad
from nr_attack import generator as G
from nr_attack.metrics import MeanIntensity, get_metric

EPS = 10 / 255
LINEAR = MeanIntensity()


def interior(seed=0, size=8):
    return np.random.default_rng(seed).uniform(0.2, 0.8, (3, size, size)).astype(np.float32)


def trained_like_generator(seed=0):
    p = G.init_params(G.UNetConfig(depth=2, base_channels=4), seed)
    t = dict(p.tensors)
    t["out.w"] = np.random.default_rng(seed).uniform(-2, 2, t["out.w"].shape).astype(np.float32)
    return p.with_tensors(t)


@pytest.mark.parametrize("kind", A.ITERATIVE)
def test_zero_iters_identity(kind):
    x = interior(1)
    out = A.run_attack(x, "frozen_cnn:7", A.AttackSpec(kind, iters=0, lambda_fr=1.0))
    assert out.adversarial.tobytes() == x.tobytes() and out.gain == 0 and out.iterations_run == 0


def test_linear_one_step_raises_every_pixel_by_lr():
    x = interior(2)
    out = A.ifgsm_attack(x, LINEAR, A.AttackSpec("ifgsm", lr=0.001, iters=1))
    assert np.allclose(out.adversarial - x, 0.001, atol=1e-7)
    assert out.gain == pytest.approx(0.001, abs=1e-6)


def test_linear_saturates_after_forty_steps():
    x = interior(3)
    assert math.ceil(EPS / 0.001) == 40
    for iters, expect in ((39, 0.039), (40, EPS), (60, EPS)):
        out = A.ifgsm_attack(x, LINEAR, A.AttackSpec("ifgsm", lr=0.001, iters=iters))
        assert np.allclose(out.adversarial - x, expect, atol=2e-7)


def test_mifgsm_mu_zero_equals_ifgsm():
    x = interior(4, 16)
    a = A.craft_ifgsm(x, "frozen_cnn:7", A.AttackSpec("ifgsm", iters=12))
    b = A.craft_mifgsm(x, "frozen_cnn:7", A.AttackSpec("mifgsm", iters=12, mu=0.0))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("mu", [0.0, 0.5, 1.0, 3.0])
def test_mifgsm_linear_metric_matches_ifgsm(mu):
    x = interior(5)
    a = A.craft_ifgsm(x, LINEAR, A.AttackSpec("ifgsm", iters=20))
    b = A.craft_mifgsm(x, LINEAR, A.AttackSpec("mifgsm", iters=20, mu=mu))
    assert a.tobytes() == b.tobytes()


# -- sobel mask -------------------------------------------------------------------

def test_sobel_mask_constant_is_zero():
    assert not A.sobel_mask(np.full((3, 8, 8), 0.5, np.float32)).any()


def test_sobel_mask_vertical_step():
    x = np.zeros((3, 8, 8), np.float32)
    x[:, :, 4:] = 1
    m = A.sobel_mask(x)[0]
    assert np.all(m[:, 3:5] == 1)
    assert np.all(m[:, :2] == 0) and np.all(m[:, 6:] == 0)


@given(st.integers(0, 10**6))
def test_sobel_mask_range(seed):
    m = A.sobel_mask(np.random.default_rng(seed).uniform(0, 1, (3, 8, 8)))
    assert m.shape == (3, 8, 8) and m.min() >= 0 and m.max() <= 1


def test_sobel_masked_constant_image_untouched():
    x = np.full((3, 8, 8), 0.5, np.float32)
    out = A.sobel_masked_attack(x, "frozen_cnn:7", A.AttackSpec("sobel_masked", iters=15))
    assert np.array_equal(out.adversarial, x) and out.gain == 0


def test_sobel_masked_all_ones_mask_equals_ifgsm():
    x = interior(7)
    spec = A.AttackSpec("sobel_masked", iters=9)
    a = A.craft_sobel_masked(x, "sobel_sharpness", spec, mask=np.ones_like(x))
    b = A.craft_ifgsm(x, "sobel_sharpness", A.AttackSpec("ifgsm", iters=9))
    assert a.tobytes() == b.tobytes()


def test_sobel_masked_deviation_within_masked_budget():
    x = np.random.default_rng(8).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    mask = A.sobel_mask(x)
    out = A.craft_sobel_masked(x, "sobel_sharpness", A.AttackSpec("sobel_masked", lr=0.004, iters=40))
    assert np.all(np.abs(out - x) <= np.float32(EPS) * mask + 1e-7)


# -- full-reference penalised --------------------------------------------------------

def test_fr_lambda_zero_equals_ifgsm():
    x = interior(9, 16)
    a = A.craft_ifgsm(x, "frozen_cnn:7", A.AttackSpec("ifgsm", iters=10))
    b = A.craft_fr_penalized(x, "frozen_cnn:7", A.AttackSpec("fr_penalized", iters=10, lambda_fr=0.0))
    assert a.tobytes() == b.tobytes()


def test_fr_large_lambda_reduces_distortion():
    x = interior(10, 16)
    mse = lambda a: float(np.mean((a - x) ** 2))  # noqa: E731
    free = A.craft_fr_penalized(x, "frozen_cnn:7", A.AttackSpec("fr_penalized", iters=10, lambda_fr=0.0))
    tied = A.craft_fr_penalized(x, "frozen_cnn:7", A.AttackSpec("fr_penalized", iters=10, lambda_fr=1e6))
    assert mse(tied) < mse(free)


# -- universal perturbation ------------------------------------------------------------

def test_uap_zero_delta_identity():
    x = interior(11)
    out = A.uap_attack(x, "sobel_sharpness", A.AttackSpec("uap", delta=np.zeros_like(x)))
    assert np.array_equal(out.adversarial, x) and out.gain == 0


def test_uap_same_delta_bytes_for_different_images():
    d = np.random.default_rng(12).uniform(-0.03, 0.03, (3, 8, 8)).astype(np.float32)
    spec = A.AttackSpec("uap", delta=d)
    a = A.uap_attack(interior(13), "frozen_cnn:7", spec)
    b = A.uap_attack(interior(14), "frozen_cnn:7", spec)
    assert a.info["delta_sha256"] == b.info["delta_sha256"]


def test_uap_deviation_bounded_by_delta():
    d = np.random.default_rng(15).uniform(-0.02, 0.02, (3, 8, 8)).astype(np.float32)
    x = np.random.default_rng(16).uniform(0, 1, (3, 8, 8)).astype(np.float32)
    adv = A.apply_uap(x, d)
    assert np.abs(adv - x).max() <= np.abs(d).max() + 1e-7 and adv.min() >= 0 and adv.max() <= 1


def test_uap_tiles_to_larger_images():
    d = np.arange(12, dtype=np.float32).reshape(3, 2, 2) / 1000
    assert np.array_equal(A.fit_delta(d, (3, 3, 5))[:, 2:, 2:4], d[:, :1, :])


def test_uap_rejects_oversized_delta():
    with pytest.raises(A.AttackError):
        A.apply_uap(interior(), np.full((3, 8, 8), 0.1, np.float32))


def test_uap_without_delta():
    with pytest.raises(A.AttackError):
        A.craft(interior(), LINEAR, A.AttackSpec("uap"))


# -- generator attack -------------------------------------------------------------------

def test_facpa_fresh_params_identity():
    x = interior(17, 8)
    out = A.facpa_attack(x, "frozen_cnn:7", A.AttackSpec("facpa", generator=G.init_params()))
    assert np.array_equal(out.adversarial, x) and out.gain == 0


def test_facpa_no_gradient_evaluations():
    x = interior(18)
    before = ad.backward_count()
    A.facpa_attack(x, "frozen_cnn:7", A.AttackSpec("facpa", generator=trained_like_generator()))
    assert ad.backward_count() == before


def test_facpa_deviation_below_eps():
    x = interior(19)
    adv = A.craft_facpa(x, None, A.AttackSpec("facpa", generator=trained_like_generator()))
    assert np.abs(adv - x).max() < np.float32(EPS)


def test_facpa_metric_mismatch_warns():
    g = trained_like_generator()
    g.metric = "sobel_sharpness"
    out = A.facpa_attack(interior(), "frozen_cnn:7", A.AttackSpec("facpa", generator=g))
    assert any("trained for" in w for w in out.warnings)


# -- all kinds --------------------------------------------------------------------------------

def spec_for(kind, iters, lr):
    if kind == "facpa":
        return A.AttackSpec(kind, generator=trained_like_generator(iters))
    if kind == "uap":
        d = np.random.default_rng(iters).choice([-EPS, EPS], (3, 8, 8)).astype(np.float32)
        return A.AttackSpec(kind, delta=d)
    return A.AttackSpec(kind, lr=lr, iters=iters, mu=0.7, lambda_fr=0.5)


@given(st.sampled_from(A.KINDS), st.integers(0, 60), st.sampled_from([0.001, 0.004, 0.05]),
       st.integers(0, 10**6), st.sampled_from(["frozen_cnn:7", "sobel_sharpness", "luminance_contrast"]))
def test_linf_and_range_for_every_kind(kind, iters, lr, seed, metric):
    x = np.random.default_rng(seed).uniform(0, 1, (3, 8, 8)).astype(np.float32)
    out = A.run_attack(x, metric, spec_for(kind, iters, lr))
    adv = out.adversarial
    assert adv.shape == x.shape and adv.dtype == np.float32
    assert np.abs(adv.astype(np.float64) - x).max() <= EPS + 1e-7
    assert adv.min() >= 0 and adv.max() <= 1


def test_spec_validation():
    with pytest.raises(A.AttackError, match="unknown"):
        A.AttackSpec("pgd")
    with pytest.raises(A.AttackError):
        A.AttackSpec("ifgsm", iters=-1)
    with pytest.raises(A.AttackError):
        A.AttackSpec("ifgsm", lr=0)
    with pytest.raises(A.AttackError):
        A.AttackSpec("fr_penalized", lambda_fr=-1)


def test_typed_wrapper_checks_kind():
    with pytest.raises(A.AttackError):
        A.ifgsm_attack(interior(), LINEAR, A.AttackSpec("mifgsm"))


def test_invalid_image_rejected():
    with pytest.raises(ValueError):
        A.run_attack(np.full((3, 4, 4), 2.0), LINEAR, A.AttackSpec("ifgsm", iters=1))


def test_labels():
    assert A.AttackSpec("ifgsm", iters=10).label == "ifgsm@10"
    assert A.AttackSpec("facpa").label == "facpa"
