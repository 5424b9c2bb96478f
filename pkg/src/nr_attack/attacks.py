"""Per-image attacks: the feed-forward generator and the baselines it is compared with.

Every attack maximises a metric inside the L-inf ball of radius ``epsilon``
around the input, intersected with the valid range [0, 1]. Iterative attacks
take sign steps of size ``lr``.
"""

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from nr_attack import autodiff as ad
from nr_attack import kernels
from nr_attack.data import check_image
from nr_attack.generator import DEFAULT_EPSILON, GeneratorParams, perturb, unet_forward
from nr_attack.metrics import get_metric, luminance, sobel_response

KINDS = ("facpa", "ifgsm", "mifgsm", "sobel_masked", "fr_penalized", "uap")
ITERATIVE = ("ifgsm", "mifgsm", "sobel_masked", "fr_penalized")
GRAD_NORM_FLOOR = 1e-12
MASK_FLOOR = 1e-8


class AttackError(ValueError):
    pass


@dataclass
class AttackSpec:
    kind: str
    lr: float = 0.001
    iters: int = 0
    mu: float = 1.0
    lambda_fr: float = 0.0
    epsilon: float = DEFAULT_EPSILON
    generator: GeneratorParams | None = None  # facpa
    delta: np.ndarray | None = None  # uap

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.iters < 0:
            raise AttackError("iters must be >= 0")
        if self.epsilon <= 0:
            raise AttackError("epsilon must be positive")
        if self.kind in ITERATIVE and self.lr <= 0:
            raise AttackError("lr must be positive for iterative attacks")
        if self.lambda_fr < 0:
            raise AttackError("lambda_fr must be >= 0")

    @property
    def label(self):
        return f"{self.kind}@{self.iters}" if self.kind in ITERATIVE else self.kind


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    score_before: float
    score_after: float
    elapsed: float  # seconds, attack only
    iterations_run: int
    warnings: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def gain(self):
        return self.score_after - self.score_before


def _require(spec, kind):
    if spec.kind != kind:
        raise AttackError(f"expected a {kind!r} spec, got {spec.kind!r}")


def _prepare(x):
    return np.ascontiguousarray(check_image(x), dtype=np.float32)


def _ascent(x0, spec, grad_fn, mask=None, momentum=False):
    """Projected sign ascent from ``x0``; the ball radius is ``epsilon * mask``."""
    eps = np.float32(spec.epsilon)
    budget = eps if mask is None else eps * mask
    lo = np.maximum(x0 - budget, 0).astype(np.float32)
    hi = np.minimum(x0 + budget, 1).astype(np.float32)
    x = x0.copy()
    acc = np.zeros_like(x0) if momentum else None
    for _ in range(spec.iters):
        g = grad_fn(x)
        if momentum:
            l1 = float(np.abs(g).sum(dtype=np.float64))
            normed = g / np.float32(l1) if l1 >= GRAD_NORM_FLOOR else np.zeros_like(g)
            acc = np.float32(spec.mu) * acc + normed
            g = acc
        kernels.projected_sign_step(x, g, spec.lr, lo, hi, mask)
    return x


def craft_ifgsm(x, metric, spec):
    metric = get_metric(metric)
    return _ascent(_prepare(x), spec, metric.grad)


def craft_mifgsm(x, metric, spec):
    metric = get_metric(metric)
    return _ascent(_prepare(x), spec, metric.grad, momentum=True)


def sobel_mask(x):
    """Normalised Sobel magnitude of luma, in [0, 1], repeated over 3 channels."""
    x = np.asarray(x, dtype=np.float32)
    with ad.no_grad():
        g = sobel_response(luminance(ad.Tensor(x[None])), x.dtype).data[0]
    mag = np.sqrt(g[0] ** 2 + g[1] ** 2)
    mask = mag / max(float(mag.max()), MASK_FLOOR)
    return np.repeat(mask[None], 3, axis=0).astype(np.float32)


def craft_sobel_masked(x, metric, spec, mask=None):
    """I-FGSM with steps and budget scaled per pixel by the Sobel mask of ``x``."""
    metric = get_metric(metric)
    x0 = _prepare(x)
    mask = sobel_mask(x0) if mask is None else np.ascontiguousarray(mask, dtype=np.float32)
    return _ascent(x0, spec, metric.grad, mask=mask)


def craft_fr_penalized(x, metric, spec):
    """Sign ascent on ``M(x') - lambda_fr * MSE(x', x)``."""
    metric = get_metric(metric)
    x0 = _prepare(x)
    ref = ad.Tensor(x0)

    def objective(t):
        return metric(t) - ad.mean(ad.square(t - ref)) * spec.lambda_fr

    return _ascent(x0, spec, lambda v: ad.grad_scalar(objective, v))


def fit_delta(delta, shape):
    """Tile then crop a universal perturbation to ``shape``."""
    delta = np.asarray(delta, dtype=np.float32)
    if delta.ndim != 3 or delta.shape[0] != shape[0] or 0 in delta.shape:
        raise AttackError(f"universal perturbation of shape {delta.shape} cannot be fitted to image shape {tuple(shape)}")
    reps = (1, -(-shape[1] // delta.shape[1]), -(-shape[2] // delta.shape[2]))
    return np.ascontiguousarray(np.tile(delta, reps)[:, : shape[1], : shape[2]])


def apply_uap(x, delta, epsilon=DEFAULT_EPSILON):
    x0 = _prepare(x)
    d = fit_delta(delta, x0.shape)
    if float(np.abs(d).max(initial=0)) > np.float32(epsilon):
        raise AttackError("universal perturbation exceeds the epsilon budget")
    return perturb(x0, d)


def craft_uap(x, metric, spec):
    if spec.delta is None:
        raise AttackError("uap spec has no trained perturbation")
    return apply_uap(x, spec.delta, spec.epsilon)


def craft_facpa(x, metric, spec):
    """One generator forward pass; never evaluates a gradient."""
    if spec.generator is None:
        raise AttackError("facpa spec has no generator weights")
    x0 = _prepare(x)
    return perturb(x0, unet_forward(spec.generator, x0))


CRAFTERS = {
    "ifgsm": craft_ifgsm,
    "mifgsm": craft_mifgsm,
    "sobel_masked": craft_sobel_masked,
    "fr_penalized": craft_fr_penalized,
    "uap": craft_uap,
    "facpa": craft_facpa,
}


def craft(x, metric, spec):
    """The attack itself (the part that is timed): returns the adversarial image."""
    return CRAFTERS[spec.kind](x, metric, spec)


def run_attack(x, metric, spec, **kwargs):
    """Attack one image and score it before and after (scoring is not timed)."""
    metric = get_metric(metric)
    x0 = _prepare(x)
    warnings, info = [], {}
    if spec.kind == "facpa" and spec.generator is not None:
        trained_for = spec.generator.metric
        if trained_for and trained_for != metric.token:
            warnings.append(f"generator was trained for {trained_for}, applied to {metric.token}")
        if spec.generator.config.epsilon > spec.epsilon:
            warnings.append("generator epsilon exceeds the attack epsilon")
    if spec.kind == "uap" and spec.delta is not None:
        d = fit_delta(spec.delta, x0.shape)
        info["delta_sha256"] = hashlib.sha256(d.tobytes()).hexdigest()
    t0 = time.perf_counter()
    if spec.kind == "sobel_masked":
        adv = craft_sobel_masked(x0, metric, spec, **kwargs)
    else:
        adv = craft(x0, metric, spec)
    elapsed = time.perf_counter() - t0
    iters = spec.iters if spec.kind in ITERATIVE else 0
    return AttackOutcome(adv, metric.score(x0), metric.score(adv), elapsed, iters, warnings, info)


def _typed(kind):
    def attack(x, metric, spec, **kwargs):
        _require(spec, kind)
        return run_attack(x, metric, spec, **kwargs)

    attack.__name__ = f"{kind}_attack"
    attack.__doc__ = f"Run a {kind!r} attack and return an AttackOutcome."
    return attack


ifgsm_attack = _typed("ifgsm")
mifgsm_attack = _typed("mifgsm")
sobel_masked_attack = _typed("sobel_masked")
fr_penalized_attack = _typed("fr_penalized")
uap_attack = _typed("uap")
facpa_attack = _typed("facpa")
