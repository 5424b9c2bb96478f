"""Training loops: the perturbation generator and the universal perturbation.

The generator objective is the batch mean of ``M(x + f(x)) - M(x)``; the clean
term does not depend on the parameters, so by default it is dropped and the
loss is just the negated mean attacked score.
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from nr_attack import autodiff as ad
from nr_attack import kernels, tensorfile
from nr_attack.data import make_batches
from nr_attack.generator import DEFAULT_EPSILON, GeneratorParams, UNetConfig, init_params, unet_apply
from nr_attack.metrics import get_metric

log = logging.getLogger(__name__)

FACPA_LR = 1e-4
UAP_LR = 1e-3


class TrainingError(RuntimeError):
    def __init__(self, step, reason):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class TrainConfig:
    metric: str = "frozen_cnn:7"
    batch_size: int = 8
    epochs: int = 20
    lr: float | None = None  # None: FACPA_LR for the generator, UAP_LR for the UAP
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    depth: int = 3
    base_channels: int = 16

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")

    def unet(self):
        return UNetConfig(self.depth, self.base_channels, self.epsilon)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)  # dicts: step, loss, gain
    wall_clock: float = 0.0

    def record(self, step, loss, gain):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("history steps must be strictly increasing")
        self.steps.append({"step": step, "loss": float(loss), "gain": float(gain)})

    def digest(self):
        return hashlib.sha256(json.dumps(self.steps).encode()).hexdigest()


def epoch_batches(manifest, config, epoch):
    return make_batches(manifest, config.batch_size, [config.seed, epoch])


def _as_tensors(params):
    if isinstance(params, GeneratorParams):
        return {k: ad.Tensor(v) for k, v in params.tensors.items()}
    return params


def facpa_loss(params, batch, metric, config=None, keep_clean_term=False):
    """``-mean_i M(x_i + f(x_i))`` as a scalar tensor.

    ``params`` is a GeneratorParams or a dict of tensors (then ``config`` is
    the UNetConfig). With ``keep_clean_term`` the parameter-independent
    ``+ mean_i M(x_i)`` is added, giving the negated mean gain.
    """
    metric = get_metric(metric)
    config = config or params.config
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[None]
    if len(batch) == 0:
        raise ValueError("facpa_loss needs a non-empty batch")
    x = ad.Tensor(batch)
    pert = unet_apply(_as_tensors(params), x, config)
    attacked = metric(ad.clamp(x + pert, 0, 1))
    loss = -ad.mean(attacked)
    if keep_clean_term:
        loss = loss + ad.mean(metric(x))
    return loss


def facpa_step(params, state, batch, metric, lr, keep_clean_term=False):
    """One Adam step on the generator loss; returns (params, state, loss)."""
    names = list(params.tensors)
    leaves = [ad.Tensor(params.tensors[n], requires_grad=True) for n in names]
    loss = facpa_loss(dict(zip(names, leaves)), batch, metric, params.config, keep_clean_term)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(state.step_count, "non-finite loss")
    grads = dict(zip(names, ad.gradients(loss, leaves)))
    new, state = ad.adam_step(params.tensors, grads, state, lr)
    return params.with_tensors(new), state, value


def train_facpa(dataset, config, keep_clean_term=False):
    """Train a generator for ``config.metric``; returns (GeneratorParams, TrainHistory)."""
    metric = get_metric(config.metric)
    lr = config.lr if config.lr is not None else FACPA_LR
    params = init_params(config.unet(), config.seed)
    params.metric = metric.token
    state = ad.adam_init(params.tensors)
    history = TrainHistory()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        for ids in epoch_batches(dataset.manifest, config, epoch):
            batch = dataset.subset(ids)
            try:
                params, state, loss = facpa_step(params, state, batch, metric, lr, keep_clean_term)
            except ad.AutodiffError as exc:
                raise TrainingError(step, str(exc)) from exc
            # same reduction as the loss, so an identity generator records a gain of exactly 0
            with ad.no_grad():
                clean_mean = float(ad.mean(metric(batch)).data)
            attacked_mean = clean_mean - loss if keep_clean_term else -loss
            history.record(step, loss, attacked_mean - clean_mean)
            step += 1
        if history.steps:
            log.info("epoch %d: step %d loss %.6g gain %.6g", epoch, step,
                     history.steps[-1]["loss"], history.steps[-1]["gain"])
    history.wall_clock = time.perf_counter() - t0
    params.meta["train"] = {**asdict(config), "lr": lr, "history_digest": history.digest()}
    return params, history


def uap_objective(delta, batch, metric):
    return ad.mean(metric(ad.clamp(ad.Tensor(batch) + delta, 0, 1)))


def train_uap(dataset, config, steps=None):
    """Universal perturbation by projected sign ascent on the batch-mean score.

    Uses the same seeded batch schedule as :func:`train_facpa`, so by default
    both get the same number of optimizer steps. ``steps`` caps the count.
    """
    metric = get_metric(config.metric)
    images = dataset.images
    if len({im.shape for im in images}) > 1:
        raise ValueError("train_uap needs images of a single size")
    lr = config.lr if config.lr is not None else UAP_LR
    eps = np.float32(config.epsilon)
    delta = np.zeros(images.shape[1:], np.float32)
    lo, hi = np.full_like(delta, -eps), np.full_like(delta, eps)
    step = 0
    for epoch in range(config.epochs):
        for ids in epoch_batches(dataset.manifest, config, epoch):
            if steps is not None and step >= steps:
                return delta
            g = ad.grad_scalar(lambda d: uap_objective(d, dataset.subset(ids), metric), delta)
            if not np.all(np.isfinite(g)):
                raise TrainingError(step, "non-finite gradient")
            kernels.projected_sign_step(delta, g, lr, lo, hi)
            step += 1
    return delta


def save_uap(path, delta, metric, epsilon, meta=None):
    """Store a universal perturbation as a single ``uap_delta`` tensor."""
    header = {"kind": "uap", "metric": metric, "epsilon": float(epsilon), **(meta or {})}
    tensorfile.write(path, header, {"uap_delta": np.asarray(delta, np.float32)})


def load_uap(path):
    """Returns (delta, header)."""
    header, tensors = tensorfile.read(path)
    if header.get("kind") != "uap" or list(tensors) != ["uap_delta"]:
        raise tensorfile.ParamShapeError(path, "not a universal perturbation file")
    delta = tensors["uap_delta"]
    if delta.ndim != 3 or delta.shape[0] != 3:
        raise tensorfile.ParamShapeError(path, f"uap_delta has shape {delta.shape}, expected (3, H, W)")
    return delta, header
