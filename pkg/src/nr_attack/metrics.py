"""Differentiable no-reference quality metrics (higher score = better quality).

Each metric maps a batch tensor (N, 3, H, W) to per-image scores (N,).
Metrics are identified by string tokens: ``sobel_sharpness``,
``luminance_contrast`` and ``frozen_cnn:<seed>``.
"""

from functools import lru_cache

import numpy as np

from nr_attack import autodiff as ad

LUMA = (0.299, 0.587, 0.114)
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
SHARPNESS_KAPPA = 1e-6


class UnknownMetricError(KeyError):
    def __str__(self):
        return f"unknown metric {self.args[0]!r}"


def _batched(x):
    x = ad._as_tensor(x)
    return (ad.reshape(x, (1,) + x.shape), True) if x.ndim == 3 else (x, False)


def luminance(x):
    """(N, 3, H, W) -> (N, 1, H, W) luma."""
    w = np.asarray(LUMA, dtype=x.dtype).reshape(1, 3, 1, 1)
    return ad.sum(x * w, axis=1, keepdims=True)


def sobel_response(y, dtype):
    """Sobel x/y responses of a one-channel batch, reflect padded: (N, 2, H, W)."""
    k = np.stack([SOBEL_X, SOBEL_Y])[:, None].astype(dtype)
    return ad.conv2d(ad.pad(y, 1, "reflect"), ad.Tensor(k))


class Metric:
    token = "metric"

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        xb, single = _batched(x)
        out = self.forward(xb)
        return ad.reshape(out, ()) if single else out

    def score(self, image):
        with ad.no_grad():
            return float(self(np.asarray(image)).data)

    def scores(self, images):
        with ad.no_grad():
            return self(np.asarray(images)).data.astype(np.float64)

    def grad(self, image):
        return ad.grad_scalar(self, np.asarray(image))

    def __repr__(self):
        return f"<metric {self.token}>"


class SobelSharpness(Metric):
    """Mean Sobel gradient magnitude of luma, smoothed by kappa inside the root."""

    token = "sobel_sharpness"

    def __init__(self, kappa=SHARPNESS_KAPPA):
        self.kappa = kappa

    def forward(self, x):
        g = sobel_response(luminance(x), x.dtype)
        mag = ad.sqrt(ad.sum(ad.square(g), axis=1) + self.kappa)
        return ad.mean(mag, axis=(1, 2))


class LuminanceContrast(Metric):
    """Population standard deviation of luma."""

    token = "luminance_contrast"

    def forward(self, x):
        y = luminance(x)
        # shift by a per-image constant first: std is unchanged and a flat image centres to exact zeros
        y = y - ad.Tensor(y.data[:, :, :1, :1].copy())
        centred = y - ad.mean(y, axis=(1, 2, 3), keepdims=True)
        return ad.sqrt(ad.mean(ad.square(centred), axis=(1, 2, 3)))


class FrozenCNN(Metric):
    """Seeded random 3-layer strided CNN with a linear head; weights never trained."""

    slope = 0.1
    widths = (8, 16, 16)

    def __init__(self, seed):
        self.seed = int(seed)
        self.token = f"frozen_cnn:{self.seed}"
        rng = np.random.default_rng(self.seed)
        self.layers = []
        cin = 3
        for cout in self.widths:
            w = rng.uniform(-0.1, 0.1, size=(cout, cin, 3, 3)).astype(np.float32)
            b = rng.uniform(-0.1, 0.1, size=cout).astype(np.float32)
            self.layers.append((w, b))
            cin = cout
        self.head_w = rng.uniform(-0.1, 0.1, size=cin).astype(np.float32)
        self.head_b = np.float32(rng.uniform(-0.1, 0.1))

    def forward(self, x):
        dt = x.dtype
        h = x
        for w, b in self.layers:
            h = ad.leaky_relu(ad.conv2d(h, w.astype(dt), b.astype(dt), stride=2, padding=1), self.slope)
        pooled = ad.mean(h, axis=(2, 3))
        return ad.sum(pooled * self.head_w.astype(dt)[None], axis=1) + dt.type(self.head_b)


class MeanIntensity(Metric):
    """Mean pixel value. A linear probe for closed-form checks; not a quality model."""

    token = "mean_intensity"

    def forward(self, x):
        return ad.mean(x, axis=(1, 2, 3))


class Scaled(Metric):
    """``c * metric`` (c > 0); used to check scale invariance of relative gains."""

    def __init__(self, metric, c):
        if c <= 0:
            raise ValueError("scale must be positive")
        self.metric, self.c = metric, c
        self.token = metric.token

    def forward(self, x):
        return self.metric.forward(x) * self.c


@lru_cache(maxsize=None)
def _from_token(token):
    if token == "sobel_sharpness":
        return SobelSharpness()
    if token == "luminance_contrast":
        return LuminanceContrast()
    name, _, arg = token.partition(":")
    if name == "frozen_cnn":
        try:
            return FrozenCNN(int(arg))
        except ValueError:
            raise UnknownMetricError(token) from None
    raise UnknownMetricError(token)


METRIC_NAMES = ("sobel_sharpness", "luminance_contrast", "frozen_cnn")


def get_metric(metric):
    """Resolve a token such as ``"frozen_cnn:7"`` (or pass a Metric through)."""
    if isinstance(metric, Metric):
        return metric
    if not isinstance(metric, str):
        raise UnknownMetricError(metric)
    return _from_token(metric.strip())


def metric_score(metric, image):
    return get_metric(metric).score(image)


def metric_grad(metric, image):
    return get_metric(metric).grad(image)
