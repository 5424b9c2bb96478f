"""The feed-forward perturbation generator: a small U-Net followed by eps * tanh."""

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from nr_attack import autodiff as ad
from nr_attack import tensorfile

DEFAULT_EPSILON = 10 / 255


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    epsilon: float = DEFAULT_EPSILON
    upsample: str = "nearest"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("UNet depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.upsample != "nearest":
            raise ValueError("only nearest-neighbour upsampling is supported")

    def channels(self, level):
        return self.base_channels * 2**level

    @property
    def multiple(self):
        return 2**self.depth


@dataclass
class GeneratorParams:
    config: UNetConfig
    tensors: dict  # name -> float32 array, in creation order
    metric: str | None = None
    meta: dict = field(default_factory=dict)

    def digest(self):
        h = hashlib.sha256(repr(asdict(self.config)).encode())
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
        return h.hexdigest()

    def with_tensors(self, tensors):
        return GeneratorParams(self.config, dict(tensors), self.metric, dict(self.meta))


def param_shapes(config):
    """Ordered (name, shape) pairs for every conv kernel and bias."""
    shapes = []

    def conv(name, cin, cout):
        shapes.append((f"{name}.w", (cout, cin, 3, 3)))
        shapes.append((f"{name}.b", (cout,)))

    ch = config.channels
    cin = 3
    for lvl in range(config.depth):
        conv(f"enc{lvl}.c1", cin, ch(lvl))
        conv(f"enc{lvl}.c2", ch(lvl), ch(lvl))
        cin = ch(lvl)
    for lvl in reversed(range(config.depth)):
        conv(f"dec{lvl}.up", ch(min(lvl + 1, config.depth - 1)), ch(lvl))
        conv(f"dec{lvl}.c1", 2 * ch(lvl), ch(lvl))
        conv(f"dec{lvl}.c2", ch(lvl), ch(lvl))
    conv("out", ch(0), 3)
    return shapes


def init_params(config=None, seed=0):
    """Kaiming-uniform interior convs, zero biases, all-zero output layer."""
    config = config or UNetConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config):
        if name.startswith("out.") or name.endswith(".b"):
            tensors[name] = np.zeros(shape, np.float32)
        else:
            bound = np.sqrt(6.0 / (shape[1] * shape[2] * shape[3]))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return GeneratorParams(config, tensors)


def check_divisible(shape, config):
    h, w = shape[-2:]
    m = config.multiple
    if h % m or w % m:
        raise ValueError(
            f"image size {h}x{w} is not divisible by {m} (2**depth); "
            f"pad the input to a multiple of {m} first")


def unet_apply(tensors, x, config):
    """Differentiable forward pass: (N, 3, H, W) tensor -> perturbation tensor.

    Encoder level l runs two conv+relu at ``base * 2**l`` channels and then
    halves the resolution; the decoder mirrors it (nearest upsample, conv+relu,
    concat with the skip, two conv+relu) and a last conv feeds eps * tanh.
    """
    check_divisible(x.shape, config)
    p = tensors

    def block(name, h):
        return ad.relu(ad.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], padding=1))

    skips, h = [], x
    for lvl in range(config.depth):
        h = block(f"enc{lvl}.c2", block(f"enc{lvl}.c1", h))
        skips.append(h)
        h = ad.avg_pool2(h)
    for lvl in reversed(range(config.depth)):
        up = block(f"dec{lvl}.up", ad.upsample2(h))
        h = ad.concat([skips[lvl], up], axis=1)
        h = block(f"dec{lvl}.c2", block(f"dec{lvl}.c1", h))
    raw = ad.conv2d(h, p["out.w"], p["out.b"], padding=1)
    return ad.scaled_tanh(raw, config.epsilon)


def unet_forward(params, image):
    """Perturbation field for one image (3, H, W) or a batch (N, 3, H, W).

    Inference only: no tape is recorded.
    """
    image = np.asarray(image, dtype=np.float32)
    single = image.ndim == 3
    x = image[None] if single else image
    with ad.no_grad():
        out = unet_apply(params.tensors, ad.Tensor(x), params.config).data
    return out[0] if single else out


def perturb(image, field):
    """``clip(image + field, 0, 1)``."""
    image, field = np.asarray(image), np.asarray(field)
    if image.shape != field.shape:
        raise ValueError(f"perturbation shape {field.shape} does not match image shape {image.shape}")
    return np.clip(image + field, 0, 1)


# -- persistence ------------------------------------------------------------

def _header(params):
    head = asdict(params.config)
    head["kind"] = "facpa"
    head["metric"] = params.metric
    head.update(params.meta)
    return head


def save_params(params, path):
    tensorfile.write(path, _header(params), params.tensors)


def load_params(path):
    header, tensors = tensorfile.read(path)
    if header.get("kind") != "facpa":
        raise tensorfile.ParamShapeError(path, f"not a generator weights file (kind={header.get('kind')!r})")
    try:
        config = UNetConfig(int(header["depth"]), int(header["base_channels"]),
                            float(header["epsilon"]), header.get("upsample", "nearest"))
    except (KeyError, ValueError) as exc:
        raise tensorfile.ParamShapeError(path, f"invalid generator config in header ({exc})") from exc
    expected = param_shapes(config)
    if [n for n, _ in expected] != list(tensors):
        raise tensorfile.ParamShapeError(path, "tensor names do not match the generator config")
    for name, shape in expected:
        if tensors[name].shape != shape:
            raise tensorfile.ParamShapeError(
                path, f"tensor {name!r} has shape {tensors[name].shape}, config expects {shape}")
    meta = {k: v for k, v in header.items()
            if k not in ("depth", "base_channels", "epsilon", "upsample", "kind", "metric")}
    return GeneratorParams(config, tensors, header.get("metric"), meta)
