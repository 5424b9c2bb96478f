"""Image ingestion, synthetic training corpora and seeded batching.

Images are float32 arrays of shape (3, H, W) with values in [0, 1].
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin


class ImageLoadError(OSError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class DatasetError(ValueError):
    pass


def check_image(image):
    """Raise ValueError unless ``image`` is a valid (3, H, W) image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image has non-finite values")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError(f"image values outside [0, 1]: [{image.min()}, {image.max()}]")
    return image


def _fit(arr, target):
    """Center-crop each spatial axis larger than target, reflect-pad smaller ones."""
    th, tw = target
    h, w = arr.shape[1:]
    top, left = max(0, (h - th) // 2), max(0, (w - tw) // 2)
    arr = arr[:, top : top + th, left : left + tw]
    h, w = arr.shape[1:]
    if (h, w) != (th, tw):
        ph, pw = th - h, tw - w
        mode = "reflect" if min(h, w) > 1 else "symmetric"
        arr = np.pad(arr, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode=mode)
    return arr


def load_image(path, target_size=None):
    """Read an 8-bit RGB or grayscale PNG as a (3, H, W) float32 image.

    Bytes map to v/255, grayscale is replicated to three channels, an alpha
    channel is dropped. With ``target_size`` the image is center-cropped and
    then reflect-padded to (H, W).
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            fmt, mode = im.format, im.mode
            if fmt != "PNG":
                raise ImageLoadError(path, f"not a PNG file (format {fmt})")
            if mode in ("L", "LA"):
                raw = np.asarray(im.getchannel(0), dtype=np.uint8)[None].repeat(3, axis=0)
            elif mode in ("RGB", "RGBA"):
                raw = np.asarray(im, dtype=np.uint8)[..., :3].transpose(2, 0, 1)
            elif mode == "P":
                raw = np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
            else:
                raise ImageLoadError(path, f"unsupported PNG mode {mode!r} (need 8-bit RGB or grayscale)")
    except ImageLoadError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageLoadError(path, f"unreadable image ({exc})") from exc
    img = raw.astype(np.float32) / np.float32(255)
    if target_size is not None:
        img = _fit(img, target_size)
    return np.ascontiguousarray(img)


def to_bytes(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def save_png(image, path, text=None):
    """Write a (3, H, W) image as 8-bit RGB PNG; ``text`` adds tEXt chunks."""
    info = None
    if text:
        info = PngImagePlugin.PngInfo()
        for k, v in text.items():
            info.add_text(k, str(v))
    Image.fromarray(to_bytes(image).transpose(1, 2, 0), "RGB").save(path, pnginfo=info)


def png_text(path):
    with Image.open(path) as im:
        return dict(getattr(im, "text", {}) or {})


# -- manifests ------------------------------------------------------------

@dataclass
class DatasetManifest:
    entries: list  # [(image_id, source)]; source is a file path or "synth:<seed>:<index>"
    seed: int
    target_size: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = [(str(i), str(s)) for i, s in self.entries]
        self.target_size = tuple(int(v) for v in self.target_size)
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest image ids must be unique")

    @property
    def ids(self):
        return [i for i, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def to_json(self):
        doc = {"entries": [list(e) for e in self.entries], "seed": self.seed,
               "target_size": list(self.target_size)}
        if self.meta:
            doc["meta"] = self.meta
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"{path}: cannot read manifest ({exc})") from exc
        unknown = set(doc) - {"entries", "seed", "target_size", "meta"}
        if unknown or not {"entries", "seed", "target_size"} <= set(doc):
            raise DatasetError(f"{path}: manifest needs keys entries, seed, target_size (unknown: {sorted(unknown)})")
        return cls(doc["entries"], int(doc["seed"]), doc["target_size"], doc.get("meta", {}))


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # (N, 3, H, W) float32, in manifest order

    def __len__(self):
        return len(self.manifest)

    def subset(self, ids):
        pos = {i: k for k, i in enumerate(self.manifest.ids)}
        idx = [pos[i] for i in ids]
        return self.images[idx]

    def split(self, n_first):
        """First ``n_first`` entries and the rest, as two datasets."""
        m = self.manifest
        a = DatasetManifest(m.entries[:n_first], m.seed, m.target_size, dict(m.meta))
        b = DatasetManifest(m.entries[n_first:], m.seed, m.target_size, dict(m.meta))
        return Dataset(a, self.images[:n_first]), Dataset(b, self.images[n_first:])


def load_dataset(manifest_path):
    """Load a manifest and its images; relative file sources resolve next to it."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    images = []
    for _, source in manifest.entries:
        if source.startswith("synth:"):
            _, seed, index = source.split(":")
            images.append(synth_image(int(seed), int(index), manifest.target_size))
        else:
            p = Path(source)
            if not p.is_absolute():
                p = manifest_path.parent / p
            images.append(load_image(p, manifest.target_size))
    if not images:
        raise DatasetError(f"{manifest_path}: manifest has no entries")
    return Dataset(manifest, np.stack(images))


# -- synthetic corpus ------------------------------------------------------

def synth_image(seed, index, size):
    """One procedural image: smooth ramps, Gaussian blobs, band-limited noise, step edges."""
    h, w = size
    rng = np.random.default_rng([int(seed), int(index)])
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")

    base = rng.uniform(0.15, 0.85, size=(3, 1, 1))
    slope = rng.normal(0, 0.25, size=(3, 2, 1, 1))
    img = base + slope[:, 0] * xx + slope[:, 1] * yy

    for _ in range(rng.integers(0, 4)):
        cy, cx = rng.uniform(-1, 1, 2)
        sigma = rng.uniform(0.1, 0.6)
        amp = rng.normal(0, 0.35, size=(3, 1, 1))
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))

    # band-limited noise: white noise low-passed in the Fourier domain
    cutoff = rng.uniform(0.1, 0.5)
    fy, fx = np.meshgrid(np.fft.fftfreq(h), np.fft.fftfreq(w), indexing="ij")
    lowpass = np.sqrt(fy**2 + fx**2) <= cutoff / 2
    noise = np.fft.ifft2(np.fft.fft2(rng.normal(size=(3, h, w))) * lowpass).real
    noise /= noise.std() + 1e-12
    img = img + rng.uniform(0.0, 0.12) * noise

    for _ in range(rng.integers(0, 3)):
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.6, 0.6)
        side = (np.cos(theta) * xx + np.sin(theta) * yy) > offset
        img = img + rng.normal(0, 0.3, size=(3, 1, 1)) * side

    return np.clip(img, 0, 1).astype(np.float32)


def synth_corpus(seed, n, size=(32, 32)):
    """``n`` procedural images fully determined by ``seed``; returns a Dataset."""
    if n <= 0:
        raise DatasetError("synth_corpus needs n > 0")
    size = tuple(int(v) for v in size)
    images = np.stack([synth_image(seed, i, size) for i in range(n)])
    entries = [(f"synth_{seed}_{i:05d}", f"synth:{seed}:{i}") for i in range(n)]
    return Dataset(DatasetManifest(entries, seed, size), images)


def corpus_digest(images):
    return hashlib.sha256(np.ascontiguousarray(images, dtype=np.float32).tobytes()).hexdigest()


def make_batches(manifest, batch_size, epoch_seed):
    """Seeded permutation of the manifest ids cut into batches (last one may be short)."""
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    ids = manifest.ids if isinstance(manifest, DatasetManifest) else list(manifest)
    if not ids:
        raise DatasetError("cannot batch an empty manifest")
    perm = np.random.default_rng(epoch_seed).permutation(len(ids))
    return [[ids[j] for j in perm[k : k + batch_size]] for k in range(0, len(ids), batch_size)]
