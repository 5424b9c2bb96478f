"""Run configuration: one JSON document, strict keys, content digest."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from nr_attack.attacks import KINDS, AttackError, AttackSpec
from nr_attack.generator import DEFAULT_EPSILON
from nr_attack.metrics import UnknownMetricError, get_metric


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    manifest: str | None = None  # None: synthesise a corpus
    seed: int | None = None  # synthetic corpus seed; None uses the global seed
    n: int = 640
    size: int = 32
    holdout: int = 128  # bench: the last entries are held out for evaluation


@dataclass
class MetricSection:
    ids: list = field(default_factory=lambda: ["frozen_cnn:7", "sobel_sharpness", "luminance_contrast"])


@dataclass
class GeneratorSection:
    depth: int = 3
    base_channels: int = 16
    epsilon: float = DEFAULT_EPSILON


@dataclass
class AttackEntry:
    kind: str
    lr: float = 0.001
    iters: int = 0
    mu: float = 1.0
    lambda_fr: float = 0.0
    epsilon: float | None = None  # None: generator epsilon
    weights: dict = field(default_factory=dict)  # metric token -> artifact path (facpa, uap)

    def to_spec(self, epsilon):
        return AttackSpec(self.kind, self.lr, self.iters, self.mu, self.lambda_fr,
                          self.epsilon if self.epsilon is not None else epsilon)


@dataclass
class TrainSection:
    mode: str = "facpa"
    batch_size: int = 8
    epochs: int = 20
    lr: float | None = None
    seed: int | None = None  # None uses the global seed


@dataclass
class BenchSection:
    warmup_runs: int = 5
    measured_runs: int = 30
    latency: bool = True
    grid_k: int = 4
    n_images: int | None = None  # cap on evaluated held-out images
    train_missing: bool = True  # train facpa/uap artifacts that have no weights entry


@dataclass
class OutputSection:
    dir: str = "out"
    file: str | None = None


def _default_attacks():
    return [AttackEntry("facpa"), AttackEntry("uap"), AttackEntry("ifgsm", iters=1),
            AttackEntry("ifgsm", iters=10)]


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    metric: MetricSection = field(default_factory=MetricSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    attacks: list = field(default_factory=_default_attacks)
    train: TrainSection = field(default_factory=TrainSection)
    bench: BenchSection = field(default_factory=BenchSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """sha256 of the canonical JSON of everything except the output section."""
        doc = self.to_dict()
        doc.pop("output")
        return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @property
    def data_seed(self):
        return self.seed if self.data.seed is None else self.data.seed

    @property
    def train_seed(self):
        return self.seed if self.train.seed is None else self.train.seed


SECTIONS = {"data": DataSection, "metric": MetricSection, "generator": GeneratorSection,
            "train": TrainSection, "bench": BenchSection, "output": OutputSection}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - {"seed", "attacks", *SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kw = {}
    if "seed" in doc:
        kw["seed"] = doc["seed"]
    for name, cls in SECTIONS.items():
        if name in doc:
            kw[name] = _build(cls, doc[name], name)
    if "attacks" in doc:
        if not isinstance(doc["attacks"], list):
            raise ConfigError("attacks: expected a list")
        kw["attacks"] = [_build(AttackEntry, a, f"attacks[{i}]") for i, a in enumerate(doc["attacks"])]
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def load(path):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(doc)


def validate(cfg):
    """Check every value up front so bad configs fail before any work starts."""
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(isinstance(cfg.seed, int) and not isinstance(cfg.seed, bool), "seed must be an integer")
    d = cfg.data
    need(d.n > 0, "data.n must be > 0")
    need(d.size > 0, "data.size must be > 0")
    need(0 <= d.holdout, "data.holdout must be >= 0")
    need(isinstance(cfg.metric.ids, list) and cfg.metric.ids, "metric.ids must be a non-empty list")
    for tok in cfg.metric.ids:
        try:
            get_metric(tok)
        except UnknownMetricError as exc:
            raise ConfigError(f"metric.ids: {exc}") from None
    g = cfg.generator
    need(g.depth >= 1 and g.base_channels >= 1, "generator depth and base_channels must be >= 1")
    need(0 < g.epsilon < 1, "generator.epsilon must lie in (0, 1)")
    for i, a in enumerate(cfg.attacks):
        need(a.kind in KINDS, f"attacks[{i}]: unknown attack kind {a.kind!r}")
        try:
            a.to_spec(g.epsilon)
        except AttackError as exc:
            raise ConfigError(f"attacks[{i}]: {exc}") from None
        need(isinstance(a.weights, dict), f"attacks[{i}].weights must map metric tokens to paths")
    t = cfg.train
    need(t.mode in ("facpa", "uap"), "train.mode must be 'facpa' or 'uap'")
    need(t.batch_size >= 1 and t.epochs >= 0, "train.batch_size must be >= 1 and train.epochs >= 0")
    need(t.lr is None or t.lr > 0, "train.lr must be positive")
    b = cfg.bench
    need(b.measured_runs >= 1 and b.warmup_runs >= 0, "bench run counts must be positive")
    need(b.grid_k >= 0, "bench.grid_k must be >= 0")
    need(b.n_images is None or b.n_images >= 1, "bench.n_images must be >= 1")
    return cfg
