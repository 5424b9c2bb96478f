"""Command line: synth | train | attack | bench | verify.

Every command reads an optional JSON run config, applies flag overrides,
validates everything before doing work and stamps the config digest into each
artifact it writes. Exit codes: 0 ok, 2 config/validation error, 3 runtime error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from nr_attack import bench, config, tensorfile
from nr_attack.attacks import ITERATIVE, AttackError, run_attack
from nr_attack.config import AttackEntry, ConfigError
from nr_attack.data import (DatasetError, DatasetManifest, ImageLoadError, load_dataset, load_image,
                            png_text, save_png, synth_corpus)
from nr_attack.generator import UNetConfig, check_divisible, load_params, save_params
from nr_attack.metrics import get_metric
from nr_attack.trainer import TrainConfig, TrainingError, load_uap, save_uap, train_facpa, train_uap

log = logging.getLogger("nr_attack")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
RUN_CONFIG_NAME = "run_config.json"


class CommandError(Exception):
    """An error with an exit code and optional offending path."""

    def __init__(self, message, code=EXIT_RUNTIME, path=None):
        super().__init__(message)
        self.code = code
        self.path = path


def _safe(token):
    return token.replace(":", "-").replace("@", "-").replace("/", "-")


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_run_config(cfg, out_dir):
    _write_json(Path(out_dir) / RUN_CONFIG_NAME, {"config": cfg.to_dict(), "config_digest": cfg.digest()})


def _unet(cfg):
    g = cfg.generator
    return UNetConfig(g.depth, g.base_channels, g.epsilon)


def _train_config(cfg, metric):
    t, g = cfg.train, cfg.generator
    return TrainConfig(metric, t.batch_size, t.epochs, t.lr, cfg.train_seed, g.epsilon, g.depth, g.base_channels)


def _dataset(cfg):
    if cfg.data.manifest is not None:
        return load_dataset(cfg.data.manifest)
    return synth_corpus(cfg.data_seed, cfg.data.n, (cfg.data.size, cfg.data.size))


def _check_trainable(cfg, size):
    try:
        check_divisible(size, _unet(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _weights_for(entry, metric):
    return entry.weights.get(metric, entry.weights.get("*"))


def _load_artifact(kind, path, metric, cfg):
    """Load facpa weights or a uap delta, mapping format problems to config errors."""
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{kind} weights file not found: {p}", EXIT_CONFIG, p)
    try:
        if kind == "facpa":
            params = load_params(p)
            if params.metric and params.metric != metric:
                log.warning("%s was trained for %s, used for %s", p, params.metric, metric)
            return params
        delta, header = load_uap(p)
        if float(np.abs(delta).max(initial=0)) > np.float32(cfg.generator.epsilon):
            raise CommandError(f"{p}: uap delta exceeds epsilon {cfg.generator.epsilon}", EXIT_CONFIG, p)
        return delta
    except tensorfile.TensorFileError as exc:
        raise CommandError(str(exc), EXIT_CONFIG, p) from exc


def _spec(entry, cfg, artifact=None):
    spec = entry.to_spec(cfg.generator.epsilon)
    if entry.kind == "facpa":
        spec.generator = artifact
    elif entry.kind == "uap":
        spec.delta = artifact
    return spec


def _train_artifact(kind, dataset, cfg, metric, digest):
    tc = _train_config(cfg, metric)
    log.info("training %s for %s on %d images (%d epochs)", kind, metric, len(dataset), tc.epochs)
    if kind == "facpa":
        params, history = train_facpa(dataset, tc)
        params.meta["config_digest"] = digest
        return params, {"train_config": asdict(tc), "history_digest": history.digest(),
                        "final_gain": history.steps[-1]["gain"] if history.steps else None}
    delta = train_uap(dataset, tc)
    return delta, {"train_config": asdict(tc)}


def _save_artifact(kind, artifact, path, cfg, metric, digest, extra):
    if kind == "facpa":
        save_params(artifact, path)
    else:
        save_uap(path, artifact, metric, cfg.generator.epsilon,
                 {"config_digest": digest, "train": extra["train_config"]})
    _write_json(str(path) + ".json", {**extra, "kind": kind, "metric": metric,
                                      "config": cfg.to_dict(), "config_digest": digest})


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg):
    d = cfg.data
    if d.n < 1:
        raise ConfigError("data.n must be >= 1")
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    ds = synth_corpus(cfg.data_seed, d.n, (d.size, d.size))
    entries = []
    for image_id, image in zip(ds.manifest.ids, ds.images):
        name = f"{image_id}.png"
        save_png(image, out / name, {"config_digest": digest, "image_id": image_id})
        entries.append((image_id, name))
    manifest = DatasetManifest(entries, cfg.data_seed, (d.size, d.size), {"config_digest": digest})
    manifest.save(out / "manifest.json")
    _write_run_config(cfg, out)
    log.info("wrote %d images and manifest.json to %s", d.n, out)
    return out / "manifest.json"


def cmd_train(cfg):
    metrics = cfg.metric.ids
    if cfg.output.file and len(metrics) != 1:
        raise ConfigError("--out names a single file; give exactly one --metric")
    dataset = _dataset(cfg)
    _check_trainable(cfg, dataset.images.shape)
    digest = cfg.digest()
    kind = cfg.train.mode
    out_dir = Path(cfg.output.dir)
    written = []
    for metric in metrics:
        path = Path(cfg.output.file) if cfg.output.file else out_dir / f"{kind}_{_safe(metric)}.fw"
        path.parent.mkdir(parents=True, exist_ok=True)
        artifact, extra = _train_artifact(kind, dataset, cfg, metric, digest)
        _save_artifact(kind, artifact, path, cfg, metric, digest, extra)
        log.info("wrote %s", path)
        written.append(path)
    return written


def _attack_inputs(cfg, inputs):
    if inputs:
        return [(Path(p).stem, load_image(p)) for p in inputs]
    ds = _dataset(cfg)
    return list(zip(ds.manifest.ids, ds.images))


def cmd_attack(cfg, inputs=()):
    digest = cfg.digest()
    jobs = []
    for entry in cfg.attacks:
        for metric in cfg.metric.ids:
            artifact = None
            if entry.kind in ("facpa", "uap"):
                path = _weights_for(entry, metric)
                if path is None:
                    raise CommandError(f"attack {entry.kind} needs weights for metric {metric}", EXIT_CONFIG)
                artifact = _load_artifact(entry.kind, path, metric, cfg)
            jobs.append((entry, metric, _spec(entry, cfg, artifact)))
    images = _attack_inputs(cfg, inputs)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for image_id, x in images:
        for entry, metric, spec in jobs:
            outcome = run_attack(x, metric, spec)
            stem = f"{image_id}_{_safe(spec.label)}_{_safe(metric)}"
            save_png(outcome.adversarial, out / f"{stem}.png", {"config_digest": digest, "attack": spec.label})
            rel = bench.relative_gain(outcome.score_before, outcome.score_after)
            rec = {"image": image_id, "attack": spec.label, "metric": metric,
                   "score_before": outcome.score_before, "score_after": outcome.score_after,
                   "gain": outcome.gain, "rel_gain_pct": rel,
                   "linf": float(np.abs(outcome.adversarial - x).max(initial=0)),
                   "iterations_run": outcome.iterations_run, "warnings": outcome.warnings,
                   "info": outcome.info, "config_digest": digest}
            _write_json(out / f"{stem}.json", rec)
            records.append(rec)
    _write_run_config(cfg, out)
    log.info("attacked %d image(s) with %d attack(s)", len(images), len(jobs))
    return records


def cmd_bench(cfg):
    digest = cfg.digest()
    b = cfg.bench
    # resolve every artifact before any work, so a bad config fails fast
    plan = []
    for entry in cfg.attacks:
        for metric in cfg.metric.ids:
            artifact, train = None, False
            if entry.kind in ("facpa", "uap"):
                path = _weights_for(entry, metric)
                if path is not None:
                    artifact = _load_artifact(entry.kind, path, metric, cfg)
                elif b.train_missing:
                    train = True
                else:
                    raise CommandError(f"attack {entry.kind} has no weights for {metric} "
                                       "and bench.train_missing is false", EXIT_CONFIG)
            plan.append((entry, metric, artifact, train))
    dataset = _dataset(cfg)
    holdout = cfg.data.holdout
    if not 0 <= holdout < len(dataset):
        raise ConfigError(f"data.holdout={holdout} does not fit a dataset of {len(dataset)} images")
    if holdout == 0:
        train_set, eval_set = dataset, dataset
    else:
        train_set, eval_set = dataset.split(len(dataset) - holdout)
    if any(t for *_, t in plan):
        if len(train_set) == 0:
            raise ConfigError("data.holdout leaves no training images")
        _check_trainable(cfg, dataset.images.shape)
    images = eval_set.images if b.n_images is None else eval_set.images[: b.n_images]

    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    trained = {}
    report = bench.BenchmarkReport()
    for entry, metric, artifact, train in plan:
        if train:
            key = (entry.kind, metric)
            if key not in trained:
                trained[key], extra = _train_artifact(entry.kind, train_set, cfg, metric, digest)
                art_dir = out / "artifacts"
                art_dir.mkdir(exist_ok=True)
                _save_artifact(entry.kind, trained[key], art_dir / f"{entry.kind}_{_safe(metric)}.fw",
                               cfg, metric, digest, extra)
            artifact = trained[key]
        spec = _spec(entry, cfg, artifact)
        log.info("evaluating %s on %s (%d images)", spec.label, metric, len(images))
        ev = bench.evaluate_attack(spec, metric, images)
        for i, msg in ev.errors:
            log.warning("%s on %s, image %d failed: %s", spec.label, metric, i, msg)
        latency = None
        if b.latency:
            latency = bench.measure_latency(spec, metric, images[0], b.warmup_runs, b.measured_runs)
        iters = spec.iters if spec.kind in ITERATIVE else 0
        report.rows.append(bench.BenchRow(spec.kind, iters, metric, ev.summary, latency,
                                          spec.epsilon, cfg.seed, digest))
        pairs = [(images[i], o.adversarial) for i, o in enumerate(ev.outcomes[: b.grid_k])]
        report.grids[(spec.label, metric)] = pairs
    paths = bench.emit_report(report, out, digest)
    _write_run_config(cfg, out)
    log.info("wrote %s", ", ".join(str(p) for p in paths))
    return report


# -- verification -------------------------------------------------------------

def embedded_digest(path):
    """The config digest stamped into an artifact, or None if it carries none."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(tensorfile.MAGIC))
    if head == tensorfile.MAGIC:
        header, _ = tensorfile.read(path)
        return header.get("config_digest")
    suffix = path.suffix.lower()
    if suffix == ".png":
        return png_text(path).get("config_digest")
    if suffix == ".json":
        doc = json.loads(path.read_text())
        return doc.get("config_digest") or doc.get("meta", {}).get("config_digest")
    if suffix == ".csv":
        rows = list(csv.DictReader(path.read_text().splitlines()))
        found = {r.get("config_digest") for r in rows}
        return found.pop() if len(found) == 1 else None
    if suffix == ".md":
        for line in path.read_text().splitlines():
            if line.startswith("config digest:"):
                return line.split(":", 1)[1].strip()
    return None


def _reference_config(path):
    """Find the run config that produced ``path``: a sidecar or a run_config.json nearby."""
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    candidates = [sidecar, path.parent / RUN_CONFIG_NAME, path.parent.parent / RUN_CONFIG_NAME]
    if path.suffix == ".json" and path.name.endswith((".fw.json", ".uap.json")):
        candidates.insert(0, path)
    for c in candidates:
        if c.is_file():
            doc = json.loads(c.read_text())
            if "config" in doc:
                return config.from_dict(doc["config"])
    return None


def cmd_verify(paths, cfg=None):
    """Recompute the digest of the producing config and compare it with each artifact's stamp."""
    failures = 0
    files = []
    for p in map(Path, paths):
        files += sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
    for p in files:
        if p.name == RUN_CONFIG_NAME:
            continue
        try:
            ref = cfg if cfg is not None else _reference_config(p)
            found = embedded_digest(p)
        except (OSError, ValueError) as exc:
            print(f"ERROR {p}: {exc}")
            failures += 1
            continue
        if ref is None:
            print(f"ERROR {p}: no config to verify against (pass --config)")
            failures += 1
        elif found is None:
            print(f"MISSING {p}: no embedded config digest")
            failures += 1
        elif found != ref.digest():
            print(f"MISMATCH {p}: embedded {found[:12]}, expected {ref.digest()[:12]}")
            failures += 1
        else:
            print(f"OK {p}")
    return failures


# -- argument parsing ----------------------------------------------------------

def _overrides(args, cfg):
    """Apply command-line flags on top of the config; flags win."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("seed") is not None:
        cfg.seed = args.seed
    data = {k: get(a) for k, a in (("n", "n"), ("size", "size"), ("manifest", "data"),
                                   ("holdout", "holdout")) if get(a) is not None}
    cfg.data = replace(cfg.data, **data)
    if get("metric"):
        cfg.metric = replace(cfg.metric, ids=list(args.metric))
    if get("epsilon") is not None:
        cfg.generator = replace(cfg.generator, epsilon=args.epsilon)
    train = {k: get(a) for k, a in (("mode", "mode"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                                    ("lr", "train_lr")) if get(a) is not None}
    cfg.train = replace(cfg.train, **train)
    bench_kw = {k: get(k) for k in ("n_images", "measured_runs", "warmup_runs") if get(k) is not None}
    if get("no_latency"):
        bench_kw["latency"] = False
    cfg.bench = replace(cfg.bench, **bench_kw)
    if get("kind"):
        weights = {}
        if get("weights"):
            weights = {m: args.weights for m in cfg.metric.ids} if get("metric") else {"*": args.weights}
        kw = {k: get(k) for k in ("lr", "iters", "mu", "lambda_fr") if get(k) is not None}
        cfg.attacks = [AttackEntry(args.kind, weights=weights, **kw)]
    if get("out") is not None:
        if args.command == "train" and not args.out.endswith(os.sep):
            cfg.output = replace(cfg.output, file=args.out)
        else:
            cfg.output = replace(cfg.output, dir=args.out)
    return config.validate(cfg)


def build_parser():
    ap = argparse.ArgumentParser(prog="nr-attack", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("-q", "--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override its keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (train: weights file)")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic PNG corpus and manifest.json"))
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)

    p = common(sub.add_parser("train", help="train a generator (facpa) or universal perturbation (uap)"))
    p.add_argument("--mode", choices=("facpa", "uap"))
    p.add_argument("--metric", action="append")
    p.add_argument("--data", help="dataset manifest (default: synthesise from the config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", dest="train_lr", type=float)
    p.add_argument("--epsilon", type=float)

    p = common(sub.add_parser("attack", help="attack images, write adversarial PNGs and score JSON"))
    p.add_argument("inputs", nargs="*", help="PNG files (default: the config's dataset)")
    p.add_argument("--data", help="dataset manifest")
    p.add_argument("--kind")
    p.add_argument("--metric", action="append")
    p.add_argument("--weights", help="generator or uap file for facpa/uap")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--lambda-fr", type=float)
    p.add_argument("--epsilon", type=float)

    p = common(sub.add_parser("bench", help="run the attack x metric matrix and write the report"))
    p.add_argument("--data", help="dataset manifest")
    p.add_argument("--metric", action="append")
    p.add_argument("--holdout", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-images", type=int)
    p.add_argument("--measured-runs", type=int)
    p.add_argument("--warmup-runs", type=int)
    p.add_argument("--no-latency", action="store_true", help="skip timing (latency.csv not written)")

    p = sub.add_parser("verify", help="check the config digest embedded in artifacts")
    p.add_argument("paths", nargs="+")
    p.add_argument("--config", help="config to verify against (default: the run config next to each file)")
    return ap


def _error(message, code, path=None):
    doc = {"error": message, "exit_code": code}
    if path is not None:
        doc["path"] = str(path)
    print(f"nr-attack: error: {message}", file=sys.stderr)
    print(json.dumps(doc), file=sys.stderr)
    return code


def _run(args):
    if args.command == "verify":
        cfg = config.load(args.config) if args.config else None
        return EXIT_OK if cmd_verify(args.paths, cfg) == 0 else EXIT_RUNTIME
    cfg = config.load(args.config) if args.config else config.RunConfig()
    cfg = _overrides(args, cfg)
    if args.command == "synth":
        cmd_synth(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "attack":
        cmd_attack(cfg, args.inputs)
    elif args.command == "bench":
        cmd_bench(cfg)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("NR_ATTACK_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        return _error(f"NR_ATTACK_THREADS must be a positive integer, got {threads!r}", EXIT_CONFIG)
    try:
        with threadpool_limits(limits=limit):
            return _run(args)
    except CommandError as exc:
        return _error(str(exc), exc.code, exc.path)
    except (ConfigError, DatasetError) as exc:
        return _error(str(exc), EXIT_CONFIG)
    except ImageLoadError as exc:
        return _error(str(exc), EXIT_RUNTIME, exc.path)
    except (AttackError, TrainingError, tensorfile.TensorFileError, ValueError, OSError) as exc:
        return _error(str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
