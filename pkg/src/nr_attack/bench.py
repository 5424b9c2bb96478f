"""Gain and latency benchmark, and report emission (CSV, Markdown, PNG grids)."""

import csv
import io
import math
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin
from threadpoolctl import threadpool_limits

from nr_attack import attacks
from nr_attack.data import to_bytes
from nr_attack.metrics import get_metric

REL_GAIN_FLOOR = 1e-6
GRID_GUTTER = 4
# report.csv holds only deterministic columns; wall-clock timings go to latency.csv
CSV_COLUMNS = ("attack", "iters", "metric", "n_images", "n_undefined", "mean_rel_gain_pct",
               "mean_abs_gain", "epsilon", "seed", "config_digest")
LATENCY_COLUMNS = ("attack", "iters", "metric", "warmup_runs", "measured_runs", "min_ms",
                   "median_ms", "max_ms", "config_digest")


class BenchmarkBusyError(RuntimeError):
    pass


def relative_gain(before, after):
    """Percentage increase ``100 * (after - before) / |before|``; None if |before| < 1e-6."""
    if abs(before) < REL_GAIN_FLOOR:
        return None
    return 100.0 * (after - before) / abs(before)


@dataclass
class GainSummary:
    n_images: int
    n_undefined: int
    mean_rel_gain_pct: float  # nan when every entry is undefined
    mean_abs_gain: float

    @classmethod
    def from_scores(cls, before, after):
        rel = [relative_gain(b, a) for b, a in zip(before, after)]
        defined = [r for r in rel if r is not None]
        abs_gain = [a - b for b, a in zip(before, after)]
        return cls(len(rel), len(rel) - len(defined),
                   math.fsum(defined) / len(defined) if defined else math.nan,
                   math.fsum(abs_gain) / len(abs_gain) if abs_gain else math.nan)


@dataclass
class LatencyStats:
    warmup_runs: int
    measured_runs: int
    min_ms: float
    median_ms: float
    max_ms: float

    @classmethod
    def from_samples(cls, samples_ms, warmup_runs=0):
        if not samples_ms:
            raise ValueError("need at least one timing sample")
        return cls(warmup_runs, len(samples_ms), min(samples_ms),
                   statistics.median(samples_ms), max(samples_ms))


@dataclass
class Evaluation:
    outcomes: list
    summary: GainSummary
    errors: list = field(default_factory=list)  # (image index, message)


def evaluate_attack(spec, metric, images):
    """Attack every image, aggregate gains. Per-image failures are recorded, not raised."""
    metric = get_metric(metric)
    images = list(images)
    if not images:
        raise ValueError("evaluate_attack needs a non-empty dataset")
    outcomes, errors = [], []
    for i, x in enumerate(images):
        try:
            outcomes.append(attacks.run_attack(x, metric, spec))
        except (ValueError, ArithmeticError) as exc:
            errors.append((i, str(exc)))
    summary = GainSummary.from_scores([o.score_before for o in outcomes],
                                      [o.score_after for o in outcomes])
    return Evaluation(outcomes, summary, errors)


_latency_lock = threading.Lock()


def measure_latency(spec, metric, probe, warmup_runs=5, measured_runs=30):
    """Median wall-clock of the attack alone on one image, single-threaded.

    Refuses to run while another latency measurement is in progress.
    """
    if measured_runs < 1 or warmup_runs < 0:
        raise ValueError("need measured_runs >= 1 and warmup_runs >= 0")
    metric = get_metric(metric)
    probe = np.ascontiguousarray(probe, dtype=np.float32)
    if not _latency_lock.acquire(blocking=False):
        raise BenchmarkBusyError("another latency measurement is running")
    try:
        with threadpool_limits(limits=1):
            for _ in range(warmup_runs):
                attacks.craft(probe, metric, spec)
            samples = []
            for _ in range(measured_runs):
                t0 = time.perf_counter_ns()
                attacks.craft(probe, metric, spec)
                samples.append((time.perf_counter_ns() - t0) / 1e6)
    finally:
        _latency_lock.release()
    return LatencyStats.from_samples(samples, warmup_runs)


# -- report ---------------------------------------------------------------

@dataclass
class BenchRow:
    attack: str
    iters: int
    metric: str
    gain: GainSummary
    latency: LatencyStats | None
    epsilon: float
    seed: int
    config_digest: str


@dataclass
class BenchmarkReport:
    rows: list = field(default_factory=list)
    grids: dict = field(default_factory=dict)  # (label, metric) -> [(original, adversarial)]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([r.attack, r.iters, r.metric, r.gain.n_images, r.gain.n_undefined,
                    _fmt(r.gain.mean_rel_gain_pct), _fmt(r.gain.mean_abs_gain),
                    _fmt(r.epsilon), r.seed, r.config_digest])
    return buf.getvalue()


def latency_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LATENCY_COLUMNS)
    for r in report.rows:
        if r.latency is None:
            continue
        t = r.latency
        w.writerow([r.attack, r.iters, r.metric, t.warmup_runs, t.measured_runs,
                    _fmt(t.min_ms), _fmt(t.median_ms), _fmt(t.max_ms), r.config_digest])
    return buf.getvalue()


def read_csv(text):
    """Parse report.csv text back into dicts with numeric fields converted."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        out = dict(rec)
        for k in ("iters", "n_images", "n_undefined", "seed"):
            out[k] = int(rec[k])
        for k in ("mean_rel_gain_pct", "mean_abs_gain", "epsilon"):
            out[k] = float(rec[k]) if rec[k] else None
        rows.append(out)
    return rows


def report_markdown(report):
    """Markdown table: one row per attack x iters, gain/speed columns per metric."""
    metrics, attack_rows, cell = [], [], {}
    for r in report.rows:
        if r.metric not in metrics:
            metrics.append(r.metric)
        key = (r.attack, r.iters if r.attack in attacks.ITERATIVE else None)
        if key not in attack_rows:
            attack_rows.append(key)
        cell[key + (r.metric,)] = r
    best = {}
    for m in metrics:
        gains = [r.gain.mean_rel_gain_pct for r in report.rows
                 if r.metric == m and not math.isnan(r.gain.mean_rel_gain_pct)]
        best[m] = max(gains) if gains else None

    head = "| Attack | It. | " + " | ".join(f"{m} Gain ↑ | {m} Speed ↓" for m in metrics) + " |"
    sep = "|---|---|" + "---|---|" * len(metrics)
    lines = [head, sep]
    for key in attack_rows:
        attack, iters = key
        cells = []
        for m in metrics:
            r = cell.get(key + (m,))
            if r is None:
                cells += ["", ""]
                continue
            g = r.gain.mean_rel_gain_pct
            gs = "n/a" if math.isnan(g) else f"{g:.1f}%"
            if best[m] is not None and not math.isnan(g) and g == best[m]:
                gs = f"**{gs}**"
            sp = f"{r.latency.median_ms:.2f} ms" if r.latency else "-"
            cells += [gs, sp]
        lines.append(f"| {attack} | {'-' if iters is None else iters} | " + " | ".join(cells) + " |")
    digests = sorted({r.config_digest for r in report.rows})
    if digests:
        lines += ["", f"config digest: {', '.join(digests)}"]
    return "\n".join(lines) + "\n"


def grid_image(pairs, gutter=GRID_GUTTER):
    """Stack (original | adversarial) pairs vertically; returns an (H, W, 3) uint8 array."""
    if not pairs:
        raise ValueError("grid needs at least one image pair")
    c, h, w = pairs[0][0].shape
    height = len(pairs) * h + (len(pairs) - 1) * gutter
    canvas = np.full((height, 2 * w + gutter, 3), 255, np.uint8)
    for i, (orig, adv) in enumerate(pairs):
        top = i * (h + gutter)
        canvas[top : top + h, :w] = to_bytes(orig).transpose(1, 2, 0)
        canvas[top : top + h, w + gutter :] = to_bytes(adv).transpose(1, 2, 0)
    return canvas


def grid_name(label, metric):
    safe = lambda s: s.replace(":", "-").replace("@", "-").replace("/", "-")  # noqa: E731
    return f"grid_{safe(label)}_{safe(metric)}.png"


def emit_report(report, out_dir, digest=None):
    """Write report.csv, report.md, latency.csv (if timed) and one PNG grid per (attack, metric).

    Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.csv", out / "report.md"]
    paths[0].write_text(report_csv(report), encoding="utf-8")
    paths[1].write_text(report_markdown(report), encoding="utf-8")
    if any(r.latency is not None for r in report.rows):
        paths.append(out / "latency.csv")
        paths[-1].write_text(latency_csv(report), encoding="utf-8")
    for (label, metric), pairs in report.grids.items():
        if not pairs:
            continue
        info = PngImagePlugin.PngInfo()
        if digest:
            info.add_text("config_digest", digest)
        p = out / grid_name(label, metric)
        Image.fromarray(grid_image(pairs), "RGB").save(p, pnginfo=info)
        paths.append(p)
    return paths
