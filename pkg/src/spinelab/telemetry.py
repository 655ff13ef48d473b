"""Per-step metrics, CSV/JSONL emission, entropy histograms and SVG charts."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, fields

import numpy as np

from .policy import DecodeConfig, generate

CSV_SCHEMA_VERSION = 1


@dataclass
class MetricsRecord:
    step: int
    method: str
    seed: int
    updated: int
    mean_vote_reward: float
    consensus_rate: float
    mean_response_length: float
    mean_token_entropy: float
    pass_at_1: float | None
    loss_total: float
    ppo_term: float
    kl_term: float
    band_term: float
    mask_count: int
    ratio_mean: float
    ratio_min: float
    ratio_max: float
    clip_fraction: float
    fork_mask_density: float
    band_violation_rate: float
    wall_clock_s: float = 0.0


# wall-clock time is not reproducible, so it lives in timing.csv instead
CSV_FIELDS = [f.name for f in fields(MetricsRecord) if f.name != "wall_clock_s"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite metric value")
        return repr(v)
    return str(v)


def metrics_csv(records):
    """Render records as CSV text: header row, comma separated, LF endings."""
    buf = io.StringIO()
    buf.write(",".join(CSV_FIELDS) + "\n")
    for r in records:
        buf.write(",".join(_fmt(getattr(r, k)) for k in CSV_FIELDS) + "\n")
    return buf.getvalue()


def write_metrics_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_csv(records))


def write_timing_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,wall_clock_s\n")
        for r in records:
            fh.write(f"{r.step},{r.wall_clock_s!r}\n")


_INT_FIELDS = {"step", "seed", "updated", "mask_count"}


def read_metrics_csv(path):
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"{path}: metrics header does not match schema "
                             f"v{CSV_SCHEMA_VERSION}")
        rows = list(reader)
    out = []
    for row in rows:
        kw = {}
        for k in CSV_FIELDS:
            v = row[k]
            if k == "method":
                kw[k] = v
            elif k in _INT_FIELDS:
                kw[k] = int(v)
            else:
                kw[k] = None if v == "" else float(v)
        out.append(MetricsRecord(**kw))
    return out


def rollout_records(step, groups, bands=None):
    """JSON-ready line records for every rollout of a step.

    ``bands`` optionally lists one threshold pair per rollout, in group order.
    """
    out = []
    band_iter = iter(bands) if bands is not None else None
    for g in groups:
        for i, (r, a) in enumerate(zip(g.rollouts, g.answers)):
            fm = r.fork_mask if r.fork_mask is not None else np.ones(len(r), dtype=bool)
            out.append({
                "step": step, "prompt_id": g.prompt_id, "index": i,
                "response": list(r.response_tokens), "terminated": r.terminated,
                "answer": a.canonical if a.valid else None, "consensus": g.consensus,
                "reward": float(g.rewards[i]), "advantage": float(g.advantages[i]),
                "entropies": [float(h) for h in r.entropies],
                "fork_mask": [int(m) for m in fm],
            })
            if band_iter is not None:
                b = next(band_iter)
                out[-1]["band"] = [b.h_low, b.h_high]
    return out


def append_jsonl(records, fh):
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- entropy distribution -----------------------------------------------------
@dataclass
class EntropyHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    phase: str
    mean: float
    median: float
    q80: float
    n_tokens: int

    def as_dict(self):
        return {"phase": self.phase, "bin_edges": [float(x) for x in self.bin_edges],
                "counts": [int(c) for c in self.counts], "mean": self.mean,
                "median": self.median, "q80": self.q80, "n_tokens": self.n_tokens}


def histogram_from_entropies(entropies, vocab_size, n_bins=20, phase="before_adaptation"):
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    top = math.log(vocab_size)
    h = np.clip(np.asarray(entropies, dtype=np.float64).reshape(-1), 0.0, top)
    counts, edges = np.histogram(h, bins=n_bins, range=(0.0, top))
    return EntropyHistogram(edges, counts, phase, float(h.mean()), float(np.median(h)),
                            float(np.quantile(h, 0.8)), int(h.size))


def sample_entropies(policy, prompts, n_rollouts=8, decode=None, seed=0):
    decode = decode or DecodeConfig()
    rng = np.random.default_rng(seed)
    batch = [p for p in prompts for _ in range(n_rollouts)]
    out = []
    for i in range(0, len(batch), 512):
        out.extend(generate(policy, batch[i:i + 512], decode, rng))
    return np.concatenate([r.entropies for r in out]) if out else np.zeros(0)


def entropy_histogram(policy, instances, n_bins=20, phase="before_adaptation",
                      n_rollouts=8, decode=None, seed=0):
    """Histogram of every sampled response-token entropy on ``[0, log V]``."""
    prompts = [x.prompt_tokens for x in instances]
    ent = sample_entropies(policy, prompts, n_rollouts, decode, seed)
    return histogram_from_entropies(ent, policy.config.vocab_size, n_bins, phase)


# -- charts ---------------------------------------------------------------
PALETTE = ["#1f4fd1", "#d1231f", "#2a9d3c", "#8a3fd1", "#e08a00", "#555555"]


def svg_line_chart(series, title="", xlabel="step", ylabel="", width=480, height=300):
    """Minimal SVG polyline chart; ``series`` maps label -> (xs, ys)."""
    pad_l, pad_r, pad_t, pad_b = 56, 16, 28, 40
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if y is not None]
    if not pts:
        pts = [(0, 0), (1, 1)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>']
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{pad_l - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
        out.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle">{xv:.3g}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="12" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 12 {pad_t + ph / 2:.1f})">{ylabel}</text>')
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if y is not None)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{pad_l + 8}" y="{pad_t + 12 + 13 * k}" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


PANELS = [("mean_vote_reward", "Majority-vote reward"),
          ("mean_response_length", "Response length (tokens)"),
          ("mean_token_entropy", "Mean token entropy (nats)"),
          ("pass_at_1", "Pass@1")]


def series_of(records, key):
    xs, ys = [], []
    for r in records:
        v = getattr(r, key)
        if v is not None:
            xs.append(r.step)
            ys.append(v)
    return xs, ys


def mean_curve(runs, key):
    """Seed-mean of ``key`` at steps where every run reports a value."""
    per_run = [dict(zip(*series_of(rs, key))) for rs in runs]
    steps = sorted(set.intersection(*(set(d) for d in per_run))) if per_run else []
    return steps, [float(np.mean([d[s] for d in per_run])) for s in steps]
