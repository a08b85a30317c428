"""Caption analytics and report emission.

Token-length distributions are measured against the encoder context
limit (77 including specials); over-limit captions are reported with
their overflow, never truncated here. Image/caption cosine alignment
is summarized the same way. Reports are CSV/JSON plus standalone SVG
line charts with the data table embedded, written byte-stably (no
timestamps) so identical inputs produce identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CaptionRecord, EmbeddingStore
from .errors import DataError
from .linalg import l2_normalize
from .tokenizer import BpeVocab, bpe_tokenize


@dataclass(frozen=True)
class StatsSummary:
    count: int
    mean: float
    std: float
    min: float
    max: float
    histogram_edges: tuple[float, ...]
    histogram_counts: tuple[int, ...]

    @classmethod
    def from_values(cls, values, bins: int = 20) -> "StatsSummary":
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            raise DataError("no values to summarize")
        counts, edges = np.histogram(arr, bins=bins)
        return cls(
            count=int(arr.size),
            mean=float(arr.mean()),
            std=float(arr.std()),
            min=float(arr.min()),
            max=float(arr.max()),
            histogram_edges=tuple(float(e) for e in edges),
            histogram_counts=tuple(int(c) for c in counts),
        )

    def as_dict(self) -> dict:
        return {
            "count": self.count, "mean": self.mean, "std": self.std,
            "min": self.min, "max": self.max,
            "histogram_edges": list(self.histogram_edges),
            "histogram_counts": list(self.histogram_counts),
        }


def token_length_stats(
    captions: list[CaptionRecord], vocab: BpeVocab
) -> tuple[StatsSummary, list[dict]]:
    """Token lengths of final captions (specials included) plus overflows."""
    if not captions:
        raise DataError("no captions to analyze")
    lengths = []
    over_limit = []
    for rec in captions:
        n = len(bpe_tokenize(rec.final_text, vocab))
        lengths.append(n)
        if n > vocab.context_limit:
            over_limit.append({
                "sample_id": rec.sample_id,
                "characteristic": rec.characteristic,
                "length": n,
                "overflow": n - vocab.context_limit,
            })
    return StatsSummary.from_values(lengths), over_limit


def clip_score_stats(store: EmbeddingStore, captions: list[CaptionRecord]) -> StatsSummary:
    """Cosine similarity between each caption and its paired image."""
    if not captions:
        raise DataError("no captions to analyze")
    scores = []
    for rec in captions:
        img = l2_normalize(store.image_vector(rec.sample_id))
        txt = l2_normalize(store.text_vector(rec.sample_id, rec.characteristic))
        scores.append(float(img @ txt))
    return StatsSummary.from_values(scores)


# -- report emission ---------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
            "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def svg_line_chart(
    series: dict[str, list[tuple[float, float]]],
    title: str,
    xlabel: str,
    ylabel: str,
) -> str:
    """Standalone SVG line chart; the data table rides in a <desc>."""
    if not series or all(not pts for pts in series.values()):
        raise DataError("nothing to plot: every series is empty")
    width, height = 720, 440
    left, right, top, bottom = 72, 20, 42, 52
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = 0.05 * (y_hi - y_lo) or 0.5
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return left + (x - x_lo) / (x_hi - x_lo) * (width - left - right)

    def py(y: float) -> float:
        return height - bottom - (y - y_lo) / (y_hi - y_lo) * (height - top - bottom)

    rows = ["series,x,y"]
    for name in sorted(series):
        for x, y in series[name]:
            rows.append(f"{name},{_fmt(x)},{_fmt(y)}")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        "<desc>" + "&#10;".join(rows) + "</desc>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" '
        f'y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
        f'<text x="{(left + width - right) / 2:.1f}" y="{height - 12}" '
        f'text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{(top + height - bottom) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(top + height - bottom) / 2:.1f})">{ylabel}</text>',
    ]
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{px(tx):.2f}" y1="{height - bottom}" x2="{px(tx):.2f}" '
                     f'y2="{height - bottom + 4}" stroke="black"/>')
        parts.append(f'<text x="{px(tx):.2f}" y="{height - bottom + 18}" '
                     f'text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{left - 4}" y1="{py(ty):.2f}" x2="{left}" '
                     f'y2="{py(ty):.2f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{py(ty) + 4:.2f}" '
                     f'text-anchor="end">{_fmt(ty)}</text>')
    for i, name in enumerate(sorted(series)):
        pts = series[name]
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" '
                         f'fill="{color}"/>')
        ly = top + 16 * i
        parts.append(f'<line x1="{width - right - 130}" y1="{ly}" '
                     f'x2="{width - right - 110}" y2="{ly}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{width - right - 104}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(
    series: dict[str, list[tuple[float, float]]],
    out_base: str | Path,
    title: str,
    xlabel: str = "x",
    ylabel: str = "y",
) -> list[Path]:
    """Write <base>.svg and <base>.csv for a set of named x/y series."""
    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    svg = svg_line_chart(series, title, xlabel, ylabel)
    svg_path = out_base.with_suffix(".svg")
    csv_path = out_base.with_suffix(".csv")
    svg_path.write_text(svg, encoding="utf-8")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series", "x", "y"])
        for name in sorted(series):
            for x, y in series[name]:
                writer.writerow([name, repr(float(x)), repr(float(y))])
    return [svg_path, csv_path]


def write_stats_json(stats: dict[str, object], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        key: value.as_dict() if isinstance(value, StatsSummary) else value
        for key, value in stats.items()
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
