"""Report writers: ablation CSV and figure, metrics JSON, embedding scatter SVG.

Everything here is byte-deterministic for identical inputs. Floats are written
with ``repr`` (shortest round-trip form) and the PNG is saved without the
software/date metadata matplotlib would otherwise embed.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .model import embed

CSV_FIELDS = ("variant", "seed", "bAcc", "nAcc", "allAcc")
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def ablation_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rows:
        writer.writerow([r["variant"], r["seed"], *(repr(float(r[k])) for k in CSV_FIELDS[2:])])
    return buf.getvalue()


def write_ablation_csv(rows, path):
    Path(path).write_text(ablation_csv(rows))


def plot_ablation(rows, path):
    """Grouped bar chart of the median rows, written as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    medians = [r for r in rows if r["seed"] == "median"]
    metrics = CSV_FIELDS[2:]
    x = np.arange(len(medians))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, m in enumerate(metrics):
        ax.bar(x + (i - 1) * 0.27, [r[m] for r in medians], width=0.27, label=m, color=PALETTE[i])
    ax.set_xticks(x, [r["variant"] for r in medians])
    ax.set_ylim(0, 1)
    ax.set_xlabel("variant")
    ax.set_ylabel("median accuracy")
    ax.legend(loc="upper left", ncols=3, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def metrics_record(metrics, variant, seed):
    return {"variant": variant, "seed": seed, **metrics.to_json()}


def write_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def pca_2d(points):
    """Top-2 principal-component scores with a fixed sign convention.

    Each component is flipped so that its largest-magnitude loading is
    positive. Raises on zero total variance.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"need at least 3 samples for a scatter, got {x.shape[0] if x.ndim == 2 else x.shape}")
    centered = x - x.mean(axis=0)
    if not np.any(np.abs(centered) > 1e-12):
        raise ValueError("degenerate scatter: all embeddings identical (zero variance)")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    scores = centered @ comps.T
    if scores.shape[1] < 2:
        scores = np.hstack([scores, np.zeros((len(scores), 1))])
    return scores


def scatter_svg(coords, labels, names=None, size=480, margin=40):
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("scatter needs at least 2 classes")
    names = names or {}
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    plot = size - 2 * margin
    px = margin + (coords - lo) / span * plot
    px[:, 1] = size - px[:, 1]
    legend_w = 120
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" height="{size}" viewBox="0 0 {size + legend_w} {size}">',
        f'<rect x="0" y="0" width="{size + legend_w}" height="{size}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" fill="none" stroke="#cccccc"/>',
        '<g id="points">',
    ]
    color = {k: PALETTE[i % len(PALETTE)] for i, k in enumerate(classes)}
    for (x, y), k in zip(px, labels.tolist()):
        out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="3" fill="{color[k]}" fill-opacity="0.8" data-class="{k}"/>')
    out.append("</g>")
    out.append('<g id="legend" font-family="sans-serif" font-size="12">')
    for i, k in enumerate(classes):
        y = margin + 18 * i
        out.append(f'<rect x="{size + 8}" y="{y}" width="10" height="10" fill="{color[k]}"/>')
        out.append(f'<text x="{size + 24}" y="{y + 9}">{escape(str(names.get(k, k)))}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_scatter(ckpt, test, path):
    """PCA scatter of test embeddings, one coloured marker per sample."""
    if len(test) < 3:
        raise ValueError(f"need at least 3 samples for a scatter, got {len(test)}")
    coords = pca_2d(embed(ckpt.params, test.x))
    names = {c.class_id: c.name for c in test.classes}
    svg = scatter_svg(coords, test.y, names)
    Path(path).write_text(svg)
    return svg
