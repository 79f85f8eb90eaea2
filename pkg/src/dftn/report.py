"""Evaluation reports: ablation tables, training curves, and flow panels.

Emission is a pure function of its inputs: the same report produces the
same bytes, so reports can be diffed across runs.  Tables follow the row
structure of the usual two-branch ablation write-up: a six-row summary
(each branch and the fused pair, with and without mutual distillation)
and a wider strategy table adding the remaining fusion rules and the two
one-way distillation directions.
"""

import dataclasses
import json
import os

import numpy as np
from PIL import Image, ImageDraw

from .warp import field_to_color


@dataclasses.dataclass
class EvalReport:
    """One evaluation's numbers, validated on construction."""

    seed: int
    config_hash: str
    accuracies: dict
    params: dict = dataclasses.field(default_factory=dict)
    gflops: dict = dataclasses.field(default_factory=dict)
    psnr_mean: float | None = None
    ssim_mean: float | None = None
    confusion: np.ndarray | None = None

    def __post_init__(self):
        for name, value in self.accuracies.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"accuracy {name}={value} outside [0, 1]")
        if self.ssim_mean is not None and not -1.0 <= self.ssim_mean <= 1.0:
            raise ValueError(f"ssim_mean {self.ssim_mean} outside [-1, 1]")
        if self.confusion is not None and (self.confusion < 0).any():
            raise ValueError("confusion counts must be non-negative")

    def to_dict(self):
        out = dataclasses.asdict(self)
        if self.confusion is not None:
            out["confusion"] = self.confusion.tolist()
        return out


def summary_rows(none_scores, bikd_scores):
    """Six-row branch/fused summary; scores are accuracy dicts of a run
    trained without and with the bidirectional term."""
    return [
        ("Grayscale branch (baseline)", none_scores["acc_gray"]),
        ("Deformation flow branch", none_scores["acc_flow"]),
        ("Two-stream", none_scores["acc_mul_prob"]),
        ("Grayscale branch (with BiKD)", bikd_scores["acc_gray"]),
        ("Deformation flow branch (with BiKD)", bikd_scores["acc_flow"]),
        ("Two-stream (with BiKD)", bikd_scores["acc_mul_prob"]),
    ]


def strategy_rows(none_scores, g2d_scores, d2g_scores, bikd_scores):
    """Fusion-strategy and distillation-direction table rows.

    The probability-level strategies all read one trained pair; the
    direction rows report multiplicative fusion of their own runs.
    """
    return [
        ("Grayscale branch", none_scores["acc_gray"]),
        ("Deformation flow branch", none_scores["acc_flow"]),
        ("Avg (probabilities)", none_scores["acc_avg_prob"]),
        ("Avg (FC)", none_scores["acc_avg_fc"]),
        ("Add (Res4)", none_scores["acc_add_res4"]),
        ("Mul (probabilities)", none_scores["acc_mul_prob"]),
        ("Mul (probabilities) (with KD d->g)", d2g_scores["acc_mul_prob"]),
        ("Mul (probabilities) (with KD g->d)", g2d_scores["acc_mul_prob"]),
        ("Mul (probabilities) (with BiKD)", bikd_scores["acc_mul_prob"]),
    ]


def format_markdown_table(title, rows):
    lines = [f"### {title}", "", "| Method | Accuracy (%) |", "| --- | --- |"]
    lines += [f"| {label} | {100.0 * value:.2f} |" for label, value in rows]
    return "\n".join(lines) + "\n"


def format_tsv(rows):
    return "".join(f"{label}\t{100.0 * value:.2f}\n" for label, value in rows)


def _confusion_markdown(confusion):
    k = confusion.shape[0]
    head = "| true\\pred | " + " | ".join(str(j) for j in range(k)) + " |"
    sep = "| --- |" + " --- |" * k
    body = [
        f"| {i} | " + " | ".join(str(int(v)) for v in confusion[i]) + " |"
        for i in range(k)
    ]
    return "\n".join(["### Confusion matrix", "", head, sep, *body]) + "\n"


def emit_report(report, out_dir, tables=None, metrics_rows=None, flow_fields=None):
    """Write report.json / report.md / report.tsv plus optional plots.

    tables: {title: rows} of (label, accuracy) pairs.
    metrics_rows: parsed metrics.jsonl rows; drawn as curves.png.
    flow_fields: (N, 2, H, W) array; drawn as flow_panels.png.
    Returns the list of file paths written, sorted.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(path)

    md = [f"## Evaluation report (seed {report.seed}, config {report.config_hash})", ""]
    for name in sorted(report.accuracies):
        md.append(f"- {name}: {100.0 * report.accuracies[name]:.2f}%")
    if report.psnr_mean is not None:
        md.append(f"- reconstruction PSNR: {report.psnr_mean:.2f} dB")
    if report.ssim_mean is not None:
        md.append(f"- reconstruction SSIM: {report.ssim_mean:.3f}")
    for name in sorted(report.params):
        md.append(f"- {name}: {report.params[name]:,} params")
    for name in sorted(report.gflops):
        md.append(f"- {name}: {report.gflops[name]:.2f} GFLOPs/clip")
    md.append("")
    tsv_parts = []
    for title, rows in (tables or {}).items():
        md.append(format_markdown_table(title, rows))
        tsv_parts.append(f"# {title}\n" + format_tsv(rows))
    if report.confusion is not None:
        md.append(_confusion_markdown(report.confusion))

    path = os.path.join(out_dir, "report.md")
    with open(path, "w") as fh:
        fh.write("\n".join(md))
    written.append(path)

    path = os.path.join(out_dir, "report.tsv")
    with open(path, "w") as fh:
        fh.write("".join(tsv_parts))
    written.append(path)

    if metrics_rows:
        path = os.path.join(out_dir, "curves.png")
        plot_training_curves(metrics_rows, path)
        written.append(path)
    if flow_fields is not None:
        path = os.path.join(out_dir, "flow_panels.png")
        save_flow_panels(flow_fields, path)
        written.append(path)
    return sorted(written)


# ---------------------------------------------------------------------------
# Plots.  Pillow primitives only; nothing here needs a plotting stack.

_PLOT_W, _PLOT_H = 640, 360
_MARGIN = 48
_SERIES_COLORS = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189),
                  (255, 127, 14), (140, 86, 75)]


def _series_from_rows(rows):
    """Pull plottable numeric series out of metrics rows, keyed by name."""
    skip = {"epoch", "phase", "stage", "seconds"}
    series = {}
    for i, row in enumerate(rows):
        for key, value in row.items():
            if key in skip or not isinstance(value, (int, float)):
                continue
            series.setdefault(key, []).append((i, float(value)))
    return {k: v for k, v in series.items() if len(v) >= 2}


def line_plot(series, path, title=""):
    """Draw named (x, y) polylines with axes and a legend to a PNG."""
    img = Image.new("RGB", (_PLOT_W, _PLOT_H), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    left, top = _MARGIN, _MARGIN // 2
    right, bottom = _PLOT_W - _MARGIN // 2, _PLOT_H - _MARGIN
    draw.rectangle([left, top, right, bottom], outline=(120, 120, 120))
    if not series:
        draw.text((left + 8, (top + bottom) // 2), "not enough points to plot",
                  fill=(120, 120, 120))
        img.save(path)
        return

    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def to_px(x, y):
        px = left + (x - x0) / (x1 - x0) * (right - left)
        py = bottom - (y - y0) / (y1 - y0) * (bottom - top)
        return px, py

    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        gy = bottom - frac * (bottom - top)
        draw.line([(left, gy), (right, gy)], fill=(230, 230, 230))
        draw.text((4, gy - 6), f"{y0 + frac * (y1 - y0):.3g}", fill=(80, 80, 80))
        gx = left + frac * (right - left)
        draw.text((gx - 8, bottom + 6), f"{x0 + frac * (x1 - x0):.3g}", fill=(80, 80, 80))

    legend_y = top + 4
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _SERIES_COLORS[i % len(_SERIES_COLORS)]
        draw.line([to_px(x, y) for x, y in pts], fill=color, width=2)
        draw.rectangle([left + 8, legend_y, left + 20, legend_y + 8], fill=color)
        draw.text((left + 26, legend_y - 2), name, fill=(0, 0, 0))
        legend_y += 14
    if title:
        draw.text((left, 4), title, fill=(0, 0, 0))
    img.save(path)


def plot_training_curves(rows, path):
    """Render every numeric column of a metrics log as one curves plot.

    Values are min-max normalized per series so losses, rates, and
    accuracies share the canvas; the legend carries the raw range.
    """
    series = _series_from_rows(rows)
    scaled = {}
    for name, pts in series.items():
        ys = [y for _, y in pts]
        lo, hi = min(ys), max(ys)
        span = (hi - lo) or 1.0
        label = f"{name} [{lo:.3g}, {hi:.3g}]"
        scaled[label] = [(x, (y - lo) / span) for x, y in pts]
    line_plot(scaled, path, title="training curves (per-series normalized)")


def save_flow_panels(fields, path, columns=8, max_panels=16):
    """Tile deformation fields as color panels into one image."""
    fields = np.asarray(fields)[:max_panels]
    n, _, h, w = fields.shape
    columns = min(columns, n)
    rows = (n + columns - 1) // columns
    pad = 2
    canvas = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i in range(n):
        rgb = field_to_color(np.moveaxis(fields[i], 0, -1))
        r, c = divmod(i, columns)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        canvas[y:y + h, x:x + w] = rgb
    Image.fromarray(canvas).save(path)
