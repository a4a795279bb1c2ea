"""CSV/SVG emission for loss curves and evaluation reports.

Output bytes depend only on the input values: fixed number formatting, no
timestamps, ``\\n`` line endings.
"""
import math
import os
import re
from xml.sax.saxutils import escape

from .metrics import EvalReport

WIDTH, HEIGHT = 640, 400
MARGIN = 56


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _ensure_dir(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")


def _svg_open(title):
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">{escape(title)}</text>',
    ]


def _axes(parts):
    x0, y0, x1, y1 = MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2, MARGIN
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    return x0, y0, x1, y1


def line_chart_svg(xs, ys, title="", x_label="", y_label=""):
    if not xs:
        raise ValueError("line chart needs at least one point")
    parts = _svg_open(title)
    x0, y0, x1, y1 = _axes(parts)
    xmin, xmax = min(xs), max(xs)
    ymin, ymax = min(0.0, min(ys)), max(ys)
    xspan = (xmax - xmin) or 1.0
    yspan = (ymax - ymin) or 1.0
    pts = " ".join(f"{x0 + (x - xmin) / xspan * (x1 - x0):.2f},"
                   f"{y0 - (y - ymin) / yspan * (y0 - y1):.2f}" for x, y in zip(xs, ys))
    parts.append(f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{pts}"/>')
    for frac in (0.0, 0.5, 1.0):
        yv = ymin + frac * yspan
        yp = y0 - frac * (y0 - y1)
        parts.append(f'<text x="{x0 - 6}" y="{yp + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{yv:.4g}</text>')
        xv = xmin + frac * xspan
        xp = x0 + frac * (x1 - x0)
        parts.append(f'<text x="{xp:.2f}" y="{y0 + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{xv:.6g}</text>')
    parts.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">{escape(x_label)}</text>')
    parts.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">{escape(y_label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart_svg(counts, title=""):
    """Horizontal bars, one per (label, value) in insertion order."""
    parts = _svg_open(title)
    items = list(counts.items())
    top = max([v for _, v in items] + [1])
    x0, x1 = MARGIN * 2, WIDTH - MARGIN
    row = (HEIGHT - 2 * MARGIN) / max(len(items), 1)
    for i, (label, value) in enumerate(items):
        y = MARGIN + i * row
        w = (x1 - x0) * value / top
        parts.append(f'<rect x="{x0}" y="{y + row * 0.15:.2f}" width="{w:.2f}" '
                     f'height="{row * 0.7:.2f}" fill="#4c72b0"/>')
        parts.append(f'<text x="{x0 - 6}" y="{y + row / 2 + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="12">{escape(str(label))}</text>')
        parts.append(f'<text x="{x0 + w + 4:.2f}" y="{y + row / 2 + 4:.2f}" '
                     f'font-family="sans-serif" font-size="12">{value}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_loss_curve(history, out_dir, name="loss_curve"):
    """``history`` is a sequence of (iteration, loss)."""
    history = list(history)
    if not history:
        raise ValueError("loss history is empty")
    _ensure_dir(out_dir)
    rows = ["iteration,loss"] + [f"{int(it)},{float(l):.9g}" for it, l in history]
    _write(os.path.join(out_dir, f"{name}.csv"), "\n".join(rows) + "\n")
    xs = [float(it) for it, _ in history]
    ys = [float(l) if math.isfinite(l) else 0.0 for _, l in history]
    _write(os.path.join(out_dir, f"{name}.svg"),
           line_chart_svg(xs, ys, "training loss", "iteration", "loss"))


def emit_counts(counts, out_dir, name, title):
    """``counts`` maps label -> integer; writes ``<name>.csv`` and ``<name>.svg``."""
    if not counts:
        raise ValueError("count table is empty")
    _ensure_dir(out_dir)
    rows = ["class,count"] + [f"{label},{int(v)}" for label, v in counts.items()]
    _write(os.path.join(out_dir, f"{name}.csv"), "\n".join(rows) + "\n")
    _write(os.path.join(out_dir, f"{name}.svg"), bar_chart_svg(counts, title))


def class_name(names, c):
    if names and 0 <= c < len(names):
        return names[c]
    return f"class{c}"


def _slug(text):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def summary_lines(report, names=None):
    lines = [f"mAP={report.map:.4f}"]
    for c in report.classes:
        if c in report.per_class_ap:
            lines.append(f"class {c} ({class_name(names, c)}): AP50={report.per_class_ap[c]:.4f} "
                         f"LAMR={report.lamr[c]:.4f} gt={report.gt_counts[c]} "
                         f"det={report.det_counts[c]} tp={report.tp_counts[c]}")
        else:
            lines.append(f"class {c} ({class_name(names, c)}): no ground truth "
                         f"det={report.det_counts[c]}")
    return lines


def write_report(report, out_dir, names=None):
    _ensure_dir(out_dir)
    ap_rows = ["class_id,name,ap50,lamr,gt,det,tp"]
    count_rows = ["class_id,name,ground_truth,detections,true_positives"]
    for c in report.classes:
        n = class_name(names, c)
        ap = f"{report.per_class_ap[c]:.6f}" if c in report.per_class_ap else ""
        lamr = f"{report.lamr[c]:.6f}" if c in report.lamr else ""
        ap_rows.append(f"{c},{n},{ap},{lamr},{report.gt_counts[c]},{report.det_counts[c]},"
                       f"{report.tp_counts[c]}")
        count_rows.append(f"{c},{n},{report.gt_counts[c]},{report.det_counts[c]},"
                          f"{report.tp_counts[c]}")
        pr = ["recall,precision"] + [f"{r:.6f},{p:.6f}" for r, p in report.pr_curves[c]]
        _write(os.path.join(out_dir, f"pr_{_slug(n)}.csv"), "\n".join(pr) + "\n")
    _write(os.path.join(out_dir, "per_class_ap.csv"), "\n".join(ap_rows) + "\n")
    _write(os.path.join(out_dir, "counts.csv"), "\n".join(count_rows) + "\n")
    _write(os.path.join(out_dir, "report.txt"), "\n".join(summary_lines(report, names)) + "\n")
    gt = {class_name(names, c): report.gt_counts[c] for c in report.classes}
    det = {class_name(names, c): report.det_counts[c] for c in report.classes}
    if gt:
        emit_counts(gt, out_dir, "counts_ground_truth", "Number of objects per class (ground truth)")
        emit_counts(det, out_dir, "counts_detections",
                    "Number of objects per class (detection results)")


def emit_plots(source, out_dir, names=None):
    """Loss history -> loss curve files; EvalReport -> full report with count charts."""
    if isinstance(source, EvalReport):
        write_report(source, out_dir, names)
    else:
        emit_loss_curve(source, out_dir)
