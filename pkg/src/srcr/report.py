"""CSV and SVG emitters.  Every artifact starts with a config-hash comment."""

import csv
import io

from .pipeline import ABLATION_LABELS


def hash_comment(config_hash):
    return f"config_sha256={config_hash}"


def _fmt(x):
    return repr(float(x))


def metric_report_csv(report, config_hash, pair=None):
    """``metric,value`` rows followed by the PR curve as ``recall,precision`` rows."""
    buf = io.StringIO()
    buf.write(f"# {hash_comment(config_hash)}\n")
    if pair:
        buf.write(f"# pair={pair}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for name, value in report.scalars().items():
        w.writerow([name, _fmt(value)])
    w.writerow(["queries_skipped", report.skipped_queries])
    w.writerow(["recall", "precision"])
    for recall, precision in report.pr_curve:
        w.writerow([_fmt(recall), _fmt(precision)])
    return buf.getvalue()


def table_csv(header, rows, config_hash):
    buf = io.StringIO()
    buf.write(f"# {hash_comment(config_hash)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def loss_log_csv(rce_history, hsl_history, config_hash):
    rows = [("rce", i + 1, v) for i, v in enumerate(rce_history)]
    rows += [("hsl", i + 1, v) for i, v in enumerate(hsl_history)]
    return table_csv(["stage", "epoch", "loss"], rows, config_hash)


def summary_csv(reports, config_hash):
    """One row per modality pair plus their mean."""
    rows = []
    for pair, report in reports.items():
        s = report.scalars()
        rows.append([pair, s["mAP"], s["NDCG"], s["ANMRR"]])
    n = len(rows)
    rows.append(["mean"] + [sum(r[j] for r in rows) / n for j in (1, 2, 3)])
    return table_csv(["pair", "mAP", "NDCG", "ANMRR"], rows, config_hash)


def ablation_csv(results, config_hash):
    rows = [[ABLATION_LABELS[v], v, r["mAP"], r["NDCG"], r["ANMRR"]] for v, r in results.items()]
    return table_csv(["method", "variant", "mAP", "NDCG", "ANMRR"], rows, config_hash)


def pr_curve_svg(curves, config_hash, title="Precision-recall", width=480, height=360):
    """Self-contained SVG line chart; ``curves`` maps a legend label to (recall, precision) points."""
    left, right, top, bottom = 50, 130, 30, 40
    pw, ph = width - left - right, height - top - bottom
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]

    def x(r):
        return left + r * pw

    def y(p):
        return top + (1.0 - p) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f"<!-- {hash_comment(config_hash)} -->",
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(11):
        t = i / 10
        out.append(f'<line x1="{x(t):.1f}" y1="{top + ph}" x2="{x(t):.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x(t):.1f}" y="{top + ph + 16}" text-anchor="middle">{t:.1f}</text>')
        out.append(f'<line x1="{left - 4}" y1="{y(t):.1f}" x2="{left}" y2="{y(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y(t) + 4:.1f}" text-anchor="end">{t:.1f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">recall</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">precision</text>')
    for j, (label, points) in enumerate(curves.items()):
        colour = palette[j % len(palette)]
        path = " ".join(f"{x(r):.2f},{y(p):.2f}" for r, p in points)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{path}"/>')
        ly = top + 12 + 16 * j
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
