"""Static SVG figures rebuilt from the CSV outputs of an experiment run.

Everything here reads CSV files only, so figures can be regenerated
offline from a results directory without re-running training.
"""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
W, H = 640, 260
PAD_L, PAD_R, PAD_T, PAD_B = 56, 16, 28, 36


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _scale(lo, hi, a, b):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) * (b - a) / (hi - lo)


def _frame(title: str, xlo, xhi, ylo, yhi, height=H) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" '
        f'viewBox="0 0 {W} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{height}" fill="white"/>',
        f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{PAD_L}" y="{PAD_T}" width="{W - PAD_L - PAD_R}" '
        f'height="{height - PAD_T - PAD_B}" fill="none" stroke="#444"/>',
    ]
    for x, anchor in ((PAD_L, "start"), (W - PAD_R, "end")):
        label = _fmt(xlo if anchor == "start" else xhi)
        out.append(f'<text x="{x}" y="{height - PAD_B + 14}" text-anchor="{anchor}">{label}</text>')
    for y, v in ((height - PAD_B, ylo), (PAD_T + 10, yhi)):
        out.append(f'<text x="{PAD_L - 4}" y="{y}" text-anchor="end">{_fmt(v)}</text>')
    return out


def line_plot(series: dict, title: str, *, step=False, height=H) -> str:
    """``series`` maps a legend label to ``(xs, ys)``."""
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    xlo, xhi = min(xs_all), max(xs_all)
    ylo, yhi = min(ys_all), max(ys_all)
    sx = _scale(xlo, xhi, PAD_L, W - PAD_R)
    sy = _scale(ylo, yhi, height - PAD_B, PAD_T)
    out = _frame(title, xlo, xhi, ylo, yhi, height)
    for i, (label, (xs, ys)) in enumerate(series.items()):
        pts = []
        for j, (x, y) in enumerate(zip(xs, ys)):
            if step and j:
                pts.append(f"{sx(x):.2f},{sy(ys[j - 1]):.2f}")
            pts.append(f"{sx(x):.2f},{sy(y):.2f}")
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{" ".join(pts)}"/>')
        out.append(f'<text x="{PAD_L + 8 + 110 * i}" y="{height - 6}" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def heatmap(matrix, title: str, size=180) -> str:
    K = len(matrix)
    cell = size / K
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 20}" height="{size + 40}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{size / 2 + 10}" y="14" text-anchor="middle">{escape(title)}</text>']
    for a, row in enumerate(matrix):
        for b, p in enumerate(row):
            shade = int(round(255 * (1.0 - p)))
            x, y = 10 + b * cell, 24 + a * cell
            ink = "white" if p > 0.5 else "black"
            out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cell:.1f}" height="{cell:.1f}" '
                       f'fill="rgb({shade},{shade},255)" stroke="#888"/>')
            out.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" '
                       f'text-anchor="middle" fill="{ink}">{p:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out)


def _columns(rows, prefix):
    return sorted((k for k in rows[0] if k.startswith(prefix)), key=lambda k: int(k.rsplit("_", 1)[1]))


def render_all(outdir) -> list[Path]:
    """Write every figure for the CSVs present in ``outdir``; returns the paths."""
    outdir = Path(outdir)
    written = []

    def save(name, svg):
        path = outdir / name
        path.write_text(svg)
        written.append(path)

    if (outdir / "loss.csv").exists():
        rows = read_csv(outdir / "loss.csv")
        ep = [float(r["epoch"]) for r in rows]
        save("loss.svg", line_plot({k: (ep, [float(r[k]) for r in rows])
                                    for k in ("total", "rec")}, "training loss"))
        save("correlation.svg", line_plot({f"source {c.rsplit('_', 1)[1]}": (ep, [float(r[c]) for r in rows])
                                           for c in _columns(rows, "corr_")}, "absolute correlation"))
    if (outdir / "sources.csv").exists():
        rows = read_csv(outdir / "sources.csv")
        t = [float(r["t"]) for r in rows]
        for c in _columns(rows, "true_"):
            j = c.rsplit("_", 1)[1]
            save(f"sources_{j}.svg", line_plot({"true": (t, [float(r[c]) for r in rows]),
                                                "estimated": (t, [float(r[f"est_{j}"]) for r in rows])},
                                               f"source {j}"))
    if (outdir / "states.csv").exists():
        rows = read_csv(outdir / "states.csv")
        t = [float(r["t"]) for r in rows]
        for c in _columns(rows, "true_"):
            j = c.rsplit("_", 1)[1]
            save(f"states_{j}.svg", line_plot({"true": (t, [float(r[c]) for r in rows]),
                                               "decoded": (t, [float(r[f"matched_{j}"]) for r in rows])},
                                              f"hidden states, source {j}", step=True, height=180))
    if (outdir / "transitions.csv").exists():
        rows = read_csv(outdir / "transitions.csv")
        mats: dict = {}
        for r in rows:
            m = mats.setdefault((int(r["source"]), r["kind"]), {})
            m[(int(r["from"]), int(r["to"]))] = float(r["prob"])
        for (j, kind), cells in sorted(mats.items()):
            K = max(a for a, _ in cells)
            M = [[cells[(a, b)] for b in range(1, K + 1)] for a in range(1, K + 1)]
            save(f"transitions_{j}_{kind}.svg", heatmap(M, f"source {j} {kind}"))
    return written
