"""Deterministic CSV, SVG and JSON emission."""

import csv
import hashlib
import io
import json
import os

import numpy as np

WIDTH, HEIGHT, PAD = 640, 420, 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (list, tuple, np.ndarray)):
        return " ".join(_cell(v) for v in np.asarray(x, dtype=float).ravel())
    return str(x)


def csv_text(rows, columns=None):
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    return x


def json_text(data):
    return json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n"


class Plot:
    """Scatter points, polylines and least-squares lines in one SVG."""

    def __init__(self, title, xlabel, ylabel, equal=False):
        self.title, self.xlabel, self.ylabel, self.equal = title, xlabel, ylabel, equal
        self.items = []

    def scatter(self, x, y, label, fit=False):
        self.items.append(("scatter", np.asarray(x, float), np.asarray(y, float), label, fit))
        return self

    def line(self, x, y, label):
        self.items.append(("line", np.asarray(x, float), np.asarray(y, float), label, False))
        return self

    def _bounds(self):
        xs = np.concatenate([it[1] for it in self.items] or [np.zeros(1)])
        ys = np.concatenate([it[2] for it in self.items] or [np.zeros(1)])
        ok = np.isfinite(xs) & np.isfinite(ys)
        xs, ys = (xs[ok], ys[ok]) if ok.any() else (np.zeros(1), np.zeros(1))
        x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
        if x1 == x0:
            x0, x1 = x0 - 1, x1 + 1
        if y1 == y0:
            y0, y1 = y0 - 1, y1 + 1
        if self.equal:
            span = max(x1 - x0, y1 - y0)
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            x0, x1, y0, y1 = cx - span / 2, cx + span / 2, cy - span / 2, cy + span / 2
        return x0, x1, y0, y1

    def render(self):
        x0, x1, y0, y1 = self._bounds()

        def sx(x):
            return PAD + (x - x0) / (x1 - x0) * (WIDTH - 2 * PAD)

        def sy(y):
            return HEIGHT - PAD - (y - y0) / (y1 - y0) * (HEIGHT - 2 * PAD)

        out = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
               'font-family="sans-serif" font-size="12">' % (WIDTH, HEIGHT),
               '<rect width="100%" height="100%" fill="white"/>',
               '<rect x="%d" y="%d" width="%d" height="%d" fill="none" stroke="#444"/>'
               % (PAD, PAD, WIDTH - 2 * PAD, HEIGHT - 2 * PAD),
               '<text x="%d" y="%d" text-anchor="middle" font-size="14">%s</text>'
               % (WIDTH // 2, PAD // 2, _esc(self.title)),
               '<text x="%d" y="%d" text-anchor="middle">%s</text>'
               % (WIDTH // 2, HEIGHT - 12, _esc(self.xlabel)),
               '<text x="14" y="%d" text-anchor="middle" transform="rotate(-90 14 %d)">%s</text>'
               % (HEIGHT // 2, HEIGHT // 2, _esc(self.ylabel))]
        for v, anchor in ((x0, "start"), (x1, "end")):
            out.append('<text x="%.2f" y="%d" text-anchor="%s">%.4g</text>'
                       % (sx(v), HEIGHT - PAD + 16, anchor, v))
        for v in (y0, y1):
            out.append('<text x="%d" y="%.2f" text-anchor="end">%.4g</text>' % (PAD - 4, sy(v), v))
        for k, (kind, x, y, label, fit) in enumerate(self.items):
            color = PALETTE[k % len(PALETTE)]
            ok = np.isfinite(x) & np.isfinite(y)
            x, y = x[ok], y[ok]
            if kind == "line" and len(x):
                pts = " ".join("%.2f,%.2f" % (sx(a), sy(b)) for a, b in zip(x, y))
                out.append('<polyline points="%s" fill="none" stroke="%s" stroke-width="1.5"/>'
                           % (pts, color))
            else:
                for a, b in zip(x, y):
                    out.append('<circle cx="%.2f" cy="%.2f" r="2.5" fill="%s"/>'
                               % (sx(a), sy(b), color))
            if fit and len(np.unique(x)) >= 2:
                m, c = np.polyfit(x, y, 1)
                out.append('<line x1="%.2f" y1="%.2f" x2="%.2f" y2="%.2f" stroke="%s" '
                           'stroke-dasharray="5,3"/>' % (sx(x.min()), sy(m * x.min() + c),
                                                         sx(x.max()), sy(m * x.max() + c), color))
                label = "%s (slope %.4g)" % (label, m)
            out.append('<text x="%d" y="%d" fill="%s">%s</text>'
                       % (PAD + 8, PAD + 16 + 14 * k, color, _esc(label)))
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit(out_dir, command, seed, rows, plot, summary, columns=None):
    """Write ``<command>_seed<seed>_<hash>.{csv,svg,json}``; the hash covers the CSV."""
    os.makedirs(out_dir, exist_ok=True)
    text = csv_text(rows, columns)
    digest = hashlib.sha256(text.encode()).hexdigest()[:8]
    stem = os.path.join(out_dir, "%s_seed%d_%s" % (command, seed, digest))
    paths = {"csv": stem + ".csv", "svg": stem + ".svg", "json": stem + ".json"}
    with open(paths["csv"], "w") as fh:
        fh.write(text)
    with open(paths["svg"], "w") as fh:
        fh.write(plot.render())
    summary = dict(summary, command=command, seed=seed, csv_sha256=digest,
                   files={k: os.path.basename(v) for k, v in paths.items()})
    with open(paths["json"], "w") as fh:
        fh.write(json_text(summary))
    return paths
