"""Hand-written SVG charts for learning curves and SHAP summaries.

Output depends only on the input CSV, so rendering the same file twice gives
byte-identical markup.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 960, 540
MARGIN = {"left": 90, "right": 160, "top": 40, "bottom": 60}
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
LOW_COLOR = (0x1E, 0x88, 0xE5)
HIGH_COLOR = (0xFF, 0x00, 0x52)


class RenderError(ValueError):
    """Input CSV cannot be charted."""


def _num(v: float) -> str:
    return f"{v:.2f}"


def _read_table(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise RenderError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise RenderError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        body.append((lineno, row))
    if not body:
        raise RenderError(f"{path}: no data rows")
    return header, body


def _float(path, lineno, name, cell, allow_empty=False) -> float:
    if cell.strip() == "" and allow_empty:
        return float("nan")
    try:
        v = float(cell)
    except ValueError:
        raise RenderError(f"{path}:{lineno}: column {name!r} is not numeric: {cell!r}") from None
    if not np.isfinite(v):
        raise RenderError(f"{path}:{lineno}: column {name!r} is not finite: {cell!r}")
    return v


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + 1e-9 * step, step)


def _tick_label(v: float) -> str:
    return f"{v:.6g}"


@dataclass
class _Frame:
    x0: float
    x1: float
    y0: float
    y1: float

    @property
    def left(self):
        return MARGIN["left"]

    @property
    def right(self):
        return WIDTH - MARGIN["right"]

    @property
    def top(self):
        return MARGIN["top"]

    @property
    def bottom(self):
        return HEIGHT - MARGIN["bottom"]

    def sx(self, x):
        return self.left + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (self.right - self.left)

    def sy(self, y):
        return self.bottom - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)


def _pad_range(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo <= 0:
        span = abs(lo) if lo != 0 else 1.0
        return lo - 0.5 * span, hi + 0.5 * span
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _open(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
    ]


def _axes(fr: _Frame, xlabel: str, ylabel: str, yticks=True) -> list[str]:
    out = [
        f'<line x1="{fr.left}" y1="{fr.bottom}" x2="{fr.right}" y2="{fr.bottom}" stroke="black"/>',
        f'<line x1="{fr.left}" y1="{fr.top}" x2="{fr.left}" y2="{fr.bottom}" stroke="black"/>',
    ]
    for t in _ticks(fr.x0, fr.x1):
        x = float(fr.sx(t))
        out.append(f'<line x1="{_num(x)}" y1="{fr.bottom}" x2="{_num(x)}" y2="{fr.bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{_num(x)}" y="{fr.bottom + 18}" text-anchor="middle">{_tick_label(t)}</text>')
    if yticks:
        for t in _ticks(fr.y0, fr.y1):
            y = float(fr.sy(t))
            out.append(f'<line x1="{fr.left - 5}" y1="{_num(y)}" x2="{fr.left}" y2="{_num(y)}" stroke="black"/>')
            out.append(f'<text x="{fr.left - 8}" y="{_num(y + 4)}" text-anchor="end">{_tick_label(t)}</text>')
    cx = (fr.left + fr.right) / 2
    cy = (fr.top + fr.bottom) / 2
    out.append(f'<text x="{_num(cx)}" y="{HEIGHT - 15}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="20" y="{_num(cy)}" text-anchor="middle" transform="rotate(-90 20 {_num(cy)})">'
        f"{escape(ylabel)}</text>"
    )
    return out


def _points(xs, ys) -> str:
    return " ".join(f"{_num(x)},{_num(y)}" for x, y in zip(xs, ys))


# -- learning curves -----------------------------------------------------------


def read_curves(path, metric: str = "rmse") -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per strategy: (n_labeled, mean, std) for ``metric`` in {"rmse", "shap_rmse"}."""
    header, body = _read_table(path)
    mean_col, std_col = f"{metric}_mean", f"{metric}_std"
    need = ["n_labeled", mean_col, std_col]
    for name in need:
        if name not in header:
            raise RenderError(f"{path}:1: missing column {name!r}")
    idx = {name: header.index(name) for name in need}
    s_col = header.index("strategy") if "strategy" in header else None
    default_name = Path(path).stem.removeprefix("curves_")
    groups: dict[str, list[tuple[float, float, float]]] = {}
    for lineno, row in body:
        s = row[s_col] if s_col is not None else default_name
        n = _float(path, lineno, "n_labeled", row[idx["n_labeled"]])
        m = _float(path, lineno, mean_col, row[idx[mean_col]], allow_empty=True)
        sd = _float(path, lineno, std_col, row[idx[std_col]], allow_empty=True)
        if np.isnan(m):
            continue
        groups.setdefault(s, []).append((n, m, 0.0 if np.isnan(sd) else sd))
    if not groups:
        raise RenderError(f"{path}: no {metric} values to plot")
    return {s: tuple(np.array(c) for c in zip(*rows)) for s, rows in groups.items()}


def curves_svg(curves: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]], title="Learning curves",
               ylabel="test RMSE") -> str:
    """Mean line and a shaded mean ± std band per strategy."""
    xs = np.concatenate([c[0] for c in curves.values()])
    lo = np.concatenate([c[1] - c[2] for c in curves.values()])
    hi = np.concatenate([c[1] + c[2] for c in curves.values()])
    fr = _Frame(*_pad_range(xs.min(), xs.max()), *_pad_range(lo.min(), hi.max()))
    out = _open(title) + _axes(fr, "labelled simulations", ylabel)
    for i, (name, (n, mean, std)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        px = fr.sx(n)
        band = _points(np.concatenate([px, px[::-1]]), np.concatenate([fr.sy(mean + std), fr.sy((mean - std)[::-1])]))
        out.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        out.append(f'<polyline points="{_points(px, fr.sy(mean))}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = fr.top + 20 * i + 10
        out.append(f'<line x1="{fr.right + 15}" y1="{ly}" x2="{fr.right + 40}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{fr.right + 45}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- SHAP summary --------------------------------------------------------------


def read_shap_summary(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per feature, in order of first appearance: (feature values, SHAP values)."""
    header, body = _read_table(path)
    for name in ("feature", "feature_value", "shap_value"):
        if name not in header:
            raise RenderError(f"{path}:1: missing column {name!r}")
    fi, vi, si = header.index("feature"), header.index("feature_value"), header.index("shap_value")
    groups: dict[str, list[tuple[float, float]]] = {}
    for lineno, row in body:
        groups.setdefault(row[fi], []).append(
            (_float(path, lineno, "feature_value", row[vi]), _float(path, lineno, "shap_value", row[si]))
        )
    return {f: tuple(np.array(c) for c in zip(*rows)) for f, rows in groups.items()}


def _blend(t: float) -> str:
    rgb = [round(a + (b - a) * t) for a, b in zip(LOW_COLOR, HIGH_COLOR)]
    return "#" + "".join(f"{c:02x}" for c in rgb)


def shap_svg(summary: dict[str, tuple[np.ndarray, np.ndarray]], title="SHAP summary") -> str:
    """One row per feature (largest mean |SHAP| on top), colour = scaled feature value."""
    order = sorted(summary, key=lambda f: (-float(np.mean(np.abs(summary[f][1]))), f))
    phi = np.concatenate([summary[f][1] for f in order])
    bound = max(float(np.max(np.abs(phi))), 1e-12)
    fr = _Frame(-1.05 * bound, 1.05 * bound, len(order) - 0.5, -0.5)
    out = _open(title) + _axes(fr, "SHAP value", "", yticks=False)
    zero = _num(float(fr.sx(0.0)))
    out.append(f'<line x1="{zero}" y1="{fr.top}" x2="{zero}" y2="{fr.bottom}" stroke="#999999"/>')
    for row, f in enumerate(order):
        values, shap = summary[f]
        y = _num(float(fr.sy(row)))
        out.append(f'<text x="{fr.left - 8}" y="{_num(float(fr.sy(row)) + 4)}" text-anchor="end">{escape(f)}</text>')
        vlo, vhi = float(values.min()), float(values.max())
        scaled = (values - vlo) / (vhi - vlo) if vhi > vlo else np.full(values.shape, 0.5)
        for v, t in zip(fr.sx(shap), scaled):
            out.append(f'<circle cx="{_num(float(v))}" cy="{y}" r="3" fill="{_blend(float(t))}" fill-opacity="0.7"/>')
    # colour key
    gx = fr.right + 30
    out.append('<defs><linearGradient id="fv" x1="0" y1="1" x2="0" y2="0">'
               f'<stop offset="0" stop-color="{_blend(0.0)}"/><stop offset="1" stop-color="{_blend(1.0)}"/>'
               "</linearGradient></defs>")
    out.append(f'<rect x="{gx}" y="{fr.top + 20}" width="12" height="200" fill="url(#fv)"/>')
    out.append(f'<text x="{gx + 18}" y="{fr.top + 30}">high</text>')
    out.append(f'<text x="{gx + 18}" y="{fr.top + 220}">low</text>')
    out.append(f'<text x="{gx}" y="{fr.top + 10}">feature value</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def detect_kind(path) -> str:
    header, _ = _read_table(path)
    if "shap_value" in header:
        return "shap"
    if "rmse_mean" in header:
        return "curves"
    raise RenderError(f"{path}:1: header matches neither a curve nor a SHAP summary CSV")


def render_svg(csv_paths, svg_path, metric: str = "rmse", title: str | None = None) -> Path:
    """Chart one SHAP summary CSV, or one or more curve CSVs on shared axes.

    The kind is inferred from the header.
    """
    paths = [csv_paths] if isinstance(csv_paths, (str, Path)) else list(csv_paths)
    if not paths:
        raise RenderError("no input files")
    kinds = {detect_kind(p) for p in paths}
    if kinds == {"curves"}:
        curves = {}
        for p in paths:
            curves.update(read_curves(p, metric))
        label = "test RMSE" if metric == "rmse" else "SHAP RMSE"
        text = curves_svg(curves, title or "Learning curves", label)
    elif kinds == {"shap"} and len(paths) == 1:
        text = shap_svg(read_shap_summary(paths[0]), title or "SHAP summary")
    else:
        raise RenderError("expected curve CSVs or a single SHAP summary CSV")
    svg_path = Path(svg_path)
    svg_path.write_text(text, encoding="utf-8")
    return svg_path
