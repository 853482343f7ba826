"""Dependency-free SVG scatter plots with byte-stable output."""

from __future__ import annotations

from pathlib import Path

import numpy as np

SIZE = 400
PAD = 30


def _num(v) -> str:
    return f"{v:.2f}"


def _frame(lo, hi):
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = SIZE - 2 * PAD

    def to_px(P):
        u = (P - lo) / span
        return PAD + u[:, 0] * inner, SIZE - PAD - u[:, 1] * inner

    return to_px


def _header(title):
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
        f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>',
        f'<rect x="{PAD}" y="{PAD}" width="{SIZE - 2 * PAD}" height="{SIZE - 2 * PAD}" fill="none" stroke="black"/>',
    ]
    if title:
        safe = str(title).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        out.append(f'<text x="{SIZE // 2}" y="{PAD - 10}" text-anchor="middle" font-size="12">{safe}</text>')
    return out


def _write(path, lines):
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write SVG to {path}: {exc}") from exc
    return path


def _colors(values):
    """Blue-to-red ramp over the given scalar values."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return []
    span = v.max() - v.min()
    t = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    r = (40 + 200 * t).astype(int)
    b = (240 - 200 * t).astype(int)
    return [f"#{a:02x}50{c:02x}" for a, c in zip(r, b)]


def emit_scatter_svg(pairs, path, title: str | None = None):
    """Estimated-vs-true scatter with the identity line as reference.

    ``pairs`` is a sequence of ``(estimate, truth)``; truth goes on the x axis.
    """
    P = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    lines = _header(title)
    if P.shape[0]:
        top = float(max(P.max(), 0.0))
        lo, hi = np.zeros(2), np.full(2, top)
        to_px = _frame(lo, hi)
        ex, ey = to_px(np.array([[0.0, 0.0], [top, top]]))
        lines.append(
            f'<line x1="{_num(ex[0])}" y1="{_num(ey[0])}" x2="{_num(ex[1])}" y2="{_num(ey[1])}" stroke="gray"/>'
        )
        px, py = to_px(P[:, ::-1])
        lines += [f'<circle cx="{_num(a)}" cy="{_num(b)}" r="1.2" fill="#2050c0"/>' for a, b in zip(px, py)]
    lines.append("</svg>")
    return _write(path, lines)


def emit_points_svg(coords, path, color_by=None, title: str | None = None):
    """Planar point cloud (first two coordinates) on an equal-aspect frame."""
    X = np.asarray(coords, dtype=float)
    lines = _header(title)
    if X.size:
        X = X[:, :2] if X.shape[1] >= 2 else np.c_[X, np.zeros(len(X))]
        lo, hi = X.min(axis=0), X.max(axis=0)
        side = float((hi - lo).max())
        centre = 0.5 * (lo + hi)
        to_px = _frame(centre - side / 2, centre + side / 2)
        px, py = to_px(X)
        cols = _colors(X[:, 0] if color_by is None else color_by)
        lines += [f'<circle cx="{_num(a)}" cy="{_num(b)}" r="1.8" fill="{c}"/>' for a, b, c in zip(px, py, cols)]
    lines.append("</svg>")
    return _write(path, lines)
