from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union
import html
import io
import math

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from core.errors import DataError
from core.types import PlotKind

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]

WIDTH, HEIGHT = 960, 600
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 90, 220, 70, 80

LineSeries = Mapping[str, Sequence[Tuple[float, float]]]


def _num(value: float) -> str:
    return f"{value:.2f}"


def _tick_label(value: float) -> str:
    return f"{value:.4g}"


def _text(x: float, y: float, text: str, size: int = 13, anchor: str = "middle", extra: str = "") -> str:
    return (f'<text x="{_num(x)}" y="{_num(y)}" text-anchor="{anchor}" font-size="{size}" '
            f'font-family="Arial"{extra}>{html.escape(text)}</text>')


def _header(title: str) -> List[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            '<rect x="0" y="0" width="100%" height="100%" fill="#ffffff"/>',
            _text(WIDTH / 2, 36, title, size=22)]


def _line_svg(series: LineSeries, title: str, x_label: str, y_label: str) -> str:
    points = [(float(x), float(y)) for values in series.values() for x, y in values
              if math.isfinite(float(y))]
    if not points:
        raise DataError("line plot needs at least one finite point")
    xs, ys = zip(*points)
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_max == x_min:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    if y_max == y_min:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    pad = 0.05 * (y_max - y_min)
    y_min, y_max = y_min - pad, y_max + pad

    left, right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    top, bottom = MARGIN_TOP, HEIGHT - MARGIN_BOTTOM

    def px(x: float) -> float:
        return left + (x - x_min) / (x_max - x_min) * (right - left)

    def py(y: float) -> float:
        return bottom - (y - y_min) / (y_max - y_min) * (bottom - top)

    lines = _header(title)
    for i in range(6):
        value = y_min + (y_max - y_min) * i / 5
        lines.append(f'<line x1="{left}" y1="{_num(py(value))}" x2="{right}" y2="{_num(py(value))}" '
                     f'stroke="#e0e0e0" stroke-width="1"/>')
        lines.append(_text(left - 8, py(value) + 4, _tick_label(value), anchor="end"))
        x_value = x_min + (x_max - x_min) * i / 5
        lines.append(_text(px(x_value), bottom + 22, _tick_label(x_value)))
    lines.append(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="#000000" stroke-width="2"/>')
    lines.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="#000000" stroke-width="2"/>')
    lines.append(_text((left + right) / 2, HEIGHT - 24, x_label, size=15))
    lines.append(_text(24, (top + bottom) / 2, y_label, size=15,
                       extra=f' transform="rotate(-90 24 {_num((top + bottom) / 2)})"'))

    for idx, (label, values) in enumerate(series.items()):
        color = COLORS[idx % len(COLORS)]
        finite = sorted((float(x), float(y)) for x, y in values if math.isfinite(float(y)))
        coords = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in finite)
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 20 + idx * 24
        lines.append(f'<line x1="{right + 20}" y1="{ly}" x2="{right + 44}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="3"/>')
        lines.append(_text(right + 52, ly + 5, label, anchor="start"))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _heat_color(value: float, v_min: float, v_max: float) -> Tuple[int, int, int]:
    """White to dark blue."""
    t = 0.0 if v_max == v_min else (value - v_min) / (v_max - v_min)
    t = min(max(t, 0.0), 1.0)
    return (int(round(255 - t * 247)), int(round(255 - t * 207)), int(round(255 - t * 148)))


def _heatmap_svg(matrix: np.ndarray, labels: Sequence[str], title: str, x_label: str, y_label: str) -> str:
    matrix = np.asarray(matrix, dtype=np.float64)
    n_rows, n_cols = matrix.shape
    if len(labels) != n_rows or n_rows != n_cols:
        raise DataError(f"heatmap needs a square matrix with one label per row, got {matrix.shape} "
                        f"and {len(labels)} labels")
    v_min, v_max = float(np.nanmin(matrix)), float(np.nanmax(matrix))
    left, top = MARGIN_LEFT, MARGIN_TOP
    size = min(WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    cell = size / n_cols

    lines = _header(title)
    for i in range(n_rows):
        for j in range(n_cols):
            r, g, b = _heat_color(float(matrix[i, j]), v_min, v_max)
            lines.append(f'<rect class="cell" x="{_num(left + j * cell)}" y="{_num(top + i * cell)}" '
                         f'width="{_num(cell)}" height="{_num(cell)}" fill="#{r:02x}{g:02x}{b:02x}">'
                         f'<title>{html.escape(labels[i])},{html.escape(labels[j])}: {matrix[i, j]:.4f}</title></rect>')
    for k, label in enumerate(labels):
        lines.append(_text(left + (k + 0.5) * cell, top + size + 18, label, size=11))
        lines.append(_text(left - 6, top + (k + 0.5) * cell + 4, label, size=11, anchor="end"))
    lines.append(_text(left + size / 2, HEIGHT - 24, x_label, size=15))
    lines.append(_text(24, top + size / 2, y_label, size=15,
                       extra=f' transform="rotate(-90 24 {_num(top + size / 2)})"'))
    # Color scale legend
    lx = left + size + 40
    for step in range(10):
        value = v_max - (v_max - v_min) * step / 9
        r, g, b = _heat_color(value, v_min, v_max)
        lines.append(f'<rect x="{lx}" y="{_num(top + step * 20)}" width="20" height="20" '
                     f'fill="#{r:02x}{g:02x}{b:02x}"/>')
    lines.append(_text(lx + 28, top + 14, _tick_label(v_max), anchor="start"))
    lines.append(_text(lx + 28, top + 194, _tick_label(v_min), anchor="start"))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_plot(series: Union[LineSeries, np.ndarray], kind: Union[PlotKind, str], path: Union[str, Path],
              title: str = "", x_label: str = "", y_label: str = "",
              labels: Optional[Sequence[str]] = None) -> Path:
    """
    Write a standalone SVG chart; identical input gives identical bytes.

    Args:
        series: {label: [(x, y), ...]} for line plots, an N x N matrix for heatmaps
        kind: PlotKind.LINE or PlotKind.HEATMAP
        path: Output file
        labels: Row/column labels of a heatmap (defaults to E0..E{N-1})

    Raises:
        DataError: empty series
    """
    kind = PlotKind(kind)
    if kind == PlotKind.LINE:
        if not series or not any(len(values) for values in series.values()):
            raise DataError("cannot plot an empty series")
        svg = _line_svg(series, title, x_label, y_label)
    else:
        matrix = np.asarray(series)
        if matrix.size == 0:
            raise DataError("cannot plot an empty matrix")
        labels = list(labels) if labels is not None else [f"E{i}" for i in range(matrix.shape[0])]
        svg = _heatmap_svg(matrix, labels, title, x_label, y_label)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    return path


def render_heatmap_png(matrix: np.ndarray, labels: Optional[Sequence[str]] = None, cell_size: int = 40,
                       title: str = "") -> bytes:
    """PNG preview of a heatmap, one cell_size square per entry."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        raise DataError("cannot render an empty matrix")
    n_rows, n_cols = matrix.shape
    labels = list(labels) if labels is not None else [f"E{i}" for i in range(n_rows)]
    margin = cell_size
    width = n_cols * cell_size + 2 * margin
    height = n_rows * cell_size + 2 * margin
    img = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    v_min, v_max = float(np.nanmin(matrix)), float(np.nanmax(matrix))
    for i in range(n_rows):
        for j in range(n_cols):
            x0 = margin + j * cell_size
            y0 = margin + i * cell_size
            draw.rectangle(((x0, y0), (x0 + cell_size - 1, y0 + cell_size - 1)),
                           fill=_heat_color(float(matrix[i, j]), v_min, v_max), outline=(200, 200, 200))
    for k, label in enumerate(labels):
        draw.text((margin + k * cell_size + 4, margin + n_rows * cell_size + 4), label, font=font, fill=(0, 0, 0))
        draw.text((4, margin + k * cell_size + cell_size // 3), label, font=font, fill=(0, 0, 0))
    if title:
        draw.text((margin, 8), title, font=font, fill=(0, 0, 0))
    buffer = io.BytesIO()
    img.save(buffer, format="PNG")
    return buffer.getvalue()
