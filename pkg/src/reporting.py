"""
Result files: per-epoch metrics CSV, labelled matrix CSV, SVG line charts
and PNG heat maps.
"""
import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from PIL import Image, ImageDraw, ImageFont  # noqa: E402

from src.errors import ReportError  # noqa: E402

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "epoch", "lr", "train_loss", "train_acc", "test_acc", "slots_used", "budget",
    "weight_sparsity", "activation_sparsity", "wgrad_macs", "macs_saved_fraction", "alpha_hat",
)
METRICS_HEADER = ",".join(METRICS_COLUMNS)
INT_COLUMNS = {"epoch", "slots_used", "budget", "wgrad_macs"}


def format_value(value) -> str:
    """17 significant digits for floats, so parsing gives back the same double."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _open_for_write(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        return open(path, "w", encoding="utf-8", newline="")
    except OSError as e:
        raise ReportError(f"{path}: cannot write: {e}") from e


def write_metrics_csv(rows: Sequence[Mapping], path) -> Path:
    """One line per epoch row; an empty record gives a header-only file."""
    path = Path(path)
    with _open_for_write(path) as f:
        f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(",".join(format_value(row.get(column)) for column in METRICS_COLUMNS) + "\n")
    return path


def read_metrics_csv(path) -> List[Dict[str, object]]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ReportError(f"{path}: cannot read: {e}") from e
    if not lines or lines[0] != METRICS_HEADER:
        raise ReportError(f"{path}: header is not '{METRICS_HEADER}'")
    rows = []
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(METRICS_COLUMNS):
            raise ReportError(f"{path}:{number}: expected {len(METRICS_COLUMNS)} fields, got {len(fields)}")
        row = {}
        for column, text in zip(METRICS_COLUMNS, fields):
            if text == "":
                row[column] = None
            elif column in INT_COLUMNS:
                row[column] = int(text)
            else:
                row[column] = float(text)
        rows.append(row)
    return rows


def write_matrix_csv(labels: Sequence[str], matrix: np.ndarray, path) -> Path:
    """Square matrix with the run labels as header row and first column."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (len(labels), len(labels)):
        raise ReportError(f"{path}: matrix shape {matrix.shape} does not match {len(labels)} labels")
    path = Path(path)
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["label", *labels])
        for label, values in zip(labels, matrix):
            writer.writerow([label, *(format_value(v) for v in values)])
    return path


def read_matrix_csv(path) -> Tuple[List[str], np.ndarray]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            table = list(csv.reader(f))
    except OSError as e:
        raise ReportError(f"{path}: cannot read: {e}") from e
    if not table or table[0][:1] != ["label"]:
        raise ReportError(f"{path}: not a matrix CSV")
    labels = table[0][1:]
    body = table[1:]
    if len(body) != len(labels) or any(len(row) != len(labels) + 1 for row in body):
        raise ReportError(f"{path}: matrix is not {len(labels)} x {len(labels)}")
    return labels, np.array([[float(v) for v in row[1:]] for row in body], dtype=np.float64)


def render_svg_curves(series: Mapping[str, Tuple[Sequence[float], Sequence[float]]], path,
                      title: str = "", xlabel: str = "epoch", ylabel: str = "") -> Path:
    """Line chart, one line per named series, as a standalone SVG file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed ids and no timestamp keep repeated renders byte-identical
    with plt.rc_context({"svg.hashsalt": "trady", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for name, (xs, ys) in series.items():
            ys = [math.nan if y is None else y for y in ys]
            ax.plot(list(xs), ys, label=name, linewidth=1.5)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        if len(series) > 1:
            ax.legend(fontsize="small")
        fig.tight_layout()
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as e:
            raise ReportError(f"{path}: cannot write: {e}") from e
        finally:
            plt.close(fig)
    return path


def _heat_color(value: float, vmin: float, vmax: float) -> Tuple[int, int, int]:
    """Blue (low) through white to red (high); NaN is grey."""
    if math.isnan(value):
        return (200, 200, 200)
    t = 0.5 if vmax == vmin else (min(max(value, vmin), vmax) - vmin) / (vmax - vmin)
    if t < 0.5:
        s = t / 0.5
        return (int(round(59 + s * 196)), int(round(76 + s * 179)), int(round(192 + s * 63)))
    s = (t - 0.5) / 0.5
    return (255, int(round(255 - s * 190)), int(round(255 - s * 195)))


def render_heatmap_png(labels: Sequence[str], matrix: np.ndarray, path,
                       vmin: Optional[float] = None, vmax: Optional[float] = None,
                       cell: int = 36) -> Path:
    """Annotated heat map of a square matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = len(labels)
    finite = matrix[np.isfinite(matrix)]
    vmin = float(finite.min()) if vmin is None and finite.size else (0.0 if vmin is None else vmin)
    vmax = float(finite.max()) if vmax is None and finite.size else (1.0 if vmax is None else vmax)

    font = ImageFont.load_default()
    margin = 8 + 7 * max((len(label) for label in labels), default=1)
    size = (margin + n * cell + 4, margin + n * cell + 4)
    image = Image.new("RGB", size, (255, 255, 255))
    draw = ImageDraw.Draw(image)
    for i, label in enumerate(labels):
        draw.text((4, margin + i * cell + cell // 3), label, fill=(0, 0, 0), font=font)
        draw.text((margin + i * cell + 2, 4 + (i % 2) * 12), label[:6], fill=(0, 0, 0), font=font)
    for i in range(n):
        for j in range(n):
            x0, y0 = margin + j * cell, margin + i * cell
            draw.rectangle([x0, y0, x0 + cell - 1, y0 + cell - 1],
                           fill=_heat_color(matrix[i, j], vmin, vmax), outline=(255, 255, 255))
            if np.isfinite(matrix[i, j]):
                draw.text((x0 + 3, y0 + cell // 3), f"{matrix[i, j]:.2f}", fill=(0, 0, 0), font=font)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        image.save(path, format="PNG")
    except OSError as e:
        raise ReportError(f"{path}: cannot write: {e}") from e
    return path


def write_rows_csv(rows: Sequence[Mapping], path) -> Path:
    """Plain table; columns are the keys of the first row."""
    path = Path(path)
    columns = list(rows[0]) if rows else []
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([value if isinstance(value, str) else format_value(value)
                             for value in (row.get(column) for column in columns)])
    logger.info("[Report] wrote %d rows to %s", len(rows), path)
    return path
