"""Output formats: fixed-precision CSV, hashed manifests and SVG renderings."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, IOFailure
from .similarity import SimilarityMatrix
from .taskgen import RNG_NAME

FLOAT_FORMAT = "%.16e"
MANIFEST = "manifest.json"
CONFIG_COPY = "config.json"


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return FLOAT_FORMAT % v
    return str(value)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def write_csv(path, header, rows) -> Path:
    return write_text(path, csv_text(header, rows))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path} is empty")
    return rows[0], rows[1:]


def trace_csv(traces) -> str:
    """Per-step weights and diagnostics of one or more solver traces."""
    traces = list(traces)
    dim = traces[0].steps.shape[1]
    header = ["algo", "step"] + [f"w_{i}" for i in range(dim)] + ["objective", "grad_norm"]
    rows = []
    for trace in traces:
        if trace.steps.shape[1] != dim:
            raise FormatError("traces in one table must share the dimension")
        for k, w in enumerate(trace.steps):
            rows.append([trace.algo, k, *w, trace.objective[k], trace.grad_norm[k]])
    return csv_text(header, rows)


# ---------------------------------------------------------------------------
# similarity matrices


def grid_csv(matrix: SimilarityMatrix) -> str:
    header = ["p_a\\p_b"] + [str(s) for s in matrix.steps_b]
    rows = ([p] + list(row) for p, row in zip(matrix.steps_a, matrix.grid))
    return csv_text(header, rows)


def bestmatch_csv(matrix: SimilarityMatrix) -> str:
    rows = zip(matrix.steps_a, matrix.best_match_steps(), matrix.best_values())
    return csv_text(["p_a", "p_b", "value"], rows)


def read_grid_csv(path, algo_a: str = "a", algo_b: str = "b", metric: str = "errors") -> SimilarityMatrix:
    header, rows = read_csv(path)
    try:
        steps_b = tuple(int(h) for h in header[1:])
        steps_a = tuple(int(r[0]) for r in rows)
        grid = np.array([[float(v) for v in r[1:]] for r in rows])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path} is not a similarity grid: {exc}") from exc
    if grid.size == 0 or grid.shape != (len(steps_a), len(steps_b)):
        raise FormatError(f"{path} has a ragged or empty grid")
    filled = np.where(np.isnan(grid), -np.inf, grid)
    return SimilarityMatrix(algo_a, algo_b, grid, np.argmax(filled, axis=1), metric, steps_a, steps_b)


# ---------------------------------------------------------------------------
# manifest


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    return sha256_bytes(canonical_json(doc).encode("utf-8"))


def file_hash(path) -> str:
    try:
        return sha256_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc


def write_manifest(out_dir, config_doc: dict, files: list[str], extra: dict | None = None) -> Path:
    """Save the config beside the outputs and hash everything."""
    out_dir = Path(out_dir)
    write_text(out_dir / CONFIG_COPY, json.dumps(config_doc, sort_keys=True, indent=2) + "\n")
    manifest = {
        "tool": "icl_newton",
        "version": __version__,
        "rng": RNG_NAME,
        "config_sha256": config_hash(config_doc),
        "files": {name: file_hash(out_dir / name) for name in sorted(files)},
    }
    if extra:
        manifest["summary"] = extra
    return write_text(out_dir / MANIFEST, json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def verify_bundle(out_dir) -> list[str]:
    """Problems found when re-hashing a bundle; empty when it is intact."""
    out_dir = Path(out_dir)
    try:
        manifest = json.loads((out_dir / MANIFEST).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IOFailure(f"cannot read manifest in {out_dir}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not JSON: {exc}") from exc
    problems = []
    try:
        config_doc = json.loads((out_dir / CONFIG_COPY).read_text(encoding="utf-8"))
        if config_hash(config_doc) != manifest.get("config_sha256"):
            problems.append("config hash mismatch")
    except (OSError, json.JSONDecodeError):
        problems.append("config copy missing or unreadable")
    for name, digest in manifest.get("files", {}).items():
        path = out_dir / name
        if not path.exists():
            problems.append(f"{name}: missing")
        elif file_hash(path) != digest:
            problems.append(f"{name}: content hash mismatch")
    return problems


# ---------------------------------------------------------------------------
# SVG


def similarity_color(value: float) -> str:
    """Monotone map [-1, 1] -> blue (#2166ac) .. white .. red (#b2182b).

    Linear in each half; NaN cells are grey.
    """
    if value is None or not np.isfinite(value):
        return "#cccccc"
    v = min(1.0, max(-1.0, float(value)))
    low, mid, high = (0x21, 0x66, 0xAC), (0xFF, 0xFF, 0xFF), (0xB2, 0x18, 0x2B)
    a, b, f = (mid, high, v) if v >= 0 else (mid, low, -v)
    rgb = [round(x + (y - x) * f) for x, y in zip(a, b)]
    return "#%02x%02x%02x" % tuple(rgb)


def heatmap_svg(matrix: SimilarityMatrix, cell: int = 12, margin: int = 40) -> str:
    grid = np.asarray(matrix.grid)
    if grid.size == 0:
        raise FormatError("cannot render an empty grid")
    rows, cols = grid.shape
    width = margin + cols * cell + 10
    height = margin + rows * cell + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<title>{matrix.algo_a} vs {matrix.algo_b} ({matrix.metric})</title>',
        f'<text x="{margin}" y="14" font-size="11" font-family="monospace">rows: {matrix.algo_a} step, '
        f'columns: {matrix.algo_b} step</text>',
    ]
    for i in range(rows):
        y = margin + i * cell
        for j in range(cols):
            x = margin + j * cell
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{similarity_color(grid[i, j])}"/>')
    for i, j in enumerate(matrix.best_match):
        x, y = margin + int(j) * cell, margin + i * cell
        out.append(f'<rect class="best" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="none" '
                   f'stroke="#000000" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_heatmap(matrix: SimilarityMatrix, path) -> Path:
    return write_text(path, heatmap_svg(matrix))


def curves_svg(curves: dict[str, tuple[np.ndarray, np.ndarray]], title: str, log_y: bool = True,
               width: int = 640, height: int = 400) -> str:
    """Polyline chart of named (x, y) curves; non-positive values are dropped on a log axis."""
    palette = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]
    pts = {}
    for name, (x, y) in curves.items():
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ok = np.isfinite(y) & ((y > 0) if log_y else True)
        pts[name] = (x[ok], np.log10(y[ok]) if log_y else y[ok])
    xs = np.concatenate([p[0] for p in pts.values()] or [np.zeros(1)])
    ys = np.concatenate([p[1] for p in pts.values()] or [np.zeros(1)])
    if xs.size == 0:
        xs, ys = np.zeros(1), np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    left, right, top, bottom = 60, 150, 30, 40
    sx = (width - left - right) / (x1 - x0)
    sy = (height - top - bottom) / (y1 - y0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{left}" y="18" font-size="12" font-family="monospace">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{width - left - right}" height="{height - top - bottom}" '
        f'fill="none" stroke="#000000"/>',
        f'<text x="{left}" y="{height - 10}" font-size="10" font-family="monospace">{x0:g}</text>',
        f'<text x="{width - right - 30}" y="{height - 10}" font-size="10" font-family="monospace">{x1:g}</text>',
        f'<text x="4" y="{top + 10}" font-size="10" font-family="monospace">{("1e%.1f" % y1) if log_y else "%.3g" % y1}</text>',
        f'<text x="4" y="{height - bottom}" font-size="10" font-family="monospace">{("1e%.1f" % y0) if log_y else "%.3g" % y0}</text>',
    ]
    for idx, (name, (x, y)) in enumerate(pts.items()):
        color = palette[idx % len(palette)]
        coords = " ".join(f"{left + (a - x0) * sx:.2f},{height - bottom - (b - y0) * sy:.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{width - right + 8}" y="{top + 14 * (idx + 1)}" font-size="11" '
                   f'font-family="monospace" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def safe_name(text: str) -> str:
    keep = [c if c.isalnum() or c in "-_." else "_" for c in text]
    return "".join(keep).strip("_") or "x"


def relpath(path, root) -> str:
    return os.path.relpath(path, root).replace(os.sep, "/")
