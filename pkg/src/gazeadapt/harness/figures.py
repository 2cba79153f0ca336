"""Static figures: gaze arrow overlays and training curves."""

from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..data.io import to_uint8

OVERLAY_SCALE = 4
ARROW_LENGTH = 60.0  # pixels in the upscaled image
COLORS = {"truth": (0, 200, 0), "pre": (230, 40, 40), "post": (40, 90, 255)}


def arrow_endpoint(gaze, origin, length: float = ARROW_LENGTH) -> tuple[float, float]:
    """End point of a gaze arrow: (g_x, g_y) normalised, x right and y down.

    A gaze along the optical axis has no in-plane direction and draws as a dot.
    """
    gx, gy = float(gaze[0]), float(gaze[1])
    n = math.hypot(gx, gy)
    if n < 1e-12:
        return float(origin[0]), float(origin[1])
    return origin[0] + length * gx / n, origin[1] + length * gy / n


def draw_arrow(draw: ImageDraw.ImageDraw, origin, end, color, width: int = 2) -> None:
    x0, y0 = origin
    x1, y1 = end
    draw.line([(x0, y0), (x1, y1)], fill=color, width=width)
    dx, dy = x1 - x0, y1 - y0
    n = math.hypot(dx, dy)
    if n == 0:
        draw.ellipse([x0 - width, y0 - width, x0 + width, y0 + width], fill=color)
        return
    ux, uy = dx / n, dy / n
    head = 8.0
    left = (x1 - head * ux + head * 0.5 * uy, y1 - head * uy - head * 0.5 * ux)
    right = (x1 - head * ux - head * 0.5 * uy, y1 - head * uy + head * 0.5 * ux)
    draw.polygon([(x1, y1), left, right], fill=color)


def overlay_image(image: np.ndarray, arrows: dict, scale: int = OVERLAY_SCALE) -> Image.Image:
    """Upscaled grey eye image with one arrow per entry of ``arrows`` (name -> gaze)."""
    base = Image.fromarray(to_uint8(image)).convert("RGB")
    base = base.resize((base.width * scale, base.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(base)
    origin = (base.width / 2, base.height / 2)
    for name in ("truth", "pre", "post"):
        if name in arrows:
            draw_arrow(draw, origin, arrow_endpoint(arrows[name], origin), COLORS[name])
    return base


def emit_overlay_figure(pre, post, data, out_dir, limit: int | None = None) -> list[Path]:
    """One PNG per labelled sample with truth, pre- and post-adaptation arrows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(data) if limit is None else min(limit, len(data))
    images = data.images[:n]
    p_pre, p_post = pre(images), post(images)
    paths = []
    for i in range(n):
        img = overlay_image(images[i], {"truth": data.gazes[i], "pre": p_pre[i], "post": p_post[i]})
        path = out_dir / f"overlay_{i:04d}.png"
        img.save(path, format="PNG", optimize=False)
        paths.append(path)
    return paths


# -- training curves ------------------------------------------------------------

LOSS_COLUMNS = ("loss", "reg_loss", "domain_loss", "d_loss", "f_loss")
ACC_COLUMNS = ("heldout_domain_acc", "d_acc")


def read_trace(path) -> tuple[dict[str, list[tuple[float, float]]], int]:
    """Series per numeric column of a trace CSV; returns (series, skipped rows)."""
    series: dict[str, list[tuple[float, float]]] = {}
    skipped = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                it = float(row["iteration"])
                vals = {k: float(v) for k, v in row.items() if k != "iteration"}
            except (KeyError, TypeError, ValueError):
                skipped += 1
                continue
            if not math.isfinite(it) or not all(math.isfinite(v) for v in vals.values()):
                skipped += 1
                continue
            for k, v in vals.items():
                series.setdefault(k, []).append((it, v))
    return series, skipped


def _plot(runs, columns, ylabel, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "gazeadapt", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for run, series in runs.items():
            cols = [c for c in columns if c in series]
            for col in cols:
                xs, ys = zip(*series[col])
                ax.plot(xs, ys, label=run if len(cols) == 1 else f"{run} ({col})")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        if ax.lines:
            ax.legend()
        fmt = Path(path).suffix.lstrip(".") or "png"
        meta = {"Date": None} if fmt == "svg" else {"Software": None} if fmt == "png" else None
        fig.savefig(path, format=fmt, metadata=meta)
        plt.close(fig)


def emit_training_curves(traces: dict, out_dir, fmt: str = "png") -> tuple[list[Path], int]:
    """Loss and domain-accuracy plots for ``traces`` (run name -> CSV path).

    Returns the written paths and the number of skipped rows. Malformed
    rows and empty traces produce a warning, not an error.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs, skipped = {}, 0
    for name, path in traces.items():
        series, bad = read_trace(path)
        skipped += bad
        if not series:
            warnings.warn(f"trace {path} has no plottable rows", stacklevel=2)
        runs[name] = series
    if skipped:
        warnings.warn(f"skipped {skipped} malformed trace rows", stacklevel=2)
    paths = []
    for stem, cols, label in (("loss", LOSS_COLUMNS, "loss"), ("domain_accuracy", ACC_COLUMNS, "accuracy")):
        path = out_dir / f"{stem}.{fmt}"
        _plot(runs, [c for c in cols if any(c in s for s in runs.values())] or list(cols[:1]), label, path)
        paths.append(path)
    return paths, skipped
