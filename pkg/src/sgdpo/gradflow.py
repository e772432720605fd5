"""Gradient-flow fields and landscapes in (X1, X2) reward-ratio space.

Everything here is a pure function of its arguments; emitted CSV/SVG files are
byte-identical for identical inputs.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import core_math as cm
from .subsequence import ConfigError

DEFAULT_TRUNCATION = 1.5


class FieldMethod(str, enum.Enum):
    DPO = "dpo"
    PILOT = "pilot"


@dataclass(frozen=True)
class FieldGrid:
    x1_range: tuple[float, float] = (0.05, 1.5)
    x2_range: tuple[float, float] = (0.05, 1.5)
    resolution: int = 30
    truncation: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        for lo, hi in (self.x1_range, self.x2_range):
            if not 0 < lo < hi:
                raise ConfigError(f"grid range must satisfy 0 < lo < hi, got {(lo, hi)}")
        if self.resolution < 2:
            raise ConfigError("grid resolution must be >= 2")
        if self.truncation <= 0:
            raise ConfigError("truncation magnitude must be positive")

    def axis(self, which: int) -> np.ndarray:
        lo, hi = self.x1_range if which == 1 else self.x2_range
        return grid_axis(lo, hi, self.resolution)


def grid_axis(lo: float, hi: float, n: int) -> np.ndarray:
    # rounding makes nodes such as 1.0 land exactly on their decimal value
    return np.round(lo + (hi - lo) * np.arange(n) / (n - 1), 12)


@dataclass(frozen=True)
class PilotParams:
    """Either fixed pilot ratios (y1, y2), or fixed residuals (p1, p2) with
    y derived per grid point as y = x / p."""

    y1: float | None = None
    y2: float | None = None
    p1: float | None = None
    p2: float | None = None

    def __post_init__(self):
        ys = self.y1 is not None and self.y2 is not None
        ps = self.p1 is not None and self.p2 is not None
        if ys == ps:
            raise ConfigError("pilot parameters need exactly one of (y1, y2) or (p1, p2)")

    def resolve(self, x1, x2):
        if self.y1 is not None:
            return np.broadcast_to(self.y1, np.shape(x1)), np.broadcast_to(self.y2, np.shape(x2))
        return np.asarray(x1) / self.p1, np.asarray(x2) / self.p2


@dataclass(frozen=True)
class FieldPoint:
    x1: float
    x2: float
    dx1: float
    dx2: float


def field_vectors(method, beta: float, x1, x2, pilot: PilotParams | None = None):
    """Untruncated ascent direction (dl/dX1, dl/dX2) at the given points."""
    method = FieldMethod(method)
    if method is FieldMethod.DPO:
        return cm.dpo_partial_x1(x1, x2, beta), cm.dpo_partial_x2(x1, x2, beta)
    if pilot is None:
        raise ConfigError("pilot field requires pilot parameters")
    y1, y2 = pilot.resolve(x1, x2)
    return cm.pilot_partial_x1(x1, y2, beta), cm.pilot_partial_x2(x2, y1, beta)


def truncate(dx1, dx2, limit: float):
    """Scale vectors longer than ``limit`` down to it, keeping direction."""
    dx1, dx2 = np.asarray(dx1, dtype=np.float64), np.asarray(dx2, dtype=np.float64)
    norm = np.hypot(dx1, dx2)
    scale = np.where(norm > limit, limit / np.where(norm > 0, norm, 1.0), 1.0)
    return dx1 * scale, dx2 * scale


def field_grid(
    method,
    beta: float = cm.DEFAULT_BETA,
    grid: FieldGrid | None = None,
    pilot: PilotParams | None = None,
    *,
    truncated: bool = True,
) -> list[FieldPoint]:
    """Row-major (x1 outer, x2 inner) field samples over ``grid``."""
    grid = grid or FieldGrid()
    x1, x2 = np.meshgrid(grid.axis(1), grid.axis(2), indexing="ij")
    dx1, dx2 = field_vectors(method, beta, x1, x2, pilot)
    if truncated:
        dx1, dx2 = truncate(dx1, dx2, grid.truncation)
    return [
        FieldPoint(float(a), float(b), float(c), float(d))
        for a, b, c, d in zip(x1.ravel(), x2.ravel(), np.ravel(dx1), np.ravel(dx2))
    ]


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def integrate_trajectory(
    method,
    beta: float,
    start: cm.RatioPoint,
    step: float,
    n_steps: int,
    pilot_rule: Callable[[float, float], tuple[float, float]] | None = None,
) -> np.ndarray:
    """Explicit-Euler ascent path, shape (n_steps + 1, 2).

    A step that would leave the positive quadrant is halved until it does not.
    """
    if step <= 0:
        raise ConfigError("step must be positive")
    method = FieldMethod(method)
    if method is FieldMethod.PILOT and pilot_rule is None:
        raise ConfigError("pilot trajectory requires a pilot_rule")
    x1, x2 = float(start.x1), float(start.x2)
    path = [(x1, x2)]
    for _ in range(n_steps):
        if method is FieldMethod.DPO:
            g1, g2 = cm.dpo_partial_x1(x1, x2, beta), cm.dpo_partial_x2(x1, x2, beta)
        else:
            y1, y2 = pilot_rule(x1, x2)
            g1, g2 = cm.pilot_partial_x1(x1, y2, beta), cm.pilot_partial_x2(x2, y1, beta)
        h = step
        while x2 + h * g2 <= 0.0:
            h *= 0.5
        x1, x2 = x1 + h * g1, x2 + h * g2
        path.append((x1, x2))
    return np.asarray(path)


# ---------------------------------------------------------------------------
# landscapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Landscape:
    a_name: str
    b_name: str
    a: np.ndarray
    b: np.ndarray
    values: np.ndarray  # shape (len(a), len(b))

    def rows(self):
        for i, av in enumerate(self.a):
            for j, bv in enumerate(self.b):
                yield float(av), float(bv), float(self.values[i, j])


def _check_range(name: str, rng: Sequence[float]) -> tuple[float, float]:
    lo, hi = float(rng[0]), float(rng[1])
    if not 0 < lo <= hi:
        raise ConfigError(f"{name} range must be positive with lo <= hi, got {(lo, hi)}")
    return lo, hi


def fz_landscape(
    z: float,
    p1_range: Sequence[float] = (0.1, 2.0),
    p2_range: Sequence[float] = (0.1, 2.0),
    resolution: int = 40,
    beta: float = cm.DEFAULT_BETA,
) -> Landscape:
    """f(z) over a (p1, p2) grid at fixed z."""
    p1 = grid_axis(*_check_range("p1", p1_range), resolution)
    p2 = grid_axis(*_check_range("p2", p2_range), resolution)
    a, b = np.meshgrid(p1, p2, indexing="ij")
    return Landscape("p1", "p2", p1, p2, cm.f_z(z, a, b, beta))


class PartialWhich(str, enum.Enum):
    DX1 = "dX1"
    DX2 = "dX2"


def partial_landscape(
    which,
    x_range: Sequence[float] = (0.05, 1.5),
    y_range: Sequence[float] = (0.05, 1.5),
    resolution: int = 40,
    beta: float = cm.DEFAULT_BETA,
    fixed_x: float | None = None,
) -> Landscape:
    """Pilot partial over its two arguments.

    ``dX1`` varies (x1, y2); ``dX2`` varies (x2, y1). With ``fixed_x`` the
    first axis collapses to that single value, giving a slice along y.
    """
    which = PartialWhich(which)
    xs = np.array([float(fixed_x)]) if fixed_x is not None else grid_axis(*_check_range("x", x_range), resolution)
    ys = grid_axis(*_check_range("y", y_range), resolution)
    a, b = np.meshgrid(xs, ys, indexing="ij")
    if which is PartialWhich.DX1:
        return Landscape("x1", "y2", xs, ys, np.asarray(cm.pilot_partial_x1(a, b, beta)).reshape(a.shape))
    return Landscape("x2", "y1", xs, ys, np.asarray(cm.pilot_partial_x2(a, b, beta)).reshape(a.shape))


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_field_csv(points: Sequence[FieldPoint], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x1", "x2", "dx1", "dx2"))
        for p in points:
            w.writerow((_fmt(p.x1), _fmt(p.x2), _fmt(p.dx1), _fmt(p.dx2)))
    return path


def read_field_csv(path: str | os.PathLike) -> list[FieldPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [FieldPoint(*(float(r[k]) for k in ("x1", "x2", "dx1", "dx2"))) for r in csv.DictReader(fh)]


def write_landscape_csv(land: Landscape, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("a", "b", "value"))
        for row in land.rows():
            w.writerow(tuple(_fmt(v) for v in row))
    return path


_SVG_SIZE = 480
_MARGIN = 40


def _svg_doc(body: list[str], title: str) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_SIZE}" height="{_SVG_SIZE}" '
        f'viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}">'
    )
    return "\n".join([head, f"<title>{title}</title>", '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>\n"])


def _axes(x_label: str, y_label: str, x_range, y_range) -> list[str]:
    lo, hi = _MARGIN, _SVG_SIZE - _MARGIN
    return [
        f'<line x1="{lo}" y1="{hi}" x2="{hi}" y2="{hi}" stroke="black"/>',
        f'<line x1="{lo}" y1="{hi}" x2="{lo}" y2="{lo}" stroke="black"/>',
        f'<text x="{_SVG_SIZE // 2}" y="{_SVG_SIZE - 8}" font-size="12" text-anchor="middle">{x_label}</text>',
        f'<text x="12" y="{_SVG_SIZE // 2}" font-size="12" transform="rotate(-90 12 {_SVG_SIZE // 2})" '
        f'text-anchor="middle">{y_label}</text>',
        f'<text x="{lo}" y="{hi + 14}" font-size="10">{x_range[0]:.3g}</text>',
        f'<text x="{hi}" y="{hi + 14}" font-size="10" text-anchor="end">{x_range[1]:.3g}</text>',
        f'<text x="{lo - 4}" y="{hi}" font-size="10" text-anchor="end">{y_range[0]:.3g}</text>',
        f'<text x="{lo - 4}" y="{lo + 8}" font-size="10" text-anchor="end">{y_range[1]:.3g}</text>',
    ]


def quiver_svg(points: Sequence[FieldPoint], path: str | os.PathLike, title: str = "gradient flow") -> Path:
    """Arrow plot; arrow length is proportional to the (truncated) magnitude."""
    xs = np.array([p.x1 for p in points])
    ys = np.array([p.x2 for p in points])
    mags = np.array([np.hypot(p.dx1, p.dx2) for p in points])
    span = _SVG_SIZE - 2 * _MARGIN
    n_side = max(2, int(round(np.sqrt(len(points)))))
    cell = span / n_side
    peak = mags.max() if len(mags) and mags.max() > 0 else 1.0

    def px(x):
        return _MARGIN + (x - xs.min()) / (xs.max() - xs.min()) * span

    def py(y):
        return _SVG_SIZE - _MARGIN - (y - ys.min()) / (ys.max() - ys.min()) * span

    body = _axes("X1 (chosen ratio)", "X2 (rejected ratio)", (xs.min(), xs.max()), (ys.min(), ys.max()))
    for p, m in zip(points, mags):
        if m == 0:
            continue
        length = 0.9 * cell * m / peak
        ux, uy = p.dx1 / m, -p.dx2 / m  # svg y grows downwards
        x0, y0 = px(p.x1), py(p.x2)
        x1, y1 = x0 + ux * length, y0 + uy * length
        hx, hy = -ux * 3.0, -uy * 3.0
        body.append(
            f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" stroke="#1f4e9c" stroke-width="1"/>'
        )
        body.append(
            f'<polygon points="{x1:.2f},{y1:.2f} {x1 + hx - hy:.2f},{y1 + hy + hx:.2f} '
            f'{x1 + hx + hy:.2f},{y1 + hy - hx:.2f}" fill="#1f4e9c"/>'
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_svg_doc(body, title), encoding="utf-8")
    return path


def heatmap_svg(land: Landscape, path: str | os.PathLike, title: str = "landscape") -> Path:
    """Cell heatmap on a blue-white-red ramp centred on the median value."""
    vals = land.values
    lo, hi = float(vals.min()), float(vals.max())
    mid = float(np.median(vals))
    span = _SVG_SIZE - 2 * _MARGIN
    w = span / len(land.a)
    h = span / len(land.b)

    def colour(v):
        if v >= mid:
            t = 0.0 if hi == mid else (v - mid) / (hi - mid)
            r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
        else:
            t = 0.0 if lo == mid else (mid - v) / (mid - lo)
            r, g, b = int(255 * (1 - t)), int(255 * (1 - t)), 255
        return f"#{r:02x}{g:02x}{b:02x}"

    body = _axes(land.a_name, land.b_name, (land.a.min(), land.a.max()), (land.b.min(), land.b.max()))
    for i in range(len(land.a)):
        for j in range(len(land.b)):
            x = _MARGIN + i * w
            y = _SVG_SIZE - _MARGIN - (j + 1) * h
            body.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{colour(vals[i, j])}"/>'
            )
    body.append(f'<text x="{_SVG_SIZE - _MARGIN}" y="20" font-size="10" text-anchor="end">min {lo:.4g} max {hi:.4g}</text>')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_svg_doc(body, title), encoding="utf-8")
    return path
