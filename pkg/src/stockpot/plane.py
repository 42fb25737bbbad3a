"""Two-dimensional weight planes through three checkpoints.

The plane is spanned from ``w0`` by an orthonormal pair obtained with
Gram-Schmidt on the full flattened deltas. Grid points are emitted as full
checkpoints so an external evaluator can render the error landscape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from stockpot._reduce import dot, norm
from stockpot.tensor_store import Checkpoint, require_compatible


class PlaneError(ValueError):
    pass


def _flatten(ckpt: Checkpoint) -> np.ndarray:
    if not len(ckpt):
        return np.zeros(0)
    return np.concatenate([np.ravel(r.values) for r in ckpt])


@dataclass(frozen=True)
class Plane:
    origin: Checkpoint
    e1: np.ndarray
    e2: np.ndarray
    points: Dict[str, Tuple[float, float]]

    def project(self, ckpt: Checkpoint) -> Tuple[float, float]:
        d = _flatten(ckpt) - _flatten(self.origin)
        return dot(d, self.e1), dot(d, self.e2)

    def point(self, x: float, y: float) -> Checkpoint:
        flat = _flatten(self.origin) + x * self.e1 + y * self.e2
        out = {}
        pos = 0
        for r in self.origin:
            out[r.name] = flat[pos : pos + r.numel].reshape(r.shape)
            pos += r.numel
        return Checkpoint.from_arrays(out, self.origin.dtypes)


def plane_basis(w0: Checkpoint, wA: Checkpoint, wB: Checkpoint) -> Plane:
    require_compatible([w0, wA, wB])
    base = _flatten(w0)
    a = _flatten(wA) - base
    b = _flatten(wB) - base
    na = norm(a)
    if na <= 1e-12 * math.sqrt(max(a.size, 1)):
        raise PlaneError("wA equals w0: no first basis direction")
    e1 = a / na
    r = b - dot(b, e1) * e1
    nr = norm(r)
    if nr <= 1e-9 * max(norm(b), 1e-300):
        raise PlaneError("wB is collinear with w0-wA; use interpolate_pair for a 1-D sweep")
    e2 = r / nr
    # one re-orthogonalization pass keeps e1.e2 at rounding level
    e2 = e2 - dot(e2, e1) * e1
    e2 = e2 / norm(e2)
    points = {"w0": (0.0, 0.0), "wA": (na, 0.0), "wB": (dot(b, e1), dot(b, e2))}
    return Plane(w0, e1, e2, points)


@dataclass(frozen=True)
class GridPoint:
    row: int
    col: int
    x: float
    y: float
    checkpoint: Checkpoint


def grid_axes(plane: Plane, rows: int, cols: int, margin: float) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinates along e1 (cols) and e2 (rows).

    ``margin`` is a fraction of the bounding-box extent added on each side.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    xs = [p[0] for p in plane.points.values()]
    ys = [p[1] for p in plane.points.values()]
    span_x = max(xs) - min(xs)
    span_y = max(ys) - min(ys)
    x = np.linspace(min(xs) - margin * span_x, max(xs) + margin * span_x, cols)
    y = np.linspace(min(ys) - margin * span_y, max(ys) + margin * span_y, rows)
    return x, y


def plane_grid(
    w0: Checkpoint, wA: Checkpoint, wB: Checkpoint, rows: int, cols: int, margin: float = 0.2
) -> Tuple[Plane, Iterator[GridPoint]]:
    """Return the plane and a lazy row-major iterator over its grid points."""
    plane = plane_basis(w0, wA, wB)
    xs, ys = grid_axes(plane, rows, cols, margin)

    def points():
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                yield GridPoint(i, j, float(x), float(y), plane.point(float(x), float(y)))

    return plane, points()


def manifest(plane: Plane, grid: List[GridPoint], files: List[str]) -> dict:
    return {
        "basis": {
            "norm_wA_minus_w0": plane.points["wA"][0],
            "wB_e1": plane.points["wB"][0],
            "wB_e2": plane.points["wB"][1],
            "e1_dot_e2": dot(plane.e1, plane.e2),
        },
        "anchors": {k: list(v) for k, v in plane.points.items()},
        "grid": [
            {"row": g.row, "col": g.col, "x": g.x, "y": g.y, "file": f} for g, f in zip(grid, files)
        ],
    }
