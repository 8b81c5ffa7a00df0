"""Grid sweep over (alpha_h, alpha_l) trading memory against attention error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .cli.runner import run_workload
from .cli.workload import Workload
from .errors import InvalidInputError
from .memstore import PageGeometry
from .policy import PolicyParams

DEFAULT_ALPHA_H = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
DEFAULT_ALPHA_L = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1)


@dataclass(frozen=True)
class CalibrationPoint:
    alpha_h: float
    alpha_l: float
    memory_fraction: float
    quality_error: float


def pareto_frontier(points: Sequence[CalibrationPoint]) -> list[CalibrationPoint]:
    """Points no other point beats on both memory and error, by increasing memory."""
    ordered = sorted(points, key=lambda p: (p.memory_fraction, p.quality_error, p.alpha_h, p.alpha_l))
    out, best = [], float("inf")
    for p in ordered:
        if p.quality_error < best:
            out.append(p)
            best = p.quality_error
    return out


def calibrate(workload: Workload, base: PolicyParams, geometry: PageGeometry,
              alpha_h_grid: Sequence[float] = DEFAULT_ALPHA_H, alpha_l_grid: Sequence[float] = DEFAULT_ALPHA_L,
              workers: int = 1) -> tuple[list[CalibrationPoint], list[CalibrationPoint]]:
    """Run every grid point with ``alpha_l <= alpha_h``; return (points, frontier).

    Memory is the payload fraction; quality is the mean relative L2 error of
    generation-step attention outputs against full-precision attention.
    """
    if not workload.requests:
        raise InvalidInputError("empty workload")
    if not alpha_h_grid or not alpha_l_grid:
        raise InvalidInputError("empty threshold grid")
    points = []
    for ah in alpha_h_grid:
        for al in alpha_l_grid:
            if al > ah:
                continue
            res = run_workload(workload, base.with_thresholds(ah, al), geometry, workers=workers)
            points.append(CalibrationPoint(float(ah), float(al), float(res.payload_fraction), res.quality_error))
    if not points:
        raise InvalidInputError("no grid point satisfies alpha_l <= alpha_h")
    return points, pareto_frontier(points)
