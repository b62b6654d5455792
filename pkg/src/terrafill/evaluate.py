"""Assessment of interpolated DEMs: elevation error, slope error, streams.

Three layers of scrutiny, each harder to fake than the last. Elevation
differences catch bias and noise. Slope differences catch smoothing that
elevation stats miss. Stream-network precision/recall catches structural
damage: a raster can have low RMSE and still route water into the wrong
valley. Streams come from a D8 flow model on a sink-filled raster, with
cells counted as stream when enough area drains through them.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import ops
from .loss import sobel_slope
from .model import make_mask
from .raster import GridGeometryError, GridTile

DEFAULT_THRESHOLDS_M2 = (20_000.0, 100_000.0, 2_000_000.0)

# D8 neighbor offsets in fixed tie-break order: E, SE, S, SW, W, NW, N, NE.
_D8 = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class DiffStats:
    """Population statistics of a difference field (predicted - reference)."""

    mean: float
    std: float
    mae: float
    rmse: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "mae": self.mae, "rmse": self.rmse}


@dataclass(frozen=True)
class StreamResult:
    """Stream-network agreement at one accumulation threshold.

    degenerate is set when either denominator is empty (no predicted or no
    reference stream cells); the affected ratio is reported as 0 so reports
    stay sortable.
    """

    threshold_m2: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "threshold_m2": self.threshold_m2,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class EvalReport:
    """Full assessment: elevation stats, slope stats (degrees), streams."""

    elevation: DiffStats
    slope: DiffStats
    streams: tuple[StreamResult, ...]

    def __post_init__(self) -> None:
        ts = [s.threshold_m2 for s in self.streams]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"stream thresholds must be strictly increasing, got {ts}")


def _stats(diff: np.ndarray) -> DiffStats:
    mean = float(diff.mean())
    std = float(diff.std())
    mae = float(np.abs(diff).mean())
    rmse = float(np.sqrt(np.mean(diff * diff)))
    return DiffStats(mean, std, mae, rmse)


def _check_geometry(pred: GridTile, ref: GridTile) -> None:
    if not pred.same_geometry(ref):
        raise GridGeometryError(
            f"raster geometries differ: {pred.shape}@{pred.origin}/{pred.cell_size} "
            f"vs {ref.shape}@{ref.origin}/{ref.cell_size}"
        )


def diff_stats(pred: GridTile, ref: GridTile) -> DiffStats:
    """Elevation difference statistics over cells valid in both rasters."""
    _check_geometry(pred, ref)
    both = pred.valid & ref.valid
    if not both.any():
        raise ValueError("no cells are valid in both rasters")
    return _stats(pred.values[both] - ref.values[both])


def slope_field_degrees(values: np.ndarray, cell_size: float) -> np.ndarray:
    """Sobel slope of a height field, in degrees."""
    t = ops.tensor(values, requires_grad=False)
    return np.degrees(ops.to_numpy(sobel_slope(t, cell_size)))


def slope_stats(pred: GridTile, ref: GridTile, cell_size: float | None = None) -> DiffStats:
    """Slope difference statistics in degrees.

    Slopes are computed in the meters domain from the full height fields
    (replicate-padded Sobel), so border cells carry one-sided estimates.
    Intended for fully valid rasters; with partial validity the stats cover
    cells valid in both, but slopes next to invalid cells see the nodata
    sentinel.
    """
    _check_geometry(pred, ref)
    cs = pred.cell_size if cell_size is None else cell_size
    both = pred.valid & ref.valid
    if not both.any():
        raise ValueError("no cells are valid in both rasters")
    sp = slope_field_degrees(pred.values, cs)
    sr = slope_field_degrees(ref.values, cs)
    return _stats((sp - sr)[both])


# ---------------------------------------------------------------------------
# Hydrology


def fill_sinks(dem: GridTile) -> GridTile:
    """Priority-flood depression filling.

    Grows inward from the boundary, always expanding from the lowest cell
    seen so far; a neighbor below the current spill level is raised to it.
    The result is the pointwise-minimal raster >= the input in which every
    cell has a non-ascending 8-connected path to the boundary. Idempotent.
    """
    if not dem.valid.all():
        raise ValueError("fill_sinks requires a fully valid raster")
    h, w = dem.shape
    out = dem.values.copy()
    if h <= 2 or w <= 2:
        return GridTile(out, np.ones((h, w), bool), dem.cell_size, dem.origin, dem.nodata)
    visited = np.zeros((h, w), dtype=bool)
    heap: list[tuple[float, int]] = []
    for r in range(h):
        for c in range(w):
            if r in (0, h - 1) or c in (0, w - 1):
                visited[r, c] = True
                heapq.heappush(heap, (out[r, c], r * w + c))
    while heap:
        z, flat_idx = heapq.heappop(heap)
        r, c = divmod(flat_idx, w)
        for dr, dc in _D8:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not visited[nr, nc]:
                visited[nr, nc] = True
                if out[nr, nc] < z:
                    out[nr, nc] = z
                heapq.heappush(heap, (out[nr, nc], nr * w + nc))
    return GridTile(out, np.ones((h, w), bool), dem.cell_size, dem.origin, dem.nodata)


def d8_receivers(dem: GridTile) -> np.ndarray:
    """Flat index of the cell each cell drains to, -1 where flow exits.

    Steepest drop wins (drop = dz / distance, diagonals sqrt(2) longer);
    ties take the first neighbor in E, SE, S, SW, W, NW, N, NE order. Cells
    with no lower neighbor are flat: boundary flats exit the raster, and
    interior flats are routed across the plateau by breadth-first distance
    to the nearest spill cell. Unfillable interior pits (possible only on
    rasters that were not sink-filled) exit in place rather than failing.
    """
    if not dem.valid.all():
        raise ValueError("flow routing requires a fully valid raster")
    h, w = dem.shape
    z = dem.values
    recv = np.full((h, w), -1, dtype=np.int64)
    flat = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            best_drop = 0.0
            best = -1
            for dr, dc in _D8:
                nr, nc = r + dr, c + dc
                if 0 <= nr < h and 0 <= nc < w:
                    drop = z[r, c] - z[nr, nc]
                    if dr and dc:
                        drop /= _SQRT2
                    if drop > best_drop:
                        best_drop = drop
                        best = nr * w + nc
            if best >= 0:
                recv[r, c] = best
            else:
                flat[r, c] = True

    # Route flats toward their nearest outlet: a plateau cell next to an
    # equal-height cell that drains, or the raster edge.
    dist = np.full((h, w), -1, dtype=np.int64)
    queue: deque[tuple[int, int]] = deque()
    for r in range(h):
        for c in range(w):
            if not flat[r, c]:
                continue
            if r in (0, h - 1) or c in (0, w - 1):
                dist[r, c] = 0  # exits off-grid, recv stays -1
                queue.append((r, c))
                continue
            for dr, dc in _D8:
                nr, nc = r + dr, c + dc
                if not flat[nr, nc] and z[nr, nc] == z[r, c]:
                    recv[r, c] = nr * w + nc
                    dist[r, c] = 0
                    queue.append((r, c))
                    break
    while queue:
        r, c = queue.popleft()
        for dr, dc in _D8:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and flat[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = dist[r, c] + 1
                recv[nr, nc] = r * w + c
                queue.append((nr, nc))
    return recv


def flow_accumulation(dem: GridTile) -> np.ndarray:
    """Cells draining through each cell, itself included (D8 routing).

    Topological accumulation over the receiver graph; acyclic because flow
    either descends strictly or moves toward a plateau outlet.
    """
    recv = d8_receivers(dem).ravel()
    n = recv.size
    acc = np.ones(n, dtype=np.int64)
    indeg = np.bincount(recv[recv >= 0], minlength=n)
    queue = deque(int(i) for i in np.flatnonzero(indeg == 0))
    while queue:
        c = queue.popleft()
        r = recv[c]
        if r >= 0:
            acc[r] += acc[c]
            indeg[r] -= 1
            if indeg[r] == 0:
                queue.append(int(r))
    return acc.reshape(dem.shape)


def stream_cutoff_cells(threshold_m2: float, cell_size: float) -> int:
    """Smallest cell count n with n * cell_size^2 >= threshold_m2."""
    area = cell_size * cell_size
    n = max(1, math.ceil(threshold_m2 / area))
    while n > 1 and (n - 1) * area >= threshold_m2:
        n -= 1
    while n * area < threshold_m2:
        n += 1
    return n


def extract_streams(dem: GridTile, threshold_m2: float) -> np.ndarray:
    """Boolean stream raster: sink-fill, accumulate, threshold by drained area."""
    if threshold_m2 < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold_m2}")
    acc = flow_accumulation(fill_sinks(dem))
    return acc >= stream_cutoff_cells(threshold_m2, dem.cell_size)


def stream_tile(streams: np.ndarray, like: GridTile) -> GridTile:
    """Wrap a boolean stream raster as a 0/1 grid for ASCII export."""
    return GridTile(
        streams.astype(np.float64),
        np.ones(like.shape, dtype=bool),
        like.cell_size,
        like.origin,
        like.nodata,
    )


def stream_pr(pred: GridTile, ref: GridTile, threshold_m2: float) -> StreamResult:
    """Stream precision/recall with a one-cell tolerance band.

    The reference network is the reference streams dilated by one cell
    (3x3); predicted stream cells inside it are TP, outside FP. FN counts
    reference stream cells missed by the predicted network after the same
    dilation, keeping the buffering symmetric between the two rates.
    """
    _check_geometry(pred, ref)
    ref_streams = extract_streams(ref, threshold_m2)
    pred_streams = extract_streams(pred, threshold_m2)
    box = np.ones((3, 3), dtype=bool)
    ref_net = ndimage.binary_dilation(ref_streams, structure=box)
    pred_net = ndimage.binary_dilation(pred_streams, structure=box)
    tp = int((pred_streams & ref_net).sum())
    fp = int((pred_streams & ~ref_net).sum())
    fn = int((ref_streams & ~pred_net).sum())
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    return StreamResult(float(threshold_m2), tp, fp, fn, precision, recall, degenerate)


def pr_threshold_sweep(
    pred: GridTile, ref: GridTile, thresholds=DEFAULT_THRESHOLDS_M2
) -> list[StreamResult]:
    """stream_pr at each threshold, ascending; duplicates collapse."""
    if len(thresholds) == 0:
        raise ValueError("need at least one threshold")
    return [stream_pr(pred, ref, t) for t in sorted(set(float(t) for t in thresholds))]


def evaluate(pred: GridTile, ref: GridTile, thresholds=DEFAULT_THRESHOLDS_M2) -> EvalReport:
    """Full three-part assessment of a predicted raster against a reference."""
    return EvalReport(
        elevation=diff_stats(pred, ref),
        slope=slope_stats(pred, ref),
        streams=tuple(pr_threshold_sweep(pred, ref, thresholds)),
    )


def report_json(report: EvalReport) -> str:
    """Deterministic JSON rendering of a report.

    Schema: {"elevation": {mean, std, mae, rmse}, "slope": {...},
    "streams": [{threshold_m2, tp, fp, fn, precision, recall, degenerate}]}.
    """
    doc = {
        "elevation": report.elevation.as_dict(),
        "slope": report.slope.as_dict(),
        "streams": [s.as_dict() for s in report.streams],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_csv(report: EvalReport) -> str:
    """Flat CSV: one row per metric.

    Eight stat rows (elevation and slope x mean/std/mae/rmse) followed by
    three rows per threshold (tp, precision, recall; counts fp/fn live in
    the JSON form).
    """
    lines = ["section,metric,threshold_m2,value"]
    for section, stats in (("elevation", report.elevation), ("slope", report.slope)):
        for metric, value in stats.as_dict().items():
            lines.append(f"{section},{metric},,{repr(value)}")
    for s in report.streams:
        t = repr(s.threshold_m2)
        lines.append(f"streams,tp,{t},{s.tp}")
        lines.append(f"streams,precision,{t},{repr(s.precision)}")
        lines.append(f"streams,recall,{t},{repr(s.recall)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sparsity sweep


def sparsify(tile: GridTile, level: float, seed: int, strategy: str = "random") -> GridTile:
    """Knock out a fraction of cells (level = target sparsity).

    Random strategy is seeded; uniform ignores the seed and needs a square
    tile.
    """
    if not 0.0 <= level < 1.0:
        raise ValueError(f"sparsity level must be in [0, 1), got {level}")
    if not tile.valid.all():
        raise ValueError("sparsify expects a fully valid tile")
    plan = make_mask(tile.width * tile.height, level, seed=seed, strategy=strategy)
    out = tile.copy()
    flat_valid = out.valid.ravel()
    flat_valid[plan.masked] = False
    out.valid = flat_valid.reshape(tile.shape)
    out.values[~out.valid] = out.nodata
    return out


def sparsity_sweep(
    ref_dem: GridTile,
    levels,
    methods: dict,
    seed: int = 0,
) -> list[dict]:
    """Degrade a reference DEM to each sparsity level and score each method.

    methods maps a name to a callable taking the sparse GridTile and
    returning a fully interpolated GridTile. Returns one row per
    (level, method) with elevation difference stats against the reference.
    Masking is seeded per level, so every method sees the same holes.
    """
    levels = list(levels)
    if not levels:
        raise ValueError("need at least one sparsity level")
    if not methods:
        raise ValueError("need at least one method")
    rows = []
    for i, level in enumerate(levels):
        mask_seed = int(np.random.default_rng([seed, i]).integers(0, 2**63))
        sparse = sparsify(ref_dem, float(level), mask_seed)
        for name, interpolate in methods.items():
            result = interpolate(sparse)
            stats = diff_stats(result, ref_dem)
            rows.append({"level": float(level), "method": name, **stats.as_dict()})
    return rows


def baseline_interpolators(
    k: int = 32, power: float = 2.0, supersample: int = 4
) -> dict:
    """Ready-made method dict for sparsity_sweep: ok, nn, idw."""
    from .baselines import (
        InterpRequest,
        fit_variogram_from_points,
        idw_interpolate,
        nn_interpolate,
        ok_interpolate,
    )

    def _ok(tile: GridTile) -> GridTile:
        req = InterpRequest.from_tile(tile, k=k, power=power)
        vmodel = fit_variogram_from_points(req.samples)
        return ok_interpolate(req, vmodel)[0]

    def _nn(tile: GridTile) -> GridTile:
        return nn_interpolate(InterpRequest.from_tile(tile, k=k), supersample=supersample)

    def _idw(tile: GridTile) -> GridTile:
        return idw_interpolate(InterpRequest.from_tile(tile, k=k, power=power))

    return {"ok": _ok, "nn": _nn, "idw": _idw}
