"""Classical spatial interpolators: ordinary kriging, natural neighbor, IDW.

All three fill every cell of a target grid geometry from scattered samples.
Kriging is local: each cell is predicted from its k nearest samples through
the ordinary-kriging system (semivariance form with a Lagrange multiplier
enforcing unit weight sum). Natural neighbor uses the discrete Sibson
construction on a supersampled Voronoi raster, which trades exact Delaunay
geometry for bounded discretization error. IDW is the cheap reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .raster import GridTile, SparsePoints, grid_to_points

_VARIOGRAM_KINDS = ("exponential", "spherical", "gaussian")


@dataclass
class VariogramModel:
    """Fitted semivariogram: gamma(h) rises from the nugget toward the sill,
    reaching ~95% of it at the (practical) range."""

    kind: str
    nugget: float
    sill: float
    range_: float
    bins: list[tuple[float, float, int]] = field(default_factory=list)
    degenerate: bool = False

    def __post_init__(self) -> None:
        if self.kind not in _VARIOGRAM_KINDS:
            raise ValueError(f"unknown variogram kind {self.kind!r}")
        if self.nugget < 0:
            raise ValueError(f"nugget must be >= 0, got {self.nugget}")
        if not self.sill > self.nugget:
            raise ValueError(f"sill ({self.sill}) must exceed nugget ({self.nugget})")
        if not self.range_ > 0:
            raise ValueError(f"range must be positive, got {self.range_}")

    def gamma(self, h) -> np.ndarray:
        """Model semivariance at lag(s) h."""
        h = np.asarray(h, dtype=np.float64)
        partial = self.sill - self.nugget
        a = self.range_
        if self.kind == "exponential":
            g = partial * (1.0 - np.exp(-3.0 * h / a))
        elif self.kind == "gaussian":
            g = partial * (1.0 - np.exp(-3.0 * (h / a) ** 2))
        else:  # spherical
            hr = np.clip(h / a, 0.0, 1.0)
            g = partial * (1.5 * hr - 0.5 * hr**3)
        return self.nugget + g


@dataclass
class InterpRequest:
    """Scattered samples plus the grid geometry to interpolate onto."""

    samples: SparsePoints
    width: int
    height: int
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)
    k: int = 32
    power: float = 2.0

    def __post_init__(self) -> None:
        if len(self.samples) < 1:
            raise ValueError("need at least one sample")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.width < 1 or self.height < 1:
            raise ValueError("target grid must be at least 1x1")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if not self.power > 0:
            raise ValueError(f"power must be positive, got {self.power}")

    @classmethod
    def from_tile(cls, tile: GridTile, k: int = 32, power: float = 2.0) -> "InterpRequest":
        """Use a sparse tile's valid cells as samples, its geometry as target."""
        return cls(
            samples=grid_to_points(tile),
            width=tile.width,
            height=tile.height,
            cell_size=tile.cell_size,
            origin=tile.origin,
            k=k,
            power=power,
        )

    def cell_centers(self) -> np.ndarray:
        """(N, 2) x/y coordinates of target cell centers, row-major, north first."""
        cols = self.origin[0] + (np.arange(self.width) + 0.5) * self.cell_size
        rows = self.origin[1] + (self.height - 1 - np.arange(self.height) + 0.5) * self.cell_size
        xx, yy = np.meshgrid(cols, rows)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def _grid(self, values: np.ndarray, valid: np.ndarray | None = None) -> GridTile:
        v = values.reshape(self.height, self.width)
        m = (
            np.ones((self.height, self.width), dtype=bool)
            if valid is None
            else valid.reshape(self.height, self.width)
        )
        return GridTile(v, m, self.cell_size, self.origin)


# ---------------------------------------------------------------------------
# Variogram estimation


def empirical_semivariogram(
    samples: SparsePoints, n_bins: int = 15, max_lag: float | None = None
) -> list[tuple[float, float, int]]:
    """Binned estimator: gamma(h) = sum (zi - zj)^2 / (2 n) over pairs near lag h.

    Returns (bin center, semivariance, pair count) for nonempty bins. max_lag
    defaults to half the largest pairwise distance, the usual cutoff beyond
    which bins are too thin to trust.
    """
    n = len(samples)
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    xy = np.column_stack([samples.x, samples.y])
    d = pdist(xy)
    dz2 = pdist(samples.z.reshape(-1, 1), metric="sqeuclidean")
    if max_lag is None:
        max_lag = float(d.max()) / 2.0
    if max_lag <= 0:
        raise ValueError("all samples are co-located; no lags to bin")
    width = max_lag / n_bins
    # Last bin is right-inclusive so a pair at exactly max_lag is kept.
    idx = np.minimum(np.floor(d / width).astype(np.int64), n_bins - 1)
    keep = (d > 0) & (d <= max_lag)
    out = []
    for b in range(n_bins):
        sel = keep & (idx == b)
        count = int(sel.sum())
        if count == 0:
            continue
        gamma = float(dz2[sel].sum()) / (2.0 * count)
        out.append(((b + 0.5) * width, gamma, count))
    return out


def fit_variogram(
    bins: list[tuple[float, float, int]], kind: str = "exponential"
) -> VariogramModel:
    """Weighted least squares over (nugget, partial sill, range).

    Weights are pair counts. A fixed grid of initial ranges makes the
    multi-start deterministic; the best weighted SSE wins, first on ties.
    All-zero semivariances yield a flagged pure-nugget model.
    """
    if kind not in _VARIOGRAM_KINDS:
        raise ValueError(f"unknown variogram kind {kind!r}")
    if len(bins) < 3:
        raise ValueError(f"need at least 3 nonempty bins, got {len(bins)}")
    lags = np.array([b[0] for b in bins])
    gammas = np.array([b[1] for b in bins])
    counts = np.array([b[2] for b in bins], dtype=np.float64)

    if np.all(gammas == 0.0):
        return VariogramModel(kind, 0.0, 1e-12, float(lags.max()), list(bins), degenerate=True)

    wroot = np.sqrt(counts)
    max_lag = float(lags.max())
    sill0 = float(gammas.max())

    def residuals(theta):
        nugget, partial, rng = theta
        model = VariogramModel(kind, 0.0, 1.0, rng).gamma(lags) * partial + nugget
        return wroot * (model - gammas)

    best = None
    for frac in (0.1, 0.25, 0.5, 1.0, 2.0):
        x0 = np.array([0.0, sill0, max(frac * max_lag, 1e-9)])
        res = least_squares(
            residuals,
            x0,
            bounds=([0.0, 1e-12, 1e-9], [np.inf, np.inf, np.inf]),
            method="trf",
        )
        sse = float((res.fun**2).sum())
        if best is None or sse < best[0] - 1e-15:
            best = (sse, res.x)
    nugget, partial, rng = best[1]
    return VariogramModel(
        kind, float(nugget), float(nugget + max(partial, 1e-12)), float(rng), list(bins)
    )


def fit_variogram_from_points(
    samples: SparsePoints, kind: str = "exponential", n_bins: int = 15
) -> VariogramModel:
    return fit_variogram(empirical_semivariogram(samples, n_bins=n_bins), kind)


# ---------------------------------------------------------------------------
# Ordinary kriging


def ok_interpolate(
    req: InterpRequest, vmodel: VariogramModel
) -> tuple[GridTile, int]:
    """Local ordinary kriging; returns (tile, count of unsolvable cells).

    Per cell: the k+1 system over the k nearest samples (semivariances plus
    the unit-sum Lagrange row) is solved with partial pivoting after a 1e-10
    diagonal regularization. Cells whose system stays singular are invalid.
    """
    n = len(req.samples)
    if n < 2:
        raise ValueError(f"ordinary kriging needs >= 2 samples, got {n}")
    k = min(req.k, n)
    xy = np.column_stack([req.samples.x, req.samples.y])
    tree = cKDTree(xy)
    centers = req.cell_centers()
    dist, idx = tree.query(centers, k=k)
    dist = dist.reshape(len(centers), k)
    idx = idx.reshape(len(centers), k)

    # Pairwise sample-sample semivariance blocks per cell.
    pts = xy[idx]  # [cells, k, 2]
    pair_d = np.sqrt(((pts[:, :, None, :] - pts[:, None, :, :]) ** 2).sum(-1))
    a = np.empty((len(centers), k + 1, k + 1))
    a[:, :k, :k] = vmodel.gamma(pair_d)
    a[:, :k, :k][:, np.arange(k), np.arange(k)] = 0.0  # gamma(0) on the diagonal
    a[:, k, :k] = 1.0
    a[:, :k, k] = 1.0
    a[:, k, k] = 0.0
    a += 1e-10 * np.eye(k + 1)

    b = np.empty((len(centers), k + 1))
    b[:, :k] = vmodel.gamma(dist)
    b[:, :k][dist == 0.0] = 0.0
    b[:, k] = 1.0

    values = np.empty(len(centers))
    valid = np.ones(len(centers), dtype=bool)
    z = req.samples.z
    try:
        lam = np.linalg.solve(a, b[..., None])[..., 0]
        values = (lam[:, :k] * z[idx]).sum(axis=1)
    except np.linalg.LinAlgError:
        for i in range(len(centers)):
            try:
                lam_i = np.linalg.solve(a[i], b[i])
                values[i] = float(lam_i[:k] @ z[idx[i]])
            except np.linalg.LinAlgError:
                valid[i] = False
                values[i] = 0.0
    failed = int((~valid).sum())
    return req._grid(values, valid), failed


# ---------------------------------------------------------------------------
# Natural neighbor (discrete Sibson)


def nn_interpolate(req: InterpRequest, supersample: int = 4) -> GridTile:
    """Discrete Sibson interpolation.

    The sample Voronoi diagram is rasterized at supersample x target
    resolution. For each target cell, a virtual site at the cell center
    steals every subcell strictly closer to it than to its current owner;
    the prediction is the steal-count-weighted mean of the owners' values.
    A cell whose site steals nothing falls back to its nearest sample.
    """
    if supersample < 1:
        raise ValueError(f"supersample must be >= 1, got {supersample}")
    xy = np.column_stack([req.samples.x, req.samples.y])
    z = req.samples.z
    tree = cKDTree(xy)

    ss = supersample
    sub_cs = req.cell_size / ss
    sub_w, sub_h = req.width * ss, req.height * ss
    sx = req.origin[0] + (np.arange(sub_w) + 0.5) * sub_cs
    sy = req.origin[1] + (sub_h - 1 - np.arange(sub_h) + 0.5) * sub_cs
    sxx, syy = np.meshgrid(sx, sy)
    subcenters = np.column_stack([sxx.ravel(), syy.ravel()])
    owner_dist, owner = tree.query(subcenters)

    centers = req.cell_centers()
    nearest_dist, nearest = tree.query(centers)
    values = np.empty(len(centers))
    for i, (cx, cy) in enumerate(centers):
        d_virtual = np.hypot(subcenters[:, 0] - cx, subcenters[:, 1] - cy)
        stolen = d_virtual < owner_dist
        if not stolen.any():
            values[i] = z[nearest[i]]
            continue
        counts = np.bincount(owner[stolen], minlength=len(z))
        values[i] = float(counts @ z) / counts.sum()
    return req._grid(values)


# ---------------------------------------------------------------------------
# Inverse distance weighting


def idw_interpolate(req: InterpRequest, power: float | None = None) -> GridTile:
    """IDW over the k nearest samples; exact at zero distance."""
    p = req.power if power is None else power
    if not p > 0:
        raise ValueError(f"power must be positive, got {p}")
    n = len(req.samples)
    k = min(req.k, n)
    xy = np.column_stack([req.samples.x, req.samples.y])
    tree = cKDTree(xy)
    centers = req.cell_centers()
    dist, idx = tree.query(centers, k=k)
    dist = dist.reshape(len(centers), k)
    idx = idx.reshape(len(centers), k)
    z = req.samples.z[idx]

    values = np.empty(len(centers))
    exact = dist[:, 0] == 0.0
    if exact.any():
        # Lowest sample index among co-located samples, for determinism.
        for i in np.nonzero(exact)[0]:
            zero = dist[i] == 0.0
            values[i] = req.samples.z[idx[i][zero].min()]
    rest = ~exact
    w = dist[rest] ** (-p)
    values[rest] = (w * z[rest]).sum(axis=1) / w.sum(axis=1)
    return req._grid(values)
