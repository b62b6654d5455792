"""Elevation rasters: representation, ASCII-grid I/O, tiling, and synthesis.

A :class:`GridTile` is a regular grid of elevations in meters with a boolean
validity mask. Row 0 of ``values`` is the northernmost row (the order ESRI
ASCII grids are written in); ``origin`` is the (x, y) of the lower-left
corner of the raster extent, so cell ``(r, c)`` has its center at

    x = origin[0] + (c + 0.5) * cell_size
    y = origin[1] + (height - 1 - r + 0.5) * cell_size

Cells with ``valid == False`` always hold the NODATA sentinel in ``values``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

NODATA_DEFAULT = -9999.0

# Header keys of the ESRI ASCII grid format, in file order.
_ASC_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class GridFormatError(ValueError):
    """Raised on malformed raster or point files; message names the line/row."""


class GridGeometryError(ValueError):
    """Raised when rasters that must share a geometry do not."""


@dataclass
class GridTile:
    """A width x height elevation raster with validity mask.

    values : (height, width) float64 array, row 0 = north
    valid  : (height, width) bool array, True where measured/known
    """

    values: np.ndarray
    valid: np.ndarray
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)
    nodata: float = NODATA_DEFAULT

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        if self.valid.shape != self.values.shape:
            raise ValueError(
                f"valid shape {self.valid.shape} != values shape {self.values.shape}"
            )
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        # Sentinel rule: invalid cells always carry the NODATA value.
        self.values = self.values.copy()
        self.values[~self.valid] = self.nodata
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def same_geometry(self, other: "GridTile", tol: float = 1e-6) -> bool:
        return (
            self.shape == other.shape
            and abs(self.cell_size - other.cell_size) <= tol * self.cell_size
            and abs(self.origin[0] - other.origin[0]) <= tol * self.cell_size
            and abs(self.origin[1] - other.origin[1]) <= tol * self.cell_size
        )

    def copy(self) -> "GridTile":
        return GridTile(
            self.values.copy(), self.valid.copy(), self.cell_size, self.origin, self.nodata
        )

    def cell_center(self, r: int, c: int) -> tuple[float, float]:
        x = self.origin[0] + (c + 0.5) * self.cell_size
        y = self.origin[1] + (self.height - 1 - r + 0.5) * self.cell_size
        return x, y


@dataclass
class SparsePoints:
    """Scattered (x, y, z) elevation samples in meters."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if not (self.x.shape == self.y.shape == self.z.shape and self.x.ndim == 1):
            raise ValueError("x, y, z must be 1-D arrays of equal length")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class NormStats:
    """Shift/scale pair recorded by :func:`normalize` for exact inversion."""

    shift: float
    scale: float

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def empty_grid(
    width: int,
    height: int,
    cell_size: float,
    origin: tuple[float, float] = (0.0, 0.0),
    nodata: float = NODATA_DEFAULT,
) -> GridTile:
    """All-invalid tile used as a target geometry template."""
    return GridTile(
        np.full((height, width), nodata),
        np.zeros((height, width), dtype=bool),
        cell_size,
        origin,
        nodata,
    )


# ---------------------------------------------------------------------------
# File I/O


def load_ascii_grid(path) -> GridTile:
    """Read an ESRI ASCII grid (.asc).

    Expects the six-line header (NODATA_value optional, default -9999)
    followed by nrows data lines of ncols whitespace-separated values,
    north row first. Malformed input raises GridFormatError naming the line.
    """
    with open(path) as f:
        lines = f.read().splitlines()

    header: dict[str, float] = {}
    lineno = 0
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) == 2 and parts[0].lower() in _ASC_KEYS:
            key = parts[0].lower()
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise GridFormatError(
                    f"{path}: line {lineno}: non-numeric header value {parts[1]!r}"
                ) from None
        else:
            break
    else:
        lineno += 1  # file was all header

    for key in _ASC_KEYS[:5]:
        if key not in header:
            raise GridFormatError(f"{path}: missing header field {key!r}")
    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    if ncols < 1 or nrows < 1 or header["ncols"] != ncols or header["nrows"] != nrows:
        raise GridFormatError(f"{path}: ncols/nrows must be positive integers")
    if header["cellsize"] <= 0:
        raise GridFormatError(f"{path}: cellsize must be positive")
    nodata = header.get("nodata_value", NODATA_DEFAULT)

    data_lines = [
        (i, line) for i, line in enumerate(lines[lineno - 1 :], start=lineno) if line.strip()
    ]
    if len(data_lines) != nrows:
        raise GridFormatError(
            f"{path}: expected {nrows} data rows, found {len(data_lines)}"
        )

    values = np.empty((nrows, ncols), dtype=np.float64)
    for r, (fileline, line) in enumerate(data_lines):
        tokens = line.split()
        if len(tokens) != ncols:
            raise GridFormatError(
                f"{path}: line {fileline}: expected {ncols} values, found {len(tokens)}"
            )
        try:
            values[r] = [float(t) for t in tokens]
        except ValueError:
            bad = next(t for t in tokens if not _is_float(t))
            raise GridFormatError(
                f"{path}: line {fileline}: non-numeric token {bad!r}"
            ) from None

    valid = values != nodata
    return GridTile(
        values,
        valid,
        header["cellsize"],
        (header["xllcorner"], header["yllcorner"]),
        nodata,
    )


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def save_ascii_grid(tile: GridTile, path) -> None:
    """Write an ESRI ASCII grid readable by :func:`load_ascii_grid`.

    Values are written with shortest round-tripping decimal form (repr),
    which preserves full float64 precision.
    """
    with open(path, "w") as f:
        f.write(f"ncols {tile.width}\n")
        f.write(f"nrows {tile.height}\n")
        f.write(f"xllcorner {tile.origin[0]!r}\n")
        f.write(f"yllcorner {tile.origin[1]!r}\n")
        f.write(f"cellsize {tile.cell_size!r}\n")
        f.write(f"NODATA_value {tile.nodata!r}\n")
        for r in range(tile.height):
            row = (
                repr(float(tile.values[r, c])) if tile.valid[r, c] else repr(tile.nodata)
                for c in range(tile.width)
            )
            f.write(" ".join(row) + "\n")


def load_points_csv(path) -> SparsePoints:
    """Read scattered samples from a CSV with header columns x, y, z."""
    xs: list[float] = []
    ys: list[float] = []
    zs: list[float] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise GridFormatError(f"{path}: empty file, expected header x,y,z")
        cols = [c.strip().lower() for c in reader.fieldnames]
        for required in ("x", "y", "z"):
            if required not in cols:
                raise GridFormatError(f"{path}: missing column {required!r}")
        ix, iy, iz = (reader.fieldnames[cols.index(k)] for k in ("x", "y", "z"))
        for rownum, row in enumerate(reader, start=1):
            try:
                px, py, pz = float(row[ix]), float(row[iy]), float(row[iz])
            except (TypeError, ValueError):
                raise GridFormatError(
                    f"{path}: row {rownum}: unparsable number in {row!r}"
                ) from None
            if not (math.isfinite(px) and math.isfinite(py) and math.isfinite(pz)):
                raise GridFormatError(f"{path}: row {rownum}: non-finite value")
            xs.append(px)
            ys.append(py)
            zs.append(pz)
    return SparsePoints(np.array(xs), np.array(ys), np.array(zs))


def save_points_csv(points: SparsePoints, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "z"])
        for px, py, pz in zip(points.x, points.y, points.z):
            writer.writerow([repr(float(px)), repr(float(py)), repr(float(pz))])


# ---------------------------------------------------------------------------
# Grid construction and bookkeeping


def rasterize_points(points: SparsePoints, template: GridTile) -> tuple[GridTile, int]:
    """Bin points onto the template geometry; cell value = mean of its points.

    Returns the rasterized tile and the count of points dropped for falling
    outside the template extent. Raises ValueError if no point lands inside.
    """
    w, h, cs = template.width, template.height, template.cell_size
    x0, y0 = template.origin
    col = np.floor((points.x - x0) / cs).astype(np.int64)
    row = (h - 1 - np.floor((points.y - y0) / cs)).astype(np.int64)
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    dropped = int((~inside).sum())
    if not inside.any():
        raise ValueError("no points fall inside the template extent")

    flat = row[inside] * w + col[inside]
    sums = np.bincount(flat, weights=points.z[inside], minlength=w * h)
    counts = np.bincount(flat, minlength=w * h)
    valid = counts.reshape(h, w) > 0
    values = np.full((h, w), template.nodata, dtype=np.float64)
    values[valid] = sums.reshape(h, w)[valid] / counts.reshape(h, w)[valid]
    return GridTile(values, valid, cs, template.origin, template.nodata), dropped


def grid_to_points(tile: GridTile) -> SparsePoints:
    """Valid cell centers of a tile as scattered samples."""
    rr, cc = np.nonzero(tile.valid)
    x = tile.origin[0] + (cc + 0.5) * tile.cell_size
    y = tile.origin[1] + (tile.height - 1 - rr + 0.5) * tile.cell_size
    return SparsePoints(x, y, tile.values[rr, cc])


def sparsity(tile: GridTile) -> float:
    """Fraction of cells lacking a measurement: invalid count / total count."""
    n = tile.width * tile.height
    if n == 0:
        raise ValueError("empty tile")
    return float((~tile.valid).sum()) / n


def tile(dem: GridTile, tile_size: int, overlap: float = 0.0) -> list[GridTile]:
    """Crop a DEM into row-major square tiles; partial edge tiles are dropped.

    Stride is tile_size*(1-overlap) rounded to the nearest grid, at least 1.
    """
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if tile_size > min(dem.width, dem.height):
        raise ValueError(
            f"tile_size {tile_size} exceeds DEM extent {dem.width}x{dem.height}"
        )
    stride = max(1, round(tile_size * (1.0 - overlap)))
    out: list[GridTile] = []
    for r0 in range(0, dem.height - tile_size + 1, stride):
        for c0 in range(0, dem.width - tile_size + 1, stride):
            sub = dem.values[r0 : r0 + tile_size, c0 : c0 + tile_size]
            submask = dem.valid[r0 : r0 + tile_size, c0 : c0 + tile_size]
            ox = dem.origin[0] + c0 * dem.cell_size
            oy = dem.origin[1] + (dem.height - r0 - tile_size) * dem.cell_size
            out.append(GridTile(sub, submask, dem.cell_size, (ox, oy), dem.nodata))
    return out


def _hann_window(n: int) -> np.ndarray:
    # Offset by half a cell so edge weights stay strictly positive; a cell
    # covered only by a tile border must still receive finite weight.
    i = np.arange(n) + 0.5
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * i / n)


def mosaic(tiles: list[GridTile], blend: str = "average") -> GridTile:
    """Merge aligned tiles into one raster; overlaps combined by weighting.

    blend="average" weights every covering tile equally; blend="hann" applies
    a separable Hann window centered on each tile so seams fade out.
    """
    if not tiles:
        raise ValueError("no tiles to mosaic")
    if blend not in ("average", "hann"):
        raise ValueError(f"unknown blend {blend!r}")
    cs = tiles[0].cell_size
    nodata = tiles[0].nodata
    for t in tiles:
        if abs(t.cell_size - cs) > 1e-9 * cs:
            raise GridGeometryError("tiles have mixed cell sizes")

    base_x = min(t.origin[0] for t in tiles)
    base_y = min(t.origin[1] for t in tiles)
    offsets = []
    for t in tiles:
        fx = (t.origin[0] - base_x) / cs
        fy = (t.origin[1] - base_y) / cs
        cx, cy = round(fx), round(fy)
        if abs(fx - cx) > 1e-6 or abs(fy - cy) > 1e-6:
            raise GridGeometryError(f"tile origin {t.origin} not on the common lattice")
        offsets.append((cx, cy))

    width = max(off_x + t.width for (off_x, _), t in zip(offsets, tiles))
    height = max(off_y + t.height for (_, off_y), t in zip(offsets, tiles))
    acc = np.zeros((height, width))
    wsum = np.zeros((height, width))
    for (off_x, off_y), t in zip(offsets, tiles):
        r0 = height - off_y - t.height  # lattice offsets count from the south
        c0 = off_x
        if blend == "hann":
            w = np.outer(_hann_window(t.height), _hann_window(t.width))
        else:
            w = np.ones(t.shape)
        w = w * t.valid
        acc[r0 : r0 + t.height, c0 : c0 + t.width] += w * np.where(t.valid, t.values, 0.0)
        wsum[r0 : r0 + t.height, c0 : c0 + t.width] += w

    covered = wsum > 0
    values = np.full((height, width), nodata, dtype=np.float64)
    values[covered] = acc[covered] / wsum[covered]
    return GridTile(values, covered, cs, (base_x, base_y), nodata)


def downsample_mean(dem: GridTile, factor: int) -> GridTile:
    """Block-mean downsampling over valid cells; trailing partial blocks dropped."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return dem.copy()
    h2, w2 = dem.height // factor, dem.width // factor
    if h2 == 0 or w2 == 0:
        raise ValueError("factor exceeds DEM extent")
    v = np.where(dem.valid, dem.values, 0.0)[: h2 * factor, : w2 * factor]
    m = dem.valid[: h2 * factor, : w2 * factor]
    vsum = v.reshape(h2, factor, w2, factor).sum(axis=(1, 3))
    count = m.reshape(h2, factor, w2, factor).sum(axis=(1, 3))
    valid = count > 0
    values = np.full((h2, w2), dem.nodata, dtype=np.float64)
    values[valid] = vsum[valid] / count[valid]
    # Dropped trailing rows sit at the south edge, which lifts the y origin.
    oy = dem.origin[1] + (dem.height - h2 * factor) * dem.cell_size
    return GridTile(values, valid, dem.cell_size * factor, (dem.origin[0], oy), dem.nodata)


# ---------------------------------------------------------------------------
# Synthetic terrain


def synth_terrain(
    seed: int,
    size: int,
    roughness: float = 0.6,
    relief: float = 100.0,
    cell_size: float = 30.0,
    origin: tuple[float, float] = (0.0, 0.0),
) -> GridTile:
    """Diamond-square fractal surface rescaled to [0, relief].

    Generated on the smallest (2^k + 1)-sided lattice covering ``size`` and
    cropped. Pure function of (seed, size, roughness, relief): the same seed
    always yields the same terrain.
    """
    if size < 2:
        raise ValueError(f"size must be >= 2, got {size}")
    if not 0 < roughness <= 1:
        raise ValueError(f"roughness must be in (0, 1], got {roughness}")
    k = max(1, math.ceil(math.log2(size - 1)))
    n = 2**k + 1
    rng = np.random.default_rng(seed)

    grid = np.zeros((n, n))
    grid[0, 0], grid[0, -1], grid[-1, 0], grid[-1, -1] = rng.uniform(-1, 1, size=4)
    step = n - 1
    amp = 1.0
    while step > 1:
        half = step // 2
        # Diamond pass: square centers from their four corners.
        for r in range(half, n, step):
            for c in range(half, n, step):
                mean = (
                    grid[r - half, c - half]
                    + grid[r - half, c + half]
                    + grid[r + half, c - half]
                    + grid[r + half, c + half]
                ) / 4.0
                grid[r, c] = mean + rng.uniform(-amp, amp)
        # Square pass: edge midpoints from their in-grid diamond neighbors.
        for r in range(0, n, half):
            c_start = half if (r // half) % 2 == 0 else 0
            for c in range(c_start, n, step):
                total, cnt = 0.0, 0
                if r - half >= 0:
                    total += grid[r - half, c]
                    cnt += 1
                if r + half < n:
                    total += grid[r + half, c]
                    cnt += 1
                if c - half >= 0:
                    total += grid[r, c - half]
                    cnt += 1
                if c + half < n:
                    total += grid[r, c + half]
                    cnt += 1
                grid[r, c] = total / cnt + rng.uniform(-amp, amp)
        step = half
        amp *= roughness

    grid = grid[:size, :size]
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        grid = (grid - lo) / (hi - lo) * relief
    else:
        grid = np.zeros_like(grid)
    return GridTile(grid, np.ones_like(grid, dtype=bool), cell_size, origin)


# ---------------------------------------------------------------------------
# Normalization


def normalize(tile: GridTile) -> tuple[GridTile, NormStats]:
    """Z-score a tile using the mean/std of its valid cells only.

    A near-constant tile (std < 1e-9) gets scale 1 so inversion stays exact.
    """
    vals = tile.values[tile.valid]
    if vals.size == 0:
        raise ValueError("cannot normalize a tile with zero valid cells")
    shift = float(vals.mean())
    std = float(vals.std())
    scale = std if std >= 1e-9 else 1.0
    out = tile.copy()
    out.values[tile.valid] = (vals - shift) / scale
    return out, NormStats(shift, scale)


def denormalize(tile: GridTile, stats: NormStats) -> GridTile:
    out = tile.copy()
    out.values[tile.valid] = tile.values[tile.valid] * stats.scale + stats.shift
    return out
