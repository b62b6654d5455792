"""terrafill: sparse-to-dense elevation grid interpolation.

A masked grid transformer reconstructs dense elevation rasters from sparse
measurements, alongside classical baselines (ordinary kriging, natural
neighbor, inverse distance weighting) and terrain-aware evaluation
(elevation error statistics plus stream network agreement).
"""

__version__ = "0.1.0"

from .evaluate import DiffStats, EvalReport, StreamResult, diff_stats, evaluate
from .loss import LossConfig
from .model import ModelConfig, infer, init_params, load_params, save_params
from .raster import (
    GridFormatError,
    GridGeometryError,
    GridTile,
    NormStats,
    SparsePoints,
    denormalize,
    downsample_mean,
    load_ascii_grid,
    load_points_csv,
    mosaic,
    normalize,
    rasterize_points,
    save_ascii_grid,
    save_points_csv,
    sparsity,
    synth_terrain,
    tile,
)
from .train import TrainConfig, fit, load_checkpoint, make_dataset, save_checkpoint

__all__ = [
    "DiffStats",
    "EvalReport",
    "LossConfig",
    "ModelConfig",
    "StreamResult",
    "TrainConfig",
    "diff_stats",
    "evaluate",
    "fit",
    "infer",
    "init_params",
    "load_checkpoint",
    "load_params",
    "make_dataset",
    "save_checkpoint",
    "save_params",
    "GridFormatError",
    "GridGeometryError",
    "GridTile",
    "NormStats",
    "SparsePoints",
    "denormalize",
    "downsample_mean",
    "load_ascii_grid",
    "load_points_csv",
    "mosaic",
    "normalize",
    "rasterize_points",
    "save_ascii_grid",
    "save_points_csv",
    "sparsity",
    "synth_terrain",
    "tile",
    "__version__",
]
