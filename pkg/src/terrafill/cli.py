"""Command-line frontend for the full pipeline.

Subcommands: synth, tile, mask, train, infer, interp, eval, sweep. Every
command reads optional defaults from a flat ``key = value`` config file
(``#`` starts a comment), lets CLI flags override them, and writes the fully
resolved configuration next to its primary output, so any run can be
reproduced from the file it leaves behind.

Exit codes are a stable contract: 0 success, 2 usage or bad input file,
3 numeric failure during training, 4 empty input (no cells, points, or
tiles), 5 raster geometry mismatch.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

from . import ops
from .baselines import (
    InterpRequest,
    fit_variogram_from_points,
    idw_interpolate,
    nn_interpolate,
    ok_interpolate,
)
from .evaluate import (
    baseline_interpolators,
    evaluate,
    report_csv,
    report_json,
    sparsify,
    sparsity_sweep,
)
from .loss import LossConfig
from .model import (
    CheckpointError,
    ModelConfig,
    ModelParams,
    infer,
    load_params,
)
from .raster import (
    GridFormatError,
    GridGeometryError,
    GridTile,
    load_ascii_grid,
    load_points_csv,
    mosaic,
    rasterize_points,
    save_ascii_grid,
    sparsity,
    synth_terrain,
    tile as tile_dem,
)
from .train import (
    TrainConfig,
    fit,
    load_checkpoint,
    make_dataset,
    mask_ratio_sweep,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_EMPTY = 4
EXIT_GEOMETRY = 5


class EmptyInputError(ValueError):
    """Input raster, point set, or tile directory holds nothing usable."""


# ---------------------------------------------------------------------------
# Flat key=value configuration


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` comments; later keys win."""
    mapping: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        mapping[key] = value
    return mapping


def _floats(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    return tuple(float(p) for p in parts)


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


@dataclass(frozen=True)
class Param:
    name: str
    parse: object
    default: object = None
    required: bool = False
    help: str = ""


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_resolved_config(path, resolved: dict) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in resolved.items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_params(args, params: list[Param]) -> dict:
    """Defaults < config file < CLI flags; unknown config keys are errors."""
    file_map: dict[str, str] = {}
    if getattr(args, "config", None):
        file_map = parse_config_file(args.config)
        known = {p.name for p in params}
        unknown = sorted(set(file_map) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    for p in params:
        raw = getattr(args, p.name, None)
        if raw is None:
            raw = file_map.get(p.name)
        if raw is None:
            if p.required:
                raise ValueError(f"missing required --{p.name.replace('_', '-')}")
            resolved[p.name] = p.default
        else:
            resolved[p.name] = p.parse(str(raw))
    return resolved


# Model/training/loss fields exposed as flat config keys (names are disjoint
# across the three dataclasses, so no prefixes are needed).
_MC, _TC, _LC = ModelConfig(), TrainConfig(), LossConfig()
_MODEL_KEYS = ("tile_side", "enc_depth", "enc_dim", "dec_depth", "dec_dim", "heads", "mlp_ratio")
_TRAIN_KEYS = (
    "mask_ratio",
    "mask_strategy",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "seed",
    "val_fraction",
    "precision",
)
_LOSS_KEYS = ("gamma", "slope_domain", "loss_support")


def _train_config_params() -> list[Param]:
    out = []
    for keys, src in ((_MODEL_KEYS, _MC), (_TRAIN_KEYS, _TC), (_LOSS_KEYS, _LC)):
        for k in keys:
            default = getattr(src, k)
            out.append(Param(k, type(default), default))
    return out


def build_run_config(resolved: dict) -> tuple[ModelConfig, TrainConfig]:
    model = ModelConfig(**{k: resolved[k] for k in _MODEL_KEYS})
    loss = LossConfig(**{k: resolved[k] for k in _LOSS_KEYS})
    train = TrainConfig(**{k: resolved[k] for k in _TRAIN_KEYS}, loss=loss)
    return model, train


# ---------------------------------------------------------------------------
# Shared helpers


def _load_dem(path) -> GridTile:
    return load_ascii_grid(path)


def _load_model(path) -> ModelParams:
    """Accept either a bare parameter container or a training checkpoint."""
    try:
        return load_checkpoint(path).params
    except CheckpointError:
        params, _ = load_params(path)
        return params


def _positions(extent: int, side: int, stride: int) -> list[int]:
    pos = list(range(0, extent - side + 1, stride))
    if pos[-1] != extent - side:
        pos.append(extent - side)  # edge tile so the mosaic covers everything
    return pos


def _crop(dem: GridTile, r0: int, c0: int, side: int) -> GridTile:
    ox = dem.origin[0] + c0 * dem.cell_size
    oy = dem.origin[1] + (dem.height - r0 - side) * dem.cell_size
    return GridTile(
        dem.values[r0 : r0 + side, c0 : c0 + side].copy(),
        dem.valid[r0 : r0 + side, c0 : c0 + side].copy(),
        dem.cell_size,
        (ox, oy),
        dem.nodata,
    )


def infer_raster(
    dem: GridTile,
    params: ModelParams,
    overlap: float = 0.5,
    blend: str = "hann",
    overwrite_visible: bool = True,
) -> GridTile:
    """Tile a sparse raster, fill each tile with the model, mosaic the results.

    Edge tiles are re-aligned to the raster border so every cell is covered.
    Measured cells are restored verbatim after blending when
    overwrite_visible is set.
    """
    side = params.config.tile_side
    if dem.width < side or dem.height < side:
        raise GridGeometryError(
            f"raster {dem.width}x{dem.height} is smaller than the model tile {side}"
        )
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, round(side * (1.0 - overlap)))
    pieces = []
    for r0 in _positions(dem.height, side, stride):
        for c0 in _positions(dem.width, side, stride):
            sub = _crop(dem, r0, c0, side)
            if not sub.valid.any():
                raise EmptyInputError(
                    f"tile at row {r0}, col {c0} has no measurements; "
                    "cannot infer from nothing"
                )
            pieces.append(infer(sub, params, overwrite_visible=overwrite_visible))
    out = mosaic(pieces, blend=blend)
    if overwrite_visible:
        out.values[dem.valid] = dem.values[dem.valid]
    return out


def _load_sparse_input(resolved: dict) -> GridTile:
    """Either --in sparse.asc, or --points xyz.csv with --template geom.asc."""
    if resolved.get("in_path"):
        dem = _load_dem(resolved["in_path"])
    elif resolved.get("points") and resolved.get("template"):
        template = _load_dem(resolved["template"])
        points = load_points_csv(resolved["points"])
        if len(points) == 0:
            raise EmptyInputError(f"{resolved['points']}: no points")
        dem, dropped = rasterize_points(points, template)
        if dropped:
            print(f"dropped {dropped} points outside the template extent")
    else:
        raise ValueError("need either --in, or --points together with --template")
    if not dem.valid.any():
        raise EmptyInputError("input raster has no valid cells")
    return dem


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(resolved: dict) -> int:
    dem = synth_terrain(
        seed=resolved["seed"],
        size=resolved["size"],
        roughness=resolved["roughness"],
        relief=resolved["relief"],
        cell_size=resolved["cell_size"],
        origin=(resolved["origin_x"], resolved["origin_y"]),
    )
    save_ascii_grid(dem, resolved["out"])
    write_resolved_config(resolved["out"] + ".config", resolved)
    print(f"wrote {resolved['size']}x{resolved['size']} terrain to {resolved['out']}")
    return EXIT_OK


def cmd_tile(resolved: dict) -> int:
    dem = _load_dem(resolved["dem"])
    tiles = tile_dem(dem, resolved["tile_size"], resolved["overlap"])
    if not tiles:
        raise EmptyInputError("no full tiles fit the raster")
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(tiles):
        save_ascii_grid(t, out_dir / f"tile_{i:04d}.asc")
    write_resolved_config(out_dir / "resolved.config", resolved)
    print(f"wrote {len(tiles)} tiles to {out_dir}")
    return EXIT_OK


def cmd_mask(resolved: dict) -> int:
    dem = _load_dem(resolved["dem"])
    masked = sparsify(dem, resolved["ratio"], resolved["seed"], resolved["strategy"])
    save_ascii_grid(masked, resolved["out"])
    write_resolved_config(resolved["out"] + ".config", resolved)
    print(f"achieved sparsity {sparsity(masked):.6f}")
    return EXIT_OK


def _load_tiles_dir(data_dir) -> list[GridTile]:
    paths = sorted(Path(data_dir).glob("*.asc"))
    if not paths:
        raise EmptyInputError(f"{data_dir}: no .asc tiles found")
    return [load_ascii_grid(p) for p in paths]


def cmd_train(resolved: dict) -> int:
    model_config, train_config = build_run_config(resolved)
    tiles = _load_tiles_dir(resolved["data_dir"])
    dataset = make_dataset(tiles, train_config.val_fraction, train_config.seed)
    start = None
    extra_epochs = None
    if resolved.get("resume"):
        start = load_checkpoint(resolved["resume"])
        extra_epochs = max(0, train_config.epochs - start.epoch)
    log_rows: list[tuple] = []

    def log(epoch, train_loss, val_loss, val_rmse):
        log_rows.append((epoch, train_loss, val_loss, val_rmse))
        print(
            f"epoch {epoch}: train {train_loss:.6f}  val {val_loss:.6f}  "
            f"val_rmse {val_rmse:.3f}"
        )

    ckpt = fit(dataset, model_config, train_config, start=start, epochs=extra_epochs, log=log)
    out = resolved["out"]
    save_checkpoint(out, ckpt)
    log_path = resolved.get("log") or out + ".log.csv"
    lines = ["epoch,train_loss,val_loss,val_rmse"]
    lines += [f"{e},{repr(tl)},{repr(vl)},{repr(vr)}" for e, tl, vl, vr in log_rows]
    Path(log_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_resolved_config(out + ".config", resolved)
    print(f"saved checkpoint to {out} after epoch {ckpt.epoch}")
    return EXIT_OK


def cmd_infer(resolved: dict) -> int:
    params = _load_model(resolved["checkpoint"])
    dem = _load_sparse_input(resolved)
    print(f"input sparsity {sparsity(dem):.6f}")
    out = infer_raster(
        dem,
        params,
        overlap=resolved["overlap"],
        blend=resolved["blend"],
        overwrite_visible=resolved["overwrite_visible"],
    )
    save_ascii_grid(out, resolved["out"])
    write_resolved_config(resolved["out"] + ".config", resolved)
    print(f"wrote {resolved['out']}")
    return EXIT_OK


def cmd_interp(resolved: dict) -> int:
    dem = _load_sparse_input(resolved)
    req = InterpRequest.from_tile(dem, k=resolved["k"], power=resolved["power"])
    method = resolved["method"]
    if method == "ok":
        vmodel = fit_variogram_from_points(
            req.samples, kind=resolved["variogram"], n_bins=resolved["n_bins"]
        )
        tag = " (degenerate)" if vmodel.degenerate else ""
        print(
            f"variogram {vmodel.kind}: nugget {vmodel.nugget:.6g}, "
            f"sill {vmodel.sill:.6g}, range {vmodel.range_:.6g}{tag}"
        )
        result, failed = ok_interpolate(req, vmodel)
        if failed:
            print(f"warning: {failed} cells unsolvable, marked NODATA")
    elif method == "nn":
        result = nn_interpolate(req, supersample=resolved["supersample"])
    elif method == "idw":
        result = idw_interpolate(req)
    else:
        raise ValueError(f"unknown method {method!r}, expected ok, nn, or idw")
    save_ascii_grid(result, resolved["out"])
    write_resolved_config(resolved["out"] + ".config", resolved)
    print(f"wrote {resolved['out']}")
    return EXIT_OK


def cmd_eval(resolved: dict) -> int:
    pred = _load_dem(resolved["pred"])
    ref = _load_dem(resolved["ref"])
    report = evaluate(pred, ref, thresholds=resolved["thresholds"])
    out = resolved["out"]
    json_path = out if out.endswith(".json") else out + ".json"
    csv_path = json_path[: -len(".json")] + ".csv"
    Path(json_path).write_text(report_json(report), encoding="utf-8")
    Path(csv_path).write_text(report_csv(report), encoding="utf-8")
    write_resolved_config(json_path + ".config", resolved)
    e, s = report.elevation, report.slope
    print(f"elevation: mean {e.mean:.4f}  std {e.std:.4f}  mae {e.mae:.4f}  rmse {e.rmse:.4f}")
    print(f"slope:     mean {s.mean:.4f}  std {s.std:.4f}  mae {s.mae:.4f}  rmse {s.rmse:.4f}")
    for sr in report.streams:
        flag = " (degenerate)" if sr.degenerate else ""
        print(
            f"streams @ {sr.threshold_m2:g} m2: precision {sr.precision:.4f} "
            f"recall {sr.recall:.4f}{flag}"
        )
    return EXIT_OK


def _write_rows_csv(path, header: list[str], rows: list[dict]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[h]) for h in header))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_sweep(resolved: dict) -> int:
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = resolved["kind"]
    if kind == "mask_ratio":
        if not resolved.get("data_dir"):
            raise ValueError("mask_ratio sweep needs --data-dir")
        ratios = resolved["ratios"]
        if not ratios:
            raise ValueError("empty ratio list")
        model_config, train_config = build_run_config(resolved)
        tiles = _load_tiles_dir(resolved["data_dir"])
        dataset = make_dataset(tiles, train_config.val_fraction, train_config.seed)
        trained, table = mask_ratio_sweep(
            dataset, list(ratios), model_config, train_config,
            eval_sparsity=resolved["eval_sparsity"],
        )
        from .model import save_params

        for ratio, params in trained.items():
            save_params(out_dir / f"model_r{ratio:g}.params", params)
        _write_rows_csv(
            out_dir / "mask_ratio_sweep.csv",
            ["ratio", "mean", "std", "mae", "rmse"],
            table,
        )
        best = min(table, key=lambda r: r["rmse"])
        summary = f"best ratio {best['ratio']:g} with rmse {best['rmse']!r}\n"
    elif kind == "sparsity":
        if not resolved.get("dem"):
            raise ValueError("sparsity sweep needs --dem")
        levels = resolved["levels"]
        if not levels:
            raise ValueError("empty level list")
        dem = _load_dem(resolved["dem"])
        methods = {}
        for name in [m.strip() for m in resolved["methods"].split(",") if m.strip()]:
            if name == "model":
                if not resolved.get("checkpoint"):
                    raise ValueError("method 'model' needs --checkpoint")
                params = _load_model(resolved["checkpoint"])
                methods["model"] = lambda t, p=params: infer_raster(t, p)
            elif name in ("ok", "nn", "idw"):
                methods[name] = baseline_interpolators(k=resolved["k"])[name]
            else:
                raise ValueError(f"unknown method {name!r}")
        if not methods:
            raise ValueError("empty method list")
        rows = sparsity_sweep(dem, list(levels), methods, seed=resolved["seed"])
        _write_rows_csv(
            out_dir / "sparsity_sweep.csv",
            ["level", "method", "mean", "std", "mae", "rmse"],
            rows,
        )
        best_by_level = {}
        for r in rows:
            cur = best_by_level.get(r["level"])
            if cur is None or r["rmse"] < cur["rmse"]:
                best_by_level[r["level"]] = r
        summary = "".join(
            f"level {lv:g}: best {r['method']} rmse {r['rmse']!r}\n"
            for lv, r in sorted(best_by_level.items())
        )
    else:
        raise ValueError(f"unknown sweep kind {kind!r}")
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    write_resolved_config(out_dir / "resolved.config", resolved)
    print(summary, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly


_COMMANDS: dict[str, tuple[str, list[Param], object]] = {
    "synth": (
        "generate a synthetic fractal terrain raster",
        [
            Param("seed", int, 0),
            Param("size", int, 65),
            Param("roughness", float, 0.6),
            Param("relief", float, 100.0),
            Param("cell_size", float, 30.0),
            Param("origin_x", float, 0.0),
            Param("origin_y", float, 0.0),
            Param("out", str, required=True),
        ],
        cmd_synth,
    ),
    "tile": (
        "crop a DEM into square training tiles",
        [
            Param("dem", str, required=True),
            Param("tile_size", int, 32),
            Param("overlap", float, 0.0),
            Param("out_dir", str, required=True),
        ],
        cmd_tile,
    ),
    "mask": (
        "knock out cells to simulate sparse measurements",
        [
            Param("dem", str, required=True),
            Param("ratio", float, 0.5),
            Param("seed", int, 0),
            Param("strategy", str, "random"),
            Param("out", str, required=True),
        ],
        cmd_mask,
    ),
    "train": (
        "train the masked-autoencoder interpolator on a tile directory",
        [
            Param("data_dir", str, required=True),
            Param("out", str, required=True),
            Param("resume", str),
            Param("log", str),
            *_train_config_params(),
        ],
        cmd_train,
    ),
    "infer": (
        "fill a sparse raster with a trained model",
        [
            Param("checkpoint", str, required=True),
            Param("in_path", str, help="sparse .asc raster"),
            Param("points", str, help="x,y,z CSV (needs --template)"),
            Param("template", str, help=".asc supplying the target geometry"),
            Param("out", str, required=True),
            Param("overlap", float, 0.5),
            Param("blend", str, "hann"),
            Param("overwrite_visible", _bool, True),
        ],
        cmd_infer,
    ),
    "interp": (
        "fill a sparse raster with a classical interpolator",
        [
            Param("method", str, required=True, help="ok, nn, or idw"),
            Param("in_path", str),
            Param("points", str),
            Param("template", str),
            Param("out", str, required=True),
            Param("k", int, 32),
            Param("power", float, 2.0),
            Param("supersample", int, 4),
            Param("variogram", str, "exponential"),
            Param("n_bins", int, 15),
        ],
        cmd_interp,
    ),
    "eval": (
        "score a predicted raster against a reference",
        [
            Param("pred", str, required=True),
            Param("ref", str, required=True),
            Param("thresholds", _floats, (20000.0, 100000.0, 2000000.0)),
            Param("out", str, required=True),
        ],
        cmd_eval,
    ),
    "sweep": (
        "run a mask-ratio or sparsity experiment sweep",
        [
            Param("kind", str, required=True, help="mask_ratio or sparsity"),
            Param("out_dir", str, required=True),
            Param("data_dir", str),
            Param("ratios", _floats, (0.5, 0.6, 0.7, 0.75, 0.9, 0.95, 0.98)),
            Param("eval_sparsity", float, 0.9),
            Param("dem", str),
            Param("levels", _floats, (0.3, 0.5, 0.7, 0.9, 0.95)),
            Param("methods", str, "ok,nn,idw"),
            Param("checkpoint", str),
            Param("k", int, 32),
            *_train_config_params(),
        ],
        cmd_sweep,
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terrafill",
        description="Transformer and classical interpolation of sparse elevation grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (desc, params, run) in _COMMANDS.items():
        sp = sub.add_parser(name, help=desc, description=desc)
        sp.add_argument("--config", default=None, help="flat key = value defaults file")
        seen = set()
        for p in params:
            if p.name in seen:
                continue
            seen.add(p.name)
            flag = "--" + p.name.replace("_", "-")
            if p.name == "in_path":
                flag = "--in"
            sp.add_argument(flag, dest=p.name, default=None, help=p.help or None)
        sp.set_defaults(_params=params, _run=run)
    return parser


def main(argv=None) -> int:
    try:
        ops.set_threads(ops.threads_from_env())
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        resolved = resolve_params(args, args._params)
        return args._run(resolved)
    except ops.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except GridGeometryError as e:
        print(f"geometry mismatch: {e}", file=sys.stderr)
        return EXIT_GEOMETRY
    except EmptyInputError as e:
        print(f"empty input: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except (GridFormatError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
