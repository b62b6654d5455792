"""Self-supervised training: per-epoch random masking of fully valid tiles.

Every epoch draws a fresh mask plan for every training tile (seeds pulled
from one master RNG stream whose state is checkpointed), reconstructs the
tile, and minimizes the combined elevation/slope loss with Adam. Validation
uses plans frozen at construction time so epoch metrics stay comparable.

Determinism contract: for a fixed (seed, config, dataset order) the whole
trajectory, including checkpoint/resume, is bit-reproducible in double
precision. Batch gradients are averaged over tiles in fixed order; NaN loss
aborts immediately with the offending tile recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import ops
from .loss import LossConfig, total_loss
from .model import (
    MaskPlan,
    ModelConfig,
    ModelParams,
    forward_normalized,
    init_params,
    load_params,
    make_mask,
    read_container,
    write_container,
)
from .raster import GridTile

_PRECISIONS = {"single": torch.float32, "double": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    mask_ratio: float = 0.75
    mask_strategy: str = "random"
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    val_fraction: float = 0.11
    precision: str = "single"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.mask_strategy not in ("random", "uniform"):
            raise ValueError(f"unknown mask_strategy {self.mask_strategy!r}")
        if self.precision not in _PRECISIONS:
            raise ValueError(f"precision must be single or double, got {self.precision!r}")
        # epochs 0 is allowed: it yields a checkpoint of initialized params.
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def dtype(self) -> torch.dtype:
        return _PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return {
            "mask_ratio": self.mask_ratio,
            "mask_strategy": self.mask_strategy,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "precision": self.precision,
            "loss": self.loss.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class Dataset:
    train: list[GridTile]
    val: list[GridTile]


def make_dataset(tiles: list[GridTile], val_fraction: float = 0.11, seed: int = 0) -> Dataset:
    """Seeded shuffle, then split; both partitions are kept nonempty.

    Training needs ground truth everywhere, so tiles with any invalid cell
    are rejected.
    """
    if len(tiles) < 2:
        raise ValueError(f"need at least 2 tiles, got {len(tiles)}")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    for i, t in enumerate(tiles):
        if not t.valid.all():
            raise ValueError(f"tile {i} has invalid cells; training tiles must be complete")
    order = np.random.default_rng(seed).permutation(len(tiles))
    n_val = int(math.floor(val_fraction * len(tiles) + 0.5))
    n_val = min(max(n_val, 1), len(tiles) - 1)
    shuffled = [tiles[i] for i in order]
    return Dataset(train=shuffled[n_val:], val=shuffled[:n_val])


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.named()},
            v={k: torch.zeros_like(p) for k, p in params.named()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, torch.Tensor],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place; decoupled weight decay."""
    state.t += 1
    b1, b2, t = cfg.beta1, cfg.beta2, state.t
    with torch.no_grad():
        for name, p in params.named():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p -= cfg.learning_rate * m_hat / (torch.sqrt(v_hat) + cfg.adam_eps)
            if cfg.weight_decay:
                p -= cfg.learning_rate * cfg.weight_decay * p
    return params, state


# ---------------------------------------------------------------------------
# Epoch loop


def _tile_loss(tile: GridTile, plan: MaskPlan, params: ModelParams, cfg: TrainConfig):
    pred, target, _ = forward_normalized(tile, plan, params)
    side = params.config.tile_side
    return total_loss(
        pred.reshape(side, side),
        target.reshape(side, side),
        tile.cell_size,
        cfg.loss,
        plan=plan,
    )


def train_epoch(
    train_tiles: list[GridTile],
    params: ModelParams,
    opt: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One pass over the training tiles; returns the mean tile loss.

    Fresh mask plans are drawn from ``rng`` for every tile. Gradients are
    averaged over each batch (fixed tile order), then applied with Adam.
    """
    if not train_tiles:
        raise ValueError("empty training split")
    n_tokens = params.config.n_tokens
    losses: list[float] = []
    step = 0
    for start in range(0, len(train_tiles), cfg.batch_size):
        batch = train_tiles[start : start + cfg.batch_size]
        ops.zero_grad(params.parameters())
        for offset, tile in enumerate(batch):
            seed = int(rng.integers(0, 2**63))
            plan = make_mask(n_tokens, cfg.mask_ratio, seed, cfg.mask_strategy)
            lv = _tile_loss(tile, plan, params, cfg)
            raw = float(lv.total.detach())
            if not math.isfinite(raw):
                raise ops.NumericError(
                    f"non-finite loss at step {step}, tile index {start + offset}"
                )
            losses.append(raw)
            ops.backward(lv.total / len(batch))
        grads = {
            name: p.grad if p.grad is not None else torch.zeros_like(p)
            for name, p in params.named()
        }
        adam_step(params, grads, opt, cfg)
        ops.zero_grad(params.parameters())
        step += 1
    return float(np.mean(losses))


def validation_plans(n_tiles: int, n_tokens: int, cfg: TrainConfig) -> list[MaskPlan]:
    """Frozen per-tile plans, a pure function of (cfg.seed, tile index)."""
    seeds = np.random.default_rng([cfg.seed, 0x5EED]).integers(0, 2**63, size=n_tiles)
    return [
        make_mask(n_tokens, cfg.mask_ratio, int(s), cfg.mask_strategy) for s in seeds
    ]


def validate(
    val_tiles: list[GridTile], params: ModelParams, cfg: TrainConfig
) -> tuple[float, float]:
    """(mean loss, RMSE in meters) on frozen validation plans; params untouched."""
    if not val_tiles:
        raise ValueError("empty validation split")
    plans = validation_plans(len(val_tiles), params.config.n_tokens, cfg)
    losses = []
    sq_sum, n_cells = 0.0, 0
    with torch.no_grad():
        for tile, plan in zip(val_tiles, plans):
            pred, target, stats = forward_normalized(tile, plan, params)
            side = params.config.tile_side
            lv = total_loss(
                pred.reshape(side, side),
                target.reshape(side, side),
                tile.cell_size,
                cfg.loss,
                plan=plan,
            )
            losses.append(float(lv.total))
            err_m = (ops.to_numpy(pred).astype(np.float64) - ops.to_numpy(target)) * stats.scale
            sq_sum += float((err_m**2).sum())
            n_cells += err_m.size
    return float(np.mean(losses)), math.sqrt(sq_sum / n_cells)


# ---------------------------------------------------------------------------
# Checkpointing


@dataclass
class Checkpoint:
    params: ModelParams
    opt: AdamState
    train_config: TrainConfig
    epoch: int
    rng_state: dict
    train_history: list[float]
    val_history: list[float]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blocks: dict[str, np.ndarray] = {}
    for name, p in ckpt.params.named():
        blocks[name] = ops.to_numpy(p).astype(np.float64)
    for name in ckpt.opt.m:
        blocks[f"adam.m.{name}"] = ops.to_numpy(ckpt.opt.m[name]).astype(np.float64)
        blocks[f"adam.v.{name}"] = ops.to_numpy(ckpt.opt.v[name]).astype(np.float64)
    meta = {
        "kind": "train_checkpoint",
        "dtype": str(ckpt.params.dtype).removeprefix("torch."),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_t": ckpt.opt.t,
        "rng_state": _rng_state_to_json(ckpt.rng_state),
        "train_history": ckpt.train_history,
        "val_history": ckpt.val_history,
    }
    write_container(path, ckpt.params.config, meta, blocks)


def load_checkpoint(path) -> Checkpoint:
    config, meta, blocks = read_container(path)
    if meta.get("kind") != "train_checkpoint":
        raise ValueError(f"{path}: not a training checkpoint")
    dtype = _PRECISIONS["double" if meta["dtype"] == "float64" else "single"]
    param_blocks = {k: v for k, v in blocks.items() if not k.startswith("adam.")}
    params = _params_from_blocks(config, param_blocks, dtype, path)
    m, v = {}, {}
    for name, _ in params.named():
        try:
            m[name] = torch.from_numpy(blocks[f"adam.m.{name}"]).to(dtype)
            v[name] = torch.from_numpy(blocks[f"adam.v.{name}"]).to(dtype)
        except KeyError as e:
            raise ValueError(f"{path}: missing optimizer block {e}") from None
    opt = AdamState(m=m, v=v, t=int(meta["adam_t"]))
    return Checkpoint(
        params=params,
        opt=opt,
        train_config=TrainConfig.from_dict(meta["train_config"]),
        epoch=int(meta["epoch"]),
        rng_state=_rng_state_from_json(meta["rng_state"]),
        train_history=[float(x) for x in meta["train_history"]],
        val_history=[float(x) for x in meta["val_history"]],
    )


def _params_from_blocks(config, param_blocks, dtype, path) -> ModelParams:
    from .model import _shape_table, pos_embed_2d

    tensors = {}
    for _, name, shape in _shape_table(config):
        if name not in param_blocks:
            raise ValueError(f"{path}: missing parameter block {name!r}")
        arr = param_blocks[name]
        if arr.shape != shape:
            raise ValueError(
                f"{path}: block {name!r} has shape {arr.shape}, config implies {shape}"
            )
        tensors[name] = torch.from_numpy(arr).to(dtype).requires_grad_(True)
    buffers = {
        "enc.pos": pos_embed_2d(config.tile_side, config.enc_dim).to(dtype),
        "dec.pos": pos_embed_2d(config.tile_side, config.dec_dim).to(dtype),
    }
    return ModelParams(config, tensors, buffers)


def _rng_state_to_json(state: dict) -> dict:
    # PCG64 state holds 128-bit integers; stringify for JSON.
    inner = state["state"]
    return {
        "bit_generator": state["bit_generator"],
        "state": str(inner["state"]),
        "inc": str(inner["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _rng_state_from_json(d: dict) -> dict:
    return {
        "bit_generator": d["bit_generator"],
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }


# ---------------------------------------------------------------------------
# Orchestration


def fit(
    dataset: Dataset,
    model_config: ModelConfig,
    cfg: TrainConfig,
    start: Checkpoint | None = None,
    epochs: int | None = None,
    log=None,
) -> Checkpoint:
    """Train for cfg.epochs (or ``epochs``) epochs, resuming from ``start``."""
    if start is None:
        params = init_params(model_config, seed=cfg.seed, dtype=cfg.dtype)
        opt = AdamState.zeros_like(params)
        rng = np.random.default_rng(cfg.seed)
        ckpt = Checkpoint(
            params=params,
            opt=opt,
            train_config=cfg,
            epoch=0,
            rng_state=rng.bit_generator.state,
            train_history=[],
            val_history=[],
        )
    else:
        ckpt = start
        rng = np.random.default_rng(0)
        rng.bit_generator.state = ckpt.rng_state
    n_epochs = cfg.epochs if epochs is None else epochs
    for _ in range(n_epochs):
        train_loss = train_epoch(dataset.train, ckpt.params, ckpt.opt, cfg, rng)
        val_loss, val_rmse = validate(dataset.val, ckpt.params, cfg)
        ckpt.epoch += 1
        ckpt.train_history.append(train_loss)
        ckpt.val_history.append(val_loss)
        ckpt.rng_state = rng.bit_generator.state
        if log is not None:
            log(ckpt.epoch, train_loss, val_loss, val_rmse)
    return ckpt


def mask_ratio_sweep(
    dataset: Dataset,
    ratios: list[float],
    model_config: ModelConfig,
    cfg: TrainConfig,
    eval_sparsity: float = 0.9,
) -> tuple[dict[float, ModelParams], list[dict]]:
    """Train one model per mask ratio (identical seeds otherwise) and score
    each on the same fixed sparse-prediction task over the validation split.

    Rows report statistics of the elevation error at the interpolated
    (masked) cells: mean, std, mae, rmse, keyed by ratio.
    """
    from .model import forward

    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"ratio {r} outside [0, 1]")
    eval_seeds = np.random.default_rng([cfg.seed, 0xE7A1]).integers(
        0, 2**63, size=len(dataset.val)
    )
    trained: dict[float, ModelParams] = {}
    table: list[dict] = []
    for ratio in ratios:
        run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "mask_ratio": ratio})
        ckpt = fit(dataset, model_config, run_cfg)
        trained[ratio] = ckpt.params
        errors: list[np.ndarray] = []
        n_tokens = model_config.n_tokens
        with torch.no_grad():
            for tile, seed in zip(dataset.val, eval_seeds):
                plan = make_mask(n_tokens, eval_sparsity, int(seed))
                recon = forward(tile, plan, ckpt.params)
                diff = (recon.values - tile.values).ravel()[plan.masked]
                errors.append(diff)
        delta = np.concatenate(errors)
        table.append(
            {
                "ratio": ratio,
                "mean": float(delta.mean()),
                "std": float(delta.std()),
                "mae": float(np.abs(delta).mean()),
                "rmse": float(np.sqrt((delta**2).mean())),
            }
        )
    return trained, table
