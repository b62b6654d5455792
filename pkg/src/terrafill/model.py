"""Masked grid transformer for elevation interpolation.

A tile of side S is flattened row-major into N = S^2 tokens. Each token is a
single normalized elevation pushed through a 1-to-enc_dim linear map (grid
embedding) plus a fixed 2D sin-cos positional embedding. A mask plan splits
tokens into visible and masked sets; the encoder (pre-norm transformer
blocks) runs on visible tokens only. The decoder projects the latent to its
own width, re-inserts a learnable mask token at masked positions, adds its
own positional table to all N positions, runs its blocks, and a 1-unit head
emits a normalized elevation per grid cell.

Elevations are z-scored per tile over the VISIBLE cells before entering the
network and the prediction is mapped back with the same statistics, so the
model is shift-invariant and scale-equivariant by construction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import ops
from .raster import GridTile, NormStats


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-scale network."""

    tile_side: int = 32
    enc_depth: int = 12
    enc_dim: int = 768
    dec_depth: int = 12
    dec_dim: int = 768
    heads: int = 12
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.tile_side < 2:
            raise ValueError(f"tile_side must be >= 2, got {self.tile_side}")
        if min(self.enc_depth, self.dec_depth) < 1:
            raise ValueError("depths must be >= 1")
        for name in ("enc_dim", "dec_dim"):
            dim = getattr(self, name)
            if dim % self.heads:
                raise ValueError(f"{name}={dim} not divisible by heads={self.heads}")
            if dim % 4:
                raise ValueError(f"{name}={dim} not divisible by 4 (2D sin-cos layout)")
        if self.mlp_ratio < 1:
            raise ValueError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")

    @property
    def n_tokens(self) -> int:
        return self.tile_side * self.tile_side

    @classmethod
    def toy(cls, tile_side: int = 8) -> "ModelConfig":
        """Smallest config that still exercises every code path."""
        return cls(
            tile_side=tile_side, enc_depth=2, enc_dim=32, dec_depth=2, dec_dim=32, heads=2
        )

    @classmethod
    def toy_base(cls, tile_side: int = 32) -> "ModelConfig":
        """Desk-scale config for training experiments on one CPU."""
        return cls(
            tile_side=tile_side, enc_depth=4, enc_dim=64, dec_depth=4, dec_dim=64, heads=4
        )

    def to_dict(self) -> dict:
        return {
            "tile_side": self.tile_side,
            "enc_depth": self.enc_depth,
            "enc_dim": self.enc_dim,
            "dec_depth": self.dec_depth,
            "dec_dim": self.dec_dim,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Mask plans


@dataclass(frozen=True)
class MaskPlan:
    """Which flattened token indices are hidden from the encoder.

    ``masked`` is a sorted array of distinct indices in [0, n_tokens).
    Plans built by :func:`make_mask` are pure functions of
    (n_tokens, ratio, seed, strategy).
    """

    n_tokens: int
    masked: np.ndarray
    ratio: float
    seed: int | None = None
    strategy: str = "random"

    def __post_init__(self) -> None:
        masked = np.unique(np.asarray(self.masked, dtype=np.int64))
        if masked.size != np.asarray(self.masked).size:
            raise ValueError("masked indices must be distinct")
        if masked.size and (masked[0] < 0 or masked[-1] >= self.n_tokens):
            raise ValueError("masked index out of range")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")
        object.__setattr__(self, "masked", masked)

    @property
    def n_masked(self) -> int:
        return int(self.masked.size)

    @property
    def n_visible(self) -> int:
        return self.n_tokens - self.n_masked

    @property
    def visible(self) -> np.ndarray:
        """Complement of masked, ascending."""
        keep = np.ones(self.n_tokens, dtype=bool)
        keep[self.masked] = False
        return np.nonzero(keep)[0]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_mask(
    n_tokens: int, ratio: float, seed: int, strategy: str = "random"
) -> MaskPlan:
    """Draw a mask plan.

    random: seeded Fisher-Yates shuffle of all indices, first round(ratio*N)
    become masked. uniform: a regular 2D lattice of stride k keeps
    ceil((1-ratio)*N) cells visible (k is the largest stride whose lattice is
    big enough; surplus lattice points are trimmed in row-major order) and
    everything else is masked.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")

    if strategy == "random":
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n_tokens)
        n_masked = _round_half_up(ratio * n_tokens)
        masked = np.sort(perm[:n_masked])
    elif strategy == "uniform":
        side = math.isqrt(n_tokens)
        if side * side != n_tokens:
            raise ValueError(f"uniform strategy needs a square token count, got {n_tokens}")
        n_vis = math.ceil((1.0 - ratio) * n_tokens)
        keep = np.zeros(n_tokens, dtype=bool)
        if n_vis > 0:
            stride = next(
                k for k in range(side, 0, -1) if math.ceil(side / k) ** 2 >= n_vis
            )
            lattice = [
                r * side + c
                for r in range(0, side, stride)
                for c in range(0, side, stride)
            ]
            keep[lattice[:n_vis]] = True
        masked = np.nonzero(~keep)[0]
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return MaskPlan(n_tokens, masked, ratio, seed, strategy)


def mask_from_tile(tile: GridTile) -> MaskPlan:
    """Plan whose masked set is exactly the tile's invalid cells (row-major)."""
    flat_valid = tile.valid.ravel()
    if not flat_valid.any():
        raise ValueError("tile has zero valid cells")
    masked = np.nonzero(~flat_valid)[0]
    n = flat_valid.size
    return MaskPlan(n, masked, masked.size / n, seed=None, strategy="from_tile")


# ---------------------------------------------------------------------------
# Positional embedding


def pos_embed_2d(tile_side: int, dim: int) -> torch.Tensor:
    """Fixed 2D separable sin-cos table, [tile_side^2, dim], float64.

    The first dim/2 features encode the grid row, the second dim/2 the
    column; each half is [sin(p*w_0..), cos(p*w_0..)] over the standard
    geometric frequency ladder, so position (0, 0) maps to sins 0, cosines 1.
    """
    if dim % 4:
        raise ValueError(f"dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    rows, cols = np.meshgrid(
        np.arange(tile_side, dtype=np.float64),
        np.arange(tile_side, dtype=np.float64),
        indexing="ij",
    )
    parts = []
    for pos in (rows.ravel(), cols.ravel()):
        angles = np.outer(pos, omega)
        parts.append(np.sin(angles))
        parts.append(np.cos(angles))
    return torch.from_numpy(np.concatenate(parts, axis=1))


# ---------------------------------------------------------------------------
# Parameters


class ModelParams:
    """Named learnable tensors plus the fixed positional tables.

    ``tensors`` maps name -> leaf tensor (requires_grad). ``buffers`` holds
    the non-learned positional tables, recomputed from config on load.
    Iteration order is the fixed construction order, which optimizer state
    and serialization both rely on.
    """

    def __init__(
        self,
        config: ModelConfig,
        tensors: dict[str, torch.Tensor],
        buffers: dict[str, torch.Tensor],
    ):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def parameters(self):
        return self.tensors.values()

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def to(self, dtype: torch.dtype) -> "ModelParams":
        tensors = {
            k: v.detach().to(dtype).requires_grad_(True) for k, v in self.tensors.items()
        }
        buffers = {k: v.to(dtype) for k, v in self.buffers.items()}
        return ModelParams(self.config, tensors, buffers)

    def clone(self) -> "ModelParams":
        return self.to(self.dtype)


def _block_names(prefix: str, depth: int) -> list[tuple[str, str]]:
    """(kind, name) pairs for one transformer stack, in construction order."""
    out = []
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        out += [
            ("ln_gamma", f"{b}.ln1.gamma"),
            ("ln_beta", f"{b}.ln1.beta"),
            ("weight", f"{b}.attn.qkv.weight"),
            ("bias", f"{b}.attn.qkv.bias"),
            ("weight", f"{b}.attn.out.weight"),
            ("bias", f"{b}.attn.out.bias"),
            ("ln_gamma", f"{b}.ln2.gamma"),
            ("ln_beta", f"{b}.ln2.beta"),
            ("weight", f"{b}.mlp.fc1.weight"),
            ("bias", f"{b}.mlp.fc1.bias"),
            ("weight", f"{b}.mlp.fc2.weight"),
            ("bias", f"{b}.mlp.fc2.bias"),
        ]
    return out


def _shape_table(config: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """(kind, name, shape) for every learnable, in fixed order."""
    de, dd, m = config.enc_dim, config.dec_dim, config.mlp_ratio
    table: list[tuple[str, str, tuple[int, ...]]] = [
        ("weight", "embed.weight", (1, de)),
        ("bias", "embed.bias", (de,)),
    ]
    for kind, name in _block_names("enc", config.enc_depth):
        table.append((kind, name, _param_shape(kind, name, de, m)))
    table += [("ln_gamma", "enc.norm.gamma", (de,)), ("ln_beta", "enc.norm.beta", (de,))]
    table += [
        ("weight", "proj.weight", (de, dd)),
        ("bias", "proj.bias", (dd,)),
        ("token", "mask_token", (dd,)),
    ]
    for kind, name in _block_names("dec", config.dec_depth):
        table.append((kind, name, _param_shape(kind, name, dd, m)))
    table += [("ln_gamma", "dec.norm.gamma", (dd,)), ("ln_beta", "dec.norm.beta", (dd,))]
    table += [("weight", "head.weight", (dd, 1)), ("bias", "head.bias", (1,))]
    return table


def _param_shape(kind: str, name: str, d: int, mlp_ratio: int) -> tuple[int, ...]:
    if kind in ("ln_gamma", "ln_beta"):
        return (d,)
    if name.endswith("qkv.weight"):
        return (d, 3 * d)
    if name.endswith("qkv.bias"):
        return (3 * d,)
    if name.endswith("out.weight"):
        return (d, d)
    if name.endswith("out.bias"):
        return (d,)
    if name.endswith("fc1.weight"):
        return (d, mlp_ratio * d)
    if name.endswith("fc1.bias"):
        return (mlp_ratio * d,)
    if name.endswith("fc2.weight"):
        return (mlp_ratio * d, d)
    if name.endswith("fc2.bias"):
        return (d,)
    raise AssertionError(name)


def init_params(
    config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> ModelParams:
    """Deterministic initialization: truncated normal (std 0.02) for linear
    weights and the mask token, zeros for biases and LN beta, ones for LN gamma.
    """
    g = ops.seeded_generator(seed)
    tensors: dict[str, torch.Tensor] = {}
    for kind, name, shape in _shape_table(config):
        if kind in ("weight", "token"):
            t = torch.empty(shape, dtype=dtype)
            torch.nn.init.trunc_normal_(t, std=0.02, generator=g)
        elif kind == "ln_gamma":
            t = torch.ones(shape, dtype=dtype)
        else:  # bias, ln_beta
            t = torch.zeros(shape, dtype=dtype)
        tensors[name] = t.requires_grad_(True)
    buffers = {
        "enc.pos": pos_embed_2d(config.tile_side, config.enc_dim).to(dtype),
        "dec.pos": pos_embed_2d(config.tile_side, config.dec_dim).to(dtype),
    }
    return ModelParams(config, tensors, buffers)


# ---------------------------------------------------------------------------
# Network forward pieces


def grid_embed(values, params: ModelParams) -> torch.Tensor:
    """Per-grid linear embedding: token i = value_i * w + b, shape [N, enc_dim]."""
    cfg = params.config
    v = torch.as_tensor(np.asarray(values), dtype=params.dtype).reshape(-1, 1)
    if v.shape[0] != cfg.n_tokens:
        raise ValueError(f"expected {cfg.n_tokens} values, got {v.shape[0]}")
    return ops.matmul(v, params["embed.weight"]) + params["embed.bias"]


def _attention_layer(x: torch.Tensor, params: ModelParams, block: str) -> torch.Tensor:
    n, d = x.shape
    heads = params.config.heads
    qkv = ops.matmul(x, params[f"{block}.attn.qkv.weight"]) + params[f"{block}.attn.qkv.bias"]
    qkv = qkv.reshape(n, 3, heads, d // heads).permute(1, 2, 0, 3)
    out = ops.attention(qkv[0], qkv[1], qkv[2])
    out = out.permute(1, 0, 2).reshape(n, d)
    return ops.matmul(out, params[f"{block}.attn.out.weight"]) + params[f"{block}.attn.out.bias"]


def _mlp_layer(x: torch.Tensor, params: ModelParams, block: str) -> torch.Tensor:
    h = ops.gelu(ops.matmul(x, params[f"{block}.mlp.fc1.weight"]) + params[f"{block}.mlp.fc1.bias"])
    return ops.matmul(h, params[f"{block}.mlp.fc2.weight"]) + params[f"{block}.mlp.fc2.bias"]


def _run_blocks(x: torch.Tensor, params: ModelParams, prefix: str, depth: int) -> torch.Tensor:
    """Pre-norm stack: x += attn(LN(x)); x += mlp(LN(x)); final LN at the end."""
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        x = x + _attention_layer(
            ops.layer_norm(x, params[f"{b}.ln1.gamma"], params[f"{b}.ln1.beta"]), params, b
        )
        x = x + _mlp_layer(
            ops.layer_norm(x, params[f"{b}.ln2.gamma"], params[f"{b}.ln2.beta"]), params, b
        )
    return ops.layer_norm(x, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])


def run_encoder(visible_tokens: torch.Tensor, params: ModelParams) -> torch.Tensor:
    """Encoder stack on an already-gathered token sequence [n, enc_dim]."""
    return _run_blocks(visible_tokens, params, "enc", params.config.enc_depth)


def encode(tokens: torch.Tensor, plan: MaskPlan, params: ModelParams) -> torch.Tensor:
    """Run the encoder on visible tokens only; [N, enc_dim] -> [N_vis, enc_dim].

    tokens must already include the positional embedding.
    """
    if tokens.shape[0] != plan.n_tokens:
        raise ValueError(f"{tokens.shape[0]} tokens vs plan over {plan.n_tokens}")
    if plan.n_visible == 0:
        raise ValueError("mask plan leaves zero visible tokens")
    return run_encoder(ops.gather_rows(tokens, plan.visible), params)


def decode(latent: torch.Tensor, plan: MaskPlan, params: ModelParams) -> torch.Tensor:
    """Decoder over all N positions; returns [N] normalized elevations.

    The latent is projected to dec_dim, the learnable mask token fills masked
    positions, and the decoder positional table is added to every position.
    """
    if latent.shape[0] != plan.n_visible:
        raise ValueError(f"latent has {latent.shape[0]} rows, plan expects {plan.n_visible}")
    z = ops.matmul(latent, params["proj.weight"]) + params["proj.bias"]
    full = ops.scatter_rows(z, plan.visible, plan.n_tokens, params["mask_token"])
    full = full + params.buffers["dec.pos"].to(z.dtype)
    full = _run_blocks(full, params, "dec", params.config.dec_depth)
    out = ops.matmul(full, params["head.weight"]) + params["head.bias"]
    return out[:, 0]


def _visible_stats(flat_values: np.ndarray, visible: np.ndarray) -> NormStats:
    vis = flat_values[visible]
    shift = float(vis.mean())
    std = float(vis.std())
    return NormStats(shift, std if std >= 1e-9 else 1.0)


def forward_normalized(
    tile: GridTile, plan: MaskPlan, params: ModelParams
) -> tuple[torch.Tensor, torch.Tensor, NormStats]:
    """Differentiable core of the forward pass.

    Returns (prediction [N], input values [N], stats), both in normalized
    space; the prediction carries gradient history. Raises if the plan leaves
    any invalid cell visible: the encoder must never read unmeasured values.
    """
    cfg = params.config
    if tile.shape != (cfg.tile_side, cfg.tile_side):
        raise ValueError(f"tile shape {tile.shape} != config side {cfg.tile_side}")
    visible = plan.visible
    if visible.size == 0:
        raise ValueError("mask plan leaves zero visible tokens")
    if not tile.valid.ravel()[visible].all():
        raise ValueError("plan leaves invalid cells visible")
    flat = tile.values.ravel()
    stats = _visible_stats(flat, visible)
    norm = (flat - stats.shift) / stats.scale
    tokens = grid_embed(norm, params) + params.buffers["enc.pos"].to(params.dtype)
    latent = encode(tokens, plan, params)
    pred = decode(latent, plan, params)
    target = torch.as_tensor(norm, dtype=params.dtype)
    return pred, target, stats


def forward(tile: GridTile, plan: MaskPlan, params: ModelParams) -> GridTile:
    """Reconstruct a full tile: normalize, encode visible, decode all, denormalize."""
    pred, _, stats = forward_normalized(tile, plan, params)
    side = params.config.tile_side
    values = ops.to_numpy(pred).astype(np.float64) * stats.scale + stats.shift
    return GridTile(
        values.reshape(side, side),
        np.ones((side, side), dtype=bool),
        tile.cell_size,
        tile.origin,
        tile.nodata,
    )


def infer(
    sparse_tile: GridTile, params: ModelParams, overwrite_visible: bool = True
) -> GridTile:
    """Fill a sparse tile; measured cells keep their measured values by default."""
    plan = mask_from_tile(sparse_tile)
    with torch.no_grad():
        recon = forward(sparse_tile, plan, params)
    if overwrite_visible:
        recon.values[sparse_tile.valid] = sparse_tile.values[sparse_tile.valid]
    return recon


# ---------------------------------------------------------------------------
# Serialization: self-describing block container, also used by checkpoints

MAGIC = b"TERRAFIL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or incompatible container file."""


def write_container(path, config: ModelConfig, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    """Write magic, version, JSON header, then little-endian float64 blocks.

    The header is serialized with sorted keys and fixed separators so that
    identical state produces byte-identical files.
    """
    entries = [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()]
    header = {"config": config.to_dict(), "meta": meta, "blocks": entries}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for v in blocks.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_container(path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if off + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    blocks: dict[str, np.ndarray] = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated block {entry['name']!r}")
        blocks[entry["name"]] = (
            np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        )
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return ModelConfig.from_dict(header["config"]), header["meta"], blocks


_DTYPE_NAMES = {"float32": torch.float32, "float64": torch.float64}


def save_params(path, params: ModelParams, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["dtype"] = str(params.dtype).removeprefix("torch.")
    blocks = {k: ops.to_numpy(v).astype(np.float64) for k, v in params.named()}
    write_container(path, params.config, meta, blocks)


def load_params(path) -> tuple[ModelParams, dict]:
    config, meta, blocks = read_container(path)
    dtype = _DTYPE_NAMES.get(meta.get("dtype", "float32"))
    if dtype is None:
        raise CheckpointError(f"{path}: unknown dtype {meta.get('dtype')!r}")
    expected = {name: shape for _, name, shape in _shape_table(config)}
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in expected.items():
        if name not in blocks:
            raise CheckpointError(f"{path}: missing parameter block {name!r}")
        arr = blocks[name]
        if arr.shape != shape:
            raise CheckpointError(
                f"{path}: block {name!r} has shape {arr.shape}, config implies {shape}"
            )
        tensors[name] = torch.from_numpy(arr).to(dtype).requires_grad_(True)
    extra = set(blocks) - set(expected)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter blocks {sorted(extra)}")
    buffers = {
        "enc.pos": pos_embed_2d(config.tile_side, config.enc_dim).to(dtype),
        "dec.pos": pos_embed_2d(config.tile_side, config.dec_dim).to(dtype),
    }
    return ModelParams(config, tensors, buffers), meta
