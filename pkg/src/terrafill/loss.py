"""Topography-aware reconstruction loss: global MSE plus slope-gradient MSE.

The total is mse + gamma * gradient, where the gradient term penalizes
differences between Sobel-derived slope fields of the reconstruction and the
reference. Slopes are s = atan(sqrt(dx^2 + dy^2)) with dx, dy the Sobel
responses normalized by 8 * cell_size, which makes them true rise-over-run
grades. Replicate padding keeps tile borders from reading as cliffs.

During training the loss runs in normalized elevation space with a nominal
cell size of 1 (slope_domain="normalized"), keeping magnitudes comparable
across tiles of wildly different relief; slope_domain="meters" uses the
physical cell size instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import ops
from .model import MaskPlan

SOBEL_X = torch.tensor(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64
)
SOBEL_Y = torch.tensor(
    [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]], dtype=torch.float64
)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0
    slope_domain: str = "normalized"  # or "meters"
    loss_support: str = "all_grids"  # or "masked_only"

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.slope_domain not in ("normalized", "meters"):
            raise ValueError(f"unknown slope_domain {self.slope_domain!r}")
        if self.loss_support not in ("all_grids", "masked_only"):
            raise ValueError(f"unknown loss_support {self.loss_support!r}")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "slope_domain": self.slope_domain,
            "loss_support": self.loss_support,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass
class LossValue:
    """total = mse_part + gamma * gradient_part, computed literally so the
    identity holds to machine precision."""

    total: torch.Tensor
    mse_part: torch.Tensor
    gradient_part: torch.Tensor

    def floats(self) -> tuple[float, float, float]:
        return (
            float(self.total.detach()),
            float(self.mse_part.detach()),
            float(self.gradient_part.detach()),
        )


def _as_field(x, like: torch.Tensor | None = None) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    if t.ndim != 2:
        raise ValueError(f"expected a 2-D field, got shape {tuple(t.shape)}")
    return t


def _check_pair(recon, target) -> tuple[torch.Tensor, torch.Tensor]:
    r, t = _as_field(recon), _as_field(target)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(t.shape)}")
    return r, t.to(r.dtype)


def _support_mean(sq: torch.Tensor, plan: MaskPlan | None, support: str) -> torch.Tensor:
    if support == "all_grids":
        return sq.mean()
    if plan is None:
        raise ValueError("loss_support='masked_only' requires a mask plan")
    idx = torch.as_tensor(plan.masked)
    if idx.numel() == 0:
        raise ValueError("masked_only support with an empty masked set")
    return sq.reshape(-1)[idx].mean()


def mse_loss(recon, target, plan: MaskPlan | None = None, support: str = "all_grids"):
    """Mean squared elevation difference over the support (all cells by default)."""
    r, t = _check_pair(recon, target)
    return _support_mean(ops.square(ops.sub(r, t)), plan, support)


def sobel_slope(field, cell_size: float = 1.0) -> torch.Tensor:
    """Slope angle in radians per cell, differentiable w.r.t. the field."""
    f = _as_field(field)
    if f.shape[0] < 2 or f.shape[1] < 2:
        raise ValueError(f"field too small for slopes: {tuple(f.shape)}")
    if not cell_size > 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    denom = 8.0 * cell_size
    dx = ops.scale(ops.conv2d_fixed(f, SOBEL_X.to(f.dtype)), 1.0 / denom)
    dy = ops.scale(ops.conv2d_fixed(f, SOBEL_Y.to(f.dtype)), 1.0 / denom)
    return ops.atan(ops.sqrt(ops.add(ops.square(dx), ops.square(dy))))


def gradient_loss(
    recon,
    target,
    cell_size: float = 1.0,
    plan: MaskPlan | None = None,
    support: str = "all_grids",
):
    """Mean squared slope difference between the two fields."""
    r, t = _check_pair(recon, target)
    diff = ops.sub(sobel_slope(r, cell_size), sobel_slope(t, cell_size))
    return _support_mean(ops.square(diff), plan, support)


def total_loss(
    recon,
    target,
    cell_size: float,
    cfg: LossConfig,
    plan: MaskPlan | None = None,
) -> LossValue:
    """Combined loss; differentiable w.r.t. recon."""
    r, t = _check_pair(recon, target)
    cs = 1.0 if cfg.slope_domain == "normalized" else cell_size
    mse = mse_loss(r, t, plan, cfg.loss_support)
    grad = gradient_loss(r, t, cs, plan, cfg.loss_support)
    total = mse + cfg.gamma * grad
    return LossValue(total=total, mse_part=mse, gradient_part=grad)
