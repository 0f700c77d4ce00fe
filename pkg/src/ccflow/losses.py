"""Training objective: weighted occupancy BCE, observed-masked flow error, trace consistency."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import grid_ops as G
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    occupancy: float = 1000.0
    flow: float = 25.0
    trace: float = 10.0
    flow_weight_scale: float = 10.0

    def __post_init__(self):
        if min(self.occupancy, self.flow, self.trace, self.flow_weight_scale) <= 0:
            raise ConfigError("loss weights must be strictly positive")


@dataclass
class LossBreakdown:
    occupancy: torch.Tensor
    flow: torch.Tensor
    trace: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("total", "occupancy", "flow", "trace")}


def _safe_ratio(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    # zero normalizer -> 0, without NaN gradients
    ok = den > 0
    return torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(num))


def _as_mask(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 4 else x.unsqueeze(1)


def occupancy_loss(logits: torch.Tensor, target: torch.Tensor, gt_flow: torch.Tensor,
                   flow_weight_scale: float = 10.0) -> torch.Tensor:
    """Motion-weighted BCE over (T, K, H, W) logits; K channels averaged."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if gt_flow.dim() != 4 or gt_flow.shape[1] != 2 or gt_flow.shape[0] != logits.shape[0] \
            or gt_flow.shape[2:] != logits.shape[2:]:
        raise ShapeError(f"gt_flow {tuple(gt_flow.shape)} incompatible with logits {tuple(logits.shape)}")
    speed = torch.sqrt((gt_flow ** 2).sum(dim=1, keepdim=True))
    weight = target * (speed / flow_weight_scale + 1.0)
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    return (bce * (weight + 1.0)).mean(dim=(0, 2, 3)).mean()


def flow_loss(pred: torch.Tensor, gt: torch.Tensor, observed: torch.Tensor,
              squared: bool = False) -> torch.Tensor:
    """Sum of per-component absolute (or squared) flow errors on observed cells, over their count."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    mask = _as_mask(observed)
    err = (pred - gt) ** 2 if squared else (pred - gt).abs()
    return _safe_ratio((mask * err.sum(dim=1, keepdim=True)).sum(), mask.sum())


def trace_loss(pred_flow: torch.Tensor, occ_prev: torch.Tensor, occ_cur: torch.Tensor) -> torch.Tensor:
    """Warp O^{k-1} by the predicted flow; penalize misses on O^k cells.

    One row of the leading dimension per waypoint; rows with an empty O^k
    contribute 0 to the mean.
    """
    prev, cur = _as_mask(occ_prev), _as_mask(occ_cur)
    warped = G.bilinear_warp(prev, pred_flow)
    resid = ((cur * warped - cur) ** 2).sum(dim=(1, 2, 3))
    return _safe_ratio(resid, cur.sum(dim=(1, 2, 3))).mean()


def total_loss(occupancy: torch.Tensor, flow: torch.Tensor, trace: torch.Tensor,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    total = weights.occupancy * occupancy + weights.flow * flow + weights.trace * trace
    return LossBreakdown(occupancy=occupancy, flow=flow, trace=trace, total=total)


def compute(occ_logits: torch.Tensor, pred_flow: torch.Tensor, batch: dict,
            weights: LossWeights = LossWeights(), squared_flow: bool = False) -> LossBreakdown:
    """All three terms from one forward pass.

    ``occ_logits`` and ``pred_flow`` are (B, T, 2, H, W); ``batch`` holds
    ``observed``, ``occluded``, ``prev_occupancy`` (B, T, H, W) and ``flow``
    (B, T, 2, H, W).
    """
    B, T = occ_logits.shape[:2]
    H, W = occ_logits.shape[-2:]
    n = B * T
    gt_flow = batch["flow"].reshape(n, 2, H, W)
    observed = batch["observed"].reshape(n, 1, H, W)
    occluded = batch["occluded"].reshape(n, 1, H, W)
    target = torch.cat([observed, occluded], dim=1)[:, :occ_logits.shape[2]]
    occ = occupancy_loss(occ_logits.reshape(n, -1, H, W), target, gt_flow, weights.flow_weight_scale)
    fl = flow_loss(pred_flow.reshape(n, 2, H, W), gt_flow, observed, squared_flow)
    cur = torch.maximum(observed, occluded)
    tr = trace_loss(pred_flow.reshape(n, 2, H, W), batch["prev_occupancy"].reshape(n, 1, H, W), cur)
    return total_loss(occ, fl, tr, weights)
