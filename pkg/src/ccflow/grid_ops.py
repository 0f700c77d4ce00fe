"""Dense-grid kernels on (batch, channels, height, width) tensors.

All ops are thin, shape-checked wrappers over torch primitives so that
reverse-mode gradients come from torch autograd. ``bilinear_warp`` is
written out explicitly so that zero flow reproduces the source exactly.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, ShapeError

LEAKY_SLOPE = 0.01
GN_EPS = 1e-5


def _check_grid(x: torch.Tensor, name: str = "input") -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name} must be rank-4 (B, C, H, W), got shape {tuple(x.shape)}")


def _same_padding(k: int) -> int:
    if k % 2 != 1:
        raise ConfigError(f"kernel size must be odd, got {k}")
    return (k - 1) // 2


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, groups: int = 1) -> torch.Tensor:
    """Cross-correlation with implicit "same" zero padding.

    Output spatial size is ``ceil(input / stride)``.
    """
    _check_grid(x)
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be (C_out, C_in, k, k), got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1] * groups:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1] * groups}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    pad = _same_padding(weight.shape[-1])
    return F.conv2d(x, weight, bias, stride=stride, padding=pad, groups=groups)


def conv_transpose2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 1) -> torch.Tensor:
    """Fractionally strided convolution with output size ``input * stride``.

    ``weight`` has layout (C_in, C_out, k, k).
    """
    _check_grid(x)
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be (C_in, C_out, k, k), got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[0]}")
    if stride not in (1, 2):
        raise ConfigError(f"transposed conv stride must be 1 or 2, got {stride}")
    k = weight.shape[-1]
    # (in-1)*s - 2p + k + op == in*s
    pad = (k - stride + 1) // 2
    out_pad = 2 * pad - (k - stride)
    if out_pad >= stride:
        raise ConfigError(f"kernel {k} incompatible with stride {stride}")
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=pad, output_padding=out_pad)


def group_norm(x: torch.Tensor, num_groups: int, gamma: torch.Tensor | None = None,
               beta: torch.Tensor | None = None, eps: float = GN_EPS) -> torch.Tensor:
    _check_grid(x)
    if num_groups < 1 or x.shape[1] % num_groups:
        raise ConfigError(f"{x.shape[1]} channels not divisible into {num_groups} groups")
    return F.group_norm(x, num_groups, gamma, beta, eps)


def activate(x: torch.Tensor, kind: str, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    if kind == "leaky_relu":
        return F.leaky_relu(x, slope)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "tanh":
        return torch.tanh(x)
    raise ConfigError(f"unknown activation {kind!r}")


def concat_channels(grids: Sequence[torch.Tensor]) -> torch.Tensor:
    if not grids:
        raise ShapeError("concat_channels needs at least one grid")
    ref = grids[0]
    for g in grids:
        _check_grid(g)
        if g.shape[0] != ref.shape[0] or g.shape[2:] != ref.shape[2:]:
            raise ShapeError(
                f"cannot concatenate {tuple(g.shape)} with {tuple(ref.shape)}: batch/spatial mismatch")
    if len(grids) == 1:
        return ref
    return torch.cat(list(grids), dim=1)


def bilinear_warp(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward warp: ``out[b, c, y, x] = source[b, c, y + fy, x + fx]``.

    Flow channel 0 is the x (column) displacement and channel 1 the y (row)
    displacement, both in cells. Samples outside the grid read zero.
    """
    _check_grid(source, "source")
    _check_grid(flow, "flow")
    if flow.shape[1] != 2:
        raise ShapeError(f"flow must have 2 channels, got {flow.shape[1]}")
    B, C, H, W = source.shape
    if flow.shape[0] != B or flow.shape[2:] != source.shape[2:]:
        raise ShapeError(f"flow shape {tuple(flow.shape)} does not match source {tuple(source.shape)}")

    ys = torch.arange(H, dtype=flow.dtype, device=flow.device).view(1, H, 1)
    xs = torch.arange(W, dtype=flow.dtype, device=flow.device).view(1, 1, W)
    sx = xs + flow[:, 0]
    sy = ys + flow[:, 1]
    x0 = torch.floor(sx)
    y0 = torch.floor(sy)
    wx1 = sx - x0
    wy1 = sy - y0
    wx0 = 1 - wx1
    wy0 = 1 - wy1
    x0i = x0.long()
    y0i = y0.long()

    flat = source.reshape(B, C, H * W)
    out = None
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi = x0i + dx
            yi = y0i + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).view(B, 1, H * W).expand(B, C, H * W)
            vals = torch.gather(flat, 2, idx).view(B, C, H, W)
            weight = (wx * wy * valid.to(source.dtype)).unsqueeze(1)
            term = vals * weight
            out = term if out is None else out + term
    return out


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar loss.

    Repeated calls accumulate into existing gradients.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar root, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any differentiable input")
    loss.reshape(()).backward()
