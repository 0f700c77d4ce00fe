"""Coupled convolutional LSTM: encoder, accumulation cell, forecasting cell, decoders.

Parameters live in a flat ``dict[str, Tensor]`` so that every function here
is a pure function of ``(params, inputs)``. Each LSTM gate owns its own
three-layer conv net (``acc.i.*``, ``acc.f.*``, ...); at run time the four
gate nets of a cell are evaluated together as one wide first layer followed
by grouped convolutions, which is algebraically the same computation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import grid_ops as G
from .errors import ConfigError, ShapeError

GATES = ("i", "f", "g", "o")
ABLATIONS = ("none", "no_accumulation", "direct_multiframe", "no_input_flow")


@dataclass
class ModelConfig:
    input_channels: int = 6
    latent_channels: int = 64
    grid_size: int = 64
    future_frames: int = 4
    channels_per_group: int = 8
    gate_depth: int = 3
    acc_kernel: int = 3
    forecast_kernel: int = 5
    occupancy_channels: int = 2
    flow_channels: int = 2
    leaky_slope: float = G.LEAKY_SLOPE
    ablation: str = "none"
    motion_channels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.motion_channels = tuple(self.motion_channels)
        C = self.latent_channels
        if C < 4 or C % self.channels_per_group:
            raise ConfigError(
                f"latent_channels={C} must be >= 4 and divisible by channels_per_group={self.channels_per_group}")
        if self.grid_size % 4:
            raise ConfigError(f"grid_size={self.grid_size} must be divisible by 4")
        if self.gate_depth < 1:
            raise ConfigError("gate_depth must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.acc_kernel % 2 == 0 or self.forecast_kernel % 2 == 0:
            raise ConfigError("gate kernels must be odd")

    @property
    def encoder_widths(self) -> list[int]:
        C = self.latent_channels
        return [max(1, C // 4), max(1, C // 2), C, C]

    @property
    def decoder_widths(self) -> list[int]:
        C = self.latent_channels
        return [max(1, C // 2), max(1, C // 4), max(1, C // 8)]

    @property
    def decoder_outputs(self) -> int:
        return self.future_frames if self.ablation == "direct_multiframe" else 1

    def groups(self, channels: int) -> int:
        g = max(1, channels // self.channels_per_group)
        while channels % g:
            g -= 1
        return g

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motion_channels"] = list(self.motion_channels)
        return d


ENCODER_KERNELS = (5, 3, 3, 3)
ENCODER_STRIDES = (2, 1, 2, 1)
DECODER_STRIDES = (2, 2, 1)
DECODER_KERNEL = 3
SMOOTH_KERNEL = 3


def full_scale_config(**overrides) -> ModelConfig:
    """Challenge-sized preset; used for the parameter census only."""
    return ModelConfig(**{"latent_channels": 256, "grid_size": 512, "future_frames": 8, **overrides})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable array and its shape, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.input_channels
    for li, (w, k) in enumerate(zip(config.encoder_widths, ENCODER_KERNELS)):
        shapes[f"enc.{li}.weight"] = (w, c_in, k, k)
        shapes[f"enc.{li}.gn.gamma"] = (w,)
        shapes[f"enc.{li}.gn.beta"] = (w,)
        c_in = w
    C = config.latent_channels
    cells = [("acc", config.acc_kernel, 2 * C)]
    if config.ablation != "direct_multiframe":
        # the direct variant decodes every waypoint from the accumulated state
        cells.append(("fc", config.forecast_kernel, C))
    for cell, k, first_in in cells:
        for g in GATES:
            for li in range(config.gate_depth):
                shapes[f"{cell}.{g}.{li}.weight"] = (C, first_in if li == 0 else C, k, k)
                shapes[f"{cell}.{g}.{li}.bias"] = (C,)
                if li < config.gate_depth - 1:
                    shapes[f"{cell}.{g}.{li}.gn.gamma"] = (C,)
                    shapes[f"{cell}.{g}.{li}.gn.beta"] = (C,)
        shapes[f"{cell}.cell_gn.gamma"] = (C,)
        shapes[f"{cell}.cell_gn.beta"] = (C,)
    n = config.decoder_outputs
    for branch, out in (("dec_occ", config.occupancy_channels * n), ("dec_flow", config.flow_channels * n)):
        c_in = C
        for li, w in enumerate(config.decoder_widths):
            shapes[f"{branch}.{li}.weight"] = (c_in, w, DECODER_KERNEL, DECODER_KERNEL)
            shapes[f"{branch}.{li}.gn.gamma"] = (w,)
            shapes[f"{branch}.{li}.gn.beta"] = (w,)
            c_in = w
        shapes[f"{branch}.smooth.weight"] = (out, c_in, SMOOTH_KERNEL, SMOOTH_KERNEL)
        shapes[f"{branch}.smooth.bias"] = (out,)
    return shapes


def count_params(config: ModelConfig) -> dict[str, int]:
    """Parameter census by submodule; ``total`` is the sum."""
    out: dict[str, int] = {}
    for name, shape in param_shapes(config).items():
        key = name.split(".")[0]
        out[key] = out.get(key, 0) + math.prod(shape)
    out["total"] = sum(out.values())
    return out


def init_params(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> dict[str, torch.Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, torch.Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            transposed = name.startswith("dec_") and ".smooth." not in name
            fan_in = (shape[0] if transposed else shape[1]) * shape[2] * shape[3]
            bound = math.sqrt(1.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        if name in (f"acc.f.{config.gate_depth - 1}.bias", f"fc.f.{config.gate_depth - 1}.bias"):
            arr = np.ones(shape)
        params[name] = torch.tensor(arr, dtype=dtype)
    return params


@dataclass
class RecurrentState:
    hidden: torch.Tensor
    cell: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, config: ModelConfig, dtype=torch.float32) -> "RecurrentState":
        s = config.grid_size // 4
        z = torch.zeros(batch, config.latent_channels, s, s, dtype=dtype)
        return cls(z, z.clone())


# ------------------------------------------------------------------ layers

def encode(params, frames: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """(B, C_in, H, W) raster stack -> (B, C, H/4, W/4) latent."""
    if frames.dim() != 4 or frames.shape[1] != config.input_channels:
        raise ShapeError(
            f"encoder expects (B, {config.input_channels}, H, W), got {tuple(frames.shape)}")
    x = frames
    for li, stride in enumerate(ENCODER_STRIDES):
        x = G.conv2d(x, params[f"enc.{li}.weight"], None, stride=stride)
        x = G.activate(x, "leaky_relu", config.leaky_slope)
        x = G.group_norm(x, config.groups(x.shape[1]), params[f"enc.{li}.gn.gamma"], params[f"enc.{li}.gn.beta"])
    return x


@dataclass
class _FusedGates:
    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    gammas: list[torch.Tensor]
    betas: list[torch.Tensor]


def _fuse(params, cell: str, config: ModelConfig) -> _FusedGates:
    d = config.gate_depth
    cat = lambda key: torch.cat([params[f"{cell}.{g}.{key}"] for g in GATES], 0)
    return _FusedGates(weights=[cat(f"{li}.weight") for li in range(d)],
                       biases=[cat(f"{li}.bias") for li in range(d)],
                       gammas=[cat(f"{li}.gn.gamma") for li in range(d - 1)],
                       betas=[cat(f"{li}.gn.beta") for li in range(d - 1)])


def _gate_nets(x: torch.Tensor, fused: _FusedGates, config: ModelConfig):
    C = config.latent_channels
    groups = 4 * config.groups(C)
    y = x
    for li, (w, b) in enumerate(zip(fused.weights, fused.biases)):
        y = G.conv2d(y, w, b, groups=1 if li == 0 else 4)
        if li < config.gate_depth - 1:
            y = G.activate(y, "leaky_relu", config.leaky_slope)
            y = G.group_norm(y, groups, fused.gammas[li], fused.betas[li])
    i, f, g, o = torch.split(y, C, dim=1)
    return G.activate(i, "sigmoid"), G.activate(f, "sigmoid"), G.activate(g, "tanh"), G.activate(o, "sigmoid")


def _lstm_update(gates, state: RecurrentState, params, cell: str, config: ModelConfig) -> RecurrentState:
    i, f, g, o = gates
    c = f * state.cell + i * g
    normed = G.group_norm(c, config.groups(config.latent_channels),
                          params[f"{cell}.cell_gn.gamma"], params[f"{cell}.cell_gn.beta"])
    return RecurrentState(hidden=o * G.activate(normed, "tanh"), cell=c)


def _check_state(state: RecurrentState, latent: torch.Tensor | None, config: ModelConfig):
    C = config.latent_channels
    if state.hidden.shape != state.cell.shape or state.hidden.dim() != 4 or state.hidden.shape[1] != C:
        raise ShapeError(f"state hidden {tuple(state.hidden.shape)} / cell {tuple(state.cell.shape)} "
                         f"inconsistent with C={C}")
    if latent is not None and latent.shape != state.hidden.shape:
        raise ShapeError(f"latent {tuple(latent.shape)} does not match state {tuple(state.hidden.shape)}")


def accumulate_step(params, latent: torch.Tensor, state: RecurrentState, config: ModelConfig,
                    fused: _FusedGates | None = None) -> RecurrentState:
    """One accumulation update from ``[X_t || H_{t-1}]``."""
    _check_state(state, latent, config)
    fused = fused or _fuse(params, "acc", config)
    gates = _gate_nets(G.concat_channels([latent, state.hidden]), fused, config)
    return _lstm_update(gates, state, params, "acc", config)


def forecast_step(params, state: RecurrentState, config: ModelConfig,
                  fused: _FusedGates | None = None) -> RecurrentState:
    """One autoregressive update driven by ``H_{t-1}`` alone."""
    _check_state(state, None, config)
    fused = fused or _fuse(params, "fc", config)
    return _lstm_update(_gate_nets(state.hidden, fused, config), state, params, "fc", config)


def _decode_branch(params, hidden: torch.Tensor, branch: str, config: ModelConfig) -> torch.Tensor:
    x = hidden
    for li, stride in enumerate(DECODER_STRIDES):
        x = G.conv_transpose2d(x, params[f"{branch}.{li}.weight"], None, stride=stride)
        x = G.activate(x, "leaky_relu", config.leaky_slope)
        x = G.group_norm(x, config.groups(x.shape[1]), params[f"{branch}.{li}.gn.gamma"],
                         params[f"{branch}.{li}.gn.beta"])
    return G.conv2d(x, params[f"{branch}.smooth.weight"], params[f"{branch}.smooth.bias"])


def decode(params, hidden: torch.Tensor, config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Hidden state -> (occupancy logits, flow) at full resolution."""
    if hidden.dim() != 4 or hidden.shape[1] != config.latent_channels:
        raise ShapeError(f"decoder expects (B, {config.latent_channels}, h, w), got {tuple(hidden.shape)}")
    return _decode_branch(params, hidden, "dec_occ", config), _decode_branch(params, hidden, "dec_flow", config)


def occupancy_probabilities(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits)


# ----------------------------------------------------------------- forward

def prepare_inputs(inputs: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    if config.ablation == "no_input_flow" and config.motion_channels:
        inputs = inputs.clone()
        inputs[:, :, list(config.motion_channels)] = 0
    return inputs


def accumulate(params, inputs: torch.Tensor, config: ModelConfig, input_length: int | None = None,
               reset_every: int | None = None) -> RecurrentState:
    """Run the accumulation cell over (B, T_h, C_in, H, W) history frames.

    ``input_length`` keeps only the last L frames; ``reset_every`` zeroes the
    state every that many frames (state carried when ``None``).
    """
    if inputs.dim() != 5:
        raise ShapeError(f"inputs must be (B, T_h, C_in, H, W), got {tuple(inputs.shape)}")
    B, T = inputs.shape[:2]
    L = T if input_length is None else input_length
    if not 1 <= L <= T:
        raise ShapeError(f"input_length {L} outside [1, {T}]")
    if config.ablation == "no_accumulation":
        L = 1
    frames = prepare_inputs(inputs[:, T - L:], config)
    latents = encode(params, frames.reshape(B * L, *frames.shape[2:]), config)
    latents = latents.reshape(B, L, *latents.shape[1:])
    fused = _fuse(params, "acc", config)
    state = RecurrentState.zeros(B, config, dtype=latents.dtype)
    for t in range(L):
        if reset_every and t and t % reset_every == 0:
            state = RecurrentState.zeros(B, config, dtype=latents.dtype)
        state = accumulate_step(params, latents[:, t], state, config, fused)
    return state


def forward(params, inputs: torch.Tensor, config: ModelConfig, future_frames: int | None = None,
            input_length: int | None = None, reset_every: int | None = None):
    """Occupancy logits and flow for every waypoint.

    Returns two tensors of shape (B, T_f, 2, H, W).
    """
    T_f = config.future_frames if future_frames is None else future_frames
    B = inputs.shape[0]
    H, W = inputs.shape[-2:]
    if H != config.grid_size or W != config.grid_size:
        raise ShapeError(f"inputs are {H}x{W}, model expects {config.grid_size}x{config.grid_size}")
    if T_f == 0:
        empty = inputs.new_zeros(B, 0, 2, H, W)
        return empty, empty.clone()
    state = accumulate(params, inputs, config, input_length, reset_every)
    if config.ablation == "direct_multiframe":
        if T_f > config.future_frames:
            raise ShapeError(f"direct_multiframe model emits at most {config.future_frames} waypoints")
        occ, flow = decode(params, state.hidden, config)
        occ = occ.reshape(B, config.future_frames, config.occupancy_channels, H, W)[:, :T_f]
        flow = flow.reshape(B, config.future_frames, config.flow_channels, H, W)[:, :T_f]
        return occ, flow
    fused = _fuse(params, "fc", config)
    hiddens = []
    for _ in range(T_f):
        state = forecast_step(params, state, config, fused)
        hiddens.append(state.hidden)
    occ, flow = decode(params, torch.cat(hiddens, 0), config)
    occ = occ.reshape(T_f, B, *occ.shape[1:]).transpose(0, 1)
    flow = flow.reshape(T_f, B, *flow.shape[1:]).transpose(0, 1)
    return occ, flow
