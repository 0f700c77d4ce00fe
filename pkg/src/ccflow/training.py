"""Optimization loop: AdamW, cosine warm restarts, full BPTT, 180 degree augmentation."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint, losses, metrics
from . import model as M
from .errors import ConfigError, ContractError, NumericalError
from .scenario import MOTION_INPUTS, Dataset, SampleRecord

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "loss_total", "loss_occ", "loss_flow", "loss_trace") + tuple(
    f"val_{c}" for c in metrics.COLUMNS)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 0.002
    min_lr_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    augment: bool = True
    clip_norm: float | None = None
    steps_per_cycle: int | None = None
    max_steps: int | None = None
    squared_flow: bool = False
    occupancy_weight: float = 1000.0
    flow_weight: float = 25.0
    trace_weight: float = 10.0
    flow_weight_scale: float = 10.0
    eval_batch_size: int = 16
    crop_size: int | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not self.lr > self.eta_min > 0:
            raise ConfigError(f"need lr > eta_min > 0, got lr={self.lr}, eta_min={self.eta_min}")

    @property
    def eta_min(self) -> float:
        return self.lr * self.min_lr_ratio

    @property
    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.occupancy_weight, self.flow_weight, self.trace_weight,
                                  self.flow_weight_scale)

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, steps_per_cycle: int, lr0: float, eta_min: float) -> float:
    """Cosine annealing with warm restarts of constant length."""
    if steps_per_cycle < 1:
        raise ConfigError("steps_per_cycle must be >= 1")
    phase = (step % steps_per_cycle) / steps_per_cycle
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + math.cos(math.pi * phase))


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls({n: torch.zeros_like(p) for n, p in params.items()},
                   {n: torch.zeros_like(p) for n, p in params.items()})


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
               state: OptimizerState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> OptimizerState:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    missing = [n for n in params if grads.get(n) is None]
    if missing:
        raise ContractError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
    state.step += 1
    c1 = 1 - beta1 ** state.step
    c2 = 1 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        p.mul_(1 - lr * weight_decay)
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        denom = (v / c2).sqrt_().add_(eps)
        p.addcdiv_(m / c1, denom, value=-lr)
    return state


def _motion_mask(channels: Sequence[str]) -> np.ndarray:
    return np.array([c in MOTION_INPUTS for c in channels])


def augment_rot180(sample: SampleRecord) -> SampleRecord:
    """Rotate every plane by 180 degrees; displacement channels change sign."""
    rot = lambda a: np.ascontiguousarray(a[..., ::-1, ::-1])
    inputs = rot(sample.inputs)
    inputs[:, _motion_mask(sample.input_channels)] *= -1
    targets = rot(sample.targets)
    targets[:, 2:4] *= -1
    return replace(sample, inputs=inputs, targets=targets, current_occupancy=rot(sample.current_occupancy))


def center_crop(sample: SampleRecord, size: int) -> SampleRecord:
    """Central ``size`` x ``size`` window of every plane."""
    H, W = sample.current_occupancy.shape
    if not 0 < size <= min(H, W):
        raise ConfigError(f"crop {size} does not fit a {H}x{W} grid")
    r0, c0 = (H - size) // 2, (W - size) // 2
    cut = lambda a: np.ascontiguousarray(a[..., r0:r0 + size, c0:c0 + size])
    return replace(sample, inputs=cut(sample.inputs), targets=cut(sample.targets),
                   current_occupancy=cut(sample.current_occupancy))


def collate(samples: Sequence[SampleRecord], dtype=torch.float32) -> dict[str, torch.Tensor]:
    t = lambda key: torch.as_tensor(np.stack([getattr(s, key) if key != "prev_occupancy"
                                              else s.previous_occupancy() for s in samples]), dtype=dtype)
    return {"inputs": t("inputs"), "observed": t("observed"), "occluded": t("occluded"),
            "flow": t("flow"), "prev_occupancy": t("prev_occupancy")}


def model_config_for(sample: SampleRecord, **overrides) -> M.ModelConfig:
    kw = dict(input_channels=len(sample.input_channels), grid_size=sample.current_occupancy.shape[-1],
              future_frames=sample.future_frames,
              motion_channels=tuple(i for i, c in enumerate(sample.input_channels) if c in MOTION_INPUTS))
    kw.update(overrides)
    return M.ModelConfig(**kw)


def batch_loss(params, config: M.ModelConfig, batch: dict, tcfg: TrainConfig) -> losses.LossBreakdown:
    occ, flow = M.forward(params, batch["inputs"], config)
    return losses.compute(occ, flow, batch, tcfg.loss_weights, tcfg.squared_flow)


@torch.no_grad()
def predict(params, config: M.ModelConfig, samples: Sequence[SampleRecord], batch_size: int = 16,
            input_length: int | None = None, reset_every: int | None = None):
    """Occupancy probabilities and flow per sample, as float64 numpy arrays."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        inputs = torch.as_tensor(np.stack([s.inputs for s in chunk]), dtype=next(iter(params.values())).dtype)
        occ, flow = M.forward(params, inputs, config, input_length=input_length, reset_every=reset_every)
        occ = M.occupancy_probabilities(occ)
        out += [(o.double().numpy(), f.double().numpy()) for o, f in zip(occ, flow)]
    return out


def evaluate_samples(params, config: M.ModelConfig, samples: Sequence[SampleRecord],
                     batch_size: int = 16, **kw) -> list[metrics.WaypointReport]:
    preds = predict(params, config, samples, batch_size, **kw)
    return [metrics.evaluate(o, f, s) for (o, f), s in zip(preds, samples)]


def oracle_reports(samples: Sequence[SampleRecord]) -> list[metrics.WaypointReport]:
    """Reports for ground truth fed back as the prediction."""
    return [metrics.evaluate(np.stack([s.observed, s.occluded], axis=1), s.flow, s) for s in samples]


def global_norm_clip(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g.mul_(max_norm / (norm + 1e-12))
    return norm


def configure_threads() -> int:
    n = max(1, int(os.environ.get("CCFLOW_THREADS", "1")))
    torch.set_num_threads(n)
    torch.set_flush_denormal(True)
    return n


@dataclass
class TrainResult:
    params: dict[str, torch.Tensor]
    log_rows: list[dict]
    checkpoints: list[Path]
    best_metric: float


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def train(model_config: M.ModelConfig, tcfg: TrainConfig, train_samples: Sequence[SampleRecord],
          val_samples: Sequence[SampleRecord], out_dir: str | Path | None = None,
          params: dict | None = None, meta: dict | None = None) -> TrainResult:
    """Train from scratch; checkpoint whenever mean validation observed AUC improves.

    ``meta`` is stored verbatim in every checkpoint header.
    """
    configure_threads()
    try:
        return _train(model_config, tcfg, train_samples, val_samples, out_dir, params, meta)
    finally:
        # flushing denormals speeds up the recurrences, but it is process-wide state; leave callers unaffected
        torch.set_flush_denormal(False)


def _train(model_config: M.ModelConfig, tcfg: TrainConfig, train_samples: Sequence[SampleRecord],
           val_samples: Sequence[SampleRecord], out_dir: str | Path | None,
           params: dict | None, meta: dict | None) -> TrainResult:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(tcfg.seed)
    params = params if params is not None else M.init_params(model_config, seed=tcfg.seed)
    for p in params.values():
        p.requires_grad_(True)
    opt = OptimizerState.for_params(params)
    n = len(train_samples)
    if n == 0:
        raise ConfigError("empty training split")
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    cycle = tcfg.steps_per_cycle or steps_per_epoch
    rows: list[dict] = []
    ckpts: list[Path] = []
    best = -math.inf
    step = 0
    log_file = None
    if out is not None:
        log_file = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(tcfg.epochs):
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                if tcfg.max_steps is not None and step >= tcfg.max_steps:
                    break
                idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
                chunk = [train_samples[i] for i in idx]
                if tcfg.crop_size:
                    chunk = [center_crop(s, tcfg.crop_size) for s in chunk]
                if tcfg.augment:
                    flips = rng.random(len(chunk)) < 0.5
                    chunk = [augment_rot180(s) if f else s for s, f in zip(chunk, flips)]
                batch = collate(chunk)
                lr = cosine_lr(step, cycle, tcfg.lr, tcfg.eta_min)
                br = batch_loss(params, model_config, batch, tcfg)
                if not torch.isfinite(br.total):
                    seeds = [s.meta.get("seed") for s in chunk]
                    if out is not None:
                        (out / "nonfinite_batch.json").write_text(
                            json.dumps({"step": step, "epoch": epoch, "seeds": seeds}, indent=2))
                    raise NumericalError(f"non-finite loss at step {step} (batch seeds {seeds})")
                for p in params.values():
                    p.grad = None
                br.total.backward()
                grads = {k: p.grad for k, p in params.items()}
                if tcfg.clip_norm is not None:
                    global_norm_clip(grads, tcfg.clip_norm)
                adamw_step(params, grads, opt, lr, tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay)
                row = {"step": step, "epoch": epoch, "lr": lr, **{
                    "loss_total": br.total.item(), "loss_occ": br.occupancy.item(),
                    "loss_flow": br.flow.item(), "loss_trace": br.trace.item()}}
                rows.append(row)
                step += 1
                if step % 10 == 0:
                    log.info("step %d lr %.3g loss %.4f", step, lr, row["loss_total"])
            if val_samples:
                scored = [center_crop(s, tcfg.crop_size) for s in val_samples] if tcfg.crop_size else val_samples
                reports = evaluate_samples(params, model_config, scored, tcfg.eval_batch_size)
                means = metrics.aggregate(reports).means()
                rows[-1].update({f"val_{c}": means[c] for c in metrics.COLUMNS})
                metric = means["observed_auc"]
                log.info("epoch %d val observed AUC %.4f EPE %.3f", epoch, metric, means["flow_epe"])
                if metric > best:
                    best = metric
                    if out is not None:
                        path = out / f"epoch_{epoch:03d}.ckpt"
                        checkpoint.save(path, params, model_config.to_dict(), step, opt,
                                        extra={**(meta or {}), "val_observed_auc": metric, "epoch": epoch,
                                               "train_config": tcfg.to_dict()})
                        ckpts.append(path)
            if log_file is not None:
                for r in rows:
                    if r["epoch"] == epoch:
                        writer.writerow([_fmt(r.get(c)) for c in LOG_COLUMNS])
                log_file.flush()
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                break
        if not val_samples and out is not None:
            # nothing to select on: keep the final weights
            path = out / f"epoch_{epoch:03d}.ckpt"
            checkpoint.save(path, params, model_config.to_dict(), step, opt,
                            extra={**(meta or {}), "epoch": epoch, "train_config": tcfg.to_dict()})
            ckpts.append(path)
    finally:
        if log_file is not None:
            log_file.close()
    for p in params.values():
        p.requires_grad_(False)
        p.grad = None
    return TrainResult(params=params, log_rows=rows, checkpoints=ckpts, best_metric=best)


def load_model(path) -> tuple[M.ModelConfig, dict[str, torch.Tensor], dict]:
    header, params, _ = checkpoint.load(path)
    return M.ModelConfig(**header["config"]), params, header


def best_checkpoint(run_dir) -> Path:
    found = sorted(Path(run_dir).glob("epoch_*.ckpt"))
    if not found:
        raise ConfigError(f"no checkpoint in {run_dir}")
    return found[-1]


def load_split(dataset: Dataset | str | Path, split: str) -> list[SampleRecord]:
    ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    return ds.samples(split)
