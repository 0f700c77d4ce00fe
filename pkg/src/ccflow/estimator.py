"""scikit-learn style wrapper around the training and evaluation functions."""
from __future__ import annotations

from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import metrics
from . import training as T
from .errors import ShapeError
from .scenario import Dataset, SampleRecord


def check_samples(X, split: str | None = None) -> list[SampleRecord]:
    """Accept a sequence of samples, a Dataset or a dataset directory."""
    if isinstance(X, (str, Path)):
        X = Dataset(X)
    if isinstance(X, Dataset):
        X = X.samples(split)
    samples = list(X)
    if not samples:
        raise ShapeError("no samples given")
    if not all(isinstance(s, SampleRecord) for s in samples):
        raise ShapeError("expected SampleRecord instances")
    first = samples[0]
    for s in samples[1:]:
        if s.inputs.shape != first.inputs.shape or s.targets.shape != first.targets.shape:
            raise ShapeError(f"inconsistent sample shapes {s.inputs.shape} vs {first.inputs.shape}")
    return samples


class CCLSTMForecaster(BaseEstimator):
    """Occupancy and flow forecaster.

    Hyperparameters mirror ``ModelConfig`` and ``TrainConfig``; ``fit`` takes
    a list of samples and an optional validation list used for checkpoint
    selection.
    """

    def __init__(self, latent_channels: int = 64, channels_per_group: int = 8, gate_depth: int = 3,
                 ablation: str = "none", epochs: int = 10, batch_size: int = 8, lr: float = 0.002,
                 weight_decay: float = 0.01, steps_per_cycle: int | None = None, squared_flow: bool = False,
                 augment: bool = True, clip_norm: float | None = None, max_steps: int | None = None,
                 seed: int = 0, out_dir: str | None = None):
        self.latent_channels = latent_channels
        self.channels_per_group = channels_per_group
        self.gate_depth = gate_depth
        self.ablation = ablation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps_per_cycle = steps_per_cycle
        self.squared_flow = squared_flow
        self.augment = augment
        self.clip_norm = clip_norm
        self.max_steps = max_steps
        self.seed = seed
        self.out_dir = out_dir

    def _train_config(self) -> T.TrainConfig:
        return T.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             weight_decay=self.weight_decay, steps_per_cycle=self.steps_per_cycle,
                             squared_flow=self.squared_flow, augment=self.augment,
                             clip_norm=self.clip_norm, max_steps=self.max_steps, seed=self.seed)

    def fit(self, X, y=None, validation=None):
        samples = check_samples(X, "train")
        val = check_samples(validation, "val") if validation is not None else []
        config = T.model_config_for(samples[0], latent_channels=self.latent_channels,
                                    channels_per_group=self.channels_per_group,
                                    gate_depth=self.gate_depth, ablation=self.ablation)
        result = T.train(config, self._train_config(), samples, val, self.out_dir,
                         meta={"history_frames": samples[0].history_frames})
        if result.checkpoints and val:
            config, params, _ = T.load_model(result.checkpoints[-1])
        else:
            params = result.params
        self.model_config_ = config
        self.params_ = params
        self.log_ = result.log_rows
        self.checkpoints_ = result.checkpoints
        self.history_frames_ = samples[0].history_frames
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "CCLSTMForecaster":
        config, params, header = T.load_model(path)
        extra = header.get("extra", {})
        tc = extra.get("train_config", {})
        est = cls(latent_channels=config.latent_channels, channels_per_group=config.channels_per_group,
                  gate_depth=config.gate_depth, ablation=config.ablation,
                  **{k: tc[k] for k in ("epochs", "batch_size", "lr", "weight_decay", "steps_per_cycle",
                                        "squared_flow", "augment", "clip_norm", "max_steps", "seed")
                     if k in tc})
        est.model_config_, est.params_ = config, params
        est.history_frames_ = extra.get("history_frames")
        est.log_, est.checkpoints_ = [], [Path(path)]
        return est

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit() or from_checkpoint() first")

    def predict(self, X, input_length: int | None = None, reset_every: int | None = None):
        """List of (occupancy probabilities, flow) pairs, each (T_f, 2, H, W)."""
        self._check_fitted()
        samples = check_samples(X, "val")
        channels = samples[0].inputs.shape[1]
        if channels != self.model_config_.input_channels:
            raise ShapeError(f"samples carry {channels} input channels, model expects "
                             f"{self.model_config_.input_channels}")
        return T.predict(self.params_, self.model_config_, samples, input_length=input_length,
                         reset_every=reset_every)

    def evaluate(self, X, **kw) -> list[metrics.WaypointReport]:
        samples = check_samples(X, "val")
        preds = self.predict(samples, **kw)
        return [metrics.evaluate(o, f, s) for (o, f), s in zip(preds, samples)]

    def score(self, X, y=None) -> float:
        """Mean observed AUC."""
        return metrics.aggregate(self.evaluate(X)).means()["observed_auc"]


__all__ = ["CCLSTMForecaster", "check_samples"]
