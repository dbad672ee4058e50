"""Training: one scene per minibatch, joint multi-task optimization."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_model, save_model
from .data import Dataset, Scene
from .errors import ConfigError, NonFiniteLossError
from .model import Model, ModelConfig, ModelParams, init_params, loss_and_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 3
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    shuffle: bool = True
    per_task: bool = False
    clip_norm: Optional[float] = 10.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m::{k}": v for k, v in self.m.items()}
        out.update({f"v::{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.m = {k: tensors[f"m::{k}"].copy() for k in self.m}
        self.v = {k: tensors[f"v::{k}"].copy() for k in self.v}
        self.t = t


class SGD:
    def __init__(self, params: ModelParams, lr: float, momentum: float):
        self.lr, self.momentum = lr, momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        for k, g in grads.items():
            self.velocity[k] = self.momentum * self.velocity[k] + g
            params[k] -= self.lr * self.velocity[k]

    def state(self) -> dict[str, np.ndarray]:
        return {f"m::{k}": v for k, v in self.velocity.items()}

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.velocity = {k: tensors[f"m::{k}"].copy() for k in self.velocity}
        self.t = t


def make_optimizer(params: ModelParams, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(params, cfg.learning_rate, cfg.momentum)


@dataclass
class Batch:
    scene: Scene
    labels: dict[int, np.ndarray]


def make_minibatch(scene: Scene, task: Optional[int] = None) -> Optional[Batch]:
    """All objects of one scene with detection scores forced to 1.

    Unlabeled objects are negatives for every annotated task. Returns None
    (skip) when the scene is empty or carries no annotation; with ``task``
    set, only that task's labels are kept, renumbered as task 1.
    """
    if len(scene) == 0:
        return None
    if task is None:
        labels = dict(scene.labels)
    elif task in scene.labels:
        labels = {1: scene.labels[task]}
    else:
        return None
    if not labels:
        return None
    objects = tuple(o.with_score(1.0) for o in scene.objects)
    return Batch(Scene(scene.image_id, scene.image_width, scene.image_height, objects, labels), labels)


def clip_gradients(grads: ModelParams, max_norm: Optional[float]) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train_step(params: ModelParams, opt_state, batch: Batch, model_config: ModelConfig,
               train_config: TrainConfig) -> float:
    """Forward, backward and one optimizer update, in place. Returns the loss."""
    loss, parts, grads = loss_and_grads(batch.scene, params, model_config, batch.labels)
    if not np.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss {loss} on scene {batch.scene.image_id} "
            f"(heads: {parts}, step {opt_state.t + 1})"
        )
    clip_gradients(grads, train_config.clip_norm)
    opt_state.step(params, grads)
    return loss


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


class Trainer:
    """Holds parameters and optimizer state across epochs; resumable."""

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig):
        self.train_config = train_config
        self.model = Model(model_config, [], train_config.per_task)
        rng = np.random.default_rng(train_config.seed)
        sub = self.model.sub_config()
        count = model_config.M if train_config.per_task else 1
        self.model.params = [init_params(sub, rng) for _ in range(count)]
        self.optimizers = [make_optimizer(p, train_config) for p in self.model.params]
        self.epochs_done = 0
        self.history: list[dict] = []

    def run_epoch(self, dataset: Dataset) -> dict:
        cfg = self.train_config
        sub = self.model.sub_config()
        order = epoch_order(len(dataset.scenes), cfg.seed, self.epochs_done, cfg.shuffle)
        start = time.perf_counter()
        losses = []
        for idx in order:
            scene = dataset.scenes[idx]
            if self.model.per_task:
                for m, (params, opt) in enumerate(zip(self.model.params, self.optimizers)):
                    batch = make_minibatch(scene, task=m + 1)
                    if batch is not None:
                        losses.append(train_step(params, opt, batch, sub, cfg))
            else:
                batch = make_minibatch(scene)
                if batch is not None:
                    losses.append(train_step(self.model.params[0], self.optimizers[0], batch, sub, cfg))
        if not losses:
            raise ConfigError("no labeled, non-empty scene to train on")
        self.epochs_done += 1
        record = {
            "epoch": self.epochs_done,
            "mean_loss": float(np.mean(losses)),
            "wall_ms": round((time.perf_counter() - start) * 1000.0, 3),
        }
        self.history.append(record)
        log.info("epoch %d mean_loss %.6g", record["epoch"], record["mean_loss"])
        return record

    def save_state(self, path) -> None:
        """Float64 snapshot of parameters and optimizer moments."""
        extra_tensors = {}
        for i, opt in enumerate(self.optimizers):
            for name, value in opt.state().items():
                kind, _, key = name.partition("::")
                extra_tensors[f"{kind}::{i}::{key}"] = value
        extra = {
            "epochs_done": self.epochs_done,
            "steps": [opt.t for opt in self.optimizers],
            "train_config": asdict(self.train_config),
            "history": self.history,
        }
        save_model(self.model, path, dtype="<f8", extra=extra, extra_tensors=extra_tensors)

    @classmethod
    def from_state(cls, path, train_config: Optional[TrainConfig] = None) -> "Trainer":
        model, tensors, doc = load_model(path)
        extra = doc.get("extra") or {}
        if "epochs_done" not in extra:
            raise ConfigError(f"{path} is not a training-state checkpoint")
        train_config = train_config or TrainConfig(**extra["train_config"])
        trainer = cls.__new__(cls)
        trainer.train_config = train_config
        trainer.model = model
        trainer.optimizers = [make_optimizer(p, train_config) for p in model.params]
        for i, (opt, step) in enumerate(zip(trainer.optimizers, extra["steps"])):
            prefix = f"::{i}::"
            own = {}
            for name, value in tensors.items():
                kind, sep, rest = name.partition(prefix)
                if sep:
                    own[f"{kind}::{rest}"] = value
            opt.load_state(own, step)
        trainer.epochs_done = int(extra["epochs_done"])
        trainer.history = list(extra.get("history", []))
        return trainer


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          out_path=None, log_path=None, trainer: Optional[Trainer] = None) -> Trainer:
    """Run (or continue) training up to ``train_config.epochs`` epochs.

    Writes a float32 model checkpoint to ``out_path`` and appends one JSON
    line per epoch to ``log_path`` when given.
    """
    if not any(len(s) and s.labels for s in dataset.scenes):
        raise ConfigError("dataset has no labeled, non-empty scene")
    if model_config.M != dataset.M:
        model_config = replace(model_config, M=dataset.M)
    trainer = trainer or Trainer(model_config, train_config)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while trainer.epochs_done < train_config.epochs:
            record = trainer.run_epoch(dataset)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if out_path:
        save_model(trainer.model, out_path, extra={"history": trainer.history,
                                                    "train_config": asdict(train_config)})
        trainer.save_state(Path(out_path).with_name(Path(out_path).stem + ".state.json"))
    return trainer
