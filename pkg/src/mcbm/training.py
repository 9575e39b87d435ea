"""Mini-batch training loop, deterministic evaluation and checkpoint IO."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import diffcore as dc
from .diffcore import checkpoint as ckpt
from .models import Batch, ModelBundle, ModelConfigError, concept_outputs, encode, loss_total, predict, task_logits


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch_index: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    step_size: int = 20
    decay: float = 0.1
    beta: float | None = None  # None keeps the model's value
    gamma: float | None = None
    master_seed: int = 0
    eval_every: int = 1
    n_reparam: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ModelConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ModelConfigError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ModelConfigError("eval_every must be >= 1")
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ModelConfigError(f"{name} must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ModelConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ModelConfigError(f"unknown train keys: {sorted(extra)}")
        return cls(**d)


HISTORY_FIELDS = (
    "epoch", "stage", "lr", "loss_total", "loss_task", "loss_concept", "loss_kl",
    "train_task_accuracy", "val_task_accuracy", "train_concept_accuracy", "val_concept_accuracy",
)


@dataclass
class TrainHistory:
    records: list[dict[str, Any]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: _csv_value(r.get(k)) for k in HISTORY_FIELDS})
        return path


def _csv_value(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return "" if v is None else v


def apply_loss_weights(model: ModelBundle, config: TrainConfig) -> None:
    if config.beta is not None and model.variant != "VM":
        model.beta = float(config.beta)
    if config.gamma is not None:
        if config.gamma > 0 and model.variant != "MCBM":
            raise ModelConfigError(f"{model.variant} has no representation term; gamma must be 0")
        if config.gamma > 0 and model.sigma_x == 0:
            raise ModelConfigError("gamma > 0 needs sigma_x > 0")
        model.gamma = float(config.gamma)


def _stages(model: ModelBundle, epochs: int) -> list[tuple[str | None, int, tuple[str, ...] | None]]:
    if model.variant != "HCBM":
        return [(None, epochs, None)]
    # HCBM: concept stage then task stage on frozen, binarised predictions
    first = math.ceil(epochs / 2)
    stages = [("concepts", first, ("encoder", "concept_head"))]
    if epochs - first > 0:
        stages.append(("task", epochs - first, ("task_head",)))
    return stages


def train(
    model: ModelBundle,
    train_split,
    config: TrainConfig,
    val_split=None,
) -> tuple[ModelBundle, TrainHistory]:
    """Shuffled mini-batch descent on ``loss_total``; mutates and returns ``model``."""
    if train_split.x.shape[1] != model.input_dim:
        raise ModelConfigError(f"dataset has {train_split.x.shape[1]} features, model expects {model.input_dim}")
    if len(train_split) == 0:
        raise ValueError("empty training split")
    apply_loss_weights(model, config)
    streams = dc.RngStreams(config.master_seed)
    shuffle_rng = streams["train/shuffle"]
    noise_rng = streams["train/reparam"]
    sched = dc.StepScheduler(config.step_size, config.decay)
    history = TrainHistory()
    n = len(train_split)
    epoch = 0
    for stage, n_epochs, groups in _stages(model, config.epochs):
        params = list(model.parameters(groups).values())
        opt = dc.OptimizerState(
            kind=config.optimizer,
            learning_rate=config.learning_rate,
            momentum=config.momentum if config.optimizer == "sgd" else 0.0,
            weight_decay=config.weight_decay,
        )
        for stage_epoch in range(n_epochs):
            epoch += 1
            lr = sched.lr(config.learning_rate, stage_epoch)
            opt.learning_rate = lr
            order = shuffle_rng.permutation(n)
            sums = {"total": 0.0, "task": 0.0, "concept": 0.0, "kl": 0.0}
            n_batches = 0
            for b, start in enumerate(range(0, n, config.batch_size)):
                batch = Batch.from_dataset(train_split, order[start : start + config.batch_size])
                dc.zero_grad(params)
                parts = loss_total(model, batch, noise_rng, stage=stage, n_samples=config.n_reparam)
                value = float(parts.total.data)
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, b, value)
                parts.total.backward()
                opt.step(params)
                sums["total"] += value
                sums["task"] += float(parts.task.data)
                sums["concept"] += sum(float(t.data) for t in parts.concept)
                sums["kl"] += sum(float(t.data) for t in parts.kl)
                n_batches += 1
            rec: dict[str, Any] = {"epoch": epoch, "stage": stage or "joint", "lr": lr}
            rec.update({f"loss_{k}": v / n_batches for k, v in sums.items()})
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                tr = evaluate(model, train_split, with_losses=False)
                rec["train_task_accuracy"] = tr["task_accuracy"]
                rec["train_concept_accuracy"] = tr["mean_concept_accuracy"]
                if val_split is not None:
                    va = evaluate(model, val_split, with_losses=False)
                    rec["val_task_accuracy"] = va["task_accuracy"]
                    rec["val_concept_accuracy"] = va["mean_concept_accuracy"]
            history.records.append(rec)
    return model, history


def representation(model: ModelBundle, x) -> np.ndarray:
    """Deterministic latent (mu) for a batch, as a plain array."""
    with dc.no_grad():
        mu, _ = encode(model, np.asarray(x, dtype=np.float64))
    return mu.data


def concept_accuracies(model: ModelBundle, mu: np.ndarray, concepts) -> dict[str, Any]:
    """Accuracy per discrete concept block; MSE and R^2 for continuous blocks.

    Blocks obtained by thresholding a continuous concept (HCBM) report their
    sign accuracy under ``continuous_concepts`` and are left out of the mean,
    like the continuous blocks of the other variants.
    """
    with dc.no_grad():
        outs = concept_outputs(model, dc.Tensor(mu))
    targets = model.concept_targets(concepts)
    acc: list[float | None] = []
    cont: dict[int, dict[str, float]] = {}
    for j, (spec, out, t) in enumerate(zip(model.concept_specs, outs, targets)):
        if spec.kind == "binary" and spec.threshold is not None:
            acc.append(None)
            cont[j] = {"sign_accuracy": float(np.mean((out.data[:, 0] >= 0.5) == (t == 1)))}
        elif spec.kind == "binary":
            acc.append(float(np.mean((out.data[:, 0] >= 0.5) == (t == 1))))
        elif spec.kind == "multiclass":
            acc.append(float(np.mean(out.data.argmax(axis=1) == t)))
        else:
            acc.append(None)
            err = out.data[:, 0] - t
            var = float(np.var(t))
            mse = float(np.mean(err**2))
            cont[j] = {"mse": mse, "r2": 1.0 - mse / var if var > 0 else float("nan")}
    discrete = [a for a in acc if a is not None]
    return {
        "concept_accuracy": acc,
        "mean_concept_accuracy": float(np.mean(discrete)) if discrete else None,
        "continuous_concepts": cont,
    }


def evaluate(model: ModelBundle, split, with_losses: bool = True) -> dict[str, Any]:
    """Accuracies and loss components from deterministic passes (z = mu)."""
    if len(split) == 0:
        raise ValueError("empty split")
    with dc.no_grad():
        mu, _ = encode(model, split.x)
        pred = predict(model, task_logits(model, mu))
    out: dict[str, Any] = {}
    if model.task_kind == "continuous":
        out["task_mse"] = float(np.mean((pred.reshape(len(split), -1) - split.y.reshape(len(split), -1)) ** 2))
        out["task_accuracy"] = None
    else:
        out["task_accuracy"] = float(np.mean(pred == split.y))
    if model.concept_specs:
        out.update(concept_accuracies(model, mu.data, split.concepts))
    else:
        out.update({"concept_accuracy": [], "mean_concept_accuracy": None, "continuous_concepts": {}})
    if with_losses:
        with dc.no_grad():
            parts = loss_total(model, Batch.from_dataset(split), None)
        out["losses"] = parts.as_floats()
    return out


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(
    model: ModelBundle,
    history: TrainHistory | None,
    path: str | Path,
    master_seed: int = 0,
    extras: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    doc = {
        "model": model.descriptor(),
        "state": ckpt.dump_state(model.parameters(), master_seed),
        "history": history.records if history is not None else [],
        "extras": extras or {},
    }
    try:
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    except OSError as e:
        raise ckpt.CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(
    path: str | Path, expected_variant: str | None = None
) -> tuple[ModelBundle, TrainHistory, dict[str, Any]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ckpt.CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(doc, dict) or not {"model", "state"} <= set(doc):
        raise ckpt.CheckpointError(f"{path}: not a model checkpoint")
    values, _, _ = ckpt.load_state(doc["state"])
    desc = doc["model"]
    if expected_variant is not None and desc.get("variant") != expected_variant:
        raise ckpt.CheckpointError(
            f"{path}: checkpoint holds a {desc.get('variant')} model, expected {expected_variant}"
        )
    try:
        model = ModelBundle.from_descriptor(desc)
    except (KeyError, TypeError) as e:
        raise ckpt.CheckpointError(f"{path}: corrupt model descriptor ({e})") from e
    params = model.parameters()
    if set(params) != set(values):
        raise ckpt.CheckpointError(f"{path}: parameter names do not match the descriptor")
    for name, p in params.items():
        if values[name].shape != p.data.shape:
            raise ckpt.CheckpointError(f"{path}: shape mismatch for {name}")
        p.data = values[name].copy()
    return model, TrainHistory(list(doc.get("history", []))), dict(doc.get("extras", {}))


__all__ = [
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "train",
    "evaluate",
    "representation",
    "concept_accuracies",
    "save_checkpoint",
    "load_checkpoint",
    "apply_loss_weights",
]
