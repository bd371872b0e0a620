"""AdamW training with gradient accumulation, evaluation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .damage_map import aggregate
from .encoders import ModelConfig
from .ffss import TASK_CLASSES, FloodDamageModel
from .geo import Footprint
from .losses import LossConfig, class_weights, composite_loss
from .metrics import building_level_metrics, metric_families
from .tensor import Tensor

log = logging.getLogger(__name__)

PIXEL_EXCLUDE = {"bda": (0,), "fm": (), "loc": ()}


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-3
    epochs: int = 30
    batch_size: int = 2
    accumulation_steps: int = 8
    seed: int = 0
    wiring: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None
    augment: bool = False
    use_class_weights: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.accumulation_steps < 1 or self.epochs < 0:
            raise ValueError("batch_size and accumulation_steps must be >= 1")
        if self.wiring not in range(5):
            raise ValueError(f"wiring must be 0..4, got {self.wiring}")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation_steps

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("loss", "model")}
        d["betas"] = list(self.betas)
        d["loss"] = self.loss.to_json()
        d["model"] = {**asdict(self.model), "dims": list(self.model.dims), "depths": list(self.model.depths)}
        return d

    @classmethod
    def from_json(cls, obj: dict) -> TrainConfig:
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        loss = LossConfig.from_json(obj.pop("loss", {}))
        model = ModelConfig(**obj.pop("model", {}))
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(loss=loss, model=model, **obj)


class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr=1e-4, weight_decay=5e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data * (1.0 - self.lr * self.wd) - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sample_labels(sample, tasks) -> dict:
    return {t: sample.labels[t] for t in tasks if t in sample.labels}


def sample_loss(model: FloodDamageModel, sample, loss_cfg: LossConfig):
    out = model.forward_full(sample.bundle())
    return composite_loss(out, sample_labels(sample, out), loss_cfg)


def accumulate_gradients(model, micro_batches: list[list], loss_cfg: LossConfig) -> list[float]:
    """Backpropagate ``mean over micro-batches of mean over samples``; returns per-sample losses."""
    losses = []
    n_micro = len(micro_batches)
    for micro in micro_batches:
        scale = 1.0 / (len(micro) * n_micro)
        for sample in micro:
            total, _ = sample_loss(model, sample, loss_cfg)
            value = total.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss on chip {sample.chip_id}")
            losses.append(value)
            if total.requires_grad:
                (total * scale).backward()
    return losses


def train_step(model, opt: AdamW, micro_batches: list[list], loss_cfg: LossConfig) -> float:
    model.zero_grad()
    losses = accumulate_gradients(model, micro_batches, loss_cfg)
    opt.step()
    return float(np.mean(losses))


def dataset_class_weights(samples, building_classes=None) -> dict[str, list[float]]:
    """Inverse-frequency weights: BDA from building counts when given, other tasks from pixel counts."""
    out = {}
    for task, K in TASK_CLASSES.items():
        if task == "bda" and building_classes is not None:
            counts = np.bincount(np.asarray(list(building_classes), dtype=np.int64), minlength=K)[:K]
        else:
            counts = np.zeros(K)
            for s in samples:
                lab = s.labels.get(task)
                if lab is not None:
                    counts += np.bincount(lab[lab != 255].ravel(), minlength=K)[:K]
        if counts.sum() > 0:
            out[task] = class_weights(counts).tolist()
    return out


def make_optimizer(model, cfg: TrainConfig) -> AdamW:
    return AdamW(model.parameters(), cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)


def train(model, samples: list, cfg: TrainConfig, trace_path=None, on_step=None) -> list[float]:
    """Run ``cfg.epochs`` epochs (or ``cfg.max_steps`` optimizer steps); returns the loss trace."""
    from .data import augment as augment_sample

    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model, cfg)
    trace: list[float] = []
    rows = []
    step = 0
    eff = cfg.effective_batch
    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), eff):
            chunk = [samples[i] for i in order[start:start + eff]]
            if cfg.augment:
                chunk = [augment_sample(s, rng) for s in chunk]
            micro = [chunk[i:i + cfg.batch_size] for i in range(0, len(chunk), cfg.batch_size)]
            loss = train_step(model, opt, micro, cfg.loss)
            trace.append(loss)
            rows.append((epoch, step, loss))
            log.info("epoch %d step %d loss %.6f", epoch, step, loss)
            if on_step is not None:
                on_step(step, loss)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "loss"])
            for e, s, v in rows:
                w.writerow([e, s, repr(v)])
    return trace


def predict(model, sample) -> dict[str, np.ndarray]:
    """Per-task class rasters (uint8) from the argmax of the logits."""
    with T.no_grad():
        out = model.forward_full(sample.bundle())
    return {t: np.argmax(v.data, axis=-1).astype(np.uint8) for t, v in out.items()}


def mean_loss(model, samples, loss_cfg: LossConfig) -> float:
    with T.no_grad():
        return float(np.mean([sample_loss(model, s, loss_cfg)[0].item() for s in samples]))


def _chip_footprints(footprints: list[Footprint], grid) -> list[Footprint]:
    x0, y0, x1, y1 = grid.bounds
    out = []
    for fp in footprints:
        cx, cy = fp.centroid
        if x0 <= cx < x1 and y0 < cy <= y1:
            out.append(fp)
    return out


def evaluate(model, samples, footprints=None, gt_classes: dict | None = None, stat: str = "median",
             loss_cfg: LossConfig | None = None) -> dict:
    """Pixel-level metrics per task, plus building-level BDA metrics when footprints are given."""
    preds = [predict(model, s) for s in samples]
    report: dict = {"n_samples": len(samples), "pixel": {}}
    for task in sorted(preds[0]) if preds else []:
        gt = np.concatenate([s.labels[task].ravel() for s in samples])
        pr = np.concatenate([p[task].ravel() for p in preds])
        report["pixel"][task] = metric_families(gt, pr, TASK_CLASSES[task], PIXEL_EXCLUDE[task])
    if loss_cfg is not None:
        report["loss"] = mean_loss(model, samples, loss_cfg)
    if footprints is not None and gt_classes is not None and preds and "bda" in preds[0]:
        records = []
        for s, p in zip(samples, preds):
            if s.grid is None:
                continue
            fps = _chip_footprints(footprints, s.grid)
            if fps:
                records.extend(aggregate(p["bda"], s.grid, fps, stat))
        report["building"] = building_level_metrics(records, gt_classes, 4)
        report["building"]["stat"] = stat
    return report


def save_checkpoint(model, path) -> None:
    T.save_params(path, model.named_parameters())


def load_checkpoint(model, path) -> None:
    model.load_state_dict(T.load_params(path))


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
