"""Seeded training loop, AdamW and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..datamix import MixSampler, MixSpec
from ..errors import NonFiniteLoss
from ..losses import LossWeights, loss_for_assignment, prepare_targets
from ..matching import QueryStrategy, match_with_strategy
from .model import ModelConfig, ToyModel, init_params, zeros_like_params
from .synthetic import synthesize_image

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 0.05
    warmup_iterations: int = 10
    lr_decay_points: tuple[float, ...] = (0.9, 0.95)
    lr_decay_factor: float = 10.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_points", tuple(float(p) for p in self.lr_decay_points))
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and non-negative")
        pts = self.lr_decay_points
        if any(not 0 < p < 1 for p in pts) or any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError(f"decay points must be strictly increasing in (0, 1), got {pts}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lr_decay_points"] = list(self.lr_decay_points)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


def learning_rate_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup, then divide by ``lr_decay_factor`` at each decay point."""
    lr = cfg.learning_rate
    if step < cfg.warmup_iterations:
        lr *= (step + 1) / cfg.warmup_iterations
    for p in cfg.lr_decay_points:
        if step >= p * total_steps:
            lr /= cfg.lr_decay_factor
    return lr


class AdamW:
    """Adam with decoupled weight decay, state kept per parameter name."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            params[name] *= 1.0 - lr * self.weight_decay
            params[name] -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def vocabulary_of(datasets) -> tuple[str, ...]:
    labels = set()
    for ds in datasets:
        for ann in ds.annotations:
            labels.update(r.label_text for r in ann.records)
    return tuple(sorted(labels))


class ImageCache:
    """Pseudo-images keyed by (dataset, image id), synthesized once."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self._store: dict[tuple[str, str], np.ndarray] = {}

    def __call__(self, ann) -> np.ndarray:
        key = (ann.dataset_id, ann.image_id)
        if key not in self._store:
            self._store[key] = synthesize_image(ann.image_id, ann, self.cfg.grid, self.cfg.in_channels)
        return self._store[key]


def image_loss(model: ToyModel, params, image, targets, strategy, weights: LossWeights, selected=None, assignment=None):
    """Loss and parameter gradients for one image.

    ``selected`` / ``assignment`` pin the top-k locations and the matching.
    """
    out, cache = model.forward(image, params, selected)
    if assignment is None:
        assignment = match_with_strategy(targets, out, strategy, model.provenance, weights)
    br = loss_for_assignment(out, targets, assignment, weights)
    grads = model.backward(cache, params, br.grad_class_embeds, br.grad_boxes, br.grad_mask_embeds, br.grad_pixel_features)
    return br, grads, cache


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    loss_trace: list[float]
    vocabulary: tuple[str, ...]
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    strategy: str
    components: list[dict] = field(default_factory=list)


def train(
    datasets,
    cfg: TrainConfig = TrainConfig(),
    strategy="mixed",
    model_cfg: ModelConfig = ModelConfig(),
    weights: LossWeights = LossWeights(),
    mix: MixSpec | None = None,
    vocabulary=None,
) -> TrainResult:
    """Train the toy model on a mix of datasets.

    Deterministic for fixed inputs: parameters are seeded from ``cfg.seed``
    and batches come from a :class:`MixSampler` with the same seed.
    """
    datasets = list(datasets)
    strategy = QueryStrategy(strategy).value
    if mix is None:
        mix = MixSpec(tuple((d.dataset_id, 1) for d in datasets), cfg.seed)
    vocab = tuple(vocabulary) if vocabulary is not None else vocabulary_of(datasets)
    model = ToyModel(model_cfg)
    params = init_params(model_cfg, cfg.seed)
    sampler = MixSampler(datasets, mix)
    images = ImageCache(model_cfg)
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * math.ceil(sampler.epoch_length / cfg.batch_size)
    trace: list[float] = []
    components: list[dict] = []
    for step in range(total):
        batch = sampler.next_batch(cfg.batch_size)
        acc = zeros_like_params(params)
        loss = 0.0
        parts = {"class": 0.0, "l1": 0.0, "giou": 0.0, "dice": 0.0}
        for ann in batch:
            targets = prepare_targets(ann, model_cfg.grid, vocab, model_cfg.d_text)
            br, grads, _ = image_loss(model, params, images(ann), targets, strategy, weights)
            loss += br.total
            parts["class"] += br.class_loss
            parts["l1"] += br.l1_loss
            parts["giou"] += br.giou_loss
            parts["dice"] += br.mask_loss
            for k in acc:
                acc[k] += grads[k]
        n = len(batch)
        loss /= n
        if not math.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        for k in acc:
            acc[k] /= n
        opt.step(params, acc, learning_rate_at(step, total, cfg))
        trace.append(loss)
        components.append({k: v / n for k, v in parts.items()})
        if step % 200 == 0:
            log.info("step %d loss %.5f", step, loss)
    return TrainResult(params, trace, vocab, model_cfg, cfg, strategy, components)


def save_checkpoint(path, result: TrainResult) -> None:
    """JSON checkpoint: every parameter as shape + flat float list."""
    obj = {
        "version": CHECKPOINT_VERSION,
        "strategy": result.strategy,
        "model": result.model_cfg.to_json(),
        "train": result.train_cfg.to_json(),
        "vocabulary": list(result.vocabulary),
        "params": {
            name: {"shape": list(v.shape), "data": v.ravel().tolist()} for name, v in result.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(params, model_cfg, vocabulary, metadata)``."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
    params = {
        name: np.array(p["data"], dtype=float).reshape(p["shape"]) for name, p in obj["params"].items()
    }
    return params, ModelConfig.from_json(obj["model"]), tuple(obj["vocabulary"]), obj
