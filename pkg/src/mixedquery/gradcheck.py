"""Random small instances for finite-difference gradient checks.

Two levels are checked: the loss with respect to decoder outputs, and the
whole toy model with respect to every parameter group. Matching and top-k
selection are piecewise constant, so they are computed once at the base
point and held fixed while perturbing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import DecoderOutputs, LossWeights, Targets, grad_check, loss_for_assignment, prepare_targets
from .maskops import rle_encode
from .matching import Provenance, match_with_strategy
from .toymodel.model import ModelConfig, ToyModel, init_params
from .toymodel.synthetic import synthesize_image
from .toymodel.train import image_loss
from .unified_data import from_instance

SMALL_MODEL = ModelConfig(
    grid=(4, 4), in_channels=4, pos_freqs=1, d_model=8, d_text=8, d_mask=8, n_learnable=4, n_conditional=4, init_scale=0.5
)


@dataclass
class CheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ""


def _random_unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_loss_instance(rng: np.random.Generator, n_queries=8, n_gt=3, grid=8, d_text=8, d_mask=8, n_texts=5):
    """Decoder outputs and targets with every logit kept inside (-8, 8)."""
    centers = rng.uniform(0.25, 0.75, size=(n_queries, 2))
    sizes = rng.uniform(0.1, 0.5, size=(n_queries, 2))
    outputs = DecoderOutputs(
        rng.normal(0.0, 0.8, size=(n_queries, d_text)),
        np.concatenate([centers, sizes], axis=1),
        rng.normal(0.0, 0.4, size=(n_queries, d_mask)),
        rng.normal(0.0, 0.4, size=(d_mask, grid, grid)),
    )
    gt_centers = rng.uniform(0.25, 0.75, size=(n_gt, 2))
    gt_sizes = rng.uniform(0.1, 0.5, size=(n_gt, 2))
    targets = Targets(
        _random_unit(rng, n_texts, d_text),
        tuple(f"t{i}" for i in range(n_texts)),
        rng.integers(0, n_texts, size=n_gt),
        np.concatenate([gt_centers, gt_sizes], axis=1),
        (rng.random((n_gt, grid * grid)) < 0.4).astype(float),
        np.ones(grid * grid),
        tuple(rng.choice(["thing", "stuff"], size=n_gt)),
    )
    return outputs, targets


def check_loss_gradients(rng: np.random.Generator, weights: LossWeights = LossWeights(), step=1e-5, tolerance=1e-4, **kw) -> CheckResult:
    """Check every coordinate of every decoder output on one random instance."""
    outputs, targets = random_loss_instance(rng, **kw)
    prov = Provenance.from_counts(outputs.num_queries // 2, outputs.num_queries - outputs.num_queries // 2)
    assignment = match_with_strategy(targets, outputs, "mixed", prov, weights)
    base = loss_for_assignment(outputs, targets, assignment, weights)
    fields = {
        "class_embeds": base.grad_class_embeds,
        "boxes": base.grad_boxes,
        "mask_embeds": base.grad_mask_embeds,
        "pixel_features": base.grad_pixel_features,
    }
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name, analytic in fields.items():
        original = getattr(outputs, name)

        def f(x, name=name):
            setattr(outputs, name, x)
            return loss_for_assignment(outputs, targets, assignment, weights).total

        rep = grad_check(f, original, analytic, step, tolerance)
        setattr(outputs, name, original)
        checked += rep.checked
        skipped += len(rep.skipped)
        if rep.max_rel_error >= worst:
            worst, worst_name = rep.max_rel_error, name
    return CheckResult(worst, checked, skipped, worst_name)


def random_annotation(rng: np.random.Generator, size=8, n_gt=3):
    instances = []
    for _ in range(n_gt):
        r0, c0 = rng.integers(0, size - 2, size=2)
        r1 = int(rng.integers(r0 + 1, size))
        c1 = int(rng.integers(c0 + 1, size))
        m = np.zeros((size, size), dtype=bool)
        m[r0 : r1 + 1, c0 : c1 + 1] = True
        instances.append((str(rng.choice(["cat", "dog", "sky", "road"])), rle_encode(m), str(rng.choice(["thing", "stuff"]))))
    return from_instance((size, size), instances, image_id=f"rand-{rng.integers(1 << 30)}")


def check_model_gradients(
    rng: np.random.Generator,
    cfg: ModelConfig = SMALL_MODEL,
    weights: LossWeights = LossWeights(),
    coords_per_group: int | None = 8,
    step=1e-5,
    tolerance=1e-4,
) -> CheckResult:
    """End-to-end check of the toy model on one random image.

    ``coords_per_group`` random coordinates are checked in every parameter
    group (all of them when ``None``).
    """
    model = ToyModel(cfg)
    params = init_params(cfg, int(rng.integers(1 << 31)))
    ann = random_annotation(rng)
    image = synthesize_image(ann.image_id, ann, cfg.grid, cfg.in_channels)
    targets = prepare_targets(ann, cfg.grid, ("cat", "dog", "sky", "road"), cfg.d_text)
    br, grads, cache = image_loss(model, params, image, targets, "mixed", weights)
    selected, assignment = cache["idx"], br.assignment
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name in params:
        original = params[name]

        def f(x, name=name):
            params[name] = x
            total = image_loss(model, params, image, targets, "mixed", weights, selected, assignment)[0].total
            params[name] = original
            return total

        n = original.size
        idx = None
        if coords_per_group is not None and n > coords_per_group:
            idx = rng.choice(n, size=coords_per_group, replace=False)
        rep = grad_check(f, original, grads[name], step, tolerance, indices=idx)
        checked += rep.checked
        skipped += len(rep.skipped)
        if rep.max_rel_error >= worst:
            worst, worst_name = rep.max_rel_error, name
    return CheckResult(worst, checked, skipped, worst_name)
