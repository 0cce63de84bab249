"""Multi-dataset joint-training sampler.

Each epoch repeats every dataset's annotations ``ratio`` times and shuffles
the result, so per-epoch occurrence counts are exact rather than expected
values. Epoch ``e`` is shuffled with seed ``seed + e``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import UnknownDataset
from .unified_data import Dataset, SegmentRecord, UnifiedAnnotation

# joint-training upsampling ratios of the full-scale run
DEFAULT_RATIOS = (
    ("COCO", 3),
    ("ADE20K", 30),
    ("LVIS", 3),
    ("Visual Genome", 9),
    ("Objects365", 1),
    ("referring", 6),
    ("syn-COCO", 3),
    ("syn-Objects365", 1),
    ("foreground", 9),
)


@dataclass(frozen=True)
class MixSpec:
    entries: tuple[tuple[str, int], ...]
    seed: int = 0

    def __post_init__(self):
        entries = tuple((str(d), int(r)) for d, r in self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [d for d, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate dataset ids in mix: {ids}")
        for d, r in entries:
            if r < 1:
                raise ValueError(f"ratio for {d!r} must be >= 1, got {r}")

    @classmethod
    def default(cls, seed: int = 0) -> "MixSpec":
        return cls(DEFAULT_RATIOS, seed)

    def ratio(self, dataset_id: str) -> int:
        return dict(self.entries)[dataset_id]

    def to_json(self) -> dict:
        return {"seed": self.seed, "entries": [{"dataset": d, "ratio": r} for d, r in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "MixSpec":
        return cls(tuple((e["dataset"], e["ratio"]) for e in obj["entries"]), int(obj.get("seed", 0)))

    @classmethod
    def load(cls, path) -> "MixSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


EpochPlan = tuple  # of (dataset_id, annotation index)


def _as_mapping(datasets) -> dict[str, Dataset]:
    if isinstance(datasets, Mapping):
        return dict(datasets)
    return {d.dataset_id: d for d in datasets}


def build_epoch_plan(datasets, spec: MixSpec, epoch: int = 0) -> EpochPlan:
    by_id = _as_mapping(datasets)
    items = []
    for dataset_id, ratio in spec.entries:
        if dataset_id not in by_id:
            raise UnknownDataset(f"mix refers to unknown dataset {dataset_id!r}")
        n = len(by_id[dataset_id])
        items.extend((dataset_id, i) for _ in range(ratio) for i in range(n))
    rng = np.random.default_rng(spec.seed + epoch)
    order = rng.permutation(len(items))
    return tuple(items[i] for i in order)


def draw_caption(record: SegmentRecord, rng: np.random.Generator) -> str:
    """Uniformly pick one synthetic caption, or fall back to the label."""
    if not record.caption_pool:
        return record.label_text
    return record.caption_pool[int(rng.integers(len(record.caption_pool)))]


def resolve_captions(ann: UnifiedAnnotation, rng: np.random.Generator) -> UnifiedAnnotation:
    if not any(r.caption_pool for r in ann.records):
        return ann
    records = tuple(
        replace(r, label_text=draw_caption(r, rng), caption_pool=None) if r.caption_pool else r for r in ann.records
    )
    return replace(ann, records=records)


class MixSampler:
    """Single-consumer batch stream over successive shuffled epochs."""

    def __init__(self, datasets, spec: MixSpec):
        self.datasets = _as_mapping(datasets)
        self.spec = spec
        self.epoch = 0
        self.cursor = 0
        self.plan = build_epoch_plan(self.datasets, spec, 0)
        if not self.plan:
            raise ValueError("training mix is empty")
        self.rng = np.random.default_rng([spec.seed, 0x5EED])

    @property
    def epoch_length(self) -> int:
        return len(self.plan)

    def next_batch(self, batch_size: int) -> list[UnifiedAnnotation]:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        batch = []
        while len(batch) < batch_size:
            if self.cursor == len(self.plan):
                self.epoch += 1
                self.cursor = 0
                self.plan = build_epoch_plan(self.datasets, self.spec, self.epoch)
            dataset_id, idx = self.plan[self.cursor]
            self.cursor += 1
            batch.append(resolve_captions(self.datasets[dataset_id][idx], self.rng))
        return batch


def next_batch(plan: Sequence, cursor: int, batch_size: int, datasets, rng: np.random.Generator, spec: MixSpec | None = None, epoch: int = 0):
    """Functional form of :meth:`MixSampler.next_batch`.

    Returns ``(batch, plan, cursor, epoch)``; when the plan runs out and a
    ``spec`` is given, the next epoch's plan is built and consumption
    continues from its start.
    """
    by_id = _as_mapping(datasets)
    batch = []
    while len(batch) < batch_size:
        if cursor == len(plan):
            if spec is None:
                raise ValueError("plan exhausted and no MixSpec given to build the next epoch")
            epoch += 1
            plan, cursor = build_epoch_plan(by_id, spec, epoch), 0
        dataset_id, idx = plan[cursor]
        cursor += 1
        batch.append(resolve_captions(by_id[dataset_id][idx], rng))
    return batch, plan, cursor, epoch


def frequency_table(datasets, spec: MixSpec, n: int | None = None) -> list[dict]:
    """Per-dataset counts in one epoch and, optionally, in the first ``n`` draws."""
    by_id = _as_mapping(datasets)
    sampled = {d: 0 for d, _ in spec.entries}
    if n:
        plan, cursor, epoch = build_epoch_plan(by_id, spec), 0, 0
        for _ in range(n):
            if cursor == len(plan):
                epoch += 1
                plan, cursor = build_epoch_plan(by_id, spec, epoch), 0
            sampled[plan[cursor][0]] += 1
            cursor += 1
    epoch_counts = {d: 0 for d, _ in spec.entries}
    for d, _ in build_epoch_plan(by_id, spec):
        epoch_counts[d] += 1
    rows = []
    for d, r in spec.entries:
        size = len(by_id[d])
        rows.append(
            {
                "dataset": d,
                "ratio": r,
                "items": size,
                "per_epoch": epoch_counts[d],
                "per_item_per_epoch": epoch_counts[d] / size if size else 0.0,
                "sampled": sampled[d],
            }
        )
    return rows
