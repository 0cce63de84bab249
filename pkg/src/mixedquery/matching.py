"""Bipartite matching between ground truths and queries.

Four query strategies are supported:

``learnable``   all ground truths matched against the learnable queries only
``conditional`` all ground truths matched against the conditional queries only
``separated``   stuff -> learnable and thing -> conditional, solved independently
``mixed``       one global matching over the whole pool; thing/stuff tags are
                never consulted
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DimMismatch, Infeasible, MissingThingStuffTag
from .losses import (
    DecoderOutputs,
    LossWeights,
    Targets,
    cxcywh_to_xyxy,
    focal_negative,
    focal_positive,
    pairwise_giou,
    sigmoid,
)

LEARNABLE = "learnable"
CONDITIONAL = "conditional"


class QueryStrategy(str, Enum):
    LEARNABLE_ONLY = "learnable"
    CONDITIONAL_ONLY = "conditional"
    SEPARATED = "separated"
    MIXED = "mixed"


@dataclass(frozen=True)
class Provenance:
    """Origin tag of every query, in query-index order."""

    tags: tuple[str, ...]

    def __post_init__(self):
        bad = set(self.tags) - {LEARNABLE, CONDITIONAL}
        if bad:
            raise ValueError(f"unknown provenance tags {sorted(bad)}")

    @classmethod
    def from_counts(cls, n_learnable: int, n_conditional: int) -> "Provenance":
        return cls((LEARNABLE,) * n_learnable + (CONDITIONAL,) * n_conditional)

    @classmethod
    def all_learnable(cls, n: int) -> "Provenance":
        return cls((LEARNABLE,) * n)

    def __len__(self) -> int:
        return len(self.tags)

    def indices(self, tag: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=int)


@dataclass(frozen=True)
class Assignment:
    """Injective map from ground-truth index to query index."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for g, _ in self.pairs], dtype=int)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for _, q in self.pairs], dtype=int)

    def __len__(self) -> int:
        return len(self.pairs)


def hungarian(costs) -> Assignment:
    """Exact minimum-cost assignment of every row to a distinct column.

    Shortest-augmenting-path Kuhn-Munkres with row/column potentials,
    O(G^2 Q) for a G x Q matrix. Rows are inserted in index order and the
    lowest column index wins any tie in the path search, so the result is
    deterministic.
    """
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2:
        raise DimMismatch(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n == 0:
        return Assignment((), 0.0)
    if n > m:
        raise Infeasible(f"{n} ground truths cannot be matched to {m} queries")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of = np.zeros(m + 1, dtype=int)  # column j -> 1-based row, 0 = free
    way = np.zeros(m + 1, dtype=int)
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = c
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1

    pairs = sorted((int(row_of[j]) - 1, j - 1) for j in range(1, m + 1) if row_of[j])
    total = float(sum(c[g, q] for g, q in pairs))
    return Assignment(tuple(pairs), total)


def build_cost_matrix(targets: Targets, outputs: DecoderOutputs, weights: LossWeights = LossWeights()) -> np.ndarray:
    """G x Q matching cost mirroring the three loss terms."""
    if outputs.class_embeds.shape[1] != targets.text_bank.shape[1]:
        raise DimMismatch(
            f"class embeds have dim {outputs.class_embeds.shape[1]}, text bank {targets.text_bank.shape[1]}"
        )
    g_count = targets.num_gt
    q_count = outputs.num_queries
    if g_count == 0:
        return np.zeros((0, q_count))
    gt_text = targets.text_bank[targets.text_index]  # G x d
    z = gt_text @ outputs.class_embeds.T  # G x Q
    pos, _ = focal_positive(z, weights.alpha, weights.gamma)
    neg, _ = focal_negative(z, weights.alpha, weights.gamma)
    cost_cls = pos - neg

    cost_l1 = np.abs(targets.boxes[:, None, :] - outputs.boxes[None, :, :]).sum(-1)
    cost_giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(targets.boxes), cxcywh_to_xyxy(outputs.boxes))

    p = sigmoid(outputs.mask_logits()) * targets.valid  # Q x P
    g = targets.masks * targets.valid  # G x P
    num = 2.0 * g @ p.T + weights.eps
    den = g.sum(1)[:, None] + p.sum(1)[None, :] + weights.eps
    cost_dice = 1.0 - num / den

    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou + weights.dice * cost_dice


def _solve_subset(costs: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> list[tuple[int, int]]:
    if rows.size == 0:
        return []
    if rows.size > cols.size:
        raise Infeasible(f"{rows.size} ground truths cannot be matched to {cols.size} queries")
    sub = hungarian(costs[np.ix_(rows, cols)])
    return [(int(rows[g]), int(cols[q])) for g, q in sub.pairs]


def match_costs(costs, strategy, provenance: Provenance, thing_stuff: Sequence[str] | None = None) -> Assignment:
    """Apply ``strategy`` to a precomputed G x Q cost matrix."""
    costs = np.asarray(costs, dtype=float)
    strategy = QueryStrategy(strategy)
    n_gt, n_q = costs.shape
    if len(provenance) != n_q:
        raise DimMismatch(f"provenance covers {len(provenance)} queries, cost matrix has {n_q}")
    all_rows = np.arange(n_gt)
    if strategy is QueryStrategy.MIXED:
        return hungarian(costs)
    if strategy is QueryStrategy.LEARNABLE_ONLY:
        pairs = _solve_subset(costs, all_rows, provenance.indices(LEARNABLE))
    elif strategy is QueryStrategy.CONDITIONAL_ONLY:
        pairs = _solve_subset(costs, all_rows, provenance.indices(CONDITIONAL))
    else:
        tags = list(thing_stuff) if thing_stuff is not None else ["unknown"] * n_gt
        missing = [i for i, t in enumerate(tags) if t not in ("thing", "stuff")]
        if missing:
            raise MissingThingStuffTag(
                f"separated matching needs thing/stuff tags; ground truth {missing[0]} is {tags[missing[0]]!r}"
            )
        stuff = np.array([i for i, t in enumerate(tags) if t == "stuff"], dtype=int)
        thing = np.array([i for i, t in enumerate(tags) if t == "thing"], dtype=int)
        pairs = _solve_subset(costs, stuff, provenance.indices(LEARNABLE))
        pairs += _solve_subset(costs, thing, provenance.indices(CONDITIONAL))
    pairs.sort()
    return Assignment(tuple(pairs), float(sum(costs[g, q] for g, q in pairs)))


def match_with_strategy(targets: Targets, outputs: DecoderOutputs, strategy, provenance: Provenance, weights: LossWeights = LossWeights()) -> Assignment:
    costs = build_cost_matrix(targets, outputs, weights)
    strategy = QueryStrategy(strategy)
    tags = None if strategy is QueryStrategy.MIXED else targets.thing_stuff
    return match_costs(costs, strategy, provenance, tags)


@dataclass(frozen=True)
class SelectionStats:
    thing_to_conditional: float | None
    stuff_to_learnable: float | None
    n_thing: int
    n_stuff: int

    def to_json(self) -> dict:
        return {
            "thing_to_conditional_ratio": self.thing_to_conditional,
            "stuff_to_learnable_ratio": self.stuff_to_learnable,
            "matched_thing": self.n_thing,
            "matched_stuff": self.n_stuff,
        }


def selection_stats(assignments: Iterable[Assignment], gt_tags: Iterable[Sequence[str]], provenance: Provenance) -> SelectionStats:
    """Share of matched thing GTs served by conditional queries, and of stuff GTs by learnable ones.

    ``gt_tags`` holds, per image, the thing/stuff tag of each ground truth
    (or the records themselves). Unknown-tagged ground truths are left out;
    a ratio with an empty denominator is ``None``.
    """
    thing = thing_cond = stuff = stuff_learn = 0
    for assignment, tags in zip(assignments, gt_tags):
        tags = [getattr(t, "thing_stuff", t) for t in tags]
        for g, q in assignment.pairs:
            origin = provenance.tags[q]
            if tags[g] == "thing":
                thing += 1
                thing_cond += origin == CONDITIONAL
            elif tags[g] == "stuff":
                stuff += 1
                stuff_learn += origin == LEARNABLE
    return SelectionStats(
        thing_cond / thing if thing else None,
        stuff_learn / stuff if stuff else None,
        thing,
        stuff,
    )
