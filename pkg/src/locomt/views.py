"""Modality layouts, per-head attention views, layer plans, and allocation strategies.

A view restricts which keys a head's queries may attend to: either
self-attention within each modality, or cross-attention between one ordered
pair of modalities. Modalities are indexed 0-based in code; human-facing text
(CLI tables, mask captions) prints them 1-based.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import Rng

__all__ = [
    "ModalityLayout",
    "AttentionView",
    "SELF_VIEW",
    "cross_view",
    "ViewAssignment",
    "LayerPlan",
    "enumerate_views",
    "allowed_keys",
    "mask_grid",
    "mask_true_count",
    "make_strategy",
    "strategy_self_counts",
    "STRATEGY_KINDS",
]

STRATEGY_KINDS = ("spread", "bottleneck", "alternating", "random")


@dataclass(frozen=True)
class ModalityLayout:
    """Token counts per modality and their offsets in the packed sequence."""

    lengths: tuple[int, ...]

    def __post_init__(self):
        if len(self.lengths) < 1:
            raise ValueError("layout needs at least one modality")
        if any(length < 1 for length in self.lengths):
            raise ValueError(f"every modality length must be >= 1, got {self.lengths}")
        object.__setattr__(self, "lengths", tuple(int(length) for length in self.lengths))

    @property
    def m(self) -> int:
        return len(self.lengths)

    @property
    def offsets(self) -> tuple[int, ...]:
        out = [0]
        for length in self.lengths:
            out.append(out[-1] + length)
        return tuple(out)

    @property
    def total(self) -> int:
        return sum(self.lengths)

    def block(self, modality: int) -> range:
        off = self.offsets
        return range(off[modality], off[modality + 1])

    def modality_of(self, q: int) -> int:
        if not 0 <= q < self.total:
            raise IndexError(f"query index {q} out of range for total {self.total}")
        return bisect.bisect_right(self.offsets, q) - 1


@dataclass(frozen=True)
class AttentionView:
    """Self-attention (pair is None) or cross-attention between modality pair (i, j), i < j."""

    pair: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.pair is not None:
            i, j = self.pair
            if not (0 <= i < j):
                raise ValueError(f"cross view pair must satisfy 0 <= i < j, got {self.pair}")
            object.__setattr__(self, "pair", (int(i), int(j)))

    def __lt__(self, other: "AttentionView") -> bool:
        # self-view sorts before every cross view; cross views by pair order
        if self.pair is None:
            return other.pair is not None
        if other.pair is None:
            return False
        return self.pair < other.pair

    @property
    def is_self(self) -> bool:
        return self.pair is None

    def label(self) -> str:
        if self.pair is None:
            return "self"
        i, j = self.pair
        return f"cross({i + 1},{j + 1})"


SELF_VIEW = AttentionView()


def cross_view(i: int, j: int) -> AttentionView:
    return AttentionView(pair=(i, j))


def enumerate_views(m: int) -> list[AttentionView]:
    """The full view set for m modalities: self first, then pairs in lexicographic order."""
    if m < 1:
        raise ValueError(f"modality count must be >= 1, got {m}")
    views = [SELF_VIEW]
    for i in range(m):
        for j in range(i + 1, m):
            views.append(cross_view(i, j))
    return views


def allowed_keys(view: AttentionView, layout: ModalityLayout, q: int) -> range:
    """Key indices the query at position q may attend to under the view.

    Cross views give queries outside the pair an empty key set; the head
    contributes a zero vector for those rows.
    """
    mod = layout.modality_of(q)
    if view.is_self:
        return layout.block(mod)
    i, j = view.pair
    if j >= layout.m:
        raise ValueError(f"view {view.label()} references modality beyond layout m={layout.m}")
    if mod == i:
        return layout.block(j)
    if mod == j:
        return layout.block(i)
    return range(0, 0)


@dataclass(frozen=True)
class ViewAssignment:
    """Per-head view choice for one layer, canonically sorted self-first."""

    views: tuple[AttentionView, ...]

    def __post_init__(self):
        if len(self.views) < 1:
            raise ValueError("assignment needs at least one head")
        object.__setattr__(self, "views", tuple(sorted(self.views)))

    @property
    def n_h(self) -> int:
        return len(self.views)

    @property
    def self_heads(self) -> int:
        return sum(1 for v in self.views if v.is_self)

    def frequencies(self, m: int) -> tuple[int, ...]:
        """Head counts per view, aligned with enumerate_views(m)."""
        counts = []
        for view in enumerate_views(m):
            counts.append(sum(1 for v in self.views if v == view))
        if sum(counts) != self.n_h:
            raise ValueError(f"assignment uses views outside the m={m} view set")
        return tuple(counts)

    @classmethod
    def from_frequencies(cls, m: int, freqs: Sequence[int]) -> "ViewAssignment":
        views = enumerate_views(m)
        if len(freqs) != len(views):
            raise ValueError(f"need {len(views)} frequencies for m={m}, got {len(freqs)}")
        if any(f < 0 for f in freqs):
            raise ValueError(f"frequencies must be >= 0, got {tuple(freqs)}")
        heads: list[AttentionView] = []
        for view, f in zip(views, freqs):
            heads.extend([view] * int(f))
        return cls(views=tuple(heads))


@dataclass(frozen=True)
class LayerPlan:
    """Fusion-layer assignments; the first total_layers - len(assignments) layers are all-self."""

    total_layers: int
    assignments: tuple[ViewAssignment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.total_layers < len(self.assignments):
            raise ValueError(
                f"{len(self.assignments)} fusion layers exceed total_layers={self.total_layers}"
            )
        head_counts = {a.n_h for a in self.assignments}
        if len(head_counts) > 1:
            raise ValueError(f"all fusion layers must share one head count, got {head_counts}")

    @property
    def fusion_layers(self) -> int:
        return len(self.assignments)


def mask_grid(assignment: ViewAssignment, layout: ModalityLayout) -> np.ndarray:
    """Per-head boolean masks [n_h, total, total]; mask[h, q, k] is True iff k is allowed."""
    total = layout.total
    grid = np.zeros((assignment.n_h, total, total), dtype=bool)
    for h, view in enumerate(assignment.views):
        for mod in range(layout.m):
            rows = layout.block(mod)
            keys = allowed_keys(view, layout, rows.start)
            if len(keys) == 0:
                continue
            grid[h, rows.start:rows.stop, keys.start:keys.stop] = True
    return grid


def mask_true_count(view: AttentionView, layout: ModalityLayout) -> int:
    """Allowed q-k pairs for one head: sum L_i^2 for self, 2 L_i L_j for cross."""
    if view.is_self:
        return sum(length * length for length in layout.lengths)
    i, j = view.pair
    if j >= layout.m:
        raise ValueError(f"view {view.label()} references modality beyond layout m={layout.m}")
    return 2 * layout.lengths[i] * layout.lengths[j]


def strategy_self_counts(kind: str, n_h: int, fusion_layers: int, rng: Rng | None = None) -> list[int]:
    """Per-fusion-layer self-head counts p_0(l), l = 1..L_f, for the named strategy.

    spread        step down by floor(n_h / L_f) every layer, clipped at 0
    bottleneck    spread's descent to the middle layer, then mirrored back up
    alternating   all-self on odd layers, all-cross on even layers
    random        uniform draw from {0..n_h} per layer
    """
    if kind not in STRATEGY_KINDS:
        raise ValueError(f"unknown strategy {kind!r}, expected one of {STRATEGY_KINDS}")
    if n_h < 1 or fusion_layers < 1:
        raise ValueError(f"need n_h >= 1 and fusion_layers >= 1, got {n_h}, {fusion_layers}")
    step = n_h // fusion_layers
    if kind == "spread":
        return [max(0, n_h - layer * step) for layer in range(1, fusion_layers + 1)]
    if kind == "bottleneck":
        half = (fusion_layers + 1) // 2
        descent = [max(0, n_h - layer * step) for layer in range(1, half + 1)]
        counts = list(descent)
        for layer in range(half + 1, fusion_layers + 1):
            counts.append(counts[fusion_layers - layer])
        return counts
    if kind == "alternating":
        return [n_h if layer % 2 == 1 else 0 for layer in range(1, fusion_layers + 1)]
    if rng is None:
        raise ValueError("random strategy needs an Rng")
    return [rng.randint(0, n_h) for _ in range(fusion_layers)]


def make_strategy(
    kind: str, n_h: int, fusion_layers: int, m: int, rng: Rng | None = None
) -> list[ViewAssignment]:
    """Fusion-layer assignments for one of the two-modality allocation strategies."""
    if m != 2:
        raise ValueError(f"allocation strategies are defined for m=2 only, got m={m}")
    assignments = []
    for p_self in strategy_self_counts(kind, n_h, fusion_layers, rng):
        assignments.append(ViewAssignment.from_frequencies(2, (p_self, n_h - p_self)))
    return assignments
