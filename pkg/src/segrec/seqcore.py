"""Core domain types: events, datasets, segmentation plans and token layouts.

A user history of ``n`` items is cut into ``m`` consecutive segments. After
the items of segment ``j`` we insert ``experts_per_segment[j]`` expert slots,
giving a flattened sequence of ``n + k`` slots::

    [items_0, experts_0, items_1, experts_1, ..., items_{m-1}, experts_{m-1}]
"""

from __future__ import annotations

import functools
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import EmptyPlan, LengthMismatch, MismatchedLengths, NonPositiveSegment


@dataclass(frozen=True)
class Event:
    user_id: int
    item_id: int
    event_type: int = 0
    timestamp: int = 0


@dataclass(frozen=True)
class Dataset:
    """Per-user event sequences with densely indexed item ids.

    ``item_map[new_id]`` gives the original item id when the dataset came
    from ingestion; synthetic datasets use the identity.
    """

    users: tuple
    vocab_size: int
    metadata: str = ""
    item_map: Optional[tuple] = None
    user_map: Optional[tuple] = None
    # ground truth for synthetic data: {"user_cluster": array, "item_cluster": array}
    labels: Optional[dict] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.users)

    def item_array(self, user: int) -> np.ndarray:
        return np.fromiter((e.item_id for e in self.users[user]), dtype=np.int64)

    def item_matrix(self, start: int = 0, length: Optional[int] = None) -> np.ndarray:
        """Items ``[start, start + length)`` of every user stacked as (users, length)."""
        if length is None:
            length = min(len(u) for u in self.users) - start
        return np.stack([self.item_array(u)[start:start + length] for u in range(len(self.users))])


@dataclass(frozen=True)
class SegmentationPlan:
    segment_lengths: tuple
    experts_per_segment: tuple

    @property
    def num_segments(self) -> int:
        return len(self.segment_lengths)

    @property
    def total_items(self) -> int:
        return sum(self.segment_lengths)

    @property
    def total_experts(self) -> int:
        return sum(self.experts_per_segment)

    @property
    def n_flat(self) -> int:
        return self.total_items + self.total_experts

    def segment_starts(self) -> list:
        """Flattened index of the first slot of every segment."""
        starts, pos = [], 0
        for n_j, e_j in zip(self.segment_lengths, self.experts_per_segment):
            starts.append(pos)
            pos += n_j + e_j
        return starts

    def prefix(self) -> "SegmentationPlan":
        """The plan without its final (uncompressed) segment."""
        return SegmentationPlan(self.segment_lengths[:-1], self.experts_per_segment[:-1])

    def describe(self) -> str:
        segs = ",".join(map(str, self.segment_lengths))
        exps = ",".join(map(str, self.experts_per_segment))
        return f"segments = [{segs}]; experts = [{exps}]"

    def fingerprint(self) -> int:
        return zlib.crc32(self.describe().encode("ascii"))


def build_plan(segment_lengths: Sequence[int], experts_per_segment: Sequence[int]) -> SegmentationPlan:
    segment_lengths = tuple(int(x) for x in segment_lengths)
    experts_per_segment = tuple(int(x) for x in experts_per_segment)
    if not segment_lengths and not experts_per_segment:
        raise EmptyPlan("a plan needs at least one segment")
    if len(segment_lengths) != len(experts_per_segment):
        raise MismatchedLengths(
            f"{len(segment_lengths)} segment lengths vs {len(experts_per_segment)} expert counts"
        )
    if any(n <= 0 for n in segment_lengths):
        raise NonPositiveSegment(f"segment lengths must be positive: {list(segment_lengths)}")
    if any(e < 0 for e in experts_per_segment):
        raise NonPositiveSegment(f"expert counts must be non-negative: {list(experts_per_segment)}")
    return SegmentationPlan(segment_lengths, experts_per_segment)


def parse_plan(text: str) -> SegmentationPlan:
    """Parse ``segments = [8,12]; experts = [1,0]`` (order and whitespace free)."""
    fields = {}
    for part in text.replace("\n", ";").split(";"):
        part = part.strip()
        if not part or part.startswith("#"):
            continue
        key, _, value = part.partition("=")
        value = value.strip().strip("[]")
        fields[key.strip()] = [int(v) for v in value.split(",") if v.strip()]
    return build_plan(fields.get("segments", []), fields.get("experts", []))


@dataclass(frozen=True)
class ItemSlot:
    segment_index: int
    within_segment_index: int


@dataclass(frozen=True)
class ExpertSlot:
    segment_index: int
    expert_index_within_segment: int
    global_expert_index: int


Slot = Union[ItemSlot, ExpertSlot]


@dataclass(frozen=True)
class TokenLayout:
    plan: SegmentationPlan
    slots: tuple
    target_of: tuple
    # derived index arrays, computed once
    is_expert: np.ndarray = field(repr=False, compare=False)
    item_slots: np.ndarray = field(repr=False, compare=False)
    expert_slots: np.ndarray = field(repr=False, compare=False)
    expert_global: np.ndarray = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.slots)

    def item_index_of_slot(self) -> np.ndarray:
        """For each slot, its index among item slots (-1 for experts)."""
        out = np.full(len(self.slots), -1, dtype=np.int64)
        out[self.item_slots] = np.arange(len(self.item_slots))
        return out


@functools.lru_cache(maxsize=256)
def plan_layout(plan: SegmentationPlan) -> TokenLayout:
    slots = []
    g = 0
    for s, (n_j, e_j) in enumerate(zip(plan.segment_lengths, plan.experts_per_segment)):
        slots.extend(ItemSlot(s, i) for i in range(n_j))
        for e in range(e_j):
            slots.append(ExpertSlot(s, e, g))
            g += 1
    item_slots = [p for p, sl in enumerate(slots) if isinstance(sl, ItemSlot)]
    target_of = [None] * len(slots)
    for a, b in zip(item_slots, item_slots[1:]):
        target_of[a] = b
    is_expert = np.array([isinstance(sl, ExpertSlot) for sl in slots], dtype=bool)
    expert_slots = np.flatnonzero(is_expert)
    expert_global = np.array([slots[p].global_expert_index for p in expert_slots], dtype=np.int64)
    for arr in (is_expert, expert_slots, expert_global):
        arr.setflags(write=False)
    item_arr = np.array(item_slots, dtype=np.int64)
    item_arr.setflags(write=False)
    return TokenLayout(plan, tuple(slots), tuple(target_of), is_expert, item_arr, expert_slots, expert_global)


def layout_sequence(events: Sequence, plan: SegmentationPlan) -> TokenLayout:
    if len(events) != plan.total_items:
        raise LengthMismatch(f"{len(events)} events for a plan of {plan.total_items} items")
    return plan_layout(plan)


def truncate_user(events: Sequence[Event], max_len: int) -> list:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return list(events[-max_len:])
