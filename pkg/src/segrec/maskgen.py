"""Attention and loss masks for segmented sequences.

Inside a segment attention is causal. Across segments a slot may only see
the expert slots of earlier segments, never their items.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .seqcore import SegmentationPlan, TokenLayout, plan_layout


@dataclass(frozen=True)
class AttentionMask:
    n: int
    bits: np.ndarray  # bits[i, j]: row i may attend to column j

    def dump(self) -> str:
        return "\n".join("".join("1" if b else "0" for b in row) for row in self.bits) + "\n"

    def allowed_pairs(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class LossMask:
    include: np.ndarray


class Block(NamedTuple):
    """Allowed rectangle of the mask; ``triangular`` blocks sit on the diagonal."""

    row_start: int
    row_end: int
    col_start: int
    col_end: int
    triangular: bool

    def area(self) -> int:
        rows = self.row_end - self.row_start
        if self.triangular:
            return rows * (rows + 1) // 2
        return rows * (self.col_end - self.col_start)


def causal_mask(n: int) -> AttentionMask:
    if n < 1:
        raise ValueError("mask size must be >= 1")
    bits = np.tril(np.ones((n, n), dtype=bool))
    return AttentionMask(n, bits)


def _segment_ids(plan: SegmentationPlan) -> np.ndarray:
    sizes = [n + e for n, e in zip(plan.segment_lengths, plan.experts_per_segment)]
    return np.repeat(np.arange(len(sizes)), sizes)


def segmented_mask(plan: SegmentationPlan) -> AttentionMask:
    layout = plan_layout(plan)
    seg = _segment_ids(plan)
    same = seg[:, None] == seg[None, :]
    bits = np.tril(same | layout.is_expert[None, :])
    return AttentionMask(plan.n_flat, bits)


def block_descriptors(plan: SegmentationPlan) -> list:
    """The segmented mask as a list of disjoint allowed blocks."""
    blocks = []
    starts = plan.segment_starts()
    for i, (r0, n_i, e_i) in enumerate(zip(starts, plan.segment_lengths, plan.experts_per_segment)):
        r1 = r0 + n_i + e_i
        for j in range(i):
            e_j = plan.experts_per_segment[j]
            if e_j:
                c0 = starts[j] + plan.segment_lengths[j]
                blocks.append(Block(r0, r1, c0, c0 + e_j, False))
        blocks.append(Block(r0, r1, r0, r1, True))
    return blocks


def mask_from_blocks(n: int, blocks) -> AttentionMask:
    bits = np.zeros((n, n), dtype=bool)
    for b in blocks:
        if b.triangular:
            size = b.row_end - b.row_start
            bits[b.row_start:b.row_end, b.col_start:b.col_end] = np.tril(np.ones((size, size), dtype=bool))
        else:
            bits[b.row_start:b.row_end, b.col_start:b.col_end] = True
    return AttentionMask(n, bits)


def loss_mask(layout: TokenLayout) -> LossMask:
    include = np.array(
        [not layout.is_expert[p] and layout.target_of[p] is not None for p in range(len(layout))],
        dtype=bool,
    )
    return LossMask(include)
