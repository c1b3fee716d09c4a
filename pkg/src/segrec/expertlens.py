"""What did an expert slot compress?

Each expert's final representation is fitted as a non-negative combination
of representations of the items in the segment it summarizes. The largest
weights point at the items the expert mostly encodes.

Two bases are offered. ``embedding`` uses the tied item embeddings, the
space the head scores items in, so a weight says how much the expert points
at that item. ``hidden`` uses the contextual final states of the item
slots; each of those is trained to predict the following item and they
are nearly collinear within a preference, so NNLS tends to spend its
support on the odd items out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DidNotConverge, NoExperts, ShapeMismatch
from .maskgen import segmented_mask
from .seqcore import SegmentationPlan, plan_layout
from .tinyformer import Model, forward


@dataclass(frozen=True)
class Attribution:
    expert_slot: int
    weights: np.ndarray
    top_items: tuple  # (position in segment, item id, weight), heaviest first
    residual_norm: float


def kkt_violation(P: np.ndarray, x: np.ndarray, w: np.ndarray) -> float:
    """Largest breach of the optimality conditions of min ||x - Pw||, w >= 0."""
    g = P.T @ (P @ w - x)
    free = w > 0
    worst = 0.0
    if np.any(free):
        worst = max(worst, float(np.max(np.abs(g[free]))))
    if np.any(~free):
        worst = max(worst, float(max(0.0, -np.min(g[~free]))))
    if np.any(w < 0):
        worst = max(worst, float(-np.min(w)))
    return worst


def nnls(P: np.ndarray, x: np.ndarray, tol: float = 1e-8, max_iter: Optional[int] = None):
    """Lawson-Hanson active-set solve of ``min ||x - P w||`` with ``w >= 0``.

    ``P`` is (dim, columns), ``x`` is (dim,). Returns ``(w, residual_norm)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    P = np.asarray(P, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if P.ndim != 2 or x.shape != (P.shape[0],):
        raise ShapeMismatch(f"P {P.shape} and x {x.shape} do not fit")
    n = P.shape[1]
    if max_iter is None:
        max_iter = 3 * n + 30
    w = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    grad = P.T @ x  # negative gradient of half the squared residual
    it = 0
    while True:
        candidates = ~passive & (grad > tol)
        if not np.any(candidates):
            break
        if it >= max_iter:
            raise DidNotConverge(f"nnls did not converge in {max_iter} iterations")
        it += 1
        j = int(np.flatnonzero(candidates)[np.argmax(grad[candidates])])
        passive[j] = True
        while True:
            cols = np.flatnonzero(passive)
            s = np.zeros(n)
            s[cols] = np.linalg.lstsq(P[:, cols], x, rcond=None)[0]
            if np.all(s[cols] > 0):
                w = s
                break
            # step toward s until the first passive weight hits zero
            bad = cols[s[cols] <= 0]
            alpha = np.min(w[bad] / (w[bad] - s[bad]))
            w = w + alpha * (s - w)
            passive &= w > tol * 1e-3
            w[~passive] = 0.0
            if not np.any(passive):
                break
        grad = P.T @ (x - P @ w)
    return w, float(np.linalg.norm(x - P @ w))


def _top(weights: np.ndarray, items: np.ndarray, top_n: int) -> tuple:
    order = np.lexsort((np.arange(len(weights)), -weights))[:top_n]
    return tuple((int(i), int(items[i]), float(weights[i])) for i in order)


BASES = ("embedding", "hidden")


def attribute_experts(model: Model, user_items: Sequence[int], plan: SegmentationPlan,
                      top_n: int = 10, tol: float = 1e-8, basis: str = "embedding") -> list:
    """Attribute every expert slot of ``plan`` for one user's item history.

    x is the expert's final normalized representation from one forward pass
    under the segmented mask. P has one column per item of the expert's own
    segment: its item embedding, or with ``basis="hidden"`` the final state
    of its slot. The model is not modified.
    """
    if plan.total_experts == 0:
        raise NoExperts("plan has no expert slots to attribute")
    if basis not in BASES:
        raise ValueError(f"basis must be one of {BASES}, got {basis!r}")
    items = np.asarray(user_items, dtype=np.int64)
    layout = plan_layout(plan)
    trace = forward(model, layout, items, segmented_mask(plan), with_logits=False)
    final = np.asarray(trace.final_hidden, dtype=np.float64)
    item_index = layout.item_index_of_slot()
    out = []
    for slot in layout.expert_slots:
        seg = layout.slots[slot].segment_index
        rows = np.array([p for p in layout.item_slots if layout.slots[p].segment_index == seg])
        seg_items = items[item_index[rows]]
        if basis == "hidden":
            P = final[rows].T
        else:
            P = np.asarray(model.params["item_embeddings"][seg_items], dtype=np.float64).T
        w, r = nnls(P, final[slot], tol=tol)
        out.append(Attribution(int(layout.slots[slot].global_expert_index), w, _top(w, seg_items, top_n), r))
    return out


def attribution_tsv(attributions: Sequence[Attribution]) -> str:
    lines = ["expert_slot\trank\tsegment_position\titem_id\tweight\tresidual_norm"]
    for a in attributions:
        if not a.top_items:
            lines.append(f"{a.expert_slot}\t\t\t\t\t{a.residual_norm!r}")
        for rank, (pos, item, weight) in enumerate(a.top_items, start=1):
            lines.append(f"{a.expert_slot}\t{rank}\t{pos}\t{item}\t{weight!r}\t{a.residual_norm!r}")
    return "\n".join(lines) + "\n"
