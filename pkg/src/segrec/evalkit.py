"""Retrieval metrics and experiment harnesses.

Every query has a single relevant item. Ranking is over the full item
vocabulary with ties broken by ascending item id, the same order
``inference.rank_items`` uses.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyEvalSet, InconsistentTotals, WindowTooLarge
from .inference import ExpertCache, caches_from_batch, compress_batch, score_recent
from .seqcore import SegmentationPlan

DEFAULT_KS = (10, 50, 200)


def recall_at_k(rank: int, K: int) -> float:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return 1.0 if rank <= K else 0.0


def ndcg_at_k(rank: int, K: int) -> float:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return 1.0 / math.log2(1 + rank) if rank <= K else 0.0


@dataclass(frozen=True)
class Metrics:
    recall_at: dict
    ndcg_at: dict
    num_queries: int

    def rows(self):
        return [(K, self.recall_at[K], self.ndcg_at[K]) for K in sorted(self.recall_at)]


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target under descending score, ascending-id ties."""
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    t_score = scores[np.arange(len(targets)), targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > t_score) | ((scores == t_score) & (ids < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def metrics_from_ranks(ranks: Sequence[int], Ks: Iterable[int] = DEFAULT_KS) -> Metrics:
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        raise EmptyEvalSet("no queries to evaluate")
    recall, ndcg = {}, {}
    for K in Ks:
        hit = ranks <= K
        recall[K] = float(hit.mean())
        ndcg[K] = float(np.where(hit, 1.0 / np.log2(1 + ranks), 0.0).mean())
    return Metrics(recall, ndcg, len(ranks))


def metrics_from_scores(scores, targets, Ks: Iterable[int] = DEFAULT_KS) -> Metrics:
    return metrics_from_ranks(target_ranks(scores, targets), Ks)


def query_ranks(model, items: np.ndarray, plan: SegmentationPlan, batch_size: int = 256) -> np.ndarray:
    """Ranks of ``items[:, total]`` given ``items[:, :total]`` laid out by ``plan``.

    Old segments are compressed into expert caches, then the final segment
    is scored on top of them.
    """
    items = np.asarray(items, dtype=np.int64)
    total = plan.total_items
    if items.shape[0] == 0:
        raise EmptyEvalSet("no users to evaluate")
    prefix = total - plan.segment_lengths[-1]
    ranks = []
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        keys, values = compress_batch(model, chunk[:, :prefix], plan)
        caches = caches_from_batch(model, keys, values, plan)
        scores = score_recent(model, caches, chunk[:, prefix:total])
        ranks.append(target_ranks(scores, chunk[:, total]))
    return np.concatenate(ranks)


def evaluate(model, dataset, plan: SegmentationPlan, Ks: Iterable[int] = DEFAULT_KS, start: int = 0) -> Metrics:
    """Metrics for predicting event ``start + total_items`` from the events before it.

    ``dataset`` is a Dataset or an item matrix (users, events).
    """
    length = plan.total_items + 1
    if hasattr(dataset, "item_matrix"):
        if len(dataset) == 0:
            raise EmptyEvalSet("empty dataset")
        items = dataset.item_matrix(start, length)
    else:
        items = np.asarray(dataset)[:, start:start + length]
    if items.shape[0] == 0 or items.shape[1] < length:
        raise EmptyEvalSet("not enough events to evaluate")
    return metrics_from_ranks(query_ranks(model, items, plan), Ks)


# ---------------------------------------------------------------------------
# decay with a frozen cache


@dataclass
class DecaySeries:
    offsets: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    cache_fingerprint: str = ""
    cache_stable: bool = True

    def csv(self) -> str:
        lines = ["offset,K,recall,ndcg"]
        for off, m in zip(self.offsets, self.metrics):
            for K, r, n in m.rows():
                lines.append(f"{off},{K},{r!r},{n!r}")
        return "\n".join(lines) + "\n"


def decay_offsets(span: int, window: int, stride: int) -> list:
    """Window starts such that the event right after the window exists."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if window >= span:
        raise WindowTooLarge(f"window {window} leaves no target in a span of {span}")
    return list(range(0, span - window, stride))


def _fingerprint(caches: Sequence[ExpertCache]) -> str:
    h = hashlib.sha256()
    for c in caches:
        h.update(c.fingerprint().encode())
    return h.hexdigest()


def decay_eval(model, caches: Sequence[ExpertCache], test_sequences, window: int, stride: int,
               Ks: Iterable[int] = DEFAULT_KS, batch_size: int = 256) -> DecaySeries:
    """Slide a recent window over each user's span, reusing one frozen cache.

    ``test_sequences`` is (users, span): the events following the
    compressed segments, so offset 0 is the standard recent segment. For
    each offset the window's next event is the target.
    """
    spans = np.asarray(test_sequences, dtype=np.int64)
    if len(caches) != len(spans):
        raise ValueError("one cache per user required")
    if len(spans) == 0:
        raise EmptyEvalSet("no users")
    if window > min(c.recent_capacity for c in caches):
        raise WindowTooLarge(f"window {window} exceeds the final segment capacity")
    Ks = tuple(Ks)
    series = DecaySeries(cache_fingerprint=_fingerprint(caches))
    for off in decay_offsets(spans.shape[1], window, stride):
        ranks = []
        for i in range(0, len(spans), batch_size):
            chunk = spans[i:i + batch_size]
            scores = score_recent(model, list(caches[i:i + batch_size]), chunk[:, off:off + window])
            ranks.append(target_ranks(scores, chunk[:, off + window]))
        series.offsets.append(off)
        series.metrics.append(metrics_from_ranks(np.concatenate(ranks), Ks))
        if _fingerprint(caches) != series.cache_fingerprint:
            series.cache_stable = False
    return series


def build_caches(model, items: np.ndarray, plan: SegmentationPlan, batch_size: int = 256) -> list:
    """Expert caches from the compressed (non-final) segments of each row."""
    items = np.asarray(items, dtype=np.int64)
    prefix = plan.total_items - plan.segment_lengths[-1]
    out = []
    for i in range(0, len(items), batch_size):
        keys, values = compress_batch(model, items[i:i + batch_size, :prefix], plan)
        out.extend(caches_from_batch(model, keys, values, plan))
    return out


def sliding_eval(model, items: np.ndarray, plan: SegmentationPlan, ends: Sequence[int],
                 Ks: Iterable[int] = DEFAULT_KS) -> list:
    """Uncompressed-baseline counterpart of ``decay_eval``: for each end
    index, feed the ``plan.total_items`` events before it and target the
    event at ``end``."""
    out = []
    for end in ends:
        window = items[:, end - plan.total_items:end + 1]
        out.append(metrics_from_ranks(query_ranks(model, window, plan), Ks))
    return out


# ---------------------------------------------------------------------------
# placement comparison


def placement_compare(model_factory: Callable, settings: Sequence[SegmentationPlan], train_items,
                      eval_items, train_fn: Callable, Ks: Iterable[int] = DEFAULT_KS) -> list:
    """Train one model per plan and evaluate it; returns ``(setting, Metrics)`` rows.

    ``model_factory(plan)`` builds a fresh model, ``train_fn(model, items,
    plan)`` returns the trained model. Every plan must cover the same number
    of items.
    """
    totals = {p.total_items for p in settings}
    if len(totals) != 1:
        raise InconsistentTotals(f"settings cover different item totals: {sorted(totals)}")
    rows = []
    for plan in settings:
        model = train_fn(model_factory(plan), train_items, plan)
        rows.append((plan, evaluate(model, eval_items, plan, Ks)))
    return rows


def setting_label(plan: SegmentationPlan) -> str:
    return "[" + ",".join(str(e) for e in plan.experts_per_segment[:-1]) + "]"


def placement_csv(rows) -> str:
    lines = ["setting,K,recall,ndcg"]
    for plan, m in rows:
        label = setting_label(plan)
        for K, r, n in m.rows():
            lines.append(f"\"{label}\",{K},{r!r},{n!r}")
    return "\n".join(lines) + "\n"


def metrics_csv(rows) -> str:
    """``rows``: (method, pretrain_len, recent_len, Metrics)."""
    lines = ["method,pretrain_len,recent_len,K,recall,ndcg"]
    for method, pre, rec, m in rows:
        for K, r, n in m.rows():
            lines.append(f"{method},{pre},{rec},{K},{r!r},{n!r}")
    return "\n".join(lines) + "\n"
