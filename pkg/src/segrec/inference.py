"""Two-phase serving: compress old segments into an expert KV cache, then
score the recent segment on top of it.

The cache holds, for every layer, the key and value rows of the expert slots
of all compressed segments. Item activations of those segments are dropped
once their experts have been computed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import CorruptFile, EmptyRecent, KTooLarge, PlanMismatch
from .seqcore import SegmentationPlan, build_plan
from .tinyformer import Model, checkpoint_crc, forward_with_cache

CACHE_MAGIC = b"PSC1"
CACHE_VERSION = 1
CACHE_HEADER_BYTES = len(CACHE_MAGIC) + 7 * 4


@dataclass(frozen=True)
class ExpertCache:
    keys: np.ndarray  # (layers, experts, dim), read-only
    values: np.ndarray
    positions: np.ndarray  # flattened slot index of each cached expert
    plan: SegmentationPlan
    checkpoint_crc: int = 0

    @property
    def num_layers(self) -> int:
        return self.keys.shape[0]

    @property
    def num_experts(self) -> int:
        return self.keys.shape[1]

    @property
    def next_position(self) -> int:
        """Flattened index where the final (recent) segment starts."""
        return self.plan.segment_starts()[-1]

    @property
    def recent_capacity(self) -> int:
        return self.plan.segment_lengths[-1]

    @property
    def float_width(self) -> int:
        return self.keys.dtype.itemsize

    def nbytes(self) -> int:
        return CACHE_HEADER_BYTES + 2 * self.keys.size * self.float_width

    def fingerprint(self) -> str:
        return hashlib.sha256(cache_bytes(self)).hexdigest()


@dataclass(frozen=True)
class Recommendation:
    items: tuple
    scores: tuple

    def __len__(self) -> int:
        return len(self.items)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def expert_positions(plan: SegmentationPlan) -> np.ndarray:
    """Flattened positions of the experts of every non-final segment."""
    out = []
    for start, n_j, e_j in zip(plan.segment_starts()[:-1], plan.segment_lengths[:-1],
                               plan.experts_per_segment[:-1]):
        out.extend(range(start + n_j, start + n_j + e_j))
    return np.array(out, dtype=np.int64)


def empty_cache(model: Model, plan: Optional[SegmentationPlan] = None) -> ExpertCache:
    """Cache for a user with a single segment (nothing to compress)."""
    cfg = model.config
    if plan is None:
        plan = build_plan([cfg.max_positions], [0])
    z = np.zeros((cfg.num_layers, 0, cfg.model_dim), dtype=model.dtype)
    return ExpertCache(_frozen(z), _frozen(z.copy()), _frozen(np.zeros(0, np.int64)), plan)


class _Stacked:
    """Keys/values of several caches, batched for forward_with_cache."""

    def __init__(self, keys, values):
        self.keys = keys
        self.values = values


def compress_batch(model: Model, items: np.ndarray, plan: SegmentationPlan, counter=None):
    """Compress the non-final segments for a batch of users.

    ``items`` is (batch, prefix_items). Returns keys and values shaped
    (layers, batch, experts, dim).
    """
    items = np.asarray(items, dtype=np.int64)
    prefix_len = plan.total_items - plan.segment_lengths[-1]
    if items.shape[1] != prefix_len:
        raise PlanMismatch(f"{items.shape[1]} events given, plan compresses {prefix_len}")
    cfg = model.config
    b = items.shape[0]
    keys = np.zeros((cfg.num_layers, b, 0, cfg.model_dim), dtype=model.dtype)
    values = keys
    offset, g = 0, 0
    starts = plan.segment_starts()
    for j in range(plan.num_segments - 1):
        n_j, e_j = plan.segment_lengths[j], plan.experts_per_segment[j]
        seg = items[:, offset:offset + n_j]
        _, new_k, new_v = forward_with_cache(
            model, _Stacked(keys, values), seg, np.arange(g, g + e_j), start_position=starts[j],
            with_logits=False, counter=counter,
        )
        keys = np.concatenate([keys, new_k], axis=2)
        values = np.concatenate([values, new_v], axis=2)
        offset += n_j
        g += e_j
    return keys, values


def compress_segments(model: Model, events_prefix: Sequence, plan: SegmentationPlan,
                      counter=None) -> ExpertCache:
    """Build the expert cache of one user from the events of the non-final segments."""
    items = np.array([getattr(e, "item_id", e) for e in events_prefix], dtype=np.int64)
    keys, values = compress_batch(model, items[None], plan, counter=counter)
    return ExpertCache(_frozen(keys[:, 0]), _frozen(values[:, 0]), _frozen(expert_positions(plan)),
                       plan, checkpoint_crc(model))


def caches_from_batch(model: Model, keys, values, plan: SegmentationPlan) -> list:
    crc = checkpoint_crc(model)
    pos = _frozen(expert_positions(plan))
    return [ExpertCache(_frozen(keys[:, i]), _frozen(values[:, i]), pos, plan, crc)
            for i in range(keys.shape[1])]


def recent_start(model: Model, cache: ExpertCache, window: int) -> int:
    """First position of the recent window; saturates at the end of the position table."""
    return min(cache.next_position, model.config.max_positions - window)


def score_recent(model: Model, caches, recent: np.ndarray, counter=None) -> np.ndarray:
    """Next-item logits after the last recent item, for a batch of users.

    ``caches`` is one ExpertCache per row of ``recent`` (all sharing a
    plan), or a single cache shared by every row.
    """
    recent = np.asarray(recent, dtype=np.int64)
    if recent.ndim == 1:
        recent = recent[None]
    if recent.shape[1] == 0:
        raise EmptyRecent("no recent items to score")
    if isinstance(caches, ExpertCache):
        first, stacked = caches, caches
    else:
        first = caches[0]
        stacked = _Stacked(np.stack([c.keys for c in caches], axis=1),
                           np.stack([c.values for c in caches], axis=1))
    if recent.shape[1] > first.recent_capacity:
        raise PlanMismatch(f"{recent.shape[1]} recent items exceed segment capacity {first.recent_capacity}")
    start = recent_start(model, first, recent.shape[1])
    trace, _, _ = forward_with_cache(model, stacked, recent, (), start_position=start,
                                     with_logits=False, counter=counter)
    h_last = trace.final_hidden[:, -1]
    return h_last @ model.params["item_embeddings"].T


def rank_items(scores: np.ndarray, k: int) -> Recommendation:
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return Recommendation(tuple(int(i) for i in order), tuple(float(scores[i]) for i in order))


def recommend(model: Model, cache: ExpertCache, recent_items: Sequence[int], K: int,
              counter=None) -> Recommendation:
    if len(recent_items) == 0:
        raise EmptyRecent("recommend needs at least one recent item")
    if K < 1 or K > model.config.vocab_size:
        raise KTooLarge(f"K={K} outside [1, {model.config.vocab_size}]")
    scores = score_recent(model, cache, np.asarray(recent_items)[None], counter=counter)[0]
    return rank_items(scores, K)


def autoregress(model: Model, cache: ExpertCache, recent_items: Sequence[int], steps: int,
                K: int = 10, counter=None) -> list:
    """Greedy multi-step recommendation reusing one cache.

    Each step appends its top-1 item to the recent window, dropping the
    oldest item once the window exceeds the final segment's capacity.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    window = list(recent_items)
    out = []
    for _ in range(steps):
        rec = recommend(model, cache, window, K, counter=counter)
        out.append(rec)
        window.append(rec.items[0])
        if len(window) > cache.recent_capacity:
            window = window[-cache.recent_capacity:]
    return out


# ---------------------------------------------------------------------------
# file format: b"PSC1", 7 x uint32 header, then per layer K rows then V rows


def cache_bytes(cache: ExpertCache) -> bytes:
    L, k, d = cache.keys.shape
    width = cache.float_width
    header = struct.pack("<7I", CACHE_VERSION, L, k, d, width, cache.plan.fingerprint(), cache.checkpoint_crc)
    dt = "<f4" if width == 4 else "<f8"
    body = b"".join(
        np.ascontiguousarray(cache.keys[l], dtype=dt).tobytes() + np.ascontiguousarray(cache.values[l], dtype=dt).tobytes()
        for l in range(L)
    )
    return CACHE_MAGIC + header + body


def cache_from_bytes(data: bytes, plan: SegmentationPlan) -> ExpertCache:
    if data[:4] != CACHE_MAGIC:
        raise CorruptFile("not an expert cache (bad magic)")
    version, L, k, d, width, plan_hash, crc = struct.unpack("<7I", data[4:CACHE_HEADER_BYTES])
    if version != CACHE_VERSION:
        raise CorruptFile(f"unsupported cache version {version}")
    if width not in (4, 8):
        raise CorruptFile(f"unsupported float width {width}")
    if plan_hash != plan.fingerprint():
        raise PlanMismatch("cache was built for a different plan")
    if k != len(expert_positions(plan)):
        raise PlanMismatch(f"cache holds {k} experts, plan compresses {len(expert_positions(plan))}")
    if len(data) != CACHE_HEADER_BYTES + 2 * L * k * d * width:
        raise CorruptFile("cache size does not match its header")
    dt = np.dtype("<f4" if width == 4 else "<f8")
    raw = np.frombuffer(data, dtype=dt, offset=CACHE_HEADER_BYTES).reshape(L, 2, k, d)
    native = dt.newbyteorder("=")
    return ExpertCache(_frozen(raw[:, 0].astype(native)), _frozen(raw[:, 1].astype(native)),
                       _frozen(expert_positions(plan)), plan, crc)


def save_cache(cache: ExpertCache, path) -> None:
    with open(path, "wb") as fh:
        fh.write(cache_bytes(cache))


def load_cache(path, plan: SegmentationPlan) -> ExpertCache:
    with open(path, "rb") as fh:
        return cache_from_bytes(fh.read(), plan)
