"""Next-item training over segmented layouts."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyDataset, NonFiniteGradient
from .maskgen import causal_mask, loss_mask, segmented_mask
from .seqcore import SegmentationPlan, build_plan, plan_layout
from .tinyformer import Model, loss_and_grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, model: Model) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in model.params.items()},
                   {k: np.zeros_like(p) for k, p in model.params.items()})


@dataclass
class TrainStats:
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    tokens_per_sec: list = field(default_factory=list)

    def csv(self) -> str:
        lines = ["epoch,loss,seconds,tokens_per_sec"]
        for i, (l, s, t) in enumerate(zip(self.losses, self.seconds, self.tokens_per_sec), start=1):
            lines.append(f"{i},{l!r},{s:.6f},{t:.3f}")
        return "\n".join(lines) + "\n"


def adam_step(model: Model, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """AdamW update in place. Weight decay skips 1-D normalization gains."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in model.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and p.ndim > 1:
            update = update + cfg.weight_decay * p
        p -= (cfg.learning_rate * update).astype(p.dtype)


def _clip(grads: dict, max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def _batch_loss_and_grads(model: Model, plan: SegmentationPlan, batch: Sequence[np.ndarray], causal: bool):
    """Loss over a batch that may mix full-length and short (single-segment) users."""
    groups = {}
    for seq in batch:
        groups.setdefault(len(seq), []).append(seq)
    counts, results = {}, {}
    for length, seqs in groups.items():
        p = plan if length == plan.total_items else build_plan([length], [0])
        layout = plan_layout(p)
        lm = loss_mask(layout)
        counts[length] = len(seqs) * int(lm.include.sum())
        mask = causal_mask(p.n_flat) if causal else segmented_mask(p)
        results[length] = loss_and_grads(model, layout, np.stack(seqs), mask, lm)
    total = sum(counts.values())
    loss, grads = 0.0, None
    for length, (l, g) in results.items():
        w = counts[length] / total
        loss += w * l
        if grads is None:
            grads = {k: w * v for k, v in g.items()}
        else:
            for k, v in g.items():
                grads[k] += w * v
    return loss, grads, total


def train(model: Model, sequences, plan: SegmentationPlan, cfg: TrainConfig,
          on_epoch: Optional[Callable] = None, causal: bool = False):
    """Train a copy of ``model``; returns ``(model, stats)``.

    ``sequences`` is a (users, items) array or a list of per-user item
    arrays. Users shorter than the plan train under a single-segment plan.
    ``causal`` swaps the segmented mask for a plain causal one.
    """
    cfg.validate()
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    seqs = [s for s in seqs if len(s) >= 2]
    if not seqs:
        raise EmptyDataset("no training sequences of length >= 2")
    if any(len(s) > plan.total_items for s in seqs):
        raise ValueError(f"sequences longer than the plan's {plan.total_items} items")
    model = model.copy()
    state = AdamState.zeros_like(model)
    rng = np.random.default_rng(cfg.seed)
    stats = TrainStats()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(seqs))
        loss_sum, weight, tokens = 0.0, 0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [seqs[j] for j in order[i:i + cfg.batch_size]]
            loss, grads, count = _batch_loss_and_grads(model, plan, batch, causal)
            if cfg.grad_clip is not None:
                _clip(grads, cfg.grad_clip)
            adam_step(model, grads, state, cfg)
            loss_sum += loss * count
            weight += count
            tokens += sum(len(s) for s in batch)
        elapsed = time.perf_counter() - t0
        stats.losses.append(loss_sum / weight)
        stats.seconds.append(elapsed)
        stats.tokens_per_sec.append(tokens / elapsed if elapsed > 0 else float("inf"))
        if on_epoch is not None:
            on_epoch(epoch, stats)
    return model, stats
