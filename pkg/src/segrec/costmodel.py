"""Closed-form cost of flattened vs segment-cached evaluation, plus an
instrumented multiply-accumulate counter to check it against.

The closed forms follow the usual transformer big-O: a layer over ``t``
tokens costs ``t^2 d`` for attention and ``t d^2`` for the dense parts.
``CostConstants`` weights the two terms; the unit constants give the
constant-free model, calibrated constants match what the counter sees.
"""

from __future__ import annotations

import contextlib
import warnings
from collections import defaultdict
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Iterable

import numpy as np

from .errors import InstrumentationDisabled
from .maskgen import block_descriptors, segmented_mask
from .seqcore import SegmentationPlan, build_plan, plan_layout

_instrumented = True


@contextlib.contextmanager
def instrumentation(enabled: bool):
    global _instrumented
    previous, _instrumented = _instrumented, enabled
    try:
        yield
    finally:
        _instrumented = previous


@dataclass(frozen=True)
class CostParams:
    L: int
    n: int
    d: int
    k: int = 0
    m: int = 1

    def __post_init__(self):
        if min(self.L, self.n, self.d, self.m) < 1 or self.k < 0:
            raise ValueError(f"invalid cost parameters {self}")
        if self.k > 0 and self.m - 1 > self.k:
            warnings.warn(f"{self.m - 1} compressed segments but only k={self.k} experts: "
                          "some segments carry no expert", stacklevel=3)

    @property
    def alpha(self) -> float:
        return self.k / self.n


@dataclass(frozen=True)
class CostConstants:
    attention: float = 1.0
    dense: float = 1.0


UNIT = CostConstants()


@dataclass(frozen=True)
class CostReport:
    params: CostParams
    baseline_flops: float
    training_flops: float
    inference_flops: float
    training_ratio: float
    training_ratio_approx: float
    inference_ratio: float

    def rows(self):
        p = self.params
        return [
            ("L", p.L), ("n", p.n), ("d", p.d), ("k", p.k), ("m", p.m), ("alpha", p.alpha),
            ("baseline_cost", self.baseline_flops),
            ("training_cost", self.training_flops),
            ("inference_cost", self.inference_flops),
            ("training_ratio", self.training_ratio),
            ("training_ratio_approx", self.training_ratio_approx),
            ("inference_ratio_S", self.inference_ratio),
        ]

    def text(self) -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {_fmt(v)}" for k, v in rows) + "\n"

    def csv(self) -> str:
        rows = self.rows()
        return ",".join(k for k, _ in rows) + "\n" + ",".join(repr(v) for _, v in rows) + "\n"


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return f"{v:.6g}" if abs(v) < 1e6 else f"{v:.6e}"


def _layer_cost(t: float, attn_len: float, d: int, c: CostConstants) -> float:
    return c.attention * t * attn_len * d + c.dense * t * d * d


def baseline_cost(p: CostParams, c: CostConstants = UNIT) -> float:
    return p.L * _layer_cost(p.n, p.n, p.d, c)


def training_cost(p: CostParams, c: CostConstants = UNIT) -> float:
    nk = p.n + p.k
    return p.L * _layer_cost(nk, nk, p.d, c)


def training_ratio(p: CostParams, c: CostConstants = UNIT) -> float:
    return training_cost(p, c) / baseline_cost(p, c)


def inference_cost(p: CostParams, c: CostConstants = UNIT) -> float:
    nk = p.n + p.k
    return p.L * (c.attention * nk * nk * p.d / p.m + c.dense * nk * p.d * p.d)


def inference_ratio(p: CostParams, c: CostConstants = UNIT) -> float:
    if c == UNIT:
        a = p.alpha
        return ((1 + a) ** 2 * p.n / p.m + (1 + a) * p.d) / (p.n + p.d)
    return inference_cost(p, c) / baseline_cost(p, c)


def report(p: CostParams, c: CostConstants = UNIT) -> CostReport:
    return CostReport(
        p, baseline_cost(p, c), training_cost(p, c), inference_cost(p, c),
        training_ratio(p, c), 1 + p.alpha, inference_ratio(p, c),
    )


def plan_inference_cost(plan: SegmentationPlan, L: int, d: int, c: CostConstants = UNIT) -> float:
    """Segment-by-segment cost for an arbitrary (possibly uneven) plan.

    Segment ``j`` processes its ``t_j`` items and experts; each of them
    attends causally within the segment and to the ``K_j`` experts cached
    before it, an attention length of ``t_j + 2 K_j`` in the ``t^2`` units
    of the even formula.
    """
    total, cached = 0.0, 0
    for n_j, e_j in zip(plan.segment_lengths, plan.experts_per_segment):
        t = n_j + e_j
        total += _layer_cost(t, t + 2 * cached, d, c)
        cached += e_j
    return L * total


def plan_baseline_cost(plan: SegmentationPlan, L: int, d: int, c: CostConstants = UNIT) -> float:
    n = plan.total_items
    return L * _layer_cost(n, n, d, c)


def even_plan(n: int, m: int, k: int) -> SegmentationPlan:
    """``m`` equal segments with ``k`` experts spread as evenly as possible."""
    if n % m:
        raise ValueError(f"n={n} not divisible by m={m}")
    experts = [k // m + (1 if j < k % m else 0) for j in range(m)]
    return build_plan([n // m] * m, experts)


# ---------------------------------------------------------------------------
# instrumented counting


class FlopCounter:
    """Accumulates multiply-accumulates by category for one measurement."""

    def __init__(self):
        self.macs = defaultdict(int)

    def add(self, category: str, macs: int) -> None:
        self.macs[category] += int(macs)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def flops(self) -> int:
        return 2 * self.total_macs


def allowed_block_pairs(plan: SegmentationPlan) -> int:
    return sum(b.area() for b in block_descriptors(plan))


def measure_flops(model, plan: SegmentationPlan, mode: str, seed: int = 0) -> float:
    """Count FLOPs (2 x MACs) of attention, projections and FFN.

    ``train_forward`` runs the whole flattened sequence through one masked
    causal kernel. ``cached_inference`` compresses each segment in turn on
    top of the expert cache and then runs the final segment, including any
    experts it carries. Normalization, softmax and the vocabulary head are
    not counted.
    """
    from .inference import compress_batch
    from .tinyformer import forward, forward_with_cache

    if not _instrumented:
        raise InstrumentationDisabled("FLOP instrumentation is switched off")
    rng = np.random.default_rng(seed)
    items = rng.integers(0, model.config.vocab_size, size=(1, plan.total_items))
    counter = FlopCounter()
    if mode == "train_forward":
        forward(model, plan_layout(plan), items, segmented_mask(plan), with_logits=False, counter=counter)
    elif mode == "cached_inference":
        last = plan.segment_lengths[-1]
        prefix = items[:, :plan.total_items - last]
        keys, values = compress_batch(model, prefix, plan, counter=counter)
        cache = SimpleNamespace(keys=keys, values=values)
        g0 = plan.total_experts - plan.experts_per_segment[-1]
        forward_with_cache(model, cache, items[:, -last:], np.arange(g0, plan.total_experts),
                           start_position=plan.segment_starts()[-1], with_logits=False, counter=counter)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(counter.flops)


def calibrate(model_factory, shapes: Iterable) -> CostConstants:
    """Fit attention/dense constants to measured single-segment forwards.

    ``model_factory(n, d)`` returns a model; ``shapes`` is (n, d) pairs.
    Least squares on ``macs / L = a n^2 d + b n d^2``.
    """
    rows, rhs = [], []
    for n, d in shapes:
        model = model_factory(n, d)
        macs = measure_flops(model, build_plan([n], [0]), "train_forward") / 2
        rows.append([n * n * d, n * d * d])
        rhs.append(macs / model.config.num_layers)
    A, y = np.array(rows, float), np.array(rhs, float)
    # rescale columns so the fit is well conditioned
    scale = np.abs(A).max(axis=0)
    coef, *_ = np.linalg.lstsq(A / scale, y, rcond=None)
    a, b = coef / scale
    return CostConstants(float(a), float(b))
