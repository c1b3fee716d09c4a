"""A small pre-norm decoder-only transformer with hand-written backprop.

Input slot ``p`` is embedded as ``item_embeddings[id]`` (item slots) or
``expert_embeddings[g]`` (expert slots, ``g`` the global expert index), plus
``position_embeddings[p]``. Each layer is::

    x = x + Attn(RMSNorm(x))
    x = x + W2 gelu(W1 RMSNorm(x))

and the logits are ``RMSNorm(x) @ item_embeddings.T`` (tied head).

Everything runs batched over users sharing one layout: arrays are
``(batch, slots, dim)``. The forward pass is written once and used both
for whole flattened sequences and for segment-at-a-time evaluation on top
of cached expert keys/values.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CacheLayerMismatch,
    CorruptFile,
    InvalidConfig,
    NoIncludedSlots,
    ShapeMismatch,
    VocabOverflow,
)
from .maskgen import AttentionMask, LossMask
from .seqcore import TokenLayout

NORM_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

CHECKPOINT_MAGIC = b"PSR1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 128
    vocab_size: int = 100
    max_positions: int = 128
    num_expert_slots: int = 4
    seed: int = 0

    def validate(self) -> None:
        dims = dict(
            num_layers=self.num_layers, model_dim=self.model_dim, num_heads=self.num_heads,
            ffn_dim=self.ffn_dim, vocab_size=self.vocab_size, max_positions=self.max_positions,
        )
        for name, value in dims.items():
            if value < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {value}")
        if self.num_expert_slots < 0:
            raise InvalidConfig("num_expert_slots must be >= 0")
        if self.model_dim % self.num_heads:
            raise InvalidConfig(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Parameter names and shapes in checkpoint declaration order."""
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes = {
        "item_embeddings": (cfg.vocab_size, d),
        "expert_embeddings": (cfg.num_expert_slots, d),
        "position_embeddings": (cfg.max_positions, d),
    }
    for l in range(cfg.num_layers):
        shapes[f"layers.{l}.wq"] = (d, d)
        shapes[f"layers.{l}.wk"] = (d, d)
        shapes[f"layers.{l}.wv"] = (d, d)
        shapes[f"layers.{l}.wo"] = (d, d)
        shapes[f"layers.{l}.w1"] = (d, f)
        shapes[f"layers.{l}.w2"] = (f, d)
        shapes[f"layers.{l}.attn_norm"] = (d,)
        shapes[f"layers.{l}.ffn_norm"] = (d,)
    shapes["final_norm"] = (d,)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict

    @property
    def dtype(self):
        return self.params["item_embeddings"].dtype

    @property
    def item_embeddings(self) -> np.ndarray:
        return self.params["item_embeddings"]

    @property
    def expert_embeddings(self) -> np.ndarray:
        return self.params["expert_embeddings"]

    @property
    def position_embeddings(self) -> np.ndarray:
        return self.params["position_embeddings"]

    def num_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig, dtype=np.float64) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            fan_in = shape[0] if name.startswith("layers.") else shape[-1]
            params[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
    return Model(config, params)


@dataclass
class ForwardTrace:
    hidden_states: list  # input to every layer, then the last layer's output
    final_hidden: np.ndarray  # normalized, the representation fed to the head
    logits: Optional[np.ndarray]
    keys: list  # per layer, (batch, slots, dim)
    values: list
    attention: list = field(default_factory=list)  # per layer (batch, heads, slots, keys)


# ---------------------------------------------------------------------------
# building blocks


def _rms(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    xhat = x * r
    return xhat * g, (xhat, r)


def _rms_back(dy, g, saved):
    xhat, r = saved
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _split(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _masked_softmax(s, allowed):
    s = np.where(allowed, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _check_inputs(model: Model, item_ids, expert_global, positions):
    cfg = model.config
    if item_ids.size and (item_ids.min() < 0 or item_ids.max() >= cfg.vocab_size):
        raise VocabOverflow(f"item ids must lie in [0, {cfg.vocab_size})")
    if len(expert_global) and expert_global.max() >= cfg.num_expert_slots:
        raise ShapeMismatch(f"expert slot {expert_global.max()} >= num_expert_slots {cfg.num_expert_slots}")
    if len(positions) and (positions.min() < 0 or positions.max() >= cfg.max_positions):
        raise ShapeMismatch(f"position {positions.max()} outside [0, {cfg.max_positions})")


def _embed(model, is_expert, item_ids, expert_global, positions):
    """Input embeddings for (batch, slots); item_ids cover the item slots in order."""
    p = model.params
    b = item_ids.shape[0]
    x = np.empty((b, len(is_expert), model.config.model_dim), dtype=model.dtype)
    x[:, ~is_expert] = p["item_embeddings"][item_ids]
    x[:, is_expert] = p["expert_embeddings"][expert_global][None]
    x += p["position_embeddings"][positions][None]
    return x


def _run_layers(model, x, allowed, prior_k=None, prior_v=None, keep=False, counter=None, pairs=None):
    """Shared forward over all layers.

    ``allowed`` is (slots, prior + slots). ``prior_k``/``prior_v`` are
    (layers, batch, prior, dim) or None. With ``keep`` the intermediates
    needed for backprop are stored.
    """
    cfg = model.config
    p = model.params
    h = cfg.num_heads
    scale = 1.0 / math.sqrt(cfg.model_dim // h)
    b, t, d = x.shape
    hidden, keys, values, attn, saved = [x], [], [], [], []
    for l in range(cfg.num_layers):
        lp = f"layers.{l}."
        a, s_norm1 = _rms(x, p[lp + "attn_norm"])
        q = a @ p[lp + "wq"]
        k = a @ p[lp + "wk"]
        v = a @ p[lp + "wv"]
        keys.append(k)
        values.append(v)
        if prior_k is not None and prior_k.shape[2]:
            k_all = np.concatenate([prior_k[l], k], axis=1)
            v_all = np.concatenate([prior_v[l], v], axis=1)
        else:
            k_all, v_all = k, v
        qh, kh, vh = _split(q, h), _split(k_all, h), _split(v_all, h)
        probs = _masked_softmax((qh @ kh.transpose(0, 1, 3, 2)) * scale, allowed)
        oh = probs @ vh
        o = _merge(oh)
        x1 = x + o @ p[lp + "wo"]
        bn, s_norm2 = _rms(x1, p[lp + "ffn_norm"])
        u = bn @ p[lp + "w1"]
        z, tanh_u = _gelu(u)
        x = x1 + z @ p[lp + "w2"]
        hidden.append(x)
        attn.append(probs)
        if keep:
            saved.append((a, s_norm1, qh, kh, vh, probs, o, bn, s_norm2, u, z, tanh_u))
        if counter is not None:
            counter.add("projections", b * 4 * t * d * d)
            counter.add("attention", b * 2 * pairs * d)
            counter.add("ffn", b * 2 * t * d * cfg.ffn_dim)
    final, s_final = _rms(x, p["final_norm"])
    return hidden, final, s_final, keys, values, attn, saved


def _batched(item_ids):
    item_ids = np.asarray(item_ids, dtype=np.int64)
    single = item_ids.ndim == 1
    return (item_ids[None] if single else item_ids), single


def _squeeze(trace: ForwardTrace) -> ForwardTrace:
    first = lambda xs: [a[0] for a in xs]
    return ForwardTrace(
        first(trace.hidden_states), trace.final_hidden[0],
        None if trace.logits is None else trace.logits[0],
        first(trace.keys), first(trace.values), first(trace.attention),
    )


# ---------------------------------------------------------------------------
# public forward / backward


def forward(model: Model, layout: TokenLayout, item_ids, mask: AttentionMask, positions=None,
            with_logits: bool = True, counter=None) -> ForwardTrace:
    """Forward over a whole flattened layout.

    ``item_ids`` is (items,) for one user or (batch, items) for many.
    """
    ids, single = _batched(item_ids)
    n = len(layout)
    if mask.n != n:
        raise ShapeMismatch(f"mask side {mask.n} != layout length {n}")
    if ids.shape[1] != len(layout.item_slots):
        raise ShapeMismatch(f"{ids.shape[1]} item ids for {len(layout.item_slots)} item slots")
    positions = np.arange(n) if positions is None else np.asarray(positions, dtype=np.int64)
    _check_inputs(model, ids, layout.expert_global, positions)
    x = _embed(model, layout.is_expert, ids, layout.expert_global, positions)
    # a causal kernel evaluates the lower triangle whatever the mask zeroes inside it
    hidden, final, _, keys, values, attn, _ = _run_layers(
        model, x, mask.bits, counter=counter, pairs=n * (n + 1) // 2)
    logits = final @ model.params["item_embeddings"].T if with_logits else None
    trace = ForwardTrace(hidden, final, logits, keys, values, attn)
    return _squeeze(trace) if single else trace


def forward_with_cache(model: Model, prior_cache, segment_item_ids, segment_expert_slots=(),
                       start_position: int = 0, with_logits: bool = True, counter=None):
    """Run one segment on top of cached expert keys/values.

    ``prior_cache`` is anything with ``keys``/``values`` arrays shaped
    (layers, prior, dim) or (layers, batch, prior, dim); ``None`` means
    empty. The segment's items take positions ``start_position, ...`` and
    its expert slots (global indices ``segment_expert_slots``) follow.
    Returns the trace of the segment's slots and the new expert keys and
    values, shaped like the prior cache.
    """
    ids, single = _batched(segment_item_ids)
    b, n_items = ids.shape
    expert_global = np.asarray(segment_expert_slots, dtype=np.int64)
    n_exp = len(expert_global)
    t = n_items + n_exp
    cfg = model.config
    d = cfg.model_dim
    if prior_cache is None:
        prior_k = np.zeros((cfg.num_layers, b, 0, d), dtype=model.dtype)
        prior_v = prior_k
    else:
        prior_k = np.asarray(prior_cache.keys)
        prior_v = np.asarray(prior_cache.values)
        if prior_k.shape[0] != cfg.num_layers:
            raise CacheLayerMismatch(f"cache has {prior_k.shape[0]} layers, model has {cfg.num_layers}")
        if prior_k.ndim == 3:
            prior_k = np.broadcast_to(prior_k[:, None], (cfg.num_layers, b) + prior_k.shape[1:])
            prior_v = np.broadcast_to(prior_v[:, None], (cfg.num_layers, b) + prior_v.shape[1:])
    c = prior_k.shape[2]
    positions = start_position + np.arange(t)
    _check_inputs(model, ids, expert_global, positions)
    is_expert = np.zeros(t, dtype=bool)
    is_expert[n_items:] = True
    x = _embed(model, is_expert, ids, expert_global, positions)
    allowed = np.concatenate([np.ones((t, c), dtype=bool), np.tril(np.ones((t, t), dtype=bool))], axis=1)
    hidden, final, _, keys, values, attn, _ = _run_layers(
        model, x, allowed, prior_k, prior_v, counter=counter, pairs=c * t + t * (t + 1) // 2)
    logits = final @ model.params["item_embeddings"].T if with_logits else None
    trace = ForwardTrace(hidden, final, logits, keys, values, attn)
    new_k = np.stack([k[:, n_items:] for k in keys])
    new_v = np.stack([v[:, n_items:] for v in values])
    if single:
        return _squeeze(trace), new_k[:, 0], new_v[:, 0]
    return trace, new_k, new_v


def _loss_targets(layout: TokenLayout, ids: np.ndarray, lmask: LossMask):
    rows = np.flatnonzero(lmask.include)
    item_index = layout.item_index_of_slot()
    tgt_slots = [layout.target_of[r] for r in rows]
    if any(s is None for s in tgt_slots):
        raise ShapeMismatch("loss mask includes a slot without a target")
    targets = ids[:, item_index[np.array(tgt_slots, dtype=np.int64)]] if len(rows) else ids[:, :0]
    return rows, targets


def loss_and_grads(model: Model, layout: TokenLayout, item_ids, mask: AttentionMask, lmask: LossMask,
                   need_grads: bool = True):
    """Mean next-item cross entropy over included slots, and exact gradients.

    Gradients come back as a dict keyed like ``model.params``.
    """
    ids, _ = _batched(item_ids)
    if not lmask.include.any():
        raise NoIncludedSlots("loss mask excludes every slot")
    cfg = model.config
    p = model.params
    n = len(layout)
    if mask.n != n or len(lmask.include) != n:
        raise ShapeMismatch("mask sizes do not match layout")
    if ids.shape[1] != len(layout.item_slots):
        raise ShapeMismatch(f"{ids.shape[1]} item ids for {len(layout.item_slots)} item slots")
    positions = np.arange(n)
    _check_inputs(model, ids, layout.expert_global, positions)
    rows, targets = _loss_targets(layout, ids, lmask)
    b = ids.shape[0]
    count = b * len(rows)

    x0 = _embed(model, layout.is_expert, ids, layout.expert_global, positions)
    hidden, final, s_final, _, _, _, saved = _run_layers(model, x0, mask.bits, keep=need_grads)
    E = p["item_embeddings"]
    hr = final[:, rows]  # (b, r, d)
    logits = hr @ E.T
    logits -= logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=-1))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    loss = float(np.sum(lse - picked) / count)
    if not need_grads:
        return loss, None

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dlogits = np.exp(logits - lse[..., None])
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits /= count
    grads["item_embeddings"] += _flat(dlogits).T @ _flat(hr)
    dfinal = np.zeros_like(final)
    dfinal[:, rows] = dlogits @ E
    dx, grads["final_norm"] = _rms_back(dfinal, p["final_norm"], s_final)

    h = cfg.num_heads
    scale = 1.0 / math.sqrt(cfg.model_dim // h)
    allowed = mask.bits
    for l in reversed(range(cfg.num_layers)):
        lp = f"layers.{l}."
        a, s_norm1, qh, kh, vh, probs, o, bn, s_norm2, u, z, tanh_u = saved[l]
        # FFN
        grads[lp + "w2"] += _flat(z).T @ _flat(dx)
        du = _gelu_back(dx @ p[lp + "w2"].T, u, tanh_u)
        grads[lp + "w1"] += _flat(bn).T @ _flat(du)
        dbn = du @ p[lp + "w1"].T
        dx1, dg = _rms_back(dbn, p[lp + "ffn_norm"], s_norm2)
        grads[lp + "ffn_norm"] += dg
        dx1 += dx
        # attention
        grads[lp + "wo"] += _flat(o).T @ _flat(dx1)
        doh = _split(dx1 @ p[lp + "wo"].T, h)
        dprobs = doh @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ doh
        ds = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        ds = np.where(allowed, ds, 0.0) * scale
        dq = _merge(ds @ kh)
        dk = _merge(ds.transpose(0, 1, 3, 2) @ qh)
        dv = _merge(dvh)
        grads[lp + "wq"] += _flat(a).T @ _flat(dq)
        grads[lp + "wk"] += _flat(a).T @ _flat(dk)
        grads[lp + "wv"] += _flat(a).T @ _flat(dv)
        da = dq @ p[lp + "wq"].T + dk @ p[lp + "wk"].T + dv @ p[lp + "wv"].T
        dx0, dg = _rms_back(da, p[lp + "attn_norm"], s_norm1)
        grads[lp + "attn_norm"] += dg
        dx = dx0 + dx1

    item_rows = dx[:, ~layout.is_expert].reshape(-1, cfg.model_dim)
    np.add.at(grads["item_embeddings"], ids.reshape(-1), item_rows)
    if len(layout.expert_global):
        np.add.at(grads["expert_embeddings"], layout.expert_global, dx[:, layout.is_expert].sum(axis=0))
    grads["position_embeddings"][:n] += dx.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# checkpoint format: b"PSR1", 9 x uint32 header, float32 params, CRC32


def checkpoint_bytes(model: Model) -> bytes:
    cfg = model.config
    header = struct.pack(
        "<9I", CHECKPOINT_VERSION, cfg.num_layers, cfg.model_dim, cfg.num_heads, cfg.ffn_dim,
        cfg.vocab_size, cfg.max_positions, cfg.num_expert_slots, cfg.seed,
    )
    body = b"".join(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes()
                    for name in parameter_shapes(cfg))
    payload = header + body
    return CHECKPOINT_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def checkpoint_crc(model: Model) -> int:
    return struct.unpack("<I", checkpoint_bytes(model)[-4:])[0]


def model_from_bytes(data: bytes, dtype=np.float32) -> Model:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile("not a checkpoint (bad magic)")
    payload, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptFile("checkpoint CRC mismatch")
    version, L, d, heads, ffn, vocab, max_pos, k_max, seed = struct.unpack("<9I", payload[:36])
    if version != CHECKPOINT_VERSION:
        raise CorruptFile(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(L, d, heads, ffn, vocab, max_pos, k_max, seed)
    cfg.validate()
    params, offset = {}, 36
    for name, shape in parameter_shapes(cfg).items():
        size = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(shape)
        params[name] = arr.astype(dtype)
        offset += 4 * size
    if offset != len(payload):
        raise CorruptFile("checkpoint has trailing bytes")
    return Model(cfg, params)


def save_checkpoint(model: Model, path) -> int:
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return struct.unpack("<I", data[-4:])[0]


def load_checkpoint(path, dtype=np.float32) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), dtype=dtype)
