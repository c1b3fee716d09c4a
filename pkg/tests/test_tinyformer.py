import numpy as np
import pytest
from hypothesis import given, strategies as st

from segrec.errors import CacheLayerMismatch, CorruptFile, InvalidConfig, NoIncludedSlots, ShapeMismatch, VocabOverflow
from segrec.inference import compress_segments
from segrec.maskgen import LossMask, causal_mask, loss_mask, segmented_mask
from segrec.seqcore import build_plan, plan_layout
from segrec.tinyformer import (
    ModelConfig,
    checkpoint_bytes,
    forward,
    forward_with_cache,
    init_model,
    load_checkpoint,
    loss_and_grads,
    model_from_bytes,
    parameter_shapes,
    save_checkpoint,
)

from oracles import central_difference


def small(**kw):
    base = dict(num_layers=2, model_dim=8, num_heads=2, ffn_dim=12, vocab_size=11,
                max_positions=24, num_expert_slots=3, seed=1)
    base.update(kw)
    return init_model(ModelConfig(**base))


def test_init_is_deterministic():
    a, b = small(), small()
    assert a.fingerprint() == b.fingerprint()
    assert small(seed=2).fingerprint() != a.fingerprint()


def test_parameter_count_formula():
    L, d, f, V, k, P = 2, 32, 48, 100, 4, 50
    m = init_model(ModelConfig(L, d, 2, f, V, P, k, 0))
    per_layer = 4 * d * d + 2 * d * f + 2 * d
    assert m.num_parameters() == V * d + k * d + P * d + L * per_layer + d
    assert list(m.params) == list(parameter_shapes(m.config))


def test_invalid_config():
    with pytest.raises(InvalidConfig):
        init_model(ModelConfig(2, 33, 2, 8, 10, 10, 1, 0))
    with pytest.raises(InvalidConfig):
        init_model(ModelConfig(0, 32, 2, 8, 10, 10, 1, 0))


def test_single_item_attends_to_itself():
    m = small(num_layers=1)
    plan = build_plan([1], [0])
    tr = forward(m, plan_layout(plan), [4], causal_mask(1))
    assert tr.attention[0].shape == (2, 1, 1)
    assert np.allclose(tr.attention[0], 1.0)
    # residual stream by hand
    from segrec.tinyformer import _gelu, _rms
    p = m.params
    x = p["item_embeddings"][4] + p["position_embeddings"][0]
    h, _ = _rms(x, p["layers.0.attn_norm"])
    x = x + (h @ p["layers.0.wv"]) @ p["layers.0.wo"]
    h, _ = _rms(x, p["layers.0.ffn_norm"])
    x = x + _gelu(h @ p["layers.0.w1"])[0] @ p["layers.0.w2"]
    h, _ = _rms(x, p["final_norm"])
    assert np.allclose(tr.logits[0], h @ p["item_embeddings"].T, atol=1e-12)


def test_causal_and_single_segment_masks_agree():
    m = small()
    plan = build_plan([9], [0])
    ids = np.arange(9) % 11
    a = forward(m, plan_layout(plan), ids, causal_mask(9)).logits
    b = forward(m, plan_layout(plan), ids, segmented_mask(plan)).logits
    assert np.array_equal(a, b)


def test_forward_errors():
    m = small()
    plan = build_plan([3], [0])
    with pytest.raises(ShapeMismatch):
        forward(m, plan_layout(plan), [1, 2], causal_mask(3))
    with pytest.raises(ShapeMismatch):
        forward(m, plan_layout(plan), [1, 2, 3], causal_mask(4))
    with pytest.raises(VocabOverflow):
        forward(m, plan_layout(plan), [1, 2, 11], causal_mask(3))


def test_attention_rows_sum_to_one():
    m = small()
    plan = build_plan([3, 4, 2], [1, 2, 0])
    ids = np.random.default_rng(0).integers(0, 11, 9)
    tr = forward(m, plan_layout(plan), ids, segmented_mask(plan))
    bits = segmented_mask(plan).bits
    for a in tr.attention:
        assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(a[:, ~bits] == 0)


def test_logits_are_tied_to_item_embeddings():
    m = small()
    plan = build_plan([5], [1])
    tr = forward(m, plan_layout(plan), [1, 2, 3, 4, 5], segmented_mask(plan))
    assert np.allclose(tr.logits, tr.final_hidden @ m.item_embeddings.T)


def test_earlier_items_reach_later_segments_only_through_experts():
    m = small()
    rng = np.random.default_rng(3)
    plan = build_plan([4, 5], [0, 0])
    a = rng.integers(0, 11, 9)
    b = a.copy()
    b[:4] = rng.integers(0, 11, 4)
    la = forward(m, plan_layout(plan), a, segmented_mask(plan)).logits
    lb = forward(m, plan_layout(plan), b, segmented_mask(plan)).logits
    assert np.array_equal(la[4:], lb[4:])
    plan = build_plan([4, 5], [2, 0])
    la = forward(m, plan_layout(plan), a, segmented_mask(plan)).logits
    lb = forward(m, plan_layout(plan), b, segmented_mask(plan)).logits
    assert not np.allclose(la[6:], lb[6:])


def test_compression_boundary_holds_with_cache_fixed():
    m = small()
    rng = np.random.default_rng(4)
    plan = build_plan([4, 5], [2, 0])
    ids = rng.integers(0, 11, 9)
    cache = compress_segments(m, ids[:4], plan)
    ref = forward(m, plan_layout(plan), ids, segmented_mask(plan)).final_hidden[6:]
    m2 = m.copy()
    # scramble the earlier items' embeddings: the cached path cannot see them
    m2.params["item_embeddings"][ids[:4]] = rng.normal(size=(4, 8))
    m2.params["item_embeddings"][ids[4:]] = m.params["item_embeddings"][ids[4:]]
    tr, _, _ = forward_with_cache(m2, cache, ids[4:], (), start_position=6)
    assert np.allclose(tr.final_hidden, ref, rtol=1e-10, atol=1e-12)


def test_uniform_logits_give_log_vocab_loss():
    m = small()
    m.params["item_embeddings"][:] = 0.0
    plan = build_plan([4, 3], [1, 0])
    layout = plan_layout(plan)
    loss, _ = loss_and_grads(m, layout, [1, 2, 3, 4, 5, 6, 7], segmented_mask(plan), loss_mask(layout))
    assert loss == pytest.approx(np.log(11), abs=1e-12)


def test_all_false_loss_mask():
    m = small()
    plan = build_plan([3], [0])
    with pytest.raises(NoIncludedSlots):
        loss_and_grads(m, plan_layout(plan), [1, 2, 3], causal_mask(3), LossMask(np.zeros(3, dtype=bool)))


def test_targets_outside_the_loss_mask_do_not_matter():
    m = small()
    plan = build_plan([3, 4], [2, 0])
    layout = plan_layout(plan)
    ids = [1, 2, 3, 4, 5, 6, 7]
    lm = loss_mask(layout)
    # drop the last included row; its target (the final item) is then unused
    lm_short = LossMask(lm.include & (np.arange(len(layout)) < len(layout) - 2))
    a, _ = loss_and_grads(m, layout, ids, segmented_mask(plan), lm_short, need_grads=False)
    b, _ = loss_and_grads(m, layout, ids[:-1] + [0], segmented_mask(plan), lm_short, need_grads=False)
    assert a == b
    full_a, _ = loss_and_grads(m, layout, ids, segmented_mask(plan), lm, need_grads=False)
    full_b, _ = loss_and_grads(m, layout, ids[:-1] + [0], segmented_mask(plan), lm, need_grads=False)
    assert full_a != full_b


FAMILIES = ["item_embeddings", "expert_embeddings", "position_embeddings", "wq", "wk", "wv", "wo",
            "w1", "w2", "attn_norm", "ffn_norm", "final_norm"]


@pytest.mark.parametrize("family", FAMILIES)
def test_gradients_match_central_differences(family):
    m = small()
    rng = np.random.default_rng(FAMILIES.index(family))
    plan = build_plan([3, 4, 2], [1, 2, 0])
    layout = plan_layout(plan)
    mask, lm = segmented_mask(plan), loss_mask(layout)
    ids = rng.integers(0, 11, (2, 9))
    _, grads = loss_and_grads(m, layout, ids, mask, lm)
    names = [n for n in m.params if n == family or n.endswith("." + family)]

    def f():
        return loss_and_grads(m, layout, ids, mask, lm, need_grads=False)[0]

    for _ in range(20):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in m.params[name].shape)
        fd = central_difference(f, m.params, name, idx, step=1e-5)
        an = grads[name][idx]
        assert abs(an - fd) / (abs(an) + 1e-8) <= 1e-4, (name, idx, an, fd)


@given(st.integers(0, 2**31 - 1))
def test_cached_segments_match_flattened_forward(seed):
    rng = np.random.default_rng(seed)
    m_seg = int(rng.integers(1, 4))
    lengths = rng.integers(1, 6, m_seg).tolist()
    experts = rng.integers(0, 3, m_seg).tolist()
    plan = build_plan(lengths, experts)
    m = small(max_positions=plan.n_flat, num_expert_slots=max(1, plan.total_experts), seed=seed % 1000)
    ids = rng.integers(0, 11, plan.total_items)
    flat = forward(m, plan_layout(plan), ids, segmented_mask(plan)).logits
    k = v = None
    cache = None
    off, g = 0, 0
    starts = plan.segment_starts()
    for j, (n_j, e_j) in enumerate(zip(lengths, experts)):
        tr, nk, nv = forward_with_cache(m, cache, ids[off:off + n_j], range(g, g + e_j), starts[j])
        seg = flat[starts[j]:starts[j] + n_j + e_j]
        assert np.allclose(tr.logits, seg, rtol=1e-5, atol=1e-10)
        k = nk if k is None else np.concatenate([k, nk], axis=1)
        v = nv if v is None else np.concatenate([v, nv], axis=1)
        cache = type("C", (), {"keys": k, "values": v})
        off += n_j
        g += e_j


def test_empty_cache_is_causal_baseline():
    m = small()
    ids = [3, 1, 4, 1, 5]
    tr, nk, _ = forward_with_cache(m, None, ids)
    ref = forward(m, plan_layout(build_plan([5], [0])), ids, causal_mask(5)).logits
    assert np.allclose(tr.logits, ref, rtol=1e-12)
    assert nk.shape == (2, 0, 8)


def test_cache_layer_mismatch():
    m = small()
    bad = type("C", (), {"keys": np.zeros((3, 1, 8)), "values": np.zeros((3, 1, 8))})
    with pytest.raises(CacheLayerMismatch):
        forward_with_cache(m, bad, [1, 2])


def test_checkpoint_round_trip(tmp_path):
    m = small().astype(np.float32)
    path = tmp_path / "m.ckpt"
    crc = save_checkpoint(m, path)
    data = path.read_bytes()
    assert data[:4] == b"PSR1"
    back = load_checkpoint(path)
    assert back.config == m.config
    assert back.fingerprint() == m.fingerprint()
    assert checkpoint_bytes(back) == data
    assert int.from_bytes(data[-4:], "little") == crc
    header = 4 + 9 * 4
    assert len(data) == header + 4 * m.num_parameters() + 4


def test_checkpoint_corruption_detected():
    data = bytearray(checkpoint_bytes(small()))
    data[60] ^= 0xFF
    with pytest.raises(CorruptFile):
        model_from_bytes(bytes(data))
    with pytest.raises(CorruptFile):
        model_from_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(CorruptFile):
        model_from_bytes(bytes(data[:-9]))
