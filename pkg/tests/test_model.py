import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from conftest import TRIPLETS, random_features, tiny_config, tiny_model
from cvlnm import tensor as T
from cvlnm.controller import LN4, MSAtt, ModuleController, entropy, fuse_blocks, hard_select
from cvlnm.decoder import LSTMCell
from cvlnm.encoders import FeatureSet, FunctionModule, ObjectModule, RelationModule, batch_features
from cvlnm.nn import sinusoid_position
from cvlnm.reason import (ReasonModule, TripletFormatError, TripletRecord, parse_triplets,
                          select_triplets)
from cvlnm.tensor import Tensor

# -- encoder modules -----------------------------------------------------------


def test_object_module_zero_input_zero_bias_gives_zero(rng):
    m = ObjectModule(tiny_config(), rng)
    out = m(np.zeros((1, 8))).data
    np.testing.assert_array_equal(out, np.zeros((1, 4)))


def test_object_module_leaky_slope(rng):
    m = ObjectModule(tiny_config(), rng)
    R = rng.normal(size=(3, 8))
    pre = R @ m.fc.W.data + m.fc.b.data
    np.testing.assert_allclose(m(R).data, np.where(pre > 0, pre, 0.01 * pre), rtol=1e-14)


@pytest.mark.parametrize("N,k", [(2, 1), (3, 2), (1, 2)])
def test_relation_module_matches_loop_oracle(rng, N, k):
    cfg = tiny_config(k=k)
    rel = RelationModule(cfg, rng)
    R = rng.normal(size=(N, 8))
    got = rel(R).data
    np.testing.assert_allclose(got, O.relation_module(R, rel), atol=1e-12)
    np.testing.assert_allclose(rel.last_attention.sum(-1), 1.0, atol=1e-12)
    if N == 1:
        np.testing.assert_allclose(rel.last_attention, 1.0)


def test_relation_module_padding_is_invisible(rng):
    rel = RelationModule(tiny_config(), rng)
    R = rng.normal(size=(2, 8))
    padded = np.vstack([R, np.zeros((2, 8))])
    got = rel(padded[None], mask=np.array([[True, True, False, False]])).data[0, :2]
    np.testing.assert_allclose(got, rel(R).data, atol=1e-13)


def test_function_module_matches_oracle(rng):
    f = FunctionModule(tiny_config(), rng)
    h = rng.normal(size=6)
    np.testing.assert_allclose(f(Tensor(h)).data, O.leaky(O.lin(h, f.fc)), atol=1e-13)


def test_feature_set_validation():
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((2, 4)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ValueError):
        FeatureSet(np.full((1, 2), np.nan), np.zeros((1, 2)))


def test_batch_features_pads_and_masks(rng):
    a, b = random_features(rng, 2), random_features(rng, 4)
    R_O, R_A, mask = batch_features([a, b])
    assert R_O.shape == (2, 4, 8)
    np.testing.assert_array_equal(mask, [[1, 1, 0, 0], [1, 1, 1, 1]])
    np.testing.assert_array_equal(R_O[0, 2:], 0.0)


# -- controller --------------------------------------------------------------


def msatt(rng):
    return MSAtt(4, 6, 5, rng)


def test_ms_att_single_row_returns_it(rng):
    att = msatt(rng)
    V = Tensor(rng.normal(size=(1, 4)))
    v, a = att(V, Tensor(rng.normal(size=6)))
    np.testing.assert_allclose(a.data, [1.0])
    np.testing.assert_allclose(v.data, V.data[0], rtol=1e-15)


def test_ms_att_identical_rows(rng):
    att = msatt(rng)
    row = rng.normal(size=4)
    v, a = att(Tensor(np.stack([row, row])), Tensor(rng.normal(size=6)))
    np.testing.assert_allclose(a.data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(v.data, row, atol=1e-15)


def test_ms_att_matches_oracle(rng):
    att = msatt(rng)
    V, h = rng.normal(size=(3, 4)), rng.normal(size=6)
    v, a = att(Tensor(V), Tensor(h))
    ov, oa = O.ms_att(V, h, att)
    np.testing.assert_allclose(v.data, ov, atol=1e-12)
    np.testing.assert_allclose(a.data, oa, atol=1e-12)


def test_ms_att_zero_regions_errors(rng):
    with pytest.raises(ValueError):
        msatt(rng)(Tensor(np.zeros((0, 4))), Tensor(np.zeros(6)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6))
def test_ms_att_output_in_convex_hull(seed, n):
    r = np.random.default_rng(seed)
    att = msatt(r)
    V = r.normal(size=(n, 4)) * 3
    v, a = att(Tensor(V), Tensor(r.normal(size=6)))
    assert np.all(v.data >= V.min(0) - 1e-12) and np.all(v.data <= V.max(0) + 1e-12)
    assert abs(a.data.sum() - 1.0) < 1e-12


def test_attend_all_parameters_are_isolated(rng):
    model = tiny_model()
    enc = model.encode([random_features(rng)])
    h1 = Tensor(rng.normal(size=(1, 6)))
    c = model.controller
    before, _ = c.attend_all(enc.feats, h1)
    c.att_obj.W_v.data = c.att_obj.W_v.data + 1.0
    after, _ = c.attend_all(enc.feats, h1)
    assert not np.allclose(before[0].data, after[0].data)
    np.testing.assert_array_equal(before[1].data, after[1].data)
    np.testing.assert_array_equal(before[2].data, after[2].data)


def test_build_query(rng):
    c = ModuleController(tiny_config(), rng)
    zero = Tensor(np.zeros(4))
    np.testing.assert_array_equal(c.build_query(zero, zero, zero, Tensor(np.zeros(6))).data, 0.0)
    parts = [rng.normal(size=4) for _ in range(3)] + [rng.normal(size=6)]
    x = c.build_query(*[Tensor(p) for p in parts]).data
    assert np.all(x >= 0)
    np.testing.assert_allclose(x, O.relu(O.lin(np.concatenate(parts), c.query_fc)), atol=1e-13)


def test_layout_self_attention(rng):
    c = ModuleController(tiny_config(), rng)
    Z1 = rng.normal(size=(1, 8))
    _, att = c.layout_self_attention(Tensor(Z1))
    np.testing.assert_allclose(att.data, 1.0)
    Z3 = rng.normal(size=(3, 8))
    out, att = c.layout_self_attention(Tensor(Z3))
    ref, _ = O.mha(list(Z3), list(Z3), c.layout_att)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    np.testing.assert_allclose(att.data.sum(-1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        c.layout_self_attention(Tensor(np.zeros((0, 8))))


def test_soft_fuse_matches_oracle_and_reconstructs(rng):
    c = ModuleController(tiny_config(), rng)
    Z_hat = rng.normal(size=(3, 8))
    x = np.abs(rng.normal(size=8))
    blocks = [rng.normal(size=4) for _ in range(4)]
    w, v = c.soft_fuse(Tensor(Z_hat), Tensor(x), [Tensor(b) for b in blocks])
    ow, ov = O.soft_fuse(list(Z_hat), x, blocks, c)
    np.testing.assert_allclose(w.data, ow, atol=1e-12)
    np.testing.assert_allclose(v.data, ov, atol=1e-12)
    assert abs(w.data.sum() - 1.0) < 1e-12
    for b in range(4):
        np.testing.assert_allclose(v.data[4 * b:4 * b + 4] / w.data[b], blocks[b], rtol=1e-12)


def test_soft_fuse_equal_logits_is_uniform(rng):
    c = ModuleController(tiny_config(), rng)
    c.weight_fc.W.data[:] = 0.0
    w, _ = c.soft_fuse(Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=8)),
                       [Tensor(np.ones(4))] * 4)
    np.testing.assert_allclose(w.data, 0.25)


def test_fuse_blocks_one_hot_zeroes_other_blocks(rng):
    blocks = [Tensor(rng.normal(size=4)) for _ in range(4)]
    v = fuse_blocks(Tensor(np.array([1.0, 0, 0, 0])), blocks).data
    np.testing.assert_array_equal(v[:4], blocks[0].data)
    np.testing.assert_array_equal(v[4:], 0.0)


def test_module_embedding(rng):
    c = ModuleController(tiny_config(), rng)
    E = c.label_emb.data
    np.testing.assert_array_equal(c.module_embedding(Tensor(np.eye(4)[0]), None).data, E[0])
    np.testing.assert_allclose(c.module_embedding(Tensor(np.full(4, 0.25)), 3).data,
                               E.mean(0) + sinusoid_position(3, 8), atol=1e-15)
    p0 = sinusoid_position(0, 8)
    np.testing.assert_array_equal(p0[0::2], 0.0)
    np.testing.assert_array_equal(p0[1::2], 1.0)
    np.testing.assert_allclose(sinusoid_position(5, 8), O.posenc(5, 8), atol=1e-15)


def test_hard_select_is_one_hot_and_argmax_in_the_limit():
    w = Tensor(np.array([[0.1, 0.6, 0.2, 0.1]]))
    out = hard_select(w, 1e-6, noise=np.zeros((1, 4))).data
    np.testing.assert_array_equal(out, [[0, 1, 0, 0]])
    out = hard_select(w, 1.0, np.random.default_rng(0)).data
    assert sorted(out[0].tolist()) == [0, 0, 0, 1]
    with pytest.raises(ValueError):
        hard_select(w, 0.0)


def test_hard_select_frequencies_match_weights():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    out = hard_select(Tensor(np.tile(w, (100_000, 1))), 1.0, np.random.default_rng(7)).data
    np.testing.assert_allclose(out.mean(0), w, atol=0.01)


def test_hard_select_gradient_flows_through_relaxation():
    w = Tensor(np.array([0.25, 0.25, 0.25, 0.25]), requires_grad=True)
    out = hard_select(w, 0.5, noise=np.array([0.3, -0.1, 0.0, 0.2]))
    g = T.backward((out * Tensor(np.arange(4.0))).sum(), [w])[w]
    assert np.any(g != 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_entropy_bounds(seed):
    w = np.random.default_rng(seed).dirichlet(np.ones(4))
    assert 0.0 <= entropy(w) <= LN4 + 1e-12
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4))
    assert entropy(np.array([1.0, 0, 0, 0])) == 0.0


# -- reason memory -----------------------------------------------------------


def test_parse_triplets_format_and_errors():
    recs = parse_triplets(["# header\n", "dog\ton\tgrass\t2.5\n", "\n", "cat\tnear\tdog\t1\n"])
    assert recs == [TripletRecord("dog", "on", "grass", 2.5), TripletRecord("cat", "near", "dog", 1.0)]
    with pytest.raises(TripletFormatError, match=":2:"):
        parse_triplets(["a\tb\tc\t1\n", "a\tb\tc\n"])
    with pytest.raises(TripletFormatError, match="not a number"):
        parse_triplets(["a\tb\tc\theavy\n"])


def test_select_triplets_orders_filters_and_warns():
    recs = [TripletRecord("b", "p", "c", 1.0), TripletRecord("a", "p", "c", 1.0),
            TripletRecord("a", "p", "z", 5.0)]
    out = select_triplets(recs, K=2)
    assert [(r.subject, r.object) for r in out] == [("a", "z"), ("a", "c")]
    out = select_triplets(recs, K=2, vocabulary={"a", "b", "c"})
    assert [r.subject for r in out] == ["a", "b"]
    with pytest.warns(UserWarning, match="only 3"):
        assert len(select_triplets(recs, K=10)) == 3


def test_reason_attend_matches_oracle(rng):
    cfg = tiny_config()
    r = ReasonModule(cfg, rng)
    ids = r.ids(TRIPLETS)
    M = r.embed_triplets(ids)
    assert M.shape == (5, cfg.d_m)
    assert r.embed_triplet(TRIPLETS[0]).shape == (cfg.d_m,)
    v = rng.normal(size=16)
    vp, beta = r.attend(Tensor(v), M)
    oM = O.memory_rows(ids, r)
    np.testing.assert_allclose(M.data, oM, atol=1e-13)
    ovp, obeta = O.reason_attend(v, oM, r)
    np.testing.assert_allclose(vp.data, ovp, atol=1e-12)
    np.testing.assert_allclose(beta.data, obeta, atol=1e-12)


def test_reason_degenerate_memories(rng):
    r = ReasonModule(tiny_config(), rng)
    M1 = Tensor(rng.normal(size=(1, 4)))
    vp, beta = r.attend(Tensor(rng.normal(size=16)), M1)
    np.testing.assert_allclose(beta.data, [1.0])
    np.testing.assert_allclose(vp.data, M1.data[0])
    same = Tensor(np.tile(rng.normal(size=4), (3, 1)))
    _, beta = r.attend(Tensor(rng.normal(size=16)), same)
    np.testing.assert_allclose(beta.data, 1 / 3)
    with pytest.raises(ValueError):
        r.attend(Tensor(np.zeros(16)), Tensor(np.zeros((0, 4))))
    with pytest.raises(KeyError):
        r.ids([TripletRecord("unicorn", "on", "dog", 1.0)])


# -- decoder ------------------------------------------------------------------


def test_lstm_cell_matches_oracle(rng):
    cell = LSTMCell(5, 6, rng)
    x, h, c = rng.normal(size=5), rng.normal(size=6), rng.normal(size=6)
    h2, c2 = cell(Tensor(x), Tensor(h), Tensor(c))
    oh, oc = O.lstm(x, h, c, cell)
    np.testing.assert_allclose(h2.data, oh, atol=1e-13)
    np.testing.assert_allclose(c2.data, oc, atol=1e-13)


def test_lstm_zero_weights_halves_cell(rng):
    cell = LSTMCell(5, 6, rng)
    cell.gates.W.data[:] = 0.0
    c = rng.normal(size=6)
    h2, c2 = cell(Tensor(rng.normal(size=5)), Tensor(np.zeros(6)), Tensor(c))
    np.testing.assert_allclose(c2.data, 0.5 * c)
    np.testing.assert_allclose(h2.data, 0.5 * np.tanh(0.5 * c))


def test_lstm_shape_error(rng):
    with pytest.raises(ValueError):
        LSTMCell(5, 6, rng)(Tensor(np.zeros(4)), Tensor(np.zeros(6)), Tensor(np.zeros(6)))


def test_two_step_decode_matches_oracle(rng):
    model = tiny_model(seed=3)
    feats = random_features(rng)
    enc = model.encode([feats])
    outs = model.teacher_forced(enc, np.array([[1, 5]]))
    ref = O.decode(model, feats, [1, 5])
    for o, (lp, w) in zip(outs, ref):
        np.testing.assert_allclose(o.logp.data[0], lp, atol=1e-10)
        np.testing.assert_allclose(o.w.data[0], w, atol=1e-10)


def test_batched_greedy_equals_single(rng):
    model = tiny_model(seed=4)
    feats = [random_features(rng, n) for n in (2, 3, 5)]
    batch = model.greedy(feats, max_len=6)
    for f, b in zip(feats, batch):
        single = model.greedy([f], max_len=6)[0]
        assert single["tokens"] == b["tokens"]
        assert single["logp"] == pytest.approx(b["logp"], abs=1e-10)


def test_beam_one_equals_greedy_and_scores_agree(rng):
    model = tiny_model(seed=5)
    f = random_features(rng)
    g = model.greedy_decode(f, max_len=6)
    b = model.beam_search(f, beam_size=1, max_len=6)
    assert g["tokens"] == b["tokens"]
    assert b["logp"] == pytest.approx(model.score(f, b["full"]), abs=1e-10)
    b5 = model.beam_search(f, beam_size=5, max_len=6)
    assert b5["logp"] >= b["logp"] - 1e-12


def test_cut_module_renormalises(rng):
    model = tiny_model(seed=6)
    enc = model.encode([random_features(rng)])
    out = model.step([1], model.init_state(1), enc, cut="attribute")
    assert out.w.data[0, 1] == 0.0
    assert out.w.data.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        model.step([1], model.init_state(1), enc, cut="colour")


def test_step_input_validation(rng):
    model = tiny_model()
    enc = model.encode([random_features(rng)])
    with pytest.raises(IndexError):
        model.step([99], model.init_state(1), enc)
    with pytest.raises(ValueError, match="d_r"):
        model.encode([random_features(rng, d_r=6)])


@pytest.mark.parametrize("kw", [dict(modules=("object",), use_reason=False),
                                dict(fusion="ones"), dict(fusion="hard")])
def test_variant_configs_decode(rng, kw):
    model = tiny_model(**kw)
    enc = model.encode([random_features(rng)])
    out = model.step([1], model.init_state(1), enc, rng=rng)
    w = out.w.data[0]
    if kw.get("fusion") == "ones":
        np.testing.assert_array_equal(w, 1.0)
    elif kw.get("fusion") == "hard":
        assert sorted(w.tolist()) == [0, 0, 0, 1]
    else:
        np.testing.assert_array_equal(w, [1, 0, 0, 0])
    assert np.isfinite(out.logp.data).all()


def test_reason_requires_memory():
    with pytest.raises(ValueError):
        tiny_model(triplets=[])


def test_sample_masks_after_eos(rng):
    model = tiny_model(seed=8)
    enc = model.encode([random_features(rng) for _ in range(6)])
    toks, mask, seq_logp = model.sample(enc, np.random.default_rng(0), max_len=5)
    for row, m in zip(toks, mask):
        n = int(m.sum())
        assert not any(t == model.cfg.eos_id for t in row[:n - 1])
    assert seq_logp.shape == (6,)
    assert np.all(seq_logp.data <= 0)


def test_warnings_are_not_errors():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tiny_model()
