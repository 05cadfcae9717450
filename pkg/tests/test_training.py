import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_features, tiny_model
from cvlnm import tensor as T
from cvlnm import training
from cvlnm.checkpoint import load as load_checkpoint
from cvlnm.data import SynthConfig, generate_corpus, split_corpus
from cvlnm.tensor import Tensor
from cvlnm.training import (TrainConfig, Trainer, TrainingDiverged, scst_loss, self_critical_loss,
                            syntax_loss, total_loss, xe_loss)

# -- syntax loss ------------------------------------------------------------------


def test_syntax_loss_examples():
    one = Tensor(np.array([[[1.0, 0, 0, 0]]]))
    assert syntax_loss(one, np.array([[0]])).item() == pytest.approx(0.0)
    uni = Tensor(np.full((1, 3, 4), 0.25))
    assert syntax_loss(uni, np.array([[0, 2, 3]])).item() == pytest.approx(math.log(4))
    w = Tensor(np.array([[[0.7, 0.1, 0.1, 0.1]]]))
    assert syntax_loss(w, np.array([[0]])).item() == pytest.approx(0.3567, abs=1e-4)


def test_syntax_loss_averages_steps_then_sequences():
    w = np.full((2, 3, 4), 0.25)
    w[0, 0] = [0.5, 0.5, 0.0, 0.0]
    gold = np.array([[0, 1, -1], [2, -1, -1]])
    # seq 0: mean(-ln .5, -ln .25); seq 1: -ln .25
    expect = 0.5 * (0.5 * (math.log(2) + math.log(4)) + math.log(4))
    assert syntax_loss(Tensor(w), gold).item() == pytest.approx(expect)
    # an untagged sequence does not dilute the mean
    gold2 = np.array([[0, 1, -1], [-1, -1, -1]])
    assert syntax_loss(Tensor(w), gold2).item() == pytest.approx(0.5 * (math.log(2) + math.log(4)))


def test_syntax_loss_clamps_zero_weight():
    w = Tensor(np.array([[[0.0, 1.0, 0.0, 0.0]]]))
    assert syntax_loss(w, np.array([[0]])).item() == pytest.approx(-math.log(1e-12))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_syntax_loss_zero_iff_exact(seed):
    rng = np.random.default_rng(seed)
    gold = rng.integers(0, 4, size=(2, 5))
    exact = np.eye(4)[gold]
    assert syntax_loss(Tensor(exact), gold).item() == pytest.approx(0.0, abs=1e-12)
    soft = rng.dirichlet(np.ones(4), size=(2, 5))
    assert syntax_loss(Tensor(soft), gold).item() > 0


# -- language loss -------------------------------------------------------------------


def test_xe_loss_examples():
    perfect = np.full((1, 2, 4), -np.inf)
    perfect[0, 0, 1] = perfect[0, 1, 3] = 0.0
    assert xe_loss(Tensor(np.where(np.isinf(perfect), -50.0, perfect)), [[1, 3]]).item() == 0.0
    uni = Tensor(np.log(np.full((1, 2, 4), 0.25)))
    assert xe_loss(uni, [[0, 2]]).item() == pytest.approx(2 * math.log(4))
    with pytest.raises(IndexError):
        xe_loss(uni, [[0, 4]])


def test_xe_loss_matches_scalar_sum():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 4, 6))
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    tgt = rng.integers(0, 6, size=(3, 4))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=float)
    total = 0.0
    for b in range(3):
        for t in range(4):
            if mask[b, t]:
                total -= logp[b, t, tgt[b, t]]
    assert xe_loss(Tensor(logp), tgt, mask).item() == pytest.approx(total / 3, abs=1e-13)


def test_total_loss():
    assert total_loss(2.0, 1.0, 0.0) == 2.0
    assert total_loss(2.0, 1.0, 0.5) == 2.5
    with pytest.raises(ValueError):
        total_loss(2.0, 1.0, -1.0)


def test_total_loss_gradient_is_sum_of_parts(rng):
    model = tiny_model(seed=1)
    enc = model.encode([random_features(rng), random_features(rng)])
    inputs = np.array([[1, 4, 5], [1, 6, 7]])
    targets = np.array([[4, 5, 2], [6, 7, 2]])
    gold = np.array([[3, 0, -1], [1, 2, -1]])
    params = list(model.named_parameters().values())

    def parts():
        outs = model.teacher_forced(enc, inputs)
        return xe_loss(training.stacked_logp(outs), targets), syntax_loss(training.stacked_w(outs), gold)

    lam = 0.7
    l, s = parts()
    g_total = T.backward(total_loss(l, s, lam), params)
    g_l = T.backward(parts()[0], params)
    g_s = T.backward(parts()[1], params)
    for p in params:
        np.testing.assert_allclose(g_total[p], g_l[p] + lam * g_s[p], rtol=1e-10, atol=1e-14)


# -- self-critical loss ---------------------------------------------------------------


def test_equal_rewards_give_zero_gradient():
    lp = Tensor(np.array([-1.2, -0.3]), requires_grad=True)
    loss, adv = self_critical_loss(lp, [0.4, 0.9], [0.4, 0.9])
    np.testing.assert_array_equal(adv, 0.0)
    np.testing.assert_array_equal(T.backward(loss, [lp])[lp], 0.0)


def test_self_critical_gradient_sign():
    lp = Tensor(np.array([-1.0, -1.0]), requires_grad=True)
    loss, _ = self_critical_loss(lp, [1.0, 0.0], [0.5, 0.5])
    # better-than-baseline samples get their log-probability pushed up
    np.testing.assert_allclose(T.backward(loss, [lp])[lp], [-0.25, 0.25])


def test_scst_constant_reward_has_zero_gradient(rng):
    model = tiny_model(seed=2)
    feats = [random_features(rng) for _ in range(3)]
    params = list(model.named_parameters().values())
    loss, diag = scst_loss(model, feats, [[[4, 5]]] * 3, lambda c, r: 0.3, np.random.default_rng(5))
    nonempty = [bool(s) for s in diag["samples"]]
    assert diag["advantage"][np.array(nonempty) & np.array([bool(g) for g in diag["greedy"]])].sum() == 0
    if all(nonempty) and all(diag["greedy"]):
        for g in T.backward(loss, params).values():
            np.testing.assert_array_equal(g, 0.0)


def test_scst_empty_sample_scores_zero(rng):
    model = tiny_model(seed=2)
    model.out.b.data[:] = -30.0
    model.out.b.data[model.cfg.eos_id] = 30.0
    calls = []
    loss, diag = scst_loss(model, [random_features(rng)], [[[4]]],
                           lambda c, r: calls.append(c) or 1.0, np.random.default_rng(0))
    assert diag["samples"] == [[]] and diag["reward_sample"] == 0.0
    assert calls == []


# -- training loop ---------------------------------------------------------------------------


SMALL = dict(d_v=8, k=2, d_h=12, d_a=8, d_z=8, j=2, d_e=6, d_m=6, K=16, d_word=8)


@pytest.fixture(scope="module")
def small_corpus():
    corpus = generate_corpus(24, seed=0, cfg=SynthConfig(d_r=8))
    return corpus


def small_cfg(**kw):
    base = dict(epochs_xe=2, epochs_rl=1, batch_size=16, min_count=1, lr=2e-3, seed=3,
                decay_every=1, model=SMALL, eval_cider=True)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lamda": 1})
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    d = TrainConfig().to_dict()
    assert (d["epochs_xe"], d["epochs_rl"], d["batch_size"], d["lr"]) == (35, 65, 100, 5e-4)
    assert (d["lam"], d["lam_rl"]) == (1.0, 0.5)
    assert TrainConfig.from_dict(d) == TrainConfig()


def test_training_is_deterministic_and_phases_logged(small_corpus, tmp_path):
    parts = split_corpus(small_corpus)
    h1 = Trainer(small_corpus, small_cfg(), val=parts["val"] or None, out_dir=tmp_path).run()
    h2 = Trainer(small_corpus, small_cfg()).run()
    keys = ("loss_l", "loss_s", "lr")
    assert [[r[k] for k in keys] for r in h1] == [[r[k] for k in keys] for r in h2]
    assert [r["phase"] for r in h1] == ["xe", "xe", "rl"]
    assert [r["lr"] for r in h1] == pytest.approx([2e-3, 1.6e-3, 1.28e-3])
    assert "reward" in h1[2] and "train_layout_acc" in h1[0]
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert (tmp_path / "epoch_002.cvlc").exists() and (tmp_path / "last.cvlc").exists()


def test_resume_reproduces_uninterrupted_run(small_corpus, tmp_path):
    full = Trainer(small_corpus, small_cfg(), out_dir=tmp_path / "a")
    full.run()
    part = Trainer(small_corpus, small_cfg(), out_dir=tmp_path / "b")
    part.run(epochs=1)
    resumed = Trainer(small_corpus, small_cfg(), out_dir=tmp_path / "b",
                      resume=tmp_path / "b" / "epoch_001.cvlc")
    assert resumed.epoch == 1
    resumed.run()
    assert resumed.history == full.history
    a = load_checkpoint(tmp_path / "a" / "last.cvlc").model.named_parameters()
    b = load_checkpoint(tmp_path / "b" / "last.cvlc").model.named_parameters()
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_nan_loss_halts_and_keeps_last_good(small_corpus, tmp_path, monkeypatch):
    tr = Trainer(small_corpus, small_cfg(epochs_rl=0), out_dir=tmp_path)
    tr.run(epochs=1)
    good = {n: p.data.copy() for n, p in tr.params.items()}
    t_before = tr.opt.state.t
    real = training.xe_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        out = real(*a, **kw)
        return out * float("nan") if calls["n"] == 2 else out

    monkeypatch.setattr(training, "xe_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        tr.run()
    assert info.value.last_checkpoint.endswith("epoch_001.cvlc")
    assert tr.epoch == 1 and tr.opt.state.t == t_before
    for n, p in tr.params.items():
        np.testing.assert_array_equal(p.data, good[n])
    ck = load_checkpoint(info.value.last_checkpoint)
    assert ck.train_state["epoch"] == 1


def test_subsampled_training_uses_x_captions(small_corpus):
    tr = Trainer(small_corpus, small_cfg(captions_per_image=2))
    assert all(len(im.captions) == 2 for im in tr.train.images)


def test_empty_corpus_rejected(small_corpus):
    with pytest.raises(ValueError):
        Trainer(small_corpus.subset([]), small_cfg())
