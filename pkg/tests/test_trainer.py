import math

import numpy as np
import pytest

from mmdial import autodiff as ad
from mmdial.autodiff import Tape, Tensor
from mmdial.batch import collate
from mmdial.corpus import DialogueSample
from mmdial.model import ModelConfig, forward, init_params
from mmdial.text import BOS_ID, CAP_ID, EOS_ID, USER1_ID, USER2_ID, VIDEO_ID, build_vocab, encode
from mmdial.trainer import (AdamState, AssemblyError, SkipSample, TrainConfig, Trainer, adam_update,
                            assemble_clm, assemble_rlm, assemble_vasm, clm_loss, rlm_loss,
                            train_step, vasm_loss)

from oracles import ref_cross_entropy, ref_squared_error


def toy_sample(n_turns=3, n_rows=3, dim=8):
    turns = [([f"q{i}", "?"], [f"r{i}"] * (i + 1)) for i in range(n_turns)]
    feats = np.arange(n_rows * dim, dtype=np.float32).reshape(n_rows, dim) / 10
    return DialogueSample("toy", ["a", "cap"], turns, feats)


@pytest.fixture
def toy():
    s = toy_sample()
    vocab = build_vocab(s.texts())
    cfg = ModelConfig(n_layers=1, hidden=8, n_heads=2, vocab_size=len(vocab), max_positions=64,
                      d_v=3, d_a=2, dropout=0.0)
    return s, vocab, cfg


def test_rlm_layout(toy):
    s, vocab, cfg = toy
    b = assemble_rlm(s, 2, 3, True, True, vocab, cfg)
    ids = lambda *w: encode(list(w), vocab)
    expected_tokens = ([BOS_ID] + [VIDEO_ID] * 3 + [CAP_ID] + ids("a", "cap")
                       + [USER1_ID] + ids("q0", "?") + [USER2_ID] + ids("r0")
                       + [USER1_ID] + ids("q1", "?") + [USER2_ID] + ids("r1", "r1") + [EOS_ID])
    assert b.token_ids.tolist() == expected_tokens
    segs = ([VIDEO_ID] * 4 + [CAP_ID] * 3 + [USER1_ID] * 3 + [USER2_ID] * 2
            + [USER1_ID] * 3 + [USER2_ID] * 4)
    assert b.segment_ids.tolist() == segs
    assert b.is_feature.tolist() == [False] + [True] * 3 + [False] * (len(b) - 4)
    np.testing.assert_array_equal(b.features[1:4], s.features)
    assert b.positions.tolist() == list(range(len(b)))
    # the [user2] slot predicts r1, then r1 predicts r1, then r1 predicts EOS
    assert np.flatnonzero(b.lm_mask).tolist() == [len(b) - 4, len(b) - 3, len(b) - 2]
    assert b.lm_targets[b.lm_mask].tolist() == ids("r1", "r1") + [EOS_ID]
    assert not b.feature_mask.any()


@pytest.mark.parametrize("k", [0, 1, 2, 3, 5, 9])
@pytest.mark.parametrize("n", [1, 2, 3])
def test_history_window(toy, k, n):
    s, vocab, cfg = toy
    b = assemble_rlm(s, n, k, True, True, vocab, cfg)
    assert (b.token_ids == USER1_ID).sum() - 1 == min(k, n - 1)


def test_history_truncated_oldest_first(toy):
    s, vocab, _ = toy
    cfg = ModelConfig(n_layers=1, hidden=8, n_heads=2, vocab_size=len(vocab), max_positions=22,
                      d_v=3, d_a=2)
    b = assemble_rlm(s, 3, 3, True, True, vocab, cfg)
    assert len(b) <= 22
    assert vocab.id("q1") in b.token_ids and vocab.id("q0") not in b.token_ids
    tight = ModelConfig(n_layers=1, hidden=8, n_heads=2, vocab_size=len(vocab), max_positions=10,
                        d_v=3, d_a=2)
    with pytest.raises(AssemblyError):
        assemble_rlm(s, 3, 3, True, True, vocab, tight)
    with pytest.raises(AssemblyError):
        assemble_rlm(s, 4, 3, True, True, vocab, tight)


def test_setting_flags_gate_context(toy):
    s, vocab, cfg = toy
    text_only = assemble_rlm(s, 2, 3, False, False, vocab, cfg)
    assert not text_only.is_feature.any() and VIDEO_ID not in text_only.token_ids
    assert CAP_ID not in text_only.token_ids
    no_cap = assemble_rlm(s, 2, 3, True, False, vocab, cfg)
    assert no_cap.is_feature.sum() == 3 and CAP_ID not in no_cap.token_ids


def test_vasm_layout_puts_video_last(toy):
    s, vocab, cfg = toy
    b = assemble_vasm(s, 3, vocab, cfg)
    assert b.is_feature[-3:].all() and not b.is_feature[:-3].any()
    assert np.flatnonzero(b.feature_mask).tolist() == [len(b) - 3, len(b) - 2]
    np.testing.assert_array_equal(b.feature_targets[b.feature_mask], s.features[1:])
    assert not b.lm_mask.any()
    with pytest.raises(SkipSample):
        assemble_vasm(toy_sample(n_rows=1), 3, vocab, cfg)


def test_clm_layout(toy):
    s, vocab, cfg = toy
    b = assemble_clm(s, vocab, cfg)
    assert b.token_ids.tolist() == [BOS_ID] + [VIDEO_ID] * 3 + [CAP_ID] + encode(["a", "cap"], vocab) + [EOS_ID]
    assert b.lm_targets[b.lm_mask].tolist() == encode(["a", "cap"], vocab) + [EOS_ID]
    assert np.flatnonzero(b.lm_mask).tolist() == [4, 5, 6]


def test_losses_match_straight_line_and_masks_gate_gradients(toy):
    s, vocab, cfg = toy
    p = init_params(cfg, seed=1, dtype=np.float64, std=0.5)
    for batch, fn in ((assemble_rlm(s, 3, 3, True, True, vocab, cfg), rlm_loss),
                      (assemble_clm(s, vocab, cfg), clm_loss)):
        logits, _ = forward(batch, p)
        leaf = Tensor(logits.data, requires_grad=True)
        with Tape():
            loss = fn(leaf, batch)
        assert abs(loss.item() - ref_cross_entropy(logits.data[0], batch.lm_targets, batch.lm_mask)) < 1e-6
        ad.backward(loss)
        assert np.all(leaf.grad[0][~batch.lm_mask] == 0)
        assert np.all(np.abs(leaf.grad[0][batch.lm_mask]).sum(axis=-1) > 0)
    batch = assemble_vasm(s, 3, vocab, cfg)
    _, preds = forward(batch, p)
    leaf = Tensor(preds.data, requires_grad=True)
    with Tape():
        loss = vasm_loss(leaf, batch)
    assert abs(loss.item() - ref_squared_error(preds.data[0], batch.feature_targets, batch.feature_mask)) < 1e-6
    ad.backward(loss)
    assert np.all(leaf.grad[0][~batch.feature_mask] == 0)


def test_loss_rejects_wrong_task(toy):
    s, vocab, cfg = toy
    b = assemble_clm(s, vocab, cfg)
    with pytest.raises(ValueError):
        rlm_loss(Tensor(np.zeros((1, len(b), cfg.vocab_size))), b)


def test_adam_matches_hand_formula(toy):
    _, _, cfg = toy
    p = init_params(cfg, dtype=np.float64)
    before = p["wte"].data.copy()
    grads = {n: np.full(t.shape, 0.5) for n, t in p.items()}
    st = AdamState(lr=0.1)
    adam_update(p, grads, st)
    # step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    np.testing.assert_allclose(p["wte"].data, before - 0.1 * 0.5 / (0.5 + 1e-8), atol=1e-15)
    adam_update(p, grads, st)
    np.testing.assert_allclose(p["wte"].data, before - 2 * 0.1 * 0.5 / (0.5 + 1e-8), atol=1e-12)
    with pytest.raises(ValueError):
        adam_update(p, {}, st)


def test_train_step_clips_and_skips_nonfinite(toy):
    s, vocab, cfg = toy
    p = init_params(cfg, dtype=np.float64, std=0.5)
    batches = {"rlm": collate([assemble_rlm(s, 3, 3, True, True, vocab, cfg)])}
    st = AdamState(lr=1e-3)
    r = train_step(batches, p, st, {"rlm": 1.0}, clip=1e-3)
    assert r.grad_norm > 1e-3 and st.t == 1
    assert all(np.isfinite(m).all() for m in st.m.values())
    before = {n: t.data.copy() for n, t in p.items()}
    p["reg.b"].data[:] = 1e200
    vb = {"vasm": collate([assemble_vasm(s, 3, vocab, cfg)])}
    with np.errstate(over="ignore", invalid="ignore"):
        r = train_step(vb, p, st, {"vasm": 1.0})
    assert r.skipped and st.t == 1
    assert all(np.array_equal(before[n], t.data) for n, t in p.items() if n != "reg.b")
    with pytest.raises(ValueError):
        train_step(batches, p, st, {"rlm": 0.0})


def _trainer(samples, vocab, cfg, tc):
    return Trainer(init_params(cfg, seed=tc.seed, dtype=np.float64), vocab, samples, tc)


def test_training_is_deterministic_and_resumable(tmp_path, tiny_data):
    samples, _, vocab = tiny_data
    cfg = ModelConfig(n_layers=1, hidden=8, n_heads=2, vocab_size=len(vocab), max_positions=96,
                      d_v=3, d_a=2, dropout=0.1)
    tc = TrainConfig(batch_size=4, steps=6, seed=3, lr=1e-3)
    a = _trainer(samples, vocab, cfg, tc)
    a.run()
    b = _trainer(samples, vocab, cfg, tc)
    b.run()
    a.save(tmp_path / "a.mmdf")
    b.save(tmp_path / "b.mmdf")
    assert (tmp_path / "a.mmdf").read_bytes() == (tmp_path / "b.mmdf").read_bytes()
    c = _trainer(samples, vocab, cfg, tc)
    c.run(3)
    c.save(tmp_path / "mid.mmdf")
    d = Trainer.resume(tmp_path / "mid.mmdf", samples)
    assert d.config == tc
    d.run(3)
    assert [r.losses for r in c.history] + [r.losses for r in d.history] == [r.losses for r in a.history]
    d.save(tmp_path / "d.mmdf")
    assert (tmp_path / "d.mmdf").read_bytes() == (tmp_path / "a.mmdf").read_bytes()


def test_batches_cover_each_epoch_once(tiny_data, tiny_config):
    samples, _, vocab = tiny_data
    t = _trainer(samples, vocab, tiny_config, TrainConfig(batch_size=8))
    pool = len(t._pools["rlm"])
    seen = [it for k in range(pool // 8) for it in t.batch_items("rlm", k)]
    assert len(set(seen)) == len(seen)


def test_sample_mixing_uses_one_task(tiny_data, tiny_config):
    samples, _, vocab = tiny_data
    t = _trainer(samples, vocab, tiny_config, TrainConfig(batch_size=2, mixing="sample"))
    for _ in range(3):
        assert len(t.step().losses) == 1


def test_zero_weight_task_is_not_assembled(tiny_data, tiny_config, monkeypatch):
    samples, _, vocab = tiny_data
    from mmdial import trainer as T
    monkeypatch.setattr(T, "assemble_vasm", lambda *a, **k: pytest.fail("vasm assembled"))
    tc = TrainConfig(batch_size=2, weights={"rlm": 1.0, "vasm": 0.0, "clm": 1.0})
    r = _trainer(samples, vocab, tiny_config, tc).step()
    assert set(r.losses) == {"rlm", "clm"} and math.isfinite(r.total)
