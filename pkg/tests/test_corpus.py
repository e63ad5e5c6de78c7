import json

import numpy as np
import pytest

from mmdial import corpus
from mmdial.corpus import (DatasetError, FeatureFileError, SyntheticOracle, SyntheticSpec,
                           generate_synthetic, load_dataset, read_features, write_features)


def test_feature_roundtrip_is_bit_exact(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 40)).astype(np.float32)
    write_features(tmp_path / "a.vaft", x)
    y = read_features(tmp_path / "a.vaft", expected_dim=40)
    assert y.dtype == np.float32 and y.tobytes() == x.tobytes()


def test_feature_file_errors(tmp_path):
    with pytest.raises(FeatureFileError):
        write_features(tmp_path / "z.vaft", np.zeros((0, 4)))
    with pytest.raises(FeatureFileError):
        write_features(tmp_path / "n.vaft", np.array([[np.nan]]))
    write_features(tmp_path / "a.vaft", np.ones((3, 5)))
    with pytest.raises(FeatureFileError, match="dim"):
        read_features(tmp_path / "a.vaft", expected_dim=40)
    (tmp_path / "bad.vaft").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FeatureFileError, match="magic"):
        read_features(tmp_path / "bad.vaft")
    raw = (tmp_path / "a.vaft").read_bytes()
    (tmp_path / "short.vaft").write_bytes(raw[:-4])
    with pytest.raises(FeatureFileError, match="truncated"):
        read_features(tmp_path / "short.vaft")


def _write_avsd(tmp_path, dialogs, with_features=True):
    (tmp_path / "feat").mkdir(exist_ok=True)
    (tmp_path / "d.json").write_text(json.dumps({"dialogs": dialogs}))
    if with_features:
        for d in dialogs:
            write_features(tmp_path / "feat" / f"{d['image_id']}.vaft", np.ones((3, 4)))
    return tmp_path / "d.json", tmp_path / "feat"


def _dialog(vid, n=10, summary="A summary."):
    d = {"image_id": vid, "caption": "A caption.",
         "dialog": [{"question": f"q{i} ?", "answer": f"a{i}"} for i in range(n)]}
    if summary is not None:
        d["summary"] = summary
    return d


def test_load_dataset_two_dialogues(tmp_path):
    paths = _write_avsd(tmp_path, [_dialog("v1"), _dialog("v2", summary=None)])
    samples = load_dataset(*paths, expected_dim=4)
    assert [s.video_id for s in samples] == ["v1", "v2"]
    assert [s.n_turns for s in samples] == [10, 10]
    assert samples[0].caption == ["a", "summary", ".", "a", "caption", "."]
    assert samples[1].caption == ["a", "caption", "."]
    assert samples[0].turns[3] == (["q3", "?"], ["a3"])


def test_load_dataset_empty_and_missing_features(tmp_path):
    assert load_dataset(*_write_avsd(tmp_path, [])) == []
    paths = _write_avsd(tmp_path, [_dialog("v9")], with_features=False)
    with pytest.raises(DatasetError, match="v9"):
        load_dataset(*paths)


def test_load_dataset_malformed_record(tmp_path):
    (tmp_path / "feat").mkdir()
    (tmp_path / "d.jsonl").write_text(json.dumps(_dialog("v1")) + "\n{not json\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_dataset(tmp_path / "d.jsonl", tmp_path / "feat")
    (tmp_path / "e.json").write_text(json.dumps([{"image_id": "v1"}]))
    with pytest.raises(DatasetError, match="record 0"):
        load_dataset(tmp_path / "e.json", tmp_path / "feat")


def test_synthetic_generation_is_deterministic():
    spec = SyntheticSpec(n_dialogues=20, seed=11)
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    for x, y in zip(a, b):
        assert x.video_id == y.video_id and x.turns == y.turns and x.caption == y.caption
        assert x.features.tobytes() == y.features.tobytes()


def test_zero_noise_gives_zero_oracle_mse():
    samples, oracle = generate_synthetic(SyntheticSpec(n_dialogues=10, noise_std=0.0))
    assert oracle.next_feature_mse(samples) < 1e-10


def test_oracle_accuracy_and_consistency():
    samples, oracle = generate_synthetic(SyntheticSpec(n_dialogues=2000, n_activities=4, noise_std=0.05))
    assert oracle.bayes_accuracy >= 0.99
    assert abs(oracle.token_accuracy(samples) - oracle.bayes_accuracy) <= 1e-12
    restored = SyntheticOracle.from_record(json.loads(json.dumps(oracle.record())))
    assert abs(restored.token_accuracy(samples) - oracle.bayes_accuracy) <= 1e-12


def test_history_dependent_answers_need_history():
    samples, oracle = generate_synthetic(SyntheticSpec(n_dialogues=300))
    assert oracle.token_accuracy(samples, max_history=0) < oracle.token_accuracy(samples, max_history=1)


def test_separation_is_validated():
    with pytest.raises(ValueError, match="separation"):
        SyntheticSpec(noise_std=0.5).validate()


def test_vocabulary_is_closed():
    spec = SyntheticSpec(n_dialogues=200)
    samples, _ = generate_synthetic(spec)
    words = {w for s in samples for t in s.texts() for w in t.split()}
    assert words <= spec.template_tokens()


def test_save_synthetic_splits_are_disjoint(tmp_path):
    samples, oracle = generate_synthetic(SyntheticSpec(n_dialogues=30, seed=2))
    corpus.save_synthetic(tmp_path, samples, oracle, n_val=5, n_test=7)
    parts = [set(corpus.read_split(tmp_path / f"{n}.txt")) for n in ("train", "val", "test")]
    assert [len(p) for p in parts] == [18, 5, 7]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    loaded = load_dataset(tmp_path / "dialogs.json", tmp_path / "features", 40)
    assert [s.turns for s in loaded] == [s.turns for s in samples]
    assert all(a.features.tobytes() == b.features.tobytes() for a, b in zip(loaded, samples))
    assert [s.caption for s in loaded] == [s.caption for s in samples]
