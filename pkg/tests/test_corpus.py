import json
from dataclasses import replace

import numpy as np
import pytest

from emocat.corpus import (CLASS_NAMES, CorpusSpec, FeatureFileError, anchor_distance, class_counts,
                           emotion_anchors, generate_corpus, oracle_embedding, parse_target, phoneme_range,
                           read_corpus, read_features, split_heldout, synth_utterance, write_corpus,
                           write_features)
from emocat.evaluate import EmotionDetector

SMALL = CorpusSpec(neutral_a=12, emotional_a=24, neutral_b=12, emotional_b=12, t_min=20, t_max=30)


@pytest.fixture(scope="module")
def default_corpus():
    return generate_corpus(CorpusSpec())


def test_generation_is_bitwise_reproducible():
    a, b = generate_corpus(SMALL), generate_corpus(SMALL)
    assert [r.id for r in a] == [r.id for r in b]
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert np.array_equal(x.phoneme_ids, y.phoneme_ids)
        assert x.embedding.tobytes() == y.embedding.tobytes()


def test_record_invariants(default_corpus):
    for r in default_corpus:
        assert (r.emotion == "neutral") == (r.intensity == "none")
        assert r.n_frames >= 10
        lo, hi = phoneme_range(r.language, CorpusSpec())
        assert r.phoneme_ids.min() >= lo and r.phoneme_ids.max() < hi
        assert r.features.min() >= 0 and r.features.max() <= 1
        assert r.features.shape == (r.n_frames, 80) and len(r.phoneme_ids) == r.n_frames


def test_phoneme_ranges_disjoint(default_corpus):
    used = {lang: set() for lang in "AB"}
    for r in default_corpus:
        used[r.language].update(int(p) for p in r.phoneme_ids)
    assert used["A"] and used["B"]
    assert not used["A"] & used["B"]


def test_default_proportions():
    counts = CorpusSpec().counts()
    for lang in "AB":
        for emo in ("excited", "disappointed"):
            low, med, high = (counts[(lang, emo, lv)] for lv in ("low", "medium", "high"))
            assert med == low + high and low == high
    assert sum(v for (l, e, _), v in counts.items() if l == "B" and e == "neutral") == 568
    assert sum(v for (l, e, _), v in counts.items() if l == "B" and e != "neutral") == 32


def test_neutral_without_noise_scores_zero():
    spec = replace(SMALL, noise=0.0)
    rec = synth_utterance(spec, "B", 0, "neutral", "none")
    bands = spec.bands()
    assert np.all(rec.features[:, bands[0]] == 0) and np.all(rec.features[:, bands[2]] == 0)
    s = EmotionDetector(spec).scores(rec.features)
    assert s == {"excited": 0.0, "disappointed": 0.0}


@pytest.mark.parametrize("emotion,band", [("excited", 2), ("disappointed", 0)])
def test_twin_residual_sits_in_signature_bands(emotion, band):
    spec = CorpusSpec()
    emo = synth_utterance(spec, "A", 5, emotion, "high")
    twin = synth_utterance(spec, "A", 5, "neutral", "none")
    resid = (emo.features - twin.features) ** 2
    share = resid[:, spec.bands()[band]].sum() / resid.sum()
    assert share >= 0.95


def test_detector_is_exact_without_noise():
    spec = replace(SMALL, noise=0.0)
    det = EmotionDetector(spec)
    for r in generate_corpus(spec):
        assert det.detect(r.features)[0] == r.label


def test_detector_at_default_noise(default_corpus):
    det = EmotionDetector(CorpusSpec())
    hits = [det.detect(r.features)[0] == r.label for r in default_corpus]
    assert np.mean(hits) >= 0.95


def test_embeddings():
    anchors = emotion_anchors()
    for c, name in enumerate(CLASS_NAMES):
        emo, lv = (name.split(":") + ["none"])[:2]
        np.testing.assert_array_equal(oracle_embedding(emo, lv, 3, jitter=0), anchors[c])
    unit = anchors / np.linalg.norm(anchors, axis=1, keepdims=True)
    cos = unit @ unit.T
    assert np.all(cos[~np.eye(7, dtype=bool)] <= 0.5)
    for c, name in enumerate(CLASS_NAMES):
        emo, lv = (name.split(":") + ["none"])[:2]
        a, b = oracle_embedding(emo, lv, 1), oracle_embedding(emo, lv, 2)
        assert np.linalg.norm(a - anchors[c]) <= 0.1 * anchor_distance() + 1e-12
        assert a @ b / np.linalg.norm(a) / np.linalg.norm(b) >= 0.95


def test_parse_target():
    assert CLASS_NAMES[parse_target("excited:high")] == "excited:high"
    assert parse_target("neutral") == 0
    for bad in ("excited", "angry:low", "disappointed:extreme"):
        with pytest.raises(ValueError):
            parse_target(bad)


# ------------------------------------------------------------------ files


def test_feature_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(size=(37, 80)).astype(np.float32).astype(np.float64)
    write_features(tmp_path / "u.emf", x)
    assert read_features(tmp_path / "u.emf").tobytes() == x.tobytes()


def test_feature_errors(tmp_path):
    x = np.ones((4, 3))
    p = tmp_path / "u.emf"
    write_features(p, x)
    blob = p.read_bytes()
    p.write_bytes(blob[:-5])
    with pytest.raises(FeatureFileError, match=r"expected 60 bytes.*got 55"):
        read_features(p)
    p.write_bytes(b"EMF2" + blob[4:])
    with pytest.raises(FeatureFileError, match="magic"):
        read_features(p)
    p.write_bytes(blob[:6])
    with pytest.raises(FeatureFileError, match="truncated"):
        read_features(p)
    with pytest.raises(ValueError):
        write_features(p, np.zeros((0, 80)))


def test_corpus_directory_round_trip(tmp_path):
    recs = generate_corpus(SMALL)
    write_corpus(recs, tmp_path, SMALL)
    back = read_corpus(tmp_path)
    assert [r.id for r in back] == [r.id for r in recs]
    for a, b in zip(recs, back):
        assert a.features.tobytes() == b.features.tobytes()
        assert np.array_equal(a.embedding, b.embedding)
    summary = json.loads((tmp_path / "summary.json").read_text())
    counted = class_counts(recs)
    for c, name in enumerate(CLASS_NAMES):
        assert summary["class_counts"][f"A/{name}"] + summary["class_counts"][f"B/{name}"] == counted[c]
    assert summary["warnings"] == []


def test_zero_count_class_warns(tmp_path):
    spec = replace(SMALL, emotional_b=0)
    write_corpus(generate_corpus(spec), tmp_path, spec)
    warnings = json.loads((tmp_path / "summary.json").read_text())["warnings"]
    assert "no utterances for B/excited:low" in warnings


def test_heldout_split(default_corpus):
    train, test = split_heldout(default_corpus)
    assert len(test) == 20 and len(train) == len(default_corpus) - 20
    assert all(r.language == "B" and r.emotion == "neutral" for r in test)
    assert not {r.id for r in train} & {r.id for r in test}
