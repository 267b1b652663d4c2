"""Synthetic bilingual emotional corpus with analytically known emotion content.

Every utterance is a pseudo-spectrogram (T x F, values in [0, 1]):

    x = clip(m(t) * (content + signature) + noise, 0, 1)

* ``content`` - smoothed, phoneme-dependent band patterns confined to the
  middle half of the bands;
* ``m(t)`` - a slow per-utterance sinusoidal contour (a stand-in for prosody);
* ``signature`` - a fixed spectral shape on the excited bands (top quarter)
  or the disappointed bands (bottom quarter), scaled by gain * {1, 2, 3} for
  low / medium / high intensity.

Language A and B use disjoint phoneme id ranges.  Generation is a pure
function of the :class:`CorpusSpec`.
"""
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LANGUAGES = ("A", "B")
EMOTIONS = ("neutral", "excited", "disappointed")
LEVELS = ("low", "medium", "high")
CLASS_NAMES = ("neutral",) + tuple(f"{e}:{lv}" for e in EMOTIONS[1:] for lv in LEVELS)
EMBEDDING_DIM = 64

# anchors are a fixed property of the generator, not of the corpus seed
_ANCHOR_SEED = 20201
_ANCHOR_RADIUS = 1.0
PROSODY_DEPTH = 0.3


def class_index(emotion, intensity="none"):
    if emotion == "neutral":
        if intensity not in ("none", None):
            raise ValueError("neutral utterances carry intensity 'none'")
        return 0
    if emotion not in EMOTIONS or intensity not in LEVELS:
        raise ValueError(f"unknown class {emotion}:{intensity}")
    return CLASS_NAMES.index(f"{emotion}:{intensity}")


def class_parts(index):
    name = CLASS_NAMES[index]
    if name == "neutral":
        return "neutral", "none"
    return tuple(name.split(":"))


def parse_target(text):
    """``"excited:high"`` -> class index; ``"neutral"`` is also accepted."""
    text = text.strip().lower()
    if text in ("neutral", "neutral:none"):
        return 0
    if text not in CLASS_NAMES:
        raise ValueError(f"unknown target class {text!r}; expected one of {', '.join(CLASS_NAMES)}")
    return CLASS_NAMES.index(text)


def coarse_label(index):
    """Collapse the 7 fine classes to neutral / excited / disappointed."""
    return EMOTIONS.index(class_parts(index)[0])


@dataclass
class CorpusSpec:
    seed: int = 7
    neutral_a: int = 400
    emotional_a: int = 200
    neutral_b: int = 568
    emotional_b: int = 32
    intensity_split: tuple = (0.25, 0.5, 0.25)
    t_min: int = 40
    t_max: int = 120
    feature_dim: int = 80
    phonemes_per_language: int = 30
    signature_gain: float = 0.1
    noise: float = 0.01
    jitter: float = 0.1

    def __post_init__(self):
        self.intensity_split = tuple(float(v) for v in self.intensity_split)
        if self.t_min < 10 or self.t_max < self.t_min:
            raise ValueError("need 10 <= t_min <= t_max")
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be at least 8")
        if abs(sum(self.intensity_split) - 1.0) > 1e-9 or len(self.intensity_split) != 3:
            raise ValueError("intensity_split must be three fractions summing to 1")
        if not 0 <= self.jitter <= 0.1:
            raise ValueError("jitter must lie in [0, 0.1] of the inter-anchor distance")

    def counts(self):
        """Utterance count per (language, emotion, intensity)."""
        out = {}
        for lang, neutral, emotional in (("A", self.neutral_a, self.emotional_a),
                                         ("B", self.neutral_b, self.emotional_b)):
            out[(lang, "neutral", "none")] = neutral
            per_emotion = [emotional // 2 + (1 if i < emotional % 2 else 0) for i in range(2)]
            for emo, n in zip(EMOTIONS[1:], per_emotion):
                for lv, k in zip(LEVELS, _split_counts(n, self.intensity_split)):
                    out[(lang, emo, lv)] = k
        return out

    def bands(self):
        """(disappointed, content, excited) band slices."""
        q = self.feature_dim // 4
        return slice(0, q), slice(q, self.feature_dim - q), slice(self.feature_dim - q, self.feature_dim)


def _split_counts(n, fractions):
    raw = np.asarray(fractions) * n
    base = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - base), kind="stable")[: n - base.sum()]:
        base[i] += 1
    return [int(v) for v in base]


def phoneme_range(language, spec):
    k = LANGUAGES.index(language)
    n = spec.phonemes_per_language
    return k * n, (k + 1) * n


@dataclass
class UtteranceRecord:
    id: str
    language: str
    emotion: str
    intensity: str
    features: np.ndarray
    phoneme_ids: np.ndarray
    embedding: np.ndarray = field(repr=False)

    @property
    def label(self):
        return class_index(self.emotion, self.intensity)

    @property
    def class_name(self):
        return CLASS_NAMES[self.label]

    @property
    def n_frames(self):
        return self.features.shape[0]


# ------------------------------------------------------------------ embeddings


def emotion_anchors(dim=EMBEDDING_DIM):
    """Seven orthogonal anchor vectors (one per fine class), rows of a (7, dim) array."""
    rng = np.random.default_rng(_ANCHOR_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((dim, len(CLASS_NAMES))))
    return _ANCHOR_RADIUS * q.T


def anchor_distance():
    return _ANCHOR_RADIUS * np.sqrt(2.0)


def oracle_embedding(emotion, intensity, seed, jitter=0.1, dim=EMBEDDING_DIM):
    """Class anchor plus a seeded jitter whose norm is at most ``jitter`` x inter-anchor distance."""
    anchor = emotion_anchors(dim)[class_index(emotion, intensity)]
    if jitter == 0:
        return anchor.copy()
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return anchor + direction * rng.uniform(0.0, 1.0) * jitter * anchor_distance()


# ------------------------------------------------------------------ generation


def _phoneme_inventory(spec, language):
    rng = np.random.default_rng([spec.seed, 999, LANGUAGES.index(language)])
    F = spec.feature_dim
    content = spec.bands()[1]
    bins = np.arange(F)
    inv = np.zeros((spec.phonemes_per_language, F))
    for p in range(spec.phonemes_per_language):
        for _ in range(2):
            centre = rng.uniform(content.start + 2, content.stop - 2)
            width = rng.uniform(1.5, 4.0)
            inv[p] += rng.uniform(0.2, 0.45) * np.exp(-0.5 * ((bins - centre) / width) ** 2)
    window = np.zeros(F)
    window[content] = 1.0
    return inv * window


def signature_shape(spec):
    q = spec.feature_dim // 4
    return np.sin(np.pi * (np.arange(q) + 0.5) / q)


def synth_utterance(spec, language, index, emotion, intensity, inventory=None):
    """One utterance; all random draws except the signature are class-independent."""
    lang = LANGUAGES.index(language)
    rng = np.random.default_rng([spec.seed, lang, index])
    if inventory is None:
        inventory = _phoneme_inventory(spec, language)
    T = int(rng.integers(spec.t_min, spec.t_max + 1))

    local = []
    while len(local) < T:
        local.extend([int(rng.integers(spec.phonemes_per_language))] * int(rng.integers(3, 9)))
    local = np.asarray(local[:T])

    base = inventory[local]
    padded = np.concatenate([base[:1], base, base[-1:]])
    base = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]

    period = rng.uniform(16.0, 40.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    contour = 1.0 + PROSODY_DEPTH * np.sin(2 * np.pi * np.arange(T) / period + phase)
    noise = rng.standard_normal((T, spec.feature_dim)) * spec.noise

    sig = np.zeros_like(base)
    if emotion != "neutral":
        bands = spec.bands()
        target = bands[2] if emotion == "excited" else bands[0]
        sig[:, target] = spec.signature_gain * (LEVELS.index(intensity) + 1) * signature_shape(spec)

    x = np.clip(contour[:, None] * (base + sig) + noise, 0.0, 1.0)
    features = x.astype(np.float32).astype(np.float64)
    lo, _ = phoneme_range(language, spec)
    embedding = oracle_embedding(emotion, intensity, [spec.seed, lang, index, 1], spec.jitter)
    return UtteranceRecord(
        id=f"{language}{index:05d}", language=language, emotion=emotion, intensity=intensity,
        features=features, phoneme_ids=local + lo, embedding=embedding)


def generate_corpus(spec):
    records = []
    for language in LANGUAGES:
        inventory = _phoneme_inventory(spec, language)
        index = 0
        for (lang, emotion, intensity), n in spec.counts().items():
            if lang != language:
                continue
            for _ in range(n):
                records.append(synth_utterance(spec, language, index, emotion, intensity, inventory))
                index += 1
    return records


def corpus_warnings(spec):
    return [f"no utterances for {lang}/{CLASS_NAMES[class_index(e, i)]}"
            for (lang, e, i), n in spec.counts().items() if n == 0]


def class_counts(records, num_classes=len(CLASS_NAMES)):
    return np.bincount([r.label for r in records], minlength=num_classes)


def split_heldout(records, n_heldout=20, language="B"):
    """Reserve the last ``n_heldout`` neutral utterances of ``language`` as the test set."""
    pool = [r for r in records if r.language == language and r.emotion == "neutral"]
    held = {r.id for r in pool[-n_heldout:]} if n_heldout else set()
    train = [r for r in records if r.id not in held]
    test = [r for r in records if r.id in held]
    return train, test


# ------------------------------------------------------------------ file formats

MAGIC = b"EMF1"
_HEADER = struct.Struct("<4sII")


class FeatureFileError(ValueError):
    pass


def write_features(path, features):
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"feature matrix must be T x F with T >= 1, got shape {features.shape}")
    T, F = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, T, F))
        fh.write(features.astype("<f4").tobytes(order="C"))


def read_features(path):
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header ({len(blob)} of {_HEADER.size} bytes)")
    magic, T, F = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 4 * T * F
    if len(blob) != expected:
        raise FeatureFileError(f"{path}: expected {expected} bytes for {T}x{F} frames, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(T, F).astype(np.float64)


def write_corpus(records, out_dir, spec=None):
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for r in records:
            rel = f"features/{r.id}.emf"
            write_features(out / rel, r.features)
            fh.write(json.dumps({
                "id": r.id, "language": r.language, "emotion_class": r.emotion,
                "intensity": r.intensity, "features": rel,
                "phoneme_ids": [int(p) for p in r.phoneme_ids],
                "embedding": [float(v) for v in r.embedding],
            }) + "\n")
    summary = {"num_records": len(records),
               "class_counts": {f"{lang}/{CLASS_NAMES[lab]}": 0
                                for lang in LANGUAGES for lab in range(len(CLASS_NAMES))}}
    for r in records:
        summary["class_counts"][f"{r.language}/{r.class_name}"] += 1
    if spec is not None:
        summary["spec"] = asdict(spec)
        summary["warnings"] = corpus_warnings(spec)
        for w in summary["warnings"]:
            log.warning(w)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_corpus(corpus_dir):
    root = Path(corpus_dir)
    records = []
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            records.append(UtteranceRecord(
                id=row["id"], language=row["language"], emotion=row["emotion_class"],
                intensity=row["intensity"], features=read_features(root / row["features"]),
                phoneme_ids=np.asarray(row["phoneme_ids"], dtype=np.int64),
                embedding=np.asarray(row["embedding"], dtype=np.float64)))
    return records


def read_spec(corpus_dir):
    path = os.path.join(corpus_dir, "summary.json")
    with open(path) as fh:
        data = json.load(fh)
    if "spec" not in data:
        raise ValueError(f"{path} carries no corpus spec")
    return CorpusSpec(**data["spec"])
