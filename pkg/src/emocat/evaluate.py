"""Objective evaluation: the analytic emotion detector, leakage probes and conversion scoring."""
import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from emocat.autodiff import Tensor, backward
from emocat.corpus import CLASS_NAMES, EMOTIONS, LEVELS, class_index, class_parts, signature_shape
from emocat.layers import GRU, Dense, Params, cross_entropy, masked_mean_time
from emocat.train import Adam


class EmotionDetector:
    """Reads emotion off the signature bands of a feature matrix.

    The score of an emotion is the mean value of its bands divided by the
    mean of one unit of signature, so a clean utterance of intensity level
    k (1, 2, 3) scores about k and a neutral one about 0.
    """

    def __init__(self, spec):
        self.spec = spec
        self.bands = spec.bands()
        self.unit = spec.signature_gain * float(signature_shape(spec).mean())

    def scores(self, features):
        features = np.asarray(features)
        disappointed = features[:, self.bands[0]].mean() / self.unit
        excited = features[:, self.bands[2]].mean() / self.unit
        return {"excited": float(excited), "disappointed": float(disappointed)}

    def detect(self, features):
        """Return (fine class index, intensity estimate)."""
        s = self.scores(features)
        emotion = max(s, key=s.get)
        if s[emotion] < 0.5:
            return 0, 0.0
        level = int(np.clip(np.rint(s[emotion]), 1, 3))
        return class_index(emotion, LEVELS[level - 1]), s[emotion]

    def emotion_of(self, features):
        return class_parts(self.detect(features)[0])[0]


# ------------------------------------------------------------------ probes


@dataclass
class ProbeReport:
    kind: str
    source: str
    accuracy: float
    confusion: list
    majority_prediction_rate: float
    majority_class_baseline: float
    n_train: int
    n_test: int
    standardized: bool = False

    def to_dict(self):
        return asdict(self)


def probe_records(records, seed=0):
    """Every emotional utterance plus an equal-sized seeded draw of neutral ones."""
    rng = np.random.default_rng([seed, 17])
    emotional = [r for r in records if r.emotion != "neutral"]
    neutral = [r for r in records if r.emotion == "neutral"]
    picks = rng.choice(len(neutral), size=min(len(emotional), len(neutral)), replace=False)
    return emotional + [neutral[i] for i in sorted(picks)]


def stratified_split(labels, test_fraction, rng):
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_test = max(1, int(round(test_fraction * len(idx)))) if len(idx) > 1 else 0
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(train), np.sort(test)


class _Probe:
    def __init__(self, kind, n_in, n_classes, hidden, seed):
        self.kind = kind
        self.params = Params(seed)
        if kind == "gru":
            self.gru = GRU(self.params, "probe.gru", n_in, hidden)
        else:
            self.hidden = Dense(self.params, "probe.hidden", n_in, hidden)
        self.out = Dense(self.params, "probe.out", hidden, n_classes)

    def __call__(self, x, lengths):
        if self.kind == "gru":
            h = self.gru(x, lengths=lengths)[:, -1, :]
        else:
            h = self.hidden(masked_mean_time(x, lengths)).tanh()
        return self.out(h)


def _pad(seqs):
    lengths = np.array([len(s) for s in seqs])
    out = np.zeros((len(seqs), lengths.max(), seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return Tensor(out), lengths


def train_probe(seqs, labels, kind="gru", n_classes=len(CLASS_NAMES), steps=2000, batch_size=32,
                hidden=32, lr=1e-3, seed=0):
    probe = _Probe(kind, seqs[0].shape[1], n_classes, hidden, seed)
    opt = Adam(probe.params, lr)
    rng = np.random.default_rng([seed, 3])
    labels = np.asarray(labels)
    for _ in range(steps):
        pick = rng.integers(len(seqs), size=min(batch_size, len(seqs)))
        x, lengths = _pad([seqs[i] for i in pick])
        loss = cross_entropy(probe(x, lengths), labels[pick])
        opt.zero_grad()
        backward(loss)
        opt.step()
    return probe


def predict(probe, seqs, batch_size=64):
    preds = []
    for i in range(0, len(seqs), batch_size):
        x, lengths = _pad(seqs[i:i + batch_size])
        preds.extend(np.argmax(probe(x, lengths).data, axis=-1))
    return np.array(preds)


def run_probe(seqs, labels, kind="gru", steps=2000, seed=0, source="bottleneck",
              n_classes=len(CLASS_NAMES), test_fraction=0.2, standardize=False):
    """``standardize`` rescales each input dimension to unit variance (training-split statistics)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 5])
    tr, te = stratified_split(labels, test_fraction, rng)
    if standardize:
        stacked = np.concatenate([seqs[i] for i in tr])
        mean, std = stacked.mean(axis=0), stacked.std(axis=0) + 1e-8
        seqs = [(s - mean) / std for s in seqs]
    probe = train_probe([seqs[i] for i in tr], labels[tr], kind, n_classes, steps, seed=seed)
    pred = predict(probe, [seqs[i] for i in te])
    truth = labels[te]
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(confusion, (truth, pred), 1)
    counts = np.bincount(pred, minlength=n_classes)
    return ProbeReport(
        kind=kind, source=source,
        accuracy=float(np.mean(pred == truth)),
        confusion=confusion.tolist(),
        majority_prediction_rate=float(counts.max() / len(pred)),
        majority_class_baseline=float(np.bincount(truth, minlength=n_classes).max() / len(truth)),
        n_train=int(len(tr)), n_test=int(len(te)), standardized=bool(standardize))


def probe_leakage(ckpt, records, probe_kind="gru", steps=2000, seed=0, source="bottleneck", standardize=False):
    """Train a fresh probe on frozen bottleneck embeddings (or raw features) and report leakage."""
    data = probe_records(records, seed)
    if source == "features":
        seqs = [r.features for r in data]
    else:
        net = ckpt.network()
        seqs = [net.bottleneck_embeddings(r.features, r.embedding) for r in data]
    return run_probe(seqs, [r.label for r in data], probe_kind, steps, seed, source, standardize=standardize)


def checkpoint_digest(ckpt):
    return hashlib.sha256(ckpt.to_bytes()).hexdigest()


# ------------------------------------------------------------------ conversion


def eval_conversion(ckpt, sources, spec, targets=None):
    """Convert every source utterance to each target and score it with the detector."""
    ckpt.require_centroids()
    net = ckpt.network()
    detector = EmotionDetector(spec)
    targets = range(len(CLASS_NAMES)) if targets is None else targets
    report = {}
    for target in targets:
        emotion, _ = class_parts(target)
        hits, exact, intensities, l1 = [], [], [], []
        for r in sources:
            out = net.convert(r, target, ckpt.centroids)
            cls, _ = detector.detect(out)
            hits.append(class_parts(cls)[0] == emotion)
            exact.append(cls == target)
            s = detector.scores(out)
            intensities.append(max(s.values()) if emotion == "neutral" else s[emotion])
            l1.append(float(np.abs(out - r.features).mean()))
        report[CLASS_NAMES[target]] = {
            "detector_accuracy": float(np.mean(hits)),
            "class_accuracy": float(np.mean(exact)),
            "mean_intensity": float(np.mean(intensities)),
            "l1_to_source": float(np.mean(l1)),
        }
    return report


def intensity_ordering(report):
    """True per emotion when mean detected intensity rises low < medium < high."""
    out = {}
    for emotion in EMOTIONS[1:]:
        vals = [report[f"{emotion}:{lv}"]["mean_intensity"] for lv in LEVELS]
        out[emotion] = bool(vals[0] < vals[1] < vals[2])
    return out


def heldout_l1(ckpt, records):
    net = ckpt.network()
    return float(np.mean([np.abs(net.reconstruct(r) - r.features).mean() for r in records]))
