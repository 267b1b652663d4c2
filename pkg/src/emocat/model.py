"""The EmoCat encoder/bottleneck/decoder network with its adversarial emotion classifier.

Data flow for one batch (all sequences (B, T, C)):

    features + utterance embedding --> reference encoder --> VAE latent (T x d_z)
    latent sample --> every N-th frame, repeated N times --> bottleneck
    bottleneck --> [gradient transform] --> emotion classifier --> logits
    bottleneck + phoneme encoding + emotion embedding --> 3 conv + LSTM decoder --> features

At conversion time the encoder keeps the source utterance embedding while the
decoder receives the centroid of the target class.
"""
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from emocat import inverter
from emocat.autodiff import GraphError, Tensor, broadcast_time, concat, identity, no_grad
from emocat.corpus import CLASS_NAMES, EMBEDDING_DIM, coarse_label
from emocat.inverter import GradTransformSpec
from emocat.layers import (GRU, LSTM, Conv1d, Dense, Embedding, Params, VaeHead,
                           kl_standard_normal, l1_loss, masked_mean_time, weighted_cross_entropy)


@dataclass
class EmoCatConfig:
    feature_dim: int = 80
    emotion_embedding_dim: int = EMBEDDING_DIM
    bottleneck_rate: int = 4
    bottleneck_dim: int = 8
    phoneme_vocab_a: int = 30
    phoneme_vocab_b: int = 30
    phoneme_embedding_dim: int = 32
    kernel_width: int = 5
    encoder_channels: int = 64
    encoder_layers: int = 2
    decoder_channels: int = 64
    decoder_lstm: int = 64
    classifier_kind: str = "ff"
    classifier_hidden: int = 32
    coarse_classes: bool = False
    kl_weight: float = 1e-3
    kl_warmup: float = 0.1
    init_seed: int = 0
    transform: GradTransformSpec = field(default_factory=lambda: GradTransformSpec("inv-exp"))

    def __post_init__(self):
        if isinstance(self.transform, dict):
            self.transform = GradTransformSpec(**self.transform)
        if self.emotion_embedding_dim != EMBEDDING_DIM:
            raise ValueError(f"emotion_embedding_dim must be {EMBEDDING_DIM}")
        if self.bottleneck_rate < 1:
            raise ValueError("bottleneck_rate must be >= 1")
        if self.classifier_kind not in ("ff", "gru"):
            raise ValueError(f"classifier_kind must be 'ff' or 'gru', got {self.classifier_kind!r}")
        if self.kernel_width % 2 != 1:
            raise ValueError("kernel_width must be odd")

    @property
    def num_classes(self):
        return 3 if self.coarse_classes else len(CLASS_NAMES)

    @property
    def phoneme_vocab(self):
        return self.phoneme_vocab_a + self.phoneme_vocab_b

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)


def apply_bottleneck(z, rate):
    """Keep frames 0, N, 2N, ... and repeat each N times, truncated to the input length."""
    if rate < 1:
        raise ValueError("bottleneck rate must be >= 1")
    T = z.shape[-2]
    idx = (np.arange(T) // rate) * rate
    if isinstance(z, Tensor):
        return z[idx] if z.ndim == 2 else z[:, idx, :]
    return np.asarray(z)[..., idx, :]


@dataclass
class Batch:
    features: np.ndarray      # (B, T, F)
    phonemes: np.ndarray      # (B, T) int
    embeddings: np.ndarray    # (B, 64)
    labels: np.ndarray        # (B,) fine class ids
    lengths: np.ndarray = None

    @classmethod
    def from_records(cls, records):
        T = {r.n_frames for r in records}
        if len(T) != 1:
            raise GraphError(f"records of unequal length {sorted(T)} cannot be stacked")
        return cls(np.stack([r.features for r in records]),
                   np.stack([r.phoneme_ids for r in records]),
                   np.stack([r.embedding for r in records]),
                   np.array([r.label for r in records]))


class EmoCatNet:
    def __init__(self, cfg, params=None):
        """``params`` is a state dict to load, or a ready :class:`Params` registry."""
        self.cfg = cfg
        self.params = params if isinstance(params, Params) else Params(cfg.init_seed)
        p, c = self.params, cfg
        K = c.kernel_width

        width = c.feature_dim + c.emotion_embedding_dim
        self.enc_convs = []
        for i in range(c.encoder_layers):
            self.enc_convs.append(Conv1d(p, f"encoder.conv{i}", width, c.encoder_channels, K))
            width = c.encoder_channels
        self.vae = VaeHead(p, "encoder.vae", width, c.bottleneck_dim)

        self.phone_embed = Embedding(p, "phonemes.embed", c.phoneme_vocab, c.phoneme_embedding_dim)
        self.phone_conv = Conv1d(p, "phonemes.conv", c.phoneme_embedding_dim, c.phoneme_embedding_dim, K)

        width = c.bottleneck_dim + c.phoneme_embedding_dim + c.emotion_embedding_dim
        self.dec_convs = []
        for i in range(3):
            self.dec_convs.append(Conv1d(p, f"decoder.conv{i}", width, c.decoder_channels, K))
            width = c.decoder_channels
        self.dec_lstm = LSTM(p, "decoder.lstm", width, c.decoder_lstm)
        self.dec_out = Dense(p, "decoder.out", c.decoder_lstm, c.feature_dim)

        if c.classifier_kind == "gru":
            self.cls_gru = GRU(p, "classifier.gru", c.bottleneck_dim, c.classifier_hidden)
        else:
            self.cls_hidden = Dense(p, "classifier.hidden", c.bottleneck_dim, c.classifier_hidden)
        self.cls_out = Dense(p, "classifier.out", c.classifier_hidden, c.num_classes)
        if params is not None and not isinstance(params, Params):
            self.params.load(params)

    # ------------------------------------------------------------ blocks

    def _check_embedding(self, emb):
        if emb.shape[-1] != self.cfg.emotion_embedding_dim:
            raise GraphError(f"emotion embedding must have {self.cfg.emotion_embedding_dim} dims, "
                             f"got shape {emb.shape}")

    def encode_reference(self, features, embedding, rng=None):
        """Per-frame VAE latent from features and the utterance embedding (no phonemes)."""
        x = _batched(features, 3)
        emb = _batched(embedding, 2)
        self._check_embedding(emb)
        if x.shape[1] < 1:
            raise GraphError("need at least one frame")
        h = concat([x, broadcast_time(emb, x.shape[1])], axis=-1)
        for conv in self.enc_convs:
            h = conv(h).tanh()
        return self.vae(h, rng)

    def bottleneck(self, z):
        return apply_bottleneck(z, self.cfg.bottleneck_rate)

    def encode_phonemes(self, phoneme_ids):
        ids = np.asarray(phoneme_ids)
        if ids.ndim == 1:
            ids = ids[None]
        return self.phone_conv(self.phone_embed(ids)).tanh()

    def decode(self, bottleneck, phonemes, embedding):
        b = _batched(bottleneck, 3)
        ph = _batched(phonemes, 3)
        emb = _batched(embedding, 2)
        self._check_embedding(emb)
        if b.shape[:2] != ph.shape[:2]:
            raise GraphError(f"decode: sequence length mismatch {b.shape} vs {ph.shape}")
        h = concat([b, ph, broadcast_time(emb, b.shape[1])], axis=-1)
        for conv in self.dec_convs:
            h = conv(h).tanh()
        return self.dec_out(self.dec_lstm(h))

    def classify_adversarial(self, bottleneck, lengths=None):
        b = _batched(bottleneck, 3)
        if self.cfg.classifier_kind == "gru":
            h = self.cls_gru(b, lengths=lengths)[:, -1, :]
        else:
            h = self.cls_hidden(masked_mean_time(b, lengths)).tanh()
        return self.cls_out(h)

    def labels_for_classifier(self, labels):
        labels = np.asarray(labels)
        if self.cfg.coarse_classes:
            return np.array([coarse_label(int(v)) for v in labels])
        return labels

    # ------------------------------------------------------------ training pass

    def forward_batch(self, batch, rng=None, step=0, class_weights=None, kl_weight=None,
                      transform=None):
        """Auto-encoding pass; returns a dict of loss Tensors plus intermediate nodes."""
        if batch.embeddings is None:
            raise GraphError("utterance embedding missing")
        x = Tensor(batch.features)
        latent = self.encode_reference(x, Tensor(batch.embeddings), rng)
        bneck = self.bottleneck(latent.sample)
        B = bneck.shape[0]

        adv_in = identity(bneck)
        adv_in.name = "gradient_inverter"
        spec = (transform or self.cfg.transform).at_step(step)
        inverter.attach(adv_in, spec, per_item=True, item_scale=B)
        logits = self.classify_adversarial(adv_in)

        recon = self.decode(bneck, self.encode_phonemes(batch.phonemes), Tensor(batch.embeddings))
        l1 = l1_loss(recon, x)
        kl = kl_standard_normal(latent)
        adv = weighted_cross_entropy(logits, self.labels_for_classifier(batch.labels), class_weights)
        beta = self.cfg.kl_weight if kl_weight is None else kl_weight
        total = l1 + kl * beta + adv
        return {"l1": l1, "kl": kl, "adv_ce": adv, "total": total,
                "latent": latent, "bottleneck": bneck, "inverter": adv_in,
                "logits": logits, "recon": recon}

    def forward_train(self, record, rng=None, class_weights=None):
        """Losses for a single utterance (noise off unless ``rng`` is given)."""
        if record.embedding is None:
            raise GraphError(f"{record.id}: utterance embedding missing")
        return self.forward_batch(Batch.from_records([record]), rng=rng, class_weights=class_weights)

    # ------------------------------------------------------------ inference

    def bottleneck_embeddings(self, features, embedding):
        with no_grad():
            latent = self.encode_reference(features, embedding)
            return self.bottleneck(latent.mu).data[0]

    def reconstruct(self, record):
        return self._run(record.features, record.phoneme_ids, record.embedding, record.embedding)

    def _run(self, features, phonemes, enc_embedding, dec_embedding):
        with no_grad():
            latent = self.encode_reference(features, enc_embedding)
            out = self.decode(self.bottleneck(latent.mu), self.encode_phonemes(phonemes),
                              _batched(dec_embedding, 2))
        return out.data[0]

    def convert(self, record, target, centroids):
        """Source embedding on the encoder side, target centroid on the decoder side."""
        if isinstance(target, str):
            from emocat.corpus import parse_target
            target = parse_target(target)
        if target not in centroids:
            raise KeyError(f"no centroid for target class {target!r}")
        return self._run(record.features, record.phoneme_ids, record.embedding, centroids[target])


def _batched(x, ndim):
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == ndim - 1:
        t = t.reshape(1, *t.shape)
    if t.ndim != ndim:
        raise GraphError(f"expected {ndim - 1}- or {ndim}-d input, got shape {t.shape}")
    return t


def compute_centroids(embeddings, labels, required=range(1, len(CLASS_NAMES))):
    """Per-class arithmetic mean of utterance embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    missing = [CLASS_NAMES[c] for c in required if not np.any(labels == c)]
    if missing:
        raise ValueError(f"no utterances for classes: {', '.join(missing)}")
    return {int(c): embeddings[labels == c].mean(axis=0) for c in np.unique(labels)}


# ------------------------------------------------------------------ checkpoint

CKPT_MAGIC = b"EMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: EmoCatConfig
    params: dict
    centroids: dict = field(default_factory=dict)
    step: int = 0

    def network(self):
        return EmoCatNet(self.config, self.params)

    def require_centroids(self):
        missing = [CLASS_NAMES[c] for c in range(1, len(CLASS_NAMES)) if c not in self.centroids]
        if missing:
            raise CheckpointError(f"checkpoint lacks centroids for {', '.join(missing)}")

    def to_bytes(self):
        out = bytearray()
        cfg = self.config.to_json().encode()
        out += CKPT_MAGIC + struct.pack("<I", CKPT_VERSION)
        out += struct.pack("<I", len(cfg)) + cfg
        out += struct.pack("<Q", self.step)
        out += struct.pack("<I", len(self.params))
        for name, arr in self.params.items():
            arr = np.asarray(arr, dtype="<f8")
            enc = name.encode()
            out += struct.pack("<H", len(enc)) + enc
            out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes(order="C")
        out += struct.pack("<I", len(self.centroids))
        for c in sorted(self.centroids):
            enc = CLASS_NAMES[c].encode()
            vec = np.asarray(self.centroids[c], dtype="<f8")
            out += struct.pack("<H", len(enc)) + enc + struct.pack("<I", vec.size) + vec.tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob):
        reader = _Reader(blob)
        if reader.take(4) != CKPT_MAGIC:
            raise CheckpointError("not an EmoCat checkpoint (bad magic)")
        version, = reader.unpack("<I")
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        n, = reader.unpack("<I")
        config = EmoCatConfig.from_json(reader.take(n).decode())
        step, = reader.unpack("<Q")
        params = {}
        for _ in range(reader.unpack("<I")[0]):
            name = reader.take(reader.unpack("<H")[0]).decode()
            ndim, = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        centroids = {}
        for _ in range(reader.unpack("<I")[0]):
            name = reader.take(reader.unpack("<H")[0]).decode()
            dim, = reader.unpack("<I")
            centroids[CLASS_NAMES.index(name)] = np.frombuffer(reader.take(8 * dim), dtype="<f8").astype(np.float64)
        if reader.pos != len(blob):
            raise CheckpointError(f"{len(blob) - reader.pos} trailing bytes in checkpoint")
        return cls(config, params, centroids, step)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                                  f"only {len(self.blob) - self.pos} left")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
