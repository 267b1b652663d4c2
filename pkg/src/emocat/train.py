"""Main-stage training and fine-tuning of EmoCat.

Batches are random fixed-length crops so utterances of different lengths can
be stacked; evaluation always runs on full utterances.
"""
import csv
import logging
from dataclasses import dataclass

import numpy as np

from emocat.autodiff import backward
from emocat.corpus import CLASS_NAMES, class_counts
from emocat.layers import class_weights
from emocat.model import Batch, Checkpoint, EmoCatNet, compute_centroids

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "l1", "kl", "adv_ce", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainPlan:
    main_steps: int = 5000
    fine_tune_steps: int = -1  # negative: 2% of main_steps
    batch_size: int = 16
    crop_frames: int = 40
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    weighted_ce: bool = False
    seed: int = 0
    target_language: str = "B"
    heldout: int = 20
    log_every: int = 500

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.batch_size < 1 or self.crop_frames < 1 or self.main_steps < 0:
            raise ValueError("batch_size, crop_frames must be >= 1 and main_steps >= 0")

    @property
    def effective_fine_tune_steps(self):
        return self.fine_tune_steps if self.fine_tune_steps >= 0 else round(0.02 * self.main_steps)


class Adam:
    def __init__(self, tensors, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for t, m, v in zip(self.tensors, self.m, self.v):
            if t.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * t.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * t.grad * t.grad
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


class SGD:
    def __init__(self, tensors, lr=1e-3):
        self.tensors, self.lr = list(tensors), lr

    def step(self):
        for t in self.tensors:
            if t.grad is not None:
                t.data = t.data - self.lr * t.grad

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


def make_optimizer(plan, tensors):
    if plan.optimizer == "sgd":
        return SGD(tensors, plan.learning_rate)
    return Adam(tensors, plan.learning_rate)


def sample_batch(records, rng, batch_size, crop_frames):
    picks = rng.integers(len(records), size=batch_size)
    feats, phones, embs, labels = [], [], [], []
    for i in picks:
        r = records[i]
        crop = min(crop_frames, r.n_frames)
        start = int(rng.integers(r.n_frames - crop + 1))
        feats.append(r.features[start:start + crop])
        phones.append(r.phoneme_ids[start:start + crop])
        embs.append(r.embedding)
        labels.append(r.label)
    if len({f.shape[0] for f in feats}) != 1:
        crop = min(f.shape[0] for f in feats)
        feats = [f[:crop] for f in feats]
        phones = [p[:crop] for p in phones]
    return Batch(np.stack(feats), np.stack(phones), np.stack(embs), np.array(labels))


def adversary_weights(net, records):
    labels = net.labels_for_classifier([r.label for r in records])
    return class_weights(np.bincount(labels, minlength=net.cfg.num_classes))


def centroids_for(records):
    return compute_centroids([r.embedding for r in records], [r.label for r in records])


class MetricsWriter:
    """Append-only CSV with a fixed header; one row per optimisation step."""

    def __init__(self, path):
        self.path = path
        self.rows = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._csv = csv.writer(self._fh)
            self._csv.writerow(METRIC_FIELDS)

    def write(self, step, losses):
        row = [step] + [float(losses[k].data) for k in METRIC_FIELDS[1:]]
        self.rows.append(row)
        if self._fh is not None:
            self._csv.writerow([step] + [repr(v) for v in row[1:]])

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _optimise(net, opt, records, plan, steps, rng, metrics, step0, total_main, weights):
    cfg = net.cfg
    warm = cfg.kl_warmup * total_main
    last_good = net.params.state()
    for k in range(steps):
        step = step0 + k
        beta = cfg.kl_weight * (min(1.0, (step + 1) / warm) if warm > 0 else 1.0)
        batch = sample_batch(records, rng, plan.batch_size, plan.crop_frames)
        losses = net.forward_batch(batch, rng=rng, step=step, class_weights=weights, kl_weight=beta)
        total = float(losses["total"].data)
        if not np.isfinite(total):
            raise TrainingDiverged(f"loss became non-finite at step {step}", last_good)
        opt.zero_grad()
        backward(losses["total"])
        opt.step()
        metrics.write(step + 1, losses)
        if plan.log_every and (step + 1) % plan.log_every == 0:
            log.info("step %d l1=%.4f kl=%.3f adv=%.3f", step + 1, float(losses["l1"].data),
                     float(losses["kl"].data), float(losses["adv_ce"].data))
        if plan.log_every and (step + 1) % plan.log_every == 0:
            last_good = net.params.state()
    return step0 + steps


def train(cfg, plan, records, metrics_path=None):
    """Main stage on ``records`` (the training split); returns (Checkpoint, metric rows)."""
    present = class_counts(records)
    missing = [CLASS_NAMES[c] for c in range(len(CLASS_NAMES)) if present[c] == 0]
    if missing:
        raise ValueError(f"training corpus lacks classes: {', '.join(missing)}")
    net = EmoCatNet(cfg)
    rng = np.random.default_rng(plan.seed)
    weights = adversary_weights(net, records) if plan.weighted_ce else None
    metrics = MetricsWriter(metrics_path)
    try:
        opt = make_optimizer(plan, net.params)
        step = _optimise(net, opt, records, plan, plan.main_steps, rng, metrics, 0, plan.main_steps, weights)
    except TrainingDiverged as err:
        err.checkpoint = Checkpoint(cfg, err.checkpoint, centroids_for(records), 0)
        raise
    finally:
        metrics.close()
    ckpt = Checkpoint(cfg, net.params.state(), centroids_for(records), step)
    return ckpt, metrics.rows


def fine_tune_subset(records, language, rng):
    """All emotional utterances of ``language`` plus an equally sized random neutral draw."""
    emotional = [r for r in records if r.language == language and r.emotion != "neutral"]
    neutral = [r for r in records if r.language == language and r.emotion == "neutral"]
    if not emotional:
        raise ValueError(f"no emotional utterances for language {language}")
    picks = rng.choice(len(neutral), size=min(len(emotional), len(neutral)), replace=False)
    return emotional + [neutral[i] for i in sorted(picks)]


def fine_tune(ckpt, plan, records, metrics_path=None, weighted_ce=None):
    """Continue training on the balanced emotional + neutral subset with unchanged hyper-parameters."""
    steps = plan.effective_fine_tune_steps
    net = ckpt.network()
    rng = np.random.default_rng([plan.seed, 1])
    use_weights = plan.weighted_ce if weighted_ce is None else weighted_ce
    weights = adversary_weights(net, records) if use_weights else None
    metrics = MetricsWriter(metrics_path)
    opt = make_optimizer(plan, net.params)
    per_epoch = None
    done = 0
    try:
        while done < steps:
            subset = fine_tune_subset(records, plan.target_language, rng)
            if per_epoch is None:
                per_epoch = max(1, len(subset) // plan.batch_size)
            n = min(per_epoch, steps - done)
            _optimise(net, opt, subset, plan, n, rng, metrics, ckpt.step + done, plan.main_steps, weights)
            done += n
    except TrainingDiverged as err:
        err.checkpoint = Checkpoint(ckpt.config, err.checkpoint, ckpt.centroids, ckpt.step + done)
        raise
    finally:
        metrics.close()
    return Checkpoint(ckpt.config, net.params.state(), centroids_for(records), ckpt.step + steps)
