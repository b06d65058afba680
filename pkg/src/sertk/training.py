"""Splitting, AdamW training and fine-tuning."""

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .audio import EMOTIONS, DatasetManifest
from .autodiff import cross_entropy
from .errors import ConfigMismatch, InsufficientClassSamples, NonFiniteLoss, TooFewSamples


def sub_seed(seed, name):
    """Independent integer seed derived from the run seed and a stream name."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def named_rng(seed, name):
    return np.random.default_rng(sub_seed(seed, name))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.0e-5
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class SplitSpec:
    train_per_class: int = 6
    test_per_class: int = 4
    k: int = 5

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _by_class(manifest):
    groups = {name: [] for name in EMOTIONS}
    for i, e in enumerate(manifest.entries):
        groups[e.emotion].append(i)
    return groups


def stratified_split(manifest, spec=SplitSpec(), seed=0):
    """Exact per-class train/test counts, drawn by a seeded shuffle.

    Clips beyond ``train_per_class + test_per_class`` in a class are left
    out of both sides. Both outputs keep manifest order.
    """
    need = spec.train_per_class + spec.test_per_class
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for name, idx in _by_class(manifest).items():
        if len(idx) < need:
            raise InsufficientClassSamples(f"class {name!r} has {len(idx)} clips, need {need}")
        order = rng.permutation(len(idx))
        picked = [idx[j] for j in order]
        train_idx += picked[:spec.train_per_class]
        test_idx += picked[spec.train_per_class:need]
    pick = lambda ids: DatasetManifest([manifest.entries[i] for i in sorted(ids)])  # noqa: E731
    return pick(train_idx), pick(test_idx)


def kfold_partition(manifest, k=5, seed=0):
    """``k`` stratified ``(train, validation)`` pairs.

    Each class is shuffled and dealt round-robin over the folds, continuing
    from where the previous class stopped, so per-class and total fold sizes
    both differ by at most one.
    """
    if k < 2:
        raise TooFewSamples(f"k-fold needs k >= 2, got {k}")
    if len(manifest) < k:
        raise TooFewSamples(f"{len(manifest)} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    cursor = 0
    for idx in _by_class(manifest).values():
        for j in rng.permutation(len(idx)):
            folds[cursor % k].append(idx[j])
            cursor += 1
    pairs = []
    for f in range(k):
        val = set(folds[f])
        train = [i for i in range(len(manifest)) if i not in val]
        pairs.append((DatasetManifest([manifest.entries[i] for i in train]),
                      DatasetManifest([manifest.entries[i] for i in sorted(val)])))
    return pairs


def mix_datasets(manifests):
    """Union of several manifests; a path present twice raises DuplicatePath."""
    entries = []
    for m in manifests:
        entries.extend(m.entries)
    return DatasetManifest(entries)


class AdamW:
    """Adam with decoupled weight decay; state is kept per parameter name."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @classmethod
    def from_config(cls, params, cfg):
        return cls(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            p.data *= dt(1.0 - self.lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            p.data -= dt(self.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    model: object
    trace: list = field(default_factory=list)

    def write_trace(self, path):
        with open(path, "w") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec) + "\n")


def fit(model, images, labels, config, on_epoch=None):
    """Train ``model`` in place on an image array; returns a :class:`TrainResult`.

    Mean cross-entropy per batch, AdamW at a constant learning rate, one
    seeded shuffle per epoch with the short last batch kept. Each trace
    record holds ``epoch``, ``mean_loss`` and ``train_accuracy`` (the latter
    from the predictions made during the epoch). ``on_epoch(record)`` may
    return True to stop after that epoch.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if n == 0 or labels.shape != (n,):
        raise ValueError("need a non-empty image batch with one label per image")
    kernels.tune_allocator()
    opt = AdamW.from_config(model.params, config)
    rng = named_rng(config.seed, "shuffle")
    trace = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            logits = model(images[idx])
            loss = cross_entropy(logits, labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, batch starting {s}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            loss_sum += value * idx.shape[0]
            correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
        rec = {"epoch": epoch, "mean_loss": loss_sum / n, "train_accuracy": correct / n}
        trace.append(rec)
        if on_epoch is not None and on_epoch(rec):
            break
    return TrainResult(model, trace)


def train(model, manifest, config, features, on_epoch=None):
    """:func:`fit` on the images a FeatureStore yields for ``manifest``."""
    return fit(model, features.images(manifest), manifest.labels, config, on_epoch)


def fine_tune(checkpoint_model, images, labels, config, expected_config=None, on_epoch=None):
    """Continue training a copy of ``checkpoint_model``; the input is left untouched."""
    if expected_config is not None and checkpoint_model.config != expected_config:
        raise ConfigMismatch(f"checkpoint config {checkpoint_model.config} != expected {expected_config}")
    return fit(checkpoint_model.copy(), images, labels, config, on_epoch)
