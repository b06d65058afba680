"""Metrics, latency measurement, per-participant personalization and model selection."""

import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .audio import EMOTIONS
from .errors import EmptyInput, LengthMismatch, NoSamples
from .training import SplitSpec, TrainConfig, fine_tune, stratified_split, sub_seed

N_CLASSES = len(EMOTIONS)
AVERAGING = ("weighted", "macro")
REPORT_FIELDS = ("accuracy", "precision", "recall", "f1", "per_class", "flops_gmac",
                 "mean_inference_ms", "n_samples", "seed", "model_id")


def confusion_matrix(truth, pred, n_classes=N_CLASSES):
    """Counts with rows = true class and columns = predicted class."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise LengthMismatch(f"truth {truth.shape} and pred {pred.shape} differ")
    if truth.size == 0:
        raise EmptyInput("no labels to score")
    for arr in (truth, pred):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def _ratio(num, den, counter):
    if den == 0:
        counter.append(1)
        return Fraction(0)
    return Fraction(int(num), int(den))


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict
    confusion: list
    averaging: str = "weighted"
    zero_division: int = 0


def compute_metrics(truth, pred, averaging="weighted"):
    """Accuracy plus averaged precision/recall/F1.

    Arithmetic is exact (rational) until the final float conversion, so
    weighted recall and accuracy come out as the same float. A zero
    denominator counts as 0 and is tallied in ``zero_division``.
    """
    if averaging not in AVERAGING:
        raise ValueError(f"averaging must be one of {AVERAGING}")
    if len(truth) != len(pred):
        raise LengthMismatch(f"{len(truth)} truth labels vs {len(pred)} predictions")
    cm = confusion_matrix(truth, pred)
    total = int(cm.sum())
    zero = []
    per_class = {}
    p_avg = r_avg = f_avg = Fraction(0)
    for c, name in enumerate(EMOTIONS):
        tp = int(cm[c, c])
        support = int(cm[c].sum())
        predicted = int(cm[:, c].sum())
        p = _ratio(tp, predicted, zero)
        r = _ratio(tp, support, zero)
        f = Fraction(0) if p + r == 0 else 2 * p * r / (p + r)
        per_class[name] = {"precision": float(p), "recall": float(r), "f1": float(f), "support": support}
        w = Fraction(support, total) if averaging == "weighted" else Fraction(1, N_CLASSES)
        p_avg += w * p
        r_avg += w * r
        f_avg += w * f
    acc = Fraction(int(np.trace(cm)), total)
    return Metrics(float(acc), float(p_avg), float(r_avg), float(f_avg), per_class,
                   cm.tolist(), averaging, len(zero))


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict
    flops_gmac: float
    mean_inference_ms: object  # float, or None when timing is disabled
    n_samples: int
    seed: int
    model_id: str
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "extra"}
        d.update(self.extra)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        base = {k: d[k] for k in REPORT_FIELDS}
        return cls(**base, extra={k: v for k, v in d.items() if k not in REPORT_FIELDS})


@dataclass
class Timing:
    mean_ms: float
    std_ms: float
    reps: int
    n_samples: int


def measure_inference(predictor, samples, warmup=1, reps=5):
    """Wall-clock milliseconds per sample for ``predictor(samples)``.

    ``warmup`` untimed passes come first; the mean and standard deviation
    are taken over ``reps`` timed passes over the whole sample batch.
    """
    samples = np.asarray(samples)
    if samples.ndim == 3:
        samples = samples[None]
    if samples.shape[0] == 0:
        raise NoSamples("nothing to time")
    if reps < 3 or warmup < 1:
        raise ValueError("need reps >= 3 and warmup >= 1")
    call = predictor.logits if hasattr(predictor, "logits") else predictor
    for _ in range(warmup):
        call(samples)
    per_sample = []
    for _ in range(reps):
        t0 = time.perf_counter()
        call(samples)
        per_sample.append((time.perf_counter() - t0) * 1000.0 / samples.shape[0])
    return Timing(statistics.fmean(per_sample), statistics.stdev(per_sample), reps, samples.shape[0])


def evaluate(model, images, labels, model_id, seed=0, averaging="weighted", measure_latency=True,
             flops_mode="parametric_mac"):
    pred = model.predict(images)
    m = compute_metrics(labels, pred, averaging)
    ms = measure_inference(model, images).mean_ms if measure_latency else None
    return EvalReport(m.accuracy, m.precision, m.recall, m.f1, m.per_class, model.flops(flops_mode), ms,
                      int(len(labels)), int(seed), model_id,
                      extra={"confusion": m.confusion, "averaging": averaging, "zero_division": m.zero_division})


def personalize_run(manifest, model, train_config=TrainConfig(), seed=0, features=None, split=SplitSpec(),
                    model_id=None, measure_latency=True, expected_config=None):
    """Split a participant's clips, fine-tune ``model`` on the train side, score the test side.

    ``model`` is a :class:`VisionTransformer` (left untouched) or an
    :class:`Ensemble`, whose members are each fine-tuned. The split and the
    shuffle order derive from ``seed``. Returns ``(EvalReport, trained)``.
    """
    from .ensemble import Ensemble
    from .features import FeatureStore

    features = features or FeatureStore()
    train_m, test_m = stratified_split(manifest, split, sub_seed(seed, "split"))
    x_train, y_train = features.images(train_m), train_m.labels
    x_test, y_test = features.images(test_m), test_m.labels
    cfg = TrainConfig(**{**train_config.to_dict(), "seed": sub_seed(seed, "shuffle")})
    traces = []
    if isinstance(model, Ensemble):
        members = []
        for m in model.members:
            r = fine_tune(m, x_train, y_train, cfg, expected_config)
            members.append(r.model)
            traces.append(r.trace)
        trained = Ensemble(members, model.kind, model.tags)
    else:
        r = fine_tune(model, x_train, y_train, cfg, expected_config)
        trained = r.model
        traces.append(r.trace)
    report = evaluate(trained, x_test, y_test, model_id or "model", seed, measure_latency=measure_latency)
    report.extra.update({"n_train": len(train_m),
                         "final_train_accuracy": [t[-1]["train_accuracy"] if t else None for t in traces]})
    return report, trained


def select_best_model(reports):
    """Id of the best ``(model_id, EvalReport)`` pair.

    Highest accuracy wins; ties go to lower FLOPs, then lower latency, then
    the lexicographically smaller id.
    """
    reports = list(reports)
    if not reports:
        raise EmptyInput("no candidate models")

    def key(item):
        mid, r = item
        ms = r.mean_inference_ms if r.mean_inference_ms is not None else float("inf")
        return (-r.accuracy, r.flops_gmac, ms, str(mid))

    return min(reports, key=key)[0]


def cross_validate(model, images, labels, manifest, train_config, k=5, seed=0, model_id="model"):
    """Fine-tune a fresh copy per fold; returns per-fold reports and their mean accuracy."""
    from .training import kfold_partition

    index = {e.clip_path: i for i, e in enumerate(manifest.entries)}
    folds = []
    for f, (tr, va) in enumerate(kfold_partition(manifest, k, sub_seed(seed, "folds"))):
        ti = [index[e.clip_path] for e in tr]
        vi = [index[e.clip_path] for e in va]
        cfg = TrainConfig(**{**train_config.to_dict(), "seed": sub_seed(seed, f"shuffle-{f}")})
        trained = fine_tune(model, images[ti], labels[ti], cfg).model
        folds.append(evaluate(trained, images[vi], labels[vi], f"{model_id}/fold{f}", seed,
                              measure_latency=False))
    return folds, statistics.fmean(r.accuracy for r in folds)


def export_embeddings(model, images, labels, path):
    """Dump CLS vectors with labels to ``.npz`` for offline inspection."""
    np.savez(path, embeddings=model.cls_embeddings(images), labels=np.asarray(labels))
