"""Logit-averaging ensembles."""

import json
import math
import os

import numpy as np

from .audio import EMOTIONS
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import EmptyEnsemble, LengthMismatch

KINDS = ("homogeneous", "per_dataset")
DATASET_TAGS = ("RAVDESS", "TESS", "CREMA-D", "ESD", "MELD")
N_CLASSES = len(EMOTIONS)


def average_logits(vectors):
    """Elementwise mean of member logits, ``[n_members, ..., C] -> [..., C]``.

    Each component is computed as ``c + fsum(x_i - c) / n`` with ``c`` the
    smallest member value. ``fsum`` is exact and order-free, so the result
    does not depend on member order, and ``n`` identical members give that
    member back exactly.
    """
    if isinstance(vectors, np.ndarray):
        arr = vectors.astype(np.float64, copy=False)
    else:
        vectors = list(vectors)
        if not vectors:
            raise EmptyEnsemble("no member logits to average")
        shapes = {np.shape(v) for v in vectors}
        if len(shapes) != 1:
            raise LengthMismatch(f"member logits have differing shapes {sorted(shapes)}")
        arr = np.asarray(vectors, dtype=np.float64)
    if arr.shape[0] == 0:
        raise EmptyEnsemble("no member logits to average")
    if arr.ndim < 2:
        raise LengthMismatch("each member must contribute a logit vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("member logits must be finite")
    n = arr.shape[0]
    flat = arr.reshape(n, -1)
    base = flat.min(axis=0)
    out = np.empty(flat.shape[1])
    for j in range(flat.shape[1]):
        c = base[j]
        out[j] = c + math.fsum(flat[:, j] - c) / n
    return out.reshape(arr.shape[1:])


def argmax_lowest(logits):
    """Argmax over the last axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


class Ensemble:
    """Models whose logits are averaged.

    ``kind="per_dataset"`` requires one member per corpus tag, given in
    ``tags`` parallel to ``members``.
    """

    def __init__(self, members, kind="homogeneous", tags=None):
        members = list(members)
        if not members:
            raise EmptyEnsemble("an ensemble needs at least one member")
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        for m in members:
            if m.config.n_classes != N_CLASSES:
                raise LengthMismatch(f"member has {m.config.n_classes} classes, expected {N_CLASSES}")
        if tags is not None:
            tags = list(tags)
            if len(tags) != len(members):
                raise LengthMismatch("one dataset tag per member is required")
        if kind == "per_dataset":
            if tags is None or sorted(tags) != sorted(DATASET_TAGS):
                raise ValueError(f"per_dataset ensembles need exactly one member for each of {DATASET_TAGS}")
        self.members = members
        self.kind = kind
        self.tags = tags

    def __len__(self):
        return len(self.members)

    def member_logits(self, images):
        """``[n_members, B, C]``; members run one after another in list order."""
        return np.stack([m.logits(images) for m in self.members]).astype(np.float64)

    def logits(self, images):
        return average_logits(self.member_logits(images))

    def predict(self, images):
        return argmax_lowest(self.logits(images))

    def flops(self, mode="parametric_mac"):
        """Summed member cost in GMac."""
        return float(sum(m.flops(mode) for m in self.members))


def ensemble_predict(x, ensemble):
    """``(class, averaged logits)`` for a single ``224x224x3`` image."""
    if not isinstance(ensemble, Ensemble):
        ensemble = Ensemble(ensemble)
    avg = ensemble.logits(np.asarray(x)[None])[0]
    return int(argmax_lowest(avg)), avg


def homogeneous(config, n_members=5, seed=0):
    """Untrained members differing only in their init seed."""
    from .training import sub_seed
    from .vit import VisionTransformer

    return Ensemble([VisionTransformer(config, seed=sub_seed(seed, f"init-{i}")) for i in range(n_members)])


def save_spec(ensemble, path, checkpoint_dir=None):
    """Write member checkpoints and a JSON spec listing them."""
    base = os.path.dirname(os.path.abspath(path))
    checkpoint_dir = checkpoint_dir or base
    os.makedirs(checkpoint_dir, exist_ok=True)
    members = []
    for i, m in enumerate(ensemble.members):
        ckpt = os.path.join(checkpoint_dir, f"member-{i}.ckpt")
        save_checkpoint(m, ckpt)
        entry = {"checkpoint": os.path.relpath(ckpt, base)}
        if ensemble.tags is not None:
            entry["dataset"] = ensemble.tags[i]
        members.append(entry)
    with open(path, "w") as fh:
        json.dump({"kind": ensemble.kind, "members": members}, fh, indent=2)


def load_spec(path):
    """Build an :class:`Ensemble` from a spec file; relative paths resolve against it."""
    with open(path) as fh:
        spec = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    entries = spec.get("members") or []
    if not entries:
        raise EmptyEnsemble(f"{path} lists no members")
    members, tags = [], []
    for e in entries:
        members.append(load_checkpoint(os.path.join(base, e["checkpoint"])))
        tags.append(e.get("dataset"))
    if all(t is None for t in tags):
        tags = None
    return Ensemble(members, spec.get("kind", "homogeneous"), tags)
