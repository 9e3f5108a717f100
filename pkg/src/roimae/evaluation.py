"""Nested stratified cross-validation, subject-level inference and the
reconstruction error report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RoiSeries, window_offsets
from .errors import DataError, LeakageError, ParameterError, SubjectTooShortError
from .masking import MaskStrategy, make_mask, round_half_up, sample_ratio
from .rng import Rng


@dataclass
class InnerFold:
    train: list[str]
    val: list[str]


@dataclass
class OuterFold:
    test: list[str]
    train: list[str]
    inner: list[InnerFold] = field(default_factory=list)


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list[OuterFold]

    def to_json(self) -> str:
        doc = {"k": self.k, "seed": self.seed, "folds": [
            {"test": f.test, "train": f.train, "inner": [{"train": i.train, "val": i.val} for i in f.inner]}
            for f in self.folds
        ]}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        doc = json.loads(text)
        folds = [OuterFold(f["test"], f["train"], [InnerFold(i["train"], i["val"]) for i in f["inner"]])
                 for f in doc["folds"]]
        return cls(doc["k"], doc["seed"], folds)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _labels_of(subjects) -> dict[str, int]:
    return {s.subject_id: int(s.label) for s in subjects}


def stratified_folds(ids: Sequence[str], labels: dict[str, int], k: int, rng: Rng) -> list[list[str]]:
    """Shuffle each class, deal round-robin; class 1 continues where class 0 stopped."""
    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for c in (0, 1):
        members = [i for i in ids if labels[i] == c]
        for j in rng.permutation(len(members)):
            folds[cursor % k].append(members[j])
            cursor += 1
    return folds


def make_nested_folds(subjects, k: int = 5, seed: int = 0) -> FoldPlan:
    labels = _labels_of(subjects)
    if len(labels) != len(subjects):
        raise DataError("duplicate subject ids")
    ids = [s.subject_id for s in subjects]
    for c in (0, 1):
        n = sum(1 for i in ids if labels[i] == c)
        if n < k:
            raise ParameterError(f"class {c} has {n} subjects; need at least k={k}")
    outer = stratified_folds(ids, labels, k, Rng.derive(seed, "outer"))
    plan = []
    for f, test in enumerate(outer):
        tset = set(test)
        train = [i for i in ids if i not in tset]
        plan.append(OuterFold(list(test), train, inner_folds(train, labels, k, Rng.derive(seed, "inner", f))))
    return FoldPlan(k, int(seed), plan)


def inner_folds(train: Sequence[str], labels: dict[str, int], k: int, rng: Rng) -> list[InnerFold]:
    parts = stratified_folds(train, labels, k, rng)
    out = []
    for j in range(k):
        val = set(parts[j])
        out.append(InnerFold([i for i in train if i not in val], list(parts[j])))
    return out


def subsample_training(train_subjects, fraction: float, seed: int):
    """Stratified, nested subsample: the first round(fraction·n_c) of a fixed
    per-class shuffle, so smaller fractions are subsets of larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(train_subjects)
    keep = set()
    for c in (0, 1):
        members = [s for s in train_subjects if int(s.label) == c]
        order = Rng.derive(seed, "subsample", c).permutation(len(members))
        n = round_half_up(fraction * len(members))
        if n == 0:
            raise ParameterError(f"fraction {fraction} leaves no subjects of class {c}")
        keep.update(members[j].subject_id for j in order[:n])
    return [s for s in train_subjects if s.subject_id in keep]


def check_leakage(test_ids, *training_id_sets, context: str = ""):
    """Raise :class:`LeakageError` if any test id appears in a training set."""
    test = set(test_ids)
    for ids in training_id_sets:
        bad = test.intersection(ids)
        if bad:
            raise LeakageError(f"{context}: outer-test subjects used for training: {sorted(bad)}")


def check_plan(plan: FoldPlan, all_ids: Sequence[str]):
    """Partition and leakage checks over a (possibly hand-edited) plan."""
    seen = [i for f in plan.folds for i in f.test]
    if sorted(seen) != sorted(all_ids):
        raise LeakageError("outer test folds do not partition the subject set")
    for n, f in enumerate(plan.folds):
        check_leakage(f.test, f.train, *[i.train for i in f.inner], *[i.val for i in f.inner],
                      context=f"outer fold {n}")
        for m, inner in enumerate(f.inner):
            both = set(inner.train) & set(inner.val)
            if both:
                raise LeakageError(f"outer fold {n} inner fold {m}: train/val overlap {sorted(both)}")


@dataclass
class SubjectPrediction:
    subject_id: str
    window_probs: list[float]
    label: int
    mean_prob: float


def vote(subject_id: str, probs) -> SubjectPrediction:
    """Majority vote of windows (p > 0.5); a tie goes to mean probability > 0.5."""
    probs = [float(p) for p in probs]
    if not probs:
        raise ParameterError(f"subject {subject_id}: no window probabilities")
    ones = sum(p > 0.5 for p in probs)
    zeros = len(probs) - ones
    mean = float(np.mean(probs))
    label = 1 if ones > zeros else 0 if zeros > ones else int(mean > 0.5)
    return SubjectPrediction(subject_id, probs, label, mean)


def predict_subject(model, series: RoiSeries, window: int = 64, stride: int = 32) -> SubjectPrediction:
    """Sliding-window inference; ``model`` needs ``predict_proba(windows)``."""
    if series.length < window:
        raise SubjectTooShortError(f"subject {series.subject_id}: {series.length} time points < window {window}")
    offs = window_offsets(series.length, window, stride)
    probs = model.predict_proba(np.stack([series.values[o:o + window] for o in offs]))
    return vote(series.subject_id, probs)


def ensemble_predictions(per_model: Sequence[SubjectPrediction]) -> SubjectPrediction:
    if not per_model:
        raise ParameterError("nothing to ensemble")
    sid = per_model[0].subject_id
    if any(p.subject_id != sid for p in per_model):
        raise ParameterError(f"ensemble over mixed subjects: {sorted({p.subject_id for p in per_model})}")
    mean = float(np.mean([p.mean_prob for p in per_model]))
    probs = [w for p in per_model for w in p.window_probs]
    return SubjectPrediction(sid, probs, int(mean > 0.5), mean)


@dataclass
class ReconReport:
    strategy: str
    mse_full: float
    mse_masked: float | None
    n_samples: int


def recon_mse_eval(model, test_set: Sequence[RoiSeries], strategy, ratio_set, seed: int,
                   crops_per_subject: int = 10, window: int = 64, require_masked: bool = False) -> ReconReport:
    """Held-out reconstruction error under one masking strategy.

    ``mse_full`` averages per-crop MSE over all cells; ``mse_masked`` pools
    squared error over masked cells only and is None when nothing was
    masked (an error instead with ``require_masked``). ``model`` needs ``reconstruct(x)`` returning an object with
    ``.data`` or an array.
    """
    if not test_set:
        raise DataError("empty test set")
    strategy = MaskStrategy.parse(strategy)
    rng = Rng.derive(seed, "recon-eval", strategy.value)
    full, sq_masked, n_masked, n = 0.0, 0.0, 0, 0
    for s in test_set:
        if s.length < window:
            raise SubjectTooShortError(f"subject {s.subject_id}: {s.length} < window {window}")
        offs = rng.integers(s.length - window + 1, crops_per_subject)
        target = np.stack([s.values[o:o + window] for o in offs])
        masks = np.zeros(target.shape, dtype=bool)
        if strategy is not MaskStrategy.NONE:
            for i in range(len(offs)):
                masks[i] = make_mask(strategy, window, s.num_rois, sample_ratio(rng, ratio_set), rng).mask
        pred = model.reconstruct(np.where(masks, 0.0, target))
        pred = np.asarray(getattr(pred, "data", pred))
        err = (pred - target) ** 2
        full += float(err.mean(axis=(1, 2)).sum())
        sq_masked += float(err[masks].sum())
        n_masked += int(masks.sum())
        n += len(offs)
    if require_masked and not n_masked:
        raise ParameterError("masked-only reconstruction MSE is undefined: no cell was masked")
    return ReconReport(strategy.value, full / n, sq_masked / n_masked if n_masked else None, n)
