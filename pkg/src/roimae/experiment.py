"""Nested cross-validation experiment: per outer fold, pre-train on the
outer-training subjects, fine-tune one model per inner fold for every
training fraction, and score the inner-fold ensemble on the outer test set."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RoiSeries
from .evaluation import (
    FoldPlan, check_leakage, check_plan, ensemble_predictions, inner_folds, make_nested_folds,
    predict_subject, subsample_training,
)
from .errors import ParameterError
from .masking import MaskStrategy
from .metrics import auc, confusion_metrics
from .model import ModelConfig, TransformerModel
from .rng import Rng
from .training import FeatureBank, FinetuneConfig, PretrainConfig, finetune, model_encoder, pretrain

log = logging.getLogger(__name__)

FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class CVSettings:
    model: ModelConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    strategies: tuple = ("none", "mask_roi", "mask_time", "mask_random")
    fractions: tuple = FRACTIONS
    k: int = 5
    seed: int = 0
    scratch_finetune: FinetuneConfig | None = None

    def scratch_model(self) -> ModelConfig:
        return self.model.scratch()


@dataclass
class FoldResult:
    fold: int
    strategy: str
    fraction: float
    auc: float
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    counts: dict
    roc_points: list
    predictions: list = field(default_factory=list)  # (subject_id, label, mean_prob, voted)
    pretrain_loss: list = field(default_factory=list)

    def metrics_doc(self) -> dict:
        return {
            "fold": self.fold, "fraction": self.fraction, "strategy": self.strategy,
            "auc": self.auc, "accuracy": self.accuracy,
            "sensitivity": self.sensitivity, "specificity": self.specificity,
            "counts": self.counts,
        }


def score_predictions(fold, strategy, fraction, test: Sequence[RoiSeries], ensembled) -> FoldResult:
    labels = [s.label for s in test]
    roc = auc([p.mean_prob for p in ensembled], labels)
    cm = confusion_metrics([p.label for p in ensembled], labels)
    return FoldResult(
        fold, strategy, fraction, roc.auc, cm.accuracy, cm.sensitivity, cm.specificity,
        {"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn}, roc.points,
        [(p.subject_id, s.label, p.mean_prob, p.label) for p, s in zip(ensembled, test)],
    )


def run_fold(series: Sequence[RoiSeries], plan: FoldPlan, fold: int, st: CVSettings) -> list[FoldResult]:
    by_id = {s.subject_id: s for s in series}
    of = plan.folds[fold]
    test = [by_id[i] for i in of.test]
    outer_train = [by_id[i] for i in of.train]
    labels = {s.subject_id: s.label for s in series}
    results = []
    for strategy in st.strategies:
        strat = MaskStrategy.parse(strategy)
        base = None
        pre_hist = []
        if strat is not MaskStrategy.NONE:
            check_leakage(of.test, [s.subject_id for s in outer_train], context=f"fold {fold} pre-training")
            pc = replace(st.pretrain, strategy=strat.value)
            res = pretrain(outer_train, pc, st.model, Rng.derive(st.seed, "pretrain", fold, strat.value).seed)
            base, pre_hist = res.checkpoint, res.history
            bank = FeatureBank(model_encoder(base.to_model()), st.finetune.window)
        for fraction in st.fractions:
            sub = subsample_training(outer_train, fraction, Rng.derive(st.seed, "fraction", fold).seed)
            ids = [s.subject_id for s in sub]
            kk = min(st.k, *(sum(1 for s in sub if s.label == c) for c in (0, 1)))
            if kk < 2:
                raise ParameterError(
                    f"fold {fold}: fraction {fraction} keeps a single subject of one class; inner folds need two"
                )
            if fraction == 1.0 and kk == st.k:
                inners = of.inner
            else:
                inners = inner_folds(ids, labels, kk, Rng.derive(st.seed, "inner", fold, fraction))
            per_model = []
            for j, inner in enumerate(inners):
                check_leakage(of.test, inner.train, inner.val, context=f"fold {fold} inner {j}")
                tr = [by_id[i] for i in inner.train]
                va = [by_id[i] for i in inner.val]
                fseed = Rng.derive(st.seed, "finetune", fold, strat.value, fraction, j).seed
                if base is None:
                    model = TransformerModel.init(st.scratch_model(), fseed)
                    fc = replace(st.scratch_finetune or st.finetune, freeze_encoder=False)
                    ft = finetune(model, tr, va, fc, fseed)
                else:
                    model = base.to_model()
                    ft = finetune(model, tr, va, replace(st.finetune, freeze_encoder=True), fseed, bank=bank)
                stride = st.finetune.stride
                per_model.append([predict_subject(ft.model, s, st.finetune.window, stride) for s in test])
            ensembled = [ensemble_predictions([pm[i] for pm in per_model]) for i in range(len(test))]
            r = score_predictions(fold, strat.value, fraction, test, ensembled)
            r.pretrain_loss = pre_hist
            log.info("fold %d %s frac %.2f: auc %.3f acc %.3f", fold, strat.value, fraction, r.auc, r.accuracy)
            results.append(r)
    return results


def _fold_job(args):
    return run_fold(*args)


def run_cv(series: Sequence[RoiSeries], st: CVSettings, plan: FoldPlan | None = None,
           jobs: int = 1) -> tuple[FoldPlan, list[FoldResult]]:
    if plan is None:
        plan = make_nested_folds(series, st.k, st.seed)
    check_plan(plan, [s.subject_id for s in series])
    args = [(series, plan, f, st) for f in range(len(plan.folds))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            chunks = list(ex.map(_fold_job, args))
    else:
        chunks = [_fold_job(a) for a in args]
    return plan, [r for c in chunks for r in c]


def _mean_std(vals):
    vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def summarize(results: Sequence[FoldResult]) -> list[dict]:
    """Mean ± sample std over folds, one row per (strategy, fraction)."""
    groups: dict[tuple, list[FoldResult]] = {}
    for r in results:
        groups.setdefault((r.strategy, r.fraction), []).append(r)
    rows = []
    for (strategy, fraction), rs in groups.items():
        row = {"strategy": strategy, "fraction": fraction, "folds": len(rs)}
        for m in ("auc", "accuracy", "sensitivity", "specificity"):
            row[m + "_mean"], row[m + "_std"] = _mean_std([getattr(r, m) for r in rs])
        rows.append(row)
    return rows


def write_results(out_dir, plan: FoldPlan, results: Sequence[FoldResult]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "folds.json")
    for r in results:
        d = out / f"fold{r.fold}" / r.strategy / f"frac{r.fraction:g}"
        d.mkdir(parents=True, exist_ok=True)
        write_json(d / "metrics.json", r.metrics_doc())
        write_roc(d / "roc_points.csv", r.roc_points)
        with (d / "predictions.csv").open("w", encoding="utf-8") as fh:
            fh.write("subject_id,label,mean_prob,voted_label\n")
            for sid, y, p, v in r.predictions:
                fh.write(f"{sid},{y},{p:.17g},{v}\n")
    write_json(out / "summary.json", summarize(results))
    return out / "summary.json"


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_roc(path, points):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("fpr,tpr,threshold\n")
        for fpr, tpr, thr in points:
            fh.write(f"{fpr:.17g},{tpr:.17g},{thr:.17g}\n")
