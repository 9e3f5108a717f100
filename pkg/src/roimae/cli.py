"""Command-line entry point: ``roimae {synth,pretrain,finetune,cv,eval}``.

Exit codes: 0 success, 2 configuration or parameter error, 3 data or
checkpoint error, 4 leakage-guard abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, override, write_resolved
from .data import load_manifest, load_subjects
from .errors import (
    CheckpointError, CompatibilityError, ConfigError, DataError, LeakageError, ParameterError, RoiMaeError,
    UsageError,
)
from .evaluation import inner_folds, predict_subject, recon_mse_eval
from .experiment import CVSettings, run_cv, score_predictions, write_json, write_results, write_roc
from .masking import MaskStrategy
from .model import TransformerModel
from .rng import Rng
from .synth import synth_generate
from .training import finetune, pretrain

log = logging.getLogger("roimae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_LEAKAGE = 0, 2, 3, 4


def _fractions(text: str) -> tuple:
    try:
        vals = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty fraction list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--seed", type=lambda s: int(s, 0), help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="roimae", description="Masked ROI time-series pre-training, fine-tuning and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic labelled dataset")

    sp = sub.add_parser("pretrain", parents=[common], help="masked-reconstruction pre-training")
    sp.add_argument("--mask", choices=[m.value for m in MaskStrategy])
    sp.add_argument("--manifest")
    sp.add_argument("--resume", action="store_true", help="continue from an existing ckpt.bin")

    sp = sub.add_parser("finetune", parents=[common], help="train a classifier head")
    sp.add_argument("--mask", choices=[m.value for m in MaskStrategy],
                    help="'none' trains the scratch baseline instead of loading a checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--checkpoint")
    sp.add_argument("--stride", type=int)

    sp = sub.add_parser("cv", parents=[common], help="nested cross-validation experiment")
    sp.add_argument("--mask", choices=[m.value for m in MaskStrategy], help="run one strategy only")
    sp.add_argument("--manifest")
    sp.add_argument("--fractions", type=_fractions)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--jobs", type=int)

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a labelled test set")
    sp.add_argument("--mode", choices=["recon", "classify"], default="classify")
    sp.add_argument("--mask", choices=[m.value for m in MaskStrategy], help="recon: one strategy only")
    sp.add_argument("--manifest", help="test manifest")
    sp.add_argument("--checkpoint")
    sp.add_argument("--stride", type=int)
    return p


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    kw = {"seed": args.seed, "out": args.out}
    for name in ("manifest", "checkpoint", "fractions", "stride", "jobs"):
        kw[name] = getattr(args, name, None)
    if args.command == "eval" and args.manifest:
        kw["test_manifest"] = kw.pop("manifest")
    if kw.get("jobs") is not None and kw["jobs"] < 1:
        raise ConfigError("--jobs must be >= 1")
    return override(cfg, **kw)


def _subjects(path: str, num_rois: int):
    if not path:
        raise ConfigError("no manifest given: set [experiment] manifest or pass --manifest")
    return load_subjects(load_manifest(path), num_rois)


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    out = Path(cfg.experiment.out)
    recs = synth_generate(synth, out)
    write_resolved(replace(cfg, synth=synth), out)
    log.info("wrote %d subjects to %s", len(recs), out)
    return EXIT_OK


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    strategy = MaskStrategy.parse(args.mask or cfg.pretrain.strategy)
    if strategy is MaskStrategy.NONE:
        raise ConfigError("pretrain needs a mask strategy; 'none' has nothing to reconstruct")
    pc = replace(cfg.pretrain, strategy=strategy.value)
    series = _subjects(cfg.experiment.manifest, cfg.model.num_rois)
    out = Path(cfg.experiment.out) / "pretrain" / strategy.value
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, loss_path = out / "ckpt.bin", out / "loss.csv"
    resume = None
    if args.resume and ckpt_path.exists():
        resume = load_checkpoint(ckpt_path, cfg.model.num_rois)
        if resume.metadata.get("strategy") != strategy.value:
            raise ConfigError(f"{ckpt_path} was pre-trained with {resume.metadata.get('strategy')}, not {strategy.value}")
        log.info("resuming from step %s", resume.metadata.get("step"))
    val = None
    if pc.keep_best_val:
        series, val = _holdout(series, cfg.seed)
    res = pretrain(series, pc, cfg.model, cfg.seed, resume=resume, val=val,
                   on_log=lambda s, lr, loss: log.info("step %d lr %.3g loss %.5f", s, lr, loss))
    mode = "a" if resume is not None and loss_path.exists() else "w"
    with loss_path.open(mode, encoding="utf-8") as fh:
        if mode == "w":
            fh.write("step,lr,loss\n")
        for step, lr, loss in res.history:
            fh.write(f"{step},{lr:.17g},{loss:.17g}\n")
    save_checkpoint(res.checkpoint, ckpt_path)
    write_resolved(replace(cfg, pretrain=pc), out)
    log.info("checkpoint %s", ckpt_path)
    return EXIT_OK


def _holdout(series, seed: int, k: int = 5):
    """Stratified train/validation split: one of k folds held out."""
    labels = {s.subject_id: s.label for s in series}
    ids = [s.subject_id for s in series]
    counts = [sum(1 for s in series if s.label == c) for c in (0, 1)]
    kk = max(2, min(k, *counts))
    if min(counts) < 2:
        raise DataError(f"need at least 2 subjects per class for a validation split, have {counts}")
    fold = inner_folds(ids, labels, kk, Rng.derive(seed, "holdout"))[0]
    by = {s.subject_id: s for s in series}
    return [by[i] for i in fold.train], [by[i] for i in fold.val]


def cmd_finetune(cfg: ExperimentConfig, args) -> int:
    series = _subjects(cfg.experiment.manifest, cfg.model.num_rois)
    train, val = _holdout(series, cfg.seed)
    scratch = args.mask == "none" or (args.mask is None and not cfg.experiment.checkpoint)
    if scratch:
        model = TransformerModel.init(cfg.model.scratch(), cfg.seed)
        fc = replace(cfg.scratch_finetune or cfg.finetune, freeze_encoder=False)
        tag = "none"
    else:
        if not cfg.experiment.checkpoint:
            raise ConfigError("finetune needs --checkpoint (or --mask none for the scratch baseline)")
        base = load_checkpoint(cfg.experiment.checkpoint, series[0].num_rois)
        model, fc = base.to_model(), cfg.finetune
        tag = base.metadata.get("strategy", "pretrained")
    res = finetune(model, train, val, fc, cfg.seed)
    out = Path(cfg.experiment.out) / "finetune" / tag
    out.mkdir(parents=True, exist_ok=True)
    meta = {"stage": "finetune", "seed": cfg.seed, "strategy": tag, "best_epoch": res.best_epoch}
    save_checkpoint(Checkpoint.from_model(res.model, meta), out / "model.bin")
    with (out / "history.csv").open("w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_auc,val_loss\n")
        for e, tl, va, vl in res.history:
            fh.write(f"{e},{tl:.17g},{va:.17g},{vl:.17g}\n")
    write_resolved(replace(cfg, finetune=fc), out)
    log.info("best epoch %d, validation AUC %.3f", res.best_epoch, res.best_val)
    return EXIT_OK


def cmd_cv(cfg: ExperimentConfig, args) -> int:
    series = _subjects(cfg.experiment.manifest, cfg.model.num_rois)
    exp = cfg.experiment
    strategies = (args.mask,) if args.mask else exp.strategies
    for s in strategies:
        MaskStrategy.parse(s)
    st = CVSettings(model=cfg.model, pretrain=cfg.pretrain, finetune=cfg.finetune, strategies=tuple(strategies),
                    fractions=tuple(exp.fractions), k=exp.k, seed=cfg.seed, scratch_finetune=cfg.scratch_finetune)
    plan, results = run_cv(series, st, jobs=exp.jobs)
    out = Path(exp.out) / "cv"
    summary = write_results(out, plan, results)
    write_resolved(cfg, out)
    log.info("summary %s", summary)
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    exp = cfg.experiment
    if not exp.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    path = exp.test_manifest or exp.manifest
    if not path:
        raise ConfigError("no test manifest given: set [experiment] test_manifest or pass --manifest")
    records = load_manifest(path)
    ck = load_checkpoint(exp.checkpoint)
    series = load_subjects(records)
    if series and series[0].num_rois != ck.model_config.num_rois:
        raise CompatibilityError(
            f"checkpoint has num_rois={ck.model_config.num_rois} but data has {series[0].num_rois} ROIs"
        )
    model = ck.to_model()
    out = Path(exp.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    window = ck.model_config.window_len
    if args.mode == "recon":
        strategies = (args.mask,) if args.mask else exp.eval_strategies
        with (out / "recon.csv").open("w", encoding="utf-8") as fh:
            fh.write("strategy,mse_full,mse_masked,n_samples\n")
            for s in strategies:
                rep = recon_mse_eval(model, series, s, cfg.pretrain.ratios, cfg.seed,
                                     cfg.pretrain.crops_per_subject, window)
                masked = "" if rep.mse_masked is None else f"{rep.mse_masked:.17g}"
                fh.write(f"{rep.strategy},{rep.mse_full:.17g},{masked},{rep.n_samples}\n")
                log.info("%s: full %.4f masked %s", rep.strategy, rep.mse_full, masked)
    else:
        preds = [predict_subject(model, s, window, cfg.finetune.stride) for s in series]
        r = score_predictions(0, str(ck.metadata.get("strategy", "")), 1.0, series, preds)
        doc = {k: v for k, v in r.metrics_doc().items() if k not in ("fold", "fraction")}
        write_json(out / "metrics.json", doc)
        write_roc(out / "roc_points.csv", r.roc_points)
        with (out / "predictions.csv").open("w", encoding="utf-8") as fh:
            fh.write("subject_id,label,mean_prob,voted_label\n")
            for sid, y, p, v in r.predictions:
                fh.write(f"{sid},{y},{p:.17g},{v}\n")
        log.info("AUC %.3f accuracy %.3f", r.auc, r.accuracy)
    write_resolved(cfg, out)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "cv": cmd_cv, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command != "synth":
            cfg.seed  # fail before any input is read
        return COMMANDS[args.command](cfg, args)
    except LeakageError as e:
        print(f"roimae: leakage guard: {e}", file=sys.stderr)
        return EXIT_LEAKAGE
    except (ConfigError, ParameterError, UsageError, CompatibilityError) as e:
        print(f"roimae: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"roimae: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except RoiMaeError as e:
        print(f"roimae: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
