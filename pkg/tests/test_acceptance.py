"""Acceptance criteria, one test each.

Every test carries a ``criterion`` marker; conftest prints one PASS/FAIL
line per criterion at the end of the run. Run alone with::

    pytest tests/test_acceptance.py

The desk experiment dominates the runtime (about 10 minutes on one core).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import test_autodiff
import test_checkpoint
import test_evaluation
import test_masking
import test_metrics
import test_model
import test_training
from roimae.evaluation import make_nested_folds, recon_mse_eval
from roimae.experiment import CVSettings, run_cv
from roimae.masking import DEFAULT_RATIOS, MaskStrategy
from roimae.model import ModelConfig
from roimae.synth import SynthConfig, generate
from roimae.training import FinetuneConfig, PretrainConfig, finetune, pretrain

# desk-scale experiment settings (see README)
DESK_SEEDS = (0, 1, 2)
DESK_SYNTH = dict(num_subjects=60, num_rois=16, length=200)
DESK_MODEL = ModelConfig(num_rois=16, window_len=64, hidden_dim=16, num_heads=2, num_layers=2, ffn_dim=32,
                         recon_hidden=16, clf_hidden=64)
DESK_PRETRAIN = PretrainConfig(steps=3000, batch=8, lr=4e-3, loss_on_masked_only=True, log_every=500)
DESK_FINETUNE = FinetuneConfig(lr=1e-2, max_epochs=30, patience=10)
DESK_SCRATCH = FinetuneConfig(lr=1e-2, max_epochs=20, patience=8, freeze_encoder=False)


def desk_data(seed):
    return generate(SynthConfig(seed=seed, **DESK_SYNTH))


def desk_settings(seed, strategies, fractions):
    return CVSettings(model=DESK_MODEL, pretrain=DESK_PRETRAIN, finetune=DESK_FINETUNE,
                      scratch_finetune=DESK_SCRATCH, strategies=strategies, fractions=fractions, k=5, seed=seed)


def mean_auc(results, strategy, fraction):
    return float(np.mean([r.auc for r in results if r.strategy == strategy and r.fraction == fraction]))


@pytest.mark.criterion("gradient suite")
def test_gradient_suite():
    t0 = time.perf_counter()
    for name in sorted(test_autodiff.PRIMITIVES):
        for seed in (0, 1, 2):
            test_autodiff.test_primitive_gradients(name, seed)  # < 1e-5
    test_autodiff.test_dropout_gradient_uses_same_mask()
    test_model.test_end_to_end_reconstruction_gradient()  # < 1e-4, R=3 T=4 d=4 h=2 N=1
    test_model.test_end_to_end_classification_gradient()
    assert test_model.TINY.num_rois == 3 and test_model.TINY.window_len == 4
    assert test_model.TINY.hidden_dim == 4 and test_model.TINY.num_heads == 2 and test_model.TINY.num_layers == 1
    assert time.perf_counter() - t0 < 60.0


@pytest.mark.criterion("attention exactness")
def test_attention_exactness():
    test_model.test_attention_two_token_hand_value()
    test_model.test_attention_rows_sum_to_one_every_layer()
    test_autodiff.test_softmax_slices_sum_to_one()


@pytest.mark.criterion("optimizer oracle")
def test_optimizer_oracle():
    test_training.test_adamw_hand_oracle_100_pairs()
    test_training.test_cosine_endpoints_exact()


@pytest.mark.criterion("mask invariants")
def test_mask_invariants():
    for strategy in (MaskStrategy.ROI, MaskStrategy.TIME, MaskStrategy.RANDOM):
        for T, R, ratio in test_masking.SWEEP:
            test_masking.test_exact_counts_and_structure(strategy, T, R, ratio)
    test_masking.test_apply_mask_idempotent()


@pytest.mark.criterion("freeze invariant")
def test_freeze_invariant_50_epochs():
    tt = test_training
    ck = pretrain(tt.tiny_data(12), tt.pcfg(), tt.TINY, seed=0).checkpoint
    model = ck.to_model()
    tr, va = tt.split(tt.tiny_data(12, seed=5))
    res = finetune(model, tr, va, tt.fcfg(max_epochs=50, patience=50), seed=3)
    assert len(res.history) == 50
    after, before = res.model.state_arrays(), ck.param_arrays()
    for n in model.encoder_names():
        assert after[n].tobytes() == before[n].tobytes(), n


@pytest.mark.criterion("AUC oracle")
def test_auc_oracle():
    test_metrics.test_trapezoid_equals_pair_count_200_instances()
    test_metrics.test_auc_examples()


@pytest.mark.criterion("fold-plan properties")
def test_fold_plan_properties():
    test_evaluation.test_fold_plan_properties()
    test_evaluation.test_ten_subjects_one_per_class_per_fold()
    test_evaluation.test_leakage_guard_on_corrupted_plan()


@pytest.mark.criterion("checkpoint round trip")
def test_checkpoint_round_trip(tmp_path):
    test_checkpoint.test_save_load_save_byte_identical(tmp_path)
    test_checkpoint.test_round_trip_preserves_every_bit()
    test_checkpoint.test_version_mismatch()
    test_checkpoint.test_shape_mismatch_with_config()
    test_checkpoint.test_roi_mismatch_names_both_values(tmp_path)


@pytest.mark.criterion("desk-scale directional experiment")
def test_desk_directional_experiment():
    wins, full = [], []
    for seed in DESK_SEEDS:
        data = desk_data(seed)
        plan = make_nested_folds(data, 5, seed)
        _, scratch = run_cv(data, desk_settings(seed, ("none",), (0.2,)), plan)
        _, roi = run_cv(data, desk_settings(seed, ("mask_roi",), (0.2, 1.0)), plan)
        a_roi, a_scr, a_full = mean_auc(roi, "mask_roi", 0.2), mean_auc(scratch, "none", 0.2), \
            mean_auc(roi, "mask_roi", 1.0)
        print(f"seed {seed}: mask_roi@20% {a_roi:.3f}  scratch@20% {a_scr:.3f}  mask_roi@100% {a_full:.3f}")
        wins.append(a_roi > a_scr)
        full.append(a_full)
    assert sum(wins) >= 2, f"directional claim held in {sum(wins)} of {len(wins)} seeds"
    assert all(a >= 0.75 for a in full), full


class _Zero:
    def reconstruct(self, x):
        return np.zeros_like(x)


@pytest.mark.criterion("reconstruction sanity")
def test_reconstruction_sanity():
    data = desk_data(0)
    by_id = {s.subject_id: s for s in data}
    fold = make_nested_folds(data, 5, 0).folds[0]
    train, test = [by_id[i] for i in fold.train], [by_id[i] for i in fold.test]
    for strategy in ("mask_roi", "mask_time", "mask_random"):
        ck = pretrain(train, replace(DESK_PRETRAIN, strategy=strategy), DESK_MODEL, seed=1).checkpoint
        got = recon_mse_eval(ck.to_model(), test, strategy, DEFAULT_RATIOS, 7, require_masked=True)
        zero = recon_mse_eval(_Zero(), test, strategy, DEFAULT_RATIOS, 7, require_masked=True)
        print(f"{strategy}: masked MSE {got.mse_masked:.3f}  zero baseline {zero.mse_masked:.3f}")
        assert got.mse_masked < 0.5 * zero.mse_masked, strategy


@pytest.mark.criterion("paired t-test oracle")
def test_paired_ttest_oracle():
    test_metrics.test_ttest_matches_quadrature_oracle_50_samples()
