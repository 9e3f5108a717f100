"""Optimiser, schedule, losses and the two training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint
from .data import RoiSeries, window_offsets
from .errors import CompatibilityError, DataError, DimensionError, ParameterError, SubjectTooShortError
from .masking import DEFAULT_RATIOS, MaskStrategy, mask_batch
from .metrics import auc as auc_score
from .model import ModelConfig, TransformerModel, classify
from .rng import Rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimiser and schedule


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "AdamWState":
        return cls({n: np.zeros_like(a) for n, a in params.items()},
                   {n: np.zeros_like(a) for n, a in params.items()}, **kw)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, wd: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    A missing gradient counts as zero, so decay still applies.
    """
    state.t += 1
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} vs parameter {theta.shape}")
        _kernels.adamw(theta, np.ascontiguousarray(g), state.m[name], state.v[name],
                       float(lr), float(wd), state.beta1, state.beta2, state.eps, state.t)


class AdamW:
    """Parameter-dict wrapper over :func:`adamw_step`."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float, moments=None):
        self.params = params
        self.weight_decay = weight_decay
        arrays = {n: t.data for n, t in params.items()}
        self.state = AdamWState.zeros_like(arrays)
        if moments is not None:
            m, v = moments
            for n in arrays:
                if n in m:
                    self.state.m[n][...] = m[n]
                    self.state.v[n][...] = v[n]

    @property
    def m(self):
        return self.state.m

    @property
    def v(self):
        return self.state.v

    def step(self, lr: float):
        arrays = {n: t.data for n, t in self.params.items()}
        grads = {n: t.grad for n, t in self.params.items() if t.grad is not None}
        adamw_step(arrays, grads, self.state, lr, self.weight_decay)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total < 1:
        raise ParameterError(f"total steps must be >= 1, got {total}")
    if step >= total:
        return 0.0
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * max(step, 0) / total)))


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target, mask: np.ndarray | None = None, masked_only: bool = False) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = ad.sub(pred, Tensor(target))
    sq = ad.mul(diff, diff)
    if not masked_only:
        return ad.mean(sq)
    if mask is None:
        raise ParameterError("masked-only MSE needs a mask")
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ParameterError("masked-only MSE with an empty mask")
    return ad.scale(ad.total(ad.mul(sq, Tensor(mask.astype(np.float64)))), 1.0 / n)


def bce_loss(p, y) -> Tensor:
    return ad.bce(ad.as_tensor(p), y)


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainConfig:
    steps: int = 50000
    batch: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-5
    dropout: float = 0.1
    strategy: str = "mask_roi"
    ratios: tuple = DEFAULT_RATIOS
    crops_per_subject: int = 10
    window: int = 64
    loss_on_masked_only: bool = False
    log_every: int = 100
    keep_best_val: bool = False  # else the final-step checkpoint

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.crops_per_subject < 1 or self.window < 1:
            raise ParameterError("steps >= 0, batch, crops_per_subject and window >= 1 required")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise ParameterError("lr, weight_decay >= 0 and dropout in [0, 1) required")
        self.ratios = tuple(float(r) for r in self.ratios)
        if MaskStrategy.parse(self.strategy) is MaskStrategy.NONE:
            raise ParameterError("pre-training needs a mask strategy; 'none' is only for the scratch baseline")


def _check_series(series: Sequence[RoiSeries], window: int, num_rois: int):
    if not series:
        raise DataError("empty dataset")
    for s in series:
        if s.num_rois != num_rois:
            raise CompatibilityError(f"subject {s.subject_id} has {s.num_rois} ROIs, model expects {num_rois}")
        if s.length < window:
            raise SubjectTooShortError(f"subject {s.subject_id}: {s.length} time points < window {window}")


def crop_pool(series: Sequence[RoiSeries], n: int, window: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """(subject index, offset) pairs for ``n`` random crops of every subject."""
    subj = np.repeat(np.arange(len(series)), n)
    offs = np.concatenate([rng.integers(s.length - window + 1, n) for s in series])
    return subj, offs


def _gather(series, subj, offs, window) -> np.ndarray:
    return np.stack([series[i].values[o:o + window] for i, o in zip(subj, offs)])


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)  # (step, lr, loss)


def pretrain(series: Sequence[RoiSeries], cfg: PretrainConfig, model_cfg: ModelConfig, seed: int,
             resume: Checkpoint | None = None,
             on_log: Callable[[int, float, float], None] | None = None,
             val: Sequence[RoiSeries] | None = None) -> PretrainResult:
    """Masked-reconstruction pre-training of encoder and reconstruction head.

    ``cfg.steps`` is the total schedule length; with ``resume`` training
    continues from the checkpoint's recorded step. With
    ``cfg.keep_best_val`` the returned parameters are those with the lowest
    held-out reconstruction error on ``val`` among the logged steps.
    """
    if cfg.keep_best_val and not val:
        raise ParameterError("keep_best_val needs a validation set")
    if resume is not None:
        model = resume.to_model()
        start = int(resume.metadata.get("step", 0))
        moments = resume.optimizer_moments()
    else:
        model = TransformerModel.init(model_cfg, seed)
        start, moments = 0, None
    model.cfg = replace(model.cfg, dropout_p=cfg.dropout)
    mcfg = model.cfg
    if cfg.window != mcfg.window_len:
        raise ParameterError(f"crop window {cfg.window} != model window_len {mcfg.window_len}")
    _check_series(series, cfg.window, mcfg.num_rois)

    trainable = model.encoder_names() + model.head_names("recon")
    model.set_trainable(trainable)
    opt = AdamW({n: model.params[n] for n in trainable}, cfg.weight_decay, moments)
    data_rng = Rng.derive(seed, "pretrain", "data", start)
    drop_rng = Rng.derive(seed, "pretrain", "dropout", start)
    strategy = MaskStrategy.parse(cfg.strategy)

    def val_error():
        from .evaluation import recon_mse_eval
        rep = recon_mse_eval(model, val, strategy, cfg.ratios, seed, cfg.crops_per_subject, cfg.window)
        return rep.mse_masked if cfg.loss_on_masked_only and rep.mse_masked is not None else rep.mse_full

    history = []
    best, best_err, best_step = None, math.inf, start
    step = start
    order = np.empty(0, dtype=int)
    pos = 0
    while step < cfg.steps:
        if pos >= order.size:
            subj, offs = crop_pool(series, cfg.crops_per_subject, cfg.window, data_rng)
            order = data_rng.permutation(subj.size)
            subj, offs = subj[order], offs[order]
            pos = 0
        idx = slice(pos, pos + cfg.batch)
        pos += cfg.batch
        target = _gather(series, subj[idx], offs[idx], cfg.window)
        masked, mask = mask_batch(target, strategy, cfg.ratios, data_rng)
        lr = cosine_lr(step, cfg.steps, cfg.lr)
        with Tape() as tape:
            pred = model.reconstruct(masked, training=True, rng=drop_rng)
            loss = mse_loss(pred, target, mask, cfg.loss_on_masked_only)
        opt.zero_grad()
        tape.backward(loss)
        opt.step(lr)
        step += 1
        if step == start + 1 or step % cfg.log_every == 0 or step == cfg.steps:
            history.append((step, lr, loss.item()))
            if on_log:
                on_log(step, lr, loss.item())
            if cfg.keep_best_val:
                err = val_error()
                if err < best_err:
                    best_err, best_step = err, step
                    best = {n: model.params[n].data.copy() for n in trainable}
    model.set_trainable([])
    meta = {"step": step, "seed": int(seed), "strategy": strategy.value, "stage": "pretrain"}
    if best is not None:
        for n, a in best.items():
            model.params[n].data[...] = a
        meta.update(best_step=best_step, best_val_mse=best_err)
    return PretrainResult(Checkpoint.from_model(model, meta, opt), history)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneConfig:
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-3
    dropout: float = 0.1
    max_epochs: int = 100
    patience: int = 20
    freeze_encoder: bool = True
    crops_per_subject: int = 10
    window: int = 64
    stride: int = 32

    def __post_init__(self):
        if self.batch < 1 or self.max_epochs < 0 or self.patience < 1 or self.stride < 1:
            raise ParameterError("batch, patience, stride >= 1 and max_epochs >= 0 required")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise ParameterError("lr, weight_decay >= 0 and dropout in [0, 1) required")


class FeatureBank:
    """Memoised inference-mode encoder outputs keyed by (subject_id, offset).

    A frozen encoder maps each window to a fixed feature matrix, so windows
    revisited across epochs, or across inner folds sharing one encoder, are
    encoded once.
    """

    def __init__(self, encode: Callable[[np.ndarray], np.ndarray], window: int, chunk: int = 256):
        self.encode = encode
        self.window = window
        self.chunk = chunk
        self._store: dict[tuple[str, int], np.ndarray] = {}

    def __len__(self):
        return len(self._store)

    def get(self, series: Sequence[RoiSeries], offsets) -> np.ndarray:
        keys = [(s.subject_id, int(o)) for s, o in zip(series, offsets)]
        todo = {}
        for s, k in zip(series, keys):
            if k not in self._store:
                todo.setdefault(k, s)
        items = list(todo.items())
        for lo in range(0, len(items), self.chunk):
            part = items[lo:lo + self.chunk]
            z = self.encode(np.stack([s.values[o:o + self.window] for (_, o), s in part]))
            for (k, _), zi in zip(part, z):
                self._store[k] = zi
        return np.stack([self._store[k] for k in keys])


def model_encoder(model: TransformerModel) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: model.encode(x).data


@dataclass
class FinetuneResult:
    model: TransformerModel
    best_val: float
    best_epoch: int
    history: list = field(default_factory=list)  # (epoch, train_loss, val_auc, val_loss)


def _val_score(probs_by_subject, labels):
    p = np.array([pr.mean() for pr in probs_by_subject])
    y = np.asarray(labels, dtype=float)
    loss = float(ad.bce(Tensor(p), y).data)
    if 0 < y.sum() < y.size:
        return auc_score(p, y).auc, loss
    return float("nan"), loss


def finetune(model: TransformerModel, train: Sequence[RoiSeries], val: Sequence[RoiSeries],
             cfg: FinetuneConfig, seed: int, encode: Callable | None = None,
             bank: FeatureBank | None = None) -> FinetuneResult:
    """Train the classifier head (or, unfrozen, encoder and head) with BCE.

    The model is modified in place and returned holding the parameters of
    the best validation epoch: highest subject-level AUC, ties broken by
    lower validation BCE. A frozen encoder runs in inference mode;
    ``encode`` substitutes another feature map and ``bank`` shares cached
    features between runs over the same encoder.
    """
    mcfg = model.cfg
    if cfg.window != mcfg.window_len:
        raise ParameterError(f"crop window {cfg.window} != model window_len {mcfg.window_len}")
    if not train:
        raise DataError("empty training set")
    nr = train[0].num_rois
    if encode is None and nr != mcfg.num_rois:
        raise CompatibilityError(f"data has {nr} ROIs but the checkpoint model has num_rois={mcfg.num_rois}")
    _check_series(train, cfg.window, nr)
    if val:
        _check_series(val, cfg.window, nr)

    model.reinit_head("clf", seed)
    frozen = cfg.freeze_encoder
    trainable = model.head_names("clf") + ([] if frozen else model.encoder_names())
    model.set_trainable(trainable)
    opt = AdamW({n: model.params[n] for n in trainable}, cfg.weight_decay)
    data_rng = Rng.derive(seed, "finetune", "data")
    drop_rng = Rng.derive(seed, "finetune", "dropout")
    if frozen and bank is None:
        bank = FeatureBank(encode or model_encoder(model), cfg.window)
    if not frozen:
        model.cfg = replace(mcfg, dropout_p=cfg.dropout)
    labels = np.array([s.label for s in train], dtype=float)
    val_offsets = [window_offsets(s.length, cfg.window, cfg.stride) for s in val]

    def val_probs():
        out = []
        for s, offs in zip(val, val_offsets):
            if frozen:
                out.append(classify(bank.get([s] * len(offs), offs), model.params).data)
            else:
                out.append(model.predict_proba(np.stack([s.values[o:o + cfg.window] for o in offs])))
        return out

    def snapshot():
        return {n: model.params[n].data.copy() for n in trainable}

    steps_per_epoch = math.ceil(len(train) * cfg.crops_per_subject / cfg.batch)
    total = max(1, cfg.max_epochs * steps_per_epoch)
    best, best_key, best_epoch = snapshot(), (-math.inf, -math.inf), 0
    history, step, since = [], 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        subj, offs = crop_pool(train, cfg.crops_per_subject, cfg.window, data_rng)
        order = data_rng.permutation(subj.size)
        subj, offs = subj[order], offs[order]
        losses = []
        for lo in range(0, subj.size, cfg.batch):
            si, oi = subj[lo:lo + cfg.batch], offs[lo:lo + cfg.batch]
            with Tape() as tape:
                if frozen:
                    z = Tensor(bank.get([train[i] for i in si], oi))
                    p = classify(z, model.params, cfg.dropout, True, drop_rng)
                else:
                    p = model.classify(_gather(train, si, oi, cfg.window), True, drop_rng)
                loss = bce_loss(p, labels[si])
            opt.zero_grad()
            tape.backward(loss)
            opt.step(cosine_lr(step, total, cfg.lr))
            step += 1
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        if val:
            vauc, vloss = _val_score(val_probs(), [s.label for s in val])
        else:
            vauc, vloss = float("nan"), train_loss
        history.append((epoch, train_loss, vauc, vloss))
        key = (-math.inf if math.isnan(vauc) else vauc, -vloss)
        if key > best_key:
            best, best_key, best_epoch, since = snapshot(), key, epoch, 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    for n, a in best.items():
        model.params[n].data[...] = a
    model.set_trainable([])
    model.cfg = mcfg
    return FinetuneResult(model, best_key[0], best_epoch, history)
