"""Synthetic labelled ROI datasets with class-dependent connectivity.

Every ROI loads on one global factor and on the factor of its block, so
ROI pairs correlate at ``rho_global`` across blocks and at the block's
``rho`` within it. The first ``signal_blocks`` blocks use ``rho_case`` for
label 1 and ``rho_control`` for label 0; the rest draw a per-subject value
uniformly within ``background_spread`` of ``rho_background``, so block
coherence varies between subjects whatever their label.
The correlated innovations drive a stationary AR(1) recursion per ROI and
white observation noise is added on top.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .data import RoiSeries, SubjectRecord, standardize, write_manifest, write_series
from .errors import DataError, ParameterError
from .masking import round_half_up
from .rng import Rng


@dataclass(frozen=True)
class SynthConfig:
    num_subjects: int = 60
    num_rois: int = 16
    length: int = 200
    class_balance: float = 0.5
    ar_coef: float = 0.9
    block_size: int = 4
    signal_blocks: int = 1
    rho_global: float = 0.4
    rho_case: float = 0.85
    rho_control: float = 0.45
    rho_background: float = 0.85
    background_spread: float = 0.0
    subject_jitter: float = 0.05
    noise: float = 0.15
    num_sites: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_subjects < 2 or self.num_rois < 1 or self.length < 2:
            raise ParameterError("num_subjects >= 2, num_rois >= 1 and length >= 2 are required")
        if not 0.0 < self.class_balance < 1.0:
            raise ParameterError(f"class_balance must be in (0, 1), got {self.class_balance}")
        if not -1.0 < self.ar_coef < 1.0:
            raise ParameterError(f"ar_coef must be in (-1, 1) for stationarity, got {self.ar_coef}")
        if self.block_size < 1 or self.signal_blocks < 0:
            raise ParameterError("block_size >= 1 and signal_blocks >= 0 are required")
        if self.signal_blocks * self.block_size > self.num_rois:
            raise ParameterError(
                f"{self.signal_blocks} signal blocks of size {self.block_size} exceed {self.num_rois} ROIs"
            )
        if not 0.0 <= self.rho_global < 1.0:
            raise ParameterError(f"rho_global must be in [0, 1), got {self.rho_global}")
        for name in ("rho_case", "rho_control", "rho_background"):
            if not self.rho_global <= getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must be in [rho_global, 1), got {getattr(self, name)}")
        lo, hi = self.rho_background - self.background_spread, self.rho_background + self.background_spread
        if self.background_spread < 0 or lo < self.rho_global or hi >= 1.0:
            raise ParameterError(
                f"rho_background ± background_spread must stay in [rho_global, 1), got [{lo}, {hi}]"
            )
        if self.noise < 0 or self.subject_jitter < 0 or self.num_sites < 1:
            raise ParameterError("noise and subject_jitter must be >= 0, num_sites >= 1")

    def block_of(self) -> np.ndarray:
        """Block index of every ROI."""
        return np.arange(self.num_rois) // self.block_size

    def signal_rois(self) -> np.ndarray:
        return np.arange(self.signal_blocks * self.block_size)


def _subject_series(cfg: SynthConfig, label: int, rng: Rng) -> np.ndarray:
    blocks = cfg.block_of()
    nb = int(blocks.max()) + 1
    rho = cfg.rho_background + cfg.background_spread * rng.uniform(-1.0, 1.0, nb)
    rho[: cfg.signal_blocks] = cfg.rho_case if label == 1 else cfg.rho_control
    g = cfg.rho_global
    rho = np.clip(rho + cfg.subject_jitter * rng.normal(nb), g, 0.95)[blocks]
    t = cfg.length
    glob = rng.normal((t, 1))
    factors = rng.normal((t, nb))[:, blocks]
    own = rng.normal((t, cfg.num_rois))
    innov = np.sqrt(g) * glob + np.sqrt(rho - g) * factors + np.sqrt(1.0 - rho) * own
    phi = cfg.ar_coef
    innov[1:] *= np.sqrt(1.0 - phi * phi)
    x = _kernels.ar1(np.ascontiguousarray(innov), phi)
    return x + cfg.noise * rng.normal((t, cfg.num_rois))


def generate(cfg: SynthConfig) -> list[RoiSeries]:
    """In-memory dataset; every series is standardised and carries id and label."""
    n1 = round_half_up(cfg.class_balance * cfg.num_subjects)
    labels = np.zeros(cfg.num_subjects, dtype=int)
    labels[:n1] = 1
    labels = labels[Rng.derive(cfg.seed, "labels").permutation(cfg.num_subjects)]
    out = []
    for i, y in enumerate(labels):
        x = _subject_series(cfg, int(y), Rng.derive(cfg.seed, "subject", i))
        s = standardize(RoiSeries(x, subject_id=f"sub-{i + 1:04d}", label=int(y)))
        out.append(s)
    return out


def synth_generate(cfg: SynthConfig, out_dir) -> list[SubjectRecord]:
    """Write ``manifest.csv`` plus ``series/<id>.csv`` under ``out_dir``.

    The manifest is written last via an atomic rename so a failed run never
    leaves one behind.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "series").mkdir(parents=True, exist_ok=True)
        series = generate(cfg)
        records = []
        for i, s in enumerate(series):
            rel = f"series/{s.subject_id}.csv"
            write_series(out_dir / rel, s.values)
            records.append(SubjectRecord(s.subject_id, s.label, f"site{i % cfg.num_sites}", rel))
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest", suffix=".csv")
        os.close(fd)
        write_manifest(tmp, records)
        os.replace(tmp, out_dir / "manifest.csv")
    except OSError as e:
        raise DataError(f"cannot write synthetic dataset to {out_dir}: {e}") from e
    return records


def block_correlation(series: RoiSeries, rois) -> float:
    """Mean off-diagonal Pearson correlation among ``rois``."""
    rois = np.asarray(rois)
    c = np.corrcoef(series.values[:, rois], rowvar=False)
    k = len(rois)
    return float((c.sum() - np.trace(c)) / (k * (k - 1)))
