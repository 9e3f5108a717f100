"""ROI time-series I/O, standardisation, cropping and sliding windows.

Series files are comma-separated with one row per time point and one
column per ROI; an optional non-numeric header row is skipped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, SubjectTooShortError
from .rng import Rng

MANIFEST_HEADER = ("subject_id", "label", "site", "series_path")


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: int
    site: str
    series_path: str


@dataclass
class RoiSeries:
    values: np.ndarray
    standardized: bool = False
    subject_id: str = ""
    label: int | None = None

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_rois(self) -> int:
        return self.values.shape[1]


@dataclass
class CropSample:
    window: np.ndarray
    subject_id: str
    label: int | None
    offset: int = field(default=0)


def load_manifest(path) -> list[SubjectRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records, seen = [], set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, label, site, spath = (c.strip() for c in row)
            if label not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate subject_id {sid!r}")
            seen.add(sid)
            if not Path(spath).is_absolute():
                spath = str(path.parent / spath)
            records.append(SubjectRecord(sid, int(label), site, spath))
    return records


def write_manifest(path, records) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.subject_id, r.label, r.site, r.series_path])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_series(path, expected_rois: int | None = None) -> RoiSeries:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"series file not found: {path}")
    rows = []
    width = None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            cells = [c.strip() for c in row]
            if lineno == 1 and not all(_is_number(c) for c in cells):
                continue
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(f"{path}:{lineno}: ragged row with {len(cells)} columns, expected {width}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_number(c))
                raise DataError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
    if not rows:
        raise DataError(f"{path}: no numeric rows")
    values = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite values")
    if expected_rois is not None and values.shape[1] != expected_rois:
        raise DataError(f"{path}: {values.shape[1]} ROI columns, expected {expected_rois}")
    return RoiSeries(values)


def write_series(path, values: np.ndarray) -> None:
    """Write with 17 significant digits so float64 values round-trip exactly."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        for row in np.asarray(values, dtype=np.float64):
            fh.write(",".join(format(v, ".17g") for v in row))
            fh.write("\n")


def load_subjects(records, expected_rois: int | None = None, standardize_series: bool = True) -> list[RoiSeries]:
    out = []
    for rec in records:
        s = load_series(rec.series_path, expected_rois)
        s.subject_id, s.label = rec.subject_id, rec.label
        out.append(standardize(s) if standardize_series else s)
    return out


def standardize(series: RoiSeries) -> RoiSeries:
    """Per-ROI z-score over the whole series using the sample std; constant ROIs become 0."""
    x = series.values
    mu = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    # Two-pass variance; tiny residual spread from rounding counts as constant.
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    z = np.where(const, 0.0, (x - mu) / np.where(const, 1.0, sd))
    return replace(series, values=z, standardized=True)


def _check_length(series: RoiSeries, window: int):
    if series.length < window:
        who = series.subject_id or "<unnamed>"
        raise SubjectTooShortError(f"subject {who}: {series.length} time points < window {window}")


def random_crops(series: RoiSeries, n: int = 10, window: int = 64, rng: Rng | None = None) -> list[CropSample]:
    if n < 0:
        raise ParameterError(f"number of crops must be >= 0, got {n}")
    _check_length(series, window)
    offsets = rng.integers(series.length - window + 1, n)
    return [
        CropSample(series.values[o:o + window], series.subject_id, series.label, int(o)) for o in offsets
    ]


def window_offsets(length: int, window: int, stride: int) -> list[int]:
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    offs = list(range(0, length - window + 1, stride))
    if offs[-1] != length - window:
        offs.append(length - window)
    return offs


def sliding_windows(series: RoiSeries, window: int = 64, stride: int = 32) -> list[np.ndarray]:
    _check_length(series, window)
    return [series.values[o:o + window] for o in window_offsets(series.length, window, stride)]
