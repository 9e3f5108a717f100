"""Experiment configuration files.

An INI file whose sections map onto the package's config dataclasses::

    [experiment]
    seed = 0
    manifest = data/manifest.csv
    strategies = none, mask_roi
    fractions = 0.2, 1.0

    [model]
    num_rois = 16

Every section is optional; ``[scratch_finetune]`` overrides ``[finetune]``
for the scratch baseline only. Relative paths resolve against the
directory holding the config file. Values are coerced by the type of the
field's default, and unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, ParameterError
from .experiment import FRACTIONS
from .model import ModelConfig
from .synth import SynthConfig
from .training import FinetuneConfig, PretrainConfig

_BOOL = {"1": True, "yes": True, "true": True, "on": True, "0": False, "no": False, "false": False, "off": False}


@dataclass
class ExperimentSection:
    seed: int | None = None
    manifest: str = ""
    test_manifest: str = ""
    checkpoint: str = ""
    out: str = "runs"
    strategies: tuple = ("none", "mask_roi", "mask_time", "mask_random")
    fractions: tuple = FRACTIONS
    eval_strategies: tuple = ("mask_roi", "mask_time", "mask_random")
    k: int = 5
    jobs: int = 1


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    scratch_finetune: FinetuneConfig | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def seed(self) -> int:
        if self.experiment.seed is None:
            raise ConfigError("a seed is required: set [experiment] seed or pass --seed")
        return int(self.experiment.seed)


_SECTIONS = ("experiment", "model", "pretrain", "finetune", "scratch_finetune", "synth")
_PATH_KEYS = ("manifest", "test_manifest", "checkpoint", "out")


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if default and all(isinstance(d, float) for d in default):
                return tuple(float(p) for p in items)
            return tuple(items)
        if isinstance(default, int) or (default is None and key == "seed"):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _build(cls, section: str, values: dict, base=None):
    obj = base if base is not None else cls()
    known = {f.name: getattr(obj, f.name) for f in fields(cls)}
    kw = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}; expected one of {sorted(known)}")
        kw[key] = _coerce(section, key, raw, known[key])
    try:
        return replace(obj, **kw)
    except (ParameterError, TypeError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    extra = set(cp.sections()) - set(_SECTIONS)
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}; expected {list(_SECTIONS)}")
    get = lambda s: dict(cp.items(s)) if cp.has_section(s) else {}  # noqa: E731
    exp = _build(ExperimentSection, "experiment", get("experiment"))
    base_dir = Path(base_dir)
    for key in _PATH_KEYS:
        p = getattr(exp, key)
        if p and not Path(p).is_absolute():
            exp = replace(exp, **{key: str(base_dir / p)})
    fin = _build(FinetuneConfig, "finetune", get("finetune"))
    scratch = _build(FinetuneConfig, "scratch_finetune", get("scratch_finetune"), fin) \
        if cp.has_section("scratch_finetune") else None
    return ExperimentConfig(
        experiment=exp,
        model=_build(ModelConfig, "model", get("model")),
        pretrain=_build(PretrainConfig, "pretrain", get("pretrain")),
        finetune=fin,
        scratch_finetune=scratch,
        synth=_build(SynthConfig, "synth", get("synth")),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, path.parent)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def to_ini(cfg: ExperimentConfig) -> str:
    """Fully resolved config; parsing it back reproduces ``cfg``."""
    lines = []
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        if obj is None:
            continue
        lines.append(f"[{name}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "config.resolved.ini"
    p.write_text(to_ini(cfg), encoding="utf-8")
    return p


def override(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Apply command-line overrides to the experiment section; ``None`` means unset."""
    kw = {k: v for k, v in kw.items() if v is not None}
    stride = kw.pop("stride", None)
    exp = replace(cfg.experiment, **kw)
    cfg = dataclasses.replace(cfg, experiment=exp)
    if stride is not None:
        try:
            cfg.finetune = replace(cfg.finetune, stride=stride)
            if cfg.scratch_finetune is not None:
                cfg.scratch_finetune = replace(cfg.scratch_finetune, stride=stride)
        except ParameterError as e:
            raise ConfigError(str(e)) from e
    return cfg
