"""Experiment configuration files (TOML, one section per concern)."""

from __future__ import annotations

import difflib
from importlib import resources
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .data import DEFAULT_RATIOS
from .fewshot import EvalSettings, PipelineConfig, StageConfig, fingerprint
from .regularize import RegularizerConfig


class ConfigError(ValueError):
    """The config file is malformed or violates a cross-field constraint."""


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"
    n_classes: int = 20
    images_per_class: int = 50
    seed: int = 0
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    root: str = ""
    manifest: str = ""


@dataclass(frozen=True)
class ModelSection:
    backbone: str = "conv4"
    tau: float = 10.0
    pretrain_head: str = "linear"


@dataclass(frozen=True)
class RegularizerSection:
    kind: str = "dropblock"
    keep_prob: float = 0.9
    block_size: int = 7
    placement: str = "last_conv_layer"
    stage: str = "pretrain"
    per_channel: bool = False


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    holdout: int = 10


@dataclass(frozen=True)
class FinetuneSection:
    steps: int = 100
    batch_size: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "constant"


@dataclass(frozen=True)
class EvalSection:
    n_way: int = 5
    k_shots: tuple[int, ...] = (1, 5)
    q_queries: int = 15
    episodes: int = 100
    pool: str = "novel"


@dataclass(frozen=True)
class AblateSection:
    modes: tuple[str, ...] = ("none", "W", "D", "W&D")
    kinds: tuple[str, ...] = ("dropout", "dropblock")
    placements: tuple[str, ...] = ("last_conv_layer", "group4", "group3_and_4")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    regularizer: RegularizerSection = field(default_factory=RegularizerSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/default"
    jobs: int = 1

    # ------------------------------------------------------------ derived

    def regularizer_config(self) -> RegularizerConfig:
        return RegularizerConfig(**asdict(self.regularizer))

    def pipeline(self) -> PipelineConfig:
        p, f = self.pretrain, self.finetune
        return PipelineConfig(
            pretrain=StageConfig("pretrain", epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, momentum=p.momentum, weight_decay=p.weight_decay, schedule=p.schedule),
            finetune=StageConfig("finetune", steps=f.steps, batch_size=f.batch_size, lr=f.lr, momentum=f.momentum, weight_decay=f.weight_decay, schedule=f.schedule),
            regularizer=self.regularizer_config(),
            eval=EvalSettings(self.eval.n_way, tuple(self.eval.k_shots), self.eval.q_queries, self.eval.episodes, self.eval.pool),
            pretrain_head=self.model.pretrain_head,
            tau=self.model.tau,
            holdout=p.holdout,
        )

    def fingerprint(self) -> str:
        """Hash of everything that affects results; output location and job count excluded."""
        d = to_dict(self)
        d.pop("out")
        d.pop("jobs")
        return fingerprint(d)

    def with_overrides(self, seed=None, out=None, episodes=None, jobs=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seeds=(int(seed),))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if episodes is not None:
            cfg = replace(cfg, eval=replace(cfg.eval, episodes=int(episodes)))
        if jobs is not None:
            cfg = replace(cfg, jobs=int(jobs))
        validate(cfg)
        return cfg


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)}
_SECTION_TYPES = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "regularizer": RegularizerSection,
    "pretrain": PretrainSection,
    "finetune": FinetuneSection,
    "eval": EvalSection,
    "ablate": AblateSection,
}
_TOP_LEVEL = {"seeds": tuple, "out": str, "jobs": int}


def _unknown_key(path: str, key: str, valid) -> ConfigError:
    full = f"{path}.{key}" if path else key
    near = difflib.get_close_matches(key, list(valid), n=1, cutoff=0.5)
    hint = f"; did you mean '{path + '.' if path else ''}{near[0]}'?" if near else ""
    return ConfigError(f"unknown config key '{full}'{hint}")


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default:
            return tuple(_coerce(f"{path}[{i}]", v, default[0]) for i, v in enumerate(value))
        return tuple(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def from_dict(raw: dict) -> ExperimentConfig:
    base = ExperimentConfig()
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table of key = value pairs")
            cls = _SECTION_TYPES[key]
            defaults = getattr(base, key)
            valid = {f.name for f in fields(cls)}
            section = {}
            for k, v in value.items():
                if k not in valid:
                    raise _unknown_key(key, k, valid)
                section[k] = _coerce(f"{key}.{k}", v, getattr(defaults, k))
            kwargs[key] = replace(defaults, **section)
        elif key in _TOP_LEVEL:
            kwargs[key] = _coerce(key, value, getattr(base, key))
        else:
            raise _unknown_key("", key, list(_SECTION_TYPES) + list(_TOP_LEVEL))
    cfg = replace(base, **kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Re-check every cross-field constraint owned by the other modules."""
    ds = cfg.dataset
    if ds.source not in ("synthetic", "directory"):
        raise ConfigError(f"dataset.source must be 'synthetic' or 'directory', got {ds.source!r}")
    if ds.source == "synthetic" and ds.n_classes < 5:
        raise ConfigError(f"dataset.n_classes must be >= 5, got {ds.n_classes}")
    if ds.source == "directory" and not (ds.root and ds.manifest):
        raise ConfigError("dataset.root and dataset.manifest are required when dataset.source = 'directory'")
    if len(ds.ratios) != 3 or any(r < 0 for r in ds.ratios) or sum(ds.ratios) <= 0:
        raise ConfigError(f"dataset.ratios must be three non-negative numbers with a positive sum, got {list(ds.ratios)}")
    if cfg.model.backbone != "conv4":
        raise ConfigError(f"model.backbone must be 'conv4', got {cfg.model.backbone!r}")
    if cfg.model.pretrain_head not in ("linear", "cosine"):
        raise ConfigError(f"model.pretrain_head must be 'linear' or 'cosine', got {cfg.model.pretrain_head!r}")
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    if cfg.jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {cfg.jobs}")
    if cfg.pretrain.holdout < 0 or (ds.source == "synthetic" and cfg.pretrain.holdout >= ds.images_per_class):
        raise ConfigError(f"pretrain.holdout must be in [0, images_per_class), got {cfg.pretrain.holdout}")
    for m in cfg.ablate.modes:
        if m not in ("none", "W", "D", "W&D"):
            raise ConfigError(f"ablate.modes: unknown mode {m!r}")
    try:
        cfg.pipeline()
        for kind in cfg.ablate.kinds:
            for placement in cfg.ablate.placements:
                if not (kind == "dropblock" and placement == "last_flatten_layer"):
                    replace(cfg.regularizer_config(), kind=kind, placement=placement)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    pool = set(cfg.eval.pool.split("+"))
    if not pool <= {"base", "val", "novel"}:
        raise ConfigError(f"eval.pool must join base/val/novel with '+', got {cfg.eval.pool!r}")


def to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)

    def lists(x):
        if isinstance(x, dict):
            return {k: lists(v) for k, v in x.items()}
        if isinstance(x, (tuple, list)):
            return [lists(v) for v in x]
        return x

    return lists(d)


def dumps(cfg: ExperimentConfig) -> str:
    d = to_dict(cfg)
    top = {k: d.pop(k) for k in list(d) if k in _TOP_LEVEL}
    return tomli_w.dumps({**top, **d})


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    return from_dict(raw)


def bundled_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("wdrop").joinpath("configs").iterdir() if p.name.endswith(".toml"))


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a TOML file, or a bundled config by bare name (e.g. ``benchmark``)."""
    p = Path(path)
    if p.is_file():
        return loads(p.read_text())
    if str(path) in bundled_configs():
        return loads(resources.files("wdrop").joinpath(f"configs/{path}.toml").read_text())
    raise ConfigError(f"config file not found: {path} (bundled: {', '.join(bundled_configs())})")


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
