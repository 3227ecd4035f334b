"""Two-stage few-shot pipeline: pre-train on base classes, fine-tune a cosine head per episode.

Randomness is split into independent streams derived from the run seed
(weight init, batch order, masks, and one stream per evaluation episode), so
turning a regularizer on or off never shifts the data order, and episodes give
the same result whatever order they run in.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import FEATURE_DIM, Checkpoint, Model, cosine_logits
from .regularize import MODE_STAGE, MaskStream, RegularizerConfig, apply_regularizer, resolve_hooks
from .tensor import TASK_SPECIFIC, ParamSet, SgdState, Tensor

log = logging.getLogger(__name__)

Dataset = Mapping[int, np.ndarray]

# stream tags for SeedSequence-derived generators
_INIT, _SHUFFLE, _MASK, _EPISODE = 1, 2, 3, 4

CI_METHOD = "1.96 * sample_std(ddof=1) / sqrt(episodes)"


class FewShotError(ValueError):
    pass


def _generator(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serializable description."""
    blob = json.dumps(obj, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"cannot fingerprint {type(o).__name__}")


# ------------------------------------------------------------------- configs


SCHEDULES = ("constant", "cosine")


def lr_at(stage: "StageConfig", step: int, total: int) -> float:
    """Learning rate for ``step`` of ``total``; cosine decays from lr toward zero."""
    if stage.schedule == "cosine" and total > 1:
        return 0.5 * stage.lr * (1.0 + math.cos(math.pi * step / total))
    return stage.lr


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int = 30
    steps: int = 100
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    schedule: str = "constant"

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise FewShotError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")
        if self.epochs < 1 or self.steps < 1:
            raise FewShotError(f"{self.stage}: epochs and steps must be positive")
        if self.batch_size < 0:
            raise FewShotError(f"{self.stage}: batch_size must be >= 0 (0 means whole set)")
        if self.schedule not in SCHEDULES:
            raise FewShotError(f"{self.stage}: schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        SgdState(self.lr, self.momentum, self.weight_decay)


def default_pretrain() -> StageConfig:
    return StageConfig("pretrain", epochs=30, batch_size=16, lr=0.01, momentum=0.9, weight_decay=5e-4, schedule="cosine")


def default_finetune() -> StageConfig:
    return StageConfig("finetune", steps=100, batch_size=0, lr=0.01, momentum=0.9, weight_decay=0.0)


@dataclass(frozen=True)
class EvalSettings:
    n_way: int = 5
    k_shots: tuple[int, ...] = (1, 5)
    q_queries: int = 15
    episodes: int = 100
    pool: str = "novel"

    def __post_init__(self):
        if self.episodes < 2:
            raise FewShotError(f"episodes must be >= 2 for a confidence interval, got {self.episodes}")
        if self.n_way < 2 or self.q_queries < 1 or not self.k_shots or min(self.k_shots) < 1:
            raise FewShotError("need n_way >= 2, q_queries >= 1 and positive k_shots")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one pretrain+evaluate run needs besides the data and the seed."""

    pretrain: StageConfig = field(default_factory=default_pretrain)
    finetune: StageConfig = field(default_factory=default_finetune)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    pretrain_head: str = "linear"
    tau: float = 10.0
    holdout: int = 10

    def pretrain_key(self) -> dict:
        """The part of the config that determines the pre-trained weights."""
        reg = self.regularizer if self.regularizer.active_in("pretrain") else None
        return {
            "pretrain": replace(self.pretrain, regularizer=RegularizerConfig()),
            "regularizer": reg,
            "head": self.pretrain_head,
            "tau": self.tau,
            "holdout": self.holdout,
        }


# ------------------------------------------------------------------ episodes


@dataclass
class Episode:
    """An N-way K-shot task. Items are (global class id, image index) pairs."""

    n_way: int
    k_shot: int
    q_queries: int
    classes: list[int]
    support: np.ndarray  # (n_way*k_shot, 2)
    support_labels: np.ndarray
    query: np.ndarray  # (n_way*q_queries, 2)
    query_labels: np.ndarray

    @property
    def class_map(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.classes)}

    def images(self, dataset: Dataset, which: str = "support") -> np.ndarray:
        items = self.support if which == "support" else self.query
        return np.stack([dataset[c][i] for c, i in items])


def sample_episode(dataset: Dataset, n_way: int, k_shot: int, q_queries: int, rng: np.random.Generator) -> Episode:
    """Draw ``n_way`` classes, then ``k_shot + q_queries`` distinct images per class."""
    classes = sorted(dataset)
    if len(classes) < n_way:
        raise FewShotError(f"{n_way}-way episodes need {n_way} classes, dataset has {len(classes)}")
    need = k_shot + q_queries
    short = {c: len(dataset[c]) for c in classes if len(dataset[c]) < need}
    if short:
        raise FewShotError(f"every class needs {need} images ({k_shot} shot + {q_queries} query); too few in {short}")
    chosen = [classes[i] for i in rng.choice(len(classes), n_way, replace=False)]
    sup, qry = [], []
    for c in chosen:
        picks = rng.choice(len(dataset[c]), need, replace=False)
        sup += [(c, int(i)) for i in picks[:k_shot]]
        qry += [(c, int(i)) for i in picks[k_shot:]]
    return Episode(
        n_way,
        k_shot,
        q_queries,
        chosen,
        np.array(sup, dtype=np.int64),
        np.repeat(np.arange(n_way), k_shot),
        np.array(qry, dtype=np.int64),
        np.repeat(np.arange(n_way), q_queries),
    )


# ------------------------------------------------------------------ reports


def ci95(accuracies: Sequence[float]) -> float:
    n = len(accuracies)
    if n < 2:
        raise FewShotError(f"a confidence interval needs at least 2 episodes, got {n}")
    return 1.96 * float(np.std(accuracies, ddof=1)) / math.sqrt(n)


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    ci: float
    episodes: int
    seed: int
    fingerprint: str
    n_way: int = 5
    k_shot: int = 1
    ci_method: str = CI_METHOD

    @classmethod
    def from_accuracies(cls, accuracies: Sequence[float], seed: int, fp: str, n_way: int = 5, k_shot: int = 1):
        accs = [float(a) for a in accuracies]
        return cls(accs, math.fsum(accs) / len(accs), ci95(accs), len(accs), seed, fp, n_way, k_shot)


# ------------------------------------------------------------------ pretrain


def pretrain(
    base_dataset: Dataset,
    cfg: PipelineConfig,
    seed: int,
    counter: Counter | None = None,
    fp: str = "",
) -> Checkpoint:
    """Train backbone + base head on ``base_dataset`` with the configured regularizer."""
    stage = cfg.pretrain
    classes = sorted(base_dataset)
    if len(classes) < 2:
        raise FewShotError(f"pre-training needs at least 2 base classes, got {len(classes)}")
    if any(len(base_dataset[c]) == 0 for c in classes):
        raise FewShotError("pre-training dataset has an empty class")
    X = np.concatenate([base_dataset[c] for c in classes])
    y = np.concatenate([np.full(len(base_dataset[c]), i) for i, c in enumerate(classes)])

    model = Model.conv4(len(classes), _generator(seed, _INIT), head=cfg.pretrain_head, tau=cfg.tau)
    reg = cfg.regularizer
    hooks = resolve_hooks(reg, model.layout) if reg.active_in("pretrain") else []
    order_rng = _generator(seed, _SHUFFLE)
    masks = MaskStream.derive(seed, _MASK)
    opt = SgdState(stage.lr, stage.momentum, stage.weight_decay)
    batch = stage.batch_size or len(X)
    total = stage.epochs * -(-len(X) // batch)
    history = []
    step = 0
    for epoch in range(stage.epochs):
        perm = order_rng.permutation(len(X))
        losses, correct = [], 0
        for start in range(0, len(X), batch):
            idx = perm[start : start + batch]
            feats = model.backbone_forward(X[idx], hooks, reg, "train", "pretrain", masks, counter)
            logits = model.head_logits(feats)
            loss = T.softmax_cross_entropy(logits, y[idx])
            model.params.zero_grad()
            T.backward(loss)
            opt.lr = lr_at(stage, step, total)
            T.sgd_step(model.params, opt)
            losses.append(loss.item() * len(idx))
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            step += 1
        row = {"epoch": epoch + 1, "loss": math.fsum(losses) / len(X), "train_acc": correct / len(X)}
        history.append(row)
        log.info("pretrain epoch %d loss %.4f acc %.3f", row["epoch"], row["loss"], row["train_acc"])
    model.params.zero_grad()
    rng_state = {"shuffle": order_rng.bit_generator.state, "classes": classes}
    return Checkpoint(model, fp or fingerprint(cfg.pretrain_key()), rng_state, step, history)


def base_classes_of(ckpt: Checkpoint) -> list[int]:
    return list(ckpt.rng_state.get("classes", []))


# ------------------------------------------------------------------ finetune


def train_cosine_head(
    support_features: np.ndarray,
    support_labels: np.ndarray,
    n_way: int,
    cfg: PipelineConfig,
    init_rng: np.random.Generator,
    masks: MaskStream,
    counter: Counter | None = None,
) -> np.ndarray:
    """Fit a fresh cosine head on frozen features; returns its n_way×1600 weight."""
    stage = cfg.finetune
    params = ParamSet()
    w = params.add("head.weight", Tensor(init_rng.standard_normal((n_way, FEATURE_DIM)) * math.sqrt(2.0 / FEATURE_DIM)), TASK_SPECIFIC)
    opt = SgdState(stage.lr, stage.momentum, stage.weight_decay)
    n = len(support_features)
    batch = stage.batch_size or n
    order = init_rng if batch < n else None
    for step in range(stage.steps):
        idx = order.choice(n, batch, replace=False) if order is not None else slice(None)
        feats = Tensor(support_features[idx])
        feats = apply_regularizer(feats, _finetune_reg(cfg.regularizer), "train", "finetune", masks, counter)
        loss = T.softmax_cross_entropy(cosine_logits(feats, w, cfg.tau), support_labels[idx])
        params.zero_grad()
        T.backward(loss)
        opt.lr = lr_at(stage, step, stage.steps)
        T.sgd_step(params, opt, TASK_SPECIFIC)
    return w.data


def _finetune_reg(reg: RegularizerConfig) -> RegularizerConfig:
    # fine-tuning regularizes the flat head input, so only plain dropout applies there
    if reg.kind == "dropblock":
        return replace(reg, kind="dropout", placement="last_flatten_layer")
    return reg


def finetune(
    ckpt: Checkpoint,
    support_images: np.ndarray,
    support_labels: np.ndarray,
    cfg: PipelineConfig,
    seed: int,
    counter: Counter | None = None,
) -> Model:
    """Frozen backbone from ``ckpt`` plus a new cosine head trained on the support set."""
    labels = np.asarray(support_labels)
    n_way = len(np.unique(labels))
    if len(labels) == 0:
        raise FewShotError("fine-tuning needs a non-empty support set")
    if n_way < 2:
        raise FewShotError(f"fine-tuning needs at least 2 support classes, got {n_way}")
    if set(np.unique(labels)) != set(range(n_way)):
        raise FewShotError(f"support labels must be 0..{n_way - 1}, got {sorted(set(labels.tolist()))}")
    feats = ckpt.model.extract_features(support_images)
    weight = train_cosine_head(
        feats, labels, n_way, cfg, _generator(seed, _EPISODE, 0), MaskStream.derive(seed, _EPISODE, 1), counter
    )
    adapted = ckpt.model.copy()
    adapted.tau = cfg.tau
    adapted.new_head("cosine", n_way, np.random.default_rng(0))
    adapted.params["head.weight"].data = weight
    return adapted


# ------------------------------------------------------------------ evaluate


class FeatureCache:
    """Eval-mode backbone features per class, computed once per checkpoint."""

    def __init__(self, model: Model, dataset: Dataset):
        self.features = {c: model.extract_features(imgs) for c, imgs in dataset.items()}

    def take(self, items: np.ndarray) -> np.ndarray:
        return np.stack([self.features[c][i] for c, i in items])


def _jobs(requested: int) -> int:
    if os.environ.get("WDROP_DETERMINISTIC") == "1":
        return 1
    return max(1, int(requested))


def run_episode(
    index: int,
    cache: FeatureCache,
    dataset: Dataset,
    n_way: int,
    k_shot: int,
    q_queries: int,
    cfg: PipelineConfig,
    seed: int,
    counter: Counter | None = None,
) -> float:
    rng = _generator(seed, _EPISODE, index)
    ep = sample_episode(dataset, n_way, k_shot, q_queries, rng)
    weight = train_cosine_head(
        cache.take(ep.support), ep.support_labels, n_way, cfg, rng, MaskStream.derive(seed, _EPISODE, index, _MASK), counter
    )
    logits = cosine_logits(Tensor(cache.take(ep.query)), Tensor(weight), cfg.tau).data
    # argmax returns the lowest index among equal logits
    pred = logits.argmax(axis=1)
    return float((pred == ep.query_labels).mean())


def evaluate(
    ckpt: Checkpoint,
    novel_dataset: Dataset,
    n_way: int,
    k_shot: int,
    episodes: int,
    seed: int,
    cfg: PipelineConfig | None = None,
    q_queries: int | None = None,
    jobs: int = 1,
    cache: FeatureCache | None = None,
    counter: Counter | None = None,
    fp: str = "",
) -> EvalReport:
    """Mean episode accuracy with a 95% interval over ``episodes`` random tasks."""
    if episodes < 2:
        raise FewShotError(f"episodes must be >= 2 for a confidence interval, got {episodes}")
    cfg = cfg or PipelineConfig()
    q = cfg.eval.q_queries if q_queries is None else q_queries
    cache = cache or FeatureCache(ckpt.model, novel_dataset)
    counters = [Counter() for _ in range(episodes)]

    def one(i):
        return run_episode(i, cache, novel_dataset, n_way, k_shot, q, cfg, seed, counters[i])

    workers = _jobs(jobs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            accs = list(pool.map(one, range(episodes)))
    else:
        accs = [one(i) for i in range(episodes)]
    if counter is not None:
        for c in counters:
            counter.update(c)
    return EvalReport.from_accuracies(accs, seed, fp or ckpt.fingerprint, n_way, k_shot)


def base_accuracy(ckpt: Checkpoint, heldout: Dataset) -> float:
    """Accuracy of the pre-training head on held-out images of the base classes."""
    classes = base_classes_of(ckpt) or sorted(heldout)
    if not heldout or sum(len(v) for v in heldout.values()) == 0:
        raise FewShotError("held-out base split is empty")
    missing = set(heldout) - set(classes)
    if missing:
        raise FewShotError(f"held-out classes {sorted(missing)} were not pre-training classes")
    correct = total = 0
    for c, imgs in heldout.items():
        if len(imgs) == 0:
            continue
        pred = ckpt.model.predict(imgs)
        correct += int((pred == classes.index(c)).sum())
        total += len(imgs)
    return correct / total


@dataclass
class BaseNovelReport:
    base_accuracy: float
    novel: EvalReport


def base_novel_report(
    ckpt: Checkpoint,
    base_heldout: Dataset,
    novel_dataset: Dataset,
    cfg: PipelineConfig,
    seed: int,
    k_shot: int | None = None,
    jobs: int = 1,
) -> BaseNovelReport:
    base = base_accuracy(ckpt, base_heldout)
    k = cfg.eval.k_shots[0] if k_shot is None else k_shot
    novel = evaluate(ckpt, novel_dataset, cfg.eval.n_way, k, cfg.eval.episodes, seed, cfg, jobs=jobs)
    return BaseNovelReport(base, novel)


def holdout_split(dataset: Dataset, holdout: int) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Reserve the last ``holdout`` images of every class; returns (train, held-out)."""
    train, held = {}, {}
    for c, imgs in dataset.items():
        if holdout >= len(imgs):
            raise FewShotError(f"class {c}: cannot hold out {holdout} of {len(imgs)} images")
        train[c] = imgs[: len(imgs) - holdout]
        held[c] = imgs[len(imgs) - holdout :]
    return train, held


# ------------------------------------------------------------------ pipelines


@dataclass
class CellResult:
    """One grid cell (one regularizer setting) for one seed."""

    label: str
    mode: str
    kind: str
    placement: str
    seed: int
    fingerprint: str
    reports: dict[int, EvalReport]
    base_accuracy: float | None
    fires: dict[str, int]
    wall_time: float


def run_pipeline(
    split,
    cfg: PipelineConfig,
    seed: int,
    label: str = "run",
    fp_prefix: str = "",
    jobs: int = 1,
    ckpt_cache: dict | None = None,
) -> CellResult:
    """Pre-train on the base split, then evaluate every configured k-shot on the eval pool."""
    t0 = time.perf_counter()
    counter: Counter = Counter()
    base_train, base_held = holdout_split(split.subset("base"), cfg.holdout) if cfg.holdout else (split.subset("base"), {})
    key = (fingerprint(cfg.pretrain_key()), seed)
    if ckpt_cache is not None and key in ckpt_cache:
        ckpt, pre_fires = ckpt_cache[key]
        counter.update(pre_fires)
    else:
        pre_counter: Counter = Counter()
        ckpt = pretrain(base_train, cfg, seed, pre_counter)
        counter.update(pre_counter)
        if ckpt_cache is not None:
            ckpt_cache[key] = (ckpt, pre_counter)
    pool = split.subset(cfg.eval.pool)
    cache = FeatureCache(ckpt.model, pool)
    fp = f"{fp_prefix}/{label}" if fp_prefix else fingerprint(cfg)
    reports = {
        k: evaluate(ckpt, pool, cfg.eval.n_way, k, cfg.eval.episodes, seed, cfg, jobs=jobs, cache=cache, counter=counter, fp=fp)
        for k in cfg.eval.k_shots
    }
    base = base_accuracy(ckpt, base_held) if base_held else None
    reg = cfg.regularizer
    return CellResult(
        label,
        reg.mode_label,
        reg.kind,
        reg.placement if reg.kind != "none" else "-",
        seed,
        fp,
        reports,
        base,
        dict(counter),
        time.perf_counter() - t0,
    )


def mode_config(base_cfg: PipelineConfig, mode: str) -> PipelineConfig:
    reg = base_cfg.regularizer
    if mode == "none":
        return replace(base_cfg, regularizer=replace(reg, kind="none"))
    if mode not in MODE_STAGE:
        raise FewShotError(f"unknown mode {mode!r}; expected none, W, D or W&D")
    if reg.kind == "none":
        raise FewShotError(f"mode {mode} needs regularizer.kind dropout or dropblock, got none")
    return replace(base_cfg, regularizer=replace(reg, stage=MODE_STAGE[mode]))


def run_mode_ablation(
    split,
    base_cfg: PipelineConfig,
    seed: int,
    modes: Sequence[str] = ("none", "W", "D", "W&D"),
    jobs: int = 1,
    ckpt_cache: dict | None = None,
) -> list[CellResult]:
    """One pipeline per regularizer mode, all on the same data and seed."""
    if not modes:
        raise FewShotError("mode ablation needs at least one mode")
    prefix = fingerprint(base_cfg)
    cache = {} if ckpt_cache is None else ckpt_cache
    return [run_pipeline(split, mode_config(base_cfg, m), seed, m, prefix, jobs, cache) for m in modes]


def type_placement_cells(
    kinds: Sequence[str], placements: Sequence[str]
) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """Legal (kind, placement) pairs and the skipped illegal ones."""
    cells, skipped = [], []
    for kind in kinds:
        for placement in placements:
            if kind == "dropblock" and placement == "last_flatten_layer":
                skipped.append((kind, placement))
                log.warning("skipping dropblock on last_flatten_layer: a flat feature cannot host blocks")
            else:
                cells.append((kind, placement))
    return cells, skipped


def run_type_placement_ablation(
    split,
    base_cfg: PipelineConfig,
    seed: int,
    kinds: Sequence[str] = ("dropout", "dropblock"),
    placements: Sequence[str] = ("last_conv_layer", "group4", "group3_and_4"),
    jobs: int = 1,
    ckpt_cache: dict | None = None,
) -> list[CellResult]:
    """W-mode pipelines over the kind × placement grid."""
    cells, _ = type_placement_cells(kinds, placements)
    prefix = fingerprint(base_cfg)
    cache = {} if ckpt_cache is None else ckpt_cache
    out = []
    for kind, placement in cells:
        reg = replace(base_cfg.regularizer, kind=kind, placement=placement, stage="pretrain")
        cfg = replace(base_cfg, regularizer=reg)
        out.append(run_pipeline(split, cfg, seed, f"{kind}@{placement}", prefix, jobs, cache))
    return out


# ------------------------------------------------------------------ seeds


class SeedRunError(RuntimeError):
    def __init__(self, seed: int, exc: Exception):
        super().__init__(f"seed {seed}: {exc}")
        self.seed = seed


@dataclass
class AggregateReport:
    mean: float
    ci: float
    std_across_seeds: float
    seeds: list[int]
    per_seed: dict[int, EvalReport]


def _fmean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def aggregate(per_seed: Mapping[int, EvalReport]) -> AggregateReport:
    """Unweighted mean over seeds; exact summation makes it independent of seed order."""
    if not per_seed:
        raise FewShotError("aggregation needs at least one seed")
    seeds = sorted(per_seed)
    means = [per_seed[s].mean for s in seeds]
    mu = _fmean(means)
    std = math.sqrt(math.fsum((m - mu) ** 2 for m in means) / (len(means) - 1)) if len(means) > 1 else 0.0
    return AggregateReport(mu, _fmean([per_seed[s].ci for s in seeds]), std, seeds, {s: per_seed[s] for s in seeds})


def multi_seed(run_fn: Callable[[int], EvalReport], seeds: Sequence[int]) -> AggregateReport:
    if not seeds:
        raise FewShotError("multi_seed needs at least one seed")
    results = {}
    for s in seeds:
        try:
            results[s] = run_fn(s)
        except Exception as exc:
            raise SeedRunError(s, exc) from exc
    return aggregate(results)
