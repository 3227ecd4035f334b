"""Dropout and DropBlock masks, placement resolution, and stage gating.

A regularizer is configured once and then consulted at every hook point. It
fires only in train mode and only in the stages its config names, so the same
config object can be threaded through pre-training and fine-tuning.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor

KINDS = ("none", "dropout", "dropblock")
PLACEMENTS = ("last_conv_layer", "group4", "group3_and_4", "last_flatten_layer")
STAGES = ("pretrain", "finetune", "both")
MODES = ("train", "eval")

# mode labels used in the ablation tables
MODE_STAGE = {"W": "pretrain", "D": "finetune", "W&D": "both"}


class RegularizerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "none"
    keep_prob: float = 0.9
    block_size: int = 7
    placement: str = "last_conv_layer"
    stage: str = "pretrain"
    per_channel: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RegularizerConfigError(f"regularizer.kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise RegularizerConfigError(f"regularizer.keep_prob must lie in (0, 1], got {self.keep_prob}")
        if int(self.block_size) != self.block_size or self.block_size < 1 or self.block_size % 2 == 0:
            raise RegularizerConfigError(f"regularizer.block_size must be an odd positive integer, got {self.block_size}")
        if self.stage not in STAGES:
            raise RegularizerConfigError(f"regularizer.stage must be one of {STAGES}, got {self.stage!r}")
        if self.placement not in PLACEMENTS and not _GROUP_RE.fullmatch(self.placement):
            raise RegularizerConfigError(f"regularizer.placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.kind == "dropblock" and self.placement == "last_flatten_layer":
            raise RegularizerConfigError(
                "regularizer.placement last_flatten_layer needs kind=dropout: a flat feature vector cannot host blocks"
            )

    def active_in(self, stage: str) -> bool:
        return self.kind != "none" and self.stage in (stage, "both")

    @property
    def mode_label(self) -> str:
        if self.kind == "none":
            return "none"
        return {"pretrain": "W", "finetune": "D", "both": "W&D"}[self.stage]


@dataclass
class MaskStream:
    """A generator tagged with a stream id; counts the masks drawn from it."""

    generator: np.random.Generator
    stream_id: int = 0
    step: int = 0

    @classmethod
    def derive(cls, *key: int) -> "MaskStream":
        seq = np.random.SeedSequence([int(k) for k in key])
        return cls(np.random.Generator(np.random.PCG64(seq)), stream_id=int(seq.generate_state(1, np.uint64)[0]))


@dataclass
class MaskRecord:
    mask: np.ndarray
    normalization: float
    stream_id: int = 0
    step: int = 0


def _stream(rng) -> MaskStream:
    if isinstance(rng, MaskStream):
        return rng
    if isinstance(rng, np.random.Generator):
        return MaskStream(rng)
    raise TypeError(f"expected a numpy Generator or MaskStream, got {type(rng).__name__}")


def dropout_mask(shape: Sequence[int], keep_prob: float, rng) -> MaskRecord:
    """Inverted-dropout mask: each entry is ``1/keep_prob`` with probability ``keep_prob``, else 0."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropout keep_prob must lie in (0, 1], got {keep_prob}")
    stream = _stream(rng)
    step = stream.step
    stream.step += 1
    if keep_prob == 1.0:
        return MaskRecord(np.ones(tuple(shape)), 1.0, stream.stream_id, step)
    norm = 1.0 / keep_prob
    keep = stream.generator.random(tuple(shape)) < keep_prob
    return MaskRecord(np.where(keep, norm, 0.0), norm, stream.stream_id, step)


def dropblock_gamma(feat: int, block_size: int, keep_prob: float) -> float:
    """Bernoulli rate for block centers so that roughly ``1 - keep_prob`` of a feat×feat map is dropped."""
    return ((1.0 - keep_prob) / block_size**2) * (feat**2 / (feat - block_size + 1) ** 2)


def largest_valid_block(block_size: int, height: int, width: int) -> int:
    """Shrink ``block_size`` to the largest odd value that fits the map."""
    limit = min(height, width)
    if block_size <= limit:
        return block_size
    return limit if limit % 2 else limit - 1


def dropblock_mask(
    height: int,
    width: int,
    block_size: int,
    keep_prob: float,
    rng,
    batch: int | None = None,
    channels: int = 1,
) -> MaskRecord:
    """Sample a DropBlock mask.

    Block centers are drawn from Bernoulli(gamma) on the region where a full
    block fits, then every block_size×block_size square around a center is
    zeroed. Kept entries carry ``total / kept`` so the mean activation is
    preserved. Returns an H×W mask, or B×channels×H×W when ``batch`` is given.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropblock keep_prob must lie in (0, 1], got {keep_prob}")
    if block_size < 1 or block_size % 2 == 0:
        raise ValueError(f"dropblock block_size must be odd and positive, got {block_size}")
    if block_size > min(height, width):
        raise ValueError(
            f"dropblock block_size={block_size} exceeds the {height}x{width} feature map; "
            f"shrink block_size to at most {largest_valid_block(block_size, height, width)}"
        )
    stream = _stream(rng)
    step = stream.step
    stream.step += 1
    lead = () if batch is None else (batch, channels)
    if keep_prob == 1.0:
        return MaskRecord(np.ones(lead + (height, width)), 1.0, stream.stream_id, step)

    gamma = dropblock_gamma(min(height, width), block_size, keep_prob)
    valid = (height - block_size + 1, width - block_size + 1)
    centers = stream.generator.random(lead + valid) < gamma
    dropped = block_cover(centers, block_size)
    total = dropped.size
    kept = total - int(dropped.sum())
    norm = total / kept if kept else 0.0
    return MaskRecord(np.where(dropped, 0.0, norm), norm, stream.stream_id, step)


def block_cover(centers: np.ndarray, block_size: int) -> np.ndarray:
    """Union of block_size squares around ``centers`` given on the valid interior grid.

    ``centers[..., i, j]`` marks a block whose top-left corner sits at (i, j) of
    the full map, i.e. whose center is (i + r, j + r) with r = block_size // 2.
    """
    pad = block_size - 1
    padded = np.pad(centers, [(0, 0)] * (centers.ndim - 2) + [(pad, pad), (pad, pad)])
    win = sliding_window_view(padded, (block_size, block_size), axis=(-2, -1))
    return win.any(axis=(-2, -1))


def apply_regularizer(
    activation: Tensor,
    cfg: RegularizerConfig,
    mode: str,
    stage: str,
    rng,
    counter: Counter | None = None,
) -> Tensor:
    """Multiply ``activation`` by a fresh mask, or return it untouched.

    The input is returned as-is (same object) in eval mode, for kind=none, or
    when ``stage`` is not one of the stages the config targets. ``counter``
    records a hit under the stage name each time a mask is applied.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if stage not in ("pretrain", "finetune"):
        raise ValueError(f"stage must be 'pretrain' or 'finetune', got {stage!r}")
    if mode == "eval" or not cfg.active_in(stage):
        return activation
    if cfg.kind == "dropblock":
        if activation.ndim != 4:
            raise T.ShapeError(f"dropblock needs a B×C×H×W activation, got shape {activation.shape}")
        B, C, H, W = activation.shape
        block = largest_valid_block(cfg.block_size, H, W)
        rec = dropblock_mask(H, W, block, cfg.keep_prob, rng, batch=B, channels=C if cfg.per_channel else 1)
    else:
        if activation.ndim not in (2, 4):
            raise T.ShapeError(f"dropout needs a rank-2 or rank-4 activation, got shape {activation.shape}")
        rec = dropout_mask(activation.shape, cfg.keep_prob, rng)
    if counter is not None:
        counter[stage] += 1
    return T.mul(activation, Tensor(rec.mask))


_GROUP_RE = re.compile(r"group(\d+)(?:_and_(\d+))*")


def resolve_placement(placement: str, model_layout: Mapping[str, Sequence[str]]) -> list[str]:
    """Map a placement name to hook points of a model.

    ``model_layout`` has ``groups`` (ordered group names, each hooked after its
    last conv block) and ``flatten`` (the hook after flattening). Placements of
    the form ``groupA_and_B`` hook the last conv layer of each named group.
    """
    groups = list(model_layout["groups"])
    if placement == "last_flatten_layer":
        return [model_layout["flatten"]]
    if placement == "last_conv_layer":
        if not groups:
            raise ValueError("model layout has no convolution groups")
        return [groups[-1]]
    m = _GROUP_RE.fullmatch(placement)
    if not m:
        raise ValueError(f"unknown placement {placement!r}; expected one of {PLACEMENTS}")
    wanted = [f"group{n}" for n in re.findall(r"\d+", placement)]
    unknown = [g for g in wanted if g not in groups]
    if unknown:
        raise ValueError(f"placement {placement!r} names unknown group(s) {unknown}; model has {groups}")
    return list(dict.fromkeys(wanted))


def resolve_hooks(cfg: RegularizerConfig, model_layout: Mapping[str, Sequence[str]]) -> list[str]:
    """Hook points for a config; none when the regularizer is off."""
    if cfg.kind == "none":
        return []
    return resolve_placement(cfg.placement, model_layout)

