"""Conv-4 backbone, linear and cosine heads, and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .regularize import RegularizerConfig, apply_regularizer
from .tensor import TASK_SPECIFIC, TRANSFERABLE, ParamSet, Tensor

IMAGE_SIZE = 84
CHANNELS = 64
N_GROUPS = 4
FEATURE_DIM = 1600  # 64 channels at 5×5 after four 2×2 poolings of 84×84
SPATIAL_CHAIN = (84, 42, 21, 10, 5)
LAYOUT = {"groups": tuple(f"group{i}" for i in range(1, N_GROUPS + 1)), "flatten": "flatten"}

HEAD_KINDS = ("linear", "cosine")


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def cosine_logits(features: Tensor, weight: Tensor, tau: float, eps: float = 1e-8) -> Tensor:
    """``tau * cos(feature, weight_c)`` for every class c; norms are floored at ``eps``."""
    if features.ndim != 2 or weight.ndim != 2 or features.shape[1] != weight.shape[1]:
        raise T.ShapeError(f"cosine_logits: features {features.shape} do not match head weight {weight.shape}")
    return T.scale(T.linear(T.l2_normalize(features, eps), T.l2_normalize(weight, eps)), tau)


class Model:
    """Backbone (transferable w) plus one classification head (task-specific θ)."""

    def __init__(self, tau: float = 10.0):
        if not tau > 0:
            raise ValueError(f"cosine temperature must be positive, got {tau}")
        self.params = ParamSet()
        self.buffers: dict[str, np.ndarray] = {}
        self.tau = float(tau)
        self.head_kind = "linear"
        self.layout = LAYOUT

    @classmethod
    def conv4(cls, n_classes: int, rng: np.random.Generator, head: str = "linear", tau: float = 10.0) -> "Model":
        model = cls(tau)
        in_ch = 3
        for g in model.layout["groups"]:
            model.params.add(
                f"backbone.{g}.conv.weight",
                Tensor(_he_normal(rng, (CHANNELS, in_ch, 3, 3), in_ch * 9)),
                TRANSFERABLE,
            )
            model.params.add(f"backbone.{g}.bn.weight", Tensor(np.ones(CHANNELS)), TRANSFERABLE)
            model.params.add(f"backbone.{g}.bn.bias", Tensor(np.zeros(CHANNELS)), TRANSFERABLE)
            model.buffers[f"backbone.{g}.bn.running_mean"] = np.zeros(CHANNELS)
            model.buffers[f"backbone.{g}.bn.running_var"] = np.ones(CHANNELS)
            in_ch = CHANNELS
        model.new_head(head, n_classes, rng)
        return model

    # ---------------------------------------------------------------- heads

    def new_head(self, kind: str, n_classes: int, rng: np.random.Generator) -> None:
        """Discard the current head and attach a freshly initialized one."""
        if kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {kind!r}")
        if n_classes < 1:
            raise ValueError(f"head needs at least one class, got {n_classes}")
        self.params.remove_prefix("head.")
        self.params.add("head.weight", Tensor(_he_normal(rng, (n_classes, FEATURE_DIM), FEATURE_DIM)), TASK_SPECIFIC)
        if kind == "linear":
            self.params.add("head.bias", Tensor(np.zeros(n_classes)), TASK_SPECIFIC)
        self.head_kind = kind

    @property
    def n_classes(self) -> int:
        return self.params["head.weight"].shape[0]

    def head_logits(self, features: Tensor) -> Tensor:
        w = self.params["head.weight"]
        if self.head_kind == "cosine":
            return cosine_logits(features, w, self.tau)
        return T.linear(features, w, self.params["head.bias"])

    # ------------------------------------------------------------- backbone

    def backbone_forward(
        self,
        images: Tensor | np.ndarray,
        hooks: list[str] | tuple[str, ...] = (),
        cfg: RegularizerConfig | None = None,
        mode: str = "eval",
        stage: str = "pretrain",
        rng=None,
        counter: Counter | None = None,
    ) -> Tensor:
        """Images B×3×84×84 to features B×1600, regularizing at ``hooks``.

        In train mode batchnorm uses batch statistics and updates its running
        buffers; in eval mode the pass is deterministic.
        """
        feats, _ = self._forward(images, hooks, cfg, mode, stage, rng, counter, self.buffers, trace=False)
        return feats

    def backbone_forward_traced(self, images: Tensor, training: bool, buffers: dict[str, np.ndarray]):
        """Regularizer-free forward that also returns relu/pool kink signatures (for gradient checks)."""
        mode = "train" if training else "eval"
        return self._forward(images, (), None, mode, "pretrain", None, None, buffers, trace=True)

    def _forward(self, images, hooks, cfg, mode, stage, rng, counter, buffers, trace):
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise T.ShapeError(
                f"backbone expects B×3×{IMAGE_SIZE}×{IMAGE_SIZE} images, got {x.shape}; the Conv-4 geometry is fixed"
            )
        hooks = set(hooks)
        if hooks and cfg is None:
            raise ValueError("hooks given without a regularizer config")
        unknown = hooks - set(self.layout["groups"]) - {self.layout["flatten"]}
        if unknown:
            raise ValueError(f"unknown hook point(s) {sorted(unknown)}")
        training = mode == "train"
        kinks = []
        for g, size in zip(self.layout["groups"], SPATIAL_CHAIN[1:]):
            p = f"backbone.{g}"
            x = T.conv2d(x, self.params[f"{p}.conv.weight"], stride=1, padding=1)
            x = T.batchnorm2d(
                x,
                self.params[f"{p}.bn.weight"],
                self.params[f"{p}.bn.bias"],
                buffers[f"{p}.bn.running_mean"],
                buffers[f"{p}.bn.running_var"],
                training=training,
            )
            if trace:
                kinks.append(x.data.ravel().copy())
            x = T.relu(x)
            if g in hooks:
                x = apply_regularizer(x, cfg, mode, stage, rng, counter)
            if trace:
                kinks.append(T.pool_winner_pattern(x.data))
            x = T.maxpool2d(x, 2)
            assert x.shape[2] == size, (g, x.shape)
        x = T.flatten(x)
        if self.layout["flatten"] in hooks:
            x = apply_regularizer(x, cfg, mode, stage, rng, counter)
        return x, (np.concatenate(kinks) if trace else None)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode class indices; ties resolve to the lowest index."""
        out = []
        for i in range(0, len(images), batch_size):
            logits = self.head_logits(self.backbone_forward(images[i : i + batch_size]))
            out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def extract_features(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode backbone features as a plain array."""
        chunks = [self.backbone_forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, FEATURE_DIM))

    # ------------------------------------------------------------ utilities

    def tensor_table(self) -> dict[str, tuple[str, np.ndarray]]:
        """Every stored array by name with its tag: transferable, task_specific, or buffer."""
        table = {name: (self.params.tag(name), t.data) for name, t in self.params.items()}
        for name, arr in self.buffers.items():
            table[name] = ("buffer", arr)
        return dict(sorted(table.items()))

    def checksum(self, partition: str = TRANSFERABLE) -> str:
        """SHA-256 over the raw bytes of all tensors in a partition (buffers count as transferable)."""
        h = hashlib.sha256()
        for name, (tag, arr) in self.tensor_table().items():
            if tag == partition or (partition == TRANSFERABLE and tag == "buffer"):
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        other = Model(self.tau)
        other.head_kind = self.head_kind
        for name, t in self.params.items():
            other.params.add(name, Tensor(t.data.copy()), self.params.tag(name))
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other


# ------------------------------------------------------------------ checkpoint

MAGIC = b"WDRP"
FORMAT_VERSION = 1
_TAG_CODES = {TRANSFERABLE: 0, TASK_SPECIFIC: 1, "buffer": 2}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}


class CheckpointError(ValueError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeTableError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: Model
    fingerprint: str = ""
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    log: list[dict] = field(default_factory=list)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    fp = ckpt.fingerprint.encode()
    out += struct.pack("<I", len(fp)) + fp
    table = ckpt.model.tensor_table()
    out += struct.pack("<I", len(table))
    for name, (tag, arr) in table.items():
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BI", _TAG_CODES[tag], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    # trailer: training step, then JSON with rng snapshot and head settings
    meta = json.dumps(
        {"rng_state": ckpt.rng_state, "head_kind": ckpt.model.head_kind, "tau": ckpt.model.tau, "log": ckpt.log},
        sort_keys=True,
    ).encode()
    out += struct.pack("<QI", ckpt.step, len(meta)) + meta
    return bytes(out)


def checkpoint_save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}, file has {len(self.buf)}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise NotACheckpointError("not a wdrop checkpoint (bad magic bytes)")
    r.pos = 4
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {version}; this build reads version {FORMAT_VERSION} only"
        )
    (fp_len,) = r.unpack("<I", "fingerprint length")
    fingerprint = r.take(fp_len, "fingerprint").decode()
    (count,) = r.unpack("<I", "tensor count")
    table: dict[str, tuple[str, np.ndarray]] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode()
        tag_code, rank = r.unpack("<BI", f"tag/rank of {name}")
        if tag_code not in _TAG_NAMES:
            raise ShapeTableError(f"tensor {name}: unknown partition tag byte {tag_code}")
        extents = r.unpack(f"<{rank}I", f"extents of {name}")
        if any(e == 0 for e in extents):
            raise ShapeTableError(f"tensor {name}: zero extent in shape {extents}")
        if name in table:
            raise ShapeTableError(f"duplicate tensor name {name!r} in shape table")
        n = int(np.prod(extents, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n, f"payload of {name}")
        table[name] = (_TAG_NAMES[tag_code], np.frombuffer(payload, dtype="<f8").reshape(extents).astype(np.float64))
    step, meta_len = r.unpack("<QI", "trailer")
    meta = json.loads(r.take(meta_len, "trailer metadata").decode())
    if r.pos != len(buf):
        raise ShapeTableError(f"{len(buf) - r.pos} unexpected trailing bytes after the checkpoint trailer")
    model = _model_from_table(table, meta)
    return Checkpoint(model, fingerprint, meta.get("rng_state", {}), step, meta.get("log", []))


def _model_from_table(table: dict[str, tuple[str, np.ndarray]], meta: dict) -> Model:
    head_kind = meta.get("head_kind", "linear")
    if "head.weight" not in table:
        raise ShapeTableError("shape table has no head.weight")
    n_classes = table["head.weight"][1].shape[0]
    reference = Model.conv4(n_classes, np.random.default_rng(0), head=head_kind, tau=meta.get("tau", 10.0))
    expected = reference.tensor_table()
    if set(expected) != set(table):
        missing = sorted(set(expected) - set(table))
        extra = sorted(set(table) - set(expected))
        raise ShapeTableError(f"shape table does not describe a Conv-4 model: missing {missing}, unexpected {extra}")
    for name, (tag, arr) in table.items():
        etag, earr = expected[name]
        if tag != etag or arr.shape != earr.shape:
            raise ShapeTableError(f"tensor {name}: stored {tag} {arr.shape}, expected {etag} {earr.shape}")
        if tag == "buffer":
            reference.buffers[name] = arr
        else:
            reference.params[name].data = arr
    return reference


def checkpoint_load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())
