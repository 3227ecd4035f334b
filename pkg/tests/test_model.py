import struct

import numpy as np
import pytest

from wdrop.model import (
    FEATURE_DIM,
    FORMAT_VERSION,
    Checkpoint,
    Model,
    NotACheckpointError,
    ShapeTableError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    checkpoint_load,
    checkpoint_save,
    cosine_logits,
)
from wdrop.regularize import RegularizerConfig, MaskStream, resolve_hooks
from wdrop.tensor import TASK_SPECIFIC, TRANSFERABLE, ShapeError, Tensor


@pytest.fixture(scope="module")
def model():
    return Model.conv4(5, np.random.default_rng(0))


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(1).random((2, 3, 84, 84))


def test_feature_shape(model, images):
    assert model.backbone_forward(images).shape == (2, FEATURE_DIM)


def test_wrong_spatial_size_rejected(model):
    with pytest.raises(ShapeError, match="84"):
        model.backbone_forward(np.zeros((1, 3, 32, 32)))


def test_eval_forward_deterministic(model, images):
    a = model.backbone_forward(images).data
    b = model.backbone_forward(images).data
    assert a.tobytes() == b.tobytes()


def test_seeded_train_forward_with_dropblock(images):
    cfg = RegularizerConfig(kind="dropblock", keep_prob=0.8, block_size=7, placement="group3_and_4")
    outs = []
    for _ in range(2):
        m = Model.conv4(5, np.random.default_rng(0))
        hooks = resolve_hooks(cfg, m.layout)
        outs.append(m.backbone_forward(images, hooks, cfg, "train", "pretrain", MaskStream.derive(9)).data.tobytes())
    assert outs[0] == outs[1]


def test_hooks_fire_once_each(images):
    from collections import Counter

    m = Model.conv4(5, np.random.default_rng(0))
    cfg = RegularizerConfig(kind="dropblock", placement="group3_and_4")
    counter = Counter()
    m.backbone_forward(images, resolve_hooks(cfg, m.layout), cfg, "train", "pretrain", MaskStream.derive(1), counter)
    assert counter["pretrain"] == 2


def test_train_mode_updates_running_stats(images):
    m = Model.conv4(5, np.random.default_rng(0))
    before = m.buffers["backbone.group1.bn.running_mean"].copy()
    m.backbone_forward(images, mode="train")
    assert not np.array_equal(before, m.buffers["backbone.group1.bn.running_mean"])


def test_partitions(model):
    names = model.params.names()
    trans, task = model.params.names(TRANSFERABLE), model.params.names(TASK_SPECIFIC)
    assert sorted(trans + task) == sorted(names)
    assert all(n.startswith("backbone.") for n in trans)
    assert all(n.startswith("head.") for n in task)


# -------------------------------------------------------------------- cosine


def test_cosine_parallel_and_orthogonal():
    w = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    logits = cosine_logits(Tensor(np.array([[2.0, 0.0]])), w, tau=10.0).data
    np.testing.assert_allclose(logits, [[10.0, 0.0]], atol=1e-12)


def test_cosine_scale_invariance(rng):
    f = rng.standard_normal((6, 16))
    w = Tensor(rng.standard_normal((4, 16)))
    a = cosine_logits(Tensor(f), w, 10.0).data
    b = cosine_logits(Tensor(10 * f), w, 10.0).data
    np.testing.assert_allclose(a, b, atol=1e-10)
    assert np.array_equal(a.argmax(1), b.argmax(1))


def test_cosine_dimension_mismatch():
    with pytest.raises(ShapeError, match="cosine"):
        cosine_logits(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))), 10.0)


def test_cosine_head_and_tau():
    m = Model.conv4(3, np.random.default_rng(0), head="cosine", tau=5.0)
    assert "head.bias" not in m.params.names()
    logits = m.head_logits(Tensor(m.params["head.weight"].data[:1] * 3.0)).data
    assert logits[0, 0] == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(ValueError, match="temperature"):
        Model(tau=0.0)


def test_copy_is_deep(model):
    c = model.copy()
    c.params["backbone.group1.conv.weight"].data[0, 0, 0, 0] += 1.0
    assert c.checksum() != model.checksum()
    assert c.checksum(TASK_SPECIFIC) == model.checksum(TASK_SPECIFIC)


# ---------------------------------------------------------------- checkpoint


def _ckpt(model):
    return Checkpoint(model, "abc123", {"shuffle": {"x": 1}, "classes": [3, 1, 4]}, 42, [{"epoch": 1, "loss": 0.5}])


def test_round_trip_byte_equal(model, tmp_path):
    ck = _ckpt(model)
    path = checkpoint_save(ck, tmp_path / "m.wdrp")
    back = checkpoint_load(path)
    t0, t1 = model.tensor_table(), back.model.tensor_table()
    assert list(t0) == list(t1)
    for name in t0:
        assert t0[name][0] == t1[name][0]
        assert t0[name][1].tobytes() == t1[name][1].tobytes()
    assert (back.fingerprint, back.rng_state, back.step, back.log) == (ck.fingerprint, ck.rng_state, ck.step, ck.log)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_cosine_head_round_trip(tmp_path):
    m = Model.conv4(4, np.random.default_rng(2), head="cosine", tau=7.0)
    back = checkpoint_load(checkpoint_save(Checkpoint(m), tmp_path / "c.wdrp")).model
    assert (back.head_kind, back.tau) == ("cosine", 7.0)


def test_layout_header(model):
    buf = checkpoint_bytes(_ckpt(model))
    assert buf[:4] == b"WDRP"
    assert struct.unpack("<I", buf[4:8])[0] == FORMAT_VERSION
    assert struct.unpack("<I", buf[8:12])[0] == len("abc123")


def test_bad_magic(model):
    buf = bytearray(checkpoint_bytes(_ckpt(model)))
    buf[:4] = b"PKZP"
    with pytest.raises(NotACheckpointError, match="not a wdrop checkpoint"):
        checkpoint_from_bytes(bytes(buf))


def test_version_mismatch(model):
    buf = bytearray(checkpoint_bytes(_ckpt(model)))
    buf[4:8] = struct.pack("<I", 0)
    with pytest.raises(UnsupportedVersionError, match="version 0"):
        checkpoint_from_bytes(bytes(buf))


def test_errors_are_distinct():
    assert not issubclass(NotACheckpointError, UnsupportedVersionError)
    assert not issubclass(UnsupportedVersionError, NotACheckpointError)


@pytest.mark.parametrize("cut", [10, 200, -5])
def test_truncated(model, cut):
    buf = checkpoint_bytes(_ckpt(model))
    with pytest.raises(TruncatedCheckpointError):
        checkpoint_from_bytes(buf[:cut])


def test_shape_table_inconsistency(model):
    other = model.copy()
    other.params["backbone.group2.bn.weight"].data = np.ones(7)
    with pytest.raises(ShapeTableError, match="group2.bn.weight"):
        checkpoint_from_bytes(checkpoint_bytes(Checkpoint(other)))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint_load(tmp_path / "absent.wdrp")
