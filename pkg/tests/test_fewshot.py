import logging
import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config
from wdrop import fewshot as F
from wdrop.data import generate_synthetic
from wdrop.model import checkpoint_bytes
from wdrop.tensor import TASK_SPECIFIC


def index_dataset(n_classes, per_class):
    # the sampler only looks at lengths, so placeholder rows suffice
    return {c: np.zeros((per_class, 1)) for c in range(n_classes)}


# ------------------------------------------------------------------- sampler


def test_episode_counts():
    ep = F.sample_episode(index_dataset(8, 20), 5, 1, 15, np.random.default_rng(0))
    assert len(ep.support) == 5 and len(ep.query) == 75
    assert np.bincount(ep.support_labels).tolist() == [1] * 5
    assert np.bincount(ep.query_labels).tolist() == [15] * 5
    assert ep.class_map == {c: i for i, c in enumerate(ep.classes)}
    for (c, _), lab in zip(ep.query, ep.query_labels):
        assert ep.class_map[c] == lab


def test_all_classes_drawn_when_n_way_is_total():
    ep = F.sample_episode(index_dataset(5, 4), 5, 2, 2, np.random.default_rng(1))
    assert sorted(ep.classes) == list(range(5))


def test_sampler_errors_carry_counts():
    with pytest.raises(F.FewShotError, match="5 classes, dataset has 3"):
        F.sample_episode(index_dataset(3, 10), 5, 1, 1, np.random.default_rng(0))
    with pytest.raises(F.FewShotError, match="16 images"):
        F.sample_episode(index_dataset(6, 10), 5, 1, 15, np.random.default_rng(0))


def test_sampler_no_overlap_many_episodes():
    data = index_dataset(7, 20)
    rng = np.random.default_rng(5)
    for _ in range(2000):
        ep = F.sample_episode(data, 5, 5, 10, rng)
        sup = {tuple(x) for x in ep.support.tolist()}
        qry = {tuple(x) for x in ep.query.tolist()}
        assert len(sup) == 25 and len(qry) == 50 and not sup & qry


# ------------------------------------------------------------------- reports


def test_ci_hand_value():
    rep = F.EvalReport.from_accuracies([1.0, 0.5, 0.5, 1.0], seed=0, fp="x")
    assert rep.mean == 0.75
    assert rep.ci == pytest.approx(1.96 * math.sqrt(1 / 12) / 2, abs=1e-12)
    assert rep.ci == pytest.approx(0.28290, abs=5e-6)
    assert rep.ci_method.startswith("1.96")


def test_ci_all_perfect():
    rep = F.EvalReport.from_accuracies([1.0] * 7, 0, "x")
    assert (rep.mean, rep.ci) == (1.0, 0.0)


def test_ci_needs_two():
    with pytest.raises(F.FewShotError):
        F.ci95([0.5])


# --------------------------------------------------------------- aggregation


def _rep(seed, accs):
    return F.EvalReport.from_accuracies(accs, seed, "fp")


def test_single_seed_aggregate_equals_report():
    agg = F.multi_seed(lambda s: _rep(s, [0.2, 0.4, 0.9]), [3])
    r = _rep(3, [0.2, 0.4, 0.9])
    assert (agg.mean, agg.ci, agg.std_across_seeds) == (r.mean, r.ci, 0.0)


def test_seed_order_irrelevant():
    accs = {s: list(np.random.default_rng(s).random(10)) for s in range(6)}
    a = F.multi_seed(lambda s: _rep(s, accs[s]), [0, 1, 2, 3, 4, 5])
    b = F.multi_seed(lambda s: _rep(s, accs[s]), [5, 3, 1, 0, 4, 2])
    assert (a.mean, a.ci, a.std_across_seeds, a.seeds) == (b.mean, b.ci, b.std_across_seeds, b.seeds)


def test_failing_seed_is_named():
    def run(s):
        if s == 7:
            raise ValueError("boom")
        return _rep(s, [0.5, 0.5])

    with pytest.raises(F.SeedRunError, match="seed 7: boom"):
        F.multi_seed(run, [1, 7])
    with pytest.raises(F.FewShotError):
        F.multi_seed(run, [])


# ------------------------------------------------------------------- configs


def test_stage_and_eval_validation():
    with pytest.raises(F.FewShotError):
        F.StageConfig("warmup")
    with pytest.raises(F.FewShotError, match="schedule"):
        F.StageConfig("pretrain", schedule="step")
    with pytest.raises(F.FewShotError, match="episodes"):
        F.EvalSettings(episodes=1)
    assert F.EvalSettings(episodes=2).episodes == 2


def test_cosine_schedule():
    st = F.StageConfig("pretrain", lr=0.1, schedule="cosine")
    assert F.lr_at(st, 0, 10) == pytest.approx(0.1)
    assert F.lr_at(st, 5, 10) == pytest.approx(0.05)
    assert F.lr_at(replace(st, schedule="constant"), 9, 10) == 0.1


def test_mode_config_stages():
    cfg = tiny_config(kind="dropblock")
    assert F.mode_config(cfg, "none").regularizer.kind == "none"
    assert [F.mode_config(cfg, m).regularizer.stage for m in ("W", "D", "W&D")] == ["pretrain", "finetune", "both"]
    with pytest.raises(F.FewShotError):
        F.mode_config(cfg, "X")


def test_type_placement_cells_skip_flatten_dropblock(caplog):
    with caplog.at_level(logging.WARNING):
        cells, skipped = F.type_placement_cells(
            ("dropout", "dropblock"), ("last_conv_layer", "group4", "group3_and_4", "last_flatten_layer")
        )
    assert len(cells) == 7 and skipped == [("dropblock", "last_flatten_layer")]
    assert "skipping dropblock on last_flatten_layer" in caplog.text
    cells, skipped = F.type_placement_cells(("dropout", "dropblock"), ("last_conv_layer", "group4", "group3_and_4"))
    assert len(cells) == 6 and not skipped


# ------------------------------------------------------------------ pretrain


def test_pretrain_rejects_single_class():
    with pytest.raises(F.FewShotError, match="at least 2"):
        F.pretrain({0: np.zeros((2, 3, 84, 84))}, tiny_config(), 0)


def _two_class_set(n=6):
    s = generate_synthetic(5, n, seed=4)
    # disc vs checker families
    return {0: s.images[0], 4: s.images[4]}


def test_separable_two_class_training():
    cfg = replace(tiny_config(), pretrain=F.StageConfig("pretrain", epochs=20, batch_size=4, lr=0.01, schedule="cosine"))
    ck = F.pretrain(_two_class_set(), cfg, 0)
    assert ck.log[-1]["train_acc"] > 0.95
    assert len(ck.log) == 20 and ck.step == 20 * 3


def test_pretrain_bit_identical_and_regularizer_sensitive():
    data = _two_class_set(4)
    cfg = tiny_config()
    a = checkpoint_bytes(F.pretrain(data, cfg, 3))
    b = checkpoint_bytes(F.pretrain(data, cfg, 3))
    assert a == b
    reg = replace(cfg, regularizer=F.RegularizerConfig(kind="dropblock", keep_prob=0.7, placement="group3_and_4"))
    c = F.pretrain(data, reg, 3)
    ref = F.pretrain(data, cfg, 3)
    imgs = data[0][:2]
    assert not np.array_equal(c.model.extract_features(imgs), ref.model.extract_features(imgs))


def test_keep_prob_one_pretrain_equals_none():
    data = _two_class_set(4)
    cfg = tiny_config()
    one = replace(cfg, regularizer=F.RegularizerConfig(kind="dropblock", keep_prob=1.0))
    assert F.pretrain(data, cfg, 1).model.checksum() == F.pretrain(data, one, 1).model.checksum()


# ------------------------------------------------------------------ finetune


def test_finetune_freezes_backbone_and_memorizes(tiny_ckpt, tiny_split):
    pool = tiny_split.subset("val+novel")
    ep = F.sample_episode(pool, 3, 1, 1, np.random.default_rng(0))
    sup = ep.images(pool, "support")
    before = tiny_ckpt.model.checksum()
    cfg = replace(tiny_config(), finetune=F.StageConfig("finetune", steps=100, batch_size=0, lr=0.05, weight_decay=0.0))
    adapted = F.finetune(tiny_ckpt, sup, ep.support_labels, cfg, seed=0)
    assert adapted.checksum() == before == tiny_ckpt.model.checksum()
    assert adapted.head_kind == "cosine" and adapted.n_classes == 3
    assert adapted.params.names(TASK_SPECIFIC) == ["head.weight"]
    assert (adapted.predict(sup) == ep.support_labels).all()


def test_finetune_rejects_one_class(tiny_ckpt, tiny_split):
    imgs = tiny_split.images[tiny_split.novel[0]][:2]
    with pytest.raises(F.FewShotError, match="at least 2"):
        F.finetune(tiny_ckpt, imgs, np.array([0, 0]), tiny_config(), 0)


@pytest.mark.parametrize("stage, fires", [("pretrain", 0), ("finetune", 20), ("both", 20)])
def test_finetune_fire_counter(tiny_ckpt, tiny_split, stage, fires):
    pool = tiny_split.subset("novel")
    imgs = np.concatenate([pool[c][:1] for c in pool])
    counter = Counter()
    cfg = tiny_config(kind="dropblock", stage=stage)
    F.finetune(tiny_ckpt, imgs, np.arange(len(pool)), cfg, 0, counter)
    assert counter["finetune"] == fires and counter["pretrain"] == 0


# ------------------------------------------------------------------ evaluate


def test_evaluate_deterministic_and_thread_independent(tiny_ckpt, tiny_split):
    pool = tiny_split.subset("val+novel")
    cfg = tiny_config()
    cache = F.FeatureCache(tiny_ckpt.model, pool)
    a = F.evaluate(tiny_ckpt, pool, 3, 1, 6, seed=2, cfg=cfg)
    b = F.evaluate(tiny_ckpt, pool, 3, 1, 6, seed=2, cfg=cfg, jobs=4, cache=cache)
    assert a.accuracies == b.accuracies
    assert a.episodes == 6 and a.k_shot == 1
    c = F.evaluate(tiny_ckpt, pool, 3, 1, 6, seed=3, cfg=cfg, cache=cache)
    assert c.accuracies != a.accuracies


def test_evaluate_rejects_one_episode(tiny_ckpt, tiny_split):
    with pytest.raises(F.FewShotError, match="episodes"):
        F.evaluate(tiny_ckpt, tiny_split.subset("novel"), 2, 1, 1, seed=0)


def test_tie_break_lowest_index(tiny_split):
    class ZeroCache:
        def take(self, items):
            return np.zeros((len(items), 1600))

    pool = tiny_split.subset("val+novel")
    acc = F.run_episode(0, ZeroCache(), pool, 4, 1, 5, tiny_config(), seed=0)
    # every query predicts local class 0, which holds a quarter of the queries
    assert acc == 0.25


def test_std_across_seeds_nonzero(tiny_ckpt, tiny_split):
    pool = tiny_split.subset("val+novel")
    cache = F.FeatureCache(tiny_ckpt.model, pool)
    agg = F.multi_seed(lambda s: F.evaluate(tiny_ckpt, pool, 3, 1, 4, s, tiny_config(), cache=cache), range(4))
    assert agg.std_across_seeds > 0


def test_base_novel_report(tiny_ckpt, tiny_split):
    _, held = F.holdout_split(tiny_split.subset("base"), 4)
    # degenerate protocol: the base classes double as the novel pool
    rep = F.base_novel_report(tiny_ckpt, held, tiny_split.subset("base"), tiny_config(), seed=0)
    assert 0.0 <= rep.base_accuracy <= 1.0
    assert rep.novel.episodes == 4
    with pytest.raises(F.FewShotError, match="empty"):
        F.base_accuracy(tiny_ckpt, {})


def test_holdout_split():
    data = {0: np.arange(10), 1: np.arange(5)}
    train, held = F.holdout_split(data, 3)
    assert held[0].tolist() == [7, 8, 9] and len(train[1]) == 2
    with pytest.raises(F.FewShotError):
        F.holdout_split(data, 5)


# ----------------------------------------------------------------- pipelines


def test_mode_ablation_gating_and_fingerprints(tiny_split):
    cfg = tiny_config(kind="dropblock", block_size=3, placement="group4")
    cells = F.run_mode_ablation(tiny_split, cfg, seed=0)
    assert [c.label for c in cells] == ["none", "W", "D", "W&D"]
    prefixes = {c.fingerprint.split("/")[0] for c in cells}
    assert len(prefixes) == 1
    fires = {c.label: c.fires for c in cells}
    assert fires["none"] == {}
    assert set(fires["W"]) == {"pretrain"} and set(fires["D"]) == {"finetune"}
    assert set(fires["W&D"]) == {"pretrain", "finetune"}
    by = {c.label: c for c in cells}
    # D reuses the unregularized backbone, W&D the W one
    assert by["D"].base_accuracy == by["none"].base_accuracy
    assert by["W&D"].base_accuracy == by["W"].base_accuracy


def test_none_mode_equals_keep_prob_one(tiny_split):
    cfg = tiny_config(kind="dropblock", placement="group4")
    none = F.run_pipeline(tiny_split, F.mode_config(cfg, "none"), 0)
    one = F.run_pipeline(tiny_split, replace(cfg, regularizer=replace(cfg.regularizer, keep_prob=1.0)), 0)
    for k in none.reports:
        assert none.reports[k].accuracies == one.reports[k].accuracies
    assert none.base_accuracy == one.base_accuracy


def test_fingerprint_stable_and_sensitive():
    assert F.fingerprint(tiny_config()) == F.fingerprint(tiny_config())
    assert F.fingerprint(tiny_config()) != F.fingerprint(tiny_config(kind="dropout"))
    assert len(F.fingerprint({"a": 1})) == 16
