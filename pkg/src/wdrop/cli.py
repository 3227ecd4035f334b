"""``wdrop`` command line: pretrain, finetune, evaluate, ablate, gradcheck, gen-data."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence


from . import fewshot as F
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import DatasetError, DatasetSplit, generate_synthetic, load_image_dir, save_image_dir
from .model import CheckpointError, checkpoint_load, checkpoint_save
from .regularize import RegularizerConfigError
from .report import ReportRow, format_table, render_figure, write_results, write_timings

log = logging.getLogger("wdrop")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(ValueError):
    """Bad input from the command line; reported with exit code 1."""


# ------------------------------------------------------------------ helpers


def build_dataset(cfg: ExperimentConfig) -> DatasetSplit:
    ds = cfg.dataset
    if ds.source == "directory":
        return load_image_dir(ds.root, ds.manifest)
    return generate_synthetic(ds.n_classes, ds.images_per_class, ds.seed, ds.ratios)


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(rows: list[ReportRow], out: Path, title: str) -> None:
    write_results(rows, out / "results.csv")
    write_timings(rows, out / "timings.csv")
    render_figure(rows, out / "results.png", title)
    print(format_table(rows))
    for r in rows:
        log.info("%s %d-shot wall time %.1fs", r.label, r.k_shot, r.wall_time)


def _pretrain_fp(pipe: F.PipelineConfig) -> str:
    return F.fingerprint(pipe.pretrain_key())


def _load_ckpt(path: str | None):
    if not path:
        raise UsageError("--checkpoint is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return checkpoint_load(p)


# ------------------------------------------------------------------ commands


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    out = _out(cfg)
    split = build_dataset(cfg)
    pipe = cfg.pipeline()
    train, _ = F.holdout_split(split.subset("base"), pipe.holdout) if pipe.holdout else (split.subset("base"), {})
    rows = []
    for seed in cfg.seeds:
        ckpt = F.pretrain(train, pipe, seed, fp=_pretrain_fp(pipe))
        path = checkpoint_save(ckpt, out / f"ckpt_seed{seed}.wdrp")
        rows += [{"seed": seed, **r} for r in ckpt.log]
        print(f"seed {seed}: {path} (final loss {ckpt.log[-1]['loss']:.4f})")
    with (out / "train_log.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["seed", "epoch", "loss", "train_acc"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return EXIT_OK


def _check_fingerprint(ckpt, pipe: F.PipelineConfig) -> None:
    if ckpt.fingerprint != _pretrain_fp(pipe):
        log.warning(
            "checkpoint fingerprint %s differs from this config's pre-training fingerprint %s; evaluating anyway",
            ckpt.fingerprint,
            _pretrain_fp(pipe),
        )


def cmd_finetune(cfg: ExperimentConfig, checkpoint: str | None) -> int:
    ckpt = _load_ckpt(checkpoint)
    pipe = cfg.pipeline()
    _check_fingerprint(ckpt, pipe)
    out = _out(cfg)
    split = build_dataset(cfg)
    pool = split.subset(pipe.eval.pool)
    k = pipe.eval.k_shots[0]
    for seed in cfg.seeds:
        ep = F.sample_episode(pool, pipe.eval.n_way, k, pipe.eval.q_queries, F._generator(seed, F._EPISODE))
        adapted = F.finetune(ckpt, ep.images(pool, "support"), ep.support_labels, pipe, seed)
        acc = float((adapted.predict(ep.images(pool, "query")) == ep.query_labels).mean())
        rng_state = {**ckpt.rng_state, "episode_classes": list(ep.classes)}
        path = checkpoint_save(
            F.Checkpoint(adapted, ckpt.fingerprint, rng_state, ckpt.step + pipe.finetune.steps, ckpt.log),
            out / f"finetuned_seed{seed}.wdrp",
        )
        print(f"seed {seed}: {pipe.eval.n_way}-way {k}-shot query accuracy {acc * 100:.2f}% -> {path}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str | None) -> int:
    ckpt = _load_ckpt(checkpoint)
    pipe = cfg.pipeline()
    _check_fingerprint(ckpt, pipe)
    out = _out(cfg)
    split = build_dataset(cfg)
    pool = split.subset(pipe.eval.pool)
    cache = F.FeatureCache(ckpt.model, pool)
    base = None
    if pipe.holdout:
        _, held = F.holdout_split(split.subset("base"), pipe.holdout)
        try:
            base = F.base_accuracy(ckpt, held)
        except F.FewShotError as exc:
            log.warning("base accuracy unavailable: %s", exc)
    reg = pipe.regularizer
    rows = []
    for k in pipe.eval.k_shots:
        per_seed, t0 = {}, time.perf_counter()
        for seed in cfg.seeds:
            per_seed[seed] = F.evaluate(
                ckpt, pool, pipe.eval.n_way, k, pipe.eval.episodes, seed, pipe, jobs=cfg.jobs, cache=cache, fp=cfg.fingerprint()
            )
        agg = F.aggregate(per_seed)
        rows.append(
            ReportRow(
                "eval", reg.mode_label, reg.kind, reg.placement if reg.kind != "none" else "-", k, agg.mean, agg.ci,
                len(agg.seeds), time.perf_counter() - t0, agg.std_across_seeds, base, pipe.eval.episodes, cfg.fingerprint(),
            )
        )
    _emit(rows, out, f"{pipe.eval.n_way}-way evaluation")
    return EXIT_OK


def grid_cells(cfg: ExperimentConfig, grid: str) -> list[tuple[str, F.PipelineConfig]]:
    """(label, pipeline config) for every cell of an ablation grid."""
    pipe = cfg.pipeline()
    if grid == "mode":
        reg = pipe.regularizer
        if reg.kind == "none" and any(m != "none" for m in cfg.ablate.modes):
            raise UsageError("the mode grid needs regularizer.kind dropout or dropblock")
        return [(m, F.mode_config(pipe, m)) for m in cfg.ablate.modes]
    if grid == "type_placement":
        cells, _ = F.type_placement_cells(cfg.ablate.kinds, cfg.ablate.placements)
        return [
            (f"{kind}@{pl}", replace(pipe, regularizer=replace(pipe.regularizer, kind=kind, placement=pl, stage="pretrain")))
            for kind, pl in cells
        ]
    raise UsageError(f"unknown grid {grid!r}; expected 'mode' or 'type_placement'")


def _marker_name(label: str, seed: int) -> str:
    safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in label)
    return f"{safe}_seed{seed}.json"


def _cell_to_json(cell: F.CellResult) -> dict:
    return {
        "label": cell.label,
        "mode": cell.mode,
        "kind": cell.kind,
        "placement": cell.placement,
        "seed": cell.seed,
        "fingerprint": cell.fingerprint,
        "reports": {str(k): r.accuracies for k, r in cell.reports.items()},
        "n_way": next(iter(cell.reports.values())).n_way,
        "base_accuracy": cell.base_accuracy,
        "fires": cell.fires,
        "wall_time": cell.wall_time,
    }


def _cell_from_json(d: dict) -> F.CellResult:
    reports = {
        int(k): F.EvalReport.from_accuracies(accs, d["seed"], d["fingerprint"], d["n_way"], int(k))
        for k, accs in d["reports"].items()
    }
    return F.CellResult(
        d["label"], d["mode"], d["kind"], d["placement"], d["seed"], d["fingerprint"], reports,
        d["base_accuracy"], d["fires"], d["wall_time"],
    )


def run_grid(cfg: ExperimentConfig, grid: str, split: DatasetSplit | None = None) -> list[ReportRow]:
    """Every cell × seed, resuming from per-cell markers under ``<out>/cells``."""
    cells = grid_cells(cfg, grid)
    out = _out(cfg)
    marks = out / "cells"
    marks.mkdir(exist_ok=True)
    prefix = cfg.fingerprint()
    ckpt_cache: dict = {}
    results: dict[str, dict[int, F.CellResult]] = {}
    for label, pipe in cells:
        results[label] = {}
        for seed in cfg.seeds:
            marker = marks / _marker_name(label, seed)
            if marker.is_file():
                cell = _cell_from_json(json.loads(marker.read_text()))
                if cell.fingerprint == f"{prefix}/{label}":
                    log.info("cell %s seed %d: reusing %s", label, seed, marker)
                    results[label][seed] = cell
                    continue
                log.warning("cell %s seed %d: stale marker (config changed); recomputing", label, seed)
            split = split or build_dataset(cfg)
            try:
                cell = F.run_pipeline(split, pipe, seed, label, prefix, cfg.jobs, ckpt_cache)
            except Exception as exc:
                raise RuntimeError(f"cell {label} seed {seed}: {exc}") from exc
            tmp = marker.with_suffix(".tmp")
            tmp.write_text(json.dumps(_cell_to_json(cell), sort_keys=True))
            tmp.replace(marker)
            results[label][seed] = cell
            log.info("cell %s seed %d done in %.1fs", label, seed, cell.wall_time)

    rows = []
    for label, _ in cells:
        per_seed = results[label]
        any_cell = next(iter(per_seed.values()))
        bases = [c.base_accuracy for c in per_seed.values() if c.base_accuracy is not None]
        base = math.fsum(bases) / len(bases) if bases else None
        wall = math.fsum(c.wall_time for c in per_seed.values())
        for k in sorted(any_cell.reports):
            agg = F.aggregate({s: c.reports[k] for s, c in per_seed.items()})
            rows.append(
                ReportRow(
                    label, any_cell.mode, any_cell.kind, any_cell.placement, k, agg.mean, agg.ci, len(agg.seeds), wall,
                    agg.std_across_seeds, base, any_cell.reports[k].episodes, any_cell.fingerprint,
                )
            )
    return sorted(rows, key=ReportRow.sort_key)


def cmd_ablate(cfg: ExperimentConfig, grid: str) -> int:
    rows = run_grid(cfg, grid)
    _emit(rows, Path(cfg.out), f"{grid} ablation")
    return EXIT_OK


def cmd_gradcheck(ops: str | None, threshold: float, seed: int) -> int:
    from .gradcheck import SUITE_OPS, run_suite

    wanted = [o.strip() for o in ops.split(",") if o.strip()] if ops else list(SUITE_OPS)
    unknown = [o for o in wanted if o not in SUITE_OPS]
    if unknown:
        raise UsageError(f"unknown op(s) {unknown}; available: {', '.join(SUITE_OPS)}")
    t0 = time.perf_counter()
    results = run_suite(wanted, seed=seed)
    failed = []
    for r in results:
        ok = r.passed(threshold)
        failed += [] if ok else [r.op]
        print(f"{r.op:24s} {r.max_rel_error:.3e}  checked {r.checked:3d}  skipped {r.skipped:2d}  {'PASS' if ok else 'FAIL'}")
    print(f"{len(results) - len(failed)}/{len(results)} ops passed at {threshold:g} in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"failed: {', '.join(failed)}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    if cfg.dataset.source != "synthetic":
        raise UsageError("gen-data needs dataset.source = 'synthetic'")
    split = build_dataset(cfg)
    manifest = save_image_dir(split, _out(cfg) / "data")
    print(f"wrote {len(split.images)} classes ({len(split.base)}/{len(split.val)}/{len(split.novel)}); manifest {manifest}")
    return EXIT_OK


# ------------------------------------------------------------------ entry


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flag appear before or after the subcommand
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML experiment config")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="run a single seed instead of the config's list")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--episodes", type=int, default=argparse.SUPPRESS, help="evaluation episodes per k-shot")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel episode workers")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="wdrop", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="pre-train on base classes, one checkpoint per seed")
    for name, text in (("finetune", "fit a cosine head on one sampled support set"), ("evaluate", "episodic evaluation of a checkpoint")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--checkpoint", help="path to a .wdrp checkpoint")
    sp = sub.add_parser("ablate", parents=[common], help="run an ablation grid over seeds")
    sp.add_argument("--grid", required=True, choices=("mode", "type_placement"))
    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable op")
    sp.add_argument("--ops", help="comma-separated subset, e.g. relu,linear")
    sp.add_argument("--threshold", type=float, default=1e-4)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as PNG folders plus a manifest")
    sp = sub.add_parser("init-config", parents=[common], help="print a config with every key at its default")
    return parser


def _config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    cfg = load_config(path) if path else ExperimentConfig()
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        out=getattr(args, "out", None),
        episodes=getattr(args, "episodes", None),
        jobs=getattr(args, "jobs", None),
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.ops, args.threshold, getattr(args, "seed", 0))
        cfg = _config(args)
        if args.command == "init-config":
            if getattr(args, "out", None):
                save_config(cfg, Path(args.out) / "config.toml")
            from .config import dumps

            print(dumps(cfg), end="")
            return EXIT_OK
        handlers = {
            "pretrain": lambda: cmd_pretrain(cfg),
            "finetune": lambda: cmd_finetune(cfg, args.checkpoint),
            "evaluate": lambda: cmd_evaluate(cfg, args.checkpoint),
            "ablate": lambda: cmd_ablate(cfg, args.grid),
            "gen-data": lambda: cmd_gen_data(cfg),
        }
        return handlers[args.command]()
    except (ConfigError, UsageError, RegularizerConfigError, CheckpointError, DatasetError, F.FewShotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
