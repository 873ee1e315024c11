"""Command-line front end: ``contseg <command> ...``.

Commands: generate, train, evaluate, grid, report, attention. Every command
takes the experiment config (JSON) or a run directory; ``--set a.b=value``
overrides single config leaves.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report as rp
from .arch import load_checkpoint
from .config import ExperimentConfig, build_config, load_config
from .datamodel import TaskDataset, slice_volume
from .errors import ConfigInvalid, ContsegError, RunNotFound
from .metrics import extract_attention, summarize, write_dice_csv, write_pgm, write_summary
from .synthdata import TaskSpec, generate_task, write_task
from .trainer import ExperimentRecord, reevaluate, run_sequence

log = logging.getLogger("contseg")


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    return path


def cmd_generate(cfg: ExperimentConfig) -> list[Path]:
    """Write every synthetic task of the config as volume files plus a task.json manifest."""
    out = Path(cfg.output_dir) / "data"
    manifests = []
    for t in cfg.tasks:
        if not isinstance(t, TaskSpec):
            log.info("skipping %s: already a manifest", t)
            continue
        manifests.append(write_task(generate_task(t), out / t.name))
    return manifests


def cmd_train(cfg: ExperimentConfig, baseline_cache: dict | None = None) -> ExperimentRecord:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    return run_sequence(
        cfg.load_tasks(), cfg.arch, cfg.strategy, cfg.train, cfg.freeze,
        out_dir=out, baseline_cache=baseline_cache,
    )


def _open_run(run_dir) -> tuple[Path, ExperimentConfig, ExperimentRecord]:
    run_dir = Path(run_dir)
    if not (run_dir / "record.json").is_file() or not (run_dir / "config.json").is_file():
        raise RunNotFound(f"{run_dir} has no record.json/config.json")
    cfg = build_config(json.loads((run_dir / "config.json").read_text()), run_dir)
    return run_dir, cfg, ExperimentRecord.load(run_dir / "record.json")


def _test_pairs(cfg: ExperimentConfig, record: ExperimentRecord):
    pairs = []
    for ds in cfg.load_tasks():
        split = record.splits[ds.name]
        train = TaskDataset(ds.name, tuple(ds.case(i) for i in split["train"]))
        test = TaskDataset(ds.name, tuple(ds.case(i) for i in split["test"]))
        pairs.append((train, test))
    return pairs


def cmd_evaluate(run_dir) -> dict:
    """Re-evaluate stored checkpoints; rewrites dice_matrix.csv and summary.json."""
    run_dir, cfg, record = _open_run(run_dir)
    matrix, baselines = reevaluate(run_dir, _test_pairs(cfg, record))
    summary = summarize(matrix, baselines)
    write_dice_csv(run_dir / "dice_matrix.csv", matrix)
    write_summary(run_dir / "summary.json", summary)
    diff = float(np.max(np.abs(matrix.values - np.array(record.dice))))
    if baselines is not None and record.baseline_dice is not None:
        diff = max(diff, float(np.max(np.abs(np.array(baselines) - np.array(record.baseline_dice)))))
    return {"max_abs_diff": diff, "summary": summary.to_dict()}


def cmd_grid(cfg: ExperimentConfig, spec: rp.GridSpec, jobs: int = 1) -> dict:
    out = Path(cfg.output_dir) / "grid" / spec.method
    results = rp.run_grid(spec, cfg.load_tasks(), cfg.arch, cfg.train, cfg.strategy, jobs=jobs)
    cells = []
    for k, (params, record) in enumerate(results):
        (out / f"cell_{k}").mkdir(parents=True, exist_ok=True)
        record.save(out / f"cell_{k}" / "record.json")
        mean, sigma = rp.selection_score(record)
        cells.append({"params": params, "mean_dice": mean, "sigma": sigma})
    k = rp.best_index(results)
    best = {"grid": spec.to_dict(), "cells": cells, "best_index": k, "best": results[k][0]}
    _write_json(out / "grid.json", spec.to_dict())
    _write_json(out / "best.json", best)
    return best


def cmd_report(run_dir) -> dict:
    run_dir, _, record = _open_run(run_dir)
    radar = rp.emit_radar(record)
    _write_json(run_dir / "radar.json", radar.to_dict())
    (run_dir / "radar.txt").write_text(rp.render_radar({run_dir.name: radar}) + "\n")
    return radar.to_dict()


def cmd_attention(run_dir, case_id: str, slice_index: int, layer=None, head=None, checkpoint=None) -> Path:
    """Heat map of the attention received per token, default last layer and last head."""
    run_dir, cfg, record = _open_run(run_dir)
    rel = checkpoint or record.checkpoints[-1]
    model, _ = load_checkpoint(run_dir / rel)
    case = None
    for ds in cfg.load_tasks():
        if case_id in {c.id for c in ds.cases}:
            case = ds.case(case_id)
    if case is None:
        raise KeyError(f"case {case_id!r} not found in the run's tasks")
    image = slice_volume(case).images[slice_index, 0]
    amap = extract_attention(model, image, layer, head)
    path = run_dir / "attention" / f"{case_id}_s{slice_index}_l{amap.layer}_h{amap.head}.pgm"
    path.parent.mkdir(parents=True, exist_ok=True)
    return write_pgm(path, amap.grid)


def _grid_spec(args) -> rp.GridSpec:
    if args.grid:
        return rp.GridSpec.from_dict(json.loads(Path(args.grid).read_text()))
    if args.method not in rp.TUNING_GRIDS:
        raise ConfigInvalid([("method", f"must be one of {sorted(rp.TUNING_GRIDS)}")])
    return rp.TUNING_GRIDS[args.method]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config JSON (default: built-in desk config)")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="override a config leaf")

    with_config(sub.add_parser("generate", help="write the synthetic tasks to disk"))
    with_config(sub.add_parser("train", help="run the sequential protocol"))
    ev = sub.add_parser("evaluate", help="re-evaluate a run's checkpoints")
    ev.add_argument("run_dir")
    g = sub.add_parser("grid", help="hyperparameter grid for one method")
    with_config(g)
    g.add_argument("--method", default="ewc")
    g.add_argument("--grid", help="grid.json overriding the built-in grid")
    g.add_argument("--jobs", type=int, default=1)
    r = sub.add_parser("report", help="radar data for a run")
    r.add_argument("run_dir")
    a = sub.add_parser("attention", help="attention heat map of one slice")
    a.add_argument("run_dir")
    a.add_argument("--case", required=True)
    a.add_argument("--slice", type=int, required=True)
    a.add_argument("--layer", type=int)
    a.add_argument("--head", type=int)
    a.add_argument("--checkpoint", help="checkpoint path relative to the run dir (default: last task)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            result = [str(m) for m in cmd_generate(load_config(args.config, args.set))]
        elif args.command == "train":
            record = cmd_train(load_config(args.config, args.set))
            result = {"summary": record.summary, "checkpoints": record.checkpoints}
        elif args.command == "evaluate":
            result = cmd_evaluate(args.run_dir)
        elif args.command == "grid":
            result = cmd_grid(load_config(args.config, args.set), _grid_spec(args), args.jobs)
        elif args.command == "report":
            result = cmd_report(args.run_dir)
        else:
            result = str(cmd_attention(args.run_dir, args.case, args.slice, args.layer, args.head, args.checkpoint))
    except ConfigInvalid as exc:
        err = {"error": "ConfigInvalid", "problems": [{"path": p, "message": m} for p, m in exc.problems]}
        print(json.dumps(err, indent=1), file=sys.stderr)
        return 2
    except (ContsegError, KeyError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, indent=1), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
