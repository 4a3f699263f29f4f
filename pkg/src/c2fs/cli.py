"""Command-line entry point: ``c2fs <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .calibrate import CalibrationConfig, calibrate_support
from .config import ConfigError, RunConfig
from .data import (DatasetFormatError, DatasetValidationError, generate_synthetic, load_dataset,
                   write_dataset)
from .evaluate import (AblationGrid, AblationRow, evaluate, format_table, layer_probe,
                       run_ablation, sample_episodes)
from .model import build_model
from .repository import FeatureRepository, build_repository
from .substrate import load_tensors
from .trainer import Trainer

logger = logging.getLogger("c2fs")

CONFIG_NAME = "config.toml"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _write_json(obj, out_dir: Optional[str], name: str) -> None:
    text = json.dumps(obj, indent=2)
    print(text)
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(text + "\n")


def _echo_config(cfg: RunConfig, out_dir: Optional[str]) -> None:
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        cfg.write(d / CONFIG_NAME)


def _load_config(path: Optional[str], near: Optional[str] = None) -> RunConfig:
    """Explicit --config wins; otherwise look for the run's echoed config next to ``near``."""
    if path:
        return RunConfig.load(path)
    if near:
        cand = Path(near).resolve().parent / CONFIG_NAME
        if cand.exists():
            return RunConfig.load(cand)
    raise CliError(f"--config is required (no {CONFIG_NAME} found next to {near})")


def _datasets(cfg: RunConfig, which: str):
    d = cfg.data
    path = d.train_path if which == "train" else d.test_path
    if path:
        return load_dataset(path)
    count = d.train_per_fine if which == "train" else d.test_per_fine
    return generate_synthetic(cfg.synth_config(), count, which)


def _model_from_checkpoint(cfg: RunConfig, checkpoint: str, input_shape, coarse_count):
    model = build_model(cfg.encoder_config(input_shape, coarse_count), cfg.seed)
    tensors = load_tensors(checkpoint)
    model.load_tensors({k: v for k, v in tensors.items()
                        if not k.startswith(("optim.", "queue.", "trainer."))})
    model.eval()
    return model


# ---------------------------------------------------------------- commands


def cmd_data_synth(args) -> int:
    cfg = RunConfig.load(args.config)
    split = args.split
    count = cfg.data.train_per_fine if split == "train" else cfg.data.test_per_fine
    ds = generate_synthetic(cfg.synth_config(), count, split)
    write_dataset(args.out, ds)
    print(json.dumps({"out": args.out, "examples": len(ds), "shape": list(ds.sample_shape),
                      "coarse_count": ds.hierarchy.coarse_count,
                      "fine_count": ds.hierarchy.fine_count}))
    return 0


def cmd_data_validate(args) -> int:
    ds = load_dataset(args.path)
    counts = np.bincount(ds.coarse, minlength=ds.hierarchy.coarse_count)
    print(json.dumps({"path": args.path, "examples": len(ds), "shape": list(ds.sample_shape),
                      "coarse_count": ds.hierarchy.coarse_count,
                      "fine_count": ds.hierarchy.fine_count,
                      "per_coarse": counts.tolist(), "valid": True}))
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    _echo_config(cfg, args.out_dir)
    ds = _datasets(cfg, "train")
    model = build_model(cfg.encoder_config(ds.sample_shape, ds.hierarchy.coarse_count), cfg.seed)
    trainer = Trainer(model, cfg.train_config(), ds, Path(args.out_dir))
    if args.resume:
        trainer.load(args.resume)
    t0 = time.time()
    trainer.fit(on_epoch=lambda e: print(json.dumps(e), file=sys.stderr) if args.verbose else None)
    final = Path(args.out_dir) / "model.c2fsckpt"
    trainer.save(final)
    print(json.dumps({"checkpoint": str(final), "epochs": trainer.epoch,
                      "seconds": round(time.time() - t0, 2),
                      "final": trainer.log[-1] if trainer.log else None}))
    return 0


def cmd_extract(args) -> int:
    cfg = _load_config(args.config, args.checkpoint)
    ds = load_dataset(args.data) if args.data else _datasets(cfg, "train")
    model = _model_from_checkpoint(cfg, args.checkpoint, ds.sample_shape, ds.hierarchy.coarse_count)
    repo = build_repository(ds, model)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    repo.save(args.out)
    print(json.dumps({"out": args.out, "entries": len(repo), "dim": repo.dim,
                      "coarse_count": repo.coarse_count}))
    return 0


def cmd_calibrate(args) -> int:
    repo = FeatureRepository.load(args.repo)
    doc = json.loads(Path(args.support).read_text())
    try:
        emb = np.asarray(doc["embeddings"], dtype=np.float64)
        labels = np.asarray(doc["labels"], dtype=np.int64)
    except KeyError as exc:
        raise CliError(f"{args.support}: missing field {exc.args[0]!r}") from exc
    true_coarse = None
    if args.true_coarse:
        if "coarse" not in doc:
            raise CliError(f"{args.support}: --true-coarse needs a 'coarse' mapping")
        true_coarse = {int(k): int(v) for k, v in doc["coarse"].items()}
    calib = CalibrationConfig(k=args.k, m=args.m, n=args.n, use_true_coarse=args.true_coarse)
    aug = calibrate_support(emb, labels, repo, calib, true_coarse)
    out = {"config": asdict(calib), "classes": []}
    for y in aug.classes:
        p = aug.prototypes[y]
        out["classes"].append({"fine": y, "assigned_coarse": p.assigned_coarse,
                               "prototype": p.vector.tolist(),
                               "additional": aug.additional[y].tolist(),
                               "rounds": aug.rounds[y]})
    _write_json(out, args.out_dir, "calibration.json")
    return 0


def _eval_features(cfg, args):
    ds = load_dataset(args.data) if args.data else _datasets(cfg, "test")
    model = _model_from_checkpoint(cfg, args.checkpoint, ds.sample_shape, ds.hierarchy.coarse_count)
    return ds, model


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.checkpoint)
    ds, model = _eval_features(cfg, args)
    repo = FeatureRepository.load(args.repo) if args.repo else None
    if repo is None and not args.no_calibration:
        raise CliError("--repo is required unless --no-calibration is given")
    way = cfg.evaluation.way if args.way is None else (args.way if args.way == "all" else int(args.way))
    shot = cfg.evaluation.shot if args.shot is None else args.shot
    count = cfg.evaluation.episodes if args.episodes is None else args.episodes
    calib = None if args.no_calibration else cfg.calibration_config()
    episodes = sample_episodes(ds.fine, way, shot, cfg.evaluation.queries_per_class, count,
                               cfg.evaluation.episode_seed)
    report = evaluate(model, repo, episodes, calib, dataset=ds, head=cfg.calibration.head)
    _echo_config(cfg, args.out_dir)
    out = {"way": way, "shot": shot, "calibration": calib is not None, **report.as_dict()}
    _write_json(out, args.out_dir, "eval.json")
    return 0 if report.episode_count else 1


def cmd_probe(args) -> int:
    cfg = _load_config(args.config, args.checkpoint)
    if args.data:
        test = load_dataset(args.data)
        train = load_dataset(args.probe_train) if args.probe_train else None
    else:
        test = _datasets(cfg, "test")
        train = None
    if train is None:
        if args.data:
            # split the labeled file in half per fine class
            idx_tr, idx_te = [], []
            for c in np.unique(test.fine):
                idx = np.flatnonzero(test.fine == c)
                idx_tr.extend(idx[: len(idx) // 2])
                idx_te.extend(idx[len(idx) // 2:])
            train, test = test.subset(np.array(idx_tr)), test.subset(np.array(idx_te))
        else:
            train = generate_synthetic(cfg.synth_config(), cfg.data.test_per_fine, "probe")
    model = _model_from_checkpoint(cfg, args.checkpoint, test.sample_shape, test.hierarchy.coarse_count)
    res = layer_probe(model, train, test)
    _write_json(res, args.out_dir, "probe.json")
    return 0


def _grid_from_config(path: str):
    import tomli
    raw = tomli.loads(Path(path).read_text())
    body = raw.get("ablation", {})
    cfg = RunConfig.from_dict(raw, extra_sections=("ablation",))
    allowed = {"rows", "train_seeds", "episodes", "way", "shot"}
    bad = sorted(set(body) - allowed)
    if bad:
        raise ConfigError(f"unknown key ablation.{bad[0]}")
    rows = []
    for i, r in enumerate(body.get("rows", [])):
        r = dict(r)
        if "name" not in r:
            raise ConfigError(f"ablation.rows[{i}]: missing name")
        calib = None
        over = {k: r.pop(k) for k in ("k", "m", "n", "use_true_coarse", "pool") if k in r}
        if over:
            calib = replace(cfg.calibration_config(), **over)
        try:
            rows.append(AblationRow(calibration=calib, **r))
        except TypeError as exc:
            raise ConfigError(f"ablation.rows[{i}]: {exc}") from exc
    if not rows:
        raise ConfigError("ablation.rows: at least one row is required")
    train, test = _datasets(cfg, "train"), _datasets(cfg, "test")
    ev = cfg.evaluation
    grid = AblationGrid(rows, train, test,
                        cfg.encoder_config(train.sample_shape, train.hierarchy.coarse_count),
                        cfg.train_config(), alpha=cfg.training.alpha,
                        way=body.get("way", ev.way), shot=body.get("shot", ev.shot),
                        queries=ev.queries_per_class, episodes=body.get("episodes", ev.episodes),
                        episode_seed=ev.episode_seed,
                        train_seeds=tuple(body.get("train_seeds", [cfg.seed])),
                        calibration=cfg.calibration_config())
    return cfg, grid


def cmd_ablate(args) -> int:
    cfg, grid = _grid_from_config(args.grid)
    _echo_config(cfg, args.out_dir)
    rows = run_ablation(grid)
    table = format_table(rows)
    doc = [{**{k: v for k, v in r.items() if k != "report"}, **r["report"].as_dict()} for r in rows]
    _write_json(doc, args.out_dir, "ablation.json")
    print(table)
    if args.out_dir:
        (Path(args.out_dir) / "ablation.txt").write_text(table + "\n")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="c2fs", description="Coarse-to-fine few-shot toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    data = sub.add_parser("data", help="synthesize or validate dataset files")
    dsub = data.add_subparsers(dest="data_command", required=True, metavar="action")
    s = dsub.add_parser("synth", help="write a synthetic dataset file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train", choices=("train", "test", "probe"))
    s.set_defaults(func=cmd_data_synth)
    v = dsub.add_parser("validate", help="check a dataset file")
    v.add_argument("path")
    v.set_defaults(func=cmd_data_validate)

    t = sub.add_parser("train", help="train a model under coarse supervision")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="embed a coarse-labeled set into a feature repository")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset file (default: the config's training data)")
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.set_defaults(func=cmd_extract)

    c = sub.add_parser("calibrate", help="debias support prototypes against a repository")
    c.add_argument("--repo", required=True)
    c.add_argument("--support", required=True, help="JSON with embeddings, labels[, coarse]")
    c.add_argument("--k", type=int, default=10)
    c.add_argument("--m", type=int, default=20)
    c.add_argument("--n", type=int, default=100)
    c.add_argument("--true-coarse", action="store_true")
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_calibrate)

    ev = sub.add_parser("eval", help="episodic few-shot evaluation")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--repo")
    ev.add_argument("--data", help="fine-labeled test file (default: the config's test data)")
    ev.add_argument("--way", help="integer or 'all'")
    ev.add_argument("--shot", type=int)
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--no-calibration", action="store_true")
    ev.add_argument("--config")
    ev.add_argument("--out-dir")
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="fine-label linear probes of every layer")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", help="fine-labeled file; split in half unless --probe-train is given")
    pr.add_argument("--probe-train")
    pr.add_argument("--config")
    pr.add_argument("--out-dir")
    pr.set_defaults(func=cmd_probe)

    ab = sub.add_parser("ablate", help="run an ablation grid")
    ab.add_argument("--grid", required=True)
    ab.add_argument("--out-dir")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CliError, DatasetFormatError, DatasetValidationError) as exc:
        print(f"c2fs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"c2fs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
