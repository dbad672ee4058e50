"""Command-line entry point: ``taskgraph <subcommand> ...``.

Exit codes: 0 success, 1 unexpected error, 2 usage/config error, 3 missing
file, 4 format error, 5 dimension mismatch, 6 non-finite numerics or failed
gradient check, 7 undefined statistic / empty input, 8 dangling feature row.

Every command emits a run manifest (command, arguments, seed, SHA-256 of
inputs, outputs, wall time) as one JSON line on stderr, and also to
``--manifest PATH`` when given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    ABLATIONS,
    CLASSIFIER_VARIANTS,
    ablation_config,
    classifier_config,
    fit_class_preference,
    pick_best_class_confidences,
)
from .checkpoint import load_model
from .data import dataset_stats, load_dataset, save_dataset
from .errors import ConfigError, DimensionMismatchError, TaskGraphError
from .evaluation import context_analysis, evaluate, score_dataset
from .gradcheck import gradcheck
from .model import FUSION_MODES, ModelConfig
from .synthetic import SynthConfig, generate_dataset
from .training import TrainConfig, Trainer, train

EXIT_MISSING_FILE = 3
EXIT_GRADCHECK = 6
GRADCHECK_TOLERANCE = 1e-4


def fmt(value) -> str:
    return "nan" if value is None else f"{value:.6g}"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects the run manifest for one command."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.start = time.perf_counter()
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def input(self, path):
        if path is not None and Path(path).exists():
            self.inputs[str(path)] = sha256(path)
        return path

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def manifest(self) -> dict:
        config = {k: v for k, v in vars(self.args).items() if k not in ("func", "manifest")}
        return {
            "command": self.args.command,
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_ms": round((time.perf_counter() - self.start) * 1000.0, 3),
        }


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def _load(run: Run, scenes, features=None, require_features=True):
    run.input(scenes)
    ds = load_dataset(scenes, features, require_features=require_features)
    if ds.feature_store_path is not None:
        run.input(ds.feature_store_path)
    return ds


def _print_report(report) -> None:
    for task, r in sorted(report.per_task.items()):
        print(f"task {task}: AP@0.5 {fmt(r.ap)}  gt {r.gt}  tp {r.tp}  fp {r.fp}")
    for task in report.skipped_tasks:
        print(f"task {task}: no ground truth, excluded")
    print(f"mAP@0.5 {fmt(report.map)}")


# --- subcommands ---------------------------------------------------------------


def cmd_synth(args, run: Run) -> int:
    cfg = SynthConfig(seed=args.seed, train_scenes=args.train_scenes, test_scenes=args.test_scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in generate_dataset(cfg).items():
        scenes = out / f"{name}.json"
        save_dataset(ds, scenes)
        run.output(scenes)
        run.output(scenes.with_suffix(".ftrs"))
        print(f"{name}: {len(ds.scenes)} scenes, "
              f"{sum(len(s) for s in ds.scenes)} objects -> {scenes}")
    return 0


def cmd_stats(args, run: Run) -> int:
    ds = _load(run, args.scenes, args.features, require_features=False)
    report = dataset_stats(ds)
    for task, st in report.items():
        print(f"task {task}: categories {st.selected_categories}  instances {st.instances_of_selected}"
              f"  chosen {st.chosen}  intra-class {st.intra_class}  consistency {fmt(st.consistency)}")
    if args.out:
        write_json(run.output(args.out), {str(t): st.to_json() for t, st in report.items()})
    return 0


def model_config_from_args(args, ds) -> tuple[ModelConfig, bool]:
    base = ModelConfig(K=ds.K, F=ds.F, M=ds.M, H=args.hidden, T=args.steps,
                       readout_hidden=args.readout_hidden)
    per_task = args.per_task
    if args.ablation:
        base, ablation_per_task = ablation_config(base, args.ablation)
        per_task = per_task or ablation_per_task
    overrides = {}
    if args.no_class_input:
        overrides["use_class_input"] = False
    if args.no_visual_input:
        overrides.update(use_visual_input=False, use_aux_head=False, fusion_mode="graph_only")
    if args.bbox_input:
        overrides["use_bbox_input"] = True
    if args.no_graph:
        overrides["use_graph"] = False
    if args.no_weighted_aggregation:
        overrides["use_weighted_aggregation"] = False
    if args.no_aux_head:
        overrides.update(use_aux_head=False, fusion_mode="graph_only")
    if args.fusion:
        overrides["fusion_mode"] = args.fusion
    return replace(base, **overrides), per_task


def train_config_from_args(args, per_task: bool) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed,
                       optimizer=args.optimizer, per_task=per_task,
                       clip_norm=None if args.no_clip else args.clip_norm)


def cmd_train(args, run: Run) -> int:
    ds = _load(run, args.scenes, args.features)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    trainer = None
    if args.resume:
        run.input(args.resume)
        trainer = Trainer.from_state(args.resume)
        train_cfg = replace(trainer.train_config, epochs=args.epochs)
        trainer.train_config = train_cfg
        model_cfg = trainer.model.config
    else:
        model_cfg, per_task = model_config_from_args(args, ds)
        train_cfg = train_config_from_args(args, per_task)
        log_path.write_text("")
    trainer = train(ds, model_cfg, train_cfg, out_path=out, log_path=log_path, trainer=trainer)
    run.output(out)
    run.output(out.with_suffix(".bin"))
    run.output(log_path)
    for rec in trainer.history:
        print(f"epoch {rec['epoch']}: mean_loss {fmt(rec['mean_loss'])}")
    return 0


def _check_model_against(model, ds) -> None:
    if model.config.M != ds.M:
        raise DimensionMismatchError(f"checkpoint M={model.config.M} but dataset M={ds.M}")


def cmd_eval(args, run: Run) -> int:
    ds = _load(run, args.scenes, args.features)
    model, _, _ = load_model(run.input(args.checkpoint), expected_F=ds.F, expected_K=ds.K)
    _check_model_against(model, ds)
    report = evaluate(score_dataset(lambda s: model.score(s).final, ds), ds)
    _print_report(report)
    if args.out:
        write_json(run.output(args.out), report.to_json())
    if args.pr_dir:
        Path(args.pr_dir).mkdir(parents=True, exist_ok=True)
        for p in report.write_pr_csv(args.pr_dir):
            run.output(p)
    return 0


def cmd_baseline(args, run: Run) -> int:
    if args.method == "pick-best-class":
        train_ds = _load(run, args.train, args.train_features, require_features=False)
        test_ds = _load(run, args.test, args.test_features, require_features=False)
        table = fit_class_preference(train_ds)
        confs = score_dataset(lambda s: pick_best_class_confidences(s, table, test_ds.M), test_ds)
    else:
        train_ds = _load(run, args.train, args.train_features)
        test_ds = _load(run, args.test, args.test_features)
        base = ModelConfig(K=train_ds.K, F=train_ds.F, M=train_ds.M, H=args.hidden,
                           readout_hidden=args.readout_hidden)
        cfg, per_task = classifier_config(base, args.variant)
        tc = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed, per_task=per_task)
        model = train(train_ds, cfg, tc).model
        confs = score_dataset(lambda s: model.score(s).final, test_ds)
    report = evaluate(confs, test_ds)
    _print_report(report)
    if args.out:
        write_json(run.output(args.out), report.to_json())
    return 0


def cmd_gradcheck(args, run: Run) -> int:
    result = gradcheck(seed=args.seed, instances=args.instances)
    for name, err in result.per_param.items():
        print(f"{name}: {fmt(err)}")
    print(f"max_rel_err {fmt(result.max_rel_err)}")
    if args.out:
        write_json(run.output(args.out), {"max_rel_err": result.max_rel_err,
                                          "per_param": result.per_param})
    return 0 if result.max_rel_err < GRADCHECK_TOLERANCE else EXIT_GRADCHECK


def cmd_analyze_context(args, run: Run) -> int:
    ds = _load(run, args.scenes, args.features)
    model, _, _ = load_model(run.input(args.checkpoint), expected_F=ds.F, expected_K=ds.K)
    _check_model_against(model, ds)
    if not model.config.use_graph:
        raise ConfigError("context analysis needs a graph model")

    def states(scene, task):
        st = model.states(scene, task=task)
        return st.h0, st.hT

    result = context_analysis(states, ds, k=args.k)
    for task, acc in sorted(result.items()):
        print(f"task {task}: h0_acc {fmt(acc['h0_acc'])}  hT_acc {fmt(acc['hT_acc'])}")
    if args.out:
        write_json(run.output(args.out), {str(t): acc for t, acc in result.items()})
    return 0


# --- parser --------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", type=int, default=128, help="node state size H")
    p.add_argument("--steps", type=int, default=3, help="propagation rounds T")
    p.add_argument("--readout-hidden", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskgraph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--manifest", help="also write the run manifest JSON here")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic context dataset")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-scenes", type=int, default=SynthConfig.train_scenes)
    p.add_argument("--test-scenes", type=int, default=SynthConfig.test_scenes)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="per-task dataset statistics")
    p.add_argument("--scenes", required=True)
    p.add_argument("--features")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the graph scorer")
    p.add_argument("--scenes", required=True)
    p.add_argument("--features")
    p.add_argument("--out", required=True, help="checkpoint manifest path (.json)")
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--per-task", action="store_true", help="one independent model per task")
    p.add_argument("--resume", help="training-state checkpoint (<out>.state.json) to continue")
    p.add_argument("--ablation", choices=ABLATIONS, help="preset from the ablation ladder")
    p.add_argument("--no-class-input", action="store_true")
    p.add_argument("--no-visual-input", action="store_true")
    p.add_argument("--bbox-input", action="store_true")
    p.add_argument("--no-graph", action="store_true")
    p.add_argument("--no-weighted-aggregation", action="store_true")
    p.add_argument("--no-aux-head", action="store_true")
    p.add_argument("--fusion", choices=FUSION_MODES)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AP@0.5 of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--features")
    p.add_argument("--out", help="results JSON")
    p.add_argument("--pr-dir", help="write per-task PR curves as CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="evaluate a reference method")
    p.add_argument("method", choices=("pick-best-class", "classifier"))
    p.add_argument("--train", required=True)
    p.add_argument("--train-features")
    p.add_argument("--test", required=True)
    p.add_argument("--test-features")
    p.add_argument("--out")
    p.add_argument("--variant", choices=CLASSIFIER_VARIANTS, default="joint")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze-context", help="h0 vs hT nearest-neighbour category prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--features")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_context)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args)
    try:
        code = args.func(args, run)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_MISSING_FILE
    except TaskGraphError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = exc.exit_code
    manifest = run.manifest()
    manifest["exit_code"] = code
    print(json.dumps(manifest, default=str), file=sys.stderr)
    if args.manifest:
        write_json(args.manifest, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
