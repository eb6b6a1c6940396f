"""Command-line entry point wiring the full pipeline.

Subcommands: gen-synthetic, build-graphs, train, infer, eval. Every run
writes a run_config.json that re-creates it bitwise via --from-config.
Exit codes: 0 success, 1 runtime/data error, 2 usage error. The environment
variable HGCN_THREADS caps BLAS worker threads (default 1, which keeps
outputs bitwise deterministic).
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .errors import HypersegError
from .train import (PipelineConfig, StageTrainState, prepare_data,
                    run_pipeline)


def _fraction(text: str) -> float:
    try:
        value = float(Fraction(text))
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"not a fraction: {text!r}") from e
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError("fraction must be in (0, 1]")
    return value


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="hyperseg",
        description="Weakly-supervised pseudo-label generation on superpixel "
                    "graphs and hypergraphs.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    gen = sub.add_parser("gen-synthetic", help="write a synthetic shape dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--images", type=int, default=20)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--min-shapes", type=int, default=1)
    gen.add_argument("--max-shapes", type=int, default=3)
    gen.add_argument("--from-config", default=None)

    def add_pipeline_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--superpixels", type=int, default=100,
                       help="requested superpixels per image")
        p.add_argument("--compactness", type=float, default=10.0)
        p.add_argument("--slic-iters", type=int, default=10)
        p.add_argument("--cell", type=int, default=2,
                       help="built-in feature extractor cell size")
        p.add_argument("--max-nodes", type=int, default=40000,
                       help="node cap per partition graph")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--from-config", default=None)

    build = sub.add_parser("build-graphs", help="segment, pool, and write graph bundles")
    add_pipeline_flags(build)

    train = sub.add_parser("train", help="run the three training stages")
    add_pipeline_flags(train)
    weak = train.add_mutually_exclusive_group()
    weak.add_argument("--scribbles", action="store_true", default=False,
                      help="use scribble annotations from the manifest (default)")
    weak.add_argument("--clicks", type=_fraction, default=None, metavar="FRAC",
                      help="sample clicks on this fraction of superpixels (e.g. 1/8)")
    train.add_argument("--knn", type=int, default=10)
    train.add_argument("--epochs", type=int, default=1000)
    train.add_argument("--hidden", type=int, default=256)
    train.add_argument("--dropout", type=float, default=0.5)
    train.add_argument("--val-fraction", type=float, default=None)
    train.add_argument("--stage-input", choices=("raw", "embedding"), default="raw")
    train.add_argument("--hypergraph-style", choices=("star", "pairwise"), default="star")
    train.add_argument("--resume", default=None, help="checkpoint to continue from")
    train.add_argument("--checkpoint-every", type=int, default=0,
                       help="also checkpoint every N epochs (0: stage ends only)")
    train.add_argument("--quiet", action="store_true")

    infer = sub.add_parser("infer", help="produce pseudo-labels from a checkpoint")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--manifest", required=True)
    infer.add_argument("--out", required=True)
    infer.add_argument("--from-config", default=None)

    ev = sub.add_parser("eval", help="score predictions against dense ground truth")
    ev.add_argument("--pred", required=True, help="directory of predicted PNGs")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", default=None, help="JSON report path")
    ev.add_argument("--from-config", default=None)
    subparsers.update({"gen-synthetic": gen, "build-graphs": build,
                       "train": train, "infer": infer, "eval": ev})
    return parser, subparsers


def _write_run_config(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    payload = {k: v for k, v in vars(args).items()
               if k not in ("command", "from_config")}
    doc = {"command": command, "version": __version__, "args": payload}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    weak_mode = "clicks" if getattr(args, "clicks", None) is not None else "scribbles"
    return PipelineConfig(
        n_superpixels=args.superpixels,
        compactness=args.compactness,
        slic_iters=args.slic_iters,
        feature_cell=args.cell,
        knn_k=getattr(args, "knn", 10),
        max_nodes=args.max_nodes,
        weak_mode=weak_mode,
        click_fraction=args.clicks if weak_mode == "clicks" else 0.125,
        val_fraction=getattr(args, "val_fraction", None),
        hidden=getattr(args, "hidden", 256),
        dropout=getattr(args, "dropout", 0.5),
        max_epochs=getattr(args, "epochs", 1000),
        stage_input=getattr(args, "stage_input", "raw"),
        hypergraph_style=getattr(args, "hypergraph_style", "star"),
    )


# ---------------------------------------------------------------------------
# checkpoint packing

def _pack_checkpoint(path: Path, config: PipelineConfig, seed: int, stage: int,
                     stage_complete: bool, final: bool,
                     state: StageTrainState | None, completed: dict) -> None:
    from .dataio import save_checkpoint
    arrays: dict[str, np.ndarray] = {}
    for sid, snap in completed.items():
        for name, arr in snap.items():
            arrays[f"stage{sid}.{name}"] = arr
    meta: dict = {
        "kind": "pipeline", "seed": seed, "config": config.to_dict(),
        "config_hash": config.hash(), "stage": stage,
        "stage_complete": stage_complete, "final": final,
        "completed_stages": sorted(completed),
        "stage_state": None,
    }
    if state is not None:
        meta["stage_state"] = {
            "epoch": state.epoch, "best_val": state.best_val,
            "best_epoch": state.best_epoch, "sched": state.sched_state,
            "rng": state.rng_state,
            "adam_step": state.adam_state["step_count"],
        }
        for name, arr in state.model_arrays.items():
            arrays[f"cur.{name}"] = arr
        for name, arr in state.best_snapshot.items():
            arrays[f"cur_best.{name}"] = arr
        for i, m in enumerate(state.adam_state["m"]):
            arrays[f"adam.m.{i:03d}"] = m
        for i, v in enumerate(state.adam_state["v"]):
            arrays[f"adam.v.{i:03d}"] = v
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, meta, arrays)


def _unpack_checkpoint(path: Path) -> tuple[PipelineConfig, int, dict]:
    """Returns (config, seed, resume dict for run_pipeline)."""
    from .dataio import load_checkpoint
    meta, arrays = load_checkpoint(path)
    config = PipelineConfig.from_dict(meta["config"])
    if config.hash() != meta["config_hash"]:
        raise HypersegError("checkpoint config hash mismatch")
    completed: dict[int, dict] = {}
    for sid in meta["completed_stages"]:
        prefix = f"stage{sid}."
        completed[sid] = {k[len(prefix):]: v for k, v in arrays.items()
                          if k.startswith(prefix)}
    stage_state = None
    if meta["stage_state"] is not None:
        ss = meta["stage_state"]
        n_params = sum(1 for k in arrays if k.startswith("adam.m."))
        stage_state = StageTrainState(
            epoch=ss["epoch"],
            model_arrays={k[len("cur."):]: v for k, v in arrays.items()
                          if k.startswith("cur.") and not k.startswith("cur_best.")},
            adam_state={
                "step_count": ss["adam_step"],
                "m": [arrays[f"adam.m.{i:03d}"] for i in range(n_params)],
                "v": [arrays[f"adam.v.{i:03d}"] for i in range(n_params)],
            },
            sched_state=ss["sched"], rng_state=ss["rng"],
            best_val=ss["best_val"], best_epoch=ss["best_epoch"],
            best_snapshot={k[len("cur_best."):]: v for k, v in arrays.items()
                           if k.startswith("cur_best.")},
        )
    resume = {"stage": meta["stage"] + (1 if meta["stage_complete"] else 0)
              if not meta["final"] else None,
              "completed": completed, "stage_state": stage_state}
    return config, meta["seed"], resume


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    from .synthetic import gen_synthetic_dataset
    out = Path(args.out)
    manifest = gen_synthetic_dataset(args.images, args.size, args.classes,
                                     args.seed, out, args.min_shapes,
                                     args.max_shapes)
    _write_run_config(out, "gen-synthetic", args)
    print(manifest)
    return 0


def cmd_build_graphs(args: argparse.Namespace) -> int:
    from .dataio import GraphBundle, load_manifest, save_graph_bundle
    manifest = load_manifest(args.manifest)
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(manifest, config, args.seed)
    plan = data.plan
    for p in range(plan.n_graphs):
        bundle = GraphBundle(plan, [data.spatial[p]], [None], [None])
        save_graph_bundle(out / f"partition_{p:03d}.hggb", bundle)
    summary = {
        "n_graphs": plan.n_graphs,
        "images_per_graph": plan.images_per_graph,
        "node_counts": [g.n_nodes for g in data.spatial],
    }
    (out / "plan_summary.json").write_text(json.dumps(summary, indent=2,
                                                      sort_keys=True) + "\n")
    _write_run_config(out, "build-graphs", args)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .dataio import export_pseudo_labels, load_manifest
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"

    if args.resume:
        config, seed, resume = _unpack_checkpoint(Path(args.resume))
    else:
        config, seed, resume = _config_from_args(args), args.seed, None

    completed_snaps: dict[int, dict] = dict((resume or {}).get("completed", {}))

    def checkpoint_cb(stage_id: int, stage_complete: bool,
                      state: StageTrainState | None, outputs: list) -> None:
        if stage_complete:
            completed_snaps[stage_id] = outputs[-1].model.snapshot()
            name = f"ckpt_stage{stage_id}_complete.hgck"
        else:
            name = f"ckpt_stage{stage_id}_epoch{state.epoch:05d}.hgck"
        _pack_checkpoint(ckpt_dir / name, config, seed, stage_id,
                         stage_complete, False, state, completed_snaps)

    log = None if args.quiet else print
    result = run_pipeline(manifest, config, seed, log=log,
                          checkpoint_cb=checkpoint_cb,
                          checkpoint_every=args.checkpoint_every,
                          resume=resume)

    stems = [r.image.stem for r in manifest.records]
    export_pseudo_labels(list(zip(stems, result.pseudo_labels)),
                         out / "pseudo_labels", manifest.n_classes)
    metrics = {key: {"train_miou": val} for key, val in result.stage_mious.items()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2,
                                                 sort_keys=True) + "\n")
    traces = {f"L{i + 1}": so.trace for i, so in enumerate(result.stage_outputs)}
    (out / "losses.json").write_text(json.dumps(traces, indent=2,
                                                sort_keys=True) + "\n")
    for sid in (1, 2, 3):
        completed_snaps.setdefault(sid, result.stage_outputs[sid - 1].model.snapshot())
    _pack_checkpoint(out / "checkpoint.hgck", config, seed, 3, True, True,
                     None, completed_snaps)
    _write_run_config(out, "train", args)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    from .dataio import export_pseudo_labels, load_manifest
    config, seed, resume = _unpack_checkpoint(Path(args.checkpoint))
    if sorted(resume["completed"]) != [1, 2, 3]:
        raise HypersegError("checkpoint does not contain all trained stages")
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    result = run_pipeline(manifest, config, seed, resume=resume)
    stems = [r.image.stem for r in manifest.records]
    export_pseudo_labels(list(zip(stems, result.pseudo_labels)),
                         out / "pseudo_labels", manifest.n_classes)
    metrics = {key: {"train_miou": val} for key, val in result.stage_mious.items()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2,
                                                 sort_keys=True) + "\n")
    _write_run_config(out, "infer", args)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .dataio import load_annotation, load_manifest
    from .metrics import evaluate_miou
    manifest = load_manifest(args.manifest)
    pred_dir = Path(args.pred)
    preds, gts = [], []
    for rec in manifest.records:
        if rec.annotation is None:
            continue
        pred_path = pred_dir / f"{rec.image.stem}.png"
        if not pred_path.is_file():
            raise HypersegError(f"missing prediction file: {pred_path}")
        preds.append(load_annotation(pred_path, "dense", manifest.n_classes))
        gts.append(load_annotation(rec.annotation, "dense", manifest.n_classes))
    if not gts:
        raise HypersegError("manifest has no dense ground-truth annotations")
    report = evaluate_miou(preds, gts, manifest.n_classes, manifest.ignore_index)
    print(f"{'class':>6}  IoU")
    for idx, iou in enumerate(report["per_class_iou"]):
        shown = "  (absent)" if iou is None else f"  {iou:.4f}"
        print(f"{idx:>6}{shown}")
    print(f"mIoU: {report['miou']:.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


_COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "from_config", None):
        stored = json.loads(Path(args.from_config).read_text())
        if stored.get("command") != args.command:
            parser.error(f"--from-config holds a {stored.get('command')!r} run")
        # stored args become defaults; explicit flags still win on reparse
        subparsers[args.command].set_defaults(**stored["args"])
        args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (HypersegError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
