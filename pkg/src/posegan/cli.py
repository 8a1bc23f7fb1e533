"""Command-line entry point: ``posegan <subcommand> ...``.

Configuration resolves as defaults <- ``--config`` JSON file <- flags <-
``--set section.key=value`` overrides. Unknown keys are rejected, and the
resolved configuration is written as ``config.json`` next to every output.

Exit status: 0 success, 1 runtime failure, 2 usage error, 3 invalid input.
Failures print one ``error: <category>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, PoseGanError, ValidationError

log = logging.getLogger("posegan")


# --- configuration ---------------------------------------------------------------

def default_config() -> dict:
    from .data import AugmentParams
    from .evaluation import SegmentationParams
    from .experiments import ClassifierConfig
    from .trainer import TrainConfig

    return {
        "seed": 0,
        "datagen": {"classes": 6, "instances": 8, "n_yaw": 6, "n_pitch": 1, "image_size": 64,
                    "train_fraction": 0.75, "instance_offset": 0},
        "train": TrainConfig().to_dict(),
        "segmentation": asdict(SegmentationParams()),
        "classifier": asdict(ClassifierConfig()),
        "augment": asdict(AugmentParams()),
    }


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in out:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ValidationError(f"config key {where!r} must be an object")
            out[k] = merge_config(out[k], v, where)
        else:
            out[k] = v
    return out


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except ValueError:
            val = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return out


def resolve_config(args, flag_overrides: dict) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {args.config} not found") from None
        except ValueError as e:
            raise ValidationError(f"config file {args.config}: {e}") from None
        cfg = merge_config(cfg, file_cfg)
    cfg = merge_config(cfg, _prune(flag_overrides))
    cfg = merge_config(cfg, _parse_set(getattr(args, "set", None)))
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["train"]["seed"] = cfg["seed"]
    return cfg


def _prune(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            v = _prune(v)
            if v:
                out[k] = v
        elif v is not None:
            out[k] = v
    return out


def echo_config(cfg: dict, out_dir, command: str, argv) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, "argv": list(argv), "config": cfg}, indent=1))


def _build(cls, d: dict):
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except TypeError as e:
        raise ValidationError(f"bad {cls.__name__} settings: {e}") from None


# --- subcommands ---------------------------------------------------------------------

def cmd_datagen(args, cfg):
    from .pose_space import make_vocabulary
    from .turntable import RenderConfig, generate_dataset

    g = cfg["datagen"]
    vocab = make_vocabulary(g["n_yaw"], g["n_pitch"])
    rc = RenderConfig.for_vocabulary(vocab, image_size=g["image_size"])
    full = generate_dataset(args.out, g["classes"], g["instances"], vocab, rc, seed=cfg["seed"],
                            train_fraction=g["train_fraction"], instance_offset=g["instance_offset"])
    echo_config(cfg, args.out, "datagen", args.argv)
    return {"images": len(full), "instances": len(full.instances()), "out": str(Path(args.out).resolve())}


def _training_manifest(args):
    from .data import apply_availability, load_availability, load_manifest

    m = load_manifest(args.manifest)
    if getattr(args, "availability", None):
        m = apply_availability(m, load_availability(args.availability, m.class_names, m.vocabulary.n_discrete))
    return m


def cmd_train(args, cfg):
    from .trainer import TrainConfig, fit

    tc = _build(TrainConfig, cfg["train"])
    m = _training_manifest(args)
    echo_config(cfg, args.out, "train", args.argv)
    ckpt = fit(tc, m, args.out)
    return {"checkpoint": str(Path(args.out, "checkpoint").resolve()), "epochs": ckpt.epoch,
            "loss_log": str(Path(args.out, "loss_log.csv").resolve())}


def cmd_finetune(args, cfg):
    from .trainer import finetune, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    m = _training_manifest(args)
    over = {"total_epochs": cfg["train"]["total_epochs"] if args.epochs is None else args.epochs,
            "seed": cfg["seed"]}
    if args.lr is not None:
        over["lr0"] = args.lr
    echo_config(cfg, args.out, "finetune", args.argv)
    out = finetune(ckpt, m, args.out, **over)
    return {"checkpoint": str(Path(args.out, "checkpoint").resolve()), "lr0": out.config.lr0,
            "epochs": out.config.total_epochs}


def cmd_synthesize(args, cfg):
    from .data import AvailabilityMatrix, load_availability, load_manifest, write_manifest
    from .imageio import load_image
    from .synthesis import rebalance_missing, sweep_grid, synthesize_additional
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    result = {}
    if args.sweep_image:
        ny, _, np_ = args.sweep_steps.partition("x")
        img = load_image(args.sweep_image)
        out_png = args.sweep_out or str(Path(args.sweep_image).with_suffix(".sweep.png"))
        grid = sweep_grid(ckpt, img, int(ny), int(np_ or 1), out_png)
        result["sweep"] = {"path": out_png, "shape": list(grid.shape)}
    if args.manifest:
        if not args.out_manifest:
            raise InvalidArgument("--out-manifest is required with --manifest")
        m = load_manifest(args.manifest)
        matrix = (load_availability(args.availability, m.class_names, m.vocabulary.n_discrete)
                  if args.availability else AvailabilityMatrix.full(m.n_classes, m.vocabulary.n_discrete))
        out_path = Path(args.out_manifest)
        img_dir = out_path.parent / (out_path.stem + "_images")
        before = len(m)
        m = rebalance_missing(ckpt, m, matrix, img_dir)
        n_rebalanced = len(m) - before
        if args.offsets is not None:
            offsets = [float(o) for o in args.offsets.split(",") if o.strip()]
            m = synthesize_additional(ckpt, m, offsets, img_dir)
        write_manifest(m, out_path)
        echo_config(cfg, out_path.parent, "synthesize", args.argv)
        result.update(manifest=str(out_path.resolve()), rows=len(m), rebalanced=n_rebalanced,
                      additional=len(m) - before - n_rebalanced)
    if not result:
        raise InvalidArgument("nothing to do: give --manifest and/or --sweep-image")
    return result


def cmd_evaluate(args, cfg):
    from .data import load_manifest
    from .evaluation import SegmentationParams, evaluate_model, identity_baseline
    from .trainer import load_checkpoint
    from .turntable import RenderOracle

    seg = _build(SegmentationParams, cfg["segmentation"])
    m = load_manifest(args.manifest)
    oracle = RenderOracle.from_dataset(args.oracle)
    out = {}
    if args.checkpoint:
        out["model"] = evaluate_model(load_checkpoint(args.checkpoint), m, oracle, seg).to_dict()
    if args.baseline or not args.checkpoint:
        out["identity"] = evaluate_model(identity_baseline, m, oracle, seg).to_dict()
    if args.out:
        echo_config(cfg, args.out, "evaluate", args.argv)
        Path(args.out, "metrics.json").write_text(json.dumps(out, indent=1))
    return out


def cmd_experiment(args, cfg):
    from .experiments import ClassifierConfig, ExperimentPlan, run_plan

    try:
        plan_d = json.loads(Path(args.plan).read_text())
    except FileNotFoundError:
        raise ValidationError(f"plan file {args.plan} not found") from None
    except ValueError as e:
        raise ValidationError(f"plan file {args.plan}: {e}") from None
    if "classifier" not in plan_d:
        plan_d["classifier"] = cfg["classifier"]
    if args.out:
        plan_d["out_dir"] = str(Path(args.out).resolve())
    plan = ExperimentPlan.from_dict(plan_d, base_dir=Path(args.plan).parent)
    if not isinstance(plan.classifier, ClassifierConfig):
        raise ValidationError("bad classifier settings")
    echo_config({**cfg, "plan": plan.to_dict()}, plan.out_dir, "experiment", args.argv)
    res = run_plan(plan)
    return {"summary": res.summary, "deltas": res.deltas, "sweep": res.sweep, "sizes": res.sizes,
            "table": str(Path(plan.out_dir, "accuracy_table.csv").resolve())}


def cmd_rank(args, cfg):
    from .data import load_manifest
    from .evaluation import rank_by_pose
    from .trainer import load_checkpoint

    top = rank_by_pose(load_checkpoint(args.checkpoint), load_manifest(args.manifest), args.pose, args.k)
    return {"pose": args.pose, "top": [{"image": r.image_path, "instance": r.instance_id, "true_pose": r.pose_label,
                                        "probability": p} for r, p in top]}


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global random seed")
    common.add_argument("--config", help="JSON config file merged over the defaults")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key, e.g. train.arch.base_width=32 (repeatable)")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--quiet", action="store_true", help="print nothing on success")
    mode.add_argument("--json", action="store_true", help="print the result as JSON")

    p = argparse.ArgumentParser(prog="posegan", description="Pose transformation GAN toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", parents=[common], help="render a turntable dataset")
    s.add_argument("--classes", type=int)
    s.add_argument("--instances", type=int, help="instances per class")
    s.add_argument("--n-yaw", type=int)
    s.add_argument("--n-pitch", type=int)
    s.add_argument("--size", type=int, dest="image_size")
    s.add_argument("--train-fraction", type=float)
    s.add_argument("--instance-offset", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="fit the pose transformation GAN")
    s.add_argument("--manifest", required=True)
    s.add_argument("--availability", help="JSON availability matrix applied to the manifest")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--n-critic", type=int)
    s.add_argument("--base-width", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("finetune", parents=[common], help="continue training on another manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--availability")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float, help="defaults to a tenth of the checkpoint's learning rate")
    s.add_argument("--out", required=True)

    s = sub.add_parser("synthesize", parents=[common], help="rebalance a manifest or emit a pose sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--availability")
    s.add_argument("--out-manifest")
    s.add_argument("--offsets", help="comma-separated decimal yaw coordinates, e.g. 0.5,1.5")
    s.add_argument("--sweep-image")
    s.add_argument("--sweep-steps", default="11x1", help="YAWxPITCH steps")
    s.add_argument("--sweep-out")

    s = sub.add_parser("evaluate", parents=[common], help="masked MSE / PSNR against the renderer")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--oracle", required=True, help="dataset directory written by datagen")
    s.add_argument("--baseline", action="store_true", help="also report the identity baseline")
    s.add_argument("--out")

    s = sub.add_parser("experiment", parents=[common], help="run a recognition experiment plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--out")

    s = sub.add_parser("rank", parents=[common], help="top-k images for a pose by critic probability")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--pose", type=int, required=True)
    s.add_argument("--k", type=int, default=8)
    return p


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "finetune": cmd_finetune, "synthesize": cmd_synthesize,
            "evaluate": cmd_evaluate, "experiment": cmd_experiment, "rank": cmd_rank}


def _flag_overrides(args) -> dict:
    g = vars(args)
    if args.command == "datagen":
        return {"datagen": {k: g.get(k) for k in ("classes", "instances", "n_yaw", "n_pitch", "image_size",
                                                 "train_fraction", "instance_offset")}}
    if args.command == "train":
        return {"train": {"total_epochs": g.get("epochs"), "batch_size": g.get("batch_size"), "lr0": g.get("lr"),
                          "n_critic": g.get("n_critic"), "checkpoint_every": g.get("checkpoint_every"),
                          "arch": {"base_width": g.get("base_width")}}}
    return {}


def _print(result, args) -> None:
    if args.quiet:
        return
    if args.json:
        print(json.dumps(result, indent=1, default=str))
        return
    if args.command == "evaluate":
        for name, rep in result.items():
            print(f"{name:<10} mean MSE {rep['mean_mse']:9.2f}  mean PSNR {rep['mean_psnr']:6.2f} dB"
                  f"  ({rep['n_instances']} instances, {rep['n_pairs']} pairs)")
        return
    for k, v in result.items():
        print(f"{k}: {json.dumps(v, default=str) if isinstance(v, (dict, list)) else v}")


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING if (args.quiet or args.json) else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args, _flag_overrides(args))
        result = COMMANDS[args.command](args, cfg)
    except (ValidationError, InvalidArgument) as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 3
    except PoseGanError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(f"error: runtime: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    _print(result, args)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
