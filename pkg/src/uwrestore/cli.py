"""Command-line surface: manifests, training, inference, evaluation, costing.

Configuration comes from an optional YAML file (sections ``model``, ``train``,
``data``) overlaid with command-line flags; the data root may also be set via
the ``UWRESTORE_DATA_ROOT`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from . import data as data_mod
from .checkpoint import load_checkpoint
from .data import Manifest, load_image, save_image
from .model import ModelConfig, Restorer, baseline_config, count_macs, count_params
from .prior import channel_means, compute_prior
from .training import TrainConfig, desk_preset, evaluate, restore_image, train

ENV_DATA_ROOT = "UWRESTORE_DATA_ROOT"


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise SystemExit(f"config file {path} must hold a mapping")
    return cfg


def _model_config(file_cfg: dict, args) -> ModelConfig:
    overrides = dict(file_cfg.get("model", {}))
    for key in ("embed_channels", "heads", "dr_units", "maq_blocks"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return ModelConfig.from_dict({**ModelConfig().to_dict(), **overrides})


def _train_config(file_cfg: dict, args) -> TrainConfig:
    base = desk_preset() if getattr(args, "desk", False) else TrainConfig()
    overrides = dict(file_cfg.get("train", {}))
    for key in ("epochs", "batch_size", "crop", "seed", "max_steps"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    for key, value in overrides.items():
        if not hasattr(base, key):
            raise SystemExit(f"unknown train config key {key!r}")
        setattr(base, key, value)
    return base


def _data_root(file_cfg: dict, args) -> str:
    if getattr(args, "data_root", None):
        return args.data_root
    if os.environ.get(ENV_DATA_ROOT):
        return os.environ[ENV_DATA_ROOT]
    return file_cfg.get("data", {}).get("root", ".")


def _model_from_checkpoint(path) -> Restorer:
    ckpt = load_checkpoint(path)
    model = Restorer(ModelConfig.from_dict(ckpt.config))
    model.load_state_dict({k: v for k, v in ckpt.params.items()})
    model.eval()
    return model


def cmd_manifest_build(args):
    file_cfg = _load_config(args.config)
    root = Path(_data_root(file_cfg, args))
    plan = file_cfg.get("data", {}).get("plan", data_mod.DEFAULT_PLAN)
    roots = file_cfg.get("data", {}).get("roots") or {
        source: str(root / source) for source in plan
    }
    manifest = data_mod.build_manifest(
        roots, plan, seed=args.seed, allow_empty=args.allow_empty
    )
    manifest.save(args.out)
    for note in manifest.notes:
        print(f"note: {note}", file=sys.stderr)
    print(f"wrote {len(manifest.records)} records to {args.out}")


def cmd_manifest_validate(args):
    manifest = Manifest.load(args.manifest)
    manifest.validate(check_paths=not args.no_paths, allow_empty=args.allow_empty)
    counts = {}
    for r in manifest.records:
        counts[r.split] = counts.get(r.split, 0) + 1
    print(f"ok: {len(manifest.records)} records {counts}")


def cmd_train(args):
    file_cfg = _load_config(args.config)
    manifest = Manifest.load(args.manifest)
    manifest.validate()
    result = train(
        manifest,
        _model_config(file_cfg, args),
        _train_config(file_cfg, args),
        work_dir=args.work_dir,
        resume_from=args.resume,
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.log_path} ({result.wall_seconds:.1f}s)")


def cmd_infer(args):
    model = _model_from_checkpoint(args.checkpoint)
    img = load_image(args.input)
    save_image(args.output, restore_image(model, img))
    print(f"wrote {args.output}")


def cmd_eval(args):
    manifest = Manifest.load(args.manifest)
    model = _model_from_checkpoint(args.checkpoint)
    report = evaluate(manifest, model, split=args.split, dataset=args.dataset)
    out_path = Path(args.out) if args.out else None
    if out_path:
        out_path.write_text(report.to_jsonl())
        print(f"wrote {out_path}")
    print(report.summary_table())


def cmd_prior(args):
    import torch

    img = load_image(args.input)
    x = torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0)
    prior = compute_prior(x)
    save_image(args.output, prior.squeeze(0).permute(1, 2, 0).numpy())
    means = channel_means(x)
    print(json.dumps({
        "channel_means": {"r": means[0], "g": means[1], "b": means[2]},
        "gray_world_deviation": max(means) - min(means),
        "prior": args.output,
    }, indent=2))


def cmd_bench(args):
    file_cfg = _load_config(args.config)
    cfg = _model_config(file_cfg, args)
    if args.baseline:
        cfg = baseline_config(cfg)
    params = count_params(cfg)
    macs = count_macs(cfg, args.height, args.width)
    print(json.dumps({
        "params": params,
        "params_millions": round(params / 1e6, 4),
        "macs": macs,
        "macs_giga": round(macs / 1e9, 4),
        "input": [1, 3, args.height, args.width],
    }, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwrestore", description=__doc__)
    parser.add_argument("--config", help="YAML config file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    man = sub.add_parser("manifest", help="build or validate data manifests")
    man_sub = man.add_subparsers(dest="manifest_command", required=True)
    mb = man_sub.add_parser("build")
    mb.add_argument("--data-root", default=None)
    mb.add_argument("--seed", type=int, default=0)
    mb.add_argument("--allow-empty", action="store_true")
    mb.add_argument("--out", required=True)
    mb.set_defaults(func=cmd_manifest_build)
    mv = man_sub.add_parser("validate")
    mv.add_argument("manifest")
    mv.add_argument("--no-paths", action="store_true", help="skip path existence checks")
    mv.add_argument("--allow-empty", action="store_true")
    mv.set_defaults(func=cmd_manifest_validate)

    tr = sub.add_parser("train", help="run the training loop")
    tr.add_argument("manifest")
    tr.add_argument("--work-dir", default="runs")
    tr.add_argument("--resume", default=None)
    tr.add_argument("--desk", action="store_true", help="desk-scale preset (not the reference setup)")
    for key in ("epochs", "batch-size", "crop", "seed", "max-steps"):
        tr.add_argument(f"--{key}", dest=key.replace("-", "_"), type=int, default=None)
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="restore one image")
    inf.add_argument("input")
    inf.add_argument("output")
    inf.add_argument("--checkpoint", required=True)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="compute metrics over a test split")
    ev.add_argument("manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test_paired", choices=["test_paired", "test_unpaired"])
    ev.add_argument("--dataset", default="all")
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("prior", help="dump the color balance prior for an image")
    pr.add_argument("input")
    pr.add_argument("output")
    pr.set_defaults(func=cmd_prior)

    be = sub.add_parser("bench", help="parameter and MAC report")
    be.add_argument("--height", type=int, default=256)
    be.add_argument("--width", type=int, default=256)
    be.add_argument("--baseline", action="store_true")
    for key in ("embed-channels", "heads", "dr-units", "maq-blocks"):
        be.add_argument(f"--{key}", dest=key.replace("-", "_"), type=int, default=None)
    be.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
