"""Command-line entry point.

Commands::

    srqa train    --config cfg.yaml [--seed N] [--out-dir DIR] [--emit-scatter]
    srqa eval     --checkpoint ckpt.pt --config cfg.yaml [--out-dir DIR]
    srqa predict  --checkpoint ckpt.pt --sr sr.png --lr lr.png --scale 4 [--dump-maps out.npz]
    srqa ablate   --config cfg.yaml --axis {branches,fusion,finetune} [--out-dir DIR]
    srqa synth    --out DIR [--n-contents N] [--scales 2,4] [--methods M] [--seed N]

Flags override config-file values (flag > file > default). All artifacts of
a run land under one directory named from the config hash and a timestamp.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import List, Optional

import numpy as np
import torch

from . import data as data_mod
from . import trainer as trainer_mod
from .datamodel import ExperimentConfig, Sample, validate_sample
from .errors import (
    DataError,
    NumericError,
    RangeError,
    ShapeMismatchError,
    SrqaError,
    WeightLoadError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits with the documented usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "device", None) is not None:
        overrides["device"] = args.device
    return config.replace(**overrides) if overrides else config


def _make_run_dir(out_dir: str, config: ExperimentConfig) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = os.path.join(out_dir, f"run-{config.content_hash()}-{stamp}")
    os.makedirs(run_dir, exist_ok=True)
    return run_dir


def _load_samples(config: ExperimentConfig) -> List[Sample]:
    samples = data_mod.load_dataset(config.dataset)
    if not samples:
        raise DataError("dataset is empty")
    return samples


def cmd_train(args) -> int:
    config = _load_config(args)
    samples = _load_samples(config)
    run_dir = _make_run_dir(args.out_dir, config)
    config.save(os.path.join(run_dir, "config.yaml"))
    report = trainer_mod.run_protocol(
        config,
        samples,
        run_dir=run_dir,
        emit_scatter=args.emit_scatter,
        save_checkpoints=True,
    )
    with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json())
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.to_text_table())
    print(report.to_text_table(), end="")
    print(f"artifacts: {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    model, _epoch = trainer_mod.load_checkpoint(args.checkpoint)
    samples = _load_samples(config)
    report, preds, targets = trainer_mod.evaluate(model, samples)
    record = report.to_dict()
    print(json.dumps(record, sort_keys=True, indent=2))
    if args.out_dir is not None:
        run_dir = _make_run_dir(args.out_dir, config)
        with open(os.path.join(run_dir, "eval.json"), "w", encoding="utf-8") as f:
            json.dump(record, f, sort_keys=True, indent=2)
        if args.emit_scatter:
            from .metrics import write_scatter

            write_scatter(os.path.join(run_dir, "scatter.tsv"), preds, targets)
        print(f"artifacts: {run_dir}")
    return EXIT_OK


def _load_pair(sr_path: str, lr_path: str, scale: float) -> Sample:
    sr = data_mod.load_image(sr_path)
    lr = data_mod.load_image(lr_path)
    if sr.shape[0] < 224 or sr.shape[1] < 224:
        raise DataError(f"SR image {sr.shape[0]}x{sr.shape[1]} is below the 224x224 minimum")
    if lr.shape != sr.shape:
        lr = data_mod.bilinear_resize(lr, sr.shape[0], sr.shape[1])
    return validate_sample(
        Sample(sr_image=sr, lr_image_upsampled=lr, scale_factor=scale, mos=None)
    )


def cmd_predict(args) -> int:
    model, _epoch = trainer_mod.load_checkpoint(args.checkpoint)
    sample = _load_pair(args.sr, args.lr, args.scale)
    score, per_crop = trainer_mod.predict_sample(model, sample)
    record = {"final_score": score, "per_crop_scores": per_crop, "scale_factor": args.scale}
    print(json.dumps(record, sort_keys=True, indent=2))
    if args.dump_maps is not None:
        crops = data_mod.eval_crops(sample, model.config.crop_size)
        sr = torch.stack([c.sr for c in crops])
        lr = torch.stack([c.lr for c in crops]) if model.config.enable_fidelity_branch else None
        scales = torch.full((len(crops),), float(args.scale))
        with torch.no_grad():
            out = model(sr, lr, scales)
        arrays = {"per_crop_scores": np.asarray(per_crop), "final_score": np.asarray(score)}
        for key in (
            "perception_score_map",
            "fidelity_score_map",
            "perception_weight_map",
            "fidelity_weight_map",
            "diff_global",
            "diff_local",
        ):
            if out[key] is not None:
                arrays[key] = out[key].numpy()
        np.savez(args.dump_maps, **arrays)
        print(f"maps: {args.dump_maps}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    samples = _load_samples(config)
    table = trainer_mod.run_ablation_suite(config, samples, args.axis)
    print(table.to_text_table(), end="")
    if args.out_dir is not None:
        run_dir = _make_run_dir(args.out_dir, config)
        with open(os.path.join(run_dir, f"ablation_{args.axis}.txt"), "w", encoding="utf-8") as f:
            f.write(table.to_text_table())
        with open(os.path.join(run_dir, f"ablation_{args.axis}.json"), "w", encoding="utf-8") as f:
            json.dump(table.to_dict(), f, sort_keys=True, indent=2)
        print(f"artifacts: {run_dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    scales = tuple(float(s) for s in args.scales.split(","))
    rng = np.random.default_rng(args.seed)
    samples = data_mod.synthesize_corpus(
        n_contents=args.n_contents,
        scales=scales,
        rng=rng,
        methods_per_content=args.methods,
        image_size=args.image_size,
    )
    data_mod.write_corpus(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srqa", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--device", type=str, default=None, help="override the config device")

    p_train = sub.add_parser("train", help="run the full repeated-split protocol")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out-dir", default="runs")
    p_train.add_argument("--emit-scatter", action="store_true", help="write (pred, mos) pairs per repeat")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out-dir", default=None)
    p_eval.add_argument("--emit-scatter", action="store_true")
    common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="score one SR/LR image pair")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--sr", required=True)
    p_pred.add_argument("--lr", required=True)
    p_pred.add_argument("--scale", type=float, required=True)
    p_pred.add_argument("--dump-maps", default=None, help="write score/weight/difference maps to an .npz")
    common(p_pred)
    p_pred.set_defaults(func=cmd_predict)

    p_abl = sub.add_parser("ablate", help="run one ablation axis")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--axis", required=True, choices=trainer_mod.ABLATION_AXES)
    p_abl.add_argument("--out-dir", default=None)
    common(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_syn = sub.add_parser("synth", help="generate a synthetic corpus on disk")
    p_syn.add_argument("--out", required=True)
    p_syn.add_argument("--n-contents", type=int, default=8)
    p_syn.add_argument("--scales", default="2,4")
    p_syn.add_argument("--methods", type=int, default=1)
    p_syn.add_argument("--image-size", type=int, default=224)
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.set_defaults(func=cmd_synth)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ShapeMismatchError, RangeError, WeightLoadError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SrqaError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
