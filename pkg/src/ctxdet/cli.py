"""Command-line front end.

Subcommands: gen-data, train, infer, eval, inspect. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataio, pipeline, snapshots
from .config import RunConfig, SAMPLING_STRATEGIES, TTA_MODES, load_config, validate
from .detector import forward_frame
from .errors import ConfigError, DataError, NumericError
from .evalkit import dump_pr_curves, format_report
from .stream import gen_clips


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else validate(RunConfig())
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.stream.seed = args.seed
    if getattr(args, "sampling", None) is not None:
        cfg.train.sampling = args.sampling
    if getattr(args, "tta", None) is not None:
        cfg.tta.mode = {"percam": "percam", "global": "global", "off": "off"}[args.tta]
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    clips = gen_clips(cfg.stream)
    manifest = dataio.save_dataset(clips, args.out)
    n_frames = sum(len(c) for c in clips)
    print(f"wrote {len(clips)} clips / {n_frames} frames to {args.out}")
    print(f"manifest={manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    frames = dataio.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "metrics.log")
    with open(log_path, "w") as log:

        def log_fn(step, b):
            line = (
                f"step={step} focal={b.focal:.10g} l1={b.l1:.10g} "
                f"giou={b.giou:.10g} asl={b.asl:.10g} total={b.total:.10g}"
            )
            log.write(line + "\n")
            if step % cfg.train.log_every == 0 or step == cfg.train.steps - 1:
                print(line)

        result = pipeline.training_run(cfg, frames, log_fn=log_fn)
    snapshots.save_checkpoint(args.out, result.model, result.memory, cfg)
    print(f"checkpoint={args.out}")
    return 0


def cmd_infer(args) -> int:
    model, mem, cfg = snapshots.load_checkpoint(args.checkpoint)
    frames = dataio.load_dataset(args.data)
    mode = args.tta if args.tta is not None else cfg.tta.mode
    preds, bank = pipeline.inference_run(
        model,
        mem,
        frames,
        tta_mode=mode,
        beta=cfg.tta.beta,
        gate=cfg.tta.gate,
        strategy="score" if model.cfg.use_memory else "full",
    )
    dataio.write_predictions(args.out, preds)
    print(f"wrote {len(preds)} predictions to {args.out}")
    if bank is not None and args.bank_out:
        snapshots.save_camera_bank(bank, args.bank_out)
        print(f"camera bank={args.bank_out}")
    return 0


def cmd_eval(args) -> int:
    preds = dataio.read_predictions(args.pred)
    frames = dataio.load_dataset(args.data)
    num_classes = max(
        [cid for _, cid, _ in pipeline.ground_truths(frames)] + [cid for _, cid, _, _ in preds],
        default=-1,
    ) + 1
    report = pipeline.evaluate(preds, frames, num_classes)
    print(format_report(report))
    if args.pr_out:
        with open(args.pr_out, "w") as f:
            f.write(dump_pr_curves(report) + "\n")
    return 0


def cmd_inspect(args) -> int:
    model, mem, _cfg = snapshots.load_checkpoint(args.checkpoint)
    if not model.cfg.use_memory:
        raise ConfigError("checkpoint has no memory tokens to inspect")
    frames = dataio.load_dataset(args.data)
    if not 0 <= args.frame < len(frames):
        raise DataError(f"frame {args.frame} outside dataset of {len(frames)} frames")
    layer = args.layer if args.layer is not None else model.cfg.enc_layers - 1
    if not 0 <= layer < model.cfg.enc_layers:
        raise ConfigError(f"layer {layer} outside [0, {model.cfg.enc_layers})")

    fp = forward_frame(model, mem, frames[args.frame].grid)
    probs = fp.caches["enc"][layer][0][6]  # (heads, T, T) attention rows
    hw = model.cfg.num_tokens
    th, tw = model.cfg.tokens_h, model.cfg.tokens_w
    k = model.cfg.num_prototypes
    mem_rows = probs[:, hw:, :hw].mean(axis=0)  # (S, HW), head-averaged

    lines = [f"layer={layer}", f"grid={th}x{tw}", f"slots={mem_rows.shape[0]}"]
    for s in range(mem_rows.shape[0]):
        lines.append(f"slot {s // k} {s % k}")
        grid = mem_rows[s].reshape(th, tw)
        for row in grid:
            lines.append(",".join(format(v, ".9g") for v in row))
    with open(args.out, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote attention maps for {mem_rows.shape[0]} slots to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector on a dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--sampling", choices=SAMPLING_STRATEGIES)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run frame-ordered inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions output file")
    p.add_argument("--tta", choices=TTA_MODES)
    p.add_argument("--bank-out", help="where to write the adapted camera bank")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--pred", required=True, help="predictions file")
    p.add_argument("--data", required=True)
    p.add_argument("--pr-out", help="comma-separated precision/recall dump")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="dump memory-to-image attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, required=True, help="frame index in the dataset")
    p.add_argument("--layer", type=int, help="encoder layer (default: last)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
