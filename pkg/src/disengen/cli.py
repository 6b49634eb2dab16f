"""Command-line entry point: ``disengen <subcommand> ...``.

Exit codes: 0 ok, 2 config error, 3 missing dependency, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import DisengenError

log = logging.getLogger("disengen")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. dit.depth=2 (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (falls back to $DISENGEN_SEED)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disengen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-visual", help="stage 1: visual disentangler")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train-text", help="stage 2: text heads against frozen visual features")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--visual-ckpt")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-diffusion", help="stage 3: HFFM + LoRA DiT")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--text-ckpt")
    p.add_argument("--visual-ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--base-ckpt", help="shared base DiT; pretrained and written here if absent")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--pretrain-steps", type=int)

    p = sub.add_parser("sample", help="generate images for a caption")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="Frechet / KID between two image directories")
    _common(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--extractors")
    p.add_argument("--visual-ckpt", default="")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-embeddings", help="text/image embeddings as CSV")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--visual-ckpt")
    p.add_argument("--text-ckpt")
    p.add_argument("--out", required=True)

    p = sub.add_parser("merge-lora", help="fold LoRA adapters into the base DiT")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    return parser


def _flags(args: argparse.Namespace) -> dict[str, str]:
    """Dedicated flags become config overrides; explicit ``--set`` wins."""
    mapping = {
        "n": "data.n", "classes": "data.n_classes", "size": "data.size",
        "data": "paths.data", "visual_ckpt": "paths.visual_ckpt", "text_ckpt": "paths.text_ckpt",
        "out_ckpt": "paths.out", "max_steps": "diffusion.max_steps",
        "base_ckpt": "paths.base_ckpt", "pretrain_steps": "diffusion.pretrain_steps",
    }
    stage_keys = {"train-visual": "visdis", "train-text": "textdis", "train-diffusion": "diffusion"}
    if args.command in stage_keys:
        mapping["epochs"] = f"{stage_keys[args.command]}.epochs"
        mapping["lr"] = f"{stage_keys[args.command]}.lr"
        if args.command == "train-diffusion":
            mapping["out"] = "paths.out"
    if args.command == "gen-data":
        mapping.pop("data")
    out = {}
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None and v != "":
            out[key] = str(v)
    if args.seed is not None:
        out["seed"] = str(args.seed)
    from .config import parse_flags

    out.update(parse_flags(args.set))
    return out


def run(args: argparse.Namespace) -> int:
    from . import pipeline
    from .config import parse_config

    cmd = args.command
    stage = {"train-visual": "visual", "train-text": "text", "train-diffusion": "diffusion"}.get(cmd)
    flags = _flags(args)
    if stage:
        flags["stage"] = stage
    cfg = parse_config(args.config, flags)
    log.info("resolved config: %s", json.dumps(cfg.flat(), sort_keys=True, default=str))

    if cmd == "gen-data":
        path = pipeline.gen_data(cfg, args.out)
        print(f"wrote {cfg.data.n} samples to {path}")
    elif stage:
        def emit(row):
            print(",".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
        man = pipeline.run_stage(cfg, log=emit)
        for path, digest in man.checkpoints.items():
            print(f"checkpoint {path} sha256={digest}")
    elif cmd == "sample":
        steps = args.steps or cfg.metrics.sample_steps
        man = pipeline.sample(args.ckpt, args.caption, args.n, cfg.seed, args.out, steps=steps)
        print(json.dumps(man["parsed"], sort_keys=True))
    elif cmd == "eval":
        report = pipeline.eval_corpora(args.gen, args.real, args.extractors or cfg.metrics.extractors,
                                       cfg.seed, args.out, args.visual_ckpt or cfg.paths.visual_ckpt)
        for row in report["rows"]:
            print(f"{row['extractor']:<24} {row['metric']:<8} {row['value']:.6g}")
    elif cmd == "export-embeddings":
        n = pipeline.export_embeddings(cfg.paths.data, cfg.paths.visual_ckpt, cfg.paths.text_ckpt, args.out)
        print(f"wrote {n} rows to {args.out}")
    elif cmd == "merge-lora":
        digest = pipeline.merge_lora_ckpt(args.ckpt, args.out)
        print(f"checkpoint {args.out} sha256={digest}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except DisengenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ImportError as exc:
        print(f"error: missing dependency: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
