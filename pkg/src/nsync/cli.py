"""Command-line entry point: ``nsync <command> [options]``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when a
numerical failure (NaN/inf) aborts the run.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys

from nsync import __version__, pipeline
from nsync.config import load_config, validate
from nsync.errors import ConfigError, NumericalError
from nsync.model import GENERIC, STAR
from nsync.styleworld import Dataset
from nsync.trainer import ALL_VARIANTS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("nsync")


def _override(cfg: dict, section: str, key: str, value) -> dict:
    if value is None:
        return cfg
    cfg = copy.deepcopy(cfg)
    cfg[section][key] = value
    return validate(cfg)


def _parse_contents(text: str) -> list[int]:
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"--contents expects comma-separated class ids, got {text!r}") from None


def cmd_make_data(args, cfg):
    cfg = _override(cfg, "data", "positives_seed", args.seed)
    cfg = _override(cfg, "data", "target_style", args.style)
    pipeline.run_make_data(cfg, args.out, args.export_csv)
    print(f"wrote positives and test sets to {args.out}")


def cmd_pretrain(args, cfg):
    cfg = _override(cfg, "pretrain", "seed", args.seed)
    m = pipeline.run_pretrain(cfg, args.out)
    print(f"wrote {args.out}/base.ckpt ({m.wall_clock_seconds:.1f}s)")


def cmd_gen_negatives(args, cfg):
    cfg = _override(cfg, "negatives", "seed", args.seed)
    pipeline.run_gen_negatives(cfg, args.checkpoint, args.positives, args.out)
    n = len(Dataset.load(f"{args.out}/negatives.ds"))
    print(f"wrote {n} negatives to {args.out}/negatives.ds")


def cmd_finetune(args, cfg):
    cfg = _override(cfg, "train", "seed", args.seed)
    cfg = _override(cfg, "train", "variant", args.variant)
    cfg = _override(cfg, "train", "mode", args.mode)
    cfg = _override(cfg, "train", "iterations", args.iterations)
    m = pipeline.run_finetune(cfg, args.checkpoint, args.positives, args.negatives, args.out)
    print(f"wrote {args.out}/adapted.ckpt (variant {m.variant}, {m.wall_clock_seconds:.1f}s)")


def cmd_sample(args, cfg):
    cfg = _override(cfg, "eval", "sample_seed", args.seed)
    if (args.captions is None) == (args.contents is None):
        raise ConfigError("give exactly one of --captions or --contents")
    if args.captions is not None:
        contents = pipeline._load_dataset(args.captions, "captions").contents
    else:
        contents = _parse_contents(args.contents)
    style = None if args.style == "none" else args.style
    pipeline.run_sample(cfg, args.checkpoint, contents, args.n, args.out, style)
    print(f"wrote {len(contents) * args.n} samples to {args.out}/samples.ds")


def cmd_evaluate(args, cfg):
    report, _ = pipeline.run_evaluate(cfg, args.samples, args.test, args.out)
    print(
        f"CSD {report.csd:.4f}  CMMD {report.cmmd:.5f}  KID {report.kid:.5f}  FID {report.fid:.4f}"
        f"  (wrote {args.out}/report.json)"
    )


def cmd_ablate(args, cfg):
    if args.seeds is not None:
        cfg = _override(cfg, "ablate", "seeds", list(range(args.seeds)))
    if args.iterations is not None:
        cfg = _override(cfg, "train", "iterations", args.iterations)
    if args.targets is not None:
        names = [t for t in args.targets.split(",") if t]
        cfg = _override(cfg, "data", "target_style", names[0])
        cfg = _override(cfg, "ablate", "extra_targets", names[1:])
    report = pipeline.run_ablate(cfg, args.out, args.checkpoint, args.jobs)
    print(report.table())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsync", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nsync {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help):
        p.add_argument("--config", help="JSON config; unspecified keys take defaults")
        p.add_argument("--seed", type=int, help=seed_help)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("make-data", help="render target-style positives and a held-out test set")
    common(p, "seed of the positive set")
    p.add_argument("--style", help="target style name")
    p.add_argument("--export-csv", action="store_true", help="also write CSV copies")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("pretrain", help="train the base denoiser on generic styles")
    common(p, "pretraining seed")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-negatives", help="sample negatives from the frozen base model")
    common(p, "sampling seed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--positives", required=True)
    p.set_defaults(func=cmd_gen_negatives)

    p = sub.add_parser("finetune", help="adapt the base model to the positive set")
    common(p, "training seed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--positives", required=True)
    p.add_argument("--negatives")
    p.add_argument("--variant", choices=[v.value for v in ALL_VARIANTS])
    p.add_argument("--mode", choices=["ti", "lora"])
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="DDIM samples for a list of captions")
    common(p, "sampling seed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", help="dataset file whose content classes are used as captions")
    p.add_argument("--contents", help="comma-separated content class ids")
    p.add_argument("--n", type=int, default=1, help="samples per caption")
    p.add_argument("--style", default=STAR, help=f"style token ({STAR}, {GENERIC}, a generic style, or 'none')")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score samples against a test set")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score every variant over several seeds")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="reuse this base checkpoint instead of pretraining")
    p.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    p.add_argument("--iterations", type=int)
    p.add_argument("--targets", help="comma-separated target styles; the first is primary")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except NumericalError as exc:
        print(f"nsync: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"nsync: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
