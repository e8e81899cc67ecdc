"""Command-line entry point: ``wsdvc <subcommand> --out RUN_DIR``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .pipeline import PipelineConfig, StageError, run_pipeline, write_synthetic
from .synth import InfeasibleSpecError, SynthSpec

log = logging.getLogger("wsdvc")

STAGE_MODES = {"propose": "propose", "match": "train-match", "caption": "caption",
               "eval": "eval", "distill-demo": "distill-demo"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with PipelineConfig fields")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="run directory (artifacts are written here, once)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wsdvc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[common], help="write a synthetic dataset with planted events")
    g.add_argument("--videos", type=int, default=4)
    g.add_argument("--length", type=int, default=100)
    g.add_argument("--events", type=int, default=3)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--sharpness", type=float, default=0.0, help="teacher boundary blur in frames")
    g.add_argument("--frame-duration", type=float, default=1.0)
    g.add_argument("--tiled", action="store_true", help="events tile the video evenly")

    for name, help_ in (("propose", "decode teacher outputs into top-K proposals"),
                        ("match", "train the matcher and assign proposals to sentences"),
                        ("caption", "beam-decode a caption for every proposal"),
                        ("eval", "write a metric report"),
                        ("distill-demo", "multi-teacher distillation on the run's videos")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--manifest", help="manifest path (default: RUN_DIR/manifest.jsonl)")
        if name == "caption":
            p.add_argument("--model", help="tabular caption model JSON")
    return parser


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2

    if args.command == "gen-synth":
        spec = SynthSpec(n_videos=args.videos, length=args.length, n_events=args.events,
                         feature_dim=args.dim, noise=args.noise, sharpness=args.sharpness,
                         frame_duration=args.frame_duration, tiled=args.tiled, seed=cfg.seed)
        try:
            m = write_synthetic(args.out, spec)
        except (InfeasibleSpecError, FileExistsError) as exc:
            print(f"[gen-synth] {exc}", file=sys.stderr)
            return 1
        log.info("wrote %d videos to %s", len(m.videos), args.out)
        return 0

    mode = STAGE_MODES[args.command]
    try:
        out = run_pipeline(args.out, cfg, mode, args.manifest, getattr(args, "model", None))
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except FileExistsError as exc:
        print(f"[{mode}] artifact already exists, refusing to overwrite: {exc.filename}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"[{mode}] {exc}", file=sys.stderr)
        return 1
    if mode in ("eval", "distill-demo"):
        summary = {k: v for k, v in out.items() if k not in ("config", "videos")}
        for section in summary.values():
            if isinstance(section, dict):
                section.pop("curve", None)
        print(json.dumps(summary, indent=1))
    log.info("%s done; artifacts in %s", mode, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
