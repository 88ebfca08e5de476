"""Command-line interface.

One verb per pipeline stage plus the sweep and the closed-form latency
model:

    specalign corpus       --preset toy --out runs/demo
    specalign train-target --out runs/demo
    specalign precompute   --out runs/demo
    specalign train-draft  --out runs/demo
    specalign decode       --out runs/demo [--trace]
    specalign ablate       --axis topk --grid 1,3,NA --out runs/demo
    specalign latency      --tau 5 [--target-ms 25 --draft-ms 1.5 --depth 6]
    specalign report       --out runs/demo

Errors print a machine-readable JSON record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import ablation, pipeline
from .config import ConfigError, load_config
from .latency import LatencyModel, speedup_ratio


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON config overlaying the preset")
    parser.add_argument("--preset", default="toy", choices=["toy", "paper-faithful"])
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", default="runs/default", help="artifact directory")
    parser.add_argument("--trace", action="store_true", help="write per-cycle decode traces")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specalign",
                                     description="Desk-scale speculative decoding lab")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("corpus", "train-target", "precompute", "train-draft", "decode", "report"):
        p = sub.add_parser(verb)
        _add_common(p)
    p = sub.add_parser("ablate")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=list(ablation.AXES))
    p.add_argument("--grid", required=True,
                   help="comma-separated settings; NA disables masking on the topk axis")
    p.add_argument("--workers", type=int, default=2)
    p = sub.add_parser("latency")
    p.add_argument("--target-ms", type=float, default=25.0)
    p.add_argument("--draft-ms", type=float, default=1.5)
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--tau", type=float, required=True)
    return parser


def parse_grid(axis: str, raw: str) -> list:
    values = []
    for item in raw.split(","):
        item = item.strip()
        if axis == "topk":
            values.append(None if item.upper() == "NA" else int(item))
        elif axis in ("steps", "expansion_dim"):
            values.append(int(item))
        elif axis == "teh":
            values.append(item.lower() in ("1", "true", "on", "yes"))
        else:
            values.append(item)
    return values


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        _fail("config-error", str(exc))
        return 2
    except pipeline.StageError as exc:
        _fail("stage-error", str(exc), stage=exc.stage)
        return 3
    except (ValueError, OSError) as exc:
        _fail(type(exc).__name__, str(exc))
        return 1


def _fail(kind: str, message: str, **extra) -> None:
    record = {"error": {"type": kind, "message": message, **extra}}
    print(json.dumps(record), file=sys.stderr)


def _dispatch(args) -> int:
    if args.verb == "latency":
        model = LatencyModel(target_ms=args.target_ms, draft_ms=args.draft_ms,
                             depth=args.depth, tau=args.tau)
        print(json.dumps({"speedup_ratio": round(speedup_ratio(model), 6)}))
        return 0

    config = load_config(preset=args.preset, config_path=args.config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.verb == "corpus":
        corpus = pipeline.stage_corpus(config, out)
        print(json.dumps({"stage": "corpus", "sequences": len(corpus)}))
    elif args.verb == "train-target":
        pipeline.stage_train_target(config, out)
        print(json.dumps({"stage": "train-target", "artifact": str(out / "target.ckpt")}))
    elif args.verb == "precompute":
        dataset = pipeline.stage_precompute(config, out)
        print(json.dumps({"stage": "precompute", "entries": len(dataset)}))
    elif args.verb == "train-draft":
        draft = pipeline.stage_train_draft(config, out)
        print(json.dumps({"stage": "train-draft", "param_count": draft.param_count()}))
    elif args.verb == "decode":
        payload = pipeline.stage_decode(config, out, trace=args.trace)
        print(json.dumps({"stage": "decode", "mean_tau": payload["mean_tau"],
                          "modeled_sr": payload["modeled_sr"]}))
    elif args.verb == "report":
        report = pipeline.stage_report(config, out)
        print(json.dumps({"stage": "report", **report.to_dict()}))
    elif args.verb == "ablate":
        grid = parse_grid(args.axis, args.grid)
        rows = ablation.run_ablation(args.axis, grid, config, out, workers=args.workers)
        print(json.dumps({"stage": "ablate", "rows": rows}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
