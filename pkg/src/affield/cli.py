"""Command-line interface.

Subcommands: gen-data, train, eval, gradcheck, weights-report,
probe-trivial. Exit codes: 0 success, 1 validation error (bad arguments,
bad config, malformed files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .datasets import PRESETS, ManifestDataset, save_dataset, spec_from_dict
from .experiments import (
    RunRecord,
    evaluate_predictions,
    gradient_check,
    kernel_report,
    run_experiment,
    trivial_solution_probe,
)
from .grids import LabelGrid, read_grid
from .network import load_model

__all__ = ["main"]

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; we reserve 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="affield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("spec", help=f"preset name ({', '.join(sorted(PRESETS))}) or JSON spec file")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("-c", "--config", required=True, help="JSON config file")
    p.add_argument("-o", "--out", help="override the config's output_dir")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate predictions or a checkpoint")
    p.add_argument("--ckpt", help="TSEG checkpoint (with --data)")
    p.add_argument("--data", help="dataset manifest; evaluates its test split")
    p.add_argument("--pred", nargs="+", help="prediction SEGGRID files (with --gt)")
    p.add_argument("--gt", nargs="+", help="ground-truth SEGGRID files")
    p.add_argument("--tol", type=int, default=1, help="boundary match tolerance")
    p.add_argument("--ignore-class", type=int, default=None)
    p.add_argument("-o", "--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=3)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("weights-report", help="CSV of final kernel weights")
    p.add_argument("record", help="record.json from an adaptive run")
    p.add_argument("-o", "--out", help="write CSV here instead of stdout")
    p.set_defaults(func=_cmd_weights_report)

    p = sub.add_parser("probe-trivial", help="weight-collapse probe (descent mode)")
    p.add_argument("-c", "--config", required=True, help="JSON config file")
    p.add_argument("--ascent", action="store_true", help="contrast run: ascend instead")
    p.add_argument("-o", "--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=_cmd_probe)

    return parser


def _cmd_gen_data(args) -> int:
    if args.spec in PRESETS:
        ds = PRESETS[args.spec]()
    else:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise ConfigError(
                [f"spec {args.spec!r} is neither a preset ({', '.join(sorted(PRESETS))}) "
                 "nor an existing file"]
            )
        raw = json.loads(spec_path.read_text())
        if isinstance(raw, dict) and "preset" in raw:
            if raw["preset"] not in PRESETS:
                raise ConfigError([f"preset: must be one of {sorted(PRESETS)}"])
            ds = PRESETS[raw["preset"]]()
        else:
            ds = spec_from_dict(raw)
    manifest = save_dataset(ds, args.out)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = dataclasses.replace(
            cfg, output_dir=args.out, raw={**cfg.raw, "output_dir": args.out}
        )
    record = run_experiment(cfg)
    m = record.metrics
    print(
        f"done in {record.wall_time_s:.1f}s: "
        f"miou {m['miou']['mean']:.4f}, "
        f"instance miou {m['instance_miou']['mean']:.4f}, "
        f"boundary recall {m['boundary']['recall']:.4f}"
    )
    if cfg.output_dir is not None:
        print(f"outputs in {cfg.output_dir}")
    return 0


def _load_label_grid(path) -> LabelGrid:
    grid = read_grid(path)
    if not isinstance(grid, LabelGrid):
        raise ValueError(f"{path} is not a label grid")
    return grid


def _cmd_eval(args) -> int:
    use_ckpt = args.ckpt is not None or args.data is not None
    use_files = args.pred is not None or args.gt is not None
    if use_ckpt == use_files:
        raise ConfigError(["eval needs either --ckpt with --data, or --pred with --gt"])
    if use_ckpt:
        if args.ckpt is None or args.data is None:
            raise ConfigError(["--ckpt and --data go together"])
        model = load_model(args.ckpt)
        _, test_scenes = ManifestDataset(args.data).load()
        preds = [model.predict(s.features) for s in test_scenes]
        gts = [s.gt for s in test_scenes]
    else:
        if args.pred is None or args.gt is None:
            raise ConfigError(["--pred and --gt go together"])
        if len(args.pred) != len(args.gt):
            raise ConfigError(
                [f"{len(args.pred)} prediction files vs {len(args.gt)} ground-truth files"]
            )
        preds = [_load_label_grid(p) for p in args.pred]
        gts = [_load_label_grid(p) for p in args.gt]
    report = evaluate_predictions(preds, gts, tol=args.tol, ignore_class=args.ignore_class)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_gradcheck(args) -> int:
    res = gradient_check(seed=args.seed, instances=args.instances)
    print(
        f"max relative error {res['max_rel_err']:.3e} over "
        f"{res['params_checked']} parameters ({res['instances']} instances, "
        f"{res['kink_excluded']} kink-excluded)"
    )
    if res["max_rel_err"] >= GRADCHECK_TOLERANCE:
        print(f"FAIL: exceeds {GRADCHECK_TOLERANCE:.0e}", file=sys.stderr)
        return 2
    return 0


def _cmd_weights_report(args) -> int:
    record = RunRecord.load(args.record)
    csv_text = kernel_report(record)
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        print(csv_text, end="")
    return 0


def _cmd_probe(args) -> int:
    cfg = load_config(args.config)
    report = trivial_solution_probe(cfg, descend=not args.ascent)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"affield: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures, including divergence
        print(f"affield: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
