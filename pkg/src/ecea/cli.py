"""Command line: ``python -m ecea <verb> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import autograd as ag
from .attention import EAConfig
from .bench import benchmark_layers
from .config import ExperimentConfig, default_config, from_dict, load_config, parse_param
from .data import export_dataset, generate_part_whole_dataset
from .errors import ConfigError, DivergenceError
from .experiment import pipeline_grad_check, resolve, run_experiment, sweep, sweep_table, summary_table, write_attention_artifacts
from .metrics import evaluate
from .model import Detector, DetectorConfig
from .train import DTYPES, load_detector_state

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("ecea")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict(None)
    return resolve(cfg, seed=args.seed, mode=args.mode, shots=args.shots, runs=getattr(args, "runs", None))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_defaults(args) -> int:
    text = json.dumps(default_config(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load(args)
    ds = generate_part_whole_dataset(cfg.split, cfg.train.seed)
    path = export_dataset(ds, _out(args))
    print(f"wrote {sum(len(v) for v in ds.splits().values())} images to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    res = run_experiment(cfg, _out(args))
    print(summary_table(res.summary, f"seeds {res.seeds}  wall {res.wall:.1f}s"))
    print(f"report: {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    ds = generate_part_whole_dataset(cfg.split, cfg.train.seed)
    dcfg = DetectorConfig(fusion=cfg.fusion, num_classes=cfg.split.num_classes, **cfg.train.detector)
    det = Detector.create(dcfg, cfg.split.all_classes, seed=cfg.train.seed, dtype=DTYPES[cfg.train.dtype])
    try:
        load_detector_state(args.checkpoint, det)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    report = evaluate(det, ds, cfg.split.mode, meta={"checkpoint": str(args.checkpoint), "seed": cfg.train.seed})
    out = _out(args)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    if ds.novel_test and cfg.fusion.use_attention:
        write_attention_artifacts(det, ds.novel_test[0].image, out)
    print(report.table())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if not args.param:
        raise ConfigError("sweep needs --param key=v1,v2,...")
    key, values = parse_param(args.param)
    rows = sweep(cfg, key, values, _out(args), workers=args.workers)
    print(sweep_table(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    rep = pipeline_grad_check(seed=cfg.train.seed, max_coords=args.coords)
    print(rep)
    return EXIT_OK if rep.passed else 1


def cmd_bench(args) -> int:
    cfgs = [EAConfig(channels=args.channels, points=n, heads=args.heads, layers=1) for n in args.points]
    rows = benchmark_layers(cfgs, args.size, args.size, repeats=args.repeats)
    base = rows[0]
    print(f"{'points':>6s} {'flops':>10s} {'median ms':>10s} {'flop ratio':>10s} {'time ratio':>10s}")
    for r in rows:
        print(f"{r['points']:6d} {r['flops']:10d} {1e3 * r['median_seconds']:10.3f} "
              f"{r['flops'] / base['flops']:10.3f} {r['median_seconds'] / base['median_seconds']:10.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecea", description="Desk-scale extensible attention for few-shot detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", type=Path, help="JSON config (missing keys take defaults)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--mode", choices=("fsod", "gfsod"))
        sp.add_argument("--shots", type=int)
        return sp

    sp = sub.add_parser("defaults", help="print the default config")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_defaults)
    common(sub.add_parser("generate", help="export the synthetic dataset")).set_defaults(fn=cmd_generate)
    for verb in ("train", "run"):
        sp = common(sub.add_parser(verb, help="generate, train both stages, evaluate"))
        sp.add_argument("--runs", type=int, help="number of seeds (default from config)")
        sp.set_defaults(fn=cmd_train)
    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("sweep", help="one experiment per value of a config key"))
    sp.add_argument("--param", help="key=v1,v2,... e.g. layers=1,2,3 or stages=s5,s4+s5")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_sweep)
    sp = common(sub.add_parser("gradcheck", help="finite-difference check of the full loss"))
    sp.add_argument("--coords", type=int, default=None, help="coordinates per tensor (default all)")
    sp.set_defaults(fn=cmd_gradcheck)
    sp = sub.add_parser("bench", help="time one attention layer for several point counts")
    sp.add_argument("--points", type=int, nargs="+", default=[4, 8])
    sp.add_argument("--channels", type=int, default=8)
    sp.add_argument("--heads", type=int, default=8)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--repeats", type=int, default=100)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print("configuration error:", file=sys.stderr)
        for p in e.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        if e.checkpoint:
            print(f"last good state: {e.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    except ag.NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
