"""Command-line entry point: ``coldal phantom gen``, ``coldal proxy label``, ``coldal run``, ``coldal report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import codec
from .config import parse_config
from .errors import ColdALError, ConfigError, DivergenceError
from .metrics import MetricsRow, read_csv, report, write_report
from .phantom import PhantomSpec, generate_dataset, write_dataset
from .proxy import DEFAULT_LEVEL, DEFAULT_WIDTH, make_pseudo_label

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

log = logging.getLogger("coldal")


def _phantom_gen(args) -> int:
    spec = PhantomSpec(extent=args.size, seed=args.seed)
    train, val = generate_dataset(spec, args.count, args.val)
    path = write_dataset(args.out, spec, train, val)
    print(f"wrote {len(train)} train / {len(val)} val cases to {path.parent}")
    return EXIT_OK


def _proxy_label(args) -> int:
    src, out = Path(args.input), Path(args.out)
    files = sorted(p for p in src.rglob("*.cal3d") if not p.stem.endswith("_truth")) if src.is_dir() else [src]
    if not files:
        print(f"no volumes found under {src}", file=sys.stderr)
        return EXIT_ERROR
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        v = codec.read_volume(f)
        lbl = make_pseudo_label(v, (args.level, args.width), args.connectivity, args.keep_top)
        codec.write_volume(out / f"{f.stem}_pseudo.cal3d", lbl)
    print(f"wrote {len(files)} pseudo labels to {out}")
    return EXIT_OK


def _run(args) -> int:
    from .loop import run_experiment  # defer the torch import for the light subcommands

    settings = parse_config(args.config)
    if args.settings:
        wanted = args.settings.split(",")
        unknown = sorted(set(wanted) - {s.name for s in settings})
        if unknown:
            raise ConfigError("--settings", f"unknown setting(s) {unknown}")
        settings = [s for s in settings if s.name in wanted]
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else None
    result = run_experiment(
        settings, args.data, args.out, resume=args.resume, jobs=args.jobs,
        stop_after=args.stop_after, record_wall_time=args.record_wall_time, seeds=seeds,
    )
    state = "complete" if result.complete else "partial"
    print(f"{state}: {len(result.rows)} metrics rows written to {Path(args.out) / 'metrics.csv'}")
    return EXIT_OK


def _report(args) -> int:
    src = Path(args.input)
    rows = [MetricsRow.from_csv(r) for r in read_csv(src / "metrics.csv")]
    per_volume = read_csv(src / "per_volume.csv") if (src / "per_volume.csv").exists() else []
    if not rows:
        print(f"{src / 'metrics.csv'} has no rows", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report(rows, per_volume), out.parent / "summary.csv", out.parent / "pairwise_wilcoxon.csv", out)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coldal", description="Cold-start active learning for 3D segmentation on CT phantoms.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic CT phantoms").add_subparsers(dest="action", required=True)
    gen = ph.add_parser("gen", help="generate a phantom dataset")
    gen.add_argument("--count", type=int, default=60, help="training pool size")
    gen.add_argument("--val", type=int, default=15, help="validation set size")
    gen.add_argument("--size", type=int, default=32, help="cubic volume extent in voxels")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_phantom_gen)

    px = sub.add_parser("proxy", help="proxy-task utilities").add_subparsers(dest="action", required=True)
    lab = px.add_parser("label", help="threshold + largest component pseudo labels")
    lab.add_argument("--in", dest="input", required=True, help="a .cal3d volume or a directory of them")
    lab.add_argument("--out", required=True)
    lab.add_argument("--level", type=float, default=DEFAULT_LEVEL)
    lab.add_argument("--width", type=float, default=DEFAULT_WIDTH)
    lab.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    lab.add_argument("--keep-top", type=int, default=1)
    lab.set_defaults(func=_proxy_label)

    run = sub.add_parser("run", help="run the settings of a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--data", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--resume", action="store_true", help="continue cells from their saved pool state")
    run.add_argument("--jobs", type=int, default=1, help="parallel setting x seed cells")
    run.add_argument("--settings", help="comma-separated subset of setting names")
    run.add_argument("--seeds", help="comma-separated seeds overriding the config")
    run.add_argument("--stop-after", type=int, help="stop each cell after this many iterations (resumable)")
    run.add_argument("--record-wall-time", action="store_true", help="fill the wall_s column of metrics.csv")
    run.set_defaults(func=_run)

    rep = sub.add_parser("report", help="summarise a run directory")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--out", required=True, help="markdown report path; CSVs go next to it")
    rep.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ColdALError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
