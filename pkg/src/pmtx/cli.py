"""Command-line entry point: ``pmtx run | crashtest | microbench | report``."""
from __future__ import annotations

import argparse
import json
import sys

from . import bench
from .errors import PmtxError
from .workload import load_workload


def _on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")


def _system(args) -> bench.SystemConfig:
    return bench.SystemConfig(
        cache_bytes=args.cache_bytes, cache_sets=args.cache_sets, ways=args.ways,
        tracker_blocks=args.tracker_blocks,
        roll_forward_redo=getattr(args, "roll_forward", False),
    )


def _spec(args):
    return load_workload(args.workload, ops_total=args.ops, object_count=args.objects,
                         object_size=args.object_size, seed=args.workload_seed,
                         pair_alloc=True if getattr(args, "pair_alloc", False) else None)


def _emit(results, args) -> None:
    text = bench.report(results, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    spec = _spec(args)
    arms = [args.archapt] if args.archapt is not None else [False, True]
    results = [bench.run(spec, args.mode, a, args.policy, args.seed, _system(args), timing=args.timing)
               for a in arms]
    _emit(results, args)
    return 0


def cmd_crashtest(args) -> int:
    spec = _spec(args)
    policies = bench.POLICIES if args.policy == "all" else [args.policy]
    summaries = [bench.crashtest(spec, args.mode, p, args.crashes, args.seed, _system(args))
                 for p in policies]
    _emit(summaries, args)
    for s in summaries:
        t = s.totals
        print(f"{s.workload} {s.mode} {s.policy}: crashes={len(s.runs)} I_obj={t['I_obj']} "
              f"DI_obj={t['DI_obj']} CC_obj={t['CC_obj']} violations={t['violations']}",
              file=sys.stderr)
    if args.assert_ and not all(s.ok for s in summaries):
        print("crash-consistency violation", file=sys.stderr)
        return 1
    return 0


def cmd_microbench(args) -> int:
    sizes = args.size or [128, 256, 512, 1024, 2048]
    results = [bench.microbench_checksum(s, args.count, args.seed, timing=args.timing) for s in sizes]
    _emit(results, args)
    if args.assert_:
        bad = [r for r in results
               if r.identical_update != 0 or r.full_page_checksum_blocks >= r.full_page_object_blocks
               or (r.object_size >= 2048 and r.create_checksums >= r.flush_objects)]
        if bad:
            print("checksum micro-benchmark expectation violated", file=sys.stderr)
            return 1
    return 0


def cmd_report(args) -> int:
    results = []
    for path in args.input:
        with open(path) as fh:
            doc = json.load(fh)
        results.extend(doc if isinstance(doc, list) else [doc])
    _emit(results, args)
    return 0


def _common(p, workload: bool = True) -> None:
    if workload:
        p.add_argument("--workload", default="ycsb-a", help="preset name or JSON workload file")
        p.add_argument("--ops", type=int, help="override ops_total")
        p.add_argument("--objects", type=int, help="override object_count")
        p.add_argument("--object-size", type=int, help="override object_size (bytes)")
        p.add_argument("--workload-seed", type=int, help="override the workload's own seed")
        p.add_argument("--mode", default="undo", choices=["undo", "redo"])
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--cache-bytes", type=int, default=2 * 1024 * 1024)
        p.add_argument("--cache-sets", type=int, help="cache sets (overrides --cache-bytes)")
        p.add_argument("--ways", type=int, default=11)
        p.add_argument("--tracker-blocks", type=int, help="locality tracker capacity in blocks")
    p.add_argument("--format", default="json", choices=["json", "csv"])
    p.add_argument("--out", help="write the report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmtx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a workload (both A/B arms unless --archapt is given)")
    _common(p)
    p.add_argument("--archapt", type=_on_off, help="on|off (default: both)")
    p.add_argument("--policy", default="lru", choices=list(bench.POLICIES))
    p.add_argument("--pair-alloc", action="store_true", help="coalesce field/value allocations")
    p.add_argument("--timing", action="store_true", help="include ops/sec (not deterministic)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("crashtest", help="randomized crash campaign")
    _common(p)
    p.add_argument("--policy", default="all", choices=list(bench.POLICIES) + ["all"])
    p.add_argument("--crashes", type=int, default=20)
    p.add_argument("--roll-forward", action="store_true",
                   help="roll logically committed redo transactions forward instead of cancelling")
    p.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit nonzero on any crash-consistency violation")
    p.set_defaults(func=cmd_crashtest)

    p = sub.add_parser("microbench", help="checksum vs object flushing cost")
    _common(p, workload=False)
    p.add_argument("--size", type=int, action="append", help="object size (repeatable)")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--assert", dest="assert_", action="store_true")
    p.set_defaults(func=cmd_microbench)

    p = sub.add_parser("report", help="re-serialize saved JSON results")
    _common(p, workload=False)
    p.add_argument("--input", nargs="+", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PmtxError as exc:
        print(f"pmtx: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"pmtx: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
