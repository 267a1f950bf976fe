"""Command-line entry point: ``advtrack {synth,run,gradcheck,report,sweep}``.

Exit status: 0 on success, 1 for usage or configuration errors (including
attack/tracker pairs that cannot be combined), 2 for failures while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from advtrack import attacks as A
from advtrack import experiment as X
from advtrack import grad as G
from advtrack.data import SequenceParseError, save_dataset, synth_suite

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--jobs", type=int, help="worker processes (overrides the config)")
    p.add_argument("--timeout-sec", type=float, help="per-sequence timeout in seconds (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advtrack", description="Adversarial-robustness harness for toy visual object trackers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("out", help="output directory")
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--length", type=int, default=100)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config", help="INI experiment config")
    r.add_argument("--out", default="results", help="output directory (default: results)")
    _common(r)

    g = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    g.add_argument("--seeds", type=int, default=5, help="random points per op (default: 5)")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--op", action="append", help="restrict to this op (repeatable)")

    rp = sub.add_parser("report", help="re-aggregate a saved report.json into a fresh output directory")
    rp.add_argument("report", help="report.json written by run")
    rp.add_argument("--out", required=True)

    sw = sub.add_parser("sweep", help="epsilon or zeta sweep of one attack")
    sw.add_argument("config")
    sw.add_argument("--param", choices=sorted(X.SWEEP_DEFAULTS), help="overrides [sweep] param")
    sw.add_argument("--values", help="comma-separated levels (default: the standard grid)")
    sw.add_argument("--out", default="sweep")
    _common(sw)
    return p


def _override(cfg: X.ExperimentConfig, args) -> X.ExperimentConfig:
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
        kw["attack_config"] = cfg.attack_config.replace(seed=args.seed)
    if args.jobs is not None:
        kw["jobs"] = args.jobs
    if args.timeout_sec is not None:
        kw["timeout_sec"] = args.timeout_sec
    return cfg.replace(**kw) if kw else cfg


def _cmd_synth(args) -> int:
    if min(args.count, args.length, args.height, args.width) < 1:
        raise X.ConfigError("count, length, height and width must be positive")
    seqs = synth_suite(args.count, args.length, (args.height, args.width), seed=args.seed)
    save_dataset(seqs, args.out)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return EXIT_OK


def _print_summary(report: X.EvaluationReport) -> None:
    for row in X.summary_rows(report):
        print(",".join(row))
    skipped = [s for s in report.sequences if s["status"] != "ok"]
    for s in skipped:
        print(f"skipped {s['name']}: {s['reason']}", file=sys.stderr)


def _cmd_run(args) -> int:
    cfg = _override(X.load_config(args.config), args)
    report = X.run_experiment(cfg)
    X.emit_report(report, args.out)
    _print_summary(report)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    names = args.op or None
    if names:
        missing = [n for n in names if n not in G.REGISTRY]
        if missing:
            raise X.ConfigError(f"unknown op(s): {', '.join(missing)}")
    reports = G.check_all(range(args.seeds), args.tol, names)
    worst: dict[str, float] = {}
    for r in reports:
        worst[r.op_id] = max(worst.get(r.op_id, 0.0), r.max_rel_error)
    failed = sorted({r.op_id for r in reports if not r.passed})
    for name, err in sorted(worst.items()):
        print(f"{'FAIL' if name in failed else 'ok  '} {name:24s} max rel error {err:.2e}")
    print(f"{len(worst) - len(failed)}/{len(worst)} ops pass at tol {args.tol:g}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _cmd_report(args) -> int:
    try:
        saved = json.loads(Path(args.report).read_text(encoding="utf-8"))
    except OSError as e:
        raise X.ConfigError(f"cannot read {args.report}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise X.ConfigError(f"{args.report}:{e.lineno}: {e.msg}") from None
    items = saved if isinstance(saved, list) else [saved]
    reports = [X.reaggregate(d) for d in items]
    X.emit_report(reports, args.out)
    for r in reports:
        _print_summary(r)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _override(X.load_config(args.config), args)
    values = None
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",")]
        except ValueError:
            raise X.ConfigError(f"--values: cannot parse {args.values!r}") from None
    results = X.run_sweep(cfg, args.param, values)
    path = X.emit_sweep(results, args.out)
    print(path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


COMMANDS = {"synth": _cmd_synth, "run": _cmd_run, "gradcheck": _cmd_gradcheck,
            "report": _cmd_report, "sweep": _cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (X.ConfigError, A.ApplicabilityError, G.ConfigurationError, SequenceParseError) as e:
        print(f"advtrack: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"advtrack: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any failure mid-run maps to the runtime exit status
        print(f"advtrack: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
