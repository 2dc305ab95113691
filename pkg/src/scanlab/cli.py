"""Command-line front end: ``scanlab {critvals,test,power,verify,approxset}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import calibrations as cb
from . import intervals as iv
from . import local_stats as ls
from . import null_models as nm
from . import power as pw

log = logging.getLogger("scanlab")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2

DEFAULT_STAT = {"gaussian": "gauss_known", "poisson": "poisson", "bernoulli": "bernoulli"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(float(x)) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def _cal_list(text):
    out = [c.strip().lower() for c in text.split(",") if c.strip()]
    bad = [c for c in out if c not in cb.CALIBRATIONS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown calibration(s) {bad}; choose from {list(cb.CALIBRATIONS)}")
    return out


def _common(p, need_n=True):
    if need_n:
        p.add_argument("--n", type=int, required=True, help="sample size")
    p.add_argument("--alpha", type=float, default=0.10)
    p.add_argument("--model", choices=sorted(DEFAULT_STAT), default="gaussian", help="null model")
    p.add_argument("--stat", choices=sorted(ls.STATS), default=None, help="local statistic (default follows --model)")
    p.add_argument("--sigma", type=float, default=1.0, help="Gaussian noise level")
    p.add_argument("--rate", type=float, default=1.0, help="Poisson null rate")
    p.add_argument("--p", type=float, default=0.5, help="Bernoulli null probability")
    p.add_argument("--analytic-tail", action="store_true", help="Bonferroni uses the finite-sample signed-root bound")
    p.add_argument("--source", choices=("approx", "full"), default="approx", help="interval collection")
    p.add_argument("--sims", type=int, default=10_000, help="null simulations for critical values")
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default ${nm.SEED_ENV} or {nm.DEFAULT_SEED})")
    p.add_argument("--max-window-fraction", type=float, default=0.25)
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--cache-dir", default=".scanlab_cache", help="critical-value table cache ('' disables)")
    p.add_argument("--force", action="store_true", help="regenerate cached tables")
    p.add_argument("-o", "--output", default="-", help="output path ('-' for stdout)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="scanlab", description="Calibrated scan statistics: critical values, tests and power.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("critvals", help="critical value curves over window length (CSV)")
    _common(p)
    p.add_argument("--calibrations", type=_cal_list, default=list(cb.CALIBRATIONS))

    p = sub.add_parser("test", help="scan a data file and report the decision (JSON)")
    _common(p, need_n=False)
    p.add_argument("input", help="newline-delimited values; '#' lines are comments")
    p.add_argument("--calibration", choices=cb.CALIBRATIONS, default="bonferroni")
    p.add_argument("--limit", type=int, default=1000, help="max exceeding intervals listed")

    p = sub.add_parser("power", help="realized exponents (CSV)")
    _common(p)
    p.add_argument("--calibrations", type=_cal_list, default=list(cb.CALIBRATIONS))
    p.add_argument("--lengths", type=_int_list, default=list(pw.LENGTHS_N1E4))
    p.add_argument("--reps", type=int, default=10_000, help="power replicates per length")
    p.add_argument("--layout", choices=("long", "table"), default="long")

    p = sub.add_parser("verify", help="check the approximating-set guarantees")
    p.add_argument("--n", type=_int_list, required=True)
    p.add_argument("--sample", type=int, default=0, help="random intervals per n (0 = exhaustive)")
    p.add_argument("--max-window-fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", default="-")

    p = sub.add_parser("approxset", help="dump an approximating set as CSV (level,j,k)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--max-window-fraction", type=float, default=0.25)
    p.add_argument("-o", "--output", default="-")
    return ap


# ---------------------------------------------------------------------------
# helpers


def resolve_seed(args) -> int:
    return args.seed if getattr(args, "seed", None) is not None else nm.default_seed()


def config_of(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    cfg["seed"] = resolve_seed(args)
    cfg["version"] = __version__
    return cfg


def config_hash(cfg: dict) -> str:
    # worker count and paths do not change results
    keep = {k: v for k, v in cfg.items() if k not in ("threads", "output", "cache_dir", "force")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True, default=str).encode()).hexdigest()[:16]


def header(cfg: dict) -> str:
    return f"# scanlab {cfg['command']}\n# config_hash: {config_hash(cfg)}\n# config: {json.dumps(cfg, sort_keys=True, default=str)}\n"


def write_out(path: str, text: str):
    if path in ("-", ""):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_series(path: str) -> np.ndarray:
    vals = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                v = float(line)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: cannot parse {line!r} as a number") from None
            if not math.isfinite(v):
                raise UsageError(f"{path}:{lineno}: non-finite value {line!r}")
            vals.append(v)
    if len(vals) < 2:
        raise UsageError(f"{path}: need at least two values")
    return np.asarray(vals)


def make_stat(args) -> ls.LocalStat:
    name = args.stat or DEFAULT_STAT[args.model]
    return ls.make_stat(name, sigma=args.sigma, analytic_tail=args.analytic_tail)


def make_model(args) -> nm.NullModel:
    return nm.make_model(args.model, sigma=args.sigma, rate=args.rate, p=args.p)


def check_pair(stat: ls.LocalStat, cals):
    sim = [c for c in cals if c in cb.SIMULATED]
    if sim and not stat.simulable:
        raise UsageError(
            f"statistic {stat.name!r} has no simulable null; calibrations {sim} are unavailable (use bonferroni)"
        )
    if "bonferroni" in cals and not stat.has_tail_bound:
        raise UsageError(f"statistic {stat.name!r} has no tail bound; bonferroni is unavailable")


def load_tables(args, stat, model, source, cals):
    check_pair(stat, cals)
    if args.sims < 1 and any(c in cb.SIMULATED for c in cals):
        raise UsageError("--sims must be >= 1 for simulated calibrations (bonferroni needs none)")
    if 0 < args.sims < 100:
        log.warning("fewer than 100 null simulations; tables are for smoke tests only")
    return cb.get_tables(
        cals,
        stat,
        model,
        source,
        alpha=args.alpha,
        n_sims=max(args.sims, 0),
        seed=resolve_seed(args),
        max_window_fraction=args.max_window_fraction,
        cache_dir=args.cache_dir or None,
        force=args.force,
        workers=args.threads,
    )


def _source(args, n):
    try:
        return cb.make_source(args.source, n, args.max_window_fraction)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_critvals(args) -> int:
    stat, model = make_stat(args), make_model(args)
    source = _source(args, args.n)
    order = [c for c in cb.CALIBRATIONS if c in args.calibrations]
    tables = load_tables(args, stat, model, source, order)
    w = np.arange(1, source.max_window + 1)
    curves = cb.critical_value_curve(tables, w, stat)
    buf = io.StringIO()
    buf.write(header(config_of(args)))
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["window_length", *order])
    for i, length in enumerate(w.tolist()):
        wr.writerow([length, *(f"{curves[c][i]:.6f}" for c in order)])
    write_out(args.output, buf.getvalue())
    return EXIT_OK


def cmd_test(args) -> int:
    data = read_series(args.input)
    n = data.size
    stat = make_stat(args)
    if args.model == "gaussian":
        model = make_model(args)
    elif isinstance(stat, ls.SignedRootLR):
        # critical values from the fitted null, f at the overall MLE
        model = nm.PluginExpFam(args.model, data)
    else:
        model = nm.Permutation(data)
    source = _source(args, n)
    tables = load_tables(args, stat, model, source, [args.calibration])
    table = tables[args.calibration]
    decision = cb.run_test(data, stat, table, source)
    cfg = config_of(args)
    report = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "n": n,
        "statistic": ls.stat_key(stat),
        "table": table.to_dict(),
        "decision": decision.to_dict(limit=args.limit),
    }
    write_out(args.output, json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    return EXIT_OK


def cmd_power(args) -> int:
    stat, model = make_stat(args), make_model(args)
    source = _source(args, args.n)
    order = [c for c in cb.CALIBRATIONS if c in args.calibrations]
    tables = load_tables(args, stat, model, source, order)
    seed = resolve_seed(args)

    def progress(length, done):
        log.info("length %d: %d/%d replicates", length, done, args.reps)

    try:
        results = pw.run_power_study(
            stat, model, source, tables, args.lengths, args.reps, seed, workers=args.threads, progress=progress
        )
    except pw.PowerStudyError as exc:
        partial = pw.power_csv(exc.partial) if exc.partial else ""
        sys.stderr.write(f"scanlab: {exc}\n# partial results\n{partial}")
        return EXIT_USAGE
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for r in results:
        if r.non_monotone:
            log.warning("%s, length %d: %d replicates failed the monotonicity spot-check", r.calibration, r.signal_length, r.non_monotone)
    body = pw.power_csv(results) if args.layout == "long" else pw.emit_table(results)
    write_out(args.output, header(config_of(args)) + body)
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = resolve_seed(args)
    lines = [header(config_of(args)).rstrip("\n")]
    ok = True
    for n in args.n:
        approx = iv.build_approx_set(n, args.max_window_fraction)
        counts = iv.verify_count_bounds(approx)
        # approximation is checked on the set with levels up to n/2, so that
        # every |I| <= max_window_fraction * n has a level of its own
        wide = iv.build_approx_set(n, 0.5)
        cap = max(1, int(n * args.max_window_fraction))
        if args.sample > 0:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(n,))))
            ivs = iv.sample_intervals(n, cap, args.sample, rng)
            mode = f"sampled {args.sample}"
        else:
            ivs = iv.all_intervals_up_to(n, cap)
            mode = "exhaustive"
        approx_rep = iv.verify_approximation(wide, ivs)
        for name, rep in (("counts", counts), ("approximation", approx_rep)):
            bad = rep.violations
            ok &= not bad
            lines.append(f"n={n} {name} ({mode if name == 'approximation' else 'all levels and blocks'}): "
                         f"{'PASS' if not bad else 'FAIL'} {len(rep.checks) - len(bad)}/{len(rep.checks)}")
            for b in bad:
                lines.append(f"  violation: {b['check']} value={b['value']} bound={b['bound']}")
    lines.append("verify: " + ("PASS" if ok else "FAIL"))
    write_out(args.output, "\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_approxset(args) -> int:
    approx = iv.build_approx_set(args.n, args.max_window_fraction)
    buf = io.StringIO()
    buf.write(header(config_of(args)))
    buf.write("level,j,k\n")
    for lev, j, k in approx.iter_levels():
        block = np.column_stack([np.full(j.size, lev.level), j, k])
        np.savetxt(buf, block, fmt="%d", delimiter=",")
    write_out(args.output, buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "critvals": cmd_critvals,
    "test": cmd_test,
    "power": cmd_power,
    "verify": cmd_verify,
    "approxset": cmd_approxset,
}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, OSError) as exc:
        sys.stderr.write(f"scanlab {args.command}: error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
