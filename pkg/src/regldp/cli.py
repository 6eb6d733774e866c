"""Command-line entry point: ``regldp <command> [options]``.

Every run writes a header (config echo, version, seed, timestamp) ahead of
its records, as the first JSON line or as ``#`` comment lines in CSV.

Exit codes: 0 ok, 2 bad configuration, 3 infeasible event, 4 oracle scale
guard, 5 rejection cap reached, 6 minimiser did not converge.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConvergenceError, InfeasibleEventError, RejectionCapError,
                     ScaleGuardError, UsageError)
from .exact import brute_force_type_distribution, exact_type_probability
from .ldp import EventSpec, convergence_report, minimize_rate
from .measures import LatticeType, SpinLaw, iter_types, rate_function
from .sampler import sample_record

log = logging.getLogger("regldp")

SEED_ENV = "REGLDP_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SCALE, EXIT_REJECTION, EXIT_CONVERGENCE = 0, 2, 3, 4, 5, 6


def _g(x):
    """Round floats to 12 significant digits for printing."""
    if isinstance(x, float):
        return float(f"{x:.12g}") if math.isfinite(x) else x
    if isinstance(x, dict):
        return {k: _g(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_g(v) for v in x]
    return x


def parse_mu(text, q=None) -> SpinLaw:
    try:
        total = sum(Fraction(t.strip()) for t in text.split(",") if t.strip())
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"cannot parse --mu {text!r}") from None
    if abs(float(total) - 1.0) > 1e-9:
        log.warning("spin law weights sum to %s; normalising", float(total))
    mu = SpinLaw.parse(text, normalize=True)
    if q is not None and mu.q != q:
        raise UsageError(f"--mu has {mu.q} weights but q={q}")
    return mu


def parse_matrix(text: str) -> np.ndarray:
    """``"a,b;c,d"`` or a JSON nested list."""
    text = text.strip()
    if text.startswith("["):
        return np.array(json.loads(text), dtype=float)
    return np.array([[float(Fraction(v)) for v in row.split(",")] for row in text.split(";")])


def _load_json_arg(text: str):
    path = Path(text)
    if not text.lstrip().startswith(("[", "{")) and path.exists():
        text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON: {exc}") from None


def _default_seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"${SEED_ENV}={env!r} is not an integer") from None
    return 0


class _Writer:
    def __init__(self, args, config):
        self.fmt = args.format
        self.out = open(args.output, "w") if args.output else sys.stdout
        header = {"artifact": "regldp", "version": __version__, "command": args.command,
                  "seed": config.get("seed"), "config": config,
                  "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()}
        if self.fmt == "json":
            self.json({"header": header})
        else:
            self.out.write("# " + json.dumps(header) + "\n")

    def json(self, obj):
        self.out.write(json.dumps(_g(obj)) + "\n")

    def text(self, s: str):
        self.out.write(s)

    def close(self):
        if self.out is not sys.stdout:
            self.out.close()
        else:
            self.out.flush()


def _require_even(n, d):
    if n < 1 or d < 1:
        raise UsageError("n and d must be positive")
    if (n * d) % 2:
        raise UsageError(f"n*d = {n * d} is odd; the pairing model needs an even number of half-edges")


def cmd_sample(args, config):
    _require_even(args.n, args.d)
    mu = parse_mu(args.mu, args.q) if args.mu else SpinLaw.uniform(args.q or 2)
    if args.format != "json":
        raise UsageError("sample only writes JSON lines")
    seed = config["seed"]
    w = _Writer(args, config)
    try:
        for i in range(args.samples):
            rec = sample_record(args.n, args.d, mu, seed, index=i, simple=args.simple,
                                max_attempts=args.max_attempts)
            w.json(dict(index=i, graph="simple" if args.simple else "multigraph", **rec.to_dict()))
    finally:
        w.close()


def _type_from_json(obj) -> LatticeType:
    """LatticeType JSON; n and d may be omitted and are then read off the counts."""
    if not isinstance(obj, dict):
        raise UsageError("--type must be a JSON object")
    obj = dict(obj)
    for short, full in (("spins", "spin_counts"), ("bonds", "bond_counts")):
        if short in obj:
            obj.setdefault(full, obj.pop(short))
    if "spin_counts" not in obj or "bond_counts" not in obj:
        raise UsageError("--type needs spin_counts and bond_counts")
    if "n" not in obj:
        obj["n"] = sum(int(c) for c in obj["spin_counts"])
    if "d" not in obj:
        total = sum(int(v) for row in obj["bond_counts"] for v in row)
        if obj["n"] < 1 or total % obj["n"]:
            raise UsageError("cannot infer d from the bond counts; pass it in the type JSON")
        obj["d"] = total // obj["n"]
    return LatticeType.from_dict(obj)


def cmd_exact(args, config):
    t = _type_from_json(_load_json_arg(args.type))
    mu = parse_mu(args.mu, t.q) if args.mu else SpinLaw.uniform(t.q)
    lp = exact_type_probability(t, mu, mode=args.mode)
    rec = {"type": t.to_dict(), "log_probability": lp.log_value, "feasible": lp.feasible}
    if lp.exact is not None:
        rec["probability"] = f"{lp.exact.numerator}/{lp.exact.denominator}"
    else:
        rec["probability"] = math.exp(lp.log_value)
    if not lp.feasible:
        rec["reason"] = lp.reason
    w = _Writer(args, config)
    w.json(rec)
    w.close()


def cmd_oracle(args, config):
    mu = parse_mu(args.mu, args.q) if args.mu else SpinLaw.uniform(args.q)
    dist = brute_force_type_distribution(args.n, args.d, mu.q, mu)
    w = _Writer(args, config)
    if args.format == "csv":
        w.text(dist.to_csv())
    else:
        for row in dist.to_dict()["types"]:
            w.json(row)
    w.close()


def cmd_types(args, config):
    types = iter_types(args.n, args.d, args.q)
    w = _Writer(args, config)
    for t in types:
        w.json(t.to_dict())
    w.close()


def cmd_rate(args, config):
    rho = np.array(parse_matrix(args.rho)).ravel()
    nu = parse_matrix(args.nu) if args.nu else np.outer(rho, rho)
    mu = parse_mu(args.mu, len(rho)) if args.mu else SpinLaw.uniform(len(rho))
    value = rate_function(rho, nu, mu, args.d)
    w = _Writer(args, config)
    w.json({"value": value})
    w.close()


def _event(args, q):
    return EventSpec.from_list(_load_json_arg(args.event), q) if args.event else EventSpec.always(q)


def cmd_minimize(args, config):
    mu = parse_mu(args.mu, args.q) if args.mu else SpinLaw.uniform(args.q or 2)
    res = minimize_rate(_event(args, mu.q), mu, args.d)
    w = _Writer(args, config)
    w.json(res.to_dict())
    w.close()


def cmd_verify(args, config):
    mu = parse_mu(args.mu, args.q) if args.mu else SpinLaw.uniform(args.q or 2)
    grid = [int(x) for x in args.n_grid.split(",")]
    report = convergence_report(_event(args, mu.q), args.d, mu, grid, args.samples,
                                config["seed"], workers=args.workers)
    w = _Writer(args, config)
    if args.format == "csv":
        w.text(report.to_csv())
    else:
        for row in report.rows:
            w.json(row)
    w.close()


COMMANDS = {"sample": cmd_sample, "exact": cmd_exact, "oracle": cmd_oracle, "types": cmd_types,
            "rate": cmd_rate, "minimize": cmd_minimize, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regldp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fmt="json"):
        sp.add_argument("--seed", type=int, default=None,
                        help=f"64-bit seed (default: ${SEED_ENV} or 0)")
        sp.add_argument("--output", "-o", default=None)
        sp.add_argument("--format", choices=("json", "csv"), default=fmt)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--mu", default=None, help="comma-separated weights, e.g. 0.6,0.4 or 2/3,1/3")
        return sp

    s = common(sub.add_parser("sample", help="stream pairing-model samples as JSON lines"))
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--q", type=int, default=None)
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--simple", action="store_true", help="reject non-simple pairings")
    s.add_argument("--max-attempts", type=int, default=10_000)

    s = common(sub.add_parser("exact", help="exact probability of one lattice type"))
    s.add_argument("--type", required=True, help="LatticeType JSON or a path to one")
    s.add_argument("--mode", choices=("auto", "exact", "float"), default="auto")

    s = common(sub.add_parser("oracle", help="brute-force type distribution"))
    for name in ("n", "d", "q"):
        s.add_argument(f"--{name}", type=int, required=True)

    s = common(sub.add_parser("types", help="list the type lattice"))
    for name in ("n", "d", "q"):
        s.add_argument(f"--{name}", type=int, required=True)

    s = common(sub.add_parser("rate", help="evaluate the rate function"))
    s.add_argument("--rho", required=True)
    s.add_argument("--nu", default=None, help="rows separated by ';' (default rho x rho)")
    s.add_argument("--d", type=int, required=True)

    s = common(sub.add_parser("minimize", help="infimum of the rate function over an event"))
    s.add_argument("--event", default=None, help="event JSON or a path to one (default: always true)")
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--q", type=int, default=None)

    s = common(sub.add_parser("verify", help="Monte Carlo vs. lattice vs. continuum table"), fmt="csv")
    s.add_argument("--event", default=None)
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--q", type=int, default=None)
    s.add_argument("--n-grid", required=True, help="comma-separated n values")
    s.add_argument("--samples", type=int, default=100_000)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise UsageError("--workers must be positive")
        config = {k: v for k, v in sorted(vars(args).items()) if k not in ("output",)}
        config["seed"] = _default_seed(args)
        if not 0 <= config["seed"] < 2**64:
            raise UsageError("seed must fit in 64 unsigned bits")
        COMMANDS[args.command](args, config)
    except ScaleGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCALE
    except InfeasibleEventError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except RejectionCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REJECTION
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (UsageError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
