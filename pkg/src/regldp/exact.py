"""Exact probability of a lattice type under uniform pairing x i.i.d. spins.

For spin counts c and bond counts m the probability is

    prod_i mu_i^c_i * n!/prod c_i!                 (spins)
  * prod_i (d c_i)!/prod_j m_ij!                   (route half-edges of class i)
  * prod_{i<j} m_ij! * prod_i (m_ii - 1)!!         (match the routed half-edges)
  / (nd - 1)!!

with (-1)!! = 1. ``brute_force_type_distribution`` recomputes the same law
by walking every matching and every spin vector.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .errors import ScaleGuardError, UsageError
from .measures import LatticeType, SpinLaw, rate_function, type_to_measures

EXACT_ND_THRESHOLD = 64
STIRLING_KAPPA = 3.0


def double_factorial(m: int) -> int:
    if m < -1:
        raise UsageError(f"double factorial undefined for {m}")
    return math.prod(range(m, 0, -2))


def log_double_factorial(m: int) -> float:
    """log(m!!) for odd m >= -1 (and m = 0, both giving 0)."""
    if m in (-1, 0):
        return 0.0
    if m < 0 or m % 2 == 0:
        raise UsageError(f"log_double_factorial expects an odd argument, got {m}")
    if m <= 2001:
        return math.log(double_factorial(m))
    k = (m + 1) // 2
    # (2k-1)!! = (2k)! / (2^k k!)
    return math.lgamma(2 * k + 1) - k * math.log(2) - math.lgamma(k + 1)


@dataclass(frozen=True)
class LogProb:
    """Natural-log probability; ``exact`` is set in exact mode."""

    log_value: float
    exact: Optional[Fraction] = None
    feasible: bool = True
    reason: str = ""

    @property
    def probability(self):
        if self.exact is not None:
            return self.exact
        return math.exp(self.log_value)


def log_fraction(x: Fraction) -> float:
    if x == 0:
        return -math.inf
    return math.log(x.numerator) - math.log(x.denominator)


def _check_law(t: LatticeType, mu: SpinLaw):
    if t.q != mu.q:
        raise UsageError(f"type has q={t.q} but the spin law has q={mu.q}")


def _exact_probability(t: LatticeType, mu: SpinLaw) -> Fraction:
    n, d, q, c, m = t.n, t.d, t.q, t.spin_counts, t.bond_counts
    fact = math.factorial
    spin = Fraction(1)
    for w, ci in zip(mu.exact, c):
        spin *= w ** ci
    count = fact(n)
    for ci in c:
        count //= fact(ci)
    for i in range(q):
        row = fact(d * c[i])
        for v in m[i]:
            row //= fact(v)
        count *= row * double_factorial(m[i][i] - 1)
        for j in range(i + 1, q):
            count *= fact(m[i][j])
    return spin * Fraction(count, double_factorial(n * d - 1))


def _float_log_probability(t: LatticeType, mu: SpinLaw) -> float:
    n, d, q, c, m = t.n, t.d, t.q, t.spin_counts, t.bond_counts
    lf = lambda k: math.lgamma(k + 1)  # noqa: E731
    out = 0.0
    for w, ci in zip(mu.weights, c):
        if ci:
            if w == 0:
                return -math.inf
            out += ci * math.log(w)
    out += lf(n) - sum(lf(ci) for ci in c)
    for i in range(q):
        out += lf(d * c[i]) - sum(lf(v) for v in m[i])
        out += log_double_factorial(m[i][i] - 1)
        out += sum(lf(m[i][j]) for j in range(i + 1, q))
    return out - log_double_factorial(n * d - 1)


def exact_type_probability(t: LatticeType, mu: SpinLaw, mode: str = "auto",
                           exact_threshold: int = EXACT_ND_THRESHOLD) -> LogProb:
    """P((n L1, nd L2) = t) under the unconditioned pairing law.

    ``mode`` is ``"exact"`` (rational arithmetic), ``"float"`` (log-gamma) or
    ``"auto"`` (exact when nd <= ``exact_threshold``). Types that break the
    lattice invariants get probability 0 with ``feasible=False``.
    """
    _check_law(t, mu)
    if mode not in ("auto", "exact", "float"):
        raise UsageError(f"unknown mode {mode!r}")
    if mode == "auto":
        mode = "exact" if t.n * t.d <= exact_threshold else "float"
    bad = t.violations()
    if bad:
        return LogProb(-math.inf, Fraction(0) if mode == "exact" else None,
                       feasible=False, reason="; ".join(bad))
    if mode == "exact":
        p = _exact_probability(t, mu)
        return LogProb(log_fraction(p), p)
    return LogProb(_float_log_probability(t, mu))


def stirling_log_bounds(t: LatticeType, mu: SpinLaw, kappa: float = STIRLING_KAPPA):
    """(lower, upper) = -n I(rho, nu) -/+ kappa q(q+1) log(nd+1)."""
    _check_law(t, mu)
    pair = type_to_measures(t)
    centre = -t.n * rate_function(pair.rho, pair.nu, mu, t.d)
    slack = stirling_slack(t.n, t.d, t.q, kappa)
    return centre - slack, centre + slack


def stirling_slack(n: int, d: int, q: int, kappa: float = STIRLING_KAPPA) -> float:
    return kappa * q * (q + 1) * math.log(n * d + 1)


@dataclass
class TypeDistribution:
    n: int
    d: int
    q: int
    entries: dict = field(default_factory=dict)

    def total(self) -> Fraction:
        return sum(self.entries.values(), Fraction(0))

    def get(self, t: LatticeType) -> Fraction:
        return self.entries.get(t, Fraction(0))

    def to_dict(self) -> dict:
        rows = [dict(t.to_dict(), probability=f"{p.numerator}/{p.denominator}")
                for t, p in self.entries.items()]
        return {"n": self.n, "d": self.d, "q": self.q, "types": rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj) -> "TypeDistribution":
        entries = {LatticeType.from_dict(r): Fraction(r["probability"]) for r in obj["types"]}
        return cls(int(obj["n"]), int(obj["d"]), int(obj["q"]), entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["spin_counts", "bond_counts", "probability", "log_probability"])
        for t, p in self.entries.items():
            w.writerow([json.dumps(list(t.spin_counts)),
                        json.dumps([list(r) for r in t.bond_counts]),
                        f"{float(p):.12g}", f"{log_fraction(p):.12g}"])
        return buf.getvalue()


ORACLE_MAX_ND = 14
ORACLE_MAX_SPIN_VECTORS = 10**6


def _matchings(points):
    if not points:
        yield ()
        return
    a, rest = points[0], points[1:]
    for k, b in enumerate(rest):
        for tail in _matchings(rest[:k] + rest[k + 1:]):
            yield ((a, b),) + tail


def brute_force_type_distribution(n: int, d: int, q: int, mu: SpinLaw) -> TypeDistribution:
    """Exact type law by exhaustive enumeration of matchings and spin vectors."""
    if mu.q != q:
        raise UsageError(f"spin law has q={mu.q}, expected {q}")
    if n < 1 or d < 1 or (n * d) % 2:
        raise UsageError("need positive n, d with nd even")
    if n * d > ORACLE_MAX_ND or q ** n > ORACLE_MAX_SPIN_VECTORS:
        raise ScaleGuardError(
            f"oracle limited to nd <= {ORACLE_MAX_ND} and q^n <= {ORACLE_MAX_SPIN_VECTORS}; "
            f"got nd={n * d}, q^n={q ** n}. Shrink the inputs.")
    # Many matchings share the same vertex multigraph; tally those first.
    graphs = Counter()
    n_matchings = 0
    for match in _matchings(tuple(range(n * d))):
        edges = tuple(sorted(tuple(sorted((a // d, b // d))) for a, b in match))
        graphs[edges] += 1
        n_matchings += 1
    tally = defaultdict(Fraction)
    for eta in itertools.product(range(q), repeat=n):
        weight = Fraction(1)
        for s in eta:
            weight *= mu.exact[s]
        if weight == 0:
            continue
        c = [0] * q
        for s in eta:
            c[s] += 1
        for edges, mult in graphs.items():
            m = [[0] * q for _ in range(q)]
            for u, v in edges:
                m[eta[u]][eta[v]] += 1
                m[eta[v]][eta[u]] += 1
            key = LatticeType(n, d, tuple(c), tuple(tuple(r) for r in m))
            tally[key] += weight * mult
    entries = {t: p / n_matchings for t, p in tally.items()}
    return TypeDistribution(n, d, q, entries)
