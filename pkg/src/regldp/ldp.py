"""Numerical checks of the large deviation principle for (L1, L2).

Three ingredients: plain Monte Carlo estimates of P((L1, L2) in F), the
continuum infimum of the rate function over F, and the infimum over the
finite type lattice. Events are closed polytopes described by linear
inequalities in rho and nu.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linprog, lsq_linear, minimize
from scipy.stats import binomtest

from .errors import ConvergenceError, InfeasibleEventError, UsageError
from .exact import exact_type_probability
from .measures import (BondMeasure, SpinLaw, SpinMeasure, iter_types,
                       rate_function, xlogy_ratio)
from .sampler import make_rng, sample_counts_batch

log = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-12
KKT_TOL = 1e-7


@dataclass(frozen=True, eq=False)
class Constraint:
    """``sense`` in {">=", "<="}: sum(coeffs * target) sense bound."""

    target: str
    coeffs: np.ndarray
    bound: float
    sense: str = ">="

    def __post_init__(self):
        if self.target not in ("rho", "nu"):
            raise UsageError(f"constraint target must be 'rho' or 'nu', not {self.target!r}")
        if self.sense not in (">=", "<="):
            raise UsageError(f"sense must be '>=' or '<=', not {self.sense!r}")
        a = np.array(self.coeffs, dtype=float)
        if a.ndim != (1 if self.target == "rho" else 2) or not np.isfinite(a).all():
            raise UsageError(f"bad coefficients for a {self.target} constraint: {self.coeffs!r}")
        if self.target == "nu" and a.shape[0] != a.shape[1]:
            raise UsageError("nu coefficients must be square")
        if not math.isfinite(self.bound):
            raise UsageError("constraint bound must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "coeffs", a)
        object.__setattr__(self, "bound", float(self.bound))

    @property
    def q(self) -> int:
        return self.coeffs.shape[0]

    @property
    def sign(self) -> float:
        return 1.0 if self.sense == ">=" else -1.0

    def slack(self, rho, nu):
        """Signed slack, nonnegative when satisfied; broadcasts over leading axes."""
        if self.target == "rho":
            val = np.asarray(rho) @ self.coeffs
        else:
            val = np.tensordot(np.asarray(nu), self.coeffs, axes=([-2, -1], [0, 1]))
        return self.sign * (val - self.bound)

    def to_dict(self) -> dict:
        return {"target": self.target, "coeffs": self.coeffs.tolist(),
                "bound": self.bound, "sense": self.sense}

    @classmethod
    def from_dict(cls, obj, q=None) -> "Constraint":
        target = obj.get("target")
        if "entry" in obj:
            if q is None:
                raise UsageError("box constraints given by 'entry' need q")
            entry = obj["entry"]
            if target == "rho":
                a = np.zeros(q)
                a[int(entry if not isinstance(entry, list) else entry[0])] = 1.0
            else:
                a = np.zeros((q, q))
                a[int(entry[0]), int(entry[1])] = 1.0
        else:
            a = obj["coeffs"]
        return cls(target, a, float(obj["bound"]), obj.get("sense", ">="))


@dataclass(frozen=True)
class EventSpec:
    """Conjunction of closed linear constraints; no constraints means always true."""

    q: int
    constraints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        for c in self.constraints:
            if c.q != self.q:
                raise UsageError(f"constraint has q={c.q}, event has q={self.q}")

    @property
    def rho_only(self) -> bool:
        return all(c.target == "rho" for c in self.constraints)

    def contains(self, rho, nu, tol: float = MEMBERSHIP_TOL):
        rho = np.asarray(rho, dtype=float)
        ok = np.ones(rho.shape[:-1], dtype=bool)
        for c in self.constraints:
            ok &= c.slack(rho, nu) >= -tol
        return ok

    def scaled(self, factor: float) -> "EventSpec":
        """Same feasible set, every row multiplied by ``factor`` > 0."""
        if factor <= 0:
            raise UsageError("scale factor must be positive")
        return EventSpec(self.q, tuple(Constraint(c.target, c.coeffs * factor, c.bound * factor, c.sense)
                                       for c in self.constraints))

    def to_list(self) -> list:
        return [c.to_dict() for c in self.constraints]

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    @classmethod
    def from_list(cls, items, q=None) -> "EventSpec":
        if not isinstance(items, list):
            raise UsageError("an event is a JSON array of constraints")
        cons = [Constraint.from_dict(obj, q) for obj in items]
        if q is None:
            if not cons:
                raise UsageError("cannot infer q from an empty event")
            q = cons[0].q
        return cls(q, tuple(cons))

    @classmethod
    def from_json(cls, text: str, q=None) -> "EventSpec":
        return cls.from_list(json.loads(text), q)

    @classmethod
    def always(cls, q: int) -> "EventSpec":
        return cls(q, ())

    @classmethod
    def rho_at_least(cls, q: int, i: int, bound: float) -> "EventSpec":
        a = np.zeros(q)
        a[i] = 1.0
        return cls(q, (Constraint("rho", a, bound, ">="),))

    @classmethod
    def nu_at_least(cls, q: int, i: int, j: int, bound: float) -> "EventSpec":
        a = np.zeros((q, q))
        a[i, j] = 1.0
        return cls(q, (Constraint("nu", a, bound, ">="),))


# ---------------------------------------------------------------- Monte Carlo

@dataclass(frozen=True)
class McEstimate:
    hits: int
    samples: int
    p_hat: float
    log_rate: float
    ci95: tuple

    def to_dict(self) -> dict:
        return {"hits": self.hits, "samples": self.samples, "p_hat": self.p_hat,
                "log_rate": self.log_rate, "ci95": list(self.ci95)}


def wilson_interval(hits: int, samples: int, level: float = 0.95) -> tuple:
    ci = binomtest(hits, samples).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def default_block_size(n: int, d: int) -> int:
    return max(1, min(8192, 2_000_000 // (n * d + n)))


def _count_block(args):
    event, n, d, weights, seed, block, size = args
    mu = SpinLaw(weights)
    c, m = sample_counts_batch(n, d, mu, size, make_rng(seed, block))
    return int(event.contains(c / n, m / (n * d)).sum())


def mc_event_probability(event: EventSpec, n: int, d: int, mu: SpinLaw, samples: int, seed: int,
                         workers: int = 1, block_size: int | None = None) -> McEstimate:
    """Plain Monte Carlo estimate of P((L1, L2) in event).

    Samples are drawn in fixed blocks; block ``b`` uses stream ``b`` of
    ``seed``. The result depends on (seed, samples, block_size) only, not on
    ``workers``.
    """
    if samples < 1:
        raise UsageError("samples must be positive")
    if event.q != mu.q:
        raise UsageError(f"event has q={event.q}, spin law q={mu.q}")
    if (n * d) % 2:
        raise UsageError(f"nd = {n * d} is odd")
    block = block_size or default_block_size(n, d)
    jobs = [(event, n, d, mu.exact, seed, b, min(block, samples - b * block))
            for b in range(-(-samples // block))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            hits = sum(pool.map(_count_block, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        hits = sum(map(_count_block, jobs))
    p_hat = hits / samples
    rate = -math.log(p_hat) / n if hits else math.inf
    return McEstimate(hits, samples, p_hat, rate, wilson_interval(hits, samples))


def exact_event_probability(event: EventSpec, n: int, d: int, mu: SpinLaw) -> Fraction:
    """Sum of exact type probabilities over the lattice types inside ``event``."""
    total = Fraction(0)
    for t in iter_types(n, d, mu.q):
        rho = np.array(t.spin_counts) / n
        nu = np.array(t.bond_counts) / (n * d)
        if event.contains(rho, nu):
            total += exact_type_probability(t, mu, "exact").exact
    return total


# ------------------------------------------------------------ minimisation

@dataclass(frozen=True)
class MinimizerResult:
    rho_star: SpinMeasure
    nu_star: BondMeasure
    value: float
    kkt_residual: float
    iterations: int

    def to_dict(self) -> dict:
        return {"rho_star": self.rho_star.mass.tolist(), "nu_star": self.nu_star.mass.tolist(),
                "value": self.value, "kkt_residual": self.kkt_residual,
                "iterations": self.iterations}


@dataclass
class _Problem:
    """min f(x) s.t. Aeq x = beq, G x >= h, x >= 0; ``lift`` maps x to (rho, nu)."""

    f: object
    grad: object
    hess: object
    Aeq: np.ndarray
    beq: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lift: object

    @property
    def size(self) -> int:
        return self.Aeq.shape[1]

    def restrict(self, keep: np.ndarray) -> "_Problem":
        """Freeze the variables outside ``keep`` at zero."""
        K = self.size
        idx = np.flatnonzero(keep)

        def expand(y):
            x = np.zeros(K)
            x[idx] = y
            return x

        return _Problem(
            f=lambda y: self.f(expand(y)),
            grad=lambda y: self.grad(expand(y))[idx],
            hess=lambda y: self.hess(expand(y))[np.ix_(idx, idx)],
            Aeq=self.Aeq[:, idx], beq=self.beq, G=self.G[:, idx], h=self.h,
            lift=lambda y: self.lift(expand(y)))


def _event_rows(event: EventSpec, rho_map: np.ndarray, nu_map) -> tuple:
    """Constraint rows in >= form for variables x with rho = rho_map @ x."""
    rows, rhs = [], []
    for c in event.constraints:
        if c.target == "rho":
            row = c.coeffs @ rho_map
        else:
            if nu_map is None:
                raise AssertionError("nu constraint in a rho-only problem")
            row = nu_map(c.coeffs)
        rows.append(c.sign * row)
        rhs.append(c.sign * c.bound)
    K = rho_map.shape[1]
    return np.array(rows).reshape(-1, K), np.array(rhs, dtype=float)


def _safe_log(x):
    return np.log(np.maximum(x, 1e-300))


def _rho_problem(event: EventSpec, mu: np.ndarray, states: list) -> _Problem:
    q = len(mu)
    K = len(states)
    lm = np.log(mu[states])
    P = np.zeros((q, K))
    P[states, np.arange(K)] = 1.0
    G, h = _event_rows(event, P, None)

    def lift(x):
        rho = P @ x
        rho = rho / rho.sum()
        return rho, np.outer(rho, rho)

    return _Problem(
        f=lambda x: float(xlogy_ratio(x, mu[states]).sum()),
        grad=lambda x: _safe_log(x) - lm + 1.0,
        hess=lambda x: np.diag(1.0 / np.maximum(x, 1e-300)),
        Aeq=np.ones((1, K)), beq=np.ones(1), G=G, h=h, lift=lift)


def _joint_problem(event: EventSpec, mu: np.ndarray, d: int, states: list) -> _Problem:
    """Variables are the upper-triangular entries of nu on ``states``."""
    q = len(mu)
    pairs = [(i, j) for a, i in enumerate(states) for j in states[a:]]
    K = len(pairs)
    M = np.zeros((q, K))
    w = np.zeros(K)
    for k, (i, j) in enumerate(pairs):
        M[i, k] += 1.0
        if i != j:
            M[j, k] += 1.0
        w[k] = 1.0 if i == j else 2.0
    Ms = M[states]
    lm = np.log(mu[states])
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])

    def nu_map(A):
        return np.where(ii == jj, A[ii, jj], A[ii, jj] + A[jj, ii])

    G, h = _event_rows(event, M, nu_map)

    # On the admissible set I = (1-d) sum rho log rho - sum rho log mu + d/2 sum nu log nu.
    def f(x):
        rho = Ms @ x
        return float((1 - d) * xlogy_ratio(rho, 1.0).sum() - rho @ lm
                     + 0.5 * d * (w * xlogy_ratio(x, 1.0)).sum())

    def grad(x):
        rho = Ms @ x
        return Ms.T @ ((1 - d) * (_safe_log(rho) + 1.0) - lm) + 0.5 * d * w * (_safe_log(x) + 1.0)

    def hess(x):
        rho = np.maximum(Ms @ x, 1e-300)
        return Ms.T @ np.diag((1 - d) / rho) @ Ms + np.diag(0.5 * d * w / np.maximum(x, 1e-300))

    def lift(x):
        x = x / (w @ x)
        nu = np.zeros((q, q))
        nu[ii, jj] = x
        nu[jj, ii] = x
        return nu.sum(axis=1), nu

    return _Problem(f, grad, hess, w[None, :], np.ones(1), G, h, lift)


def _lp(c, prob: _Problem):
    return linprog(c, A_ub=-prob.G if len(prob.h) else None, b_ub=-prob.h if len(prob.h) else None,
                   A_eq=prob.Aeq, b_eq=prob.beq, bounds=(0, None), method="highs")


def _interior_points(prob: _Problem):
    """Feasibility check, dead-variable detection and a family of start points.

    Maximises each variable in turn; a variable whose maximum is zero is
    zero on the whole feasible set. The mean of the maximisers is positive in
    every live variable.
    """
    K = prob.size
    vertices, live = [], np.zeros(K, dtype=bool)
    for k in range(K):
        c = np.zeros(K)
        c[k] = -1.0
        res = _lp(c, prob)
        if res.status == 2:
            return None, None
        if res.status != 0:
            raise ConvergenceError(f"feasibility LP failed: {res.message}")
        if -res.fun > 1e-12:
            live[k] = True
        vertices.append(np.clip(res.x, 0.0, None))
    return live, np.array(vertices)


def _kkt(prob: _Problem, x: np.ndarray, act_tol: float = 1e-9):
    g = prob.grad(x)
    slack = prob.G @ x - prob.h
    active = np.flatnonzero(slack <= act_tol)
    A = np.vstack([prob.Aeq, prob.G[active]])
    n_eq = prob.Aeq.shape[0]
    lb = np.r_[np.full(n_eq, -np.inf), np.zeros(len(active))]
    lam = lsq_linear(A.T, g, bounds=(lb, np.inf), method="bvls", tol=1e-14).x
    stat = np.abs(g - A.T @ lam).max()
    feas = max(np.abs(prob.Aeq @ x - prob.beq).max(),
               max(0.0, -slack.min()) if len(slack) else 0.0,
               max(0.0, -x.min()))
    comp = np.abs(lam[n_eq:] * slack[active]).max() if len(active) else 0.0
    return float(max(stat, feas, comp)), active


def _newton_polish(prob: _Problem, x: np.ndarray, active: np.ndarray, steps: int = 30):
    """Newton iterations on the KKT system with the active set held fixed."""
    A = np.vstack([prob.Aeq, prob.G[active]])
    b = np.r_[prob.beq, prob.h[active]]
    K, m = prob.size, A.shape[0]
    inactive = np.setdiff1d(np.arange(len(prob.h)), active)
    used = 0
    for used in range(1, steps + 1):
        g, H = prob.grad(x), prob.hess(x)
        kkt = np.block([[H, -A.T], [A, np.zeros((m, m))]])
        rhs = np.r_[-g, b - A @ x]
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        dx = sol[:K]
        alpha = 1.0
        neg = dx < 0
        if neg.any():
            alpha = min(alpha, 0.95 * np.min(-x[neg] / dx[neg]))
        if len(inactive):
            gs = prob.G[inactive] @ dx
            s = prob.G[inactive] @ x - prob.h[inactive]
            dec = gs < 0
            if dec.any():
                alpha = min(alpha, 0.95 * np.min(-s[dec] / gs[dec]))
        x = x + alpha * dx
        if np.abs(alpha * dx).max() < 1e-15:
            break
    return x, used


def _solve(prob: _Problem, starts, max_iter: int):
    """Best local solution over the given starts, as (x, value, residual, iterations)."""
    K = prob.size
    cons = [{"type": "eq", "fun": lambda x: prob.Aeq @ x - prob.beq, "jac": lambda x: prob.Aeq}]
    if len(prob.h):
        cons.append({"type": "ineq", "fun": lambda x: prob.G @ x - prob.h, "jac": lambda x: prob.G})
    best = None
    total_iter = 0
    for x0 in starts:
        with warnings.catch_warnings():
            # SLSQP clips its own trial points to the bounds and says so.
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(prob.f, x0, jac=prob.grad, method="SLSQP", bounds=[(1e-14, None)] * K,
                           constraints=cons, options={"ftol": 1e-16, "maxiter": max_iter})
        total_iter += int(res.nit)
        x = np.clip(res.x, 1e-14, None)
        r0, active = _kkt(prob, x)
        if r0 > KKT_TOL and (x > 1e-10).all():
            # Drop active rows whose multiplier wants them released, then polish.
            for _ in range(3):
                xp, used = _newton_polish(prob, x, active)
                total_iter += used
                if not np.isfinite(xp).all() or (xp <= 0).any():
                    break
                r1, active1 = _kkt(prob, xp)
                if r1 < r0:
                    x, r0 = xp, r1
                if r0 <= KKT_TOL or np.array_equal(active1, active):
                    break
                active = active1
        cand = (x, prob.f(x), r0)
        if best is None or _better(cand, best):
            best = cand
    return best + (total_iter,)


def _better(a, b) -> bool:
    # Values equal to 1e-9 are ties, broken by the KKT residual.
    if a[1] < b[1] - 1e-9:
        return True
    if a[1] > b[1] + 1e-9:
        return False
    return a[2] < b[2]


def _starts(vertices: np.ndarray, live: np.ndarray, extra: int, rng) -> list:
    V = vertices[:, live]
    centre = V.mean(axis=0)
    out = [centre]
    for v in V[:extra]:
        out.append(0.5 * centre + 0.5 * v)
    for _ in range(max(0, extra - len(V))):
        lam = rng.dirichlet(np.ones(len(V)))
        out.append(0.5 * centre + 0.5 * lam @ V)
    return out


def minimize_rate(event: EventSpec, mu: SpinLaw, d: int, max_iter: int = 1000,
                  n_starts: int = 6, max_support_q: int = 6) -> MinimizerResult:
    """Infimum of the rate function over the admissible pairs in ``event``.

    Events on rho alone use nu = rho x rho and minimise H(rho|mu), which is
    strictly convex. Otherwise the objective is not convex in general, so
    the solver restarts from several interior points and, for q up to
    ``max_support_q``, repeats on every support of rho (an optimum may put
    no mass on some spins). Raises InfeasibleEventError when no pair with
    finite rate lies in the event, and ConvergenceError (carrying the best
    iterate) when the KKT residual stays above 1e-7.
    """
    if event.q != mu.q:
        raise UsageError(f"event has q={event.q}, spin law q={mu.q}")
    if d < 1:
        raise UsageError("d must be positive")
    weights = mu.weights
    support = [i for i in range(mu.q) if weights[i] > 0]
    rng = np.random.default_rng(0)

    if event.rho_only:
        supports = [support]
        build = lambda s: _rho_problem(event, weights, s)  # noqa: E731
    else:
        if len(support) <= max_support_q:
            supports = [list(s) for r in range(len(support), 0, -1)
                        for s in itertools.combinations(support, r)]
        else:
            supports = [support]
        build = lambda s: _joint_problem(event, weights, d, s)  # noqa: E731

    best, iterations = None, 0
    for states in supports:
        prob = build(states)
        live, vertices = _interior_points(prob)
        if live is None or not live.any():
            continue
        if not event.rho_only:
            # A spin whose row is forced to zero belongs to a smaller support.
            pairs = _pairs(states)
            if any(not any(live[k] for k, p in enumerate(pairs) if s in p) for s in states):
                continue
        sub = prob.restrict(live)
        x, value, resid, it = _solve(sub, _starts(vertices, live, n_starts - 1, rng), max_iter)
        iterations += it
        cand = (sub.lift(x), value, resid)
        if best is None or _better(cand, best):
            best = cand
    if best is None:
        raise InfeasibleEventError("no admissible pair with finite rate satisfies the event")
    (rho, nu), _, resid = best
    rho = np.clip(rho, 0.0, None)
    rho = rho / rho.sum()
    value = rate_function(rho, nu, weights, d, tol=1e-8)
    result = MinimizerResult(SpinMeasure(rho), BondMeasure(nu), value, resid, iterations)
    if resid > KKT_TOL:
        raise ConvergenceError(f"KKT residual {resid:.3g} above {KKT_TOL}", best=result)
    return result


def _pairs(states):
    return [(i, j) for a, i in enumerate(states) for j in states[a:]]


# --------------------------------------------------------------- reporting

def lattice_infimum(event: EventSpec, n: int, d: int, mu: SpinLaw, max_types: int = 500_000):
    """min of I over lattice types inside ``event``; ``None`` if there are too many types."""
    best = math.inf
    weights = mu.weights
    for k, t in enumerate(iter_types(n, d, mu.q)):
        if k >= max_types:
            return None
        rho = np.array(t.spin_counts) / n
        nu = np.array(t.bond_counts) / (n * d)
        if event.contains(rho, nu):
            best = min(best, rate_function(rho, nu, weights, d))
    return best


REPORT_COLUMNS = ("n", "p_hat", "ci_lo", "ci_hi", "mc_rate", "lattice_inf", "continuum_inf")


@dataclass
class ConvergenceReport:
    rows: list = field(default_factory=list)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r["n"]] + [_fmt(r[c]) for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()


def _fmt(x) -> str:
    return f"{x:.12g}"


def convergence_report(event: EventSpec, d: int, mu: SpinLaw, n_grid, samples_per_n: int,
                       seed: int, workers: int = 1, max_types: int = 500_000) -> ConvergenceReport:
    """One row per n: Monte Carlo rate, lattice infimum and continuum infimum of I."""
    for n in n_grid:
        if (n * d) % 2:
            raise UsageError(f"n={n} gives odd nd with d={d}")
    continuum = minimize_rate(event, mu, d).value
    report = ConvergenceReport()
    for n in n_grid:
        mc = mc_event_probability(event, n, d, mu, samples_per_n, seed, workers=workers)
        lat = lattice_infimum(event, n, d, mu, max_types)
        if lat is None:
            log.warning("n=%d: type lattice too large, lattice_inf falls back to the continuum value", n)
            lat = continuum
        report.rows.append({"n": n, "p_hat": mc.p_hat, "ci_lo": mc.ci95[0], "ci_hi": mc.ci95[1],
                            "mc_rate": mc.log_rate, "lattice_inf": lat, "continuum_inf": continuum})
    return report
