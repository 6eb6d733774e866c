"""Spin and bond measures, relative entropy, the rate function and the type lattice.

Spins are indexed 0..q-1 internally. A bond measure is a symmetric q x q
matrix; its row marginal is the spin measure it is admissible for.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from .errors import UsageError

ADMISSIBLE_TOL = 1e-9


def _frozen(a, ndim):
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise UsageError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _as_fraction(w) -> Fraction:
    if isinstance(w, str):
        return Fraction(w.strip())
    if isinstance(w, (Fraction, int)):
        return Fraction(w)
    return Fraction(float(w))


@dataclass(frozen=True, eq=False)
class SpinLaw:
    """Prior on [q] from which site spins are drawn i.i.d.

    ``exact`` keeps the weights as rationals (strings like ``"2/3"`` are
    accepted) so that exact-mode probabilities stay exact.
    """

    exact: tuple

    def __init__(self, weights: Sequence):
        exact = tuple(_as_fraction(w) for w in weights)
        if not exact:
            raise UsageError("a spin law needs q >= 1 weights")
        if any(w < 0 for w in exact):
            raise UsageError(f"negative weight in {weights!r}")
        if abs(float(sum(exact)) - 1.0) > 1e-12:
            raise UsageError(f"weights sum to {float(sum(exact))!r}, not 1")
        object.__setattr__(self, "exact", exact)

    @classmethod
    def uniform(cls, q: int) -> "SpinLaw":
        return cls([Fraction(1, q)] * q)

    @classmethod
    def parse(cls, text: str, normalize: bool = False) -> "SpinLaw":
        """Parse ``"0.6,0.4"`` or ``"2/3,1/3"``; optionally rescale to mass 1."""
        try:
            ws = [_as_fraction(t) for t in text.split(",") if t.strip()]
        except (ValueError, ZeroDivisionError) as exc:
            raise UsageError(f"cannot parse spin law {text!r}: {exc}") from None
        if normalize:
            total = sum(ws)
            if total <= 0:
                raise UsageError(f"spin law {text!r} has no mass")
            ws = [w / total for w in ws]
        return cls(ws)

    @property
    def q(self) -> int:
        return len(self.exact)

    @property
    def weights(self) -> np.ndarray:
        return np.array([float(w) for w in self.exact])

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, SpinLaw) and self.exact == other.exact

    def __hash__(self):
        return hash(self.exact)

    def __repr__(self):
        return f"SpinLaw({[str(w) for w in self.exact]})"


@dataclass(frozen=True, eq=False)
class SpinMeasure:
    mass: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mass, 1)
        if (m < 0).any() or abs(m.sum() - 1.0) > 1e-12:
            raise UsageError(f"not a probability vector: {m}")
        object.__setattr__(self, "mass", m)

    @property
    def q(self) -> int:
        return len(self.mass)

    def __array__(self, dtype=None, copy=None):
        return self.mass if dtype is None else self.mass.astype(dtype)


@dataclass(frozen=True, eq=False)
class BondMeasure:
    mass: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mass, 2)
        if m.shape[0] != m.shape[1] or not np.array_equal(m, m.T):
            raise UsageError("bond measure must be a symmetric square matrix")
        if (m < 0).any():
            raise UsageError("bond measure has negative entries")
        object.__setattr__(self, "mass", m)

    @property
    def q(self) -> int:
        return self.mass.shape[0]

    def marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    def __array__(self, dtype=None, copy=None):
        return self.mass if dtype is None else self.mass.astype(dtype)


@dataclass(frozen=True)
class AdmissiblePair:
    rho: SpinMeasure
    nu: BondMeasure

    def __post_init__(self):
        if not is_admissible(self.rho, self.nu, tol=1e-12):
            raise UsageError("pair is not admissible")


def xlogy_ratio(p, w) -> np.ndarray:
    """Elementwise p*log(p/w) with 0*log(0/w) = 0 and p*log(p/0) = inf for p > 0."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    out = np.zeros(np.broadcast(p, w).shape)
    pos = p > 0
    pb = np.broadcast_to(p, out.shape)
    wb = np.broadcast_to(w, out.shape)
    pos = np.broadcast_to(pos, out.shape)
    dead = pos & (wb <= 0)
    live = pos & ~dead
    out[live] = pb[live] * (np.log(pb[live]) - np.log(wb[live]))
    out[dead] = np.inf
    return out


def relative_entropy(p, w) -> float:
    """Relative entropy sum_x p(x) log(p(x)/w(x)) in nats.

    Infinite when p charges a point w does not.
    """
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    if p.shape != w.shape:
        raise UsageError(f"index sets differ: {p.shape} vs {w.shape}")
    if (p < 0).any() or (w < 0).any():
        raise UsageError("measures must be nonnegative")
    h = float(xlogy_ratio(p, w).sum())
    if abs(p.sum() - w.sum()) <= 1e-12:
        # Gibbs: nonnegative for equal masses; drop rounding noise below zero.
        h = max(h, 0.0)
    return h


def is_admissible(rho, nu, tol: float = 1e-12) -> bool:
    rho = np.asarray(rho, dtype=float)
    nu = np.asarray(nu, dtype=float)
    q = rho.shape[0]
    if rho.ndim != 1 or nu.shape != (q, q):
        raise UsageError(f"dimension mismatch: rho {rho.shape}, nu {nu.shape}")
    if (nu < -tol).any() or (rho < -tol).any():
        return False
    if np.abs(nu - nu.T).max() > tol:
        return False
    if abs(nu.sum() - 1.0) > tol:
        return False
    return bool(np.abs(nu.sum(axis=1) - rho).max() <= tol)


def rate_function(rho, nu, mu, d: int, tol: float = ADMISSIBLE_TOL) -> float:
    """H(rho|mu) + d/2 * H(nu|rho x rho) on admissible pairs, +inf elsewhere."""
    rho = np.asarray(rho, dtype=float)
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != rho.shape:
        raise UsageError(f"dimension mismatch: rho {rho.shape}, mu {mu.shape}")
    if not is_admissible(rho, nu, tol):
        return math.inf
    rho = np.clip(rho, 0.0, None)
    nu = np.clip(nu, 0.0, None)
    return relative_entropy(rho, mu) + 0.5 * d * relative_entropy(nu, np.outer(rho, rho))


@dataclass(frozen=True)
class LatticeType:
    """One achievable value of the integer pair (n*L1, nd*L2).

    ``bond_counts[i][j]`` for i != j counts pairs joining spin classes i and j;
    the diagonal entry counts half-edges of class i paired inside the class,
    i.e. twice the number of such pairs.
    """

    n: int
    d: int
    spin_counts: tuple
    bond_counts: tuple

    def __post_init__(self):
        sc = tuple(int(c) for c in self.spin_counts)
        bc = tuple(tuple(int(v) for v in row) for row in self.bond_counts)
        if len(bc) != len(sc) or any(len(row) != len(sc) for row in bc):
            raise UsageError("bond_counts must be q x q with q = len(spin_counts)")
        object.__setattr__(self, "spin_counts", sc)
        object.__setattr__(self, "bond_counts", bc)

    @property
    def q(self) -> int:
        return len(self.spin_counts)

    def violations(self) -> list:
        """Broken invariants, empty when the type is realizable."""
        out = []
        n, d, q, c, m = self.n, self.d, self.q, self.spin_counts, self.bond_counts
        if n < 1 or d < 1:
            out.append("n and d must be positive")
        if (n * d) % 2:
            out.append("nd is odd")
        if any(x < 0 for x in c) or any(v < 0 for row in m for v in row):
            out.append("negative count")
        if sum(c) != n:
            out.append(f"spin counts sum to {sum(c)}, not n={n}")
        for i in range(q):
            if m[i][i] % 2:
                out.append(f"diagonal entry {i} is odd")
            if sum(m[i]) != d * c[i]:
                out.append(f"row {i} sums to {sum(m[i])}, not d*c={d * c[i]}")
            for j in range(i + 1, q):
                if m[i][j] != m[j][i]:
                    out.append(f"asymmetric at ({i},{j})")
        return out

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "q": self.q,
            "spin_counts": list(self.spin_counts),
            "bond_counts": [list(r) for r in self.bond_counts],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "LatticeType":
        t = cls(int(obj["n"]), int(obj["d"]), obj["spin_counts"], obj["bond_counts"])
        if "q" in obj and int(obj["q"]) != t.q:
            raise UsageError(f"q={obj['q']} disagrees with spin_counts of length {t.q}")
        return t

    @classmethod
    def from_json(cls, text: str) -> "LatticeType":
        return cls.from_dict(json.loads(text))


def type_to_measures(t: LatticeType) -> AdmissiblePair:
    bad = t.violations()
    if bad:
        raise UsageError("invalid lattice type: " + "; ".join(bad))
    rho = np.array(t.spin_counts, dtype=float) / t.n
    nu = np.array(t.bond_counts, dtype=float) / (t.n * t.d)
    return AdmissiblePair(SpinMeasure(rho), BondMeasure(nu))


def _compositions(n: int, q: int) -> Iterator[tuple]:
    if q == 1:
        yield (n,)
        return
    for first in range(n, -1, -1):
        for rest in _compositions(n - first, q - 1):
            yield (first,) + rest


def _bond_fillings(remaining: list, i: int, m: list) -> Iterator[None]:
    # Row i: choose m[i][j] for j > i, the diagonal takes what is left (must be even).
    q = len(remaining)
    if i == q:
        yield
        return
    if i == q - 1:
        if remaining[i] % 2 == 0:
            m[i][i] = remaining[i]
            yield
        return

    def fill(j, left):
        if j == q:
            if left % 2 == 0:
                m[i][i] = left
                yield
            return
        for v in range(min(left, remaining[j]) + 1):
            m[i][j] = m[j][i] = v
            remaining[j] -= v
            yield from fill(j + 1, left - v)
            remaining[j] += v
        m[i][j] = m[j][i] = 0

    for _ in fill(i + 1, remaining[i]):
        saved = remaining[i]
        remaining[i] = 0
        yield from _bond_fillings(remaining, i + 1, m)
        remaining[i] = saved


def iter_types(n: int, d: int, q: int) -> Iterator[LatticeType]:
    """Lazily yield every realizable lattice type for (n, d, q)."""
    if n < 1 or d < 1 or q < 1:
        raise UsageError("n, d and q must be positive")
    if (n * d) % 2:
        raise UsageError(f"nd = {n * d} is odd: no perfect matching of the half-edges")
    for c in _compositions(n, q):
        remaining = [d * ci for ci in c]
        m = [[0] * q for _ in range(q)]
        for _ in _bond_fillings(remaining, 0, m):
            yield LatticeType(n, d, c, tuple(tuple(r) for r in m))


def enumerate_types(n: int, d: int, q: int) -> list:
    return list(iter_types(n, d, q))


def type_count_bound(n: int, q: int) -> int:
    return (n + 1) ** (q * (q + 1))


def nearest_type(rho, nu, n: int, d: int) -> LatticeType:
    """Lattice type closest to (n rho, nd nu) in summed absolute count error.

    Ties go to the lexicographically smallest (spin_counts, bond_counts).
    """
    rho = np.asarray(rho, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if not is_admissible(rho, nu, tol=ADMISSIBLE_TOL):
        raise UsageError("nearest_type needs an admissible pair")
    target_c = n * rho
    target_m = n * d * nu
    best, best_key = None, None
    for t in iter_types(n, d, len(rho)):
        err = (np.abs(np.array(t.spin_counts) - target_c).sum()
               + np.abs(np.array(t.bond_counts) - target_m).sum())
        key = (round(float(err), 9), t.spin_counts, t.bond_counts)
        if best_key is None or key < best_key:
            best, best_key = t, key
    return best
