"""Pairing-model sampling of spinned d-regular multigraphs.

Half-edge point ``p`` belongs to vertex ``p // d``. Random streams come from
numpy's PCG64 seeded through ``SeedSequence(seed, spawn_key=(index,))``, so
sample ``index`` of a run draws from its own stream regardless of how the
work is split across processes.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import RejectionCapError, UsageError
from .measures import BondMeasure, SpinLaw, SpinMeasure


def make_rng(seed, index=None) -> np.random.Generator:
    """Generator for ``seed``, or for stream ``index`` of ``seed``.

    An existing Generator is passed through untouched.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    key = () if index is None else (int(index),)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass(frozen=True)
class Pairing:
    n: int
    d: int
    pairs: tuple

    def __post_init__(self):
        pairs = tuple(tuple(sorted((int(a), int(b)))) for a, b in self.pairs)
        object.__setattr__(self, "pairs", tuple(sorted(pairs)))
        nd = self.n * self.d
        points = [p for pair in pairs for p in pair]
        if len(pairs) * 2 != nd or sorted(points) != list(range(nd)):
            raise UsageError("pairs are not a perfect matching of the nd points")

    def vertex_pairs(self) -> list:
        d = self.d
        return [(a // d, b // d) for a, b in self.pairs]

    def to_dict(self) -> dict:
        return {"n": self.n, "d": self.d, "pairs": [list(p) for p in self.pairs]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj) -> "Pairing":
        return cls(int(obj["n"]), int(obj["d"]), tuple(map(tuple, obj["pairs"])))


@dataclass(frozen=True)
class SpinConfig:
    """Spins as values in 1..q, one per vertex."""

    n: int
    q: int
    spins: tuple

    def __post_init__(self):
        spins = tuple(int(s) for s in self.spins)
        object.__setattr__(self, "spins", spins)
        if len(spins) != self.n or any(not 1 <= s <= self.q for s in spins):
            raise UsageError(f"need {self.n} spins in 1..{self.q}")

    def index_array(self) -> np.ndarray:
        return np.array(self.spins, dtype=np.int64) - 1


@dataclass(frozen=True)
class SampleRecord:
    pairing: Pairing
    spins: SpinConfig
    l1: SpinMeasure
    l2: BondMeasure
    simple: bool

    @classmethod
    def build(cls, pairing: Pairing, spins: SpinConfig) -> "SampleRecord":
        l1, l2 = empirical_measures(pairing, spins)
        return cls(pairing, spins, l1, l2, is_simple(pairing))

    def to_dict(self) -> dict:
        return {
            "n": self.pairing.n,
            "d": self.pairing.d,
            "q": self.spins.q,
            "pairs": [list(p) for p in self.pairing.pairs],
            "spins": list(self.spins.spins),
            "l1": self.l1.mass.tolist(),
            "l2": self.l2.mass.tolist(),
            "simple": self.simple,
        }

    @classmethod
    def from_dict(cls, obj) -> "SampleRecord":
        pairing = Pairing(int(obj["n"]), int(obj["d"]), tuple(map(tuple, obj["pairs"])))
        spins = SpinConfig(int(obj["n"]), int(obj["q"]), obj["spins"])
        return cls.build(pairing, spins)


def _check_nd(n, d):
    if n < 1 or d < 1:
        raise UsageError("n and d must be positive")
    if (n * d) % 2:
        raise UsageError(f"nd = {n * d} is odd: no perfect matching exists")


def sample_pairing(n: int, d: int, seed) -> Pairing:
    """Uniform perfect matching of the nd half-edge points.

    The lowest unmatched point is repeatedly paired with a uniformly chosen
    other unmatched point, which weights every matching by 1/(nd-1)!!.
    """
    _check_nd(n, d)
    rng = make_rng(seed)
    nd = n * d
    picks = rng.integers(0, np.arange(nd - 1, 0, -2)).tolist()
    # Descending, so the lowest free point is at the end.
    free = list(range(nd - 1, -1, -1))
    pairs = []
    for k in picks:
        a = free.pop()
        # Positions 0..len-1 of free all hold points other than a.
        pairs.append((a, free.pop(k)))
    return Pairing(n, d, tuple(pairs))


def assign_spins(n: int, mu: SpinLaw, seed) -> SpinConfig:
    if n < 1:
        raise UsageError("n must be positive")
    rng = make_rng(seed)
    draws = rng.choice(mu.q, size=n, p=mu.weights)
    return SpinConfig(n, mu.q, tuple((draws + 1).tolist()))


def empirical_counts(pairing: Pairing, spins: SpinConfig):
    """Integer versions (n*L1, nd*L2) of the empirical measures."""
    if pairing.n != spins.n:
        raise UsageError(f"pairing has {pairing.n} vertices, spins {spins.n}")
    s = spins.index_array()
    q = spins.q
    c = np.bincount(s, minlength=q)
    m = np.zeros((q, q), dtype=np.int64)
    ends = np.array(pairing.pairs, dtype=np.int64).reshape(-1, 2) // pairing.d
    a, b = s[ends[:, 0]], s[ends[:, 1]]
    np.add.at(m, (a, b), 1)
    np.add.at(m, (b, a), 1)
    return c, m


def empirical_measures(pairing: Pairing, spins: SpinConfig):
    c, m = empirical_counts(pairing, spins)
    n, nd = pairing.n, pairing.n * pairing.d
    return SpinMeasure(c / n), BondMeasure(m / nd)


def is_simple(pairing: Pairing) -> bool:
    seen = set()
    for u, v in pairing.vertex_pairs():
        if u == v:
            return False
        key = (u, v) if u < v else (v, u)
        if key in seen:
            return False
        seen.add(key)
    return True


def edge_multiset(pairing: Pairing) -> Counter:
    """Collapsed multigraph: unordered vertex couple -> number of pairs."""
    return Counter(tuple(sorted(e)) for e in pairing.vertex_pairs())


def sample_simple_graph(n: int, d: int, seed, max_attempts: int = 10_000):
    """Reject pairings until one is simple; returns ``(pairing, attempts)``.

    Raises RejectionCapError once ``max_attempts`` pairings were all rejected.
    """
    _check_nd(n, d)
    if max_attempts < 1:
        raise UsageError("max_attempts must be positive")
    rng = make_rng(seed)
    for attempt in range(1, max_attempts + 1):
        p = sample_pairing(n, d, rng)
        if is_simple(p):
            return p, attempt
    raise RejectionCapError(max_attempts)


def sample_record(n: int, d: int, mu: SpinLaw, seed, index=None, simple=False,
                  max_attempts=10_000) -> SampleRecord:
    """One (pairing, spins) draw from stream ``index`` of ``seed``."""
    rng = make_rng(seed, index)
    if simple:
        pairing, _ = sample_simple_graph(n, d, rng, max_attempts)
    else:
        pairing = sample_pairing(n, d, rng)
    return SampleRecord.build(pairing, assign_spins(n, mu, rng))


def sample_counts_batch(n: int, d: int, mu: SpinLaw, size: int, rng: np.random.Generator):
    """Vectorised draw of ``size`` independent (pairing, spins) samples.

    The matching pairs consecutive entries of a uniform random permutation
    of the points, which is uniform over matchings. Returns integer arrays
    of shape (size, q) and (size, q, q).
    """
    _check_nd(n, d)
    nd, q = n * d, mu.q
    perm = rng.permuted(np.tile(np.arange(nd, dtype=np.int64), (size, 1)), axis=1)
    spins = rng.choice(q, size=(size, n), p=mu.weights).astype(np.int64)
    ends = np.take_along_axis(spins, perm // d, axis=1)
    a, b = ends[:, 0::2], ends[:, 1::2]
    row = (np.arange(size, dtype=np.int64) * q * q)[:, None]
    m = np.bincount((row + a * q + b).ravel(), minlength=size * q * q)
    m += np.bincount((row + b * q + a).ravel(), minlength=size * q * q)
    crow = (np.arange(size, dtype=np.int64) * q)[:, None]
    c = np.bincount((crow + spins).ravel(), minlength=size * q)
    return c.reshape(size, q), m.reshape(size, q, q)
