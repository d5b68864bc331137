"""Bell inequalities as arithmetic facts about +/-1 sequences.

For any four equal-length +/-1 sequences a, a', b, b'::

    |<ab> + <ab'>| + |<a'b> - <a'b'>| <= <|b + b'|> + <|b - b'|> = 2

because b_i + b'_i and b_i - b'_i cannot both be nonzero. Real data do not
come as such a quadruple: the four correlations are measured in four separate
runs. :func:`rearranged_statistic` shows what happens when the runs are
permuted to line up their shared columns as well as possible.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from eprsim.core import EprSimError, Role, role_generator


class SequenceError(EprSimError, ValueError):
    pass


def as_dichotomic(values: Sequence[int]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.ndim != 1 or arr.size < 1:
        raise SequenceError("a dichotomic sequence must be one-dimensional and non-empty")
    if not np.all((arr == 1) | (arr == -1)):
        raise SequenceError("dichotomic sequences may only contain +1 and -1")
    return arr


@dataclass(frozen=True)
class DichotomicQuad:
    a: np.ndarray
    a_prime: np.ndarray
    b: np.ndarray
    b_prime: np.ndarray

    def __post_init__(self):
        seqs = [as_dichotomic(s) for s in (self.a, self.a_prime, self.b, self.b_prime)]
        if len({s.size for s in seqs}) != 1:
            raise SequenceError("all four sequences must have the same length")
        for name, s in zip(("a", "a_prime", "b", "b_prime"), seqs):
            object.__setattr__(self, name, s)

    def permuted(self, perm: Sequence[int]) -> DichotomicQuad:
        p = np.asarray(perm)
        return DichotomicQuad(self.a[p], self.a_prime[p], self.b[p], self.b_prime[p])


def _mean_product(x: np.ndarray, y: np.ndarray) -> float:
    # integer sum first so the statistic is exact up to one division
    return int(np.dot(x, y)) / x.size


def bell_statistic(quad: DichotomicQuad) -> float:
    """|<ab> + <ab'>| + |<a'b> - <a'b'>|."""
    return abs(_mean_product(quad.a, quad.b) + _mean_product(quad.a, quad.b_prime)) + abs(
        _mean_product(quad.a_prime, quad.b) - _mean_product(quad.a_prime, quad.b_prime)
    )


def matching_permutation(seq: Sequence[int], reference: Sequence[int]) -> list[int]:
    """Indices ``p`` such that ``seq[p]`` agrees with ``reference`` as often as possible.

    Walks the reference left to right and takes the earliest unused element
    of ``seq`` with the same value, falling back to the earliest unused
    element of the other value. For +/-1 sequences this attains the optimum
    ``N - |#(+1 in seq) - #(+1 in reference)|``.
    """
    s = as_dichotomic(seq)
    r = as_dichotomic(reference)
    if s.size != r.size:
        raise SequenceError(f"length mismatch: {s.size} vs {r.size}")
    pools = {1: deque(np.flatnonzero(s == 1).tolist()), -1: deque(np.flatnonzero(s == -1).tolist())}
    perm = []
    for v in r.tolist():
        pool = pools[v] if pools[v] else pools[-v]
        perm.append(pool.popleft())
    return perm


def rearrange_to_match(seq: Sequence[int], reference: Sequence[int]) -> np.ndarray:
    s = as_dichotomic(seq)
    return s[matching_permutation(s, reference)]


def agreement(x: Sequence[int], y: Sequence[int]) -> int:
    return int(np.sum(np.asarray(x) == np.asarray(y)))


@dataclass(frozen=True)
class Run:
    """One measurement run: paired outcome columns at one setting pair."""

    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        f, s = as_dichotomic(self.first), as_dichotomic(self.second)
        if f.size != s.size:
            raise SequenceError("both columns of a run must have the same length")
        object.__setattr__(self, "first", f)
        object.__setattr__(self, "second", s)

    def __len__(self):
        return self.first.size

    def permuted(self, perm: Sequence[int]) -> Run:
        return Run(self.first[perm], self.second[perm])


@dataclass(frozen=True)
class FourRunData:
    """Runs (a, b), (a, b'), (a', b), (a', b'), numbered 1 to 4."""

    run1: Run
    run2: Run
    run3: Run
    run4: Run

    def __post_init__(self):
        if len({len(r) for r in (self.run1, self.run2, self.run3, self.run4)}) != 1:
            raise SequenceError("all four runs must have the same length")


@dataclass(frozen=True)
class RearrangedResult:
    value: float
    b_match_fraction: float
    # the aligned columns, for inspection
    a1: np.ndarray
    b1: np.ndarray
    b_prime2: np.ndarray
    a_prime4: np.ndarray
    b3: np.ndarray


def align_runs(data: FourRunData) -> RearrangedResult:
    """Permute runs 2, 4 and 3 (each as whole trials) to share columns.

    1. run 2 is permuted so its a column matches a(1), carrying b'(2);
    2. run 4 is permuted so its b' column matches the aligned b'(2),
       carrying a'(4);
    3. run 3 is permuted so its a' column matches the aligned a'(4),
       carrying b(3).

    The four correlations then read <a(1)b(1)>, <a(1)b'(2)>,
    <a'(4)b(3)>, <a'(4)b'(2)>, and the bound becomes
    <|a(1)||b(1) + b'(2)|> + <|a'(4)||b(3) - b'(2)|>.
    """
    a1, b1 = data.run1.first, data.run1.second
    run2 = data.run2.permuted(matching_permutation(data.run2.first, a1))
    b_prime2 = run2.second
    run4 = data.run4.permuted(matching_permutation(data.run4.second, b_prime2))
    a_prime4 = run4.first
    run3 = data.run3.permuted(matching_permutation(data.run3.first, a_prime4))
    b3 = run3.second
    n = a1.size
    value = (
        float(np.sum(np.abs(a1) * np.abs(b1 + b_prime2))) / n
        + float(np.sum(np.abs(a_prime4) * np.abs(b3 - b_prime2))) / n
    )
    return RearrangedResult(value, agreement(b1, b3) / n, a1, b1, b_prime2, a_prime4, b3)


def rearranged_statistic(data: FourRunData) -> tuple[float, float]:
    """(value of the rearranged bound, fraction of positions where b(1) == b(3))."""
    res = align_runs(data)
    return res.value, res.b_match_fraction


def random_quad(rng: np.random.Generator, length: int) -> DichotomicQuad:
    return DichotomicQuad(*(rng.choice((-1, 1), size=length) for _ in range(4)))


def random_four_runs(rng: np.random.Generator, length: int) -> FourRunData:
    return FourRunData(*(Run(*(rng.choice((-1, 1), size=length) for _ in range(2))) for _ in range(4)))


def tautology_rng(master_seed: int) -> np.random.Generator:
    return role_generator(master_seed, Role.TAUTOLOGY)
