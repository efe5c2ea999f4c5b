"""Request-stream generators, including the state-probing paging
adversary on the uniform metric."""

from __future__ import annotations

import random

from .metric import FiniteMetric

__all__ = ["make_adversary", "AdversaryError"]


class AdversaryError(ValueError):
    pass


class _Base:
    probing = False

    def request(self, t: int, probe=None) -> int:
        raise NotImplementedError


class CircleSweep(_Base):
    """Consecutive requests at the n sites in cyclic order, starting at
    site 1 (the site one step from the origin)."""

    def __init__(self, m: FiniteMetric):
        self.n = m.n

    def request(self, t, probe=None):
        return t % self.n


class RandomRequests(_Base):
    def __init__(self, m: FiniteMetric, seed: int):
        self.n = m.n
        self.rng = random.Random(seed)

    def request(self, t, probe=None):
        return self.rng.randrange(self.n)


class Trace(_Base):
    def __init__(self, points):
        self.points = list(points)

    def request(self, t, probe=None):
        return self.points[t - 1]


class PagingCruel(_Base):
    """Requests the site carrying the least aggregate integral server
    mass across replicas; needs the uniform metric on k+1 sites."""

    probing = True

    def __init__(self, m: FiniteMetric, k: int):
        if m.kind != "uniform" or m.n != k + 1:
            raise AdversaryError("paging_cruel needs the uniform metric on k+1 points")
        self.n = m.n

    def request(self, t, probe=None):
        if probe is None:
            raise AdversaryError("paging_cruel needs a state probe")
        masses = probe()
        return min(range(self.n), key=lambda x: (masses.get(x, 0), x))


def make_adversary(kind: str, m: FiniteMetric, k: int, seed: int, trace=None) -> _Base:
    if kind == "circle_sweep":
        return CircleSweep(m)
    if kind == "random":
        return RandomRequests(m, seed)
    if kind == "trace":
        if trace is None:
            raise AdversaryError("trace adversary needs a request list")
        return Trace(trace)
    if kind == "paging_cruel":
        return PagingCruel(m, k)
    raise AdversaryError(f"unknown adversary kind {kind!r}")
