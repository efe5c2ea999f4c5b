"""Finite metric spaces: generators, balls, normalization.

All metrics are diameter-normalized to 1 and stored as dense float64
matrices.  Points are dense integer ids 0..n-1; generators that place
points geometrically (line, circle, random) keep the raw coordinates as
metadata so adversaries can use them.
"""

from __future__ import annotations

import json
import math
import random

import numpy as np

__all__ = [
    "FiniteMetric",
    "MetricError",
    "build_metric",
    "ball",
    "aspect_ratio",
]


class MetricError(ValueError):
    pass


class FiniteMetric:
    """A finite metric space with a symmetric, normalized distance matrix."""

    def __init__(self, dist: np.ndarray, coords=None, kind: str = "custom"):
        dist = np.asarray(dist, dtype=np.float64)
        if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
            raise MetricError("distance matrix must be square")
        self.dist = dist
        self.n = dist.shape[0]
        self.points = list(range(self.n))
        self.coords = coords
        self.kind = kind
        _validate(dist)
        self._rows = [[float(v) for v in row] for row in dist]

    def d(self, x: int, y: int) -> float:
        return self._rows[x][y]

    def d_set(self, x: int, S) -> float:
        """Distance from x to a finite point set (inf for empty S)."""
        if not S:
            return math.inf
        row = self._rows[x]
        return min(row[y] for y in S)

    def diam_set(self, S) -> float:
        pts = list(S)
        if len(pts) <= 1:
            return 0.0
        sub = self.dist[np.ix_(pts, pts)]
        return float(sub.max())

    def min_positive(self) -> float:
        off = self.dist[~np.eye(self.n, dtype=bool)]
        pos = off[off > 0]
        if pos.size == 0:
            raise MetricError("metric is degenerate (all distances zero)")
        return float(pos.min())

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "dist": [float(v) for v in self.dist.reshape(-1)]})

    @classmethod
    def from_json(cls, text: str) -> "FiniteMetric":
        obj = json.loads(text)
        n = int(obj["n"])
        dist = np.array(obj["dist"], dtype=np.float64).reshape(n, n)
        return cls(normalize(dist), kind="imported")


def _validate(dist: np.ndarray) -> None:
    n = dist.shape[0]
    if n < 2:
        raise MetricError("need at least 2 points")
    if not np.allclose(np.diag(dist), 0.0, atol=0):
        raise MetricError("nonzero diagonal")
    if not np.array_equal(dist, dist.T):
        raise MetricError("asymmetric distance matrix")
    if (dist < 0).any():
        raise MetricError("negative distance")
    if dist.max() != 1.0:
        raise MetricError("metric not diameter-normalized")
    # Exact triangle check; generators run a min-plus fixpoint first.
    for k in range(n):
        via = dist[:, k][:, None] + dist[k, :][None, :]
        if (dist > via).any():
            raise MetricError("triangle inequality violated")


def normalize(dist: np.ndarray) -> np.ndarray:
    """Scale to diameter 1 and close under min-plus so the triangle
    inequality holds exactly on the stored floats."""
    dist = np.array(dist, dtype=np.float64)
    for _ in range(8):
        m = dist.max()
        if m <= 0:
            raise MetricError("metric is degenerate (all distances zero)")
        if m != 1.0:
            dist = dist / m
        changed = True
        while changed:
            changed = False
            for k in range(dist.shape[0]):
                via = dist[:, k][:, None] + dist[k, :][None, :]
                bad = dist > via
                if bad.any():
                    dist = np.where(bad, via, dist)
                    changed = True
        if dist.max() == 1.0:
            return dist
    raise MetricError("normalization did not converge")


def build_metric(kind: str, n: int, seed: int = 0, degree: int = 4) -> FiniteMetric:
    """Construct a normalized metric of the requested kind on n points."""
    if n < 2:
        raise MetricError(f"invalid size n={n}, need n >= 2")
    if kind == "uniform":
        dist = np.ones((n, n)) - np.eye(n)
        return FiniteMetric(dist, kind=kind)
    if kind == "line":
        coords = np.arange(n, dtype=np.float64) / (n - 1)
        dist = np.abs(coords[:, None] - coords[None, :])
        return FiniteMetric(normalize(dist), coords=coords, kind=kind)
    if kind == "circle":
        # n equally spaced points, arc-length metric, diameter-normalized
        hops = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
        hops = np.minimum(hops, n - hops).astype(np.float64)
        dist = hops / (n // 2)
        coords = 2.0 * math.pi * np.arange(n) / n
        return FiniteMetric(normalize(dist), coords=coords, kind=kind)
    if kind == "expander":
        adj = _random_regular(n, degree, seed)
        dist = _bfs_all(adj)
        return FiniteMetric(normalize(dist), kind=kind)
    if kind == "random":
        rng = random.Random(seed)
        coords = np.array([[rng.random(), rng.random()] for _ in range(n)])
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        np.fill_diagonal(dist, 0.0)
        dist = np.minimum(dist, dist.T)
        return FiniteMetric(normalize(dist), coords=coords, kind=kind)
    raise MetricError(f"unknown metric kind {kind!r}")


def _random_regular(n: int, d: int, seed: int):
    """Configuration-model d-regular multigraph, resampled until simple
    and connected."""
    if n <= d or (n * d) % 2 != 0:
        raise MetricError(f"no {d}-regular graph on {n} points")
    rng = random.Random(seed)
    for _ in range(1000):
        stubs = [v for v in range(n) for _ in range(d)]
        rng.shuffle(stubs)
        edges = set()
        ok = True
        for i in range(0, len(stubs), 2):
            a, b = stubs[i], stubs[i + 1]
            if a == b or (a, b) in edges or (b, a) in edges:
                ok = False
                break
            edges.add((a, b))
        if not ok:
            continue
        adj = [[] for _ in range(n)]
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        if _connected(adj):
            return adj
    raise MetricError("failed to sample a connected regular graph")


def _connected(adj) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(adj)


def _bfs_all(adj) -> np.ndarray:
    n = len(adj)
    dist = np.full((n, n), np.inf)
    for s in range(n):
        dist[s, s] = 0
        frontier = [s]
        level = 0
        while frontier:
            level += 1
            nxt = []
            for v in frontier:
                for w in adj[v]:
                    if dist[s, w] == np.inf:
                        dist[s, w] = level
                        nxt.append(w)
            frontier = nxt
    return dist


def ball(m: FiniteMetric, x: int, r: float):
    """Closed ball {y : d(x,y) <= r} as a frozenset of point ids."""
    if r < 0:
        raise MetricError("negative radius")
    row = m.dist[x]
    return frozenset(int(i) for i in np.nonzero(row <= r)[0])


def aspect_ratio(m: FiniteMetric) -> float:
    """Max distance over min positive distance."""
    return float(m.dist.max()) / m.min_positive()
