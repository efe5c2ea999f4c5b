"""Semi-partitions: ball carving, truncated exponential radii, r-fusion
along a net, and refinement of per-level semi-partitions into decorated
leaf chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .hst import Tree
from .metric import FiniteMetric, ball

__all__ = [
    "CarveSpec",
    "SemiPartition",
    "PartitionError",
    "FusionOverlapError",
    "carve",
    "sample_trunc_exp",
    "trunc_exp_mean",
    "fuse_semipartition",
    "refine_and_embed",
    "embed_all",
]


class PartitionError(ValueError):
    pass


class FusionOverlapError(PartitionError):
    """Fused clusters intersect: the net was not separated enough."""


@dataclass(frozen=True)
class CarveSpec:
    """Ordered centers (the permutation pi), with one radius each."""

    centers: tuple
    radii: dict

    def __post_init__(self):
        if len(set(self.centers)) != len(self.centers):
            raise PartitionError("duplicate carve centers")
        for c in self.centers:
            if self.radii[c] < 0:
                raise PartitionError("negative carve radius")


class SemiPartition:
    """Pairwise disjoint cells; cells may be tagged with their origin
    (carve center or fused-net point)."""

    def __init__(self, cells, tags=None):
        self.cells = [frozenset(c) for c in cells if c]
        self.tags = list(tags) if tags is not None else [None] * len(self.cells)
        if tags is not None:
            self.tags = [t for c, t in zip(cells, tags) if c]
        self._cell_of = {}
        seen = set()
        for c in self.cells:
            if c & seen:
                raise PartitionError("cells are not pairwise disjoint")
            seen |= c
            for x in c:
                self._cell_of[x] = c
        self.covered = frozenset(seen)

    def cell_of(self, x):
        return self._cell_of.get(x)

    def delta(self, x, y) -> int:
        """Number of cells containing exactly one of x, y."""
        cx, cy = self._cell_of.get(x), self._cell_of.get(y)
        if cx is cy:
            return 0
        return (cx is not None) + (cy is not None)

    def max_diam(self, m: FiniteMetric) -> float:
        return max((m.diam_set(c) for c in self.cells), default=0.0)

    def __iter__(self):
        return iter(self.cells)

    def __len__(self):
        return len(self.cells)


def carve(spec: CarveSpec, m: FiniteMetric) -> SemiPartition:
    """Iteratively carve balls: cell i is the i-th center's ball minus
    all earlier balls."""
    taken: set = set()
    cells, tags = [], []
    for c in spec.centers:
        b = ball(m, c, spec.radii[c])
        cell = b - taken
        taken |= b
        cells.append(cell)
        tags.append(c)
    return SemiPartition(cells, tags)


def sample_trunc_exp(j: int, K: float, tau: float, rng) -> float:
    """Sample the exponential of rate tau^j * log K truncated at tau^-j.

    Density (K tau^j log K)/(K-1) * exp(-r tau^j log K) on [0, tau^-j];
    the normalizer is exactly 1 since (K/(K-1)) (1 - e^{-log K}) = 1.
    """
    if K < 2:
        raise PartitionError("truncated exponential needs K >= 2")
    u = rng.random()
    return -math.log1p(-u * (K - 1) / K) / (tau**j * math.log(K))


def trunc_exp_mean(j: int, K: float, tau: float) -> float:
    """Closed-form mean of the truncated exponential (for test oracles)."""
    lam = tau**j * math.log(K)
    # E[r] = (K/(K-1)) * (1 - (1+log K)/K) / lam
    return (K / (K - 1)) * (1.0 - (1.0 + math.log(K)) / K) / lam


def fuse_semipartition(P: SemiPartition, lam_points, r: float, m: FiniteMetric):
    """The r-fusion of P along the net points: every cell meeting
    B(x, r) is absorbed, together with the ball itself, into one cluster
    U_x.  Returns (fused clusters as {x: U_x}, the fused semi-partition).
    """
    fused: dict = {}
    balls = {x: ball(m, x, r) for x in sorted(lam_points)}
    for x, b in balls.items():
        u = set(b)
        for cell in P.cells:
            if cell & b:
                u |= cell
        fused[x] = frozenset(u)
    pts = sorted(fused)
    for i, x in enumerate(pts):
        for y in pts[i + 1 :]:
            if fused[x] & fused[y]:
                raise FusionOverlapError(f"clusters of net points {x} and {y} overlap")
    hit = frozenset().union(*fused.values()) if fused else frozenset()
    cells = [fused[x] for x in pts]
    tags = [("fused", x) for x in pts]
    for cell, tag in zip(P.cells, P.tags):
        if not (cell & hit):
            cells.append(cell)
            tags.append(tag)
    return fused, SemiPartition(cells, tags)


def _check_bounded(Qs, m: FiniteMetric, tau: float) -> None:
    for j, Q in enumerate(Qs, start=1):
        bound = tau ** (-j)
        for cell in Q.cells:
            if m.diam_set(cell) > bound:
                raise PartitionError(f"level-{j} cell of diameter > tau^-{j}")


def refine_and_embed(tree: Tree, Qs, x: int):
    """Embed one point through the refined partition chain; see
    embed_all for the semantics.  Returns (leaf id, rank)."""
    return embed_all(tree, Qs, points=[x])[x]


def embed_all(tree: Tree, Qs, points=None):
    """Refine per-level semi-partitions into full partition chains and
    embed every point as a decorated leaf.

    Level j's full partition completes Q^j with singletons and
    intersects with level j-1.  rank(x) is the last level of the
    all-covered prefix (math.inf when covered everywhere); entries up to
    the rank are 0-decorated, entries after it 1-decorated.
    """
    m = tree.metric
    if len(Qs) != tree.depth:
        raise PartitionError("need one semi-partition per level 1..depth")
    _check_bounded(Qs, m, tree.tau)
    if points is None:
        points = m.points
    cur = {x: tree.bottom(tree.root) for x in points}
    rank = {x: math.inf for x in points}
    chains = {x: [] for x in points}
    cache: dict = {}
    for j, Q in enumerate(Qs, start=1):
        for x in points:
            c = Q.cell_of(x)
            if c is None:
                c = frozenset({x})
                if rank[x] == math.inf:
                    rank[x] = j - 1
            key = (cur[x], c)
            cell = cache.get(key)
            if cell is None:
                cell = cur[x] & c
                cache[key] = cell
            cur[x] = cell
            dec = 0 if j <= rank[x] else 1
            chains[x].append((cell, dec))
    out = {}
    for x in points:
        leaf = tree.leaf_for_chain(chains[x])
        if tree.bottom(leaf) != frozenset({x}):
            raise PartitionError("embedding chain does not bottom at its point")
        out[x] = (leaf, rank[x])
    return out
