"""Truncated universal tau-HST over a finite metric.

Nodes are decorated chains, identified by (parent, bottom-set, decoration)
and interned in an arena.  A node at depth j carries a subset of diameter
at most tau^-j; the root is (X; 0) at depth 0.  Chains are truncated at
the depth J where every valid cell is a singleton, so depth-J nodes are
the leaves and the infinite singleton tail is implicit.  Distances follow
dist(a, b) = tau^-depth(lca(a, b)).

Fusion maps are ordered lists of canonical injections (merging a sibling
into a sibling whose bottom contains it); they act on nodes and on leaf
measures (plain dicts leaf-id -> mass).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .metric import FiniteMetric

__all__ = [
    "Tree",
    "FusionMap",
    "TreeError",
    "truncation_depth",
    "canonical_injection",
    "apply_fusion",
    "primitive_fusion_steps",
    "beta_pushforward",
]


class TreeError(ValueError):
    pass


def truncation_depth(m: FiniteMetric, tau: float) -> int:
    """Smallest J with tau^-J below the minimum positive distance.

    At that depth every cell of a tau^-J-bounded semi-partition is a
    singleton, so depth-J chains are leaf chains.
    """
    if tau < 2:
        raise TreeError("tau must be >= 2")
    dmin = m.min_positive()
    j = 1
    while tau ** (-j) >= dmin:
        j += 1
    return j


class Tree:
    """Arena of interned decorated-chain nodes, truncated at depth J."""

    def __init__(self, metric: FiniteMetric, tau: float, depth: int | None = None):
        self.metric = metric
        self.tau = float(tau)
        self.depth = depth if depth is not None else truncation_depth(metric, tau)
        self.scale = [self.tau ** (-j) for j in range(self.depth + 1)]
        self._parent: list[int | None] = []
        self._level: list[int] = []
        self._bottom: list[frozenset] = []
        self._dec: list[int] = []
        self._children: list[list[int]] = []
        self._index: dict = {}
        self.root = self._new(None, frozenset(metric.points), 0, 0)

    # -- construction ------------------------------------------------------

    def _new(self, parent, bottom, dec, level) -> int:
        nid = len(self._parent)
        self._parent.append(parent)
        self._level.append(level)
        self._bottom.append(bottom)
        self._dec.append(dec)
        self._children.append([])
        self._index[(parent, bottom, dec)] = nid
        if parent is not None:
            self._children[parent].append(nid)
        return nid

    def child(self, parent: int, bottom: frozenset, dec: int) -> int:
        """Intern the child of `parent` with the given cell and decoration."""
        key = (parent, bottom, dec)
        nid = self._index.get(key)
        if nid is not None:
            return nid
        level = self._level[parent] + 1
        if level > self.depth:
            raise TreeError("chain deeper than the truncation depth")
        if dec not in (0, 1):
            raise TreeError("decorations are restricted to {0,1}")
        if not bottom or not bottom <= self._bottom[parent]:
            raise TreeError("chain entries must be nested")
        if self.metric.diam_set(bottom) > self.scale[level]:
            raise TreeError(f"cell diameter exceeds tau^-{level}")
        if level == self.depth and len(bottom) != 1:
            raise TreeError("leaf bottom must be a singleton")
        return self._new(parent, bottom, dec, level)

    def leaf_for_chain(self, cells) -> int:
        """Intern the chain given as [(cell, dec)] for depths 1..J."""
        if len(cells) != self.depth:
            raise TreeError("chain must reach the truncation depth")
        node = self.root
        for bottom, dec in cells:
            node = self.child(node, frozenset(bottom), dec)
        return node

    # -- accessors ---------------------------------------------------------

    def parent(self, nid: int):
        return self._parent[nid]

    def children(self, nid: int) -> tuple:
        return tuple(self._children[nid])

    def level(self, nid: int) -> int:
        return self._level[nid]

    def bottom(self, nid: int) -> frozenset:
        return self._bottom[nid]

    def dec(self, nid: int) -> int:
        return self._dec[nid]

    def is_leaf(self, nid: int) -> bool:
        return self._level[nid] == self.depth

    def path(self, nid: int) -> tuple:
        """Ancestor ids from the root down to nid, inclusive."""
        out = []
        cur = nid
        while cur is not None:
            out.append(cur)
            cur = self._parent[cur]
        return tuple(reversed(out))

    def ancestor_at(self, nid: int, level: int) -> int:
        cur = nid
        while self._level[cur] > level:
            cur = self._parent[cur]
        if self._level[cur] != level:
            raise TreeError("node is above the requested level")
        return cur

    def is_ancestor(self, anc: int, nid: int) -> bool:
        lv = self._level[anc]
        if lv > self._level[nid]:
            return False
        return self.ancestor_at(nid, lv) == anc

    def lca_depth(self, a: int, b: int) -> int:
        la, lb = self._level[a], self._level[b]
        while la > lb:
            a = self._parent[a]
            la -= 1
        while lb > la:
            b = self._parent[b]
            lb -= 1
        while a != b:
            a = self._parent[a]
            b = self._parent[b]
            la -= 1
        return la

    def dist(self, a: int, b: int) -> float:
        """dist(a,b) = tau^-depth(lca); 0 for equal nodes."""
        if a == b:
            return 0.0
        return self.tau ** (-self.lca_depth(a, b))

    def beta(self, leaf: int) -> int:
        """The unique bottom element of a leaf chain."""
        if not self.is_leaf(leaf):
            raise TreeError("beta is defined on leaves")
        (x,) = self._bottom[leaf]
        return x

    def all_zero_decorated(self, nid: int) -> bool:
        cur = nid
        while cur is not None:
            if self._dec[cur] != 0:
                return False
            cur = self._parent[cur]
        return True

    def chain_cells(self, nid: int):
        """[(cell, dec)] along the chain below the root."""
        return [(self._bottom[p], self._dec[p]) for p in self.path(nid)[1:]]

    def node_count(self) -> int:
        return len(self._parent)

    def dump_json(self) -> str:
        """Debug dump: node ids with levels, bottoms and decorations."""
        import json

        nodes = [
            {
                "id": nid,
                "parent": self._parent[nid],
                "level": self._level[nid],
                "bottom": sorted(self._bottom[nid]),
                "dec": self._dec[nid],
            }
            for nid in range(len(self._parent))
        ]
        return json.dumps({"tau": self.tau, "depth": self.depth, "nodes": nodes})


@dataclass(frozen=True)
class FusionMap:
    """Finite composition of canonical injections, applied in order.

    The identity map is the empty composition.  Each entry (src, tgt)
    satisfies: same parent, same level, bottom(src) subseteq bottom(tgt).
    """

    tree: Tree
    injections: tuple = field(default_factory=tuple)

    def is_identity(self) -> bool:
        return not self.injections

    def then(self, other: "FusionMap") -> "FusionMap":
        return FusionMap(self.tree, self.injections + other.injections)

    def apply_node(self, nid: int) -> int:
        for src, tgt in self.injections:
            nid = _inject_node(self.tree, nid, src, tgt)
        return nid

    def __call__(self, nid: int) -> int:
        return self.apply_node(nid)


def canonical_injection(tree: Tree, src: int, tgt: int) -> FusionMap:
    """The canonical injection of chain src into its sibling tgt."""
    if src == tgt:
        return FusionMap(tree)
    if tree.parent(src) != tree.parent(tgt) or tree.level(src) != tree.level(tgt):
        raise TreeError("canonical injection requires siblings at equal level")
    if not tree.bottom(src) <= tree.bottom(tgt):
        raise TreeError("source bottom must be contained in target bottom")
    return FusionMap(tree, ((src, tgt),))


def _inject_node(tree: Tree, nid: int, src: int, tgt: int) -> int:
    """Apply one canonical injection to a chain: identity off the source
    subtree; otherwise splice the target's (bottom, dec) at the source
    level and re-intern the tail."""
    if not tree.is_ancestor(src, nid):
        return nid
    path = tree.path(nid)
    cut = path.index(src)
    cur = tgt
    for below in path[cut + 1 :]:
        cur = tree.child(cur, tree.bottom(below), tree.dec(below))
    return cur


def apply_fusion(f: FusionMap, mu: dict) -> dict:
    """Pushforward of a node measure under a fusion map (masses add on
    collision; total mass is preserved exactly)."""
    for src, tgt in f.injections:
        out: dict = {}
        for nid, mass in mu.items():
            img = _inject_node(f.tree, nid, src, tgt)
            out[img] = out.get(img, 0.0) + mass
        mu = out
    return dict(mu)


def primitive_fusion_steps(f: FusionMap):
    """Decompose a single canonical injection into primitive per-node
    steps, top-down: one (source, image) pair per node of the source
    subtree, so a path-shaped subtree yields one step per level.
    Composing the per-node relabelings reproduces the full injection.
    Whether a step actually merges two occupied nodes is a property of
    the measure being transported, so callers (e.g. the rounding) check
    occupancy themselves."""
    if len(f.injections) != 1:
        raise TreeError("primitive decomposition expects a single injection")
    tree = f.tree
    src, tgt = f.injections[0]
    from collections import deque

    steps = []
    queue = deque([(src, None)])
    while queue:
        a, b_key = queue.popleft()
        if a == src:
            img = tgt
        else:
            parent_img = b_key
            img = tree.child(parent_img, tree.bottom(a), tree.dec(a))
        steps.append((a, img))
        for c in sorted(tree.children(a)):
            queue.append((c, img))
    return steps


def beta_pushforward(tree: Tree, mu: dict) -> dict:
    """Push a leaf measure to the metric space through beta.  Sums per
    point are exactly rounded, so the pushforward commutes with fusion
    maps bit-for-bit."""
    groups: dict = {}
    for leaf, mass in mu.items():
        groups.setdefault(tree.beta(leaf), []).append(mass)
    return {x: (vals[0] if len(vals) == 1 else math.fsum(vals)) for x, vals in groups.items()}


def measure_total(mu: dict) -> float:
    return math.fsum(mu.values())


def subtree_mass(tree: Tree, mu: dict, nid: int) -> float:
    """Total mass of a node measure inside the subtree of nid."""
    return math.fsum(m for n, m in mu.items() if tree.is_ancestor(nid, n))
