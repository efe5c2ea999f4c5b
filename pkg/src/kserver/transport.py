"""Wasserstein-1 transport: exact min-cost-flow oracle and the closed
form on the truncated universal tree.

The tree closed form realizes the ultrametric as an edge-weighted tree:
the edge into a depth-j internal node weighs (tau^-(j-1) - tau^-j)/2, the
edge into a depth-J leaf weighs tau^-(J-1)/2, and mass held at an
internal node sits on a pendant anchor of weight tau^-j/2.  Leaf-to-leaf
path length is then exactly tau^-depth(lca), and likewise for any
node-to-node pair, so W1 equals the sum over edges of weight times the
absolute mass imbalance below the edge.
"""

from __future__ import annotations

import heapq
import math

from .hst import Tree
from .metric import FiniteMetric

__all__ = [
    "TransportError",
    "TransportPlan",
    "min_cost_transport",
    "w1_exact",
    "w1_tree",
    "w1_tree_lp",
    "reduced_step_cost",
    "tree_norm",
]

MASS_TOL = 1e-9


class TransportError(ValueError):
    pass


class TransportPlan:
    """Optimal transport plan as (source, target, mass) triples."""

    def __init__(self, moves, cost: float):
        self.moves = moves
        self.cost = cost

    def to_json_obj(self):
        return {"cost": self.cost, "moves": [[s, t, m] for s, t, m in self.moves]}


def _check_balanced(total_a: float, total_b: float) -> None:
    if abs(total_a - total_b) > MASS_TOL * max(1.0, abs(total_a)):
        raise TransportError(f"unbalanced measures: {total_a} vs {total_b}")


def min_cost_transport(sources, targets, cost_fn):
    """Min-cost transport between two lists of (key, mass) pairs over
    the complete bipartite graph, by successive shortest augmenting
    paths with Dijkstra potentials.  Masses are floats; residuals below
    1e-15 are treated as saturated."""
    srcs = [(k, m) for k, m in sources if m > 0]
    tgts = [(k, m) for k, m in targets if m > 0]
    _check_balanced(math.fsum(m for _, m in srcs), math.fsum(m for _, m in tgts))
    na, nb = len(srcs), len(tgts)
    if na == 0:
        return TransportPlan([], 0.0)

    cost = [[float(cost_fn(srcs[i][0], tgts[j][0])) for j in range(nb)] for i in range(na)]
    flow = [[0.0] * nb for _ in range(na)]
    supply = [m for _, m in srcs]
    demand = [m for _, m in tgts]
    pot_a = [0.0] * na
    pot_b = [0.0] * nb

    remaining = math.fsum(supply)
    guard = (na + nb + 2) * (na + nb + 2)
    while remaining > MASS_TOL:
        guard -= 1
        if guard < 0:
            raise TransportError("augmentation did not converge")
        # Dijkstra on the residual bipartite graph with reduced costs.
        dist_a = [math.inf] * na
        dist_b = [math.inf] * nb
        prev_b = [-1] * nb
        prev_a = [-1] * na
        heap = []
        for i in range(na):
            if supply[i] > 1e-15:
                dist_a[i] = 0.0
                heap.append((0.0, 0, i))
        heapq.heapify(heap)
        seen_a = [False] * na
        seen_b = [False] * nb
        while heap:
            d, side, u = heapq.heappop(heap)
            if side == 0:
                if seen_a[u] or d > dist_a[u]:
                    continue
                seen_a[u] = True
                for j in range(nb):
                    # reduced cost of the forward arc u -> j
                    nd = d + cost[u][j] + pot_a[u] - pot_b[j]
                    if nd < dist_b[j] - 1e-15:
                        dist_b[j] = nd
                        prev_b[j] = u
                        heapq.heappush(heap, (nd, 1, j))
            else:
                if seen_b[u] or d > dist_b[u]:
                    continue
                seen_b[u] = True
                for i in range(na):
                    if flow[i][u] > 1e-15:
                        # reduced cost of the backward arc u -> i
                        nd = d - cost[i][u] + pot_b[u] - pot_a[i]
                        if nd < dist_a[i] - 1e-15:
                            dist_a[i] = nd
                            prev_a[i] = u
                            heapq.heappush(heap, (nd, 0, i))

        # pick the reachable target with residual demand
        best = -1
        for j in range(nb):
            if demand[j] > 1e-15 and dist_b[j] < math.inf:
                if best < 0 or dist_b[j] < dist_b[best]:
                    best = j
        if best < 0:
            raise TransportError("no augmenting path; measures inconsistent")

        # trace arcs back to an origin supply node
        fwd, bwd = [], []
        j = best
        while True:
            i = prev_b[j]
            fwd.append((i, j))
            if prev_a[i] == -1:
                origin = i
                break
            j = prev_a[i]
            bwd.append((i, j))

        bott = min(supply[origin], demand[best])
        for i, j in bwd:
            bott = min(bott, flow[i][j])
        supply[origin] -= bott
        demand[best] -= bott
        for i, j in fwd:
            flow[i][j] += bott
        for i, j in bwd:
            flow[i][j] -= bott
        remaining -= bott

        # capped Johnson potential update keeps reduced costs nonnegative
        cap = dist_b[best]
        for i in range(na):
            pot_a[i] += min(dist_a[i], cap)
        for j in range(nb):
            pot_b[j] += min(dist_b[j], cap)

    total = 0.0
    moves = []
    for i in range(na):
        for j in range(nb):
            if flow[i][j] > 1e-12:
                moves.append((srcs[i][0], tgts[j][0], flow[i][j]))
                total += flow[i][j] * cost[i][j]
    return TransportPlan(moves, total)


def w1_exact(m: FiniteMetric, mu: dict, nu: dict):
    """Exact L1-transportation distance between point measures,
    returning (cost, plan)."""
    common = {}
    mu2, nu2 = dict(mu), dict(nu)
    for x in list(mu2):
        if x in nu2:
            c = min(mu2[x], nu2[x])
            mu2[x] -= c
            nu2[x] -= c
    plan = min_cost_transport(sorted(mu2.items()), sorted(nu2.items()), m.d)
    return plan.cost, plan


def _edge_weight(tree: Tree, nid: int) -> float:
    j = tree.level(nid)
    if j == tree.depth:
        return tree.scale[j - 1] / 2.0
    return (tree.scale[j - 1] - tree.scale[j]) / 2.0


def w1_tree(tree: Tree, mu: dict, nu: dict) -> float:
    """Closed-form W1 on the truncated tree for measures supported on
    any nodes (leaves or internal)."""
    _check_balanced(math.fsum(mu.values()), math.fsum(nu.values()))
    net: dict[int, float] = {}
    own: dict[int, float] = {}
    for sign, meas in ((1.0, mu), (-1.0, nu)):
        for nid, mass in meas.items():
            if mass == 0:
                continue
            own[nid] = own.get(nid, 0.0) + sign * mass
            cur = nid
            while cur is not None:
                net[cur] = net.get(cur, 0.0) + sign * mass
                cur = tree.parent(cur)
    total = 0.0
    for nid, imbalance in net.items():
        if nid == tree.root:
            continue
        total += _edge_weight(tree, nid) * abs(imbalance)
    for nid, imbalance in own.items():
        if not tree.is_leaf(nid) and imbalance != 0.0:
            total += (tree.scale[tree.level(nid)] / 2.0) * abs(imbalance)
    return total


def w1_tree_lp(tree: Tree, mu: dict, nu: dict):
    """Independent oracle: W1 under dist_T via the min-cost-flow solver."""
    plan = min_cost_transport(sorted(mu.items()), sorted(nu.items()), tree.dist)
    return plan.cost


def reduced_step_cost(f, mu: dict, mu_next: dict) -> float:
    """Transport cost from mu to mu_next when applying the fusion map f
    first is free: W1_T(f # mu, mu_next)."""
    from .hst import apply_fusion

    return w1_tree(f.tree, apply_fusion(f, mu), mu_next)


def tree_norm(tree: Tree, mu: dict, nu: dict) -> float:
    """Half-parent-scale subtree-imbalance norm ||mu - nu||_T.

    Satisfies 0.5*||.|| <= W1_T <= ||.|| (the lower bound is tight for
    sibling leaves; the upper holds because a unit matched at its lca is
    charged to the two child boundaries it crosses there)."""
    net: dict[int, float] = {}
    for sign, meas in ((1.0, mu), (-1.0, nu)):
        for nid, mass in meas.items():
            cur = nid
            while cur is not None:
                net[cur] = net.get(cur, 0.0) + sign * mass
                cur = tree.parent(cur)
    total = 0.0
    for nid, imbalance in net.items():
        if nid == tree.root:
            continue
        total += 0.5 * tree.scale[tree.level(nid) - 1] * abs(imbalance)
    return total
