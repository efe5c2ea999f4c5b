"""Offline k-server optimum via min-cost flow, plus a brute-force DP
oracle for tiny instances.

The flow network has one unit per request (mandatory edges eliminated
into supplies/demands) and one unit per server.  A server chain visits
requests in time order; between visits it rests at the last serviced
point, so the reconstructed trajectory is lazy by construction.  Edges
only go to the first later occurrence of each point: same-point chaining
costs nothing, so this loses no generality.
"""

from __future__ import annotations

import heapq
import itertools
import math

from .metric import FiniteMetric

__all__ = ["offline_opt_mcf", "dp_opt", "OfflineError"]


class OfflineError(RuntimeError):
    pass


class _Graph:
    def __init__(self, n: int):
        self.head = [[] for _ in range(n)]

    def add(self, u: int, v: int, cap: int, cost: float):
        self.head[u].append([v, cap, cost, len(self.head[v])])
        self.head[v].append([u, 0, -cost, len(self.head[u]) - 1])

    def mcf(self, s: int, t: int, want: int):
        """Successive shortest augmenting paths with potentials."""
        n = len(self.head)
        pot = [0.0] * n
        total = 0.0
        sent = 0
        while sent < want:
            dist = [math.inf] * n
            prev = [(-1, -1)] * n
            dist[s] = 0.0
            heap = [(0.0, s)]
            while heap:
                d, u = heapq.heappop(heap)
                if d > dist[u] + 1e-15:
                    continue
                for ei, e in enumerate(self.head[u]):
                    v, cap, cost, _ = e
                    if cap <= 0:
                        continue
                    nd = d + cost + pot[u] - pot[v]
                    if nd < dist[v] - 1e-15:
                        dist[v] = nd
                        prev[v] = (u, ei)
                        heapq.heappush(heap, (nd, v))
            if dist[t] == math.inf:
                raise OfflineError("infeasible flow instance")
            for v in range(n):
                if dist[v] < math.inf:
                    pot[v] += dist[v]
                else:
                    pot[v] += dist[t]
            # bottleneck along the path
            bott = want - sent
            v = t
            while v != s:
                u, ei = prev[v]
                bott = min(bott, self.head[u][ei][1])
                v = u
            v = t
            while v != s:
                u, ei = prev[v]
                e = self.head[u][ei]
                e[1] -= bott
                self.head[v][e[3]][1] += bott
                total += e[2] * bott
                v = u
            sent += bott
        return total


def offline_opt_mcf(m: FiniteMetric, requests, k: int, initial):
    """Optimal offline cost and a lazy trajectory.

    initial: list of k starting points (with multiplicity).
    Returns (cost, trajectory) where trajectory[t] is the server
    multiset after request t (trajectory[0] = initial).
    """
    T = len(requests)
    if len(initial) != k:
        raise OfflineError("need exactly k initial positions")
    if T == 0:
        return 0.0, [_as_measure(initial)]

    nxt_occ: dict[int, dict] = {}
    seen: dict = {}
    for i in range(T - 1, -1, -1):
        nxt_occ[i] = dict(seen)
        seen[requests[i]] = i
    first_occ = dict(seen)

    # node ids; the retire node caps server exits at k so that every
    # request demand edge must be saturated
    S = 0
    TT = 1
    RT = 2
    serv0 = 3
    req_in = serv0 + k
    req_out = req_in + T
    n_nodes = req_out + T
    g = _Graph(n_nodes)

    g.add(RT, TT, k, 0.0)
    for j in range(k):
        g.add(S, serv0 + j, 1, 0.0)
        g.add(serv0 + j, RT, 1, 0.0)
        for p, i in first_occ.items():
            g.add(serv0 + j, req_in + i, 1, m.d(initial[j], p))
    for i in range(T):
        g.add(S, req_out + i, 1, 0.0)  # the serviced token re-emerges
        g.add(req_in + i, TT, 1, 0.0)  # ... and its demand is absorbed
        g.add(req_out + i, RT, 1, 0.0)
        for p, l in nxt_occ[i].items():
            g.add(req_out + i, req_in + l, 1, m.d(requests[i], p))

    cost = g.mcf(S, TT, k + T)

    # reconstruct server chains from the flow
    assign = {}
    for j in range(k):
        for e in g.head[serv0 + j]:
            v, cap, _, _ = e
            if cap == 0 and req_in <= v < req_out and e[2] >= 0:
                assign[("s", j)] = v - req_in
    for i in range(T):
        for e in g.head[req_out + i]:
            v, cap, _, _ = e
            if cap == 0 and req_in <= v < req_out and e[2] >= 0:
                assign[("r", i)] = v - req_in

    mover = {}
    for j in range(k):
        i = assign.get(("s", j))
        while i is not None:
            mover[i] = j
            i = assign.get(("r", i))

    positions = list(initial)
    trajectory = [_as_measure(positions)]
    for t, sigma in enumerate(requests):
        if sigma not in positions:
            if t not in mover:
                raise OfflineError("flow decomposition missed a request")
        if t in mover:
            positions[mover[t]] = sigma
        trajectory.append(_as_measure(positions))
    return cost, trajectory


def _as_measure(points) -> dict:
    out: dict = {}
    for p in points:
        out[p] = out.get(p, 0) + 1
    return out


def dp_opt(m: FiniteMetric, requests, k: int, initial) -> float:
    """Exhaustive DP over server multisets; allows arbitrary multi-server
    moves per step (the independent oracle for the flow solver)."""
    states = [tuple(sorted(c)) for c in itertools.combinations_with_replacement(m.points, k)]

    def match_cost(a, b):
        best = math.inf
        for perm in itertools.permutations(b):
            best = min(best, sum(m.d(x, y) for x, y in zip(a, perm)))
        return best

    cur = {tuple(sorted(initial)): 0.0}
    for sigma in requests:
        nxt: dict = {}
        feasible = [s for s in states if sigma in s]
        for s0, c0 in cur.items():
            for s1 in feasible:
                c = c0 + match_cost(s0, s1)
                if c < nxt.get(s1, math.inf):
                    nxt[s1] = c
        cur = nxt
    return min(cur.values()) if cur else 0.0
