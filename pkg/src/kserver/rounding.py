"""Online rounding of the fractional leaf measure to an integral one,
balanced at every tree node and maintained across cluster fusions.

Balance means every subtree's integral total is the floor or ceiling of
the fractional total.  Fusion applies the fusion map structurally (free,
and invisible to the pulled-back measure); where two occupied nodes
merge, the coupling table with the exact marginals decides the preferred
integral total of the union.  A top-down re-quota against the new
fractional measure then restores balance everywhere, keeping previous
quotas wherever the fractional totals allow.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .hst import FusionMap, Tree, apply_fusion, beta_pushforward, primitive_fusion_steps

__all__ = [
    "RoundingError",
    "fuse_couple",
    "IntegralReplica",
    "advance",
    "pull_back",
    "balance_violations",
]

SNAP = 1e-9


class RoundingError(ValueError):
    pass


def fuse_couple(mu_a: float, mu_b: float, p_a_floor: float, p_b_floor: float) -> dict:
    """Joint law of the integral totals of two merging subtrees.

    Returns {(k_a, k_b): prob} supported so that k_a + k_b is balanced
    for mu_a + mu_b while both marginals keep their floor-probabilities.
    Two cases depending on whether the fractional parts fit in one unit.
    """
    fa, fb = math.floor(mu_a), math.floor(mu_b)
    eps_a, eps_b = mu_a - fa, mu_b - fb
    ca = fa + (1 if eps_a > 0 else 0)
    cb = fb + (1 if eps_b > 0 else 0)
    if eps_a + eps_b <= 1.0:
        entries = [
            ((fa, fb), p_a_floor + p_b_floor - 1.0),
            ((fa, cb), (1.0 - p_b_floor) if eps_b > 0 else 0.0),
            ((ca, fb), (1.0 - p_a_floor) if eps_a > 0 else 0.0),
        ]
    else:
        entries = [
            ((fa, cb), p_a_floor),
            ((ca, fb), p_b_floor),
            ((ca, cb), 1.0 - p_a_floor - p_b_floor),
        ]
    out = {}
    for key, prob in entries:
        if prob < -1e-12:
            raise RoundingError(
                f"inconsistent marginals p_a={p_a_floor}, p_b={p_b_floor} "
                f"for fractional parts {eps_a}, {eps_b}"
            )
        if prob > 0.0:
            out[key] = out.get(key, 0.0) + prob
    total = math.fsum(out.values())
    if abs(total - 1.0) > 1e-9:
        raise RoundingError("coupling table does not sum to one")
    return out


@dataclass
class IntegralReplica:
    """One integral rounding tracking one fractional leaf measure."""

    tree: Tree
    frac: dict  # fractional leaf measure (total k)
    hat: dict  # integral leaf measure (total k, balanced against frac)
    seed: int
    t: int = 0

    def copy(self) -> "IntegralReplica":
        return IntegralReplica(self.tree, dict(self.frac), dict(self.hat), self.seed, self.t)


def _subtree(tree: Tree, mu: dict, node: int) -> float:
    return math.fsum(m for n, m in mu.items() if tree.is_ancestor(node, n))


def _snap_split(value: float):
    """(floor, frac) with floats within 1e-9 of an integer snapped."""
    r = round(value)
    if abs(value - r) <= SNAP:
        return int(r), 0.0
    f = math.floor(value)
    return int(f), value - f


def initial_replica(tree: Tree, frac: dict, seed: int) -> IntegralReplica:
    rep = IntegralReplica(tree, dict(frac), {}, seed)
    rep.hat = _topdown_requota(tree, frac, {}, {}, seed, 0)
    return rep


def pull_back(replica: IntegralReplica) -> dict:
    """beta-pushforward of the integral measure: integer masses on X."""
    out = beta_pushforward(replica.tree, replica.hat)
    return {x: int(round(m)) for x, m in out.items()}


def advance(replica: IntegralReplica, mu_next: dict, f_t: FusionMap, rng=None) -> IntegralReplica:
    """One step: apply the fusion map (free), couple merged pairs via
    the table, then re-quota top-down against mu_next."""
    tree = replica.tree
    t = replica.t + 1
    work = dict(replica.frac)
    hat = dict(replica.hat)
    prefs: dict[int, int] = {}
    for src, tgt in f_t.injections:
        single = FusionMap(tree, ((src, tgt),))
        if not any(tree.is_ancestor(src, n) for n in work):
            # nothing to move; the measure is untouched
            continue
        for a, img in primitive_fusion_steps(single):
            mu_a = _subtree(tree, work, a)
            mu_b = _subtree(tree, work, img)
            if mu_a <= 0 or mu_b <= 0:
                continue
            fa, ea = _snap_split(mu_a)
            fb, eb = _snap_split(mu_b)
            table = fuse_couple(fa + ea, fb + eb, 1.0 - ea, 1.0 - eb)
            k_a_cur = int(round(_subtree(tree, hat, a)))
            k_b_cur = int(round(_subtree(tree, hat, img)))
            if table.get((k_a_cur, k_b_cur), 0.0) > 0.0:
                # the current pair is already a valid balanced outcome
                prefs[img] = k_a_cur + k_b_cur
                continue
            rng_pair = random.Random((replica.seed * 1_000_003 + t) ^ (a * 7_919))
            row = {kb: p for (ka, kb), p in table.items() if ka == k_a_cur}
            tot = math.fsum(row.values())
            if tot <= 0:
                k_a, k_b = _draw(table, rng_pair)
            else:
                k_a = k_a_cur
                k_b = _draw({(k_a, kb): p / tot for kb, p in row.items()}, rng_pair)[1]
            prefs[img] = k_a + k_b
        work = apply_fusion(single, work)
        hat = apply_fusion(single, hat)
    new_hat = _topdown_requota(tree, mu_next, hat, prefs, replica.seed, t)
    return IntegralReplica(tree, dict(mu_next), new_hat, replica.seed, t)


def _draw(table: dict, rng) -> tuple:
    u = rng.random()
    acc = 0.0
    last = None
    for key, p in sorted(table.items()):
        acc += p
        last = key
        if u <= acc:
            return key
    return last


def _topdown_requota(tree: Tree, frac: dict, prev_hat: dict, prefs: dict, seed: int, t: int) -> dict:
    """Assign integral quotas top-down: each child receives the floor of
    its fractional subtree total, and the residual units go to fractional
    children, preferring coupling outcomes and previous quotas."""
    support = [n for n, m in frac.items() if m > 0]
    closure: dict[int, list] = {}
    nodes = set()
    for leaf in set(support) | set(prev_hat):
        cur = leaf
        while cur is not None and cur not in nodes:
            nodes.add(cur)
            cur = tree.parent(cur)
    for n in nodes:
        p = tree.parent(n)
        if p is not None:
            closure.setdefault(p, []).append(n)

    sub: dict[int, float] = {}
    for leaf, m in frac.items():
        cur = leaf
        while cur is not None:
            sub[cur] = sub.get(cur, 0.0) + m
            cur = tree.parent(cur)
    prev_sub: dict[int, float] = {}
    for leaf, m in prev_hat.items():
        cur = leaf
        while cur is not None:
            prev_sub[cur] = prev_sub.get(cur, 0.0) + m
            cur = tree.parent(cur)

    root_total = sub.get(tree.root, 0.0)
    base_root, frac_root = _snap_split(root_total)
    if frac_root != 0.0:
        raise RoundingError(f"fractional grand total {root_total} is not integral")

    out: dict[int, int] = {}

    def assign(node: int, quota: int) -> None:
        if tree.is_leaf(node) or not closure.get(node):
            if quota > 0:
                if not tree.is_leaf(node):
                    raise RoundingError("quota stranded at an internal node")
                out[node] = quota
            return
        kids = sorted(closure[node])
        bases, fracs = {}, {}
        for c in kids:
            b, f = _snap_split(sub.get(c, 0.0))
            bases[c], fracs[c] = b, f
        residual = quota - sum(bases.values())
        cands = [c for c in kids if fracs[c] > 0.0]
        if residual < 0 or residual > len(cands):
            raise RoundingError("quota incompatible with child floors")
        rng = random.Random((seed * 9_176_941 + t) * 31 + node)

        def pref_key(c):
            score = 0
            if prefs.get(c) is not None:
                score = 2 if prefs[c] >= bases[c] + 1 else -1
            elif prev_sub.get(c, 0.0) >= bases[c] + 1 - 1e-9:
                score = 1
            return (-score, -fracs[c], rng.random())

        cands.sort(key=pref_key)
        extra = set(cands[:residual])
        for c in kids:
            q = bases[c] + (1 if c in extra else 0)
            if q > 0 or sub.get(c, 0.0) > 0 or prev_sub.get(c, 0.0) > 0:
                assign(c, q)

    assign(tree.root, base_root)
    return out


def balance_violations(tree: Tree, frac: dict, hat: dict) -> list:
    """Exact balance check: every subtree integral total must be the
    floor or ceiling of the fractional total."""
    out = []
    sub: dict[int, float] = {}
    hsub: dict[int, float] = {}
    for meas, acc in ((frac, sub), (hat, hsub)):
        for leaf, m in meas.items():
            cur = leaf
            while cur is not None:
                acc[cur] = acc.get(cur, 0.0) + m
                cur = tree.parent(cur)
    for n in set(sub) | set(hsub):
        b, f = _snap_split(sub.get(n, 0.0))
        h = int(round(hsub.get(n, 0.0)))
        lo, hi = b, b + (1 if f > 0 else 0)
        if not (lo <= h <= hi):
            out.append(f"node {n}: integral {h} not in [{lo}, {hi}] for fractional {sub.get(n, 0.0)}")
    return out
