"""Runtime verification battery for the `kserver verify` subcommand:
quick versions of the invariant suites, one pass/fail line each."""

from __future__ import annotations

import itertools
import math
import random

from .hst import Tree, apply_fusion, beta_pushforward, canonical_injection
from .metric import build_metric
from .rounding import fuse_couple
from .solver import SolverParams, ZConfig, kdelta_violations, phi, primitive_fuse_z
from .transport import w1_tree, w1_tree_lp

__all__ = ["run_battery"]


def _check_metric_axioms(rng):
    m = build_metric("random", 24, seed=rng.randrange(10**6))
    for i, j, l in itertools.combinations(range(24), 3):
        if m.dist[i, l] > m.dist[i, j] + m.dist[j, l]:
            return False
    return True


def _tree_fixture(rng):
    m = build_metric("line", 101)
    t = Tree(m, 12)
    leaves = []
    for s in rng.sample(range(0, 98, 3), 6):
        cell = frozenset({s, s + 1})
        for x in sorted(cell):
            leaves.append(t.leaf_for_chain([(cell, 0), (frozenset({x}), 0)]))
    return m, t, leaves


def _check_tree_transport(rng):
    for _ in range(20):
        m, t, leaves = _tree_fixture(rng)
        mu = {l: rng.random() for l in leaves[:6]}
        nu = {l: rng.random() for l in leaves[6:]}
        tot = sum(mu.values())
        nu = {k: v * tot / sum(nu.values()) for k, v in nu.items()}
        if abs(w1_tree(t, mu, nu) - w1_tree_lp(t, mu, nu)) > 1e-9:
            return False
    return True


def _check_free_fusion(rng):
    for _ in range(50):
        m, t, leaves = _tree_fixture(rng)
        a = t.parent(leaves[0])
        union = t.bottom(a) | t.bottom(t.parent(leaves[2]))
        if m.diam_set(union) > 1 / 12:
            continue
        tgt = t.child(t.root, union, 0)
        f = canonical_injection(t, a, tgt)
        mu = {l: rng.random() for l in leaves}
        ga = beta_pushforward(t, apply_fusion(f, mu))
        gb = beta_pushforward(t, mu)
        if set(ga) != set(gb) or any(abs(ga[x] - gb[x]) > 1e-12 for x in ga):
            return False
    return True


def _check_fuse_tables(rng):
    for _ in range(2000):
        mu_a, mu_b = rng.random() * 3, rng.random() * 3
        ea, eb = mu_a - math.floor(mu_a), mu_b - math.floor(mu_b)
        table = fuse_couple(mu_a, mu_b, 1 - ea, 1 - eb)
        if abs(math.fsum(table.values()) - 1.0) > 1e-12:
            return False
        for ka, kb in table:
            if not (math.floor(mu_a + mu_b) <= ka + kb <= math.ceil(mu_a + mu_b)):
                return False
    return True


def _check_kdelta_fusion(rng):
    p = SolverParams(k=3, tau=12.0)
    for _ in range(40):
        m, t, leaves = _tree_fixture(rng)
        chosen = rng.sample(leaves, 6)
        raw = [rng.random() + 0.1 for _ in chosen]
        target = p.k + p.eps
        masses = [min(1.0, r * target / sum(raw)) for r in raw]
        short = target - sum(masses)
        masses[0] = min(1.0, masses[0] + short)
        if abs(sum(masses) - target) > 1e-9:
            continue
        cfg = ZConfig.from_leaf_masses(t, p, dict(zip(chosen, masses)))
        if kdelta_violations(cfg):
            return False
        a = t.parent(chosen[0])
        union = t.bottom(a) | frozenset({50, 51})
        if m.diam_set(union) > 1 / 12:
            continue
        tgt = t.child(t.root, union, 0)
        out = primitive_fuse_z(cfg, a, tgt)
        if kdelta_violations(out):
            return False
        theta = {chosen[0]: 3}
        f = canonical_injection(t, a, tgt)
        if phi(apply_fusion(f, theta), out) > phi(theta, cfg) + 1e-9:
            return False
    return True


def run_battery(seed: int = 0):
    """Runs the named checks; returns [(name, passed)]."""
    rng = random.Random(seed)
    checks = [
        ("metric-triangle-inequality", _check_metric_axioms),
        ("tree-transport-vs-flow-oracle", _check_tree_transport),
        ("fusion-free-pullback", _check_free_fusion),
        ("rounding-coupling-tables", _check_fuse_tables),
        ("kdelta-and-phi-under-fusion", _check_kdelta_fusion),
    ]
    return [(name, fn(rng)) for name, fn in checks]
