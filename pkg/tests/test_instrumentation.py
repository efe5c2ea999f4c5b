import itertools
import math
import random

import pytest

from kserver.embedder import EmbedderParams
from kserver.hst import Tree, apply_fusion, canonical_injection
from kserver.instrumentation import (
    RhoHat,
    active_scale_bound,
    active_scales,
    psi_A,
    psi_F,
    rho,
    rho_hat,
)
from kserver.metric import build_metric
from kserver.partition import CarveSpec, SemiPartition, carve
from kserver.transport import w1_exact, w1_tree


def test_rho_conventions():
    m = build_metric("line", 5)
    assert rho(m, 2, {2: 2.0}) == 0.0
    assert rho_hat(m, 2, {2: 2.0}) == 0.0
    # unit at x already suffices
    assert rho_hat(m, 0, {0: 1.0, 4: 1.0}) == 0.0


def test_rho_single_far_unit():
    m = build_metric("line", 5)
    nu = {4: 1.0}
    assert rho(m, 0, nu) == m.d(0, 4)
    assert rho_hat(m, 0, nu) == m.d(0, 4)
    assert rho_hat(m, 0, nu) >= rho(m, 0, nu) / 2


def test_rho_hat_gathers_nearest_first():
    m = build_metric("line", 9)
    nu = {1: 0.5, 8: 10.0}
    # deficit 1 at point 0: take 0.5 from point 1, then 0.5 from point 8
    expect = 0.5 * m.d(0, 1) + 0.5 * m.d(0, 8)
    assert rho_hat(m, 0, nu) == pytest.approx(expect)


def test_rho_lipschitz_in_x_exhaustive():
    m = build_metric("random", 12, seed=2)
    rng = random.Random(0)
    nu = {i: rng.random() for i in range(0, 12, 2)}
    tot = sum(nu.values())
    nu = {i: 2 * v / tot for i, v in nu.items()}
    for x, y in itertools.combinations(range(12), 2):
        assert abs(rho(m, x, nu) - rho(m, y, nu)) <= m.d(x, y) + 1e-12
        assert abs(rho_hat(m, x, nu) - rho_hat(m, y, nu)) <= m.d(x, y) + 1e-12


def test_rho_hat_lipschitz_in_measure():
    m = build_metric("random", 10, seed=4)
    rng = random.Random(5)
    for _ in range(40):
        pts = rng.sample(range(10), 6)
        mu = {p: rng.random() + 0.2 for p in pts[:3]}
        nu = {p: rng.random() + 0.2 for p in pts[3:]}
        tot = sum(mu.values())
        nu = {p: v * tot / sum(nu.values()) for p, v in nu.items()}
        if tot < 1:
            mu = {p: v / tot for p, v in mu.items()}
            nu = {p: v / tot for p, v in nu.items()}
        w, _ = w1_exact(m, mu, nu)
        x = rng.randrange(10)
        assert abs(rho_hat(m, x, mu) - rho_hat(m, x, nu)) <= w + 1e-9


def test_rho_hat_at_least_half_rho():
    m = build_metric("random", 14, seed=9)
    rng = random.Random(7)
    for _ in range(60):
        pts = rng.sample(range(14), 5)
        nu = {p: rng.random() + 0.1 for p in pts}
        scale = 3.0 / sum(nu.values())
        nu = {p: v * scale for p, v in nu.items()}
        x = rng.randrange(14)
        assert rho_hat(m, x, nu) >= rho(m, x, nu) / 2 - 1e-12


def test_active_scales_cutoff_and_bound():
    m = build_metric("line", 101)
    params = EmbedderParams(k=4)
    nu = {50: 4.0}
    nets = {1: frozenset({50}), 2: frozenset({50})}
    # at the mass point itself: rho = 0, but covered by the net at all levels
    assert active_scales(m, 50, nu, nets, params) == set()
    # an isolated point far from the net is light everywhere above cutoff
    js = active_scales(m, 0, nu, nets, params)
    assert js <= {1, 2}
    assert len(js) <= active_scale_bound(params)
    # rho cutoff: when rho(x) >= tau^-1/eta nothing is active
    big = {x: 4.0 / 101 for x in range(101)}
    far_nets = {1: frozenset(), 2: frozenset()}
    r = rho(m, 0, big)
    if params.tau ** -1 <= params.eta_pad * r:
        assert active_scales(m, 0, big, far_nets, params) == set()


def line_tree_and_leaves():
    m = build_metric("line", 101)
    t = Tree(m, 12)
    cells = [frozenset({a, a + 1}) for a in range(0, 100, 4)]
    leaves = {}
    for c in cells:
        for x in sorted(c):
            leaves[x] = t.leaf_for_chain([(c, 0), (frozenset({x}), 0)])
    return m, t, leaves


def test_psi_A_zero_when_centers_everywhere():
    m, t, leaves = line_tree_and_leaves()
    params = EmbedderParams(k=2)
    mu = {leaves[0]: 1.0, leaves[8]: 1.0}
    rh = RhoHat(m, {0: 1.0, 8: 1.0})
    centers = {1: set(m.points), 2: set(m.points)}
    nets = {1: frozenset({50}), 2: frozenset({50})}
    assert psi_A(t, mu, rh, centers, nets, params) == 0.0


def test_psi_A_fusion_invariant_exact():
    m, t, leaves = line_tree_and_leaves()
    params = EmbedderParams(k=2)
    rng = random.Random(3)
    rh = RhoHat(m, {0: 1.0, 8: 1.0})
    centers = {1: {0}, 2: {0}}
    nets = {1: frozenset({50}), 2: frozenset({40})}
    for _ in range(50):
        mu = {leaves[x]: rng.random() for x in rng.sample(sorted(leaves), 5)}
        a = t.ancestor_at(leaves[0], 1)
        b = t.child(t.root, t.bottom(a) | frozenset({2, 3}), 0)
        f = canonical_injection(t, a, b)
        assert psi_A(t, apply_fusion(f, mu), rh, centers, nets, params) == pytest.approx(
            psi_A(t, mu, rh, centers, nets, params), abs=1e-12
        )


def test_psi_A_lipschitz_in_measure():
    m, t, leaves = line_tree_and_leaves()
    params = EmbedderParams(k=4)
    rng = random.Random(11)
    rh = RhoHat(m, {0: 2.0, 60: 2.0})
    centers = {1: {0, 40}, 2: {0}}
    nets = {1: frozenset({80}), 2: frozenset({80})}
    cal = 16.0
    lip = cal * (1.0 / params.delta_heavy) * math.log(params.k + 1)
    for _ in range(40):
        keys = rng.sample(sorted(leaves), 6)
        mu = {leaves[x]: rng.random() for x in keys[:3]}
        nu = {leaves[x]: rng.random() for x in keys[3:]}
        tot = sum(mu.values())
        nu = {k: v * tot / sum(nu.values()) for k, v in nu.items()}
        lhs = abs(
            psi_A(t, mu, rh, centers, nets, params) - psi_A(t, nu, rh, centers, nets, params)
        )
        assert lhs <= lip * w1_tree(t, mu, nu) + 1e-9


def test_psi_j_pointwise_lipschitz():
    # per-level summand is 4-Lipschitz in the point
    m = build_metric("random", 20, seed=6)
    params = EmbedderParams(k=3)
    rng = random.Random(13)
    rh = RhoHat(m, {1: 1.5, 7: 1.5})
    tau, eta = params.tau, params.eta_pad
    centers = set(rng.sample(range(20), 4))
    net = frozenset(rng.sample(range(20), 3))
    j = 1

    def psi_j(x):
        cap = tau ** (-j)
        dc = min(cap, m.d_set(x, centers))
        dl = min(cap, m.d_set(x, net))
        return dc * tau**j * max(0.0, dl - 2 * eta * rh(x) - 0.5 * tau ** (-j - 1))

    for x, y in itertools.combinations(range(20), 2):
        assert abs(psi_j(x) - psi_j(y)) <= 4 * m.d(x, y) + 1e-12


def test_psi_F_examples_and_lipschitz():
    m, t, leaves = line_tree_and_leaves()
    params = EmbedderParams(k=2)
    carve1 = carve(CarveSpec((0, 40), {0: 0.02, 40: 0.02}), m)
    carve2 = carve(CarveSpec((0,), {0: 0.005}), m)
    carves = {1: carve1, 2: carve2}
    # no net points: no fused clusters
    empty = {1: frozenset(), 2: frozenset()}
    mu = {leaves[0]: 1.0, leaves[40]: 1.0}
    assert psi_F(t, mu, carves, empty, params) == 0.0
    # all mass inside one level-j fused cluster
    nets = {1: frozenset({0}), 2: frozenset()}
    mu_in = {leaves[0]: 2.0}
    got = psi_F(t, mu_in, carves, nets, params)
    assert got == pytest.approx(-(12.0**-1) * 2.0)
    # fusion invariance
    a = t.ancestor_at(leaves[0], 1)
    b = t.child(t.root, t.bottom(a) | frozenset({2, 3}), 0)
    f = canonical_injection(t, a, b)
    assert psi_F(t, apply_fusion(f, mu), carves, nets, params) == pytest.approx(
        psi_F(t, mu, carves, nets, params), abs=1e-12
    )
    # 1-Lipschitz in the measure
    rng = random.Random(17)
    for _ in range(30):
        keys = rng.sample(sorted(leaves), 6)
        mu1 = {leaves[x]: rng.random() for x in keys[:3]}
        mu2 = {leaves[x]: rng.random() for x in keys[3:]}
        tot = sum(mu1.values())
        mu2 = {k: v * tot / sum(mu2.values()) for k, v in mu2.items()}
        lhs = abs(
            psi_F(t, mu1, carves, nets, params) - psi_F(t, mu2, carves, nets, params)
        )
        assert lhs <= w1_tree(t, mu1, mu2) + 1e-9
