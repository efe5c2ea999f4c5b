"""Fractional k-server on the truncated universal tree.

The reference solver keeps a point in the constraint set K_delta: per
tree node, a non-increasing list of z-values in [0, 1/(1-delta)] whose
sum equals the fractional subtree mass, with z <= 1 at leaves and total
k + eps, where delta = 1/(3k) and eps = delta*k/(1-delta).  The
potential is Phi = C0*D - H with the relative-entropy-style D between an
integral reference measure and the configuration, and the entropy-like
H of the configuration itself.

Configurations are canonical: every internal list is the sorted multiset
of the leaf masses below it (the root list is pinned to k copies of
1/(1-delta)).  Primitive fusion merges sibling lists by sorted
concatenation and never increases Phi; the transition gathers a unit of
deficit onto the requested leaf from the nearest subtrees outward and
re-derives the lists.

The extra server mass is removed by the rounding map r_eps and the
subtree-rounding Lambda_eps, which produces a total-k node measure; its
mass is pushed down to leaves to obtain the k-server leaf measure that
the integral rounding tracks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .hst import FusionMap, Tree

__all__ = [
    "SolverError",
    "SolverParams",
    "ZConfig",
    "potential_D",
    "potential_H",
    "phi",
    "primitive_fuse_z",
    "apply_fusion_to_config",
    "reference_transition",
    "mass_round_r_eps",
    "lambda_eps",
    "push_down_to_leaves",
    "psi_H",
    "phi_hat",
    "dominates",
    "kdelta_violations",
]

TOL = 1e-9
SNAP = 1e-9  # plateau tolerance of r_eps; absorbs float drift in totals


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class SolverParams:
    k: int
    tau: float
    c0_multiplier: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise SolverError(f"invalid k={self.k}, need k >= 1")

    @property
    def delta(self) -> float:
        return 1.0 / (3.0 * self.k)

    @property
    def eps(self) -> float:
        return self.delta * self.k / (1.0 - self.delta)

    @property
    def c0(self) -> float:
        return self.c0_multiplier * (math.ceil(math.log(self.k)) + 1.0)

    @property
    def zmax(self) -> float:
        return 1.0 / (1.0 - self.delta)


class ZConfig:
    """Immutable solver configuration: per-node sorted z-lists."""

    def __init__(self, tree: Tree, params: SolverParams, zlists: dict):
        self.tree = tree
        self.params = params
        # drop empty lists, freeze the rest
        self.zlists = {n: tuple(v) for n, v in zlists.items() if v}
        self._leaf = {n: math.fsum(v) for n, v in self.zlists.items() if tree.is_leaf(n)}

    @classmethod
    def from_leaf_masses(cls, tree: Tree, params: SolverParams, masses: dict) -> "ZConfig":
        """Canonical configuration: internal lists are the sorted leaf
        multisets; the root list is pinned."""
        zl: dict = {}
        for leaf, m in masses.items():
            if m <= 0:
                continue
            if not tree.is_leaf(leaf):
                raise SolverError("from_leaf_masses expects leaf support")
            zl[leaf] = [m]
        level_nodes: dict[int, set] = {}
        for leaf in list(zl):
            cur = leaf
            while cur is not None:
                level_nodes.setdefault(tree.level(cur), set()).add(cur)
                cur = tree.parent(cur)
        for lv in sorted(level_nodes, reverse=True):
            if lv == 0:
                continue
            for n in level_nodes[lv]:
                if tree.is_leaf(n):
                    continue
                combined = []
                for c in tree.children(n):
                    combined.extend(zl.get(c, ()))
                if combined:
                    zl[n] = sorted(combined, reverse=True)
        zl[tree.root] = [params.zmax] * params.k
        return cls(tree, params, zl)

    def leaf_masses(self) -> dict:
        return dict(self._leaf)

    def zlist(self, node) -> tuple:
        return self.zlists.get(node, ())

    def subtree_z(self, node) -> float:
        if node == self.tree.root:
            return self.params.k * self.params.zmax
        return math.fsum(self.zlists.get(node, ()))

    def total(self) -> float:
        return math.fsum(self._leaf.values())


def kdelta_violations(cfg: ZConfig, tol: float = TOL) -> list:
    """Exact K_delta membership check; returns human-readable violations."""
    tree, p = cfg.tree, cfg.params
    out = []
    zmax = p.zmax
    for n, zl in cfg.zlists.items():
        if n == tree.root:
            continue
        if any(z < -tol or z > zmax + tol for z in zl):
            out.append(f"node {n}: z-entry outside [0, 1/(1-delta)]")
        if list(zl) != sorted(zl, reverse=True):
            out.append(f"node {n}: z-list not sorted non-increasingly")
        if tree.is_leaf(n) and math.fsum(zl) > 1.0 + tol:
            out.append(f"leaf {n}: mass {math.fsum(zl)} > 1")
    total = cfg.total()
    if abs(total - (p.k + p.eps)) > tol:
        out.append(f"total {total} != k + eps")
    # consistency and majorization at every occupied internal node
    internal = {tree.parent(n) for n in cfg.zlists if n != tree.root}
    internal.discard(None)
    closure = set()
    for n in internal:
        cur = n
        while cur is not None and cur not in closure:
            closure.add(cur)
            cur = tree.parent(cur)
    for n in sorted(closure):
        own = [zmax] * p.k if n == tree.root else list(cfg.zlists.get(n, ()))
        child_concat = []
        for c in tree.children(n):
            child_concat.extend(cfg.zlists.get(c, ()))
        if not tree.is_leaf(n):
            if abs(math.fsum(own) - math.fsum(child_concat)) > tol * max(1.0, p.k):
                out.append(f"node {n}: z != sum of children z")
        child_concat.sort(reverse=True)
        acc_own = 0.0
        acc_child = 0.0
        for i, zc in enumerate(child_concat):
            acc_child += zc
            acc_own += own[i] if i < len(own) else 0.0
            if acc_own < acc_child - tol:
                out.append(f"node {n}: majorization fails at prefix {i + 1}")
                break
    return out


# -- potentials ------------------------------------------------------------


def _tail_weight(tree: Tree) -> float:
    # sum of tau^-j for j > depth: the implicit singleton tail below leaves
    return tree.scale[tree.depth] / (tree.tau - 1.0)


def _d_term(zl, zhat: int, delta: float) -> float:
    """Sum over i of (xhat_i + delta) log((xhat_i + delta)/(x_i + delta))."""
    total = 0.0
    n = max(len(zl), zhat)
    for i in range(n):
        x = 1.0 - (1.0 - delta) * zl[i] if i < len(zl) else 1.0
        xhat = 0.0 if i < zhat else 1.0
        total += (xhat + delta) * math.log((xhat + delta) / (x + delta))
    return total


def potential_D(theta: dict, cfg: ZConfig) -> float:
    """Level-weighted divergence between the integral measure theta and
    the configuration, summed over the (implicitly infinite) tree."""
    tree, p = cfg.tree, cfg.params
    zhat: dict[int, int] = {}
    for leaf, m in theta.items():
        mi = int(round(m))
        if abs(m - mi) > 1e-9:
            raise SolverError("potential_D expects an integral measure")
        if mi == 0:
            continue
        cur = leaf
        while cur is not None:
            zhat[cur] = zhat.get(cur, 0) + mi
            cur = tree.parent(cur)
    nodes = set(cfg.zlists) | set(zhat)
    nodes.discard(tree.root)
    total = 0.0
    tailw = _tail_weight(tree)
    for n in nodes:
        lv = tree.level(n)
        term = _d_term(cfg.zlist(n), zhat.get(n, 0), p.delta)
        total += tree.scale[lv] * term
        if tree.is_leaf(n):
            total += tailw * term
    return total


def potential_H(cfg: ZConfig) -> float:
    """Entropy-like potential of the configuration itself."""
    tree, p = cfg.tree, cfg.params
    eps = p.eps
    c = 1.0 / tree.tau
    total = 0.0
    tailw = _tail_weight(tree)
    for n in cfg.zlists:
        if n == tree.root:
            continue
        z = cfg.subtree_z(n)
        if z <= 0:
            continue
        zpar = cfg.subtree_z(tree.parent(n))
        term = (z + (1 + c) * eps) * math.log((z + eps) / eps) + z * math.log(zpar + eps)
        total += tree.scale[tree.level(n)] * term
        if tree.is_leaf(n):
            tail_term = (z + (1 + c) * eps) * math.log((z + eps) / eps) + z * math.log(z + eps)
            total += tailw * tail_term
    return total


def phi(theta: dict, cfg: ZConfig) -> float:
    """Phi = C0 * D - H."""
    return cfg.params.c0 * potential_D(theta, cfg) - potential_H(cfg)


# -- fusion ----------------------------------------------------------------


def primitive_fuse_z(cfg: ZConfig, a: int, b: int) -> ZConfig:
    """Fuse sibling node a into b: sorted merge of the two z-lists, then
    cascade into colliding descendants (each cascade step is itself a
    primitive fusion, so Phi is monotone along the way)."""
    tree = cfg.tree
    if a == b:
        return cfg
    if tree.parent(a) != tree.parent(b) or tree.level(a) != tree.level(b):
        raise SolverError("primitive fusion requires siblings")
    if not tree.bottom(a) <= tree.bottom(b):
        raise SolverError("source bottom must be contained in target bottom")
    zl = {n: list(v) for n, v in cfg.zlists.items()}
    _fuse_rec(tree, zl, a, b)
    return ZConfig(tree, cfg.params, zl)


def _fuse_rec(tree: Tree, zl: dict, a: int, b: int) -> None:
    la = zl.pop(a, [])
    lb = zl.get(b, [])
    merged = sorted(la + lb, reverse=True)
    if merged:
        zl[b] = merged
    moved = [n for n in zl if n != a and tree.is_ancestor(a, n)]
    by_child: dict[int, list] = {}
    for n in moved:
        c = tree.ancestor_at(n, tree.level(a) + 1)
        by_child.setdefault(c, []).append(n)
    for c in sorted(by_child):
        img = tree.child(b, tree.bottom(c), tree.dec(c))
        _fuse_rec(tree, zl, c, img)


def apply_fusion_to_config(cfg: ZConfig, f: FusionMap) -> ZConfig:
    """Apply each canonical injection of the fusion map to the
    configuration via cascaded primitive fusions."""
    for src, tgt in f.injections:
        touched = any(cfg.tree.is_ancestor(src, n) for n in cfg.zlists)
        if touched:
            cfg = primitive_fuse_z(cfg, src, tgt)
    return cfg


# -- transition ------------------------------------------------------------


def reference_transition(cfg: ZConfig, sigma_leaf: int):
    """Greedy nearest-first water-filling: gather the deficit of the
    requested leaf from sibling subtrees in increasing lca depth,
    proportionally to current masses.  Returns (new config, tree
    movement cost)."""
    tree, p = cfg.tree, cfg.params
    if p.k + p.eps < 1.0:
        raise SolverError("k < 1 is infeasible")
    if not tree.is_leaf(sigma_leaf) or not tree.all_zero_decorated(sigma_leaf):
        raise SolverError("requests must map to 0-decorated leaves")
    masses = cfg.leaf_masses()
    cur = masses.get(sigma_leaf, 0.0)
    if cur >= 1.0:
        return cfg, 0.0
    path = tree.path(sigma_leaf)
    cost = 0.0
    gathered = 0.0
    for hop in range(len(path) - 2, -1, -1):
        need = 1.0 - (cur + gathered)
        if need <= 0:
            break
        anc, child_on_path = path[hop], path[hop + 1]
        donors = [
            leaf
            for leaf, m in masses.items()
            if m > 0 and tree.is_ancestor(anc, leaf) and not tree.is_ancestor(child_on_path, leaf)
        ]
        pool = math.fsum(masses[leaf] for leaf in donors)
        if pool <= 0:
            continue
        scale = tree.scale[tree.level(anc)]
        rate = min(1.0, need / pool)
        for leaf in donors:
            moved = masses[leaf] if rate >= 1.0 else masses[leaf] * rate
            masses[leaf] -= moved
            gathered += moved
            cost += moved * scale
        # absorb float residue: bump from remaining donors, with a floor
        # on the bump size so the loop always terminates
        for _ in range(len(donors) + 4):
            short = 1.0 - (cur + gathered)
            if short <= 0:
                break
            rem = [l for l in donors if masses[l] > 0]
            if not rem:
                break
            big = max(rem, key=lambda l: masses[l])
            bump = min(masses[big], max(short, 1e-12))
            masses[big] -= bump
            gathered += bump
            cost += bump * scale
    masses[sigma_leaf] = cur + gathered
    if masses[sigma_leaf] < 1.0 - TOL:
        raise SolverError("failed to gather a unit of server mass")
    new_cfg = ZConfig.from_leaf_masses(tree, p, {l: m for l, m in masses.items() if m > 0})
    return new_cfg, cost


# -- extra-mass reduction ----------------------------------------------------


def mass_round_r_eps(y: float, eps: float) -> float:
    """Piecewise-linear rounding: constant h on [h, h+eps], affine in
    between; 1/(1-eps)-Lipschitz and superadditive.  Plateau membership
    uses a small tolerance so conserved totals round to exact integers
    despite float drift."""
    if y < 0:
        if y < -TOL:
            raise SolverError("mass_round_r_eps needs y >= 0")
        return 0.0
    h = math.floor(y)
    frac = y - h
    if frac <= eps + SNAP:
        return float(h)
    return h + (frac - eps) / (1.0 - eps)


def lambda_eps(tree: Tree, mu: dict, eps: float) -> dict:
    """Subtree rounding of a (k+eps)-mass leaf measure into a k-mass
    node measure: every subtree total becomes r_eps of the fractional
    subtree total; superadditivity keeps node masses nonnegative."""
    sub: dict[int, float] = {}
    for leaf, m in mu.items():
        if m < 0:
            raise SolverError("negative leaf mass")
        cur = leaf
        while cur is not None:
            sub[cur] = sub.get(cur, 0.0) + m
            cur = tree.parent(cur)
    out: dict[int, float] = {}
    for n, s in sub.items():
        r = mass_round_r_eps(s, eps)
        if tree.is_leaf(n):
            mass = r
        else:
            mass = r - math.fsum(
                mass_round_r_eps(sub[c], eps) for c in tree.children(n) if c in sub
            )
        if mass < -TOL:
            raise SolverError("superadditivity violated: negative node mass")
        if mass > 0:
            out[n] = mass
    # pin the grand total to exactly k: r_eps is constant on the plateau
    # [k, k+eps], so only float residue from the telescoping remains
    k = mass_round_r_eps(sub[tree.root], eps)
    if k != math.floor(k):
        raise SolverError("total leaf mass is not on the integer plateau")
    for _ in range(4):
        residue = k - math.fsum(out.values())
        if residue == 0.0:
            break
        if abs(residue) > TOL:
            raise SolverError("subtree rounding lost mass")
        big = max(out, key=out.get)
        out[big] += residue
    return out


def push_down_to_leaves(tree: Tree, node_mu: dict, leaf_weights: dict) -> dict:
    """Push internal node mass down to leaves, proportionally to the
    given leaf weights below each node.  The result is leaf-supported
    and dominated by the input."""
    out: dict[int, float] = {}
    for n, m in node_mu.items():
        if tree.is_leaf(n):
            out[n] = out.get(n, 0.0) + m
            continue
        below = [(leaf, w) for leaf, w in leaf_weights.items() if w > 0 and tree.is_ancestor(n, leaf)]
        tot = math.fsum(w for _, w in below)
        if tot <= 0:
            raise SolverError("internal mass with no leaf weight below")
        for leaf, w in below:
            out[leaf] = out.get(leaf, 0.0) + m * (w / tot)
    return out


def psi_H(tree: Tree, node_mu: dict) -> float:
    """Average height: sum of tau^-depth over the node measure."""
    return math.fsum(tree.scale[tree.level(n)] * m for n, m in node_mu.items())


def phi_hat(theta: dict, cfg: ZConfig, tilde_mu: dict) -> float:
    """Augmented potential 2*Phi + Psi_H(Lambda_eps mu) + W1(Lambda_eps
    mu, tilde_mu) of the reduction that tracks a k-mass leaf measure."""
    from .transport import w1_tree

    node_mu = lambda_eps(cfg.tree, cfg.leaf_masses(), cfg.params.eps)
    return 2.0 * phi(theta, cfg) + psi_H(cfg.tree, node_mu) + w1_tree(cfg.tree, node_mu, tilde_mu)


def dominates(tree: Tree, mu: dict, mu_prime: dict, tol: float = TOL) -> bool:
    """mu dominates mu_prime: equal totals and every subtree total of mu
    is at most that of mu_prime (mu_prime is mu pushed down)."""
    if abs(math.fsum(mu.values()) - math.fsum(mu_prime.values())) > tol:
        return False
    subs = []
    for meas in (mu, mu_prime):
        sub: dict[int, float] = {}
        for n, m in meas.items():
            cur = n
            while cur is not None:
                sub[cur] = sub.get(cur, 0.0) + m
                cur = tree.parent(cur)
        subs.append(sub)
    for n in set(subs[0]) | set(subs[1]):
        if n == tree.root:
            continue
        if subs[0].get(n, 0.0) > subs[1].get(n, 0.0) + tol:
            return False
    return True
