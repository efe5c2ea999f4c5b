"""Online maintenance of the dynamic tree embedding.

Each request is processed in phases: complete the previous step's heavy
net from the annealed measure, evaluate the per-level insertion
indicator, delete a random center at capped levels, unfuse clusters
whose net point was ejected (fission), insert the request as a new
carve center with a fresh truncated-exponential radius, fuse along the
current net, and emit the new embedding together with the fusion map
that carries the pre-fusion tree onto it.

Deletion randomness is consumed only from rng_del and carving radii
only from rng_hst, so replicas that share the deletion stream share the
center and net sequences exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .hst import FusionMap, Tree, canonical_injection
from .metric import FiniteMetric, ball
from .partition import CarveSpec, SemiPartition, carve, embed_all, fuse_semipartition, sample_trunc_exp

__all__ = [
    "EmbedderParams",
    "EmbedderState",
    "StepEvents",
    "StepArtifacts",
    "EmbedderError",
    "default_f1",
    "default_f4",
    "is_heavy",
    "update_heavy_net",
    "embedder_step",
    "annealed_measure",
    "structural_violations",
]


class EmbedderError(RuntimeError):
    pass


def default_f1(k: int) -> float:
    return max(1.0, math.log(k) ** 2)


def default_f4(k: int) -> float:
    return max(1.0, math.log(k) ** 2)


@dataclass(frozen=True)
class EmbedderParams:
    """Run constants; the defaults follow the constant-wiring of the
    competitive analysis with f1 = f4 = max(1, ln^2 k)."""

    k: int
    tau: float = 12.0
    c_big_a: float = 1.0  # multiplier on the accuracy-potential constant
    f1: float = None
    f4: float = None

    def __post_init__(self):
        if self.tau < 12:
            raise EmbedderError("tau must be at least 12")
        if self.f1 is None:
            object.__setattr__(self, "f1", default_f1(self.k))
        if self.f4 is None:
            object.__setattr__(self, "f4", default_f4(self.k))

    @property
    def lam(self) -> float:
        return max(9.0, self.tau) ** 2

    @property
    def c_f(self) -> float:
        return 0.25

    @property
    def c_a(self) -> float:
        # log k guarded at k=1: the analysis constants assume k >= 2
        return 1.0 / (8.0 * self.c_big_a * self.f4 * math.log(max(self.k, 2)))

    @property
    def delta_heavy(self) -> float:
        d = self.c_f / (4.0 * (self.f4 + self.c_a))
        if not 0 < d < 0.5:
            raise EmbedderError("delta_heavy outside (0, 1/2)")
        return d

    @property
    def eta_pad(self) -> float:
        return 1.0 / (32.0 * self.k * self.f1)

    @property
    def k_cap(self) -> float:
        return 2.0 * self.tau * self.k * self.f1 / (32.0 * self.c_a)


@dataclass
class LevelState:
    centers: list = field(default_factory=list)  # pi order
    radii: dict = field(default_factory=dict)
    lam_cur: frozenset = frozenset()  # the net of the previous step
    lam_prev: frozenset = frozenset()  # the net two steps back
    carve_prev: SemiPartition = None  # previous step's carve


@dataclass
class StepEvents:
    t: int
    sigma: int
    indicator: dict
    j_star: int
    deletions: dict
    ejected: dict  # per level: net points of t-2 missing at t-1
    added: dict  # per level: net points new at t-1
    lam_sizes: dict
    fused_clusters: dict
    unfused_cells: dict

    def to_json_obj(self):
        return {
            "t": self.t,
            "sigma": self.sigma,
            "indicator": {str(j): v for j, v in sorted(self.indicator.items())},
            "j_star": self.j_star,
            "deletions": {str(j): v for j, v in sorted(self.deletions.items())},
            "ejected": {str(j): sorted(v) for j, v in sorted(self.ejected.items())},
            "added": {str(j): sorted(v) for j, v in sorted(self.added.items())},
            "lam_sizes": {str(j): v for j, v in sorted(self.lam_sizes.items())},
            "fused_clusters": {str(j): v for j, v in sorted(self.fused_clusters.items())},
            "unfused_cells": {str(j): v for j, v in sorted(self.unfused_cells.items())},
        }


@dataclass
class StepArtifacts:
    """Everything the instrumentation needs about one step."""

    events: StepEvents
    alpha_prev: dict
    alpha_del: dict
    alpha_fis: dict
    alpha_pre: dict
    alpha: dict
    rank: dict
    fusion: FusionMap
    carves: dict  # level -> current carve
    carves_del: dict
    carves_prev: dict
    fused: dict  # level -> {net point: cluster} of the current fusion
    partitions: dict  # level -> current fused semi-partition Q_t
    centers: dict  # level -> C_t (pi order)
    centers_del: dict
    centers_prev: dict
    lam_cur: dict  # level -> net used by this step's fusion
    lam_prev: dict


class EmbedderState:
    def __init__(
        self,
        metric: FiniteMetric,
        tree: Tree,
        params: EmbedderParams,
        x0: int,
        rng_hst,
        nu_bar0: dict | None = None,
    ):
        self.metric = metric
        self.tree = tree
        self.params = params
        self.t = 0
        self.levels = {}
        for j in range(1, tree.depth + 1):
            ls = LevelState()
            ls.centers = [x0]
            ls.radii = {x0: params.tau ** (-j - 1) + sample_trunc_exp(j + 1, params.k_cap, params.tau, rng_hst)}
            # seeded at the initial point, then maintained once against
            # the initial annealed measure (which may be spread when a
            # single leaf cannot carry all k + eps units)
            lam0 = frozenset({x0})
            if nu_bar0:
                lam0 = update_heavy_net(lam0, nu_bar0, j, params, metric)
            ls.lam_cur = lam0
            ls.lam_prev = lam0
            self.levels[j] = ls
        qs = []
        for j in range(1, tree.depth + 1):
            ls = self.levels[j]
            p0 = carve(CarveSpec(tuple(ls.centers), dict(ls.radii)), metric)
            ls.carve_prev = p0
            _, q0 = fuse_semipartition(p0, ls.lam_cur, 2 * params.tau ** (-j - 1), metric)
            qs.append(q0)
        emb = embed_all(tree, qs)
        self.alpha = {x: leaf for x, (leaf, _) in emb.items()}
        self.rank = {x: r for x, (_, r) in emb.items()}
        self.partitions = dict(enumerate(qs, start=1))

    def center_sets(self):
        return {j: list(ls.centers) for j, ls in self.levels.items()}

    def nets(self):
        return {j: ls.lam_cur for j, ls in self.levels.items()}


def is_heavy(nu_bar: dict, m: FiniteMetric, x: int, r: float, lam: float, delta: float) -> bool:
    """A ball is heavy when it carries a positive (1 - delta) fraction
    of the mass of its lam-times enlargement.  Mass-free balls are not
    heavy: otherwise isolated points would be vacuously heavy and the
    net maintenance could cycle."""
    inner = math.fsum(mass for y, mass in nu_bar.items() if m.d(x, y) <= r)
    if inner <= 0.0:
        return False
    outer = math.fsum(mass for y, mass in nu_bar.items() if m.d(x, y) <= lam * r)
    return inner >= (1.0 - delta) * outer


def heavy_points(nu_bar: dict, m: FiniteMetric, r: float, lam: float, delta: float) -> list:
    """Heaviness of (x, r) for every x at once (the measure is fixed, so
    this is two ball-mass sweeps over the support)."""
    support = [y for y, mass in nu_bar.items() if mass > 0]
    if not support:
        return [False] * m.n
    weights = [nu_bar[y] for y in support]
    out = []
    lam_r = lam * r
    thresh = 1.0 - delta
    for x in m.points:
        row = m._rows[x]
        inner = outer = 0.0
        for y, w in zip(support, weights):
            d = row[y]
            if d <= lam_r:
                outer += w
                if d <= r:
                    inner += w
        out.append(inner > 0.0 and inner >= thresh * outer)
    return out


def update_heavy_net(lam_set, nu_bar: dict, j: int, params: EmbedderParams, m: FiniteMetric):
    """Eject-and-add maintenance: while some point is heavy at scale
    tau^-j/(2 sqrt(lam)) and uncovered within tau^-j/sqrt(lam), evict
    its neighborhood of radius (sqrt(lam)/3) tau^-j and add it."""
    tau, lam, delta = params.tau, params.lam, params.delta_heavy
    sqrt_lam = math.sqrt(lam)
    r_heavy = tau ** (-j) / (2 * sqrt_lam)
    r_cover = tau ** (-j) / sqrt_lam
    r_evict = (sqrt_lam / 3.0) * tau ** (-j)
    heavy = heavy_points(nu_bar, m, r_heavy, lam, delta)
    net = set(lam_set)
    for _ in range(4 * m.n):
        candidate = None
        for x in m.points:
            if heavy[x] and m.d_set(x, net) > r_cover:
                candidate = x
                break
        if candidate is None:
            return frozenset(net)
        net = {y for y in net if m.d(candidate, y) >= r_evict}
        net.add(candidate)
    raise EmbedderError("heavy-net maintenance did not terminate")


def annealed_measure(replica_measures) -> dict:
    """Coordinatewise average of the replicas' pulled-back measures."""
    if not replica_measures:
        raise EmbedderError("need at least one replica")
    out: dict = {}
    inv = 1.0 / len(replica_measures)
    for nu in replica_measures:
        for x, mass in nu.items():
            out[x] = out.get(x, 0.0) + mass * inv
    return out


def _prefused(Q_fis: SemiPartition, sigma_cell, new_net_points, r: float, m: FiniteMetric):
    """The prefused semi-partition: fission cells, then the request's
    carve cell, then the balls of newly added net points, each minus
    everything listed before it."""
    cells = list(Q_fis.cells)
    tags = list(Q_fis.tags)
    taken = set(Q_fis.covered)
    extra = sigma_cell - taken if sigma_cell else frozenset()
    if extra:
        cells.append(frozenset(extra))
        tags.append(("sigma-cell",))
        taken |= extra
    for x in sorted(new_net_points):
        add = ball(m, x, r) - taken
        if add:
            cells.append(frozenset(add))
            tags.append(("new-net", x))
            taken |= add
    return SemiPartition(cells, tags)


def _build_fusion_map(tree: Tree, alpha_pre: dict, alpha_t: dict) -> FusionMap:
    """Level-by-level merge of the pre-fusion chains onto the fused
    chains: at each level, the distinct pre-cells inside one fused cell
    are injected into their common sibling (0-decorated whenever a real
    merge happens)."""
    points = sorted(alpha_pre)
    pre_cells = {x: tree.chain_cells(alpha_pre[x]) for x in points}
    t_cells = {x: tree.chain_cells(alpha_t[x]) for x in points}
    cur = {x: tree.root for x in points}
    injections = []
    for j in range(tree.depth):
        groups: dict = {}
        for x in points:
            tgt_cell, tgt_dec = t_cells[x][j]
            src_cell, src_dec = pre_cells[x][j]
            if src_dec != tgt_dec:
                raise EmbedderError("pre and fused chains disagree on decorations")
            groups.setdefault((cur[x], tgt_cell, tgt_dec), {})[src_cell] = src_dec
        moved: dict = {}
        for (parent, tgt_cell, dec), sources in sorted(
            groups.items(), key=lambda kv: (kv[0][0], sorted(kv[0][1]), kv[0][2])
        ):
            target = tree.child(parent, tgt_cell, dec)
            for src_cell in sorted(sources, key=sorted):
                if src_cell == tgt_cell:
                    continue
                if dec != 0:
                    raise EmbedderError("only 0-decorated chains may merge")
                src = tree.child(parent, src_cell, dec)
                injections.append((src, target))
            moved[(parent, tgt_cell, dec)] = target
        for x in points:
            tgt_cell, tgt_dec = t_cells[x][j]
            cur[x] = moved[(cur[x], tgt_cell, tgt_dec)]
    for x in points:
        if cur[x] != alpha_t[x]:
            raise EmbedderError("fusion map does not carry alpha_pre onto alpha_t")
    return FusionMap(tree, tuple(injections))


def embedder_step(state: EmbedderState, sigma: int, nu_bar_prev: dict, rng_hst, rng_del) -> StepArtifacts:
    """Process one request; returns the step artifacts (the state is
    updated in place and its heavy nets are those of the previous step,
    completed here from the annealed measure)."""
    m, tree, p = state.metric, state.tree, state.params
    if sigma not in range(m.n):
        raise EmbedderError(f"unknown point {sigma}")
    state.t += 1
    t = state.t
    tau = p.tau

    # finish the previous step's heavy-net maintenance
    ejected, added = {}, {}
    for j, ls in state.levels.items():
        if t >= 2:
            new_net = update_heavy_net(ls.lam_cur, nu_bar_prev, j, p, m)
            ls.lam_prev, ls.lam_cur = ls.lam_cur, new_net
        ejected[j] = set(ls.lam_prev) - set(ls.lam_cur)
        added[j] = set(ls.lam_cur) - set(ls.lam_prev)

    indicator, deletions = {}, {}
    centers_prev = {j: list(ls.centers) for j, ls in state.levels.items()}
    carves_prev = {j: ls.carve_prev for j, ls in state.levels.items()}
    alpha_prev = dict(state.alpha)

    carves_del, carves_t = {}, {}
    centers_del_map, centers_t_map = {}, {}
    q_del, q_fis, q_pre, q_t = {}, {}, {}, {}
    fused_t = {}

    for j, ls in state.levels.items():
        scale_next = tau ** (-j - 1)
        near = m.d_set(sigma, set(ls.centers) | set(ls.lam_cur))
        ind = 1 if near > scale_next else 0
        indicator[j] = ind

        centers_del = list(ls.centers)
        if ind and len(centers_del) >= p.k_cap:
            victim = rng_del.choice(sorted(centers_del))
            deletions[j] = victim
            centers_del.remove(victim)
        radii_del = {c: ls.radii[c] for c in centers_del}
        p_del = carve(CarveSpec(tuple(centers_del), radii_del), m)

        centers_t = list(centers_del)
        radii_t = dict(radii_del)
        if ind:
            centers_t.append(sigma)
            radii_t[sigma] = scale_next + sample_trunc_exp(j + 1, p.k_cap, tau, rng_hst)
        p_t = carve(CarveSpec(tuple(centers_t), radii_t), m)

        r_fuse = 2 * scale_next
        _, q_del[j] = fuse_semipartition(p_del, ls.lam_cur, r_fuse, m)
        _, q_fis[j] = fuse_semipartition(p_del, set(ls.lam_cur) & set(ls.lam_prev), r_fuse, m)
        fused, q = fuse_semipartition(p_t, ls.lam_cur, r_fuse, m)
        fused_t[j], q_t[j] = fused, q
        q_pre[j] = _prefused(q_fis[j], p_t.cell_of(sigma), added[j], r_fuse, m)
        if q_pre[j].covered != q.covered:
            raise EmbedderError("prefused semi-partition covers a different set")

        carves_del[j], carves_t[j] = p_del, p_t
        centers_del_map[j], centers_t_map[j] = centers_del, centers_t
        ls.centers = centers_t
        ls.radii = radii_t
        ls.carve_prev = p_t

    levels = sorted(state.levels)
    emb_del = embed_all(tree, [q_del[j] for j in levels])
    emb_fis = embed_all(tree, [q_fis[j] for j in levels])
    emb_pre = embed_all(tree, [q_pre[j] for j in levels])
    emb_t = embed_all(tree, [q_t[j] for j in levels])
    alpha_t = {x: leaf for x, (leaf, _) in emb_t.items()}
    rank_t = {x: r for x, (_, r) in emb_t.items()}
    alpha_pre = {x: leaf for x, (leaf, _) in emb_pre.items()}
    fusion = _build_fusion_map(tree, alpha_pre, alpha_t)

    if not tree.all_zero_decorated(alpha_t[sigma]):
        raise EmbedderError("the requested point must embed 0-decorated")

    state.alpha = alpha_t
    state.rank = rank_t
    state.partitions = dict(q_t)

    j_nonzero = [j for j in levels if indicator[j]]
    events = StepEvents(
        t=t,
        sigma=sigma,
        indicator=indicator,
        j_star=min(j_nonzero) if j_nonzero else 0,
        deletions=deletions,
        ejected=ejected,
        added=added,
        lam_sizes={j: len(state.levels[j].lam_cur) for j in levels},
        fused_clusters={j: len(fused_t[j]) for j in levels},
        unfused_cells={j: len(q_t[j].cells) - len(fused_t[j]) for j in levels},
    )
    return StepArtifacts(
        events=events,
        alpha_prev=alpha_prev,
        alpha_del={x: leaf for x, (leaf, _) in emb_del.items()},
        alpha_fis={x: leaf for x, (leaf, _) in emb_fis.items()},
        alpha_pre=alpha_pre,
        alpha=alpha_t,
        rank=rank_t,
        fusion=fusion,
        carves=carves_t,
        carves_del=carves_del,
        carves_prev=carves_prev,
        fused=fused_t,
        partitions=dict(q_t),
        centers=centers_t_map,
        centers_del=centers_del_map,
        centers_prev=centers_prev,
        lam_cur={j: state.levels[j].lam_cur for j in levels},
        lam_prev={j: state.levels[j].lam_prev for j in levels},
    )


def structural_violations(state: EmbedderState, art: StepArtifacts, nu_bar: dict) -> list:
    """Exact per-step invariants: net separation and coverage, fused
    partition boundedness, super-paddedness, and embedding identities."""
    m, p, tree = state.metric, state.params, state.tree
    out = []
    tau = p.tau
    sqrt_lam = math.sqrt(p.lam)
    for j in sorted(state.levels):
        net = sorted(art.lam_cur[j])
        sep = 3 * tau ** (-j)
        for i, x in enumerate(net):
            for y in net[i + 1 :]:
                if m.d(x, y) <= sep:
                    out.append(f"level {j}: net points {x},{y} too close")
        if nu_bar is not None:
            r_heavy = tau ** (-j) / (2 * sqrt_lam)
            r_cover = tau ** (-j) / sqrt_lam
            heavy = heavy_points(nu_bar, m, r_heavy, p.lam, p.delta_heavy)
            for x in m.points:
                if heavy[x] and m.d_set(x, net) > r_cover:
                    out.append(f"level {j}: heavy point {x} uncovered")
        q = art.partitions[j]
        if q.max_diam(m) > tau ** (-j):
            out.append(f"level {j}: fused partition exceeds tau^-{j}")
        # super-paddedness at the fusion's net
        for x in m.points:
            if m.d_set(x, net) <= tau ** (-j - 1):
                cell = q.cell_of(x)
                if cell is None or not ball(m, x, tau ** (-j - 1)) <= cell:
                    out.append(f"level {j}: point {x} not super-padded")
    for x in m.points:
        if tree.bottom(art.alpha[x]) != frozenset({x}):
            out.append(f"embedding of {x} does not bottom at {x}")
    if not tree.all_zero_decorated(art.alpha[art.events.sigma]):
        out.append("request embedded with a nonzero decoration")
    return out
