"""Per-step diagnostics: isolation radii, active scales, the accuracy
and fission potentials, and the ledger that decomposes each potential's
step change into movement, fusion, insertion, fission, deletion and
isolation terms.

Fusion terms of the auxiliary potentials vanish identically (they only
see the pulled-back measure); the solver potential's fusion term is
non-positive.  These are asserted; everything else is recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

from .embedder import EmbedderParams, StepArtifacts
from .hst import Tree, beta_pushforward
from .metric import FiniteMetric, ball
from .partition import SemiPartition, fuse_semipartition
from .solver import ZConfig, lambda_eps, phi, potential_D, potential_H, psi_H

__all__ = [
    "rho",
    "rho_hat",
    "RhoHat",
    "active_scales",
    "active_scale_bound",
    "psi_A",
    "psi_F",
    "LedgerRow",
    "ledger_step",
    "InstrumentationError",
]


class InstrumentationError(AssertionError):
    pass


def rho(m: FiniteMetric, x: int, nu: dict) -> float:
    """sup{r : nu(B(x,r)) < 1/2}: the smallest distance at which the
    ball around x captures half a unit (0 when x already carries it)."""
    dists = sorted({m.d(x, y) for y in nu} | {0.0})
    acc = 0.0
    for d in dists:
        acc = math.fsum(mass for y, mass in nu.items() if m.d(x, y) <= d)
        if acc >= 0.5:
            return d
    return dists[-1] if dists else 0.0


def rho_hat(m: FiniteMetric, x: int, nu: dict) -> float:
    """Cheapest W1 cost of bringing a unit of mass onto x: gather the
    deficit from the nearest mass outward."""
    deficit = 1.0 - nu.get(x, 0.0)
    if deficit <= 0:
        return 0.0
    if math.fsum(nu.values()) < 1.0 - 1e-9:
        raise InstrumentationError("total mass below one: cannot gather a unit")
    cost = 0.0
    for y in sorted(nu, key=lambda y: m.d(x, y)):
        if y == x:
            continue
        take = min(deficit, nu[y])
        cost += take * m.d(x, y)
        deficit -= take
        if deficit <= 1e-15:
            break
    return cost


class RhoHat:
    """Memoized rho_hat(x) for one fixed measure."""

    def __init__(self, m: FiniteMetric, nu: dict):
        self.m = m
        self.nu = dict(nu)
        self._cache: dict = {}

    def __call__(self, x: int) -> float:
        if x not in self._cache:
            self._cache[x] = rho_hat(self.m, x, self.nu)
        return self._cache[x]


def active_scales(m: FiniteMetric, x: int, nu_bar: dict, nets: dict, params: EmbedderParams):
    """Levels at which x is light (half-separated from the net of its
    scale) and above the isolation cutoff eta * rho(x)."""
    r = rho(m, x, nu_bar)
    tau, eta = params.tau, params.eta_pad
    out = set()
    for j, net in nets.items():
        if tau ** (-j) <= eta * r:
            continue
        if m.d_set(x, net) >= 0.5 * tau ** (-j - 1):
            out.add(j)
    return out


def active_scale_bound(params: EmbedderParams) -> float:
    """Explicit form of the active-scale count bound."""
    k = params.k
    d = params.delta_heavy
    return math.log(2 * k) / math.log(1.0 / (1.0 - d)) + math.log(1.0 / params.eta_pad, params.tau) + 2.0


def _truncated_d(m: FiniteMetric, x: int, S, cap: float) -> float:
    return min(cap, m.d_set(x, S))


def psi_A(
    tree: Tree,
    mu: dict,
    rho_hat_fn,
    centers: dict,
    nets: dict,
    params: EmbedderParams,
) -> float:
    """Accuracy potential: penalizes pulled-back mass that sits far from
    the carve centers at levels where it is far from the net and not
    isolation-protected."""
    m = tree.metric
    tau, eta = params.tau, params.eta_pad
    total = 0.0
    for x, mass in beta_pushforward(tree, mu).items():
        if mass <= 0:
            continue
        rh = rho_hat_fn(x)
        acc = 0.0
        for j in sorted(centers):
            cap = tau ** (-j)
            dc = _truncated_d(m, x, centers[j], cap)
            if dc <= 0:
                continue
            dl = _truncated_d(m, x, nets[j], cap)
            slack = dl - 2 * eta * rh - 0.5 * tau ** (-j - 1)
            if slack > 0:
                acc += dc * tau**j * slack
        total += mass * acc
    return total


def fused_cluster_union(m: FiniteMetric, carve: SemiPartition, net, r: float):
    fused, _ = fuse_semipartition(carve, net, r, m)
    if not fused:
        return frozenset()
    return frozenset().union(*fused.values())


def psi_F(tree: Tree, mu: dict, carves: dict, nets: dict, params: EmbedderParams) -> float:
    """Fission potential: minus the level-weighted pulled-back mass
    inside fused clusters."""
    m = tree.metric
    tau = params.tau
    nu = beta_pushforward(tree, mu)
    total = 0.0
    for j in sorted(carves):
        hull = fused_cluster_union(m, carves[j], nets[j], 2 * tau ** (-j - 1))
        total -= tau ** (-j) * math.fsum(mass for x, mass in nu.items() if x in hull)
    return total


@dataclass
class LedgerRow:
    replica: int
    t: int
    sigma: int
    phi_t: float = 0.0
    d_t: float = 0.0
    h_t: float = 0.0
    psi_h_t: float = 0.0
    psi_a_t: float = 0.0
    psi_f_t: float = 0.0
    phi_move: float = 0.0
    phi_opt_move: float = 0.0
    phi_fusion: float = 0.0
    phi_insertion: float = 0.0
    phi_fission: float = 0.0
    phi_deletion: float = 0.0
    psi_a_move: float = 0.0
    psi_a_isolation: float = 0.0
    psi_a_fusion: float = 0.0
    psi_a_insertion: float = 0.0
    psi_a_fission: float = 0.0
    psi_a_deletion: float = 0.0
    psi_f_move: float = 0.0
    psi_f_fusion: float = 0.0
    psi_f_heavy_net: float = 0.0
    psi_f_insertion: float = 0.0
    psi_f_deletion: float = 0.0
    rho_prev_sigma: float = 0.0
    rho_hat_prev_sigma: float = 0.0
    active_scales_sigma: int = 0
    s_in_mass: float = 0.0
    s_out_mass: float = 0.0
    move_cost: float = 0.0
    a2_slack: float = 0.0

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def to_csv_row(self):
        return [getattr(self, f.name) for f in fields(self)]


def _embed_measure(alpha: dict, nu: dict) -> dict:
    out: dict = {}
    for x, mass in nu.items():
        leaf = alpha[x]
        out[leaf] = out.get(leaf, 0.0) + mass
    return out


def ledger_step(
    *,
    replica: int,
    art: StepArtifacts,
    params: EmbedderParams,
    tree: Tree,
    cfg_prev: ZConfig,
    cfg_fused: ZConfig,
    cfg_t: ZConfig,
    mu_prev: dict,
    mu_fused: dict,
    mu_t: dict,
    nu_star_prev: dict,
    nu_star_t: dict,
    rho_hat_prev,
    rho_hat_prev2,
    nu_bar_prev: dict,
    solver_move_cost: float,
) -> LedgerRow:
    """Evaluate all potentials on the step's snapshots and decompose the
    changes; the decompositions telescope exactly by construction."""
    m = tree.metric
    ev = art.events
    row = LedgerRow(replica=replica, t=ev.t, sigma=ev.sigma)

    # --- solver potential on the embedded offline optimum
    th_t_t = _embed_measure(art.alpha, nu_star_t)
    th_t_prev = _embed_measure(art.alpha, nu_star_prev)
    th_pre = _embed_measure(art.alpha_pre, nu_star_prev)
    th_fis = _embed_measure(art.alpha_fis, nu_star_prev)
    th_del = _embed_measure(art.alpha_del, nu_star_prev)
    th_prev = _embed_measure(art.alpha_prev, nu_star_prev)

    d_new = potential_D(th_t_t, cfg_t)
    h_new = potential_H(cfg_t)
    p_new = cfg_t.params.c0 * d_new - h_new
    p_fused_new = phi(th_t_t, cfg_fused)
    p_fused_old = phi(th_t_prev, cfg_fused)
    p_pre = phi(th_pre, cfg_prev)
    p_fis = phi(th_fis, cfg_prev)
    p_del = phi(th_del, cfg_prev)
    p_prev = phi(th_prev, cfg_prev)

    row.phi_t = p_new
    row.d_t = d_new
    row.h_t = h_new
    row.psi_h_t = psi_H(tree, lambda_eps(tree, cfg_t.leaf_masses(), cfg_t.params.eps))
    row.phi_move = p_new - p_fused_new
    row.phi_opt_move = p_fused_new - p_fused_old
    row.phi_fusion = p_fused_old - p_pre
    row.phi_insertion = p_pre - p_fis
    row.phi_fission = p_fis - p_del
    row.phi_deletion = p_del - p_prev
    if row.phi_fusion > 1e-9:
        raise InstrumentationError(f"fusion increased Phi by {row.phi_fusion}")

    # --- accuracy potential
    c_t, c_del, c_prev = art.centers, art.centers_del, art.centers_prev
    lam_cur, lam_prev = art.lam_cur, art.lam_prev
    a_new = psi_A(tree, mu_t, rho_hat_prev, c_t, lam_cur, params)
    a_fused = psi_A(tree, mu_fused, rho_hat_prev, c_t, lam_cur, params)
    a_fused_iso = psi_A(tree, mu_fused, rho_hat_prev2, c_t, lam_cur, params)
    a_prev_ct = psi_A(tree, mu_prev, rho_hat_prev2, c_t, lam_cur, params)
    a_prev_cdel = psi_A(tree, mu_prev, rho_hat_prev2, c_del, lam_cur, params)
    a_prev_fis = psi_A(tree, mu_prev, rho_hat_prev2, c_del, lam_prev, params)
    a_prev_old = psi_A(tree, mu_prev, rho_hat_prev2, c_prev, lam_prev, params)

    row.psi_a_t = a_new
    row.psi_a_move = a_new - a_fused
    row.psi_a_isolation = a_fused - a_fused_iso
    row.psi_a_fusion = a_fused_iso - a_prev_ct
    row.psi_a_insertion = a_prev_ct - a_prev_cdel
    row.psi_a_fission = a_prev_cdel - a_prev_fis
    row.psi_a_deletion = a_prev_fis - a_prev_old
    if abs(row.psi_a_fusion) > 1e-9:
        raise InstrumentationError(f"psi_A not fusion-invariant: {row.psi_a_fusion}")

    # --- fission potential
    p_t, p_del_c, p_prev_c = art.carves, art.carves_del, art.carves_prev
    f_new = psi_F(tree, mu_t, p_t, lam_cur, params)
    f_fused = psi_F(tree, mu_fused, p_t, lam_cur, params)
    f_prev_cur = psi_F(tree, mu_prev, p_t, lam_cur, params)
    f_prev_net = psi_F(tree, mu_prev, p_t, lam_prev, params)
    f_prev_del = psi_F(tree, mu_prev, p_del_c, lam_prev, params)
    f_prev_old = psi_F(tree, mu_prev, p_prev_c, lam_prev, params)

    row.psi_f_t = f_new
    row.psi_f_move = f_new - f_fused
    row.psi_f_fusion = f_fused - f_prev_cur
    row.psi_f_heavy_net = f_prev_cur - f_prev_net
    row.psi_f_insertion = f_prev_net - f_prev_del
    row.psi_f_deletion = f_prev_del - f_prev_old
    if abs(row.psi_f_fusion) > 1e-9:
        raise InstrumentationError(f"psi_F not fusion-invariant: {row.psi_f_fusion}")
    if row.psi_f_insertion > 1e-9:
        raise InstrumentationError(f"insertion increased psi_F by {row.psi_f_insertion}")

    # --- isolation and fission-analysis quantities
    row.rho_prev_sigma = rho(m, ev.sigma, nu_bar_prev)
    row.rho_hat_prev_sigma = rho_hat_prev(ev.sigma)
    nets_now = {j: lam_cur[j] for j in lam_cur}
    row.active_scales_sigma = len(active_scales(m, ev.sigma, nu_bar_prev, nets_now, params))
    nu_prev_pts = beta_pushforward(tree, mu_prev)
    tau = params.tau
    sqrt_lam = math.sqrt(params.lam)
    s_in = s_out = 0.0
    for j, vs in ev.added.items():
        r_in = tau ** (-j) / (2 * sqrt_lam)
        for v in vs:
            inner = ball(m, v, r_in)
            outer = ball(m, v, params.lam * r_in)
            s_in += math.fsum(mass for x, mass in nu_prev_pts.items() if x in inner)
            s_out += math.fsum(
                mass for x, mass in nu_prev_pts.items() if x in outer and x not in inner
            )
    row.s_in_mass = s_in
    row.s_out_mass = s_out
    row.move_cost = solver_move_cost
    # A2 diagnostic: negative slack means the transition paid for itself
    row.a2_slack = (p_new - p_fused_new) + solver_move_cost
    return row
