"""End-to-end experiment driver.

Each replica owns a tree, an embedder state, a solver configuration, the
tracked k-mass leaf measure, and an integral rounding.  Replicas share
the deletion randomness (hence center sets, nets and indicators evolve
in lockstep, which is asserted) and differ in carving radii and rounding
randomness.  The annealed measure is the across-replica average of the
fractional pullbacks.

A run goes in two passes: the first generates requests (adversaries may
probe the integral state) and accumulates costs; after computing the
offline optimum on the recorded requests, an identical replay computes
the potential ledgers against the embedded optimum trajectory.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field

from .adversary import make_adversary
from .embedder import (
    EmbedderParams,
    EmbedderState,
    annealed_measure,
    embedder_step,
    structural_violations,
)
from .hst import Tree, apply_fusion, beta_pushforward
from .instrumentation import LedgerRow, RhoHat, active_scale_bound, active_scales, ledger_step, rho, rho_hat
from .metric import FiniteMetric, build_metric
from .offline import offline_opt_mcf
from .rounding import advance, balance_violations, initial_replica, pull_back
from .solver import (
    SolverParams,
    ZConfig,
    apply_fusion_to_config,
    kdelta_violations,
    lambda_eps,
    phi,
    push_down_to_leaves,
    reference_transition,
)
from .transport import w1_exact, w1_tree

__all__ = ["ExperimentConfig", "RunReport", "run", "HarnessError"]


class HarnessError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    metric: str = "line"
    n: int = 64
    k: int = 4
    horizon: int = 200
    replicas: int = 8
    tau: float = 12.0
    c_big_a: float = 1.0
    c0_multiplier: float = 1.0
    seed_hst: int = 1
    seed_del: int = 2
    seed_rounding: int = 3
    seed_adversary: int = 4
    adversary: str = "random"
    x0: int = 0
    degree: int = 4  # expander degree
    trace: list = None
    ledger_replicas: int = 2
    check_invariants: bool = True
    out: str = None

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ExperimentConfig":
        cfg = cls()
        for key, val in obj.items():
            if not hasattr(cfg, key):
                raise HarnessError(f"unknown config key {key!r}")
            setattr(cfg, key, val)
        return cfg

    def to_json_obj(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class RunReport:
    config: dict
    requests: list
    opt_cost: float
    frac_costs: list
    integral_x_costs: list
    integral_tree_costs: list
    solver_costs: list
    rho_hat_sum: float
    rho_sum: float
    additive_offset: float
    phi0_times4: float
    active_scale_samples: list
    active_scale_bound: float
    servicing_violations: int
    balance_violation_count: int
    kdelta_violation_count: int
    structural_violation_count: int
    event_counts: dict
    ledger_rows: list = field(default_factory=list)

    @property
    def mean_integral_cost(self) -> float:
        return sum(self.integral_x_costs) / len(self.integral_x_costs)

    @property
    def mean_frac_cost(self) -> float:
        return sum(self.frac_costs) / len(self.frac_costs)

    @property
    def ratio(self) -> float:
        """Integral competitive ratio; None when the optimum is zero
        (the additive offset is reported instead)."""
        if self.opt_cost <= 0:
            return None
        return self.mean_integral_cost / self.opt_cost

    @property
    def frac_ratio(self):
        if self.opt_cost <= 0:
            return None
        return self.mean_frac_cost / self.opt_cost

    @property
    def rounding_overhead(self):
        if self.mean_frac_cost <= 0:
            return None
        return self.mean_integral_cost / self.mean_frac_cost

    @property
    def isolation_ok(self) -> bool:
        return self.rho_hat_sum <= 2.0 * self.mean_frac_cost + 1e-9

    def summary_obj(self) -> dict:
        return {
            "config": self.config,
            "opt_cost": self.opt_cost,
            "mean_integral_cost": self.mean_integral_cost,
            "mean_frac_cost": self.mean_frac_cost,
            "mean_solver_cost": sum(self.solver_costs) / len(self.solver_costs),
            "ratio": self.ratio,
            "frac_ratio": self.frac_ratio,
            "rounding_overhead": self.rounding_overhead,
            "additive_offset": self.additive_offset,
            "phi0_times4": self.phi0_times4,
            "rho_hat_sum": self.rho_hat_sum,
            "rho_sum": self.rho_sum,
            "isolation_ok": self.isolation_ok,
            "active_scale_max": max((c for _, _, c in self.active_scale_samples), default=0),
            "active_scale_bound": self.active_scale_bound,
            "servicing_violations": self.servicing_violations,
            "balance_violations": self.balance_violation_count,
            "kdelta_violations": self.kdelta_violation_count,
            "structural_violations": self.structural_violation_count,
            "event_counts": self.event_counts,
            "per_replica": {
                "frac_costs": self.frac_costs,
                "integral_x_costs": self.integral_x_costs,
                "integral_tree_costs": self.integral_tree_costs,
            },
        }


class _Replica:
    def __init__(self, idx: int, m: FiniteMetric, cfg: ExperimentConfig, nu_bar0, init_leaves_of):
        self.idx = idx
        self.tree = Tree(m, cfg.tau)
        self.params = EmbedderParams(k=cfg.k, tau=cfg.tau, c_big_a=cfg.c_big_a)
        self.sparams = SolverParams(k=cfg.k, tau=cfg.tau, c0_multiplier=cfg.c0_multiplier)
        self.rng_hst = random.Random((cfg.seed_hst, idx).__hash__() & 0x7FFFFFFF)
        self.rng_del = random.Random(cfg.seed_del)
        self.state = EmbedderState(m, self.tree, self.params, cfg.x0, self.rng_hst, nu_bar0=None)
        leaf_masses = init_leaves_of(self)
        self.zcfg = ZConfig.from_leaf_masses(self.tree, self.sparams, leaf_masses)
        node_mu = lambda_eps(self.tree, self.zcfg.leaf_masses(), self.sparams.eps)
        self.mu_tilde = push_down_to_leaves(self.tree, node_mu, self.zcfg.leaf_masses())
        self.integral = initial_replica(self.tree, self.mu_tilde, (cfg.seed_rounding, idx).__hash__() & 0x7FFFFFFF)
        self.pullback = pull_back(self.integral)
        self.frac_cost = 0.0
        self.integral_tree_cost = 0.0
        self.integral_x_cost = 0.0
        self.solver_cost = 0.0


def _initial_leaf_masses(rep: _Replica, m: FiniteMetric, cfg: ExperimentConfig):
    """k unit leaves at the points nearest x0 plus the eps remainder at
    the next one: a single leaf cannot carry more than one unit."""
    order = sorted(m.points, key=lambda y: (m.d(cfg.x0, y), y))
    if len(order) < cfg.k + 1:
        raise HarnessError("need more than k points")
    masses = {}
    for y in order[: cfg.k]:
        masses[rep.state.alpha[y]] = 1.0
    masses[rep.state.alpha[order[cfg.k]]] = rep.sparams.eps
    return masses


def _init_net_pass(rep: _Replica, nu_bar0: dict, m: FiniteMetric):
    from .embedder import update_heavy_net

    for j, ls in rep.state.levels.items():
        lam0 = update_heavy_net(ls.lam_cur, nu_bar0, j, rep.params, m)
        ls.lam_cur = lam0
        ls.lam_prev = lam0


def run(config: ExperimentConfig) -> RunReport:
    """Full pipeline; see the module docstring for the two passes."""
    report = _run_pass(config, requests=None, nu_star=None)
    opt_cost, trajectory = offline_opt_mcf(
        build_metric(config.metric, config.n, seed=config.seed_adversary, degree=config.degree),
        report["requests"],
        config.k,
        report["initial_positions"],
    )
    ledger_rows = []
    phi0 = report["phi0_times4"]
    if config.ledger_replicas > 0 and config.horizon > 0:
        replay = _run_pass(config, requests=report["requests"], nu_star=trajectory)
        for key in ("frac_costs", "integral_x_costs", "requests"):
            if replay[key] != report[key]:
                raise HarnessError(f"replay diverged on {key}")
        ledger_rows = replay["ledger_rows"]
        phi0 = replay["phi0_times4"]

    out = RunReport(
        config=config.to_json_obj(),
        requests=report["requests"],
        opt_cost=opt_cost,
        frac_costs=report["frac_costs"],
        integral_x_costs=report["integral_x_costs"],
        integral_tree_costs=report["integral_tree_costs"],
        solver_costs=report["solver_costs"],
        rho_hat_sum=report["rho_hat_sum"],
        rho_sum=report["rho_sum"],
        additive_offset=_additive_offset(report, trajectory,
                                         build_metric(config.metric, config.n,
                                                      seed=config.seed_adversary, degree=config.degree)),
        phi0_times4=phi0,
        active_scale_samples=report["active_scale_samples"],
        active_scale_bound=report["active_scale_bound"],
        servicing_violations=report["servicing_violations"],
        balance_violation_count=report["balance_violations"],
        kdelta_violation_count=report["kdelta_violations"],
        structural_violation_count=report["structural_violations"],
        event_counts=report["event_counts"],
        ledger_rows=ledger_rows,
    )
    if config.out:
        _write_outputs(config, out, report["event_lines"])
    return out


def _additive_offset(report, trajectory, m: FiniteMetric) -> float:
    """Mean integral cost accumulated while the offline optimum is still
    free (the additive part of the competitiveness guarantee)."""
    opt_prefix = 0.0
    zero_until = 0
    for t in range(1, len(trajectory)):
        step = _traj_step_cost(m, trajectory[t - 1], trajectory[t])
        opt_prefix += step
        if opt_prefix > 0:
            break
        zero_until = t
    per_step = report["integral_x_cost_steps"]
    if not per_step:
        return 0.0
    upto = [sum(col[:zero_until]) for col in per_step]
    return sum(upto) / len(upto)


def _traj_step_cost(m, prev, cur):
    moves, _ = w1_exact(m, {x: float(v) for x, v in prev.items()}, {x: float(v) for x, v in cur.items()})
    return moves


def _run_pass(config: ExperimentConfig, requests=None, nu_star=None):
    m = build_metric(config.metric, config.n, seed=config.seed_adversary, degree=config.degree)
    if config.k >= m.n:
        raise HarnessError("nontrivial instances need k < n")
    replicas = [
        _Replica(i, m, config, None, lambda rep: _initial_leaf_masses(rep, m, config))
        for i in range(config.replicas)
    ]
    initial_positions = sorted(
        x for rep in [replicas[0]] for x, c in rep.pullback.items() for _ in range(c)
    )
    nu_bar = annealed_measure([beta_pushforward(r.tree, r.mu_tilde) for r in replicas])
    for rep in replicas:
        _init_net_pass(rep, nu_bar, m)
    nu_bar_hist = [nu_bar, nu_bar]  # [t-1, t-2] seeds; rho_hat(-1) := rho_hat(0)

    if requests is not None:
        adversary = make_adversary("trace", m, config.k, config.seed_adversary, trace=requests)
    else:
        adversary = make_adversary(config.adversary, m, config.k, config.seed_adversary, trace=config.trace)

    do_ledger = nu_star is not None
    ledger_rows: list[LedgerRow] = []
    phi0_vals = []
    if do_ledger:
        for rep in replicas[: config.ledger_replicas]:
            theta0 = _embed_points(rep.state.alpha, nu_star[0])
            phi0_vals.append(4.0 * phi(theta0, rep.zcfg))

    recorded = []
    event_lines = []
    rho_hat_sum = 0.0
    rho_sum = 0.0
    scale_rng = random.Random(config.seed_adversary + 991)
    scale_every = max(1, config.horizon // 100)
    active_samples = []
    servicing_violations = 0
    balance_bad = 0
    kdelta_bad = 0
    structural_bad = 0
    event_counts = {"insertions": 0, "deletions": 0, "fissions": 0, "net_additions": 0}
    integral_x_cost_steps = [[] for _ in replicas]

    for t in range(1, config.horizon + 1):
        def probe():
            agg = {}
            for rep in replicas:
                for x, c in rep.pullback.items():
                    agg[x] = agg.get(x, 0) + c
            return agg

        sigma = adversary.request(t, probe=probe if adversary.probing else None)
        recorded.append(sigma)
        nu_prev, nu_prev2 = nu_bar_hist[0], nu_bar_hist[1]
        rho_hat_sum += rho_hat(m, sigma, nu_prev)
        rho_sum += rho(m, sigma, nu_prev)
        rh_prev = RhoHat(m, nu_prev)
        rh_prev2 = RhoHat(m, nu_prev2)

        shared_check = None
        for idx, rep in enumerate(replicas):
            art = embedder_step(rep.state, sigma, nu_prev, rep.rng_hst, rep.rng_del)
            key = (
                tuple(tuple(art.centers[j]) for j in sorted(art.centers)),
                tuple(art.lam_cur[j] for j in sorted(art.lam_cur)),
                tuple(sorted(art.events.deletions.items())),
            )
            if shared_check is None:
                shared_check = key
            elif key != shared_check:
                raise HarnessError("replicas diverged on the shared center/net stream")

            cfg_prev = rep.zcfg
            mu_prev_t = rep.mu_tilde
            cfg_fused = apply_fusion_to_config(cfg_prev, art.fusion)
            mu_fused = apply_fusion(art.fusion, mu_prev_t)
            if config.check_invariants and kdelta_violations(cfg_fused):
                kdelta_bad += 1
            sigma_leaf = art.alpha[sigma]
            cfg_t, move_cost = reference_transition(cfg_fused, sigma_leaf)
            if config.check_invariants and kdelta_violations(cfg_t):
                kdelta_bad += 1
            node_mu = lambda_eps(rep.tree, cfg_t.leaf_masses(), rep.sparams.eps)
            mu_t = push_down_to_leaves(rep.tree, node_mu, cfg_t.leaf_masses())
            rep.frac_cost += w1_tree(rep.tree, mu_fused, mu_t)
            rep.solver_cost += move_cost

            prev_hat = {n: float(v) for n, v in rep.integral.hat.items()}
            rep.integral = advance(rep.integral, mu_t, art.fusion)
            fused_hat = apply_fusion(art.fusion, prev_hat)
            new_hat = {n: float(v) for n, v in rep.integral.hat.items()}
            step_tree = w1_tree(rep.tree, fused_hat, new_hat)
            rep.integral_tree_cost += step_tree
            new_pull = pull_back(rep.integral)
            step_x = w1_exact(
                m,
                {x: float(v) for x, v in rep.pullback.items()},
                {x: float(v) for x, v in new_pull.items()},
            )[0]
            rep.integral_x_cost += step_x
            integral_x_cost_steps[idx].append(step_x)

            if new_pull.get(sigma, 0) < 1:
                servicing_violations += 1
            if config.check_invariants:
                if balance_violations(rep.tree, mu_t, rep.integral.hat):
                    balance_bad += 1
                viols = structural_violations(rep.state, art, nu_prev)
                if viols:
                    structural_bad += len(viols)

            if do_ledger and idx < config.ledger_replicas:
                row = ledger_step(
                    replica=idx,
                    art=art,
                    params=rep.params,
                    tree=rep.tree,
                    cfg_prev=cfg_prev,
                    cfg_fused=cfg_fused,
                    cfg_t=cfg_t,
                    mu_prev=mu_prev_t,
                    mu_fused=mu_fused,
                    mu_t=mu_t,
                    nu_star_prev=nu_star[t - 1],
                    nu_star_t=nu_star[t],
                    rho_hat_prev=rh_prev,
                    rho_hat_prev2=rh_prev2,
                    nu_bar_prev=nu_prev,
                    solver_move_cost=move_cost,
                )
                ledger_rows.append(row)

            rep.zcfg = cfg_t
            rep.mu_tilde = mu_t
            rep.pullback = new_pull

            if idx == 0:
                ev = art.events
                event_counts["insertions"] += sum(ev.indicator.values())
                event_counts["deletions"] += len(ev.deletions)
                event_counts["fissions"] += sum(len(v) for v in ev.ejected.values())
                event_counts["net_additions"] += sum(len(v) for v in ev.added.values())
                line = ev.to_json_obj()
                line["rho_hat_prev_sigma"] = rho_hat(m, sigma, nu_prev)
                event_lines.append(json.dumps(line, sort_keys=True))

        if t % scale_every == 0:
            nets = {j: ls.lam_cur for j, ls in replicas[0].state.levels.items()}
            for x in (sigma, scale_rng.randrange(m.n)):
                js = active_scales(m, x, nu_prev, nets, replicas[0].params)
                active_samples.append((t, x, len(js)))

        nu_bar = annealed_measure([beta_pushforward(r.tree, r.mu_tilde) for r in replicas])
        nu_bar_hist = [nu_bar, nu_bar_hist[0]]

    return {
        "requests": recorded,
        "initial_positions": initial_positions,
        "frac_costs": [r.frac_cost for r in replicas],
        "integral_x_costs": [r.integral_x_cost for r in replicas],
        "integral_tree_costs": [r.integral_tree_cost for r in replicas],
        "solver_costs": [r.solver_cost for r in replicas],
        "rho_hat_sum": rho_hat_sum,
        "rho_sum": rho_sum,
        "servicing_violations": servicing_violations,
        "balance_violations": balance_bad,
        "kdelta_violations": kdelta_bad,
        "structural_violations": structural_bad,
        "event_counts": event_counts,
        "event_lines": event_lines,
        "ledger_rows": ledger_rows,
        "phi0_times4": sum(phi0_vals) / len(phi0_vals) if phi0_vals else 0.0,
        "integral_x_cost_steps": integral_x_cost_steps,
        "active_scale_samples": active_samples,
        "active_scale_bound": active_scale_bound(replicas[0].params),
    }


def _embed_points(alpha: dict, nu: dict) -> dict:
    out = {}
    for x, mass in nu.items():
        leaf = alpha[x]
        out[leaf] = out.get(leaf, 0.0) + mass
    return out


def _write_outputs(config: ExperimentConfig, report: RunReport, event_lines) -> None:
    base = config.out
    with open(base, "w") as fh:
        for line in event_lines:
            fh.write(line + "\n")
    stem = base[:-6] if base.endswith(".jsonl") else base
    with open(stem + ".summary.json", "w") as fh:
        json.dump(report.summary_obj(), fh, indent=2, sort_keys=True)
    if report.ledger_rows:
        with open(stem + ".ledger.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LedgerRow.header())
            for row in report.ledger_rows:
                writer.writerow(row.to_csv_row())
