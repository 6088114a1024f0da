"""Convergence-bound evaluators and empirical run analysis.

The two bound formulas are implemented verbatim; the constants they take are
not measurable exactly, so ``estimate_bound_constants`` provides best-effort
empirical plug-ins from recorded snapshots and the regime comparisons target
the analytic formulas themselves.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from . import model as moe
from .datagen import ClusterDataset, global_pool
from .protocols import RunResult


@dataclass(frozen=True)
class BoundParams:
    l_smooth: float
    g_expert: float
    g_gate: float
    sigma_expert_sq: float
    sigma_gate_sq: float
    zeta_expert_sq: float
    gamma: float
    n_clusters: int
    init_gap: float

    def __post_init__(self):
        vals = (self.l_smooth, self.g_expert, self.g_gate, self.sigma_expert_sq,
                self.sigma_gate_sq, self.zeta_expert_sq, self.init_gap)
        if any(v < 0 for v in vals):
            raise ValueError("bound constants must be nonnegative")
        if not 1 <= self.gamma <= self.n_clusters:
            raise ValueError("gamma must lie in [1, C]")


def bound_split_async(p: BoundParams, n_cycles: int) -> float:
    """Upper bound on mean squared gradient norm for the split scheme."""
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    if p.gamma == 0 or p.n_clusters == 0:
        raise ValueError("gamma and C must be positive")
    c, g = p.n_clusters, p.gamma
    rt = math.sqrt(n_cycles)
    first = p.init_gap / (g * c * rt)
    second = 5 * p.l_smooth * c ** 2 * g * (
        c * (p.g_expert ** 2 + p.sigma_expert_sq)
        + p.g_gate ** 2 + p.sigma_gate_sq) / rt
    return first + second


def bound_baseline(p: BoundParams, n_cycles: int) -> float:
    """Upper bound on mean squared gradient norm for the synchronous baseline."""
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    if p.n_clusters == 0:
        raise ValueError("C must be positive")
    c, g = p.n_clusters, p.gamma
    rt = math.sqrt(n_cycles)
    first = p.init_gap / (c * rt)
    second = (5 * p.l_smooth * c ** 2
              * (p.g_expert ** 2 + p.zeta_expert_sq + p.sigma_expert_sq)
              + 5 * p.l_smooth * c ** 2 * g ** 2
              * (p.g_gate ** 2 + p.sigma_gate_sq)) / rt
    return first + second


def crossover_zeta_sq(p: BoundParams, n_cycles: int,
                      tol: float = 1e-9) -> float:
    """Heterogeneity variance at which the two bounds cross, by bisection."""
    def diff(z):
        q = BoundParams(p.l_smooth, p.g_expert, p.g_gate, p.sigma_expert_sq,
                        p.sigma_gate_sq, z, p.gamma, p.n_clusters, p.init_gap)
        return bound_baseline(q, n_cycles) - bound_split_async(p, n_cycles)

    lo, hi = 0.0, 1.0
    if diff(lo) >= 0:
        return 0.0
    while diff(hi) < 0:
        hi *= 2
        if hi > 1e18:
            raise ValueError("no crossover found below 1e18")
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if diff(mid) < 0:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def grad_variance(params: moe.MoEParams, datasets: list[ClusterDataset]) -> float:
    """Squared norm of the full-dataset gradient of all trainable parameters."""
    pool = global_pool(datasets)
    grads = moe.backward(params, (pool.X, pool.y), params.trainable_groups())
    return float(sum(np.sum(g ** 2) for g in grads.values()))


def lipschitz_estimate(param_vecs: list[np.ndarray],
                       grad_vecs: list[np.ndarray]) -> float:
    """Max gradient-difference / parameter-difference ratio over snapshot pairs."""
    if len(param_vecs) < 2:
        raise ValueError("need at least 2 snapshots")
    l_max = 0.0
    for p1, p2, g1, g2 in zip(param_vecs, param_vecs[1:], grad_vecs, grad_vecs[1:]):
        dp = float(np.linalg.norm(p2 - p1))
        if dp > 0:
            l_max = max(l_max, float(np.linalg.norm(g2 - g1)) / dp)
    return l_max


def estimate_bound_constants(snapshots: list[tuple[int, moe.MoEParams]],
                             datasets: list[ClusterDataset],
                             gamma: float) -> BoundParams:
    """Empirical plug-ins for the bound constants from parameter snapshots."""
    if len(snapshots) < 2:
        raise ValueError("need at least 2 snapshots")
    pool = global_pool(datasets)
    n_clusters = len(datasets)
    groups_all = snapshots[0][1].trainable_groups()

    def flat_grads(params):
        g = moe.backward(params, (pool.X, pool.y), groups_all)
        e = np.concatenate([g[k].ravel() for k in sorted(g)
                            if not k.startswith("gate.")])
        u = np.concatenate([g[k].ravel() for k in sorted(g)
                            if k.startswith("gate.")])
        return e, u

    def flat_params(params):
        keys = [k for k in sorted(params.values)
                if moe.group_of(k) != moe.BACKBONE]
        return np.concatenate([params.values[k].ravel() for k in keys])

    g_e_max = g_u_max = 0.0
    grads = []
    for _, p in snapshots:
        e, u = flat_grads(p)
        grads.append(np.concatenate([e, u]))
        g_e_max = max(g_e_max, float(np.linalg.norm(e)))
        g_u_max = max(g_u_max, float(np.linalg.norm(u)))
    l_max = lipschitz_estimate([flat_params(p) for _, p in snapshots], grads)
    # across-device gradient dispersion at the last snapshot
    p_last = snapshots[-1][1]
    device_e, device_u = [], []
    for ds in datasets:
        for shard in ds.shards:
            g = moe.backward(p_last, (shard.X, shard.y), groups_all)
            device_e.append(np.concatenate(
                [g[k].ravel() for k in sorted(g) if not k.startswith("gate.")]))
            device_u.append(np.concatenate(
                [g[k].ravel() for k in sorted(g) if k.startswith("gate.")]))
    mean_e = np.mean(device_e, axis=0)
    mean_u = np.mean(device_u, axis=0)
    zeta_sq = float(np.mean([np.sum((d - mean_e) ** 2) for d in device_e]))
    sigma_u_sq = float(np.mean([np.sum((d - mean_u) ** 2) for d in device_u]))
    init_gap = moe.loss(snapshots[0][1], (pool.X, pool.y))
    gamma = min(max(gamma, 1.0), float(n_clusters))
    return BoundParams(l_max, g_e_max, g_u_max, zeta_sq, sigma_u_sq, zeta_sq,
                       gamma, n_clusters, init_gap)


# ---------------------------------------------------------------------------
# scheme comparison

@dataclass
class SchemeSummary:
    scheme: str
    cycles_to_target: list[float] = field(default_factory=list)
    final_loss: list[float] = field(default_factory=list)
    final_accuracy: list[float] = field(default_factory=list)
    uplink_bytes: list[int] = field(default_factory=list)
    params_loaded_max: list[int] = field(default_factory=list)

    def row(self) -> dict:
        def ms(xs):
            xs = list(xs)
            m = statistics.fmean(xs)
            s = statistics.stdev(xs) if len(xs) > 1 else 0.0
            return m, s

        reached = [v for v in self.cycles_to_target if math.isfinite(v)]
        ct = ms(reached) if reached else (math.inf, 0.0)
        fl = ms(self.final_loss)
        fa = ms(self.final_accuracy)
        return {
            "scheme": self.scheme,
            "cycles_to_target_mean": ct[0],
            "cycles_to_target_sd": ct[1],
            "target_missed": len(self.cycles_to_target) - len(reached),
            "final_loss_mean": fl[0],
            "final_loss_sd": fl[1],
            "final_accuracy_mean": fa[0],
            "final_accuracy_sd": fa[1],
            "uplink_bytes_total": sum(self.uplink_bytes),
            "params_loaded_max": max(self.params_loaded_max),
        }


def accuracy(params: moe.MoEParams, datasets: list[ClusterDataset]) -> float:
    pool = global_pool(datasets)
    hits = 0
    for x, y in zip(pool.X, pool.y):
        logits, _ = moe.forward(params, x)
        hits += int(np.argmax(logits) == y)
    return hits / pool.X.shape[0]


def cycles_to_target(result: RunResult, cycle_len: int, target_loss: float) -> float:
    """First orbital cycle whose logged global loss meets the target; inf if never."""
    for log in result.logs:
        if log.loss_global is not None and log.loss_global <= target_loss:
            return (log.t + 1) / cycle_len
    return math.inf


def summarize(scheme: str, results: list[RunResult], datasets,
              cycle_len: int, target_loss: float) -> SchemeSummary:
    s = SchemeSummary(scheme)
    for r in results:
        s.cycles_to_target.append(cycles_to_target(r, cycle_len, target_loss))
        losses = [l.loss_global for l in r.logs if l.loss_global is not None]
        s.final_loss.append(losses[-1] if losses else math.nan)
        s.final_accuracy.append(accuracy(r.params, datasets))
        s.uplink_bytes.append(r.total_uplink_bytes)
        s.params_loaded_max.append(max(l.params_loaded_max for l in r.logs))
    return s


REPORT_COLUMNS = ["scheme", "cycles_to_target_mean", "cycles_to_target_sd",
                  "target_missed", "final_loss_mean", "final_loss_sd",
                  "final_accuracy_mean", "final_accuracy_sd",
                  "uplink_bytes_total", "params_loaded_max"]


def report_csv(summaries: list[SchemeSummary]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for s in summaries:
        row = s.row()
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def report_text(summaries: list[SchemeSummary], target_loss: float) -> str:
    out = [f"Scheme comparison (target global loss {target_loss}):"]
    for s in summaries:
        r = s.row()
        ct = ("never" if not math.isfinite(r["cycles_to_target_mean"])
              else f"{r['cycles_to_target_mean']:.1f} +/- {r['cycles_to_target_sd']:.1f}")
        out.append(
            f"  {s.scheme:>8}: cycles-to-target {ct}"
            f" (missed {r['target_missed']}),"
            f" final loss {r['final_loss_mean']:.4f} +/- {r['final_loss_sd']:.4f},"
            f" accuracy {r['final_accuracy_mean']:.3f},"
            f" uplink {r['uplink_bytes_total']} B,"
            f" max loaded params {r['params_loaded_max']}")
    return "\n".join(out) + "\n"
