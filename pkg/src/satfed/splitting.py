"""Expert-cluster relevance measurement and non-overlapping expert assignment.

Relevance p[m][c] is the fraction of layer-routing decisions on cluster c's
trial data that select expert m, measured with gating noise forced off.
Truncation and row normalization turn it into an assignment distribution; the
randomized split then hands each expert to exactly one cluster, capped at
``cap`` experts per cluster while any relevant cluster still has room.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as moe
from .datagen import Shard


@dataclass
class RelevanceMatrix:
    p: np.ndarray                 # (M, C)
    p_th: float = 0.0
    p_trunc: np.ndarray | None = None
    p_assign: np.ndarray | None = None

    def unassignable(self) -> list[int]:
        if self.p_trunc is None:
            return []
        return [m for m in range(self.p.shape[0]) if self.p_trunc[m].sum() == 0]


@dataclass
class ExpertAssignment:
    n_clusters: int
    groups: list[set[int]] = field(default_factory=list)  # groups[c] = expert indices

    def cluster_of(self, m: int) -> int | None:
        for c, g in enumerate(self.groups):
            if m in g:
                return c
        return None

    def assigned(self) -> set[int]:
        out: set[int] = set()
        for g in self.groups:
            out |= g
        return out

    def export(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# expert cluster (-1 = unassigned)\n")
            experts = sorted(self.assigned() | set(range(max(self.assigned(), default=-1) + 1)))
            for m in experts:
                c = self.cluster_of(m)
                fh.write(f"{m} {-1 if c is None else c}\n")


def relevance(params: moe.MoEParams, trials: list[Shard]) -> np.ndarray:
    """p[m][c] = layer-selections of expert m over cluster c's trial set."""
    cfg = params.config
    if cfg.noise_std != 0:
        params = moe.MoEParams(
            moe.MoEConfig(cfg.n_layers, cfg.n_experts, cfg.top_k, cfg.d_in,
                          cfg.d_hidden, cfg.d_out, cfg.n_classes, 0.0),
            params.values)
        cfg = params.config
    p = np.zeros((cfg.n_experts, len(trials)))
    for c, trial in enumerate(trials):
        if trial.X.shape[0] == 0:
            raise ValueError(f"trial set for cluster {c} is empty")
        for x in trial.X:
            _, trace = moe.forward(params, x)
            for sel, _ in trace:
                for m in sel:
                    p[m, c] += 1
        p[:, c] /= cfg.n_layers * trial.X.shape[0]
    return p


def truncate(p: np.ndarray, p_th: float) -> np.ndarray:
    if not 0 <= p_th <= 1:
        raise ValueError("p_th must lie in [0, 1]")
    return np.where(p >= p_th, p, 0.0)


def assign_probs(p_trunc: np.ndarray) -> np.ndarray:
    """Row-normalized truncated relevance; all-zero rows stay all-zero."""
    sums = p_trunc.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(sums > 0, p_trunc / np.where(sums > 0, sums, 1.0), 0.0)
    return out


def split(p_trunc: np.ndarray, n_clusters: int, cap: int,
          rng: np.random.Generator) -> ExpertAssignment:
    """Randomized non-overlapping assignment of experts to clusters.

    Experts are visited in index order and assigned by sampling from the
    row-normalized truncated relevance.  While at least one relevant cluster
    is still below ``cap``, sampling is restricted to those clusters; once
    every relevant cluster is full, the cap is waived and the draw falls back
    to the full relevant set.  All-zero rows stay unassigned.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    n_experts = p_trunc.shape[0]
    probs = assign_probs(p_trunc)
    groups: list[set[int]] = [set() for _ in range(n_clusters)]
    feasible = set(range(n_clusters))
    for m in range(n_experts):
        row = probs[m]
        support = np.flatnonzero(row)
        if support.size == 0:
            continue
        open_support = [c for c in support if c in feasible]
        if open_support:
            pr = row[open_support] / row[open_support].sum()
            c_star = int(rng.choice(open_support, p=pr))
        else:
            c_star = int(rng.choice(support, p=row[support]))
        groups[c_star].add(m)
        if len(groups[c_star]) >= cap:
            feasible.discard(c_star)
    return ExpertAssignment(n_clusters, groups)


def compute_split(params: moe.MoEParams, trials: list[Shard], p_th: float,
                  cap: int, rng: np.random.Generator) -> tuple[RelevanceMatrix, ExpertAssignment]:
    """relevance -> truncate -> assign, the full splitting pipeline."""
    p = relevance(params, trials)
    p_trunc = truncate(p, p_th)
    mat = RelevanceMatrix(p, p_th, p_trunc, assign_probs(p_trunc))
    return mat, split(p_trunc, len(trials), cap, rng)


def default_cap(n_experts: int, n_clusters: int) -> int:
    return -(-n_experts // n_clusters)
