"""Synthetic multi-modal classification data partitioned across device clusters.

Each modality is a class-conditional Gaussian source in d_in dimensions.  A
mixing matrix W[c][mod] states which fraction of cluster c's data comes from
each modality, so data heterogeneity (and with it the local/global density
ratio gamma) is exactly controllable.  Allocation uses largest-remainder
rounding: counts are exact, not sampled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ModalitySpec:
    modality: int
    labels: tuple[int, ...]
    means: np.ndarray  # (len(labels), d_in)
    cov: np.ndarray    # (d_in, d_in), positive-definite

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValueError("a modality needs at least 2 labels")
        if self.means.shape != (len(self.labels), self.cov.shape[0]):
            raise ValueError("means shape inconsistent with labels/cov")
        try:
            np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive-definite") from None


def make_modality_specs(n_modalities: int, d_in: int, n_classes: int,
                        separation: float, rng: np.random.Generator,
                        noise: float = 0.3) -> list[ModalitySpec]:
    """Well-separated modality sources with one mean per class each."""
    specs = []
    for mod in range(n_modalities):
        center = np.zeros(d_in)
        center[mod % d_in] = separation
        offsets = rng.standard_normal((n_classes, d_in))
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
        means = center + offsets
        specs.append(ModalitySpec(mod, tuple(range(n_classes)), means,
                                  noise ** 2 * np.eye(d_in)))
    return specs


@dataclass(frozen=True)
class HeterogeneityProfile:
    mixing: np.ndarray  # (C, n_modalities), rows sum to 1

    def __post_init__(self):
        w = self.mixing
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("mixing entries must lie in [0, 1]")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("mixing rows must sum to 1 (within 1e-9)")


@dataclass
class Shard:
    X: np.ndarray          # (N, d_in)
    y: np.ndarray          # (N,)
    modality: np.ndarray   # (N,)


@dataclass
class ClusterDataset:
    cluster: int
    shards: list[Shard]

    def pooled(self) -> Shard:
        return Shard(
            np.concatenate([s.X for s in self.shards]),
            np.concatenate([s.y for s in self.shards]),
            np.concatenate([s.modality for s in self.shards]),
        )

    @property
    def n_samples(self) -> int:
        return sum(s.X.shape[0] for s in self.shards)


def largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``fractions``."""
    raw = fractions * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _sample_modality(spec: ModalitySpec, n: int, rng: np.random.Generator):
    chol = np.linalg.cholesky(spec.cov)
    ks = rng.integers(0, len(spec.labels), n)
    X = spec.means[ks] + rng.standard_normal((n, spec.means.shape[1])) @ chol.T
    y = np.asarray(spec.labels)[ks]
    return X, y


def generate(profile: HeterogeneityProfile, specs: list[ModalitySpec],
             n_clusters: int, devices_per_cluster: int, samples_per_device: int,
             seed: int) -> list[ClusterDataset]:
    """Deterministically generate C clusters of J shards with N samples each."""
    if profile.mixing.shape != (n_clusters, len(specs)):
        raise ValueError("mixing matrix shape must be (C, n_modalities)")
    rng = np.random.default_rng(seed)
    datasets = []
    for c in range(n_clusters):
        counts = largest_remainder(profile.mixing[c], samples_per_device)
        shards = []
        for _ in range(devices_per_cluster):
            xs, ys, tags = [], [], []
            for spec, n in zip(specs, counts):
                if n == 0:
                    continue
                X, y = _sample_modality(spec, n, rng)
                xs.append(X)
                ys.append(y)
                tags.append(np.full(n, spec.modality))
            shards.append(Shard(np.concatenate(xs), np.concatenate(ys),
                                np.concatenate(tags)))
        datasets.append(ClusterDataset(c, shards))
    return datasets


def global_pool(datasets: list[ClusterDataset]) -> Shard:
    pools = [d.pooled() for d in datasets]
    return Shard(np.concatenate([p.X for p in pools]),
                 np.concatenate([p.y for p in pools]),
                 np.concatenate([p.modality for p in pools]))


def relevance_ratios(datasets: list[ClusterDataset], correlation: dict[int, int]):
    """Local/global expert-correlated density ratios.

    ``correlation`` maps modality -> the cluster whose expert group that
    modality's data is correlated to (the ground-truth map used by tests and
    analysis; protocol runs never see it).  Returns (alpha, beta, gamma_c,
    gamma), where gamma = max_c alpha_c / beta_c.
    """
    n_clusters = len(datasets)
    tags = [d.pooled().modality for d in datasets]
    total = sum(t.size for t in tags)
    alpha = np.zeros(n_clusters)
    beta = np.zeros(n_clusters)
    for c in range(n_clusters):
        correlated = {mod for mod, grp in correlation.items() if grp == c}
        local = tags[c]
        alpha[c] = np.isin(local, sorted(correlated)).mean() if local.size else 0.0
        hits = sum(int(np.isin(t, sorted(correlated)).sum()) for t in tags)
        beta[c] = hits / total
        if beta[c] == 0:
            raise ValueError(f"no data anywhere is correlated to group {c}; "
                             "density ratio undefined")
    gamma_c = alpha / beta
    return alpha, beta, gamma_c, float(gamma_c.max())


def draw_trial(dataset: ClusterDataset, n_trial: int, seed: int) -> Shard:
    """Trial set stratified by the cluster's modality proportions."""
    if n_trial <= 0:
        raise ValueError("n_trial must be positive")
    pool = dataset.pooled()
    if n_trial > pool.X.shape[0]:
        raise ValueError("n_trial exceeds cluster size")
    rng = np.random.default_rng(seed)
    mods, first = np.unique(pool.modality, return_index=True)
    mods = mods[np.argsort(first)]  # stable modality order
    props = np.array([(pool.modality == m).mean() for m in mods])
    counts = largest_remainder(props, n_trial)
    rows = []
    for m, n in zip(mods, counts):
        idx = np.flatnonzero(pool.modality == m)
        rows.append(rng.choice(idx, size=n, replace=False))
    rows = np.concatenate(rows)
    return Shard(pool.X[rows], pool.y[rows], pool.modality[rows])


def export_datasets(datasets: list[ClusterDataset], path) -> None:
    """One sample per row: features..., label, modality, cluster, device."""
    with open(path, "w") as fh:
        for ds in datasets:
            for j, shard in enumerate(ds.shards):
                for x, y, m in zip(shard.X, shard.y, shard.modality):
                    feats = ",".join(repr(float(v)) for v in x)
                    fh.write(f"{feats},{int(y)},{int(m)},{ds.cluster},{j}\n")


def import_datasets(path) -> list[ClusterDataset]:
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.strip().split(",")
            rows.append((np.array([float(v) for v in parts[:-4]]),
                         int(parts[-4]), int(parts[-3]), int(parts[-2]), int(parts[-1])))
    clusters: dict[int, dict[int, list]] = {}
    for x, y, m, c, j in rows:
        clusters.setdefault(c, {}).setdefault(j, []).append((x, y, m))
    out = []
    for c in sorted(clusters):
        shards = []
        for j in sorted(clusters[c]):
            xs, ys, ms = zip(*clusters[c][j])
            shards.append(Shard(np.vstack(xs), np.array(ys), np.array(ms)))
        out.append(ClusterDataset(c, shards))
    return out
