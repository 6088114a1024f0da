"""Federated training protocols over the satellite contact plan.

Three schemes share one round loop:

* ``baseline``  — synchronous: only the connected cluster trains, on the full
  model, and both experts and gate are aggregated every connected round.
* ``async``     — split training: every cluster trains its assigned expert
  group every round (connected or not); the connected cluster additionally
  syncs its experts, then takes a gate step that is aggregated immediately.
* ``masked``    — like ``async`` but all local routing is restricted to the
  assigned expert group and the gate stays frozen during the expert phase;
  an optional tail of standard async rounds tunes the gate afterwards.

Uploads are deltas against the uploader's last downloaded reference,
factorized to rank ``lora_rank`` per weight matrix and reconstructed at the
satellite before aggregation.  State is checkpointable mid-run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as moe
from .channel import IDLE
from .datagen import ClusterDataset, global_pool
from .splitting import ExpertAssignment


@dataclass(frozen=True)
class Hyper:
    eta_expert: float
    eta_gate: float
    lora_rank: int = 4
    gate_rounds: int = 0            # masked scheme: trailing gate-tuning rounds
    round_budget_bytes: int | None = None  # per-device uplink budget per round
    eval_every: int | None = None   # rounds between global-loss evaluations
    record_snapshots: bool = False

    def __post_init__(self):
        if self.eta_expert < 0 or self.eta_gate < 0:
            raise ValueError("step-sizes must be nonnegative")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")


@dataclass
class RoundLog:
    t: int
    event: str          # connected / idle / infeasible / gate-phase
    cluster: int | None
    bytes_up: int
    bytes_budget: int | None
    params_loaded_max: int
    loss_global: float | None = None
    grad_var_est: float | None = None


@dataclass
class RunResult:
    params: moe.MoEParams
    logs: list[RoundLog]
    snapshots: list[tuple[int, moe.MoEParams]] = field(default_factory=list)

    @property
    def total_uplink_bytes(self) -> int:
        return sum(r.bytes_up for r in self.logs)


# ---------------------------------------------------------------------------
# low-rank upload accounting

@dataclass
class LowRankUpdate:
    a: np.ndarray  # (rows, r)
    b: np.ndarray  # (r, cols)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def nbytes(self) -> int:
        return self.rank * (self.a.shape[0] + self.b.shape[1]) * 8


def lora_roundtrip(delta: np.ndarray, rank: int):
    """Best rank-r factorization of a parameter delta by SVD truncation.

    Rank is clamped to min(dims); at full rank the round-trip is exact
    (bit-identical), so a full-rank run matches a run without the low-rank
    stage.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    r = min(rank, min(delta.shape))
    if r == min(delta.shape):
        # Full rank: the factorization is exact, so skip the SVD and keep the
        # round-trip bit-identical.
        if delta.shape[0] <= delta.shape[1]:
            upd = LowRankUpdate(np.eye(delta.shape[0]), delta.copy())
        else:
            upd = LowRankUpdate(delta.copy(), np.eye(delta.shape[1]))
        return upd, delta.copy(), 0.0
    u, s, vt = np.linalg.svd(delta, full_matrices=False)
    upd = LowRankUpdate(u[:, :r] * s[:r], vt[:r])
    recon = upd.a @ upd.b
    err = float(np.sqrt(np.sum(s[r:] ** 2)))
    return upd, recon, err


def lora_bytes(shape: tuple[int, int], rank: int) -> int:
    r = min(rank, min(shape))
    return r * (shape[0] + shape[1]) * 8


def upload_keys_bytes(shapes: dict[str, tuple[int, ...]], keys, rank: int) -> int:
    return sum(lora_bytes(shapes[k], rank) for k in keys)


# ---------------------------------------------------------------------------
# parameter-count accounting

def param_counts(config: moe.MoEConfig) -> dict[str, int]:
    backbone = (config.d_in ** 2) * 2 + config.d_out * config.d_in \
        + config.n_classes * config.d_out
    per_expert = config.n_layers * 2 * config.d_hidden * config.d_in
    gate = config.n_layers * config.n_experts * config.d_in
    return {"backbone": backbone, "per_expert": per_expert, "gate": gate}


def loaded_params(config: moe.MoEConfig, n_experts_loaded: int) -> int:
    c = param_counts(config)
    return c["backbone"] + n_experts_loaded * c["per_expert"] + c["gate"]


# ---------------------------------------------------------------------------
# shared primitives

def local_step(params: moe.MoEParams, batch, trainable, mask,
               eta_expert: float, eta_gate: float) -> moe.MoEParams:
    """One gradient-descent step on the trainable groups."""
    grads = moe.backward(params, batch, trainable, mask=mask)
    out = params.copy()
    for key, g in grads.items():
        eta = eta_gate if moe.group_of(key) == moe.GATE else eta_expert
        out.values[key] -= eta * g
    return out


def aggregate(copies: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise mean over same-shaped parameter dicts."""
    if not copies:
        raise ValueError("nothing to aggregate")
    keys = copies[0].keys()
    for c in copies[1:]:
        if c.keys() != keys:
            raise ValueError("aggregation copies disagree on parameter keys")
    out = {}
    for k in keys:
        acc = copies[0][k].copy()
        for c in copies[1:]:
            if c[k].shape != acc.shape:
                raise ValueError(f"shape mismatch while aggregating {k}")
            acc = acc + c[k]
        out[k] = acc / len(copies)
    return out


def _upload(local: dict[str, np.ndarray], reference: dict[str, np.ndarray],
            keys: list[str], rank: int):
    """Low-rank delta upload; returns (reconstructed params, bytes)."""
    recon = {}
    nbytes = 0
    for k in keys:
        upd, rec, _ = lora_roundtrip(local[k] - reference[k], rank)
        recon[k] = reference[k] + rec
        nbytes += upd.nbytes
    return recon, nbytes


def pretrain_gate(params: moe.MoEParams, batch, steps: int,
                  eta_gate: float) -> moe.MoEParams:
    """Tune only the gate on a pooled shared batch before federation starts."""
    out = params
    for _ in range(steps):
        out = local_step(out, batch, [moe.GATE], None, 0.0, eta_gate)
    return out


def shared_batch(datasets: list[ClusterDataset], per_cluster: int) -> tuple:
    """Small pooled batch (first samples of each cluster) for gate warm-up."""
    xs, ys = [], []
    for ds in datasets:
        pool = ds.pooled()
        xs.append(pool.X[:per_cluster])
        ys.append(pool.y[:per_cluster])
    return np.concatenate(xs), np.concatenate(ys)


def global_loss(params: moe.MoEParams, datasets: list[ClusterDataset]) -> float:
    pool = global_pool(datasets)
    return moe.loss(params, (pool.X, pool.y))


# ---------------------------------------------------------------------------
# protocol runners

def _all_groups(config: moe.MoEConfig) -> list[str]:
    return [moe.GATE] + [moe.expert_group(m) for m in range(config.n_experts)]


def _expert_keys(params: moe.MoEParams, experts) -> list[str]:
    keys = []
    for m in sorted(experts):
        for l in range(params.config.n_layers):
            keys.append(f"expert.{m}.{l}.w1")
            keys.append(f"expert.{m}.{l}.w2")
    return keys


def _gate_keys(params: moe.MoEParams) -> list[str]:
    return [f"gate.{l}" for l in range(params.config.n_layers)]


class BaselineRun:
    """Synchronous federation: only the connected cluster trains each round."""

    scheme = "baseline"

    def __init__(self, params: moe.MoEParams, datasets: list[ClusterDataset],
                 plan: list[int | None], hyper: Hyper):
        self.global_params = params.copy()
        self.datasets = datasets
        self.plan = plan
        self.hyper = hyper
        self.t = 0
        self.logs: list[RoundLog] = []
        self.snapshots: list[tuple[int, moe.MoEParams]] = []

    def _log(self, event: str, cluster, bytes_up: int, loaded: int):
        h = self.hyper
        loss_val = None
        if h.eval_every and (self.t + 1) % h.eval_every == 0:
            loss_val = global_loss(self.global_params, self.datasets)
        if h.record_snapshots and h.eval_every \
                and (self.t + 1) % h.eval_every == 0:
            self.snapshots.append((self.t, self.global_params.copy()))
        self.logs.append(RoundLog(self.t, event, cluster, bytes_up,
                                  h.round_budget_bytes, loaded, loss_val))

    def step(self):
        c = self.plan[self.t]
        cfg = self.global_params.config
        if c is IDLE:
            self._log("idle", None, 0, 0)
            self.t += 1
            return
        h = self.hyper
        trainable = _all_groups(cfg)
        up_keys = _expert_keys(self.global_params, range(cfg.n_experts)) \
            + _gate_keys(self.global_params)
        ref = self.global_params.values
        recons = []
        per_device_bytes = 0
        for shard in self.datasets[c].shards:
            local = local_step(self.global_params, (shard.X, shard.y),
                               trainable, None, h.eta_expert, h.eta_gate)
            recon, nbytes = _upload(local.values, ref, up_keys, h.lora_rank)
            recons.append(recon)
            per_device_bytes = nbytes
        total_bytes = per_device_bytes * len(recons)
        if h.round_budget_bytes is not None and per_device_bytes > h.round_budget_bytes:
            self._log("infeasible", c, total_bytes, loaded_params(cfg, cfg.n_experts))
            self.t += 1
            return
        agg = aggregate(recons)
        for k, v in agg.items():
            self.global_params.values[k] = v
        self._log("connected", c, total_bytes, loaded_params(cfg, cfg.n_experts))
        self.t += 1

    def run(self) -> RunResult:
        while self.t < len(self.plan):
            self.step()
        return RunResult(self.global_params, self.logs, self.snapshots)


class SplitAsyncRun:
    """Asynchronous split federation over a non-overlapping expert assignment.

    Every cluster takes one local step per round on its assigned experts;
    the gate trains only in a cluster's connected round.  ``masked=True``
    freezes the gate and restricts routing to the assigned group (the
    radical variant); after the main plan it optionally appends
    ``gate_rounds`` standard rounds to tune the gate.
    """

    def __init__(self, params: moe.MoEParams, datasets: list[ClusterDataset],
                 plan: list[int | None], assignment: ExpertAssignment,
                 hyper: Hyper, masked: bool = False):
        self.scheme = "masked" if masked else "async"
        self.global_params = params.copy()
        self.datasets = datasets
        self.assignment = assignment
        self.hyper = hyper
        self.masked = masked
        n_gate = hyper.gate_rounds if masked else 0
        n_clusters = len(datasets)
        tail = build_tail(plan, n_gate, n_clusters)
        self.plan = list(plan) + tail
        self.expert_phase_rounds = len(plan)
        self.t = 0
        self.logs: list[RoundLog] = []
        self.snapshots: list[tuple[int, moe.MoEParams]] = []
        # Per-cluster state: last downloaded full snapshot plus per-device
        # overrides for the locally trained keys.
        self.refs = [params.copy() for _ in range(n_clusters)]
        self.locals: list[list[dict[str, np.ndarray]]] = [
            [{k: params.values[k].copy() for k in self._local_keys(c)}
             for _ in datasets[c].shards]
            for c in range(n_clusters)
        ]

    def _group(self, c: int) -> set[int]:
        return self.assignment.groups[c]

    def _local_keys(self, c: int) -> list[str]:
        return _expert_keys(self.global_params, self._group(c)) \
            + _gate_keys(self.global_params)

    def _device_params(self, c: int, j: int) -> moe.MoEParams:
        p = self.refs[c].copy()
        for k, v in self.locals[c][j].items():
            p.values[k] = v.copy()
        return p

    def _in_gate_phase(self) -> bool:
        return self.t >= self.expert_phase_rounds

    def _use_mask(self) -> bool:
        return self.masked and not self._in_gate_phase()

    def _mask_for(self, c: int):
        if not self._use_mask():
            return None
        group = self._group(c)
        return group if group else None

    def _loaded(self, c: int) -> int:
        cfg = self.global_params.config
        if self._use_mask():
            return loaded_params(cfg, len(self._group(c)))
        return loaded_params(cfg, cfg.n_experts)

    def _disconnected_step(self, c: int):
        h = self.hyper
        trainable = [moe.expert_group(m) for m in sorted(self._group(c))]
        if not trainable:
            return
        mask = self._mask_for(c)
        for j, shard in enumerate(self.datasets[c].shards):
            p = self._device_params(c, j)
            stepped = local_step(p, (shard.X, shard.y), trainable, mask,
                                 h.eta_expert, 0.0)
            for k in _expert_keys(p, self._group(c)):
                self.locals[c][j][k] = stepped.values[k]

    def _connected_step(self, c: int) -> tuple[int, bool]:
        h = self.hyper
        cfg = self.global_params.config
        group = self._group(c)
        ekeys = _expert_keys(self.global_params, group)
        gkeys = _gate_keys(self.global_params)
        total_bytes = 0
        # 1. upload local experts, aggregate into the global model
        if ekeys:
            recons = []
            per_device = 0
            for j in range(len(self.datasets[c].shards)):
                recon, nbytes = _upload(self.locals[c][j],
                                        self.refs[c].values, ekeys, h.lora_rank)
                recons.append(recon)
                per_device = nbytes
            total_bytes += per_device * len(recons)
            if h.round_budget_bytes is not None and per_device > h.round_budget_bytes:
                return total_bytes, False
            agg = aggregate(recons)
            for k, v in agg.items():
                self.global_params.values[k] = v
        # 2. download the updated global model; re-init local copies
        self.refs[c] = self.global_params.copy()
        for j in range(len(self.datasets[c].shards)):
            for k in self._local_keys(c):
                self.locals[c][j][k] = self.global_params.values[k].copy()
        # 3. one local training round
        gate_trainable = not self._use_mask()
        trainable = [moe.expert_group(m) for m in sorted(group)]
        if gate_trainable:
            trainable = trainable + [moe.GATE]
        if not trainable:
            return total_bytes, True
        mask = self._mask_for(c)
        for j, shard in enumerate(self.datasets[c].shards):
            p = self._device_params(c, j)
            stepped = local_step(p, (shard.X, shard.y), trainable, mask,
                                 h.eta_expert, h.eta_gate)
            for k in self._local_keys(c):
                self.locals[c][j][k] = stepped.values[k]
        # 4. gate upload/aggregate/download (standard mode only)
        if gate_trainable:
            recons = []
            per_device = 0
            for j in range(len(self.datasets[c].shards)):
                recon, nbytes = _upload(self.locals[c][j],
                                        self.global_params.values, gkeys,
                                        h.lora_rank)
                recons.append(recon)
                per_device = nbytes
            total_bytes += per_device * len(recons)
            agg = aggregate(recons)
            for k, v in agg.items():
                self.global_params.values[k] = v
            self.refs[c].values.update({k: self.global_params.values[k].copy()
                                        for k in gkeys})
            for j in range(len(self.datasets[c].shards)):
                for k in gkeys:
                    self.locals[c][j][k] = self.global_params.values[k].copy()
        return total_bytes, True

    def _log(self, event: str, cluster, bytes_up: int, loaded: int):
        h = self.hyper
        loss_val = None
        if h.eval_every and (self.t + 1) % h.eval_every == 0:
            loss_val = global_loss(self.global_params, self.datasets)
        if h.record_snapshots and h.eval_every \
                and (self.t + 1) % h.eval_every == 0:
            self.snapshots.append((self.t, self.global_params.copy()))
        self.logs.append(RoundLog(self.t, event, cluster, bytes_up,
                                  h.round_budget_bytes, loaded, loss_val))

    def step(self):
        c_conn = self.plan[self.t]
        loaded_max = 0
        bytes_up = 0
        feasible = True
        for c in range(len(self.datasets)):
            if c == c_conn:
                bytes_up, feasible = self._connected_step(c)
                if not feasible:
                    # Failed contact falls back to a disconnected local step.
                    self._disconnected_step(c)
            else:
                self._disconnected_step(c)
            loaded_max = max(loaded_max, self._loaded(c))
        if c_conn is IDLE:
            event = "idle"
        elif not feasible:
            event = "infeasible"
        elif self._in_gate_phase():
            event = "gate-phase"
        else:
            event = "connected"
        self._log(event, c_conn, bytes_up, loaded_max)
        self.t += 1

    def run(self) -> RunResult:
        while self.t < len(self.plan):
            self.step()
        return RunResult(self.global_params, self.logs, self.snapshots)


def build_tail(plan: list[int | None], n_rounds: int, n_clusters: int) -> list[int | None]:
    """Continuation of the round-robin schedule for the gate-tuning tail."""
    if n_rounds == 0:
        return []
    connected = [c for c in plan if c is not IDLE]
    start = (connected[-1] + 1) % n_clusters if connected else 0
    return [(start + i) % n_clusters for i in range(n_rounds)]


def run_baseline(params, datasets, plan, hyper) -> RunResult:
    return BaselineRun(params, datasets, plan, hyper).run()

def run_split_async(params, datasets, plan, assignment, hyper) -> RunResult:
    return SplitAsyncRun(params, datasets, plan, assignment, hyper).run()

def run_split_masked(params, datasets, plan, assignment, hyper) -> RunResult:
    return SplitAsyncRun(params, datasets, plan, assignment, hyper,
                         masked=True).run()
