"""Build and run a full experiment from an ExperimentConfig."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import analysis, channel, datagen, model as moe, protocols, splitting
from .config import ExperimentConfig, mixing_matrix


@dataclass
class ExperimentSetup:
    config: ExperimentConfig
    datasets: list[datagen.ClusterDataset]
    specs: list[datagen.ModalitySpec]
    params: moe.MoEParams
    relevance: splitting.RelevanceMatrix
    assignment: splitting.ExpertAssignment
    plan: list
    hyper: protocols.Hyper
    rate_bps: float
    budget_bytes: int | None
    correlation: dict[int, int]

    @property
    def cycle_len(self) -> int:
        return channel.cycle_length(self.config.data.n_clusters,
                                    self.config.link.idle_slots_per_cycle)


def align_gate_to_modalities(params: moe.MoEParams,
                             specs: list[datagen.ModalitySpec],
                             scale: float) -> None:
    """Point gate row m at modality m's mean direction (informed warm start)."""
    cfg = params.config
    for l in range(cfg.n_layers):
        g = params.values[f"gate.{l}"]
        for m in range(min(cfg.n_experts, len(specs))):
            direction = specs[m].means.mean(axis=0)
            norm = np.linalg.norm(direction)
            if norm > 0:
                g[m] = scale * direction / norm


def link_rate(cfg: ExperimentConfig) -> tuple[float, int]:
    lk = cfg.link
    budget = channel.LinkBudget(
        tx_power_dbm=lk.tx_power_dbm, ant_gain_dbi=lk.ant_gain_dbi,
        bandwidth_hz=lk.bandwidth_hz, wavelength_m=lk.wavelength_m,
        noise_dbm=lk.noise_dbm, min_elevation_deg=lk.min_elevation_deg,
        rician_k_db=lk.rician_k_db, shadow_db=lk.shadow_db,
        rain_phase_rad=lk.rain_phase_rad, atmos_coeff_db=lk.atmos_coeff_db)
    geometry = channel.GeometryModel(altitude_m=lk.altitude_m)
    rate = channel.shannon_upper(budget, lk.elevation_deg, geometry)
    return rate, channel.window_bytes(rate, lk.window_seconds)


def build(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentSetup:
    seed = cfg.seed if seed is None else seed
    ss = np.random.SeedSequence(seed)
    rng_data, rng_init, rng_split = [np.random.default_rng(s)
                                     for s in ss.spawn(3)]
    m, d, t = cfg.model, cfg.data, cfg.train

    mixing = mixing_matrix(cfg)
    specs = datagen.make_modality_specs(mixing.shape[1], m.d_in, m.n_classes,
                                        d.modality_separation, rng_data,
                                        noise=d.modality_noise)
    profile = datagen.HeterogeneityProfile(mixing)
    datasets = datagen.generate(profile, specs, d.n_clusters,
                                d.devices_per_cluster, d.samples_per_device,
                                seed=int(ss.generate_state(1)[0]))

    model_cfg = moe.MoEConfig(m.n_layers, m.n_experts, m.top_k, m.d_in,
                              m.d_hidden, m.d_out, m.n_classes, m.noise_std)
    params = moe.init_params(model_cfg, rng_init)
    if t.gate_init == "modality_aligned":
        align_gate_to_modalities(params, specs, t.gate_align_scale)
    if t.gate_pretrain_steps > 0:
        batch = protocols.shared_batch(datasets,
                                       max(1, d.samples_per_device // 4))
        params = protocols.pretrain_gate(params, batch,
                                         t.gate_pretrain_steps, t.eta_gate)

    trials = [datagen.draw_trial(ds, d.trial_size, seed=seed * 1000 + ds.cluster)
              for ds in datasets]
    cap = cfg.split.cap or splitting.default_cap(m.n_experts, d.n_clusters)
    relevance, assignment = splitting.compute_split(
        params, trials, cfg.split.p_threshold, cap, rng_split)

    rate, window_budget = link_rate(cfg)
    cycle = channel.cycle_length(d.n_clusters, cfg.link.idle_slots_per_cycle)
    plan = channel.build_contact_plan(d.n_clusters, t.total_cycles * cycle,
                                      cfg.link.idle_slots_per_cycle)
    hyper = protocols.Hyper(
        eta_expert=t.eta_expert, eta_gate=t.eta_gate, lora_rank=t.lora_rank,
        gate_rounds=t.gate_rounds,
        round_budget_bytes=window_budget if cfg.link.enforce_budget else None,
        eval_every=cycle if t.eval_every_cycle else None,
        record_snapshots=True)

    # Ground-truth modality -> expert-group map for analysis: the cluster
    # holding the largest share of a modality's data.
    correlation = {mod: int(np.argmax(mixing[:, mod]))
                   for mod in range(mixing.shape[1])}
    return ExperimentSetup(cfg, datasets, specs, params, relevance, assignment,
                           plan, hyper, rate, window_budget, correlation)


def make_run(setup: ExperimentSetup, scheme: str | None = None):
    scheme = scheme or setup.config.train.scheme
    if scheme == "baseline":
        return protocols.BaselineRun(setup.params, setup.datasets, setup.plan,
                                     setup.hyper)
    if scheme == "async":
        return protocols.SplitAsyncRun(setup.params, setup.datasets, setup.plan,
                                       setup.assignment, setup.hyper)
    if scheme == "masked":
        return protocols.SplitAsyncRun(setup.params, setup.datasets, setup.plan,
                                       setup.assignment, setup.hyper,
                                       masked=True)
    raise ValueError(f"unknown scheme '{scheme}'")


def run(setup: ExperimentSetup, scheme: str | None = None) -> protocols.RunResult:
    result = make_run(setup, scheme).run()
    annotate_grad_variance(result, setup.datasets)
    return result


def annotate_grad_variance(result: protocols.RunResult, datasets) -> None:
    by_round = {t: p for t, p in result.snapshots}
    for log in result.logs:
        if log.t in by_round:
            log.grad_var_est = analysis.grad_variance(by_round[log.t], datasets)


CSV_HEADER = ("round,scheme,event,cluster,loss_global,grad_var_est,"
              "bytes_up,bytes_budget,params_loaded_max")


def metrics_csv(result: protocols.RunResult, scheme: str) -> str:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [CSV_HEADER]
    for r in result.logs:
        cluster = "IDLE" if r.cluster is None else str(r.cluster)
        lines.append(",".join([str(r.t), scheme, r.event, cluster,
                               fmt(r.loss_global), fmt(r.grad_var_est),
                               str(r.bytes_up), fmt(r.bytes_budget),
                               str(r.params_loaded_max)]))
    return "\n".join(lines) + "\n"


def summary_text(setup: ExperimentSetup, result: protocols.RunResult,
                 scheme: str) -> str:
    losses = [l.loss_global for l in result.logs if l.loss_global is not None]
    infeasible = sum(1 for l in result.logs if l.event == "infeasible")
    lines = [
        f"scheme: {scheme}",
        f"rounds: {len(result.logs)}",
        f"orbital cycles: {len(result.logs) / setup.cycle_len:g}",
        f"uplink rate: {setup.rate_bps:.3f} bit/s",
        f"window budget: {setup.budget_bytes} bytes",
        f"total uplink: {result.total_uplink_bytes} bytes",
        f"infeasible rounds: {infeasible}",
        f"max loaded params: {max(l.params_loaded_max for l in result.logs)}",
    ]
    if losses:
        lines.append(f"final global loss: {losses[-1]!r}")
    groups = ", ".join(f"{c}:{sorted(g)}" for c, g in
                       enumerate(setup.assignment.groups))
    lines.append(f"expert groups: {groups}")
    unassigned = sorted(set(range(setup.config.model.n_experts))
                        - setup.assignment.assigned())
    if unassigned:
        lines.append(f"unassigned experts (frozen): {unassigned}")
    try:
        _, _, _, gamma = datagen.relevance_ratios(setup.datasets,
                                                  setup.correlation)
        lines.append(f"gamma (ground truth): {gamma:g}")
    except ValueError:
        pass
    return "\n".join(lines) + "\n"
