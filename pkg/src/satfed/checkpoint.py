"""Versioned binary checkpoints for protocol run state.

Layout: 8-byte magic ``SATFEDCK``, uint32 version, uint64 manifest length,
JSON manifest (sorted keys), then the float64 payloads of every array in
manifest order.  The manifest carries all non-array state (round index,
config, hyperparameters, plan, logs), so save -> restore -> save is
byte-identical and a resumed run reproduces the uninterrupted one exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import model as moe
from .channel import IDLE
from .protocols import BaselineRun, Hyper, RoundLog, SplitAsyncRun
from .splitting import ExpertAssignment

MAGIC = b"SATFEDCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def pack(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    names = sorted(arrays)
    manifest = {
        "meta": meta,
        "arrays": [[n, list(arrays[n].shape)] for n in names],
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(mbytes)), mbytes]
    for n in names:
        out.append(np.ascontiguousarray(arrays[n], dtype=np.float64).tobytes())
    return b"".join(out)


def unpack(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a satfed checkpoint")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", data, len(MAGIC) + 4)
    start = len(MAGIC) + 12
    if len(data) < start + mlen:
        raise CheckpointError("truncated checkpoint (manifest)")
    manifest = json.loads(data[start:start + mlen])
    offset = start + mlen
    arrays = {}
    for name, shape in manifest["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if len(data) < offset + nbytes:
            raise CheckpointError("truncated checkpoint (payload)")
        arrays[name] = np.frombuffer(data[offset:offset + nbytes],
                                     dtype=np.float64).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return manifest["meta"], arrays


def _config_meta(cfg: moe.MoEConfig) -> dict:
    return dataclasses.asdict(cfg)


def _logs_meta(logs: list[RoundLog]) -> list[dict]:
    return [dataclasses.asdict(r) for r in logs]


def _plan_meta(plan) -> list:
    return [-1 if c is IDLE else c for c in plan]


def _plan_from_meta(items) -> list:
    return [IDLE if c == -1 else int(c) for c in items]


def save_run(run) -> bytes:
    cfg = run.global_params.config
    meta = {
        "scheme": run.scheme,
        "t": run.t,
        "config": _config_meta(cfg),
        "hyper": dataclasses.asdict(run.hyper),
        "plan": _plan_meta(run.plan),
        "logs": _logs_meta(run.logs),
    }
    arrays = {f"global/{k}": v for k, v in run.global_params.values.items()}
    if isinstance(run, SplitAsyncRun):
        meta["groups"] = [sorted(g) for g in run.assignment.groups]
        meta["masked"] = run.masked
        meta["expert_phase_rounds"] = run.expert_phase_rounds
        for c, ref in enumerate(run.refs):
            for k, v in ref.values.items():
                arrays[f"ref/{c}/{k}"] = v
        for c, devices in enumerate(run.locals):
            for j, local in enumerate(devices):
                for k, v in local.items():
                    arrays[f"local/{c}/{j}/{k}"] = v
    return pack(meta, arrays)


def restore_run(data: bytes, datasets):
    meta, arrays = unpack(data)
    cfg = moe.MoEConfig(**meta["config"])
    hyper = Hyper(**meta["hyper"])
    values = {k.split("/", 1)[1]: v for k, v in arrays.items()
              if k.startswith("global/")}
    params = moe.MoEParams(cfg, values)
    plan = _plan_from_meta(meta["plan"])
    if meta["scheme"] == "baseline":
        run = BaselineRun(params, datasets, plan, hyper)
    else:
        groups = [set(g) for g in meta["groups"]]
        assignment = ExpertAssignment(len(groups), groups)
        base_plan = plan[:meta["expert_phase_rounds"]]
        run = SplitAsyncRun(params, datasets, base_plan, assignment, hyper,
                            masked=meta["masked"])
        if run.plan != plan:
            raise CheckpointError("checkpoint plan does not match configuration")
        for c in range(len(groups)):
            ref_values = {k.split("/", 2)[2]: v for k, v in arrays.items()
                          if k.startswith(f"ref/{c}/")}
            run.refs[c] = moe.MoEParams(cfg, ref_values)
            for j in range(len(run.locals[c])):
                run.locals[c][j] = {
                    k.split("/", 3)[3]: v for k, v in arrays.items()
                    if k.startswith(f"local/{c}/{j}/")}
    run.t = meta["t"]
    run.logs = [RoundLog(**r) for r in meta["logs"]]
    return run
