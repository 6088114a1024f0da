"""Desk-scale sparse mixture-of-experts model with manual backpropagation.

Parameters live in a flat ``{key: ndarray}`` dict so that gradients,
aggregation, low-rank factorization, and checkpointing all share one
representation.  Keys:

    backbone.w_in            (d_in, d_in)      frozen input map
    backbone.w_mid           (d_in, d_in)      frozen inter-layer map
    backbone.w_proj          (d_out, d_in)     frozen pre-head projection
    backbone.w_head          (n_classes, d_out) frozen output head
    gate.{l}                 (n_experts, d_in) per-layer gate
    expert.{m}.{l}.w1        (d_hidden, d_in)
    expert.{m}.{l}.w2        (d_in, d_hidden)

Trainable parameter groups are "gate" and "expert.{m}"; the backbone never
receives gradients.  All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GATE = "gate"
BACKBONE = "backbone"


def expert_group(m: int) -> str:
    return f"expert.{m}"


def group_of(key: str) -> str:
    """Parameter group a flat key belongs to."""
    if key.startswith("backbone."):
        return BACKBONE
    if key.startswith("gate."):
        return GATE
    parts = key.split(".")
    return f"expert.{parts[1]}"


@dataclass(frozen=True)
class MoEConfig:
    n_layers: int
    n_experts: int
    top_k: int
    d_in: int
    d_hidden: int
    d_out: int
    n_classes: int
    noise_std: float = 0.0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not (1 <= self.top_k <= self.n_experts):
            raise ValueError("need 1 <= top_k <= n_experts")
        for name in ("d_in", "d_hidden", "d_out", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def param_shapes(config: MoEConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "backbone.w_in": (config.d_in, config.d_in),
        "backbone.w_mid": (config.d_in, config.d_in),
        "backbone.w_proj": (config.d_out, config.d_in),
        "backbone.w_head": (config.n_classes, config.d_out),
    }
    for l in range(config.n_layers):
        shapes[f"gate.{l}"] = (config.n_experts, config.d_in)
    for m in range(config.n_experts):
        for l in range(config.n_layers):
            shapes[f"expert.{m}.{l}.w1"] = (config.d_hidden, config.d_in)
            shapes[f"expert.{m}.{l}.w2"] = (config.d_in, config.d_hidden)
    return shapes


@dataclass
class MoEParams:
    config: MoEConfig
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "MoEParams":
        return MoEParams(self.config, {k: v.copy() for k, v in self.values.items()})

    def group_keys(self, group: str) -> list[str]:
        return [k for k in self.values if group_of(k) == group]

    def trainable_groups(self) -> list[str]:
        return [GATE] + [expert_group(m) for m in range(self.config.n_experts)]


def init_params(config: MoEConfig, rng: np.random.Generator, scale: float = 0.5) -> MoEParams:
    values = {}
    for key, shape in param_shapes(config).items():
        fan_in = shape[-1]
        values[key] = rng.standard_normal(shape) * (scale / np.sqrt(fan_in))
    # Identity-leaning frozen maps keep the toy signal from washing out.
    values["backbone.w_in"] += np.eye(config.d_in)
    values["backbone.w_mid"] += np.eye(config.d_in)
    return MoEParams(config, values)


def mask_gate_logits(logits: np.ndarray, assigned) -> np.ndarray:
    """Exclude experts outside ``assigned`` from routing.

    Excluded logits go to -inf before Top-K so exclusion holds regardless of
    the sign of the remaining logits.
    """
    assigned = set(assigned)
    if not assigned:
        raise ValueError("assigned expert set must be nonempty")
    masked = np.full_like(logits, -np.inf)
    idx = sorted(assigned)
    masked[idx] = logits[idx]
    return masked


def _route(logits: np.ndarray, top_k: int, noise_std: float, rng) -> tuple[tuple[int, ...], np.ndarray]:
    """Top-K selection (ties: lower index wins) and softmax weights.

    Noise perturbs selection only; weights come from the unnoised logits.
    """
    scores = logits
    if noise_std > 0 and rng is not None:
        scores = logits + rng.normal(0.0, noise_std, size=logits.shape)
        scores = np.where(np.isfinite(logits), scores, -np.inf)
    finite = int(np.sum(np.isfinite(logits)))
    k_eff = min(top_k, finite)
    order = np.argsort(-scores, kind="stable")
    sel = tuple(sorted(int(i) for i in order[:k_eff]))
    z = logits[list(sel)]
    z = z - z.max()
    w = np.exp(z)
    w = w / w.sum()
    return sel, w


def _forward_sample(params: MoEParams, x: np.ndarray, mask, rng, want_cache: bool):
    cfg = params.config
    v = params.values
    if x.shape != (cfg.d_in,):
        raise ValueError(f"expected input of shape ({cfg.d_in},), got {x.shape}")
    if mask is not None:
        mask = set(int(m) for m in mask)
        if not mask:
            raise ValueError("mask must be a nonempty expert set")
        if not mask <= set(range(cfg.n_experts)):
            raise ValueError("mask references unknown expert indices")

    h = v["backbone.w_in"] @ x
    trace = []
    caches = []
    for l in range(cfg.n_layers):
        s = v[f"gate.{l}"] @ h
        s_masked = mask_gate_logits(s, mask) if mask is not None else s
        sel, w = _route(s_masked, cfg.top_k, cfg.noise_std, rng)
        y = h.copy()
        expert_out = []
        expert_pre = []
        for wi, m in zip(w, sel):
            u1 = v[f"expert.{m}.{l}.w1"] @ h
            a1 = np.maximum(u1, 0.0)
            o = v[f"expert.{m}.{l}.w2"] @ a1
            y += wi * o
            expert_out.append(o)
            expert_pre.append(u1)
        trace.append((sel, w))
        if want_cache:
            caches.append({"h": h, "sel": sel, "w": w, "out": expert_out, "pre": expert_pre})
        h = v["backbone.w_mid"] @ y if l < cfg.n_layers - 1 else y
    logits = v["backbone.w_head"] @ (v["backbone.w_proj"] @ h)
    return logits, trace, caches


def forward(params: MoEParams, x: np.ndarray, mask=None, rng=None):
    """Model logits and the per-layer routing trace for one sample."""
    logits, trace, _ = _forward_sample(params, x, mask, rng, want_cache=False)
    return logits, trace


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def loss(params: MoEParams, batch, mask=None, rng=None) -> float:
    """Mean cross-entropy over the batch."""
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    total = 0.0
    for xi, yi in zip(X, y):
        logits, _, _ = _forward_sample(params, xi, mask, rng, want_cache=False)
        p = _softmax(logits)
        total += -np.log(p[int(yi)])
    return total / X.shape[0]


def zero_gradients(params: MoEParams, trainable) -> dict[str, np.ndarray]:
    shapes = param_shapes(params.config)
    trainable = set(trainable)
    return {k: np.zeros(s) for k, s in shapes.items() if group_of(k) in trainable}


def backward(params: MoEParams, batch, trainable, mask=None, rng=None) -> dict[str, np.ndarray]:
    """Exact gradients of ``loss`` for the requested parameter groups.

    Top-K selection is treated as non-differentiable; gradients flow through
    the softmax weights of the selected experts and the selected expert
    networks only.  Groups outside ``trainable`` are structurally absent from
    the result.
    """
    trainable = set(trainable)
    if not trainable:
        raise ValueError("trainable group set must be nonempty")
    cfg = params.config
    v = params.values
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    grads = zero_gradients(params, trainable)
    inv_n = 1.0 / X.shape[0]
    gate_trainable = GATE in trainable

    for xi, yi in zip(X, y):
        logits, _, caches = _forward_sample(params, xi, mask, rng, want_cache=True)
        p = _softmax(logits)
        dz = p * inv_n
        dz[int(yi)] -= inv_n
        # Backbone is frozen: only propagate through it.
        g_h = v["backbone.w_proj"].T @ (v["backbone.w_head"].T @ dz)
        for l in reversed(range(cfg.n_layers)):
            c = caches[l]
            g_y = v["backbone.w_mid"].T @ g_h if l < cfg.n_layers - 1 else g_h
            h = c["h"]
            g_h = g_y.copy()  # residual path
            dw_sel = np.empty(len(c["sel"]))
            for i, m in enumerate(c["sel"]):
                wi = c["w"][i]
                o = c["out"][i]
                dw_sel[i] = float(g_y @ o)
                g_o = wi * g_y
                da1 = v[f"expert.{m}.{l}.w2"].T @ g_o
                du1 = da1 * (c["pre"][i] > 0)
                grp = expert_group(m)
                if grp in trainable:
                    a1 = np.maximum(c["pre"][i], 0.0)
                    grads[f"expert.{m}.{l}.w2"] += np.outer(g_o, a1)
                    grads[f"expert.{m}.{l}.w1"] += np.outer(du1, h)
                g_h += v[f"expert.{m}.{l}.w1"].T @ du1
            # softmax over the selected logits
            w = c["w"]
            ds = w * (dw_sel - float(w @ dw_sel))
            gate_w = v[f"gate.{l}"]
            for i, m in enumerate(c["sel"]):
                if gate_trainable:
                    grads[f"gate.{l}"][m] += ds[i] * h
                g_h += ds[i] * gate_w[m]
        # g_h continues through backbone.w_in, which is frozen: drop it.
    return grads
