"""Learnable reverse model: predicts clean tokens, composes with the posterior.

The network is a small pre-norm transformer over the L positions of the
noisy sequence. Timestep and conditioning class enter additively as learned
embeddings on every position. The head predicts a distribution over the K
clean tokens (never the mask), and the reverse transition is obtained by
mixing the analytic one-step posteriors under that prediction:

    p(x_{t-1} | x_t, c) = sum_x0~  q(x_{t-1} | x_t, x0~) * p(x0~ | x_t, c)

which keeps the reverse distribution linear in the predicted simplex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorgraph as tg
from .diffusion import Schedule, TokenSequence, UnreachableStateError
from .streams import Stream

__all__ = [
    "DenoiserConfig",
    "Params",
    "init_params",
    "bind_params",
    "build_logits",
    "predict_x0",
    "compose_reverse",
    "reverse_mix_coefficients",
    "reverse_step_distribution",
]


@dataclass(frozen=True)
class DenoiserConfig:
    tokens: int          # K, clean codebook size
    states: int          # S, includes mask for mask-uniform schedules
    length: int          # L
    steps: int           # T
    classes: int
    width: int = 64
    blocks: int = 2
    heads: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.states < self.tokens:
            raise ValueError("states must be >= tokens")

    @classmethod
    def for_schedule(cls, schedule: Schedule, length: int, classes: int, **kw) -> "DenoiserConfig":
        return cls(
            tokens=schedule.tokens,
            states=schedule.states,
            length=length,
            steps=schedule.steps,
            classes=classes,
            **kw,
        )


@dataclass
class Params:
    """All learnable tensors, keyed by name."""

    config: DenoiserConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: DenoiserConfig) -> Params:
    """Deterministic 1/fan-in init; the output head starts at zero so the
    initial clean-token prediction is exactly uniform."""
    gen = Stream("denoiser-init", config.seed).generator()
    d, hd = config.width, config.width // config.heads
    t: dict[str, np.ndarray] = {}

    def normal(shape, fan_in):
        return gen.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    t["tok_emb"] = normal((config.states, d), d)
    t["pos_emb"] = normal((config.length, d), d)
    t["time_emb"] = normal((config.steps, d), d)
    t["cond_emb"] = normal((config.classes, d), d)
    for i in range(config.blocks):
        p = f"blk{i}"
        t[f"{p}.ln1.g"] = np.ones(d)
        t[f"{p}.ln1.b"] = np.zeros(d)
        for h in range(config.heads):
            for name in ("wq", "wk", "wv"):
                t[f"{p}.attn.h{h}.{name}"] = normal((d, hd), d)
            for name in ("bq", "bk", "bv"):
                t[f"{p}.attn.h{h}.{name}"] = np.zeros(hd)
        t[f"{p}.attn.wo"] = normal((d, d), d)
        t[f"{p}.attn.bo"] = np.zeros(d)
        t[f"{p}.ln2.g"] = np.ones(d)
        t[f"{p}.ln2.b"] = np.zeros(d)
        t[f"{p}.mlp.w1"] = normal((d, 4 * d), d)
        t[f"{p}.mlp.b1"] = np.zeros(4 * d)
        t[f"{p}.mlp.w2"] = normal((4 * d, d), 4 * d)
        t[f"{p}.mlp.b2"] = np.zeros(d)
    t["ln_f.g"] = np.ones(d)
    t["ln_f.b"] = np.zeros(d)
    t["head.w"] = np.zeros((d, config.tokens))
    t["head.b"] = np.zeros(config.tokens)
    return Params(config, t)


def bind_params(graph: tg.Graph, params: Params) -> dict[str, tg.Node]:
    return {name: graph.param(params.tensors[name]) for name in params.names()}


def _check_inputs(config: DenoiserConfig, xt: TokenSequence, t: int, c: int) -> None:
    if not 1 <= t <= config.steps:
        raise ValueError(f"step t={t} out of range [1, {config.steps}]")
    if not 0 <= c < config.classes:
        raise ValueError(f"unknown class index {c} (have {config.classes})")
    if len(xt) != config.length:
        raise ValueError(f"sequence length {len(xt)} != configured {config.length}")
    if xt.tokens.min() < 0 or xt.tokens.max() >= config.states:
        raise ValueError(f"tokens out of range [0, {config.states})")


def build_logits(
    graph: tg.Graph,
    bound: dict[str, tg.Node],
    config: DenoiserConfig,
    xt: TokenSequence,
    t: int,
    c: int,
) -> tg.Node:
    """Transformer forward pass; returns the (L, K) clean-token logits node."""
    _check_inputs(config, xt, t, c)
    g = graph
    inv_scale = 1.0 / math.sqrt(config.width // config.heads)

    x = g.gather(bound["tok_emb"], xt.tokens)
    x = g.add(x, bound["pos_emb"])
    x = g.add(x, g.gather(bound["time_emb"], [t - 1]))
    x = g.add(x, g.gather(bound["cond_emb"], [c]))

    for i in range(config.blocks):
        p = f"blk{i}"
        pre = g.layer_norm(x, bound[f"{p}.ln1.g"], bound[f"{p}.ln1.b"])
        heads = []
        for h in range(config.heads):
            hp = f"{p}.attn.h{h}"
            q = g.affine(pre, bound[f"{hp}.wq"], bound[f"{hp}.bq"])
            k = g.affine(pre, bound[f"{hp}.wk"], bound[f"{hp}.bk"])
            v = g.affine(pre, bound[f"{hp}.wv"], bound[f"{hp}.bv"])
            att = g.softmax(g.scale(g.matmul(q, k, transpose_b=True), inv_scale))
            heads.append(g.matmul(att, v))
        cat = heads[0] if len(heads) == 1 else g.concat(heads, axis=1)
        x = g.add(x, g.affine(cat, bound[f"{p}.attn.wo"], bound[f"{p}.attn.bo"]))

        pre2 = g.layer_norm(x, bound[f"{p}.ln2.g"], bound[f"{p}.ln2.b"])
        mid = g.gelu(g.affine(pre2, bound[f"{p}.mlp.w1"], bound[f"{p}.mlp.b1"]))
        x = g.add(x, g.affine(mid, bound[f"{p}.mlp.w2"], bound[f"{p}.mlp.b2"]))

    final = g.layer_norm(x, bound["ln_f.g"], bound["ln_f.b"])
    return g.affine(final, bound["head.w"], bound["head.b"])


def predict_x0(params: Params, xt: TokenSequence, t: int, c: int) -> np.ndarray:
    """p(x0~ | x_t, t, c): one probability row over K per position."""
    graph = tg.Graph()
    bound = bind_params(graph, params)
    logits = build_logits(graph, bound, params.config, xt, t, c)
    return graph.softmax(logits).value


def reverse_mix_coefficients(schedule: Schedule, xt: TokenSequence, t: int):
    """Constants (outer, inv_denom, carry) of the posterior mixture.

    The reverse row for position l is
        outer[l] * ((p_rows[l] * inv_denom[l]) @ carry)
    All entries are strictly positive under a non-degenerate schedule;
    raises if any clean token cannot reach the observed x_t.
    """
    K = schedule.tokens
    outer = schedule.q[t][:, xt.tokens].T              # (L, S)
    denom = schedule.qbar[t][:K, xt.tokens].T          # (L, K)
    if (denom <= 0.0).any():
        raise UnreachableStateError(f"states unreachable under schedule at t={t}")
    carry = schedule.qbar[t - 1][:K]                   # (K, S)
    return outer, 1.0 / denom, carry


def compose_reverse(p_rows: np.ndarray, xt: TokenSequence, t: int, schedule: Schedule) -> np.ndarray:
    """Mix one-step posteriors under predicted clean-token rows; shape (L, S).

    Accepts predictions with exact zeros (e.g. hard one-hot oracles): those
    components simply contribute nothing, even where the schedule makes the
    corresponding posterior undefined.
    """
    K = schedule.tokens
    if not 2 <= t <= schedule.steps:
        raise ValueError(f"step t={t} out of range [2, {schedule.steps}]")
    outer = schedule.q[t][:, xt.tokens].T
    denom = schedule.qbar[t][:K, xt.tokens].T
    weights = np.zeros_like(p_rows)
    active = p_rows > 0.0
    if (denom[active] <= 0.0).any():
        raise UnreachableStateError(f"prediction puts weight on states unreachable at t={t}")
    weights[active] = p_rows[active] / denom[active]
    return outer * (weights @ schedule.qbar[t - 1][:K])


def reverse_step_distribution(
    params: Params, xt: TokenSequence, t: int, c: int, schedule: Schedule
) -> np.ndarray:
    """p(x_{t-1} | x_t, c) rows over S states, for 2 <= t <= T."""
    return compose_reverse(predict_x0(params, xt, t, c), xt, t, schedule)
