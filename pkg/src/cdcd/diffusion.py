"""Forward corruption chain over discrete token sequences.

Corruption runs for T steps through row-stochastic single-step matrices
Q_t, with cumulative products Qbar_t = Q_1 ... Q_t. Two kernels:

* ``uniform``: Q_t = a_t * I + (b_t / K) * ones, S = K states.
* ``mask-uniform``: the uniform kernel plus an extra absorbing mask state
  (index K, S = K + 1); each step moves mass g_t into the mask column.

Schedules are parameterized by the cumulative retention abar_t (probability
that a position still carries its original token), which decays from 1 to
(1 - terminal) following the linear or cosine shape. For the mask-uniform
kernel the cumulative mask mass gbar_t rises to the terminal level and the
uniform-resample channel gets a fixed 10% share of the corrupted mass, so
both "random token" and "mask token" corruption styles stay active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .streams import Stream

__all__ = [
    "ScheduleConfig",
    "Schedule",
    "TokenSequence",
    "UnreachableStateError",
    "SupportError",
    "build_schedule",
    "forward_marginal",
    "forward_sample",
    "forward_sample_step",
    "posterior",
    "kl_categorical",
    "stationary_distribution",
    "sample_rows",
]

KERNELS = ("uniform", "mask-uniform")
SHAPES = ("linear", "cosine")

# share of corrupted mass routed through uniform resampling (vs mask)
# in the mask-uniform kernel
_UNIFORM_SHARE = 0.1

_ATOL = 1e-12


class UnreachableStateError(ValueError):
    """(x0, xt) pair has zero probability under the schedule."""


class SupportError(ValueError):
    """KL support violation: q has a zero where p is positive."""


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 8
    tokens: int = 16
    kernel: str = "mask-uniform"
    shape: str = "linear"
    terminal: float = 0.95

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.tokens < 2:
            raise ValueError(f"tokens must be >= 2, got {self.tokens}")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        # 0 is allowed as the degenerate no-noise schedule used by tests
        if not 0.0 <= self.terminal <= 1.0:
            raise ValueError(f"terminal corruption must lie in (0, 1], got {self.terminal}")

    @property
    def states(self) -> int:
        return self.tokens + 1 if self.kernel == "mask-uniform" else self.tokens

    @property
    def mask_token(self) -> int | None:
        return self.tokens if self.kernel == "mask-uniform" else None


@dataclass(frozen=True)
class Schedule:
    """Single-step and cumulative transition matrices, indexed 1..T.

    ``alpha[t]`` is the diagonal stay probability, ``beta[t]`` the per-entry
    uniform-resample mass, ``gamma[t]`` the per-step mask mass (zero for the
    uniform kernel); alpha + (K-1) beta + gamma = 1 on non-mask rows.
    Index 0 of every array is the identity step.
    """

    config: ScheduleConfig
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    q: np.ndarray      # (T+1, S, S)
    qbar: np.ndarray   # (T+1, S, S)
    abar: np.ndarray   # cumulative retention
    bbar: np.ndarray   # cumulative uniform mass (total, not per-entry)
    gbar: np.ndarray   # cumulative mask mass

    @property
    def steps(self) -> int:
        return self.config.steps

    @property
    def tokens(self) -> int:
        return self.config.tokens

    @property
    def states(self) -> int:
        return self.config.states

    @property
    def mask_token(self) -> int | None:
        return self.config.mask_token


@dataclass(frozen=True)
class TokenSequence:
    """A length-L sequence of codebook indices plus an optional class."""

    tokens: np.ndarray
    class_id: int | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.tokens, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError(f"tokens must be 1-D, got shape {arr.shape}")
        object.__setattr__(self, "tokens", arr)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def with_tokens(self, tokens) -> "TokenSequence":
        return TokenSequence(tokens, self.class_id)


def _shape_fraction(cfg: ScheduleConfig, t: np.ndarray) -> np.ndarray:
    frac = t / cfg.steps
    if cfg.shape == "cosine":
        return (1.0 - np.cos(math.pi * frac)) / 2.0
    return frac


def build_schedule(config: ScheduleConfig) -> Schedule:
    """Construct all per-step and cumulative matrices for the chain."""
    T, K, S = config.steps, config.tokens, config.states
    t = np.arange(T + 1, dtype=np.float64)
    s = _shape_fraction(config, t)

    if config.kernel == "uniform":
        abar = 1.0 - config.terminal * s
        gbar = np.zeros(T + 1)
    else:
        gbar = config.terminal * s
        abar = (1.0 - gbar) * (1.0 - _UNIFORM_SHARE * s)
    bbar = 1.0 - abar - gbar

    q = np.zeros((T + 1, S, S))
    qbar = np.zeros((T + 1, S, S))
    q[0] = np.eye(S)
    qbar[0] = np.eye(S)
    alpha = np.ones(T + 1)
    beta = np.zeros(T + 1)
    gamma = np.zeros(T + 1)

    for step in range(1, T + 1):
        a = abar[step] / abar[step - 1] if abar[step - 1] > 0 else 0.0
        if config.kernel == "mask-uniform":
            g = (gbar[step] - gbar[step - 1]) / (1.0 - gbar[step - 1]) if gbar[step - 1] < 1 else 0.0
        else:
            g = 0.0
        b = 1.0 - a - g
        if b < -_ATOL:
            raise ValueError(f"schedule step {step}: negative resample mass {b}")
        b = max(b, 0.0)

        m = a * np.eye(K) + (b / K) * np.ones((K, K))
        if config.kernel == "mask-uniform":
            mat = np.zeros((S, S))
            mat[:K, :K] = m
            mat[:K, K] = g
            mat[K, K] = 1.0  # absorbing
        else:
            mat = m
        q[step] = mat
        qbar[step] = qbar[step - 1] @ mat
        alpha[step] = a + b / K
        beta[step] = b / K
        gamma[step] = g

    schedule = Schedule(config, alpha, beta, gamma, q, qbar, abar, bbar, gbar)
    _validate_schedule(schedule)
    return schedule


def _validate_schedule(schedule: Schedule) -> None:
    K = schedule.tokens
    for t in range(1, schedule.steps + 1):
        for mats in (schedule.q, schedule.qbar):
            rows = mats[t].sum(axis=1)
            if not np.allclose(rows, 1.0, atol=_ATOL) or (mats[t] < 0).any():
                raise AssertionError(f"schedule matrices not row-stochastic at t={t}")
    if schedule.mask_token is not None:
        mask = schedule.mask_token
        if not (schedule.q[1:, mask, mask] == 1.0).all():
            raise AssertionError("mask row is not absorbing")
    # corruption must be monotone: staying probability never increases
    stay = schedule.qbar[:, np.arange(K), np.arange(K)]
    if (np.diff(stay, axis=0) > _ATOL).any():
        raise AssertionError("retention probability increased along the chain")


def _check_step(schedule: Schedule, t: int, lo: int = 1) -> None:
    if not lo <= t <= schedule.steps:
        raise ValueError(f"step t={t} out of range [{lo}, {schedule.steps}]")


def forward_marginal(x0: TokenSequence, t: int, schedule: Schedule) -> np.ndarray:
    """Rows of q(x_t | x_0): row l is row x0[l] of Qbar_t; shape (L, S)."""
    _check_step(schedule, t)
    _check_tokens(x0.tokens, schedule.tokens, "x0")
    return schedule.qbar[t][x0.tokens]


def sample_rows(rows: np.ndarray, stream: Stream) -> np.ndarray:
    """One categorical draw per row via inverse CDF; deterministic."""
    u = stream.generator().random(rows.shape[0])
    cdf = np.cumsum(rows, axis=1)
    cdf[:, -1] = np.maximum(cdf[:, -1], 1.0)  # guard roundoff at the top bin
    return np.argmax(cdf > u[:, None], axis=1).astype(np.int64)


def forward_sample(x0: TokenSequence, t: int, schedule: Schedule, stream: Stream) -> TokenSequence:
    """Draw x_t ~ q(x_t | x_0), each position independent."""
    return x0.with_tokens(sample_rows(forward_marginal(x0, t, schedule), stream))


def forward_sample_step(prev: TokenSequence, t: int, schedule: Schedule, stream: Stream) -> TokenSequence:
    """Draw x_t ~ q(x_t | x_{t-1}), one single step; mask stays mask."""
    _check_step(schedule, t)
    _check_tokens(prev.tokens, schedule.states, "x_prev")
    return prev.with_tokens(sample_rows(schedule.q[t][prev.tokens], stream))


def posterior(x0: TokenSequence, xt: TokenSequence, t: int, schedule: Schedule) -> np.ndarray:
    """Rows of q(x_{t-1} | x_t, x_0) for 2 <= t <= T; shape (L, S).

    Row l, entry k is Q_t[k, xt[l]] * Qbar_{t-1}[x0[l], k] / Qbar_t[x0[l], xt[l]].
    """
    _check_step(schedule, t, lo=2)
    _check_tokens(x0.tokens, schedule.tokens, "x0")
    _check_tokens(xt.tokens, schedule.states, "xt")
    denom = schedule.qbar[t][x0.tokens, xt.tokens]
    if (denom <= 0.0).any():
        bad = int(np.argmax(denom <= 0.0))
        raise UnreachableStateError(
            f"x_t={xt.tokens[bad]} unreachable from x_0={x0.tokens[bad]} at t={t} (position {bad})"
        )
    numer = schedule.q[t][:, xt.tokens].T * schedule.qbar[t - 1][x0.tokens]
    return numer / denom[:, None]


def kl_categorical(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats, summed over rows; 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    support = p > 0.0
    if (q[support] <= 0.0).any():
        raise SupportError("q has zero mass where p is positive")
    out = np.zeros_like(p)
    out[support] = p[support] * (np.log(p[support]) - np.log(q[support]))
    return float(out.sum())


def stationary_distribution(schedule: Schedule) -> np.ndarray:
    """Reference prior p(x_T) used in the prior-matching term.

    Uniform over K for the uniform kernel. For mask-uniform it is the
    x0-independent part of the terminal rows (uniform + mask mixture),
    which every row of Qbar_T approaches as retention vanishes.
    """
    K, S = schedule.tokens, schedule.states
    if schedule.mask_token is None:
        return np.full(K, 1.0 / K)
    T = schedule.steps
    resid = schedule.bbar[T] + schedule.gbar[T]
    if resid <= 0.0:  # degenerate no-noise schedule
        p = np.zeros(S)
        p[:K] = 1.0 / K
        return p
    p = np.full(S, schedule.bbar[T] / K / resid)
    p[K] = schedule.gbar[T] / resid
    return p


def _check_tokens(tokens: np.ndarray, bound: int, label: str) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= bound):
        raise ValueError(f"{label} tokens must lie in [0, {bound})")
