"""Synthetic class-conditional token worlds with exact ground truth.

A World is a set of G first-order Markov chains over K tokens (one per
class) plus a class prior. Sequence likelihoods, mutual information between
sequence and class, and the Bayes classifier are all computable exactly at
desk scale, which is what makes them usable as oracles.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .diffusion import TokenSequence
from .streams import Stream

__all__ = [
    "World",
    "Dataset",
    "make_world",
    "sample_dataset",
    "true_sequence_probability",
    "true_mutual_information",
    "bayes_classify",
    "all_sequence_probabilities",
    "class_bigram_distribution",
]

_ENUM_GUARD = 65536
_MIN_CLASS_TV = 1e-6


@dataclass(frozen=True)
class World:
    classes: int
    tokens: int
    length: int
    start: np.ndarray   # (G, K) initial distributions
    trans: np.ndarray   # (G, K, K) row-stochastic transitions
    prior: np.ndarray   # (G,)
    world_id: str = ""

    def __post_init__(self):
        for name in ("start", "trans", "prior"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))


@dataclass
class Dataset:
    items: list[TokenSequence] = field(default_factory=list)
    world_id: str = ""

    def __len__(self) -> int:
        return len(self.items)

    def by_class(self) -> dict[int, list[TokenSequence]]:
        out: dict[int, list[TokenSequence]] = {}
        for item in self.items:
            out.setdefault(item.class_id, []).append(item)
        return out


def make_world(classes: int, tokens: int, length: int, concentration: float = 1.0, seed: int = 0) -> World:
    """Draw per-class Markov chains from a symmetric Dirichlet prior.

    Redraws until all class pairs are distinguishable (positive total
    variation between their first-bigram distributions).
    """
    if classes < 2 or tokens < 2 or length < 2:
        raise ValueError(f"need classes >= 2, tokens >= 2, length >= 2, got ({classes}, {tokens}, {length})")
    if concentration <= 0:
        raise ValueError(f"concentration must be positive, got {concentration}")

    alpha = np.full(tokens, concentration)
    for attempt in range(64):
        gen = Stream("world", seed, attempt).generator()
        start = gen.dirichlet(alpha, size=classes)
        trans = gen.dirichlet(alpha, size=(classes, tokens))
        if _min_pairwise_tv(start, trans) > _MIN_CLASS_TV:
            break
    else:
        raise RuntimeError("could not draw a distinguishable world")

    prior = np.full(classes, 1.0 / classes)
    tag = hashlib.sha256(
        f"{classes},{tokens},{length},{concentration!r},{seed}".encode()
    ).hexdigest()[:8]
    world_id = f"w{classes}x{tokens}x{length}-{tag}"
    return World(classes, tokens, length, start, trans, prior, world_id)


def _min_pairwise_tv(start: np.ndarray, trans: np.ndarray) -> float:
    # TV over the joint distribution of the first two tokens separates the
    # full sequence distributions whenever it is positive.
    joints = start[:, :, None] * trans
    G = start.shape[0]
    best = np.inf
    for a in range(G):
        for b in range(a + 1, G):
            best = min(best, 0.5 * np.abs(joints[a] - joints[b]).sum())
    return float(best)


def sample_dataset(world: World, per_class: int, stream: Stream) -> Dataset:
    """Ancestrally sample `per_class` sequences from each class chain."""
    items = []
    for g in range(world.classes):
        for i in range(per_class):
            gen = stream.child("seq", g, i).generator()
            seq = np.empty(world.length, dtype=np.int64)
            seq[0] = _draw(world.start[g], gen)
            for pos in range(1, world.length):
                seq[pos] = _draw(world.trans[g][seq[pos - 1]], gen)
            items.append(TokenSequence(seq, g))
    return Dataset(items, world.world_id)


def _draw(p: np.ndarray, gen: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    cdf[-1] = max(cdf[-1], 1.0)
    return int(np.argmax(cdf > gen.random()))


def true_sequence_probability(world: World, x0: TokenSequence, g: int) -> float:
    """Exact chain probability of the sequence under class g."""
    toks = x0.tokens
    p = world.start[g][toks[0]]
    for prev, cur in zip(toks[:-1], toks[1:]):
        p *= world.trans[g][prev, cur]
    return float(p)


def all_sequence_probabilities(world: World) -> np.ndarray:
    """Exact p(z | g) for every one of the K^L sequences; shape (G, K^L).

    Sequence index encodes tokens big-endian: index = sum_l z_l * K^(L-1-l).
    """
    K, L, G = world.tokens, world.length, world.classes
    if K**L > _ENUM_GUARD:
        raise ValueError(f"enumeration guard: K^L = {K**L} exceeds {_ENUM_GUARD}")
    probs = world.start.copy()  # (G, K)
    for _ in range(1, L):
        n = probs.shape[1]
        last = np.arange(n) % K
        probs = (probs[:, :, None] * world.trans[:, last, :]).reshape(G, n * K)
    return probs


def true_mutual_information(world: World) -> float:
    """Exact I(z_0; c) in nats by enumerating all K^L sequences."""
    cond = all_sequence_probabilities(world)
    marginal = world.prior @ cond
    ratio = np.zeros_like(cond)
    mask = cond > 0
    ratio[mask] = np.log(cond[mask] / np.broadcast_to(marginal, cond.shape)[mask])
    return float((world.prior[:, None] * cond * ratio).sum())


def bayes_classify(world: World, x0: TokenSequence) -> int:
    """argmax_g p(g) p(z | g); ties go to the lowest class index."""
    scores = [world.prior[g] * true_sequence_probability(world, x0, g) for g in range(world.classes)]
    return int(np.argmax(scores))


def class_bigram_distribution(world: World, g: int) -> np.ndarray:
    """Exact distribution of a uniformly chosen adjacent pair; shape (K, K)."""
    p = world.start[g].copy()
    acc = np.zeros((world.tokens, world.tokens))
    for _ in range(world.length - 1):
        acc += p[:, None] * world.trans[g]
        p = p @ world.trans[g]
    return acc / (world.length - 1)
