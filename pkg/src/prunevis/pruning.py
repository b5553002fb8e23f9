"""Attention-based removal of textual tokens between transformer layers.

Each pruning layer scores the tokens that are still alive by the attention
they *receive*: per head, column sums of the post-softmax attention matrix,
then pooled over heads (max by default).  The lowest-scoring unprotected
text tokens are physically removed from the hidden state before the next
layer runs.  Visual tokens are never candidates.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Tensor, take


class Strategy(str, enum.Enum):
    MAX_POOL = "MaxPool"
    MEAN_POOL = "MeanPool"
    RANDOM = "Random"


class Apportioning(str, enum.Enum):
    EVEN_PER_LAYER = "EvenPerLayer"
    ALL_AT_FIRST_LAYER = "AllAtFirstLayer"


def default_pruning_layers(n_layers: int) -> tuple[int, ...]:
    return tuple(range(math.ceil(n_layers / 3)))


@dataclass(frozen=True)
class PruneConfig:
    strategy: Strategy = Strategy.MAX_POOL
    rate: float = 0.3
    layers: tuple[int, ...] | None = None  # None -> first ceil(L/3) layers
    protect_question: bool = False
    apportioning: Apportioning = Apportioning.EVEN_PER_LAYER
    seed: int = 0  # only used by Random

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "apportioning", Apportioning(self.apportioning))
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))
        if not 0.0 <= self.rate < 1.0:
            raise ContractError(f"pruning rate must lie in [0, 1), got {self.rate}")
        if self.strategy is Strategy.RANDOM and not self.protect_question:
            object.__setattr__(self, "protect_question", True)

    def resolved_layers(self, n_layers: int) -> tuple[int, ...]:
        layers = default_pruning_layers(n_layers) if self.layers is None else self.layers
        if not layers or min(layers) < 0 or max(layers) >= n_layers:
            raise ContractError(f"pruning layers {layers} outside [0, {n_layers})")
        return layers

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "rate": self.rate,
            "layers": None if self.layers is None else list(self.layers),
            "protect_question": self.protect_question,
            "apportioning": self.apportioning.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        d = dict(d)
        if d.get("layers") is not None:
            d["layers"] = tuple(d["layers"])
        return cls(**d)

    def label(self) -> str:
        layers = "default" if self.layers is None else "-".join(map(str, self.layers))
        return f"{self.strategy.value}@{self.rate:g}[{layers}]"


@dataclass
class LayerPrune:
    layer: int
    positions: list[int]  # original positions, ascending
    scores: list[float]  # score of each pruned position at removal time


@dataclass
class PruneRecord:
    n_visual: int
    text_len: int
    layers: list[LayerPrune] = field(default_factory=list)

    @property
    def pruned(self) -> list[int]:
        return sorted(p for lp in self.layers for p in lp.positions)

    @property
    def total_pruned(self) -> int:
        return sum(len(lp.positions) for lp in self.layers)

    def pruned_through(self, layer: int) -> set[int]:
        return {p for lp in self.layers if lp.layer <= layer for p in lp.positions}

    def retained_flags(self) -> np.ndarray:
        """Per original text position: True if the token survives every pruning layer."""
        flags = np.ones(self.text_len, dtype=bool)
        for p in self.pruned:
            flags[p - self.n_visual] = False
        return flags


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def plan_layer_budget(config: PruneConfig, text_count: int, n_layers: int) -> list[int]:
    """Number of tokens to remove at each pruning layer, in layer order."""
    layers = config.resolved_layers(n_layers)
    total_k = round_half_up(config.rate * text_count)
    if config.apportioning is Apportioning.ALL_AT_FIRST_LAYER:
        return [total_k] + [0] * (len(layers) - 1)
    base, extra = divmod(total_k, len(layers))
    return [base + (1 if i < extra else 0) for i in range(len(layers))]


def token_scores(attn: np.ndarray, strategy: Strategy | str = Strategy.MAX_POOL) -> np.ndarray:
    """Attention received by every key position, pooled over heads.

    ``attn`` has shape (H, n, n) with rows indexed by query; the per-head
    score of key ``i`` is the column sum ``attn[h, :, i]``.
    """
    strategy = Strategy(strategy)
    attn = np.asarray(attn)
    if attn.ndim == 2:
        attn = attn[None]
    if attn.shape[0] == 0:
        raise ContractError("token_scores needs at least one head")
    if strategy is Strategy.RANDOM:
        raise ContractError("Random pruning does not score tokens")
    received = attn.sum(axis=1)  # (H, n)
    if strategy is Strategy.MAX_POOL:
        return received.max(axis=0)
    return received.mean(axis=0)


def select_prune_set(scores, k: int, protected=(), candidates=None, positions=None) -> list[int]:
    """The ``k`` lowest-scoring candidates; ties go to the smaller original position.

    ``scores`` is indexed like the alive sequence.  ``candidates`` (default:
    every index) minus ``protected`` are eligible; ``positions`` maps alive
    index to original position (identity when omitted).  Returns alive
    indices, ascending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if candidates is None:
        candidates = range(len(scores))
    protected = set(protected)
    candidates = np.asarray(sorted(c for c in candidates if c not in protected), dtype=np.int64)
    if k < 0 or k > len(candidates):
        raise ContractError(f"cannot prune {k} of {len(candidates)} candidate positions")
    if k == 0:
        return []
    pos = candidates if positions is None else np.asarray(positions)[candidates]
    order = np.lexsort((pos, scores[candidates]))
    return sorted(candidates[order[:k]].tolist())


def random_prune_set(seed, k: int, candidates, protected=()) -> list[int]:
    """Uniform sample of ``k`` unprotected candidates without replacement."""
    protected = set(protected)
    candidates = sorted(c for c in candidates if c not in protected)
    if k < 0 or k > len(candidates):
        raise ContractError(f"cannot prune {k} of {len(candidates)} candidate positions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picked = rng.choice(len(candidates), size=k, replace=False)
    return sorted(candidates[i] for i in picked)


def apply_prune(hidden: Tensor, alive: np.ndarray, prune: list[int], n_visual: int,
                axis: int = 1) -> tuple[Tensor, np.ndarray]:
    """Drop alive indices ``prune`` from ``hidden`` along the sequence axis.

    ``alive`` maps alive index -> original position.  Returns the reduced
    hidden state and the composed map.
    """
    alive = np.asarray(alive)
    prune_set = set(int(i) for i in prune)
    if not prune_set:
        return hidden, alive
    if min(prune_set) < 0 or max(prune_set) >= len(alive):
        raise ContractError("prune index outside the alive sequence")
    if any(alive[i] < n_visual for i in prune_set):
        raise ContractError("visual tokens cannot be pruned")
    keep = np.array([i for i in range(len(alive)) if i not in prune_set], dtype=np.int64)
    return take(hidden, keep, axis=axis), alive[keep]
