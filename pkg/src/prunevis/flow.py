"""Saliency-based information flow between the parts of a pruned sequence.

``I[i, j]`` is the flow from key ``j`` (sender) to query ``i`` (receiver).
Sequences are split into the visual prefix ``v``, preserved text ``r``,
pruned text ``c`` and the target position ``t`` (the final token, whose
logits give the answer).  Each score is the mean saliency over one cell
set; ``S_ww`` covers every causal cell not claimed by the other five.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError
from .metrics import SCHEMA
from .pruning import PruneConfig, PruneRecord

SCORE_NAMES = ("S_vr", "S_vc", "S_rt", "S_ct", "S_vt", "S_ww")


@dataclass(frozen=True)
class FlowPartition:
    v: tuple[int, ...]
    r: tuple[int, ...]
    c: tuple[int, ...]
    t: int
    n: int  # sequence length in original coordinates

    def __post_init__(self):
        v, r, c = set(self.v), set(self.r), set(self.c)
        if v & r or v & c or r & c:
            raise ContractError("partition sets overlap")
        if self.t in v | r | c:
            raise ContractError("target position must lie outside v, r and c")
        if not r:
            raise ContractError("partition needs at least one preserved text token")
        if v | r | c | {self.t} != set(range(self.n)):
            raise ContractError("partition does not cover the sequence")

    @classmethod
    def from_record(cls, record: PruneRecord) -> "FlowPartition":
        n = record.n_visual + record.text_len
        t = n - 1
        c = tuple(record.pruned)
        r = tuple(p for p in range(record.n_visual, n) if p != t and p not in set(c))
        return cls(tuple(range(record.n_visual)), r, c, t, n)

    def cell_masks(self) -> dict[str, np.ndarray]:
        """Boolean (query, key) masks of the six cell sets over the causal support."""
        n = self.n
        causal = np.tri(n, dtype=bool)
        qv = np.zeros(n, bool); qv[list(self.v)] = True
        qr = np.zeros(n, bool); qr[list(self.r)] = True
        qc = np.zeros(n, bool); qc[list(self.c)] = True
        qt = np.zeros(n, bool); qt[self.t] = True
        masks = {
            "S_vr": np.outer(qr, qv),
            "S_vc": np.outer(qc, qv),
            "S_rt": np.outer(qt, qr),
            "S_ct": np.outer(qt, qc),
            "S_vt": np.outer(qt, qv),
        }
        for name in masks:
            masks[name] &= causal
        claimed = np.zeros((n, n), bool)
        for m in masks.values():
            claimed |= m
        masks["S_ww"] = causal & ~claimed
        return masks


@dataclass
class FlowScores:
    values: dict[str, float]
    empty: tuple[str, ...] = ()  # cell sets with no members (score defined as 0)

    def __getitem__(self, name: str) -> float:
        return self.values[name]


def saliency_matrix(attn, grads) -> np.ndarray:
    """Sum over heads of ``|A * dL/dA|``; inputs are (H, n, n) or (n, n)."""
    a, g = np.asarray(attn, dtype=np.float64), np.asarray(grads, dtype=np.float64)
    if a.shape != g.shape:
        raise ContractError(f"attention {a.shape} and gradient {g.shape} shapes differ")
    if a.ndim == 2:
        a, g = a[None], g[None]
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ContractError(f"expected (H, n, n) attention, got {a.shape}")
    return np.abs(a * g).sum(axis=0)


def to_original(I: np.ndarray, alive, n: int) -> np.ndarray:
    """Place a reduced-sequence matrix into original coordinates, zero elsewhere."""
    alive = np.asarray(alive, dtype=np.int64)
    if I.shape != (len(alive), len(alive)):
        raise ContractError("saliency matrix does not match the alive map")
    out = np.zeros((n, n))
    out[np.ix_(alive, alive)] = I
    return out


def flow_scores(I, partition: FlowPartition) -> FlowScores:
    I = np.asarray(I, dtype=np.float64)
    if I.shape != (partition.n, partition.n):
        raise ContractError(f"saliency shape {I.shape} does not match partition length {partition.n}")
    values, empty = {}, []
    for name, mask in partition.cell_masks().items():
        size = int(mask.sum())
        if size == 0:
            values[name] = 0.0
            empty.append(name)
        else:
            values[name] = float(I[mask].sum() / size)
    return FlowScores(values, tuple(empty))


@dataclass
class FlowRun:
    """Per-layer saliency in original coordinates for one forward pass."""

    saliency: list[np.ndarray]
    sample_key: tuple = ()


@dataclass
class FlowTable:
    partition: FlowPartition
    baseline: list[FlowScores]
    pruned: list[FlowScores]
    layers: list[int] = field(default_factory=list)

    def delta(self, layer_idx: int, name: str) -> float:
        return self.pruned[layer_idx][name] - self.baseline[layer_idx][name]

    def mean_delta(self, name: str, layers=None) -> float:
        idx = range(len(self.layers)) if layers is None else [self.layers.index(l) for l in layers]
        vals = [self.delta(i, name) for i in idx]
        return float(np.mean(vals)) if vals else 0.0

    def mean_score(self, which: str, name: str, layers=None) -> float:
        src = self.pruned if which == "pruned" else self.baseline
        idx = range(len(self.layers)) if layers is None else [self.layers.index(l) for l in layers]
        vals = [src[i][name] for i in idx]
        return float(np.mean(vals)) if vals else 0.0

    def rows(self):
        for i, l in enumerate(self.layers):
            for name in SCORE_NAMES:
                b, p = self.baseline[i][name], self.pruned[i][name]
                yield l, name, b, p, p - b


def flow_compare(baseline: FlowRun, pruned: FlowRun, partition: FlowPartition, layers=None) -> FlowTable:
    """Score both runs on one partition (the pruned run's realized split)."""
    if baseline.sample_key != pruned.sample_key:
        raise ContractError("flow runs come from different samples")
    if len(baseline.saliency) != len(pruned.saliency):
        raise ContractError("flow runs have different layer counts")
    layers = list(range(len(baseline.saliency))) if layers is None else list(layers)
    table = FlowTable(partition, [], [], layers)
    for l in layers:
        table.baseline.append(flow_scores(baseline.saliency[l], partition))
        table.pruned.append(flow_scores(pruned.saliency[l], partition))
    return table


def flow_for_stream(params, cfg, stream, answer_id: int, prune: PruneConfig, sample_key=()):
    """Run baseline and pruned passes with attention gradients; returns (table, base run, pruned run)."""
    from .model import attention_gradients

    n = stream.length
    g0, tr0, _, _ = attention_gradients(params, cfg, stream, answer_id)
    g1, tr1, rec, _ = attention_gradients(params, cfg, stream, answer_id, prune=prune)
    base = FlowRun([to_original(saliency_matrix(a, g), al, n)
                    for a, g, al in zip(tr0.attention, g0, tr0.alive)], sample_key)
    pr = FlowRun([to_original(saliency_matrix(a, g), al, n)
                  for a, g, al in zip(tr1.attention, g1, tr1.alive)], sample_key)
    part = FlowPartition.from_record(rec)
    return flow_compare(base, pr, part), base, pr


FLOW_COLUMNS = ("sample", "layer", "score", "baseline", "pruned", "delta")


def flow_to_csv(tables: list[tuple[str, FlowTable]]) -> str:
    buf = io.StringIO()
    buf.write(SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FLOW_COLUMNS)
    for key, table in tables:
        for l, name, b, p, d in table.rows():
            w.writerow([key, l, name, repr(b), repr(p), repr(d)])
    return buf.getvalue()
