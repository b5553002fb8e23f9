"""Row-level attention statistics and the paired pre/post pruning report.

Every function here takes a single attention row (one query's probability
distribution over keys).  :func:`report` applies them across a baseline
trace and a pruned trace of the same stream.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, NumericError
from .pruning import PruneRecord

ROW_TOL = 1e-9
ZERO_ENTRY = 1e-15

METRICS = ("entropy", "variance", "alpha", "beta", "dvis")
VARIANTS = ("pre", "renorm", "post")


def _row(row) -> np.ndarray:
    r = np.asarray(row, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ContractError("attention row must be a nonempty vector")
    return r


def _check_prob(r: np.ndarray):
    if abs(r.sum() - 1.0) > ROW_TOL:
        raise ContractError(f"attention row sums to {r.sum()!r}, not 1")


def visual_dependency(row, visual) -> float:
    """Attention mass the query places on the visual positions."""
    r = _row(row)
    _check_prob(r)
    idx = np.asarray(sorted(set(int(i) for i in visual)), dtype=np.int64)
    if idx.size == 0:
        return 0.0
    return float(r[idx].sum())


def attention_entropy(row) -> float:
    """Shannon entropy in nats; entries below 1e-15 count as exact zeros."""
    r = _row(row)
    if (r < 0).any():
        raise ValueError("attention row has a negative entry")
    p = r[r >= ZERO_ENTRY]
    return float(-(p * np.log(p)).sum())


def renormalized_prune(row, prune) -> np.ndarray:
    """Drop positions ``prune`` and rescale the survivors to sum to one."""
    r = _row(row)
    drop = set(int(i) for i in prune)
    keep = np.array([i for i in range(r.size) if i not in drop], dtype=np.int64)
    if keep.size == 0:
        raise ContractError("prune set removes every position")
    if keep.size == r.size:
        return r.copy()
    kept = r[keep]
    mass = kept.sum()
    if mass < 1e-12:
        raise NumericError(f"survivor mass {mass!r} too small to renormalize")
    return kept / mass


def attention_variance(row) -> float:
    """Population variance (divide by the row length)."""
    r = _row(row)
    return float(np.mean((r - r.mean()) ** 2))


def modality_allocation(row, visual, text) -> tuple[float, float]:
    """(alpha, beta): total mass on visual and on text positions."""
    r = _row(row)
    v, t = set(int(i) for i in visual), set(int(i) for i in text)
    if v & t:
        raise ContractError("visual and text position sets overlap")
    if v | t != set(range(r.size)):
        raise ContractError("visual and text sets must partition the row")
    alpha = float(r[sorted(v)].sum()) if v else 0.0
    beta = float(r[sorted(t)].sum()) if t else 0.0
    return alpha, beta


def row_metrics(row, n_visual_in_row: int) -> dict[str, float]:
    """All scalar statistics of one row whose first ``n_visual_in_row`` keys are visual."""
    r = _row(row)
    alpha = float(r[:n_visual_in_row].sum())
    beta = float(r[n_visual_in_row:].sum())
    return {
        "entropy": attention_entropy(r),
        "variance": attention_variance(r),
        "alpha": alpha,
        "beta": beta,
        "dvis": alpha,
    }


# --- paired report --------------------------------------------------------

@dataclass
class LayerSummary:
    """Means over the query positions compared at one layer."""

    layer: int
    n_rows: int
    means: dict[str, dict[str, float]]  # variant -> metric -> mean
    target_dvis: dict[str, float]  # variant -> visual mass of the final position's row
    variance_up_rate: float  # fraction of rows where renormalized variance >= pre variance

    def delta(self, metric: str, variant: str = "renorm") -> float:
        return self.means[variant][metric] - self.means["pre"][metric]


@dataclass
class AttentionReport:
    n_visual: int
    layers: list[LayerSummary] = field(default_factory=list)
    # per layer: arrays of shape (rows, len(METRICS)) for each variant
    rows: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    queries: dict[int, np.ndarray] = field(default_factory=dict)

    def layer(self, l: int) -> LayerSummary:
        for s in self.layers:
            if s.layer == l:
                return s
        raise KeyError(l)

    def aggregate(self, metric: str, variant: str) -> float:
        """Row-weighted mean over every layer."""
        total = sum(s.means[variant][metric] * s.n_rows for s in self.layers)
        n = sum(s.n_rows for s in self.layers)
        return total / n if n else 0.0

    def to_csv(self) -> str:
        return report_to_csv(self)


def _rows_for(attn_layer: np.ndarray, alive: np.ndarray, queries: np.ndarray, n_visual: int,
              removed: set[int] | None = None) -> np.ndarray:
    """Head-averaged rows at original query positions ``queries``.

    With ``removed`` the row is the renormalized counterfactual that drops
    those original key positions.
    """
    where = {int(p): i for i, p in enumerate(alive)}
    mean_attn = attn_layer.mean(axis=0)
    out = np.zeros((len(queries), len(METRICS)))
    for k, q in enumerate(queries):
        i = where[int(q)]
        row = mean_attn[i, :i + 1]
        keys = alive[:i + 1]
        if removed:
            drop = [j for j, p in enumerate(keys) if int(p) in removed]
            row = renormalized_prune(row, drop)
            keys = np.array([p for p in keys if int(p) not in removed])
        nv = int((keys < n_visual).sum())
        m = row_metrics(row, nv)
        out[k] = [m[name] for name in METRICS]
    return out


def report(trace_pre, trace_post, n_visual: int, record: PruneRecord | None = None) -> AttentionReport:
    """Compare a baseline trace with a pruned trace of the same stream.

    Variants per layer and query: ``pre`` (baseline row), ``renorm`` (the
    baseline row with every key pruned up to and including this layer
    removed, then renormalized) and ``post`` (the pruned run's own row).
    Rows are head-averaged.  Queries are the original positions still
    present after this layer's pruning.
    """
    n_layers = len(trace_pre.attention)
    if len(trace_post.attention) != n_layers:
        raise ContractError("traces have different layer counts")
    if not np.array_equal(trace_pre.alive[0], trace_post.alive[0]):
        raise ContractError("traces come from different streams")
    for a in trace_pre.alive:
        if not np.array_equal(a, trace_pre.alive[0]):
            raise ContractError("baseline trace must be unpruned")
    length = len(trace_pre.alive[0])
    rep = AttentionReport(n_visual)
    for l in range(n_layers):
        removed = record.pruned_through(l) if record is not None else set()
        alive_post = trace_post.alive[l]
        if not set(int(p) for p in alive_post) <= set(range(length)):
            raise ContractError("pruned trace refers to positions outside the stream")
        queries = np.array([p for p in alive_post if int(p) not in removed], dtype=np.int64)
        pre = _rows_for(trace_pre.attention[l], trace_pre.alive[l], queries, n_visual)
        renorm = _rows_for(trace_pre.attention[l], trace_pre.alive[l], queries, n_visual, removed)
        post = _rows_for(trace_post.attention[l], alive_post, queries, n_visual)
        rep.rows[l] = {"pre": pre, "renorm": renorm, "post": post}
        rep.queries[l] = queries
        means = {v: {m: float(arr[:, j].mean()) for j, m in enumerate(METRICS)}
                 for v, arr in rep.rows[l].items()}
        dvis = METRICS.index("dvis")
        target = {v: float(arr[-1, dvis]) for v, arr in rep.rows[l].items()}
        var = METRICS.index("variance")
        up = float(np.mean(renorm[:, var] >= pre[:, var] - 1e-15))
        rep.layers.append(LayerSummary(l, len(queries), means, target, up))
    return rep


# --- CSV ------------------------------------------------------------------

SCHEMA = "# schema=prunevis.v1"
REPORT_COLUMNS = ("layer", "metric", "variant", "value")


def report_to_csv(rep: AttentionReport) -> str:
    """One row per layer x metric x variant with the per-layer mean."""
    buf = io.StringIO()
    buf.write(SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for s in rep.layers:
        for m in METRICS:
            for v in VARIANTS:
                w.writerow([s.layer, m, v, repr(s.means[v][m])])
        for v in VARIANTS:
            w.writerow([s.layer, "target_dvis", v, repr(s.target_dvis[v])])
        w.writerow([s.layer, "variance_up_rate", "renorm", repr(s.variance_up_rate)])
        w.writerow([s.layer, "n_rows", "pre", s.n_rows])
    return buf.getvalue()


def report_from_csv(text: str) -> dict[tuple[int, str, str], float]:
    """Parse :func:`report_to_csv` output into {(layer, metric, variant): value}."""
    lines = text.splitlines()
    if not lines or lines[0] != SCHEMA:
        raise ContractError("missing or unknown schema header")
    reader = csv.reader(lines[1:])
    header = next(reader)
    if tuple(header) != REPORT_COLUMNS:
        raise ContractError(f"unexpected columns {header}")
    out = {}
    for layer, metric, variant, value in reader:
        v = float(value)
        if not math.isfinite(v):
            raise ContractError("non-finite value in report")
        out[(int(layer), metric, variant)] = v
    return out
