"""Experiment orchestration: training, evaluation matrices and their CSV tables.

Every table is written with a schema comment line, a header and rows in a
canonical order, with floats rendered by ``repr`` so that reruns of the
same configuration produce identical bytes.  Wall-clock timings live in
separate files so they never disturb that property.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .flow import SCORE_NAMES, flow_for_stream, flow_to_csv
from .metrics import SCHEMA, ZERO_ENTRY
from .model import (
    AdamState,
    CheckpointError,
    ModelConfig,
    TrainingError,
    batch_logits,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    stream_from_sample,
    train_step,
)
from .pruning import PruneConfig, PruneRecord, Strategy
from .task import (
    LENGTH_BINS,
    Category,
    ManifestEntry,
    Sample,
    TargetSize,
    TaskSpec,
    blank_image_variant,
    generate_sample,
    make_split,
    read_manifest,
)

RATE_GRID = tuple(round(0.05 * i, 2) for i in range(11))
SWEEP_AXES = ("rate", "layers", "layer_count", "strategy")
CATEGORIES = tuple(c.value for c in Category)
N_DECILES = 10


class ConfigError(ValueError):
    pass


class GateError(RuntimeError):
    """A run finished but missed the threshold it was asked to reach."""


# --- configuration --------------------------------------------------------

@dataclass
class TrainConfig:
    max_steps: int = 2500
    min_steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 100
    bin_weights: tuple[float, ...] = (0.6, 0.4, 0.0, 0.0, 0.0)
    position_jitter: bool = True  # random text-position offsets per training sequence
    blank_fraction: float = 0.1
    prior_range: tuple[float, float] = (0.0, 1.0)
    eval_every: int = 250
    eval_n: int = 200
    target_accuracy: float = 0.9
    data_seed: int = 10_000

    def __post_init__(self):
        self.bin_weights = tuple(float(w) for w in self.bin_weights)
        self.prior_range = tuple(float(x) for x in self.prior_range)
        if len(self.bin_weights) != len(LENGTH_BINS) or abs(sum(self.bin_weights) - 1) > 1e-9:
            raise ConfigError("bin_weights needs one weight per length bin, summing to 1")
        if self.max_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("max_steps, batch_size and eval_every must be positive")
        if not 0 <= self.min_steps <= self.max_steps:
            raise ConfigError("min_steps must lie in [0, max_steps]")


@dataclass
class DataConfig:
    bins: tuple[int, ...] = LENGTH_BINS
    target_sizes: tuple[str, ...] = ("Large", "Medium", "Small")
    prior_strength: float = 0.3
    n_per_bin: int = 200
    seed: int = 77

    def __post_init__(self):
        self.bins = tuple(int(b) for b in self.bins)
        self.target_sizes = tuple(TargetSize(s).value for s in self.target_sizes)
        if not self.bins or any(b not in LENGTH_BINS for b in self.bins):
            raise ConfigError(f"bins must be drawn from {LENGTH_BINS}")
        if self.n_per_bin < len(self.target_sizes):
            raise ConfigError("n_per_bin must cover every target size")


@dataclass
class MetricsToggles:
    attention: bool = True
    retention: bool = True
    flow: bool = False
    wall_time: bool = True


@dataclass
class SweepConfig:
    axis: str = "rate"
    grid: list = field(default_factory=lambda: list(RATE_GRID))
    base: dict = field(default_factory=lambda: {"strategy": "MaxPool", "rate": 0.3})

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {SWEEP_AXES}")
        if not self.grid:
            raise ConfigError("sweep grid is empty")


@dataclass
class TimingConfig:
    repetitions: int = 5
    bin: int = 320
    n_samples: int = 8
    prune: dict = field(default_factory=lambda: {"strategy": "MaxPool", "rate": 0.3})

    def __post_init__(self):
        if self.repetitions < 5:
            raise ConfigError("timing needs at least 5 repetitions")


@dataclass
class FlowConfig:
    sample_ids: list = field(default_factory=lambda: list(range(50)))
    bin: int = 320
    prune: dict = field(default_factory=lambda: {"strategy": "MaxPool", "rate": 0.3})


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    checkpoint: str = "checkpoints/default.npz"
    manifest: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    prune_configs: list[PruneConfig] = field(default_factory=list)
    metrics: MetricsToggles = field(default_factory=MetricsToggles)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    fit_points: list | None = None
    retention_prune: dict = field(default_factory=lambda: {"strategy": "MaxPool", "rate": 0.3})

    _SECTIONS = {
        "model": ModelConfig, "train": TrainConfig, "data": DataConfig, "metrics": MetricsToggles,
        "sweep": SweepConfig, "timing": TimingConfig, "flow": FlowConfig,
    }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__ if not f.startswith("_")}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key, typ in cls._SECTIONS.items():
                if key in d:
                    d[key] = typ(**d[key])
            if "prune_configs" in d:
                d["prune_configs"] = [PruneConfig.from_dict(p) for p in d["prune_configs"]]
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if not k.startswith("_")}
        for key in self._SECTIONS:
            d[key] = asdict(d[key])
        d["prune_configs"] = [p.to_dict() for p in self.prune_configs]
        return d


# --- CSV helpers ----------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (list, tuple)):
        return "-".join(str(v) for v in x)
    return str(x)


def write_table(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_table(text: str) -> list[dict[str, str]]:
    lines = text.splitlines()
    if not lines or lines[0] != SCHEMA:
        raise ContractError("missing or unknown schema header")
    return list(csv.DictReader(lines[1:]))


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# --- data -----------------------------------------------------------------

def eval_entries(data: DataConfig, bins: Sequence[int] | None = None) -> list[ManifestEntry]:
    """Evaluation manifest: per bin, ``n_per_bin`` samples spread over the target sizes."""
    specs, counts = [], []
    sizes = data.target_sizes
    for b in bins or data.bins:
        for i, s in enumerate(sizes):
            specs.append(TaskSpec(length_bin=b, target_size=TargetSize(s), prior_strength=data.prior_strength))
            counts.append(data.n_per_bin // len(sizes) + (1 if i < data.n_per_bin % len(sizes) else 0))
    _, evals = make_split(specs, counts, data.seed)
    return evals


def load_entries(cfg: ExperimentConfig) -> list[ManifestEntry]:
    if cfg.manifest is None:
        return eval_entries(cfg.data)
    try:
        entries = read_manifest(cfg.manifest)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read manifest {cfg.manifest}: {exc}") from exc
    if not entries:
        raise ConfigError("manifest is empty")
    return entries


def group_by_bin(samples: Sequence[Sample]) -> dict[int, list[Sample]]:
    out: dict[int, list[Sample]] = {}
    for s in samples:
        out.setdefault(s.spec.length_bin, []).append(s)
    return dict(sorted(out.items()))


def sample_prune(prune: PruneConfig | None, sample: Sample) -> PruneConfig | None:
    """Per-sample Random seed so that draws differ across samples but not across runs."""
    if prune is None or prune.strategy is not Strategy.RANDOM:
        return prune
    return replace(prune, seed=int(np.random.SeedSequence([prune.seed, sample.index]).generate_state(1)[0]))


# --- per-sample evaluation --------------------------------------------------

@dataclass
class SampleResult:
    correct: bool
    prediction: int
    alpha: float  # mean visual mass over every layer and query row
    entropy: float  # mean row entropy over every layer and query row
    record: PruneRecord
    alive_counts: list[int]


def trace_summary(trace, n_visual: int) -> tuple[float, float]:
    """Mean visual mass and mean entropy (nats) over all layers and rows, head-averaged."""
    alphas, ents = [], []
    for attn, alive in zip(trace.attention, trace.alive):
        rows = attn.mean(axis=0)
        vis = np.asarray(alive) < n_visual
        alphas.append(rows[:, vis].sum(axis=1))
        p = np.where(rows >= ZERO_ENTRY, rows, 1.0)
        ents.append(-(rows * np.log(p)).sum(axis=1, where=rows >= ZERO_ENTRY))
    return float(np.mean(np.concatenate(alphas))), float(np.mean(np.concatenate(ents)))


def evaluate_sample(params, mcfg: ModelConfig, sample: Sample, prune: PruneConfig | None) -> SampleResult:
    logits, trace, record = forward(params, mcfg, stream_from_sample(sample), sample_prune(prune, sample))
    pred = int(np.argmax(logits))
    alpha, ent = trace_summary(trace, mcfg.n_visual)
    return SampleResult(pred == sample.answer_id, pred, alpha, ent, record, [len(a) for a in trace.alive])


def decile_of(text_index: int, text_len: int) -> int:
    return min(N_DECILES - 1, text_index * N_DECILES // text_len)


def pruned_breakdown(sample: Sample, record: PruneRecord, through_layer: int | None = None):
    """Counts of pruned text tokens by category and by position decile."""
    pruned = record.pruned if through_layer is None else sorted(record.pruned_through(through_layer))
    cats = dict.fromkeys(CATEGORIES, 0)
    decs = [0] * N_DECILES
    n = len(sample.text_ids)
    for p in pruned:
        j = p - record.n_visual
        cats[sample.categories[j].value] += 1
        decs[decile_of(j, n)] += 1
    return cats, decs


# --- result rows ------------------------------------------------------------

EVAL_COLUMNS = (
    ["bin", "group", "strategy", "rate", "layers", "protect_question", "n", "accuracy",
     "alpha_mean", "beta_mean", "alpha_delta", "entropy_delta", "mean_pruned"]
    + [f"pruned_{c}" for c in CATEGORIES]
    + [f"pruned_d{i}" for i in range(N_DECILES)]
)


@dataclass
class ResultRow:
    bin: int
    group: str
    config: PruneConfig | None
    n: int
    accuracy: float
    alpha_mean: float
    beta_mean: float
    alpha_delta: float
    entropy_delta: float
    mean_pruned: float
    pruned_by_category: dict[str, float]
    pruned_by_decile: list[float]
    wall_time: float = 0.0

    def cells(self, n_layers: int) -> list:
        c = self.config
        strategy = "None" if c is None else c.strategy.value
        rate = 0.0 if c is None else c.rate
        layers = [] if c is None else list(c.resolved_layers(n_layers))
        protect = False if c is None else c.protect_question
        return ([self.bin, self.group, strategy, rate, layers, protect, self.n, self.accuracy,
                 self.alpha_mean, self.beta_mean, self.alpha_delta, self.entropy_delta, self.mean_pruned]
                + [self.pruned_by_category[k] for k in CATEGORIES] + list(self.pruned_by_decile))


def aggregate(bin_: int, group: str, config, samples, results, baseline) -> ResultRow:
    n = len(results)
    cats = dict.fromkeys(CATEGORIES, 0.0)
    decs = np.zeros(N_DECILES)
    for s, r in zip(samples, results):
        c, d = pruned_breakdown(s, r.record)
        for k in cats:
            cats[k] += c[k] / n
        decs += np.asarray(d) / n
    alpha = float(np.mean([r.alpha for r in results]))
    return ResultRow(
        bin=bin_, group=group, config=config, n=n,
        accuracy=sum(r.correct for r in results) / n,
        alpha_mean=alpha, beta_mean=float(np.mean([1.0 - r.alpha for r in results])),
        alpha_delta=float(np.mean([r.alpha - b.alpha for r, b in zip(results, baseline)])),
        entropy_delta=float(np.mean([r.entropy - b.entropy for r, b in zip(results, baseline)])),
        mean_pruned=float(np.mean([r.record.total_pruned for r in results])),
        pruned_by_category=cats, pruned_by_decile=[float(x) for x in decs],
    )


class Evaluator:
    """Caches per-sample results so shared configurations are computed once."""

    def __init__(self, params, mcfg: ModelConfig):
        self.params, self.mcfg = params, mcfg
        self._cache: dict = {}

    def results(self, samples: Sequence[Sample], prune: PruneConfig | None, tag: str = "") -> list[SampleResult]:
        key_cfg = None if prune is None else json.dumps(prune.to_dict(), sort_keys=True)
        out = []
        for s in samples:
            key = (tag, s.spec, s.index, key_cfg)
            if key not in self._cache:
                self._cache[key] = evaluate_sample(self.params, self.mcfg, s, prune)
            out.append(self._cache[key])
        return out

    def rows(self, samples: Sequence[Sample], configs: Sequence[PruneConfig | None],
             by_size: bool = False) -> list[ResultRow]:
        rows = []
        for b, group in group_by_bin(samples).items():
            base = self.results(group, None)
            for cfg in configs:
                res = base if cfg is None else self.results(group, cfg)
                rows.append(aggregate(b, "All", cfg, group, res, base))
                if by_size:
                    for size in TargetSize:
                        idx = [i for i, s in enumerate(group) if s.spec.target_size is size]
                        if idx:
                            rows.append(aggregate(b, size.value, cfg, [group[i] for i in idx],
                                                  [res[i] for i in idx], [base[i] for i in idx]))
        return rows


def eval_table(rows: Sequence[ResultRow], n_layers: int) -> str:
    return write_table(EVAL_COLUMNS, [r.cells(n_layers) for r in rows])


def load_model(cfg: ExperimentConfig):
    try:
        mcfg, params, meta = load_checkpoint(cfg.checkpoint)
    except CheckpointError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {cfg.checkpoint}: {exc}") from exc
    return mcfg, params, meta


def _samples(cfg: ExperimentConfig) -> list[Sample]:
    return [e.sample() for e in load_entries(cfg)]


def cmd_eval(cfg: ExperimentConfig) -> Path:
    mcfg, params, _ = load_model(cfg)
    samples = _samples(cfg)
    ev = Evaluator(params, mcfg)
    configs = [None] + list(cfg.prune_configs)
    rows = ev.rows(samples, configs)
    out = Path(cfg.out)
    path = _write(out / "eval.csv", eval_table(rows, mcfg.n_layers))
    _write(out / "eval_by_size.csv",
           eval_table([r for r in ev.rows(samples, configs, by_size=True) if r.group != "All"], mcfg.n_layers))
    if cfg.metrics.wall_time:
        trows = []
        for b, group in group_by_bin(samples).items():
            for c in configs:
                t0 = time.perf_counter()
                for s in group:
                    evaluate_sample(params, mcfg, s, c)
                trows.append([b, "None" if c is None else c.label(), (time.perf_counter() - t0) / len(group)])
        _write(out / "eval_wall_time.csv", write_table(["bin", "config", "seconds_per_sample"], trows))
    return path


# --- language-prior probe -------------------------------------------------

PROBE_COLUMNS = ("bin", "n", "acc_image", "acc_blank", "both_correct", "only_with_image",
                 "only_without_image", "both_wrong")


def probe_rows(params, mcfg, samples: Sequence[Sample]) -> list[list]:
    rows = []
    for b, group in group_by_bin(samples).items():
        img = np.array([evaluate_sample(params, mcfg, s, None).correct for s in group])
        blank = np.array([evaluate_sample(params, mcfg, blank_image_variant(s), None).correct for s in group])
        n = len(group)
        rows.append([b, n, img.mean(), blank.mean(), (img & blank).sum() / n, (img & ~blank).sum() / n,
                     (~img & blank).sum() / n, (~img & ~blank).sum() / n])
    return rows


def cmd_probe_priors(cfg: ExperimentConfig) -> Path:
    mcfg, params, _ = load_model(cfg)
    rows = probe_rows(params, mcfg, _samples(cfg))
    return _write(Path(cfg.out) / "probe_priors.csv", write_table(PROBE_COLUMNS, rows))


# --- retention ------------------------------------------------------------

RETENTION_CAT_COLUMNS = ("layer", "category", "total", "retained", "fraction")
RETENTION_POS_COLUMNS = ("layer", "decile", "total", "retained", "fraction")


def retention_tables(samples: Sequence[Sample], records: Sequence[PruneRecord], layers: Sequence[int]):
    """Per pruning layer, retained fractions by category and by position decile."""
    cat_rows, pos_rows = [], []
    for l in layers:
        cat_tot = dict.fromkeys(CATEGORIES, 0)
        cat_kept = dict.fromkeys(CATEGORIES, 0)
        dec_tot = [0] * N_DECILES
        dec_kept = [0] * N_DECILES
        for s, rec in zip(samples, records):
            gone = rec.pruned_through(l)
            n = len(s.text_ids)
            for j, c in enumerate(s.categories):
                kept = (rec.n_visual + j) not in gone
                cat_tot[c.value] += 1
                cat_kept[c.value] += kept
                d = decile_of(j, n)
                dec_tot[d] += 1
                dec_kept[d] += kept
        for c in CATEGORIES:
            frac = cat_kept[c] / cat_tot[c] if cat_tot[c] else 1.0
            cat_rows.append([l, c, cat_tot[c], cat_kept[c], frac])
        for d in range(N_DECILES):
            frac = dec_kept[d] / dec_tot[d] if dec_tot[d] else 1.0
            pos_rows.append([l, d, dec_tot[d], dec_kept[d], frac])
    return cat_rows, pos_rows


def cmd_retention(cfg: ExperimentConfig) -> tuple[Path, Path]:
    mcfg, params, _ = load_model(cfg)
    prune = PruneConfig.from_dict(cfg.retention_prune)
    samples = _samples(cfg)
    ev = Evaluator(params, mcfg)
    records = [r.record for r in ev.results(samples, prune)]
    cat_rows, pos_rows = retention_tables(samples, records, prune.resolved_layers(mcfg.n_layers))
    out = Path(cfg.out)
    return (_write(out / "retention_category.csv", write_table(RETENTION_CAT_COLUMNS, cat_rows)),
            _write(out / "retention_position.csv", write_table(RETENTION_POS_COLUMNS, pos_rows)))


# --- sweeps ---------------------------------------------------------------

def layer_groups(n_layers: int) -> dict[str, tuple[int, ...]]:
    """Shallow / intermediate / deep thirds of the stack."""
    cuts = [round(n_layers * k / 3) for k in range(4)]
    names = ("shallow", "intermediate", "deep")
    return {names[i]: tuple(range(cuts[i], cuts[i + 1])) for i in range(3)}


def sweep_configs(axis: str, grid: Sequence, base: dict, n_layers: int) -> list[tuple[str, PruneConfig]]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not grid:
        raise ConfigError("sweep grid is empty")
    out = []
    groups = layer_groups(n_layers)
    for value in grid:
        d = dict(base)
        if axis == "rate":
            d["rate"] = float(value)
            key = repr(float(value))
        elif axis == "layers":
            d["layers"] = list(groups[value]) if isinstance(value, str) else [int(x) for x in value]
            key = value if isinstance(value, str) else "-".join(map(str, d["layers"]))
        elif axis == "layer_count":
            d["layers"] = list(range(int(value)))
            key = str(int(value))
        else:
            d["strategy"] = Strategy(value).value
            key = d["strategy"]
        out.append((key, PruneConfig.from_dict(d)))
    return out


SWEEP_COLUMNS = ["axis", "value"] + EVAL_COLUMNS


def _sort_value(axis: str, key: str):
    return float(key) if axis in ("rate", "layer_count") else key


def sweep_rows(ev: Evaluator, samples, axis: str, grid, base: dict, n_layers: int) -> list[list]:
    configs = sweep_configs(axis, grid, base, n_layers)
    rows = []
    for key, cfg in configs:
        for r in ev.rows(samples, [cfg]):
            rows.append([axis, key] + r.cells(n_layers))
    rows.sort(key=lambda row: (row[2], _sort_value(axis, row[1])))
    return rows


def cmd_sweep(cfg: ExperimentConfig) -> Path:
    mcfg, params, _ = load_model(cfg)
    samples = _samples(cfg)
    ev = Evaluator(params, mcfg)
    rows = sweep_rows(ev, samples, cfg.sweep.axis, cfg.sweep.grid, cfg.sweep.base, mcfg.n_layers)
    meta = {"axis": cfg.sweep.axis, "layer_groups": {k: list(v) for k, v in layer_groups(mcfg.n_layers).items()}}
    out = Path(cfg.out)
    _write(out / "sweep_meta.json", json.dumps(meta, sort_keys=True, indent=2) + "\n")
    path = _write(out / "sweep.csv", write_table(SWEEP_COLUMNS, rows))
    if cfg.sweep.axis == "rate":
        best = best_rates(_accuracy_grid(rows))
        _write(out / "best_rate.csv", write_table(["bin", "best_rate"], sorted(best.items())))
    return path


def _accuracy_grid(rows) -> dict[int, dict[float, float]]:
    acc: dict[int, dict[float, float]] = {}
    idx = SWEEP_COLUMNS.index("accuracy")
    for row in rows:
        acc.setdefault(int(row[2]), {})[float(row[1])] = float(row[idx])
    return acc


def best_rate(acc_by_rate: dict[float, float], window: int = 3) -> float:
    """Mean of the ``window`` adjacent grid rates with the highest mean accuracy.

    Ties go to the window with the smaller rates.
    """
    rates = sorted(acc_by_rate)
    if len(rates) < window:
        raise ContractError(f"need at least {window} rates, got {len(rates)}")
    best, best_acc = None, -math.inf
    for i in range(len(rates) - window + 1):
        w = rates[i:i + window]
        m = sum(acc_by_rate[r] for r in w) / window
        if m > best_acc + 1e-12:
            best, best_acc = w, m
    return sum(best) / window


def best_rates(acc: dict[int, dict[float, float]]) -> dict[int, float]:
    return {b: best_rate(a) for b, a in sorted(acc.items())}


# --- scaling law ----------------------------------------------------------

@dataclass
class ScalingFit:
    a: float  # constant
    b: float  # linear
    c: float  # quadratic
    residuals: list[float]
    r2: float

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.a + self.b * x + self.c * x * x


def fit_scaling_law(points) -> ScalingFit:
    """Least-squares fit ``y = a + b x + c x^2`` to (length, best rate) points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContractError("points must be (x, y) pairs")
    x, y = pts[:, 0], pts[:, 1]
    if len(np.unique(x)) < 3:
        raise ContractError("need at least 3 distinct lengths for a quadratic fit")
    # fit in centred, scaled coordinates for conditioning, then expand back
    mu = x.mean()
    s = np.abs(x - mu).max()
    u = (x - mu) / s
    coef, *_ = np.linalg.lstsq(np.stack([np.ones_like(u), u, u * u], axis=1), y, rcond=None)
    p0, p1, p2 = coef
    c = p2 / (s * s)
    b = p1 / s - 2 * p2 * mu / (s * s)
    a = p0 - p1 * mu / s + p2 * mu * mu / (s * s)
    fit = ScalingFit(float(a), float(b), float(c), [], 0.0)
    pred = p0 + p1 * u + p2 * u * u
    res = y - pred
    fit.residuals = [float(r) for r in res]
    ss_tot = float(((y - y.mean()) ** 2).sum())
    fit.r2 = 1.0 - float((res ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return fit


def cmd_fit_scaling(cfg: ExperimentConfig) -> Path:
    if cfg.fit_points is not None:
        points = cfg.fit_points
    else:
        path = Path(cfg.out) / "best_rate.csv"
        try:
            rows = read_table(path.read_text())
        except OSError as exc:
            raise ConfigError(f"no fit_points in config and cannot read {path}: {exc}") from exc
        points = [(float(r["bin"]), float(r["best_rate"])) for r in rows]
    fit = fit_scaling_law(points)
    rows = [["a", fit.a], ["b", fit.b], ["c", fit.c], ["r2", fit.r2]]
    rows += [[f"residual_{i}", r] for i, r in enumerate(fit.residuals)]
    return _write(Path(cfg.out) / "scaling_fit.csv", write_table(["name", "value"], rows))


# --- FLOPs and timing -----------------------------------------------------

def layer_flops(n: int, mcfg: ModelConfig) -> int:
    """Attention and MLP multiply-adds (x2) for one layer over ``n`` tokens."""
    d, h, dk, r = mcfg.d_model, mcfg.n_heads, mcfg.d_head, mcfg.mlp_ratio
    qkv = 3 * 2 * n * d * d
    scores = 2 * h * n * n * dk
    mix = 2 * h * n * n * dk
    proj = 2 * n * d * d
    mlp = 2 * 2 * n * d * (r * d)
    return qkv + scores + mix + proj + mlp


def forward_flops(alive_counts: Sequence[int], mcfg: ModelConfig) -> int:
    if len(alive_counts) != mcfg.n_layers:
        raise ContractError("need one alive count per layer")
    return sum(layer_flops(n, mcfg) for n in alive_counts)


TIMING_COLUMNS = ("bin", "config", "n_samples", "repetitions", "flops", "flops_ratio",
                  "median_seconds", "time_ratio")


def time_forwards(params, mcfg, samples, prune, repetitions: int) -> float:
    """Median over repetitions (after one warm-up) of the mean per-sample forward time."""
    streams = [stream_from_sample(s) for s in samples]
    for st in streams:
        forward(params, mcfg, st, prune)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for st in streams:
            forward(params, mcfg, st, prune)
        times.append((time.perf_counter() - t0) / len(streams))
    return float(np.median(times))


def timing_rows(params, mcfg, samples, prune: PruneConfig, repetitions: int) -> list[list]:
    if repetitions < 5:
        raise ContractError("timing needs at least 5 repetitions")
    base_flops = float(np.mean([forward_flops([mcfg.n_visual + len(s.text_ids)] * mcfg.n_layers, mcfg)
                                for s in samples]))
    pr_flops = float(np.mean([forward_flops(evaluate_sample(params, mcfg, s, prune).alive_counts, mcfg)
                              for s in samples]))
    # interleave the two measurements to share any drift in machine load
    t_base, t_pr = [], []
    for _ in range(2):
        t_base.append(time_forwards(params, mcfg, samples, None, repetitions))
        t_pr.append(time_forwards(params, mcfg, samples, prune, repetitions))
    tb, tp = min(t_base), min(t_pr)
    b = samples[0].spec.length_bin
    return [[b, "None", len(samples), repetitions, base_flops, 1.0, tb, 1.0],
            [b, prune.label(), len(samples), repetitions, pr_flops, pr_flops / base_flops, tp, tp / tb]]


def cmd_timing(cfg: ExperimentConfig) -> Path:
    mcfg, params, _ = load_model(cfg)
    tc = cfg.timing
    samples = [s for s in _samples(cfg) if s.spec.length_bin == tc.bin][:tc.n_samples]
    if not samples:
        raise ConfigError(f"no samples in bin {tc.bin}")
    rows = timing_rows(params, mcfg, samples, PruneConfig.from_dict(tc.prune), tc.repetitions)
    return _write(Path(cfg.out) / "timing.csv", write_table(TIMING_COLUMNS, rows))


# --- flow -----------------------------------------------------------------

def cmd_flow(cfg: ExperimentConfig) -> Path:
    mcfg, params, _ = load_model(cfg)
    fc = cfg.flow
    entries = [e for e in load_entries(cfg) if e.spec.length_bin == fc.bin]
    by_pos = {i: e for i, e in enumerate(entries)}
    missing = [i for i in fc.sample_ids if i not in by_pos]
    if missing:
        raise ConfigError(f"flow sample ids not in manifest: {missing[:5]}")
    prune = PruneConfig.from_dict(fc.prune)
    tables = []
    for i in fc.sample_ids:
        s = by_pos[i].sample()
        table, _, _ = flow_for_stream(params, mcfg, stream_from_sample(s), s.answer_id,
                                      sample_prune(prune, s), sample_key=(fc.bin, i))
        tables.append((str(i), table))
    out = Path(cfg.out)
    path = _write(out / "flow.csv", flow_to_csv(tables))
    summary = []
    for l in range(mcfg.n_layers):
        for name in SCORE_NAMES:
            b = float(np.mean([t.baseline[l][name] for _, t in tables]))
            p = float(np.mean([t.pruned[l][name] for _, t in tables]))
            summary.append([l, name, b, p, p - b])
    _write(out / "flow_mean.csv", write_table(["layer", "score", "baseline", "pruned", "delta"], summary))
    return path


# --- training -------------------------------------------------------------

TRAIN_LOG_COLUMNS = ("step", "bin", "loss", "lr", "eval_accuracy")


def lr_at(step: int, tc: TrainConfig) -> float:
    warm = min(1.0, (step + 1) / tc.warmup) if tc.warmup else 1.0
    return tc.lr * warm * 0.5 * (1.0 + math.cos(math.pi * step / tc.max_steps))


def training_batch(tc: TrainConfig, step: int, rng: np.random.Generator) -> tuple[int, list[Sample]]:
    b = LENGTH_BINS[int(rng.choice(len(LENGTH_BINS), p=tc.bin_weights))]
    sizes = list(TargetSize)
    batch = []
    for i in range(tc.batch_size):
        spec = TaskSpec(length_bin=b, target_size=sizes[int(rng.integers(len(sizes)))],
                        prior_strength=float(rng.uniform(*tc.prior_range)), seed=tc.data_seed)
        s = generate_sample(spec, step * tc.batch_size + i)
        if rng.random() < tc.blank_fraction:
            s = blank_image_variant(s)
        batch.append(s)
    return b, batch


def shortest_bin_accuracy(params, mcfg, data: DataConfig, n: int) -> float:
    d = replace(data, n_per_bin=n)
    samples = [e.sample() for e in eval_entries(d, bins=[min(LENGTH_BINS)])]
    correct = 0
    for i in range(0, len(samples), 50):
        chunk = samples[i:i + 50]
        logits = batch_logits(params, mcfg, [stream_from_sample(s) for s in chunk])
        correct += int((logits.argmax(axis=1) == [s.answer_id for s in chunk]).sum())
    return correct / len(samples)


def train(cfg: ExperimentConfig, log=None) -> tuple[dict, list[list]]:
    """Train from scratch; returns (params, log rows)."""
    tc = cfg.train
    if tc.data_seed == cfg.data.seed:
        raise ConfigError("training and evaluation data seeds must differ")
    mcfg = replace(cfg.model, seed=cfg.seed)
    params = init_params(mcfg)
    opt = AdamState(lr=tc.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    rows = []
    for step in range(tc.max_steps):
        b, batch = training_batch(tc, step, rng)
        lr = lr_at(step, tc)
        offsets = None
        if tc.position_jitter:
            room = mcfg.max_text_len - max(len(s.text_ids) for s in batch) + 1
            offsets = rng.integers(0, room, size=len(batch))
        loss = train_step(params, mcfg, [(stream_from_sample(s), s.answer_id) for s in batch], opt,
                          lr=lr, offsets=offsets)
        acc = ""
        if (step + 1) % tc.eval_every == 0 or step + 1 == tc.max_steps:
            acc = shortest_bin_accuracy(params, mcfg, cfg.data, tc.eval_n)
        rows.append([step, b, loss, lr, acc])
        if log is not None:
            log(rows[-1])
        if acc != "" and acc >= tc.target_accuracy and step + 1 >= tc.min_steps:
            break
    return params, rows


def cmd_train(cfg: ExperimentConfig, log=None) -> Path:
    tc = cfg.train
    params, rows = train(cfg, log)
    mcfg = replace(cfg.model, seed=cfg.seed)
    out = Path(cfg.out)
    _write(out / "train_log.csv", write_table(TRAIN_LOG_COLUMNS, rows))
    final = [r[4] for r in rows if r[4] != ""][-1]
    path = Path(cfg.checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, mcfg, params, {"steps": len(rows), "shortest_bin_accuracy": final,
                                         "train": asdict(tc)})
    if final < tc.target_accuracy:
        raise GateError(f"training stopped at the step cap with shortest-bin accuracy {final:.3f} "
                        f"< {tc.target_accuracy}")
    return path
