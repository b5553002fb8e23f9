"""Decoder-only transformer over a visual-token prefix followed by text.

The hidden sequence is ``[visual | text]`` under one causal mask.  Every
layer's post-softmax attention is kept as an explicit tape node so that
gradients of the loss with respect to attention weights are available.
When a :class:`~prunevis.pruning.PruneConfig` is given, text rows are
physically removed from the hidden state after each pruning layer.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Tensor
from .pruning import (
    LayerPrune,
    PruneConfig,
    PruneRecord,
    Strategy,
    apply_prune,
    plan_layer_budget,
    random_prune_set,
    select_prune_set,
    token_scores,
)
from .task import Category, Sample, Segment, VocabLayout

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    vocab_size: int = 512
    n_visual: int = 16
    feature_dim: int = 40
    max_text_len: int = 360
    mlp_ratio: int = 4
    seed: int = 0
    init_std: float = 0.1

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ContractError("d_model must equal n_heads * d_head")
        if self.n_layers < 2:
            raise ContractError("need at least two layers")
        if self.n_visual < 1:
            raise ContractError("need at least one visual token")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenStream:
    visual_features: np.ndarray  # (n_visual, feature_dim)
    text_ids: list[int]
    segments: list[Segment]  # per text position
    categories: list[Category] | None = None

    def __post_init__(self):
        if len(self.segments) != len(self.text_ids):
            raise ContractError("one segment label per text token required")
        if Segment.VISUAL in self.segments:
            raise ContractError("visual segment labels belong to the prefix only")
        q = [i for i, s in enumerate(self.segments) if s is Segment.QUESTION]
        if not q or q != list(range(q[0], q[-1] + 1)):
            raise ContractError("exactly one contiguous question span required")

    @property
    def n_visual(self) -> int:
        return self.visual_features.shape[0]

    @property
    def question_positions(self) -> list[int]:
        """Original (sequence-level) positions of the question span."""
        return [self.n_visual + i for i, s in enumerate(self.segments) if s is Segment.QUESTION]

    @property
    def length(self) -> int:
        return self.n_visual + len(self.text_ids)

    def extended(self, token: int) -> "TokenStream":
        cats = None if self.categories is None else self.categories + [None]
        return TokenStream(self.visual_features, self.text_ids + [int(token)],
                           self.segments + [Segment.ANSWER], cats)


def stream_from_sample(sample: Sample) -> TokenStream:
    return TokenStream(sample.visual_features, list(sample.text_ids), list(sample.segments),
                       list(sample.categories))


@dataclass
class ForwardTrace:
    attention: list[np.ndarray]  # per layer, (H, n_l, n_l)
    alive: list[np.ndarray]  # per layer, alive index -> original position
    logits: np.ndarray

    def head(self, layer: int, h: int) -> np.ndarray:
        return self.attention[layer][h]


ModelParams = dict[str, Tensor]


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.mlp_ratio * cfg.d_model
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_text_len, d),
        "vis_proj.w": (cfg.feature_dim, d),
        "vis_proj.b": (d,),
    }
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "readout.w": (d, cfg.vocab_size),
                   "readout.b": (cfg.vocab_size,)})
    return shapes


def init_params(cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            value = np.ones(shape)
        elif leaf.startswith("b") or name.endswith(".b"):
            value = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            value = rng.normal(0.0, cfg.init_std, shape)
        else:
            fan_in = shape[0]
            value = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
            if leaf in ("wo", "w2"):
                value /= math.sqrt(2 * cfg.n_layers)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


# --- core computation -----------------------------------------------------

AttnHook = Callable[[int, np.ndarray], np.ndarray]


def _check_stream(cfg: ModelConfig, stream: TokenStream):
    if stream.visual_features.shape != (cfg.n_visual, cfg.feature_dim):
        raise ContractError(f"visual features must be {(cfg.n_visual, cfg.feature_dim)}, "
                            f"got {stream.visual_features.shape}")
    if len(stream.text_ids) > cfg.max_text_len:
        raise ContractError(f"text length {len(stream.text_ids)} exceeds {cfg.max_text_len}")
    ids = np.asarray(stream.text_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError("text id outside the vocabulary")


def _embed(params: ModelParams, feats: np.ndarray, ids: np.ndarray, offsets=None) -> Tensor:
    """feats (B, n, F), ids (B, T) -> hidden (B, n + T, d).

    ``offsets`` (B,) shifts each row's text positions; used in training only.
    """
    vis = ad.add(ad.matmul(Tensor(feats), params["vis_proj.w"]), params["vis_proj.b"])
    pos = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
    if offsets is not None:
        pos = pos + np.asarray(offsets, dtype=np.int64)[:, None]
    txt = ad.add(ad.embedding(params["tok_emb"], ids), ad.embedding(params["pos_emb"], pos))
    return ad.concat([vis, txt], axis=1)


def embed(params: ModelParams, cfg: ModelConfig, stream: TokenStream) -> np.ndarray:
    """Hidden states (n_visual + text length, d) entering the first layer."""
    _check_stream(cfg, stream)
    h = _embed(params, stream.visual_features[None], np.asarray(stream.text_ids)[None])
    return h.data[0]


def _split_heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    b, n, _ = x.shape
    return ad.transpose(ad.reshape(x, (b, n, cfg.n_heads, cfg.d_head)), (0, 2, 1, 3))


def _attention(params, cfg, l: int, h: Tensor, hook: AttnHook | None, tape: Tape | None):
    p = f"layer{l}."
    x = ad.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])
    q = _split_heads(ad.add(ad.matmul(x, params[p + "wq"]), params[p + "bq"]), cfg)
    k = _split_heads(ad.add(ad.matmul(x, params[p + "wk"]), params[p + "bk"]), cfg)
    v = _split_heads(ad.add(ad.matmul(x, params[p + "wv"]), params[p + "bv"]), cfg)
    n = h.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.d_head))
    attn = ad.masked_row_softmax(scores, ad.causal_mask(n))
    if hook is not None:
        # replace the attention values while keeping the node differentiable w.r.t. itself
        attn = Tensor(hook(l, attn.data.copy()), requires_grad=tape is not None)
    if tape is not None:
        tape.capture(f"attn{l}", attn)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (h.shape[0], n, cfg.d_model))
    return ad.add(ad.matmul(ctx, params[p + "wo"]), params[p + "bo"]), attn


def _block(params, cfg, l: int, h: Tensor, hook=None, tape=None):
    a, attn = _attention(params, cfg, l, h, hook, tape)
    h = ad.add(h, a)
    p = f"layer{l}."
    x = ad.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
    x = ad.gelu(ad.add(ad.matmul(x, params[p + "w1"]), params[p + "b1"]))
    x = ad.add(ad.matmul(x, params[p + "w2"]), params[p + "b2"])
    return ad.add(h, x), attn


def _readout(params, h_last: Tensor) -> Tensor:
    x = ad.layer_norm(h_last, params["ln_f.g"], params["ln_f.b"])
    return ad.add(ad.matmul(x, params["readout.w"]), params["readout.b"])


@dataclass
class _PrunePlan:
    layers: tuple[int, ...]
    budget: list[int]
    strategy: Strategy
    protected: set[int]
    rng: np.random.Generator | None
    forced: dict[int, list[int]] | None = None


def _make_plan(cfg: ModelConfig, stream: TokenStream, prune: PruneConfig | None,
               forced: PruneRecord | None) -> _PrunePlan | None:
    # the final position produces the answer logits and is never removed
    protected = {stream.length - 1}
    if forced is not None:
        return _PrunePlan(tuple(lp.layer for lp in forced.layers), [], Strategy.MAX_POOL,
                          protected, None, {lp.layer: list(lp.positions) for lp in forced.layers})
    if prune is None:
        return None
    layers = prune.resolved_layers(cfg.n_layers)
    budget = plan_layer_budget(prune, len(stream.text_ids), cfg.n_layers)
    if prune.protect_question:
        protected |= set(stream.question_positions)
    rng = np.random.default_rng(prune.seed) if prune.strategy is Strategy.RANDOM else None
    return _PrunePlan(layers, budget, prune.strategy, protected, rng)


def _prune_step(plan: _PrunePlan, l: int, h: Tensor, alive: np.ndarray, attn: np.ndarray,
                n_visual: int, record: PruneRecord):
    if plan.forced is not None:
        targets = set(plan.forced.get(l, []))
        if targets & plan.protected or any(p < n_visual for p in targets):
            raise ContractError("forced prune set touches a protected or visual position")
        drop = [i for i, p in enumerate(alive) if p in targets]
        if len(drop) != len(targets):
            raise ContractError("forced prune set names positions that are not alive")
        scores = token_scores(attn)
    else:
        k = plan.budget[plan.layers.index(l)]
        candidates = [i for i, p in enumerate(alive) if p >= n_visual and p not in plan.protected]
        if plan.strategy is Strategy.RANDOM:
            drop = random_prune_set(plan.rng, k, candidates)
            scores = np.zeros(len(alive))
        else:
            scores = token_scores(attn, plan.strategy)
            drop = select_prune_set(scores, k, candidates=candidates, positions=alive)
    record.layers.append(LayerPrune(l, [int(alive[i]) for i in drop], [float(scores[i]) for i in drop]))
    return apply_prune(h, alive, drop, n_visual)


def _forward(params: ModelParams, cfg: ModelConfig, stream: TokenStream, prune: PruneConfig | None,
             forced: PruneRecord | None = None, tape: Tape | None = None, hook: AttnHook | None = None):
    _check_stream(cfg, stream)
    plan = _make_plan(cfg, stream, prune, forced)
    record = PruneRecord(cfg.n_visual, len(stream.text_ids))
    h = _embed(params, stream.visual_features[None], np.asarray(stream.text_ids)[None])
    alive = np.arange(stream.length)
    attentions, alives = [], []
    for l in range(cfg.n_layers):
        h, attn = _block(params, cfg, l, h, hook, tape)
        attentions.append(attn.data[0])
        alives.append(alive)
        if plan is not None and l in plan.layers:
            h, alive = _prune_step(plan, l, h, alive, attn.data[0], cfg.n_visual, record)
    if alive[-1] != stream.length - 1:
        raise ContractError("final position was pruned")
    logits = _readout(params, ad.take(h, [h.shape[1] - 1], axis=1))
    return logits, ForwardTrace(attentions, alives, logits.data[0, 0].copy()), record


def forward(params: ModelParams, cfg: ModelConfig, stream: TokenStream, prune: PruneConfig | None = None,
            forced: PruneRecord | None = None) -> tuple[np.ndarray, ForwardTrace, PruneRecord]:
    """Logits at the final alive position, the attention trace and the pruning log."""
    logits, trace, record = _forward(params, cfg, stream, prune, forced)
    return trace.logits, trace, record


def greedy_decode(params: ModelParams, cfg: ModelConfig, stream: TokenStream,
                  prune: PruneConfig | None = None, max_steps: int = 1,
                  stop_token: int | None = VocabLayout.EOS) -> list[int]:
    """Append argmax tokens; prefill pruning decisions are replayed on later steps."""
    if max_steps < 1:
        raise ContractError("max_steps must be >= 1")
    logits, _, record = forward(params, cfg, stream, prune)
    out = [int(np.argmax(logits))]
    cur = stream
    while len(out) < max_steps and out[-1] != stop_token:
        cur = cur.extended(out[-1])
        logits, _, _ = forward(params, cfg, cur, forced=record if prune is not None else None)
        out.append(int(np.argmax(logits)))
    return out


def attention_gradients(params: ModelParams, cfg: ModelConfig, stream: TokenStream, answer_id: int,
                        prune: PruneConfig | None = None, forced: PruneRecord | None = None,
                        hook: AttnHook | None = None):
    """Gradients of the answer cross-entropy w.r.t. every layer's attention.

    Returns ``(grads, trace, record, loss)`` with ``grads[l]`` shaped like
    ``trace.attention[l]``.
    """
    with Tape() as tape:
        logits, trace, record = _forward(params, cfg, stream, prune, forced, tape=tape, hook=hook)
        loss = ad.cross_entropy(ad.reshape(logits, (1, cfg.vocab_size)), [answer_id])
    grads = ad.backward(tape, loss)
    out = []
    for l in range(cfg.n_layers):
        node = tape.captured[f"attn{l}"]
        out.append(grads.get(node.id, np.zeros(node.shape))[0])
    return out, trace, record, loss.item()


def loss_value(params: ModelParams, cfg: ModelConfig, stream: TokenStream, answer_id: int,
               hook: AttnHook | None = None) -> float:
    logits, _, _ = _forward(params, cfg, stream, None, hook=hook)
    return ad.cross_entropy(ad.reshape(logits, (1, cfg.vocab_size)), [answer_id]).item()


# --- training -------------------------------------------------------------

def collate(streams: Sequence[TokenStream]):
    """Right-pad text ids; causal masking keeps padding invisible to real positions."""
    t = max(len(s.text_ids) for s in streams)
    ids = np.zeros((len(streams), t), dtype=np.int64)
    for i, s in enumerate(streams):
        ids[i, :len(s.text_ids)] = s.text_ids
    feats = np.stack([s.visual_features for s in streams])
    last = np.array([s.length - 1 for s in streams])
    return feats, ids, last


def batch_loss(params: ModelParams, cfg: ModelConfig, streams: Sequence[TokenStream],
               answers: Sequence[int], offsets=None) -> Tensor:
    for s in streams:
        _check_stream(cfg, s)
    feats, ids, last = collate(streams)
    if offsets is not None and (np.min(offsets) < 0 or np.max(offsets) + ids.shape[1] > cfg.max_text_len):
        raise ContractError("position offsets run past the positional table")
    h = _embed(params, feats, ids, offsets)
    n = h.shape[1]
    if n > cfg.n_visual + cfg.max_text_len:
        raise ContractError("sequence too long")
    for l in range(cfg.n_layers):
        h, _ = _block(params, cfg, l, h)
    logits = _readout(params, ad.take_rows(h, last))
    return ad.cross_entropy(logits, answers)


def batch_logits(params: ModelParams, cfg: ModelConfig, streams: Sequence[TokenStream]) -> np.ndarray:
    """Unpruned logits for several streams at once (inference only)."""
    feats, ids, last = collate(streams)
    h = _embed(params, feats, ids)
    for l in range(cfg.n_layers):
        h, _ = _block(params, cfg, l, h)
    return _readout(params, ad.take_rows(h, last)).data


@dataclass
class AdamState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def train_step(params: ModelParams, cfg: ModelConfig, batch: Sequence[tuple[TokenStream, int]],
               opt: AdamState, lr: float | None = None, offsets=None) -> float:
    """One Adam update on the answer cross-entropy; returns the pre-update loss.

    ``params`` is updated in place (the dict is rebound to new tensors).
    """
    if not batch:
        raise ContractError("empty batch")
    streams, answers = zip(*batch)
    with Tape() as tape:
        loss = batch_loss(params, cfg, streams, answers, offsets)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at step {opt.step}")
    grads = ad.backward(tape, loss)
    g = {name: grads.get(t.id, np.zeros(t.shape)) for name, t in params.items()}
    norm = math.sqrt(sum(float((x * x).sum()) for x in g.values()))
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at step {opt.step}, loss {value:.4f}")
    if opt.clip_norm and norm > opt.clip_norm:
        g = {k: x * (opt.clip_norm / norm) for k, x in g.items()}
    lr = opt.lr if lr is None else lr
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    for name, t in params.items():
        m = opt.m.get(name, 0.0) * b1 + (1 - b1) * g[name]
        v = opt.v.get(name, 0.0) * b2 + (1 - b2) * g[name] ** 2
        opt.m[name], opt.v[name] = m, v
        if lr == 0.0:
            continue
        mhat = m / (1 - b1 ** opt.step)
        vhat = v / (1 - b2 ** opt.step)
        params[name] = Tensor(t.data - lr * mhat / (np.sqrt(vhat) + opt.eps), requires_grad=True, name=name)
    return value


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(path: str | Path, cfg: ModelConfig, params: ModelParams, meta: dict | None = None) -> None:
    """Write an ``.npz``-compatible zip with fixed timestamps (byte-reproducible)."""
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": cfg.to_dict(), "meta": meta or {}},
                        sort_keys=True)
    members = {"__header__": np.frombuffer(header.encode(), dtype=np.uint8)}
    members.update({name: params[name].data for name in sorted(params)})
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in members.items():
            raw = io.BytesIO()
            np.lib.format.write_array(raw, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), raw.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None):
    """Returns ``(config, params, meta)``; rejects a config that differs from ``expected``."""
    try:
        with np.load(path) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            arrays = {k: z[k] for k in z.files if k != "__header__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    cfg = ModelConfig(**header["config"])
    if expected is not None and expected != cfg:
        raise CheckpointError("checkpoint config does not match the requested model config")
    shapes = _param_shapes(cfg)
    if set(arrays) != set(shapes) or any(arrays[k].shape != shapes[k] for k in shapes):
        raise CheckpointError("checkpoint tensors do not match their config")
    params = {k: Tensor(arrays[k], requires_grad=True, name=k) for k in shapes}
    return cfg, params, header.get("meta", {})
