"""Synthetic visual-recall task with controllable context length.

A scene is a 4x4 grid of cells; each cell becomes one visual token whose
feature vector encodes (entity, attribute) as two one-hot blocks plus
bounded noise.  The question ``QRY ANS ENT`` names the queried entity in its
final position, and the answer attribute is only ever present in the image.

A language-prior channel ("cue" sentences ``ENT REL CUE .``) pairs the target
entity with descriptor words that imply an attribute.  With probability
``prior_strength`` every cue of a sample implies the true answer, otherwise
they all imply a decoy drawn uniformly from the attributes.  The number of
mentions grows with context length.  Distractor sentences describe things with adjectives that are
never answers, so the set of words absent from the context says nothing
about the answer.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LENGTH_BINS = (64, 128, 192, 256, 320)
GRID_CELLS = 16
MAX_CONTEXT_JITTER = 0.05
QUESTION_LEN = 3


class Category(str, enum.Enum):
    ENTITY = "Entity"
    ATTRIBUTE = "Attribute"
    RELATION = "Relation"
    FILLER = "Filler"


class TargetSize(str, enum.Enum):
    LARGE = "Large"
    MEDIUM = "Medium"
    SMALL = "Small"

    @property
    def cells(self) -> int:
        return {"Large": 8, "Medium": 4, "Small": 1}[self.value]


class Segment(str, enum.Enum):
    VISUAL = "Visual"
    CONTEXT = "Context"
    QUESTION = "Question"
    ANSWER = "Answer"


@dataclass(frozen=True)
class VocabLayout:
    """Contiguous id ranges for every token family.

    Specials come first: PAD, SEP (sentence end), EOS (answer terminator),
    then the two question markers QRY and ANS.
    """

    n_entities: int = 32
    n_attributes: int = 8
    cues_per_attribute: int = 4
    n_adjectives: int = 16  # descriptive words that are never answers
    n_relations: int = 32
    vocab_size: int = 512

    PAD = 0
    SEP = 1
    EOS = 2
    QRY = 3
    ANS = 4
    N_SPECIAL = 5

    def __post_init__(self):
        if self.filler_start >= self.vocab_size:
            raise ValueError("vocab_size too small for the requested layout")

    @property
    def entity_start(self) -> int:
        return self.N_SPECIAL

    @property
    def attribute_start(self) -> int:
        return self.entity_start + self.n_entities

    @property
    def cue_start(self) -> int:
        return self.attribute_start + self.n_attributes

    @property
    def adjective_start(self) -> int:
        return self.cue_start + self.n_attributes * self.cues_per_attribute

    @property
    def relation_start(self) -> int:
        return self.adjective_start + self.n_adjectives

    @property
    def filler_start(self) -> int:
        return self.relation_start + self.n_relations

    def entity(self, e: int) -> int:
        return self.entity_start + e

    def attribute(self, a: int) -> int:
        return self.attribute_start + a

    def cue(self, a: int, j: int) -> int:
        return self.cue_start + a * self.cues_per_attribute + j

    def adjective(self, k: int) -> int:
        return self.adjective_start + k

    def attribute_of_cue(self, token: int) -> int:
        return (token - self.cue_start) // self.cues_per_attribute

    def is_cue(self, token: int) -> bool:
        return self.cue_start <= token < self.adjective_start

    def is_entity(self, token: int) -> bool:
        return self.entity_start <= token < self.attribute_start

    @property
    def answer_ids(self) -> range:
        return range(self.attribute_start, self.attribute_start + self.n_attributes)

    @property
    def feature_dim(self) -> int:
        return self.n_entities + self.n_attributes

    def category_of(self, token: int) -> Category:
        if not 0 <= token < self.vocab_size:
            raise ValueError(f"token id {token} outside vocabulary of size {self.vocab_size}")
        if token in (self.QRY, self.ANS):
            return Category.RELATION
        if token < self.N_SPECIAL:
            return Category.FILLER
        if token < self.attribute_start:
            return Category.ENTITY
        if token < self.relation_start:
            return Category.ATTRIBUTE
        if token < self.filler_start:
            return Category.RELATION
        return Category.FILLER


DEFAULT_VOCAB = VocabLayout()


def category_of(token: int, vocab: VocabLayout = DEFAULT_VOCAB) -> Category:
    return vocab.category_of(token)


# Category mixture used for distractor sentence bodies.
DISTRACTOR_MIX = {
    Category.FILLER: 0.55,
    Category.RELATION: 0.2,
    Category.ENTITY: 0.15,
    Category.ATTRIBUTE: 0.1,
}


@dataclass(frozen=True)
class TaskSpec:
    length_bin: int = 64
    target_size: TargetSize = TargetSize.LARGE
    prior_strength: float = 0.3
    seed: int = 0
    n_scene_entities: int = 4
    feature_noise: float = 0.35
    vocab: VocabLayout = field(default_factory=VocabLayout)

    def __post_init__(self):
        if self.length_bin not in LENGTH_BINS:
            raise ValueError(f"length_bin must be one of {LENGTH_BINS}, got {self.length_bin}")
        if not isinstance(self.target_size, TargetSize):
            object.__setattr__(self, "target_size", TargetSize(self.target_size))
        if not 0.0 <= self.prior_strength <= 1.0:
            raise ValueError("prior_strength must lie in [0, 1]")
        if not 2 <= self.n_scene_entities <= GRID_CELLS - 7:
            raise ValueError("n_scene_entities out of range")
        if not 0.0 <= self.feature_noise < 0.5:
            raise ValueError("feature_noise must lie in [0, 0.5) to keep one-hot argmax intact")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_size"] = self.target_size.value
        del d["vocab"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass
class Sample:
    visual_features: np.ndarray  # (16, feature_dim)
    text_ids: list[int]
    segments: list[Segment]  # per text position
    categories: list[Category]  # per text position
    answer_id: int
    spec: TaskSpec
    index: int
    target_entity: int
    prior_attribute: int  # attribute implied by the cue mentions

    @property
    def context_len(self) -> int:
        return sum(s is Segment.CONTEXT for s in self.segments)

    @property
    def question_positions(self) -> list[int]:
        return [i for i, s in enumerate(self.segments) if s is Segment.QUESTION]

    @property
    def context_ids(self) -> list[int]:
        return [t for t, s in zip(self.text_ids, self.segments) if s is Segment.CONTEXT]


def _sample_rng(seed: int, index: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, index, salt])


def _distractor_sentence(rng, vocab: VocabLayout, avoid_entities) -> list[int]:
    cats = list(DISTRACTOR_MIX)
    probs = np.array([DISTRACTOR_MIX[c] for c in cats])
    body = []
    for _ in range(int(rng.integers(3, 8))):
        c = cats[rng.choice(len(cats), p=probs)]
        if c is Category.FILLER:
            body.append(int(rng.integers(vocab.filler_start, vocab.vocab_size)))
        elif c is Category.RELATION:
            body.append(vocab.relation_start + int(rng.integers(vocab.n_relations)))
        elif c is Category.ENTITY:
            choices = [e for e in range(vocab.n_entities) if e not in avoid_entities]
            body.append(vocab.entity(int(rng.choice(choices))))
        else:
            body.append(vocab.adjective(int(rng.integers(vocab.n_adjectives))))
    return body + [vocab.SEP]


def cue_mention_count(context_len: int) -> int:
    """Number of cue mentions about the target; grows with context length."""
    return max(1, round(context_len / 64))


def generate_sample(spec: TaskSpec, index: int) -> Sample:
    """Deterministically build sample ``index`` of the stream described by ``spec``."""
    vocab = spec.vocab
    rng = _sample_rng(spec.seed, index)

    entities = rng.choice(vocab.n_entities, size=spec.n_scene_entities, replace=False)
    target = int(entities[0])
    attrs = rng.integers(vocab.n_attributes, size=spec.n_scene_entities)
    answer_attr = int(attrs[0])

    # scene layout: target occupies `cells` cells, other entities share the rest
    cells = spec.target_size.cells
    owner = np.empty(GRID_CELLS, dtype=int)
    owner[:cells] = 0
    others = np.arange(1, spec.n_scene_entities)
    owner[cells:cells + len(others)] = others
    owner[cells + len(others):] = rng.choice(others, size=GRID_CELLS - cells - len(others))
    owner = rng.permutation(owner)

    feats = np.zeros((GRID_CELLS, vocab.feature_dim))
    feats[np.arange(GRID_CELLS), entities[owner]] = 1.0
    feats[np.arange(GRID_CELLS), vocab.n_entities + attrs[owner]] = 1.0
    feats += rng.uniform(-spec.feature_noise, spec.feature_noise, size=feats.shape)

    jitter = rng.uniform(-MAX_CONTEXT_JITTER, MAX_CONTEXT_JITTER)
    context_len = int(round(spec.length_bin * (1.0 + jitter)))

    # the prior channel is drawn once per sample: every cue implies either the
    # answer or a decoy drawn uniformly from all attributes
    decoy = int(rng.integers(vocab.n_attributes))
    implied = answer_attr if rng.random() < spec.prior_strength else decoy
    sentences: list[list[int]] = []
    n_cues = cue_mention_count(context_len)
    for _ in range(n_cues):
        rel = vocab.relation_start + int(rng.integers(vocab.n_relations))
        sentences.append([vocab.entity(target), rel, vocab.cue(implied, int(rng.integers(vocab.cues_per_attribute))), vocab.SEP])

    used = sum(len(s) for s in sentences)
    while used < context_len:
        s = _distractor_sentence(rng, vocab, set(entities.tolist()))
        sentences.append(s)
        used += len(s)
    # key sentences first in the list; shuffle them among distractors, then trim
    # excess from the tail of the last distractor only
    n_key = n_cues
    key, fill = sentences[:n_key], sentences[n_key:]
    overflow = used - context_len
    if overflow:
        keep = len(fill[-1]) - overflow
        fill[-1] = fill[-1][:keep - 1] + [vocab.SEP]
    order = rng.permutation(len(key) + len(fill))
    pool = key + fill
    context = [t for i in order for t in pool[i]]
    assert len(context) == context_len

    question = [vocab.QRY, vocab.ANS, vocab.entity(target)]
    text = context + question
    segments = [Segment.CONTEXT] * len(context) + [Segment.QUESTION] * len(question)
    return Sample(
        visual_features=feats,
        text_ids=text,
        segments=segments,
        categories=[vocab.category_of(t) for t in text],
        answer_id=vocab.attribute(answer_attr),
        spec=spec,
        index=index,
        target_entity=target,
        prior_attribute=implied,
    )


BLANK_VALUE = 0.0


def blank_image_variant(sample: Sample) -> Sample:
    """Replace the image by a constant (black) feature block; text untouched."""
    return replace(sample, visual_features=np.full_like(sample.visual_features, BLANK_VALUE))


def answer_from_image(sample: Sample) -> int:
    """Read the answer from the visual features alone (target entity named by the question)."""
    vocab = sample.spec.vocab
    feats = sample.visual_features
    ent = np.argmax(feats[:, :vocab.n_entities], axis=1)
    cells = np.flatnonzero(ent == sample.target_entity)
    attr = np.argmax(feats[cells, vocab.n_entities:], axis=1)
    return vocab.attribute(int(np.bincount(attr, minlength=vocab.n_attributes).argmax()))


def text_prior_guess(sample: Sample) -> int:
    """Answer from context statistics only: majority vote over cue mentions."""
    vocab = sample.spec.vocab
    votes = np.zeros(vocab.n_attributes, dtype=int)
    for t in sample.context_ids:
        if vocab.is_cue(t):
            votes[vocab.attribute_of_cue(t)] += 1
    return vocab.attribute(int(votes.argmax()))


@dataclass(frozen=True)
class ManifestEntry:
    seed: int
    index: int
    spec: TaskSpec
    split: str

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "index": self.index, "split": self.split,
                           "spec": self.spec.to_dict()}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        return cls(seed=d["seed"], index=d["index"], split=d["split"], spec=TaskSpec.from_dict(d["spec"]))

    def sample(self) -> Sample:
        return generate_sample(self.spec, self.index)


def make_split(
    specs: Sequence[TaskSpec],
    counts: Sequence[int],
    seed: int,
    train_counts: Sequence[int] | None = None,
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Build (train, eval) manifests; eval indices follow train indices per spec."""
    if len(specs) != len(counts):
        raise ValueError("one count per spec required")
    if any(c < 1 for c in counts):
        raise ValueError("counts must be >= 1")
    train_counts = train_counts or [0] * len(specs)
    train, evals = [], []
    for spec, n_eval, n_train in zip(specs, counts, train_counts):
        spec = replace(spec, seed=seed)
        train += [ManifestEntry(seed, i, spec, "train") for i in range(n_train)]
        evals += [ManifestEntry(seed, n_train + i, spec, "eval") for i in range(n_eval)]
    check_disjoint(train, evals)
    return train, evals


def check_disjoint(a: Iterable[ManifestEntry], b: Iterable[ManifestEntry]) -> None:
    keys = {(e.spec, e.index) for e in a}
    if any((e.spec, e.index) in keys for e in b):
        raise ValueError("train and eval manifests overlap")


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    with open(path) as fh:
        return [ManifestEntry.from_json(line) for line in fh if line.strip()]
