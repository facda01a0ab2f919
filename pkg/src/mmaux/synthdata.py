"""Synthetic multimodal posts with controllable image-text relation regimes.

Each post carries a relation tag from the 2x2 taxonomy (does the image add
to the meaning? is the text represented in the image?) and the tag decides
where the label signal is planted:

* image_adds: patches get a label prototype added (strength image_signal).
  With ``interaction=True`` the "adds / not represented" tag plants
  prototype ``(label + key) % K`` instead, where ``key`` is read off the
  text's topic token, so the label is only recoverable jointly.
* text_represented: label motif tokens are inserted (strength text_signal);
  otherwise only a weak motif cue is inserted.

Independently of the label, every post has a topic. The topic token is in
the text and the topic *group* (topic // K) is drawn into every patch with
strength pair_signal. That shared content is what lets a model tell a
post's own image from a donor image.

Vocabulary layout: 0 = pad, 1..K = label motifs, K+1..K+num_topics = topics,
the rest is background.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError

PAD_ID = 0
FORMAT_VERSION = 1
WEAK_CUE_RATE = 0.25
MOTIF_REPEATS = 2


@dataclass(frozen=True, order=True)
class RelationTag:
    image_adds: bool
    text_represented: bool

    @property
    def index(self) -> int:
        """Position in ``relation_mix`` order: (T,T), (T,F), (F,T), (F,F)."""
        return (0 if self.image_adds else 2) + (0 if self.text_represented else 1)

    @classmethod
    def from_index(cls, i: int) -> "RelationTag":
        return ALL_RELATIONS[i]

    @property
    def key(self) -> str:
        a = "adds" if self.image_adds else "no_add"
        t = "repr" if self.text_represented else "no_repr"
        return f"{a}/{t}"

    @classmethod
    def from_key(cls, key: str) -> "RelationTag":
        for r in ALL_RELATIONS:
            if r.key == key:
                return r
        raise ValueError(f"unknown relation key {key!r}")


ALL_RELATIONS = (
    RelationTag(True, True),
    RelationTag(True, False),
    RelationTag(False, True),
    RelationTag(False, False),
)


@dataclass
class Post:
    post_id: int
    tokens: list
    patches: np.ndarray
    label: int
    relation: RelationTag
    topic: int = 0

    def __eq__(self, other):
        if not isinstance(other, Post):
            return NotImplemented
        return (
            self.post_id == other.post_id
            and list(self.tokens) == list(other.tokens)
            and self.label == other.label
            and self.relation == other.relation
            and self.topic == other.topic
            and self.patches.shape == other.patches.shape
            and np.array_equal(self.patches, other.patches)
        )


@dataclass(frozen=True)
class SynthConfig:
    num_posts: int = 1000
    num_classes: int = 2
    vocab_size: int = 64
    max_len: int = 16
    patch_count: int = 4
    patch_dim: int = 16
    relation_mix: tuple = (0.25, 0.25, 0.25, 0.25)
    text_signal: float = 1.0
    image_signal: float = 1.0
    noise_level: float = 0.1
    seed: int = 0
    num_topic_groups: int = 4
    pair_signal: float = 0.0
    interaction: bool = False

    def __post_init__(self):
        object.__setattr__(self, "relation_mix", tuple(float(x) for x in self.relation_mix))
        self.validate()

    @property
    def num_topics(self) -> int:
        return self.num_classes * self.num_topic_groups

    def validate(self) -> None:
        if self.num_posts < 0:
            raise ConfigError("num_posts must be >= 0")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(self.relation_mix) != 4:
            raise ConfigError("relation_mix needs exactly 4 probabilities")
        if any(p < 0 for p in self.relation_mix) or abs(sum(self.relation_mix) - 1.0) > 1e-9:
            raise ConfigError(f"relation_mix must be non-negative and sum to 1 (got sum {sum(self.relation_mix):.6g})")
        for name in ("text_signal", "image_signal", "noise_level", "pair_signal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.num_topic_groups < 1:
            raise ConfigError("num_topic_groups must be >= 1")
        if self.max_len < MOTIF_REPEATS + 2:
            raise ConfigError(f"max_len must be at least {MOTIF_REPEATS + 2}")
        if self.patch_count < 1 or self.patch_dim < 1:
            raise ConfigError("patch_count and patch_dim must be positive")
        if self.vocab_size < 2 + self.num_classes + self.num_topics:
            raise ConfigError(
                f"vocab_size {self.vocab_size} leaves no background tokens (need > {1 + self.num_classes + self.num_topics})"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relation_mix"] = list(self.relation_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    posts: list
    config: SynthConfig
    split_name: str = "all"

    def __post_init__(self):
        ids = [p.post_id for p in self.posts]
        if len(set(ids)) != len(ids):
            raise ConfigError("post_ids must be unique within a dataset")

    def __len__(self):
        return len(self.posts)

    def __iter__(self):
        return iter(self.posts)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.posts], dtype=np.int64)

    @property
    def relations(self) -> list:
        return [p.relation for p in self.posts]

    def subset(self, indices: Iterable[int], split_name: str | None = None) -> "Dataset":
        return Dataset([self.posts[i] for i in indices], self.config, split_name or self.split_name)

    def summary(self) -> dict:
        k = self.config.num_classes
        per_class = np.bincount(self.labels, minlength=k).tolist() if len(self) else [0] * k
        per_rel = {r.key: 0 for r in ALL_RELATIONS}
        for p in self.posts:
            per_rel[p.relation.key] += 1
        return {"split": self.split_name, "posts": len(self), "per_class": per_class, "per_relation": per_rel}


# ---------------------------------------------------------------------------
# generation


def _prototype_bank(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Label prototypes (K, D) and topic-group patterns (G, D), unit norm.

    Orthonormal when K + G <= patch_dim, so class centroids never collide
    with topic content.
    """
    rng = np.random.default_rng([config.seed, 0x5EED])
    k, g, dim = config.num_classes, config.num_topic_groups, config.patch_dim
    raw = rng.standard_normal((dim, max(k + g, 1)))
    if k + g <= dim:
        q, _ = np.linalg.qr(raw)
        bank = q[:, : k + g].T
    else:
        bank = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return bank[:k] * math.sqrt(dim) / 2.0, bank[k:] * math.sqrt(dim) / 2.0


def _make_post(config: SynthConfig, post_id: int, protos: np.ndarray, groups: np.ndarray) -> Post:
    rng = np.random.default_rng([config.seed, post_id])
    k = config.num_classes
    relation = ALL_RELATIONS[int(rng.choice(4, p=config.relation_mix))]
    label = int(rng.integers(k))
    topic = int(rng.integers(config.num_topics))
    key = topic % k
    group = topic // k

    motif0 = 1
    topic0 = 1 + k
    bg0 = 1 + k + config.num_topics
    length = int(rng.integers(config.max_len // 2, config.max_len + 1))
    tokens = rng.integers(bg0, config.vocab_size, size=length)
    slots = rng.permutation(length)
    tokens[slots[0]] = topic0 + topic
    if relation.text_represented:
        for s in slots[1 : 1 + MOTIF_REPEATS]:
            if rng.random() < config.text_signal:
                tokens[s] = motif0 + label
    elif rng.random() < WEAK_CUE_RATE * config.text_signal:
        tokens[slots[1]] = motif0 + label
    corrupt = rng.random(length) < 0.5 * config.noise_level
    tokens = np.where(corrupt, rng.integers(bg0, config.vocab_size, size=length), tokens)

    patches = config.noise_level * rng.standard_normal((config.patch_count, config.patch_dim))
    patches += config.pair_signal * groups[group]
    if relation.image_adds:
        proto = (label + key) % k if (config.interaction and not relation.text_represented) else label
        patches += config.image_signal * protos[proto]
    return Post(post_id=post_id, tokens=[int(t) for t in tokens], patches=patches, label=label, relation=relation, topic=topic)


def generate(config: SynthConfig) -> Dataset:
    """Deterministic in ``config``; each post depends only on (seed, post_id)."""
    config.validate()
    protos, groups = _prototype_bank(config)
    posts = [_make_post(config, i, protos, groups) for i in range(config.num_posts)]
    return Dataset(posts, config, "all")


# ---------------------------------------------------------------------------
# split / subsample


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor for val and test, remainder to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be 3 non-negative values summing to 1, got {tuple(ratios)}")
    # guard against 0.1 * 100 = 10.000000000000002 style drift before flooring
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    n_train, n_val, _ = split_sizes(len(dataset), ratios)
    order = np.random.default_rng(seed).permutation(len(dataset))
    return (
        dataset.subset(order[:n_train], "train"),
        dataset.subset(order[n_train : n_train + n_val], "val"),
        dataset.subset(order[n_train + n_val :], "test"),
    )


def subsample(train: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Uniform random subset of ceil(fraction * n) posts (not stratified)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(train)
    size = min(n, int(math.ceil(fraction * n - 1e-9)))
    chosen = np.random.default_rng(seed).permutation(n)[:size]
    return train.subset(np.sort(chosen), train.split_name)


# ---------------------------------------------------------------------------
# JSONL


def _post_to_json(p: Post) -> dict:
    return {
        "id": p.post_id,
        "tokens": list(p.tokens),
        "patches": p.patches.tolist(),
        "label": p.label,
        "relation": {"image_adds": p.relation.image_adds, "text_represented": p.relation.text_represented},
        "topic": p.topic,
    }


def write_jsonl(dataset: Dataset, path) -> None:
    """Line 1 is metadata; then one post per line."""
    lines = [json.dumps({"version": FORMAT_VERSION, "split": dataset.split_name, "config": dataset.config.to_dict()})]
    lines.extend(json.dumps(_post_to_json(p)) for p in dataset.posts)
    Path(path).write_text("\n".join(lines) + "\n")


def read_jsonl(path) -> Dataset:
    text = Path(path).read_text()
    rows = text.splitlines()
    if not rows:
        raise ParseError("empty file, expected a metadata line", line=1)
    try:
        meta = json.loads(rows[0])
        config = SynthConfig.from_dict(meta["config"])
    except (json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise ParseError(f"bad metadata: {exc}", line=1) from exc
    if meta.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported version {meta.get('version')!r}", line=1)
    posts = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row.strip():
            continue
        try:
            obj = json.loads(row)
            rel = obj["relation"]
            patches = np.asarray(obj["patches"], dtype=np.float64)
            if patches.ndim != 2:
                raise ValueError("patches must be a 2-D list")
            posts.append(
                Post(
                    post_id=int(obj["id"]),
                    tokens=[int(t) for t in obj["tokens"]],
                    patches=patches,
                    label=int(obj["label"]),
                    relation=RelationTag(bool(rel["image_adds"]), bool(rel["text_represented"])),
                    topic=int(obj.get("topic", 0)),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed post: {exc}", line=lineno) from exc
    return Dataset(posts, config, meta.get("split", "all"))
