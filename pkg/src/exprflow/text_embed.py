"""Instruction templates and pluggable text-embedding providers.

Two providers are available:

* :class:`HashingEmbedder` -- deterministic stand-in for a frozen text encoder.
  Each word maps to a fixed Gaussian vector derived from a keyed hash; rows are
  mixed causally (each row carries a decaying trace of earlier words) so that
  pooled embeddings still reflect word order.
* :class:`LookupEmbedder` -- exact-match retrieval from a precomputed archive,
  e.g. real CLIP outputs exported elsewhere.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .archive import load_archive, save_archive
from .errors import NotFoundError, ShapeError, ValidationError

TEMPLATES = {
    1: "Turn this face from {src} to {dst}.",
    2: "Change this face from {src} to {dst}.",
    3: "Transform this face from {src} to {dst}.",
    4: "Modify this face, changing it from {src} to {dst}.",
    # printed with an unbalanced bracket in the source table; rendered without brackets
    5: "Replace this face from {src} to {dst}.",
}

CK_LABELS = ("happiness", "disgust", "anger", "fear", "surprise", "contempt", "sadness")
CELEBV_LABELS = CK_LABELS + ("neutral",)

_TOKEN = re.compile(r"[a-z0-9]+")


class ExpressionVocabulary:
    """Ordered, lowercase, duplicate-free list of expression labels."""

    def __init__(self, labels):
        labels = tuple(labels)
        if not labels:
            raise ValidationError("vocabulary must not be empty")
        for label in labels:
            if not isinstance(label, str) or label != label.lower() or not label.strip():
                raise ValidationError(f"labels must be non-empty lowercase strings, got {label!r}")
        if len(set(labels)) != len(labels):
            raise ValidationError("vocabulary labels must be unique")
        self.labels = labels
        self._index = {label: i for i, label in enumerate(labels)}

    @classmethod
    def ck(cls):
        return cls(CK_LABELS)

    @classmethod
    def celebv(cls):
        return cls(CELEBV_LABELS)

    @classmethod
    def named(cls, name: str):
        presets = {"ck": CK_LABELS, "ck+": CK_LABELS, "celebv": CELEBV_LABELS, "celebv-hq": CELEBV_LABELS}
        if name.lower() not in presets:
            raise ValidationError(f"unknown vocabulary preset {name!r}")
        return cls(presets[name.lower()])

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, label):
        return label in self._index

    def __eq__(self, other):
        return isinstance(other, ExpressionVocabulary) and self.labels == other.labels

    def __repr__(self):
        return f"ExpressionVocabulary({list(self.labels)})"

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ValidationError(f"label {label!r} not in vocabulary {list(self.labels)}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(list(self.labels)))

    @classmethod
    def load(cls, path):
        return cls(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Instruction:
    template_id: int
    expr_from: str
    expr_to: str
    text: str


def render_instruction(template_id: int, expr_from: str, expr_to: str,
                       vocab: ExpressionVocabulary | None = None) -> Instruction:
    vocab = vocab or ExpressionVocabulary.ck()
    if template_id not in TEMPLATES:
        raise ValidationError(f"unknown template id {template_id}; expected one of {sorted(TEMPLATES)}")
    for label in (expr_from, expr_to):
        vocab.index(label)
    text = TEMPLATES[template_id].format(src=expr_from, dst=expr_to)
    return Instruction(template_id, expr_from, expr_to, text)


def instruction_corpus(vocab: ExpressionVocabulary, include_same: bool = False) -> list[Instruction]:
    """Every template rendered for every ordered label pair."""
    out = []
    for tid, (a, b) in product(sorted(TEMPLATES), product(vocab.labels, repeat=2)):
        if a != b or include_same:
            out.append(render_instruction(tid, a, b, vocab))
    return out


def normalize_instruction(text: str) -> str:
    """Drop square brackets so template placeholders like ``[fear]`` match."""
    return re.sub(r"\s+", " ", text.replace("[", "").replace("]", "")).strip()


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class HashingEmbedder:
    """Seeded hashing text encoder producing an ``(n_rows, dim)`` matrix.

    With ``context_decay=0`` every row depends on its own token only and the
    matrix is an order-free bag of words once pooled.
    """

    def __init__(self, n_rows: int = 77, dim: int = 768, seed: int = 0, context_decay: float = 0.5):
        if n_rows < 1 or dim < 1:
            raise ValidationError("embedding dims must be positive")
        if not 0.0 <= context_decay < 1.0:
            raise ValidationError("context_decay must lie in [0, 1)")
        self.n_rows, self.dim, self.seed, self.context_decay = n_rows, dim, seed, context_decay
        self._cache: dict[str, np.ndarray] = {}

    @property
    def shape(self):
        return (self.n_rows, self.dim)

    def config(self) -> dict:
        return {"kind": "hashing", "n_rows": self.n_rows, "dim": self.dim,
                "seed": self.seed, "context_decay": self.context_decay}

    def token_vector(self, token: str) -> np.ndarray:
        if token not in self._cache:
            digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            self._cache[token] = rng.standard_normal(self.dim)
        return self._cache[token]

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValidationError("cannot embed empty text")
        tokens = tokenize(normalize_instruction(text))
        if not tokens:
            raise ValidationError(f"no tokens in {text!r}")
        out = np.zeros(self.shape)
        state = np.zeros(self.dim)
        for row, token in enumerate(tokens[:self.n_rows]):
            state = self.token_vector(token) + self.context_decay * state
            out[row] = state / np.linalg.norm(state)
        return out


class LookupEmbedder:
    """Exact-match lookup in a precomputed embedding archive."""

    def __init__(self, table: dict[str, np.ndarray], path=None):
        if not table:
            raise ValidationError("embedding table is empty")
        shapes = {np.shape(v) for v in table.values()}
        if len(shapes) != 1:
            raise ShapeError(f"embeddings have inconsistent shapes {sorted(shapes)}")
        self.table = {normalize_instruction(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}
        (self.shape,) = shapes
        self.path = None if path is None else str(path)

    def config(self) -> dict:
        cfg = {"kind": "lookup", "n_rows": self.shape[0], "dim": self.shape[1]}
        if self.path is not None:
            cfg["path"] = self.path
        return cfg

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValidationError("cannot embed empty text")
        key = normalize_instruction(text)
        try:
            return self.table[key].copy()
        except KeyError:
            raise NotFoundError(f"no embedding stored for {key!r}") from None

    @classmethod
    def load(cls, path):
        tensors, meta = load_archive(path)
        index = meta.get("index")
        if index is None:
            raise ValidationError(f"{path}: embedding archive has no 'index' in its manifest meta")
        return cls({text: tensors[name].astype(np.float64) for text, name in index.items()}, path=path)


def save_embeddings(path, table: dict[str, np.ndarray]) -> Path:
    """Write an embedding archive readable by :meth:`LookupEmbedder.load`."""
    names = {text: f"emb{i:06d}" for i, text in enumerate(sorted(table))}
    tensors = {names[text]: np.asarray(table[text]) for text in names}
    return save_archive(path, tensors, {"kind": "embeddings", "index": names})


def embed(provider, text: str) -> np.ndarray:
    """Embed ``text`` with ``provider``; returns an ``(L, d)`` float64 matrix."""
    out = provider.embed(text)
    if not np.isfinite(out).all():
        raise ValidationError("provider produced non-finite values")
    return out


def make_provider(config: dict):
    """Build a provider from its ``config()`` dict (or an archive path)."""
    kind = config.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(config.get("n_rows", 77), config.get("dim", 768),
                               config.get("seed", 0), config.get("context_decay", 0.5))
    if kind == "lookup":
        return LookupEmbedder.load(config["path"])
    raise ValidationError(f"unknown embedding provider kind {kind!r}")
