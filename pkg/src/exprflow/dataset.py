"""Instruction datasets: synthetic generation, disk format, splits, statistics.

Synthetic data stands in for parameters extracted from real videos. Each class
owns a centre in (expression, jaw) space; anchors are centre plus Gaussian
noise, the global head rotation gets a small class-independent jitter, and each
sample carries the identity shape of one of a fixed pool of subjects.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .archive import load_archive, save_archive
from .errors import ConfigurationError, ParseError, ValidationError
from .text_embed import TEMPLATES, ExpressionVocabulary, Instruction, render_instruction

EXPR_DIM = 50
POSE_DIM = 6
JAW = slice(3, 6)
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class AnchorPair:
    e0: np.ndarray
    e1: np.ndarray
    theta0: np.ndarray
    theta1: np.ndarray

    def __post_init__(self):
        for name in ("e0", "e1", "theta0", "theta1"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))

    def __eq__(self, other):
        return isinstance(other, AnchorPair) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("e0", "e1", "theta0", "theta1"))

    @property
    def expression(self):
        return np.stack([self.e0, self.e1])

    @property
    def pose(self):
        return np.stack([self.theta0, self.theta1])


@dataclass(eq=False)
class Sample:
    instruction: Instruction
    subject_id: str
    shape: np.ndarray
    anchors: AnchorPair
    embedding_key: str = ""

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64)
        if not self.embedding_key:
            self.embedding_key = self.instruction.text

    @property
    def labels(self):
        return self.instruction.expr_from, self.instruction.expr_to

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.instruction == other.instruction
                and self.subject_id == other.subject_id and self.embedding_key == other.embedding_key
                and np.array_equal(self.shape, other.shape) and self.anchors == other.anchors)


@dataclass
class SyntheticGenConfig:
    """Parameters of the synthetic instruction dataset.

    Class centres are derived from ``seed`` unless given explicitly. They must be
    pairwise at least ``6 * noise_std`` apart in the joint (expression, jaw) space.
    """

    vocab: ExpressionVocabulary = field(default_factory=ExpressionVocabulary.ck)
    samples_per_pair: int = 50
    noise_std: float = 0.05
    global_pose_jitter_std: float = 0.02
    seed: int = 0
    n_shape: int = 100
    n_subjects: int = 20
    center_scale: float = 0.5
    jaw_scale: float = 0.1
    shape_scale: float = 1.0
    class_multipliers: dict | None = None
    expr_center: np.ndarray | None = None
    jaw_center: np.ndarray | None = None

    def __post_init__(self):
        if self.samples_per_pair < 1 or self.n_subjects < 1 or self.n_shape < 1:
            raise ConfigurationError("samples_per_pair, n_subjects and n_shape must be positive")
        if self.noise_std <= 0 or self.global_pose_jitter_std < 0:
            raise ConfigurationError("noise_std must be positive and jitter non-negative")
        if self.expr_center is None or self.jaw_center is None:
            expr, jaw = draw_centers(len(self.vocab), self.seed, self.center_scale, self.jaw_scale, self.noise_std)
            self.expr_center = expr if self.expr_center is None else self.expr_center
            self.jaw_center = jaw if self.jaw_center is None else self.jaw_center
        self.expr_center = np.asarray(self.expr_center, dtype=np.float64)
        self.jaw_center = np.asarray(self.jaw_center, dtype=np.float64)
        k = len(self.vocab)
        if self.expr_center.shape != (k, EXPR_DIM) or self.jaw_center.shape != (k, 3):
            raise ConfigurationError(f"centres must be ({k}, {EXPR_DIM}) and ({k}, 3)")
        gap = min_separation(self.centers)
        if gap < 6 * self.noise_std:
            raise ConfigurationError(f"class centres only {gap:.4g} apart; need >= {6 * self.noise_std:.4g}")
        if self.class_multipliers:
            for label, mult in self.class_multipliers.items():
                self.vocab.index(label)
                if mult <= 0:
                    raise ConfigurationError(f"multiplier for {label!r} must be positive")

    @property
    def centers(self) -> np.ndarray:
        """Joint (expression, jaw) centres, shape (C, 53)."""
        return np.concatenate([self.expr_center, self.jaw_center], axis=1)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("vocab", "expr_center", "jaw_center")}
        d["vocab"] = list(self.vocab.labels)
        return d

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode() + self.centers.tobytes()
        return hashlib.sha256(payload).hexdigest()[:16]


def min_separation(centers: np.ndarray) -> float:
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    dist[np.diag_indices(len(centers))] = np.inf
    return float(dist.min())


def draw_centers(n_classes, seed, center_scale=0.5, jaw_scale=0.1, noise_std=0.05, neutral=False):
    """Seeded class centres, repelled until pairwise gaps reach ``6 * noise_std``."""
    rng = np.random.default_rng([seed, 1 if neutral else 0, 0xC3])
    expr = center_scale * rng.standard_normal((n_classes, EXPR_DIM))
    jaw = jaw_scale * rng.standard_normal((n_classes, 3))
    joint = np.concatenate([expr, jaw], axis=1)
    target = 6 * noise_std * 1.05
    for _ in range(1000):
        diff = joint[:, None, :] - joint[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.diag_indices(n_classes)] = np.inf
        if dist.min() >= target:
            break
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        direction = diff[i, j] / max(dist[i, j], 1e-12)
        push = 0.5 * (target - dist[i, j]) + 1e-6
        joint[i] += push * direction
        joint[j] -= push * direction
    return joint[:, :EXPR_DIM], joint[:, EXPR_DIM:]


def _pair_weights(vocab, multipliers):
    """Per-class weights g such that sample counts n(a, b) ~ g_a g_b give each
    class an anchor frequency proportional to its multiplier."""
    k = len(vocab)
    m = np.array([float((multipliers or {}).get(label, 1.0)) for label in vocab.labels])
    g = np.ones(k)
    for _ in range(2000):
        new = m * (k - 1) / (g.sum() - g)
        if np.allclose(new, g, rtol=1e-12, atol=0):
            break
        g = 0.5 * (g + new)
    return g


@dataclass(eq=False)
class DatasetManifest:
    samples: list
    vocab: ExpressionVocabulary
    splits: list | None = None
    provenance: dict = field(default_factory=dict)
    centers: np.ndarray | None = None  # (C, 53) joint centres when known

    def __post_init__(self):
        if self.splits is not None:
            if len(self.splits) != len(self.samples):
                raise ValidationError("split assignment length differs from sample count")
            bad = set(self.splits) - set(SPLITS)
            if bad:
                raise ValidationError(f"unknown split names {sorted(bad)}")

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        same_centers = (self.centers is None and other.centers is None) or (
            self.centers is not None and other.centers is not None and np.array_equal(self.centers, other.centers))
        return (self.vocab == other.vocab and self.splits == other.splits and self.samples == other.samples
                and self.provenance == other.provenance and same_centers)

    @property
    def histogram(self) -> dict:
        return class_histogram(self)

    def indices(self, split: str) -> np.ndarray:
        if self.splits is None:
            raise ValidationError("manifest has not been split")
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def subset(self, split: str) -> "DatasetManifest":
        idx = self.indices(split)
        return DatasetManifest([self.samples[i] for i in idx], self.vocab, [split] * len(idx),
                               dict(self.provenance), self.centers)

    def arrays(self) -> dict:
        """Stacked numeric views: expr (S,2,50), pose (S,2,6), shape (S,M), labels (S,2)."""
        return {
            "expr": np.stack([s.anchors.expression for s in self.samples]),
            "pose": np.stack([s.anchors.pose for s in self.samples]),
            "shape": np.stack([s.shape for s in self.samples]),
            "labels": np.array([[self.vocab.index(a), self.vocab.index(b)] for a, b in
                                (s.labels for s in self.samples)], dtype=np.int64),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        arrays = self.arrays()
        tensors = {"expr": arrays["expr"], "pose": arrays["pose"], "shape": arrays["shape"]}
        if self.centers is not None:
            tensors["centers"] = self.centers
        save_archive(path / "tensors", tensors, {"kind": "dataset"}, dtype="float64")
        doc = {
            "format": "exprflow-dataset",
            "version": 1,
            "vocab": list(self.vocab.labels),
            "provenance": self.provenance,
            "histogram": self.histogram,
            "tensors": "tensors",
            "samples": [
                {"template_id": s.instruction.template_id, "text": s.instruction.text,
                 "from": s.instruction.expr_from, "to": s.instruction.expr_to,
                 "subject_id": s.subject_id, "embedding_key": s.embedding_key,
                 "split": None if self.splits is None else self.splits[i]}
                for i, s in enumerate(self.samples)
            ],
        }
        (path / "dataset.json").write_text(json.dumps(doc, indent=1))
        return path


def generate_synthetic(config: SyntheticGenConfig) -> DatasetManifest:
    """Draw ``samples_per_pair`` samples for every ordered pair of distinct labels."""
    labels = config.vocab.labels
    g = _pair_weights(config.vocab, config.class_multipliers)
    subj_rng = np.random.default_rng([config.seed, 0x5B])
    subject_shapes = config.shape_scale * subj_rng.standard_normal((config.n_subjects, config.n_shape))

    samples = []
    index = 0
    for a, la in enumerate(labels):
        for b, lb in enumerate(labels):
            if a == b:
                continue
            count = int(round(config.samples_per_pair * g[a] * g[b]))
            for _ in range(count):
                rng = np.random.default_rng([config.seed, 0xDA7A, index])
                template_id = int(rng.integers(1, len(TEMPLATES) + 1))
                subject = int(rng.integers(config.n_subjects))
                anchors = []
                for cls in (a, b):
                    e = config.expr_center[cls] + config.noise_std * rng.standard_normal(EXPR_DIM)
                    pose = np.empty(POSE_DIM)
                    pose[:3] = config.global_pose_jitter_std * rng.standard_normal(3)
                    pose[JAW] = config.jaw_center[cls] + config.noise_std * rng.standard_normal(3)
                    anchors.append((e, pose))
                samples.append(Sample(
                    instruction=render_instruction(template_id, la, lb, config.vocab),
                    subject_id=f"subject{subject:04d}",
                    shape=subject_shapes[subject].copy(),
                    anchors=AnchorPair(anchors[0][0], anchors[1][0], anchors[0][1], anchors[1][1]),
                ))
                index += 1
    provenance = {"generator": "synthetic", "config": config.to_dict(), "config_digest": config.digest()}
    return DatasetManifest(samples, config.vocab, None, provenance, config.centers.copy())


def synth_neutral_set(n: int, seed: int = 0, noise_std: float = 0.05, center_scale: float = 0.3,
                      jitter_std: float = 0.02):
    """Neutral (expression, pose) samples around one known centre.

    Returns ``(expr (n, 50), pose (n, 6), center (56,), std (56,))`` where the
    centre/std describe the generating cluster over the concatenation [e, pose].
    """
    if n < 1:
        raise ValidationError("need at least one neutral sample")
    rng = np.random.default_rng([seed, 0x0E])
    center = np.zeros(EXPR_DIM + POSE_DIM)
    center[:EXPR_DIM] = center_scale * rng.standard_normal(EXPR_DIM)
    std = np.full(EXPR_DIM + POSE_DIM, noise_std)
    std[EXPR_DIM:EXPR_DIM + 3] = jitter_std
    data = center + std * rng.standard_normal((n, EXPR_DIM + POSE_DIM))
    return data[:, :EXPR_DIM], data[:, EXPR_DIM:], center, std


def split(manifest: DatasetManifest, test_frac: float = 0.10, val_frac_of_train: float = 0.10,
          seed: int = 0) -> DatasetManifest:
    """Seeded split stratified by ordered label pair.

    Sizes are ``round(test_frac * S)`` for test and ``round(val_frac * rest)``
    for validation; within each pair group samples are spread evenly over the
    global order so every group contributes proportionally.
    """
    if not (0 < test_frac < 1 and 0 < val_frac_of_train < 1):
        raise ValidationError("split fractions must lie in (0, 1)")
    n = len(manifest)
    if n < 3:
        raise ValidationError(f"too few samples to split ({n})")
    rng = np.random.default_rng([seed, 0x5E])
    groups: dict = {}
    for i, s in enumerate(manifest.samples):
        groups.setdefault(s.labels, []).append(i)
    keys = np.empty(n)
    for members in groups.values():
        members = np.asarray(members)
        order = rng.permutation(len(members))
        keys[members[order]] = (np.arange(len(members)) + rng.uniform(size=len(members))) / len(members)
    ranking = np.argsort(keys, kind="stable")
    n_test = int(round(test_frac * n))
    n_val = int(round(val_frac_of_train * (n - n_test)))
    assign = ["train"] * n
    for pos, i in enumerate(ranking):
        if pos < n_test:
            assign[i] = "test"
        elif pos < n_test + n_val:
            assign[i] = "val"
    for pair, members in groups.items():
        if not any(assign[i] == "train" for i in members):
            raise ValidationError(f"too few samples to stratify: pair {pair} has no training sample")
    return DatasetManifest(manifest.samples, manifest.vocab, assign,
                           dict(manifest.provenance, split_seed=seed), manifest.centers)


def class_histogram(manifest: DatasetManifest) -> dict:
    """Anchor-label counts in vocabulary order; every sample contributes two."""
    counts = Counter()
    for s in manifest.samples:
        counts.update(s.labels)
    return {label: int(counts.get(label, 0)) for label in manifest.vocab.labels}


def load_params_dataset(path) -> DatasetManifest:
    """Read a dataset directory written by :meth:`DatasetManifest.save`."""
    path = Path(path)
    doc_path = path / "dataset.json" if path.is_dir() else path
    root = doc_path.parent
    try:
        doc = json.loads(doc_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{doc_path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    for key in ("vocab", "samples"):
        if key not in doc:
            raise ParseError(f"{doc_path}: missing key {key!r}")
    vocab = ExpressionVocabulary(doc["vocab"])
    tensors, _ = load_archive(root / doc.get("tensors", "tensors"))
    expr, pose, shape = tensors["expr"], tensors["pose"], tensors["shape"]
    n = len(doc["samples"])
    if len(expr) != n or len(pose) != n or len(shape) != n:
        raise ValidationError(f"{doc_path}: tensor row counts do not match {n} samples")

    samples, splits = [], []
    for i, rec in enumerate(doc["samples"]):
        where = f"{doc_path}: sample {i}"
        try:
            instr = render_instruction(int(rec["template_id"]), rec["from"], rec["to"], vocab)
        except KeyError as exc:
            raise ParseError(f"{where}: missing key {exc}") from exc
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from exc
        if "text" in rec and rec["text"] != instr.text:
            instr = Instruction(instr.template_id, instr.expr_from, instr.expr_to, rec["text"])
        e, p = np.asarray(expr[i], dtype=np.float64), np.asarray(pose[i], dtype=np.float64)
        if e.shape != (2, EXPR_DIM):
            raise ValidationError(f"{where}: expression must be 2x{EXPR_DIM}, got {'x'.join(map(str, e.shape))}")
        if p.shape != (2, POSE_DIM):
            raise ValidationError(f"{where}: pose must be 2x{POSE_DIM}, got {'x'.join(map(str, p.shape))}")
        if not (np.isfinite(e).all() and np.isfinite(p).all() and np.isfinite(shape[i]).all()):
            raise ValidationError(f"{where}: non-finite parameters")
        samples.append(Sample(instr, rec.get("subject_id", ""), shape[i].astype(np.float64),
                              AnchorPair(e[0], e[1], p[0], p[1]), rec.get("embedding_key") or instr.text))
        splits.append(rec.get("split"))
    if all(s is None for s in splits):
        splits = None
    elif any(s is None for s in splits):
        raise ValidationError(f"{doc_path}: split assigned to some samples only")
    centers = tensors.get("centers")
    return DatasetManifest(samples, vocab, splits, doc.get("provenance", {}),
                           None if centers is None else centers.astype(np.float64))


def write_params_dataset(path, vocab, records, expr, pose, shape) -> Path:
    """Write a dataset from raw arrays, e.g. parameters extracted by an external
    face-fitting tool. ``records`` are dicts with ``template_id``, ``from``,
    ``to`` and optionally ``subject_id``/``split``/``text``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_archive(path / "tensors", {"expr": expr, "pose": pose, "shape": shape}, {"kind": "dataset"},
                 dtype="float64")
    doc = {"format": "exprflow-dataset", "version": 1, "vocab": list(vocab.labels),
           "provenance": {"source": str(path)}, "tensors": "tensors", "samples": list(records)}
    (path / "dataset.json").write_text(json.dumps(doc, indent=1))
    return path
