"""Expression classification and generation metrics.

Generated anchors are classified in parameter space, on the 53-dim
[expression || jaw] vector, either by a nearest-centre oracle (synthetic data
with known class centres) or by a small MLP trained with class-balanced focal
loss. Reported metrics:

* acc1 -- fraction of instruction labels recovered (two per sample)
* acc2 -- fraction of samples with both labels recovered
* gmean -- geometric mean of per-class recall
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .dataset import JAW, DatasetManifest
from .errors import ValidationError
from .i2fet import I2FETModel, embed_manifest, generate_batch

FEATURE_DIM = 53


def anchor_features(expr, pose) -> np.ndarray:
    """[e || jaw] per anchor; works on (..., 50) / (..., 6) arrays."""
    return np.concatenate([np.asarray(expr), np.asarray(pose)[..., JAW]], axis=-1)


def manifest_features(manifest: DatasetManifest):
    """Flattened anchor features (2S, 53) and labels (2S,) of a manifest."""
    a = manifest.arrays()
    return anchor_features(a["expr"], a["pose"]).reshape(-1, FEATURE_DIM), a["labels"].reshape(-1)


class NearestCenterOracle:
    """Assigns each feature vector to the closest known class centre."""

    def __init__(self, centers):
        self.centers = np.asarray(centers, dtype=np.float64)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest):
        if manifest.centers is None:
            raise ValidationError("manifest carries no class centres")
        return cls(manifest.centers)

    def predict(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        d = ((f[..., None, :] - self.centers) ** 2).sum(-1)
        return d.argmin(-1)


# -- class-balanced focal loss ---------------------------------------------------

@dataclass
class CBFocalConfig:
    class_counts: list
    beta: float = 0.9999
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError("beta must lie in [0, 1)")
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")
        if min(self.class_counts) <= 0:
            raise ValidationError("class counts must be positive")


def effective_number_weights(counts, beta: float) -> np.ndarray:
    """Unnormalised weights (1 - beta) / (1 - beta**n) per class."""
    n = np.asarray(counts, dtype=np.float64)
    if beta == 0.0:
        return np.ones_like(n)
    return (1.0 - beta) / (1.0 - np.power(beta, n))


def class_weights(cfg: CBFocalConfig) -> np.ndarray:
    """Effective-number weights rescaled to mean one."""
    w = effective_number_weights(cfg.class_counts, cfg.beta)
    return w * len(w) / w.sum()


def cb_focal_loss(logits, labels, cfg: CBFocalConfig):
    """Mean of ``w_y * (1 - p_y)**gamma * -log p_y`` over the batch."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = logits.shape[-1]
    if len(cfg.class_counts) != n_classes:
        raise ValidationError(f"{len(cfg.class_counts)} class counts for {n_classes} logits")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError("label out of range")
    w = torch.as_tensor(class_weights(cfg), dtype=logits.dtype)
    logp = F.log_softmax(logits, dim=-1).gather(-1, labels[:, None]).squeeze(-1)
    modulator = (1.0 - logp.exp()).clamp_min(0.0) ** cfg.gamma if cfg.gamma else 1.0
    return torch.mean(w[labels] * modulator * -logp)


# -- classifier --------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    loss: str = "cb_focal"  # or "ce"
    beta: float = 0.9999
    gamma: float = 2.0
    hidden: int = 128


class ClassifierModel(nn.Module):
    def __init__(self, n_classes: int, hidden: int = 128, feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.n_classes = n_classes
        self.net = nn.Sequential(nn.Linear(feature_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, n_classes))
        self.register_buffer("mean", torch.zeros(feature_dim))
        self.register_buffer("scale", torch.ones(feature_dim))

    def forward(self, x):
        return self.net((x - self.mean) / self.scale)

    def predict(self, features) -> np.ndarray:
        x = torch.as_tensor(np.asarray(features, dtype=np.float32).reshape(-1, FEATURE_DIM))
        with torch.no_grad():
            out = self(x).argmax(-1).numpy()
        return out.reshape(np.shape(features)[:-1])


def train_classifier(features, labels=None, n_classes: int | None = None,
                     cfg: ClassifierConfig | None = None) -> ClassifierModel:
    """Train the parameter-space classifier.

    ``features`` may be a :class:`DatasetManifest` (each sample contributes its
    two anchors) or an (n, 53) array with matching ``labels``.
    """
    cfg = cfg or ClassifierConfig()
    if isinstance(features, DatasetManifest):
        n_classes = n_classes or len(features.vocab)
        features, labels = manifest_features(features)
    x = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0 or len(x) != len(y):
        raise ValidationError("need a non-empty labelled set")
    n_classes = n_classes or int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise ValidationError("training set contains a single class")
    counts = np.bincount(y, minlength=n_classes)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = ClassifierModel(n_classes, cfg.hidden, x.shape[1])
    model.mean.copy_(torch.as_tensor(x.mean(0)))
    model.scale.copy_(torch.as_tensor(x.std(0) + 1e-6))
    if cfg.loss == "cb_focal":
        loss_cfg = CBFocalConfig(list(np.maximum(counts, 1)), cfg.beta, cfg.gamma)
        loss_fn = lambda logits, t: cb_focal_loss(logits, t, loss_cfg)  # noqa: E731
    elif cfg.loss == "ce":
        loss_fn = F.cross_entropy
    else:
        raise ValidationError(f"unknown classifier loss {cfg.loss!r}")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    xt, yt = torch.as_tensor(x), torch.as_tensor(y)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = loss_fn(model(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


# -- metrics -------------------------------------------------------------------------

def acc_metrics(predictions, truths):
    """(acc1, acc2) for per-sample (from, to) label pairs."""
    p, t = np.asarray(predictions), np.asarray(truths)
    if p.shape != t.shape:
        raise ValidationError(f"prediction shape {p.shape} differs from truth shape {t.shape}")
    if p.size == 0:
        raise ValidationError("no predictions")
    hit = p == t
    return float(hit.mean()), float(hit.reshape(len(hit), -1).all(axis=1).mean())


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.ravel(truth), np.ravel(pred)), 1)
    return cm


def per_class_recall(cm) -> np.ndarray:
    """Row-normalised diagonal; NaN for classes without support."""
    support = cm.sum(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)


def gmean(recalls) -> float:
    """Geometric mean of recalls, skipping NaN entries (classes with no support)."""
    r = np.asarray(recalls, dtype=np.float64).ravel()
    r = r[~np.isnan(r)]
    if r.size == 0:
        raise ValidationError("no recalls to average")
    if ((r < 0) | (r > 1)).any():
        raise ValidationError("recalls must lie in [0, 1]")
    if (r == 0).any():
        return 0.0
    return float(np.exp(np.log(r).mean()))


@dataclass
class MetricsReport:
    acc1: float
    acc2: float
    gmean: float
    confusion: np.ndarray
    per_class_recall: np.ndarray
    labels: tuple = ()
    ground_truth: "MetricsReport | None" = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"acc1": self.acc1, "acc2": self.acc2, "gmean": self.gmean,
             "labels": list(self.labels),
             "per_class_recall": [None if np.isnan(r) else float(r) for r in self.per_class_recall],
             "confusion": self.confusion.tolist()}
        if self.ground_truth is not None:
            d["ground_truth"] = self.ground_truth.to_dict()
        d.update(self.extra)
        return d

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def save_confusion_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + list(self.labels))
            for label, row in zip(self.labels, self.confusion):
                writer.writerow([label] + row.tolist())

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key in ("acc1", "acc2", "gmean"):
                writer.writerow([key, getattr(self, key)])
            for label, r in zip(self.labels, self.per_class_recall):
                writer.writerow([f"recall_{label}", r])


def report_from_predictions(pred, truth, labels) -> MetricsReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    acc1, acc2 = acc_metrics(pred, truth)
    cm = confusion_matrix(truth, pred, len(labels))
    recall = per_class_recall(cm)
    return MetricsReport(acc1, acc2, gmean(recall), cm, recall, tuple(labels))


def sample_seeds(n: int, seed: int) -> list:
    """Fixed per-sample generation seeds for one evaluation repeat."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


def evaluate_generation(model: I2FETModel, test_manifest: DatasetManifest, classifier=None,
                        provider=None, embeddings=None, seed: int = 0) -> MetricsReport:
    """Generate anchors for every test instruction and score them.

    ``classifier`` is anything with ``predict((..., 53)) -> labels``; the default
    is the nearest-centre oracle built from the manifest's centres. The report's
    ``ground_truth`` field scores the true anchors with the same classifier.
    """
    classifier = classifier or NearestCenterOracle.from_manifest(test_manifest)
    if embeddings is None:
        if provider is None:
            raise ValidationError("need an embedding provider or precomputed embeddings")
        embeddings = embed_manifest(test_manifest, provider)
    arrays = test_manifest.arrays()
    truth = arrays["labels"]
    e_hat, theta_hat = generate_batch(model, embeddings, sample_seeds(len(test_manifest), seed))
    pred = classifier.predict(anchor_features(e_hat, theta_hat))
    report = report_from_predictions(pred, truth, test_manifest.vocab.labels)
    gt_pred = classifier.predict(anchor_features(arrays["expr"], arrays["pose"]))
    report.ground_truth = report_from_predictions(gt_pred, truth, test_manifest.vocab.labels)
    return report


def evaluate_repeated(model, test_manifest, classifier=None, provider=None, embeddings=None,
                      repeats: int = 10, seed: int = 0) -> dict:
    """Mean and standard deviation of the metrics over ``repeats`` sampling seeds."""
    if embeddings is None:
        embeddings = embed_manifest(test_manifest, provider)
    reports = [evaluate_generation(model, test_manifest, classifier, embeddings=embeddings, seed=seed + r)
               for r in range(repeats)]
    out = {"repeats": repeats}
    for key in ("acc1", "acc2", "gmean"):
        vals = np.array([getattr(r, key) for r in reports])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std()), "values": vals.tolist()}
    out["ground_truth"] = reports[0].ground_truth.to_dict()
    out["last"] = reports[-1].to_dict()
    return out


