"""Neutral encoder-decoder (NED).

A plain autoencoder over neutral-face parameters [e || theta]. After training a
diagonal Gaussian is fitted to the training latents; new neutrals are decoded
from draws of that Gaussian.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive
from .dataset import EXPR_DIM, JAW, POSE_DIM
from .errors import StateError, ValidationError


@dataclass
class NEDConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    latent_dim: int = 16
    hidden: int = 128

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _fc_stack(sizes):
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class NEDModel(nn.Module):
    """Four-layer encoder, and separate four-layer decoders for pose and expression."""

    def __init__(self, latent_dim: int = 16, hidden: int = 128):
        super().__init__()
        d_in = EXPR_DIM + POSE_DIM
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.encoder = _fc_stack([d_in, hidden, hidden, hidden // 2, latent_dim])
        self.pose_decoder = _fc_stack([latent_dim, hidden // 2, hidden, hidden, POSE_DIM])
        self.expr_decoder = _fc_stack([latent_dim, hidden // 2, hidden, hidden, EXPR_DIM])
        self.register_buffer("latent_mean", torch.zeros(latent_dim))
        self.register_buffer("latent_std", torch.zeros(latent_dim))
        self.register_buffer("fitted", torch.zeros((), dtype=torch.bool))
        self.history: list[float] = []

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return torch.cat([self.expr_decoder(z), self.pose_decoder(z)], dim=-1)

    def forward(self, x):
        return self.decode(self.encode(x))

    def save(self, path):
        tensors = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"kind": "ned", "latent_dim": self.latent_dim, "hidden": self.hidden, "history": self.history}
        return save_archive(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_archive(path)
        model = cls(meta["latent_dim"], meta["hidden"])
        state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
        state["fitted"] = state["fitted"].bool()
        model.load_state_dict(state)
        model.history = list(meta.get("history", []))
        model.eval()
        return model


def _as_matrix(neutral_samples) -> np.ndarray:
    if isinstance(neutral_samples, np.ndarray):
        data = np.asarray(neutral_samples, dtype=np.float64)
    else:
        rows = [np.concatenate([np.ravel(e), np.ravel(t)]) for e, t in neutral_samples]
        data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValidationError("need a non-empty list of (expression, pose) samples")
    if data.shape[1] != EXPR_DIM + POSE_DIM:
        raise ValidationError(f"each sample must hold {EXPR_DIM} + {POSE_DIM} values, got {data.shape[1]}")
    return data


def train_ned(neutral_samples, config: NEDConfig | None = None) -> NEDModel:
    """Fit the autoencoder with MSE, then the latent Gaussian.

    ``neutral_samples`` is a sequence of ``(e, theta)`` pairs or an (n, 56) array.
    Per-epoch training MSE is kept in ``model.history``.
    """
    config = config or NEDConfig()
    data = _as_matrix(neutral_samples)
    if len(data) < 2:
        raise ValidationError("need at least two neutral samples")
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = NEDModel(config.latent_dim, config.hidden)
    x_all = torch.as_tensor(data, dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    best, best_state = np.inf, None
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            x = x_all[order[start:start + config.batch_size]]
            loss = torch.mean((model(x) - x) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(x)
        mse = total / len(data)
        model.history.append(mse)
        if mse < best:
            best, best_state = mse, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    with torch.no_grad():
        z = model.encode(x_all)
        model.latent_mean.copy_(z.mean(0))
        model.latent_std.copy_(z.std(0, unbiased=False).clamp_min(1e-6))
        model.fitted.fill_(True)
    return model


def reconstruction_mse(model: NEDModel, data) -> np.ndarray:
    """Per-sample reconstruction MSE for an (n, 56) array."""
    x = torch.as_tensor(_as_matrix(data), dtype=torch.float32)
    with torch.no_grad():
        return torch.mean((model(x) - x) ** 2, dim=1).double().numpy()


def generate_neutral(model: NEDModel, seed: int):
    """Decode a draw from the fitted latent Gaussian: returns ``(e (50,), theta (6,))``."""
    if not bool(model.fitted):
        raise StateError("NED model has not been trained")
    gen = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(model.latent_dim, generator=gen)
    with torch.no_grad():
        out = model.decode(model.latent_mean + model.latent_std * eps).double().numpy()
    return out[:EXPR_DIM], out[EXPR_DIM:]


def flame_zero_neutral(pose) -> tuple[np.ndarray, np.ndarray]:
    """Alternative neutral: zero expression and jaw, global rotation kept."""
    theta = np.array(pose, dtype=np.float64).reshape(-1).copy()
    if theta.shape != (POSE_DIM,):
        raise ValidationError(f"pose must have {POSE_DIM} entries")
    theta[JAW] = 0.0
    return np.zeros(EXPR_DIM), theta
