"""Instruction-to-facial-expression-transition CVAE.

Expression and pose each get their own encoder/decoder MLP pair. An IFED
instance conditions the encoders on the ground-truth anchors and the
instruction; a second IFED instance conditions the decoders on the (linearly
lifted) latent codes and the instruction. Training minimises

    L_e + L_p + L_v

where L_e/L_p are MSE plus the closed-form Gaussian KL term and L_v compares
posed head-model vertices of the ground truth and the reconstruction.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive
from .dataset import JAW, AnchorPair, DatasetManifest
from .errors import ConfigurationError, DomainError, ShapeError, TrainingDivergedError, ValidationError
from .head_model import HeadModel
from .ifed import IFED, ConditionalVectors, IFEDConfig, TextOnlyCondition, init_weights

log = logging.getLogger(__name__)


@dataclass
class I2FETConfig:
    expr_dim: int = 50
    pose_dim: int = 6
    latent_dim: int = 16
    m_tokens: int = 2
    hidden: int = 256
    text_rows: int = 16
    text_dim: int = 64
    model_dim: int = 64
    heads: int = 4
    n_facial_layers: int = 2
    n_text_layers: int = 1
    n_caft_layers: int = 1
    use_positional_embedding: bool = True
    ifed_enabled: bool = True

    def ifed_config(self, facial_width: int) -> IFEDConfig:
        return IFEDConfig(facial_width=facial_width, text_dim=self.text_dim, model_dim=self.model_dim,
                          heads=self.heads, n_facial_layers=self.n_facial_layers,
                          n_text_layers=self.n_text_layers, n_caft_layers=self.n_caft_layers,
                          m_tokens=self.m_tokens, use_positional_embedding=self.use_positional_embedding,
                          expr_dim=self.expr_dim, pose_dim=self.pose_dim)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 8e-4
    seed: int = 0
    use_pose_loss: bool = True
    use_vertex_loss: bool = True
    ifed_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigurationError("epochs, batch_size and learning_rate must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class LatentSample(NamedTuple):
    mu: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor
    z_tilde: torch.Tensor


def mlp(d_in: int, hidden: int, d_out: int, depth: int = 3) -> nn.Sequential:
    layers, width = [], d_in
    for _ in range(depth - 1):
        layers += [nn.Linear(width, hidden), nn.GELU()]
        width = hidden
    layers.append(nn.Linear(width, d_out))
    return nn.Sequential(*layers)


class I2FETModel(nn.Module):
    def __init__(self, cfg: I2FETConfig | None = None):
        super().__init__()
        cfg = cfg or I2FETConfig()
        self.cfg = cfg
        e, p, z, h = cfg.expr_dim, cfg.pose_dim, cfg.latent_dim, cfg.hidden
        enc_width = e + 3  # expression + jaw rotation
        dec_width = p + e
        if cfg.ifed_enabled:
            self.enc_ifed = IFED(cfg.ifed_config(enc_width))
            self.dec_ifed = IFED(cfg.ifed_config(dec_width))
        else:
            self.enc_ifed = TextOnlyCondition(cfg.ifed_config(enc_width))
            self.dec_ifed = TextOnlyCondition(cfg.ifed_config(dec_width))
        self.enc_e = mlp(e + e, h, 2 * z)
        self.enc_p = mlp(p + p, h, 2 * z)
        self.t_e = nn.Linear(z, e)
        self.t_p = nn.Linear(z, p)
        self.dec_e = mlp(z + e, h, e)
        self.dec_p = mlp(z + p, h, p)
        for module in (self.enc_e, self.enc_p, self.t_e, self.t_p, self.dec_e, self.dec_p):
            module.apply(_mlp_init)

    @property
    def dtype(self):
        return self.t_e.weight.dtype

    def _check_tokens(self, x, width, name):
        if x.ndim != 3 or x.shape[1:] != (self.cfg.m_tokens, width):
            raise ShapeError(f"{name} must be (B, {self.cfg.m_tokens}, {width}), got {tuple(x.shape)}")

    def encode(self, e, theta, x_t, generator=None):
        """Posterior samples for expression and pose latents."""
        self._check_tokens(e, self.cfg.expr_dim, "expression")
        self._check_tokens(theta, self.cfg.pose_dim, "pose")
        cond = self.enc_ifed(torch.cat([e, theta[..., JAW]], dim=-1), x_t)
        mu_e, logvar_e = self.enc_e(torch.cat([e, cond.expr], dim=-1)).chunk(2, dim=-1)
        mu_p, logvar_p = self.enc_p(torch.cat([theta, cond.pose], dim=-1)).chunk(2, dim=-1)
        out = []
        for mu, logvar in ((mu_e, logvar_e), (mu_p, logvar_p)):
            sigma = torch.exp(0.5 * logvar)
            z = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            out.append(LatentSample(mu, sigma, z, reparameterize(mu, sigma, z)))
        return out[0], out[1]

    def decoder_condition(self, zt_e, zt_p, x_t) -> ConditionalVectors:
        self._check_tokens(zt_e, self.cfg.latent_dim, "expression latent")
        self._check_tokens(zt_p, self.cfg.latent_dim, "pose latent")
        return self.dec_ifed(torch.cat([self.t_p(zt_p), self.t_e(zt_e)], dim=-1), x_t)

    def decode(self, zt_e, zt_p, cond: ConditionalVectors):
        if cond.expr.shape[:2] != zt_e.shape[:2] or cond.pose.shape[:2] != zt_p.shape[:2]:
            raise ShapeError("latent and condition token axes differ")
        e_hat = self.dec_e(torch.cat([zt_e, cond.expr], dim=-1))
        theta_hat = self.dec_p(torch.cat([zt_p, cond.pose], dim=-1))
        return e_hat, theta_hat

    def forward(self, e, theta, x_t, generator=None):
        lat_e, lat_p = self.encode(e, theta, x_t, generator)
        cond = self.decoder_condition(lat_e.z_tilde, lat_p.z_tilde, x_t)
        e_hat, theta_hat = self.decode(lat_e.z_tilde, lat_p.z_tilde, cond)
        return {"lat_e": lat_e, "lat_p": lat_p, "e_hat": e_hat, "theta_hat": theta_hat}

    @torch.no_grad()
    def sample(self, x_t, seeds):
        """Prior sampling: one standard-normal latent per row of ``x_t`` drawn
        from the matching seed."""
        b, m, k = x_t.shape[0], self.cfg.m_tokens, self.cfg.latent_dim
        z = torch.empty(b, 2, m, k, dtype=self.dtype)
        for i, seed in enumerate(seeds):
            gen = torch.Generator().manual_seed(int(seed))
            z[i] = torch.randn(2, m, k, generator=gen, dtype=self.dtype)
        z_e, z_p = z[:, 0], z[:, 1]
        cond = self.decoder_condition(z_e, z_p, x_t)
        return self.decode(z_e, z_p, cond)

    def save(self, path, extra_meta: dict | None = None) -> Path:
        tensors = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"kind": "i2fet", "config": self.cfg.to_dict(), **(extra_meta or {})}
        return save_archive(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "I2FETModel":
        tensors, meta = load_archive(path)
        model = cls(I2FETConfig.from_dict(meta["config"]))
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})
        model.eval()
        return model


def _mlp_init(module):
    if isinstance(module, nn.Linear):
        nn.init.kaiming_uniform_(module.weight, a=math.sqrt(5))
        nn.init.zeros_(module.bias)


def build_model(cfg: I2FETConfig, seed: int) -> I2FETModel:
    """Seeded construction that leaves the global torch RNG untouched."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = I2FETModel(cfg)
    return model


def reparameterize(mu, sigma, z):
    """``sigma * z + mu`` with shape checking."""
    if mu.shape != sigma.shape or mu.shape != z.shape:
        raise ShapeError(f"shapes differ: mu {tuple(mu.shape)}, sigma {tuple(sigma.shape)}, z {tuple(z.shape)}")
    return sigma * z + mu


def kl_term(mu, sigma):
    """0.5 * [-sum(log sigma^2 + 1) + sum(sigma^2) + sum(mu^2)] over all elements.

    Accepts numpy arrays (returns float) or torch tensors (returns a 0-d tensor).
    """
    if isinstance(mu, torch.Tensor) or isinstance(sigma, torch.Tensor):
        mu, sigma = torch.as_tensor(mu), torch.as_tensor(sigma)
        if not bool((sigma > 0).all()):
            raise DomainError("sigma must be strictly positive")
        var = sigma * sigma
        return 0.5 * (-(torch.log(var) + 1).sum() + var.sum() + (mu * mu).sum())
    mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    if not (sigma > 0).all():
        raise DomainError("sigma must be strictly positive")
    var = sigma * sigma
    return float(0.5 * (-(np.log(var) + 1).sum() + var.sum() + (mu * mu).sum()))


@dataclass
class LossFlags:
    use_pose_loss: bool = True
    use_vertex_loss: bool = True


def loss_from_outputs(out, batch, head_layer=None, flags: LossFlags | None = None):
    """Combine forward outputs into ``(total, components)``.

    KL terms are summed over token and latent axes and averaged over the batch.
    """
    flags = flags or LossFlags()
    e, theta = batch["expr"], batch["pose"]
    b = e.shape[0]
    lat_e, lat_p = out["lat_e"], out["lat_p"]
    mse_e = torch.mean((e - out["e_hat"]) ** 2)
    kl_e = kl_term(lat_e.mu, lat_e.sigma) / b
    comps = {"mse_e": mse_e, "kl_e": kl_e, "L_e": mse_e + kl_e}
    zero = torch.zeros((), dtype=e.dtype)
    if flags.use_pose_loss:
        mse_p = torch.mean((theta - out["theta_hat"]) ** 2)
        kl_p = kl_term(lat_p.mu, lat_p.sigma) / b
        comps.update(mse_p=mse_p, kl_p=kl_p, L_p=mse_p + kl_p)
    else:
        comps.update(mse_p=zero, kl_p=zero, L_p=zero)
    if flags.use_vertex_loss:
        shape = batch.get("shape")
        if shape is None or head_layer is None:
            raise ConfigurationError("vertex loss needs per-sample shape parameters and a head model")
        m = e.shape[1]
        phi = shape.unsqueeze(1).expand(-1, m, -1).reshape(b * m, -1)
        v = head_layer(phi, e.reshape(b * m, -1), theta.reshape(b * m, -1))
        v_hat = head_layer(phi, out["e_hat"].reshape(b * m, -1), out["theta_hat"].reshape(b * m, -1))
        comps["L_v"] = torch.mean((v - v_hat) ** 2)
    else:
        comps["L_v"] = zero
    total = comps["L_e"] + comps["L_p"] + comps["L_v"]
    return total, comps


def loss_total(model, batch, head_model=None, flags: LossFlags | None = None, generator=None):
    """Forward pass plus loss. ``head_model`` may be a HeadModel or its torch layer."""
    layer = head_model.layer(model.dtype) if isinstance(head_model, HeadModel) else head_model
    out = model(batch["expr"], batch["pose"], batch["emb"], generator)
    return loss_from_outputs(out, batch, layer, flags)


def embed_manifest(manifest: DatasetManifest, provider) -> np.ndarray:
    """Embedding tensor (S, L, d) for every sample, computed once per unique key."""
    cache = {}
    for s in manifest.samples:
        if s.embedding_key not in cache:
            cache[s.embedding_key] = provider.embed(s.embedding_key)
    return np.stack([cache[s.embedding_key] for s in manifest.samples])


def to_batch(arrays: dict, idx, dtype) -> dict:
    return {k: torch.as_tensor(arrays[k][idx], dtype=dtype) for k in ("expr", "pose", "shape", "emb")}


def _stream_seed(*parts) -> int:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


class TrainingLog:
    COLUMNS = ("epoch", "train_total", "train_e", "train_p", "train_v",
               "val_total", "val_e", "val_p", "val_v")

    def __init__(self):
        self.rows: list[dict] = []
        self.best_epoch: int | None = None

    def append(self, row: dict):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def __eq__(self, other):
        return isinstance(other, TrainingLog) and self.rows == other.rows and self.best_epoch == other.best_epoch

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in self.COLUMNS})


def _accumulate(sums, comps, weight):
    for key, name in (("total", None), ("e", "L_e"), ("p", "L_p"), ("v", "L_v")):
        value = comps["total"] if name is None else comps[name]
        sums[key] = sums.get(key, 0.0) + float(value) * weight


def evaluate_loss(model, arrays, idx, head_layer, flags, seed, batch_size=512):
    """Mean loss components over ``idx`` with a seeded posterior draw."""
    model.eval()
    sums = {}
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            batch = to_batch(arrays, chunk, model.dtype)
            total, comps = loss_total(model, batch, head_layer, flags, gen)
            _accumulate(sums, dict(comps, total=total), len(chunk))
    return {k: v / len(idx) for k, v in sums.items()}


def train(model: I2FETModel, dataset: DatasetManifest, head_model: HeadModel | None, config: TrainConfig,
          provider=None, embeddings: np.ndarray | None = None, progress=None):
    """Minibatch Adam training; returns the model holding its best-validation
    weights and the per-epoch log."""
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if config.ifed_enabled != model.cfg.ifed_enabled:
        raise ConfigurationError("TrainConfig.ifed_enabled disagrees with the model architecture")
    if dataset.splits is None:
        raise ValidationError("dataset must be split before training")
    train_idx, val_idx = dataset.indices("train"), dataset.indices("val")
    if len(train_idx) == 0:
        raise ValidationError("training split is empty")
    if len(val_idx) == 0:
        val_idx = train_idx
    if embeddings is None:
        if provider is None:
            raise ConfigurationError("need an embedding provider or precomputed embeddings")
        embeddings = embed_manifest(dataset, provider)
    arrays = dict(dataset.arrays(), emb=embeddings)
    if embeddings.shape[1:] != (model.cfg.text_rows, model.cfg.text_dim):
        raise ShapeError(f"embeddings are {embeddings.shape[1:]}, model expects "
                         f"{(model.cfg.text_rows, model.cfg.text_dim)}")
    flags = LossFlags(config.use_pose_loss, config.use_vertex_loss)
    head_layer = None
    if config.use_vertex_loss:
        if head_model is None:
            raise ConfigurationError("vertex loss enabled but no head model given")
        head_layer = head_model.layer(model.dtype)

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    log_ = TrainingLog()
    best_val, best_state = math.inf, None
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = train_idx[np.random.default_rng([config.seed, epoch]).permutation(len(train_idx))]
        sums = {}
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = order[start:start + config.batch_size]
            gen = torch.Generator().manual_seed(_stream_seed(config.seed, epoch, b))
            total, comps = loss_total(model, to_batch(arrays, chunk, model.dtype), head_layer, flags, gen)
            if not torch.isfinite(total):
                raise TrainingDivergedError(epoch)
            opt.zero_grad()
            total.backward()
            opt.step()
            _accumulate(sums, {k: v.detach() for k, v in dict(comps, total=total).items()}, len(chunk))
        val = evaluate_loss(model, arrays, val_idx, head_layer, flags, _stream_seed(config.seed, epoch, "val"))
        if not math.isfinite(val["total"]):
            raise TrainingDivergedError(epoch, "validation loss became non-finite")
        row = {"epoch": epoch}
        row.update({f"train_{k}": v / len(order) for k, v in sums.items()})
        row.update({f"val_{k}": v for k, v in val.items()})
        log_.append(row)
        if val["total"] < best_val:
            best_val, best_state = val["total"], copy.deepcopy(model.state_dict())
            log_.best_epoch = epoch
        if progress:
            progress(row)
        log.debug("epoch %d train %.5f val %.5f", epoch, row["train_total"], row["val_total"])
    model.load_state_dict(best_state)
    model.eval()
    return model, log_


def generate(model: I2FETModel, x_t, rng_seed: int) -> AnchorPair:
    """Sample one anchor pair for a single ``(L, d)`` instruction embedding."""
    x = torch.as_tensor(np.asarray(x_t), dtype=model.dtype).unsqueeze(0)
    model.eval()
    e_hat, theta_hat = model.sample(x, [rng_seed])
    e_hat, theta_hat = e_hat[0].double().numpy(), theta_hat[0].double().numpy()
    return AnchorPair(e_hat[0], e_hat[1], theta_hat[0], theta_hat[1])


def generate_batch(model: I2FETModel, embeddings, seeds, batch_size=512):
    """Vectorised :func:`generate`: returns (S, m, 50) expressions and (S, m, 6) poses."""
    model.eval()
    embeddings = np.asarray(embeddings)
    es, ps = [], []
    for start in range(0, len(embeddings), batch_size):
        x = torch.as_tensor(embeddings[start:start + batch_size], dtype=model.dtype)
        e_hat, theta_hat = model.sample(x, seeds[start:start + batch_size])
        es.append(e_hat.double().numpy())
        ps.append(theta_hat.double().numpy())
    return np.concatenate(es), np.concatenate(ps)


def export_latents(model: I2FETModel, manifest: DatasetManifest, embeddings, path, split_name="test"):
    """Write posterior means per sample/token with labels to CSV (for t-SNE etc.)."""
    idx = manifest.indices(split_name) if manifest.splits is not None else np.arange(len(manifest))
    arrays = manifest.arrays()
    embeddings = np.asarray(embeddings)
    if len(embeddings) == len(manifest) and len(idx) != len(manifest):
        embeddings = embeddings[idx]
    if len(embeddings) != len(idx):
        raise ShapeError(f"{len(embeddings)} embeddings for {len(idx)} samples in split {split_name!r}")
    model.eval()
    with torch.no_grad():
        x = {"expr": torch.as_tensor(arrays["expr"][idx], dtype=model.dtype),
             "pose": torch.as_tensor(arrays["pose"][idx], dtype=model.dtype),
             "emb": torch.as_tensor(embeddings, dtype=model.dtype)}
        lat_e, lat_p = model.encode(x["expr"], x["pose"], x["emb"], torch.Generator().manual_seed(0))
    k = model.cfg.latent_dim
    header = ["sample", "token", "label"] + [f"mu_e_{i}" for i in range(k)] + [f"mu_p_{i}" for i in range(k)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row, i in enumerate(idx):
            labels = manifest.samples[i].labels
            for t in range(model.cfg.m_tokens):
                writer.writerow([int(i), t, labels[t]] + lat_e.mu[row, t].tolist() + lat_p.mu[row, t].tolist())
    return Path(path)
