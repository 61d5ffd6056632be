"""Instruction-driven facial expression decomposer (IFED).

Two transformer branches, one over facial-parameter tokens and one over the
instruction embedding, exchange information through symmetric cross-attention
(CAFT). Their outputs are layer-normalised, concatenated on the feature axis
and projected to an expression condition (m x 50) and a pose condition (m x 6).

All tensors carry a leading batch axis: facial tokens are ``(B, m, w_f)`` and
text embeddings ``(B, L, d_t)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .errors import ConfigurationError, ShapeError

LN_EPS = 1e-5


@dataclass
class IFEDConfig:
    facial_width: int = 53
    text_dim: int = 64
    model_dim: int = 64
    heads: int = 4
    n_facial_layers: int = 2
    n_text_layers: int = 1
    n_caft_layers: int = 1
    m_tokens: int = 2
    use_positional_embedding: bool = True
    ffn_mult: int = 2
    expr_dim: int = 50
    pose_dim: int = 6

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        counts = (self.facial_width, self.text_dim, self.model_dim, self.heads, self.n_facial_layers,
                  self.n_text_layers, self.n_caft_layers, self.m_tokens, self.ffn_mult)
        if min(counts) < 1:
            raise ConfigurationError("all IFED sizes and layer counts must be >= 1")

    def to_dict(self):
        return asdict(self)


class ConditionalVectors(NamedTuple):
    expr: torch.Tensor  # (B, m, 50)
    pose: torch.Tensor  # (B, m, 6)


def init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    """Multi-head attention with separate query and key/value sources."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, context):
        b, n, d = query.shape
        h = self.heads
        q = self.q(query).view(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).view(b, context.shape[1], 2, h, d // h).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, n, d))


class EncoderLayer(nn.Module):
    """Pre-norm block: y = x + MSA(LN(x)); out = y + FFN(LN(y))."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        y = x + self.attn(h, h)
        return y + self.ffn(self.norm2(y))


class Branch(nn.Module):
    """Width-preserving transformer stack: project in, encode, project out, add residual."""

    def __init__(self, width: int, cfg: IFEDConfig, n_layers: int):
        super().__init__()
        self.proj_in = nn.Linear(width, cfg.model_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.m_tokens, cfg.model_dim)) if cfg.use_positional_embedding else None
        self.layers = nn.ModuleList(EncoderLayer(cfg.model_dim, cfg.heads, cfg.ffn_mult) for _ in range(n_layers))
        self.norm = nn.LayerNorm(cfg.model_dim, eps=LN_EPS)
        self.proj_out = nn.Linear(cfg.model_dim, width)

    def forward(self, x):
        h = self.proj_in(x)
        if self.pos is not None:
            h = h + self.pos
        for layer in self.layers:
            h = layer(h)
        return x + self.proj_out(self.norm(h))


class CAFTLayer(nn.Module):
    """One symmetric cross-attention exchange between the facial and text branches."""

    def __init__(self, cfg: IFEDConfig):
        super().__init__()
        wf, dt, d = cfg.facial_width, cfg.text_dim, cfg.model_dim
        self.h_f2t = nn.Linear(wf, d)
        self.h_t2f = nn.Linear(dt, d)
        self.norm_f = nn.LayerNorm(d, eps=LN_EPS)
        self.norm_t = nn.LayerNorm(d, eps=LN_EPS)
        self.ca_f = Attention(d, cfg.heads)
        self.ca_t = Attention(d, cfg.heads)
        self.g_t2f = nn.Linear(d, wf)
        self.g_f2t = nn.Linear(d, dt)
        self.reduce_f = nn.Linear(2 * wf, wf)
        self.reduce_t = nn.Linear(2 * dt, dt)

    def forward(self, xf, xt):
        yf = self.h_f2t(xf)
        yt = self.h_t2f(xt)
        nf, nt = self.norm_f(yf), self.norm_t(yt)
        # queries come from the own branch; keys/values from both branches' tokens
        af = self.ca_f(nf, torch.cat([nf, nt], dim=1)) + yf
        at = self.ca_t(nt, torch.cat([nt, nf], dim=1)) + yt
        out_f = self.reduce_f(torch.cat([self.g_t2f(af), xf], dim=-1))
        out_t = self.reduce_t(torch.cat([self.g_f2t(at), xt], dim=-1))
        return out_f, out_t


class IFED(nn.Module):
    def __init__(self, cfg: IFEDConfig):
        super().__init__()
        self.cfg = cfg
        self.facial = Branch(cfg.facial_width, cfg, cfg.n_facial_layers)
        self.text_norm = nn.LayerNorm(cfg.text_dim, eps=LN_EPS)
        self.text_proj = nn.Linear(cfg.text_dim, cfg.text_dim)  # P_t
        self.text = Branch(cfg.text_dim, cfg, cfg.n_text_layers)
        self.caft = nn.ModuleList(CAFTLayer(cfg) for _ in range(cfg.n_caft_layers))
        self.fuse_norm_t = nn.LayerNorm(cfg.text_dim, eps=LN_EPS)
        self.fuse_norm_f = nn.LayerNorm(cfg.facial_width, eps=LN_EPS)
        self.proj_e = nn.Linear(cfg.text_dim + cfg.facial_width, cfg.expr_dim)
        self.proj_p = nn.Linear(cfg.text_dim + cfg.facial_width, cfg.pose_dim)
        self.apply(init_weights)
        for branch in (self.facial, self.text):
            if branch.pos is not None:
                nn.init.trunc_normal_(branch.pos, std=0.02, a=-0.04, b=0.04)

    def _check(self, x, width, name):
        if x.ndim != 3 or x.shape[-1] != width:
            raise ShapeError(f"{name} must be (B, rows, {width}), got {tuple(x.shape)}")

    def encode_facial(self, x_f):
        self._check(x_f, self.cfg.facial_width, "facial tokens")
        if x_f.shape[1] != self.cfg.m_tokens:
            raise ShapeError(f"expected {self.cfg.m_tokens} facial tokens, got {x_f.shape[1]}")
        return self.facial(x_f)

    def encode_text(self, x_t):
        self._check(x_t, self.cfg.text_dim, "text embedding")
        # normalising the pooled vector makes the branch indifferent to the provider's scale
        pooled = self.text_norm(x_t.mean(dim=1, keepdim=True)).expand(-1, self.cfg.m_tokens, -1)
        return self.text(self.text_proj(pooled))

    def cross(self, xf, xt):
        self._check(xf, self.cfg.facial_width, "facial features")
        self._check(xt, self.cfg.text_dim, "text features")
        if xf.shape[:2] != xt.shape[:2]:
            raise ShapeError(f"token axes differ: {tuple(xf.shape[:2])} vs {tuple(xt.shape[:2])}")
        for layer in self.caft:
            xf, xt = layer(xf, xt)
        return xf, xt

    def decompose(self, out_f, out_t) -> ConditionalVectors:
        self._check(out_f, self.cfg.facial_width, "facial features")
        self._check(out_t, self.cfg.text_dim, "text features")
        if out_f.shape[:2] != out_t.shape[:2]:
            raise ShapeError("token axes differ between branches")
        fused = torch.cat([self.fuse_norm_t(out_t), self.fuse_norm_f(out_f)], dim=-1)
        return ConditionalVectors(self.proj_e(fused), self.proj_p(fused))

    def forward(self, x_f, x_t) -> ConditionalVectors:
        xf = self.encode_facial(x_f)
        xt = self.encode_text(x_t)
        return self.decompose(*self.cross(xf, xt))


class TextOnlyCondition(nn.Module):
    """Ablation stand-in for IFED: the pooled instruction, linearly projected and
    replicated over the token axis. Token rows are identical by construction."""

    def __init__(self, cfg: IFEDConfig):
        super().__init__()
        self.cfg = cfg
        self.text_norm = nn.LayerNorm(cfg.text_dim, eps=LN_EPS)
        self.proj_e = nn.Linear(cfg.text_dim, cfg.expr_dim)
        self.proj_p = nn.Linear(cfg.text_dim, cfg.pose_dim)
        self.apply(init_weights)

    def forward(self, x_f, x_t) -> ConditionalVectors:
        if x_t.ndim != 3 or x_t.shape[-1] != self.cfg.text_dim:
            raise ShapeError(f"text embedding must be (B, L, {self.cfg.text_dim}), got {tuple(x_t.shape)}")
        pooled = self.text_norm(x_t.mean(dim=1, keepdim=True)).expand(-1, x_f.shape[1], -1)
        return ConditionalVectors(self.proj_e(pooled), self.proj_p(pooled))


def _batched(fn):
    """Let the functional wrappers accept unbatched (rows, width) inputs."""

    def wrapper(model, *xs):
        squeeze = all(x.ndim == 2 for x in xs)
        out = fn(model, *(x.unsqueeze(0) if squeeze else x for x in xs))
        if not squeeze:
            return out
        if isinstance(out, tuple):
            return type(out)(*(o.squeeze(0) for o in out)) if hasattr(out, "_fields") else tuple(o.squeeze(0) for o in out)
        return out.squeeze(0)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def facial_encoder(model: IFED, x_f):
    """Facial branch: (m, w_f) -> (m, w_f)."""
    return model.encode_facial(x_f)


@_batched
def text_encoder(model: IFED, x_t):
    """Text branch: (L, d_t) -> (m, d_t)."""
    return model.encode_text(x_t)


@_batched
def caft(model: IFED, x_f, x_t):
    """Cross-attention exchange: ((m, w_f), (m, d_t)) -> same shapes."""
    return model.cross(x_f, x_t)


@_batched
def fuse_and_decompose(model: IFED, out_f, out_t) -> ConditionalVectors:
    return model.decompose(out_f, out_t)


@_batched
def ifed_forward(model: IFED, x_f, x_t) -> ConditionalVectors:
    return model(x_f, x_t)
