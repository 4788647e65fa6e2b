"""Attention primitives of the Res-Trans block.

Feature maps are channels-last ``(b, t, h, w, c)``; reference features are
``(b, h, w, c)``. The conv parts of the network work on ``(b*t, c, h, w)``.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument


def scaled_dot_product(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d)) v with the softmax evaluated in float64.

    ``mask`` is boolean, broadcastable to (..., n_q, n_k); False blocks a key.
    """
    logits = (q.double() @ k.double().transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1).to(v.dtype)
    return weights @ v


class Attention(nn.Module):
    """Multi-head attention; ``context=None`` makes it self-attention."""

    def __init__(self, query_dim: int, context_dim: int | None = None, heads: int = 4,
                 dim_head: int | None = None):
        super().__init__()
        dim_head = dim_head or max(query_dim // heads, 1)
        inner = heads * dim_head
        if inner % heads:
            raise InvalidArgument("head count must divide the inner dimension")
        self.heads = heads
        self.query_dim = query_dim
        self.context_dim = context_dim or query_dim
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(self.context_dim, inner, bias=False)
        self.to_v = nn.Linear(self.context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, -1).transpose(1, 2)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        out = scaled_dot_product(q, k, v, mask)
        b, _, n, _ = out.shape
        return self.to_out(out.transpose(1, 2).reshape(b, n, -1))


def _check_map(x, name="x"):
    if x.ndim != 5 or min(x.shape) < 1:
        raise InvalidArgument(f"{name} must be (b, t, h, w, c), got {tuple(x.shape)}")


def self_attention(x: torch.Tensor, attn: Attention) -> torch.Tensor:
    """Per-frame self-attention over the h*w positions of each frame."""
    _check_map(x)
    b, t, h, w, c = x.shape
    out = attn(x.reshape(b * t, h * w, c))
    return out.view(b, t, h, w, c)


def spatial_attention_fuse(x1: torch.Tensor, x2: torch.Tensor, attn: Attention,
                           mask_reference: bool = False) -> torch.Tensor:
    """Self-attention over [x1 | x2] concatenated along w; keeps the x1 half.

    x2 is repeated for every frame of x1. ``mask_reference`` blocks every key
    that comes from x2 (test hook: the op then reduces to plain self-attention).
    """
    _check_map(x1, "x1")
    if x2.ndim != 4:
        raise InvalidArgument(f"x2 must be (b, h, w, c), got {tuple(x2.shape)}")
    b, t, h, w, c = x1.shape
    if tuple(x2.shape) != (b, h, w, c):
        raise InvalidArgument(
            f"reference feature {tuple(x2.shape)} does not match feature map {(b, h, w, c)}")
    ref = x2.unsqueeze(1).expand(b, t, h, w, c)
    seq = torch.cat([x1, ref], dim=3).reshape(b * t, h * 2 * w, c)
    mask = None
    if mask_reference:
        from_x1 = torch.zeros(h, 2 * w, dtype=torch.bool, device=x1.device)
        from_x1[:, :w] = True
        mask = from_x1.reshape(1, 1, 1, h * 2 * w)
    out = attn(seq, mask=mask).view(b, t, h, 2 * w, c)
    return out[:, :, :, :w]


def cross_attention(x: torch.Tensor, tokens: torch.Tensor, attn: Attention) -> torch.Tensor:
    """Every position of x attends over the per-sample token set (b, n_tok, d)."""
    _check_map(x)
    b, t, h, w, c = x.shape
    if tokens.ndim != 3 or tokens.shape[0] != b or tokens.shape[-1] != attn.context_dim:
        raise InvalidArgument(
            f"tokens {tuple(tokens.shape)} incompatible with batch {b} / dim {attn.context_dim}")
    out = attn(x.reshape(b, t * h * w, c), context=tokens)
    return out.view(b, t, h, w, c)


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


class TemporalAttention(nn.Module):
    """Pre-norm self-attention along t at every spatial location, residual."""

    def __init__(self, channels: int, heads: int = 4, positional: bool = True, max_len: int = 64):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = Attention(channels, heads=heads)
        self.positional = positional
        self.register_buffer("pe", sinusoidal_encoding(max_len, channels), persistent=False)

    def forward(self, x):
        return temporal_attention(x, self)


def temporal_attention(x: torch.Tensor, params: TemporalAttention) -> torch.Tensor:
    _check_map(x)
    b, t, h, w, c = x.shape
    y = x.permute(0, 2, 3, 1, 4).reshape(b * h * w, t, c)
    n = params.norm(y)
    if params.positional:
        if t > params.pe.shape[0]:
            raise InvalidArgument(f"{t} frames exceed positional table of {params.pe.shape[0]}")
        n = n + params.pe[:t].to(n.dtype)
    out = params.attn(n).view(b, h, w, t, c).permute(0, 3, 1, 2, 4)
    return x + out


def _groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class ResBlock(nn.Module):
    """GroupNorm-SiLU-conv twice, with the timestep embedding added in between."""

    def __init__(self, cin: int, cout: int, t_emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(t_emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout, groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ResTransBlock(nn.Module):
    """conv -> spatial attention -> cross-attention -> feed-forward -> temporal.

    With ``attention=False`` only the residual conv block runs (no fusion site).
    """

    def __init__(self, cin: int, cout: int, t_emb_dim: int, context_dim: int, heads: int = 4,
                 temporal: bool = True, attention: bool = True, groups: int = 8,
                 temporal_max_len: int = 64):
        super().__init__()
        self.res = ResBlock(cin, cout, t_emb_dim, groups)
        self.has_attention = attention
        if attention:
            self.norm1 = nn.LayerNorm(cout)
            self.attn1 = Attention(cout, heads=heads)
            self.norm2 = nn.LayerNorm(cout)
            self.attn2 = Attention(cout, context_dim, heads=heads)
            self.norm3 = nn.LayerNorm(cout)
            self.ff = nn.Sequential(nn.Linear(cout, 4 * cout), nn.GELU(), nn.Linear(4 * cout, cout))
        self.temporal = (TemporalAttention(cout, heads, max_len=temporal_max_len)
                         if temporal and attention else None)

    def forward(self, h, temb, tokens, num_frames: int = 1, ref=None, record=None,
                use_temporal: bool = False, mask_reference: bool = False):
        """h: (b*t, c, H, W). ``record`` collects this site's normed features."""
        h = self.res(h, temb)
        if not self.has_attention:
            return h
        bt, c, hh, ww = h.shape
        b = bt // num_frames
        x = h.permute(0, 2, 3, 1).reshape(b, num_frames, hh, ww, c)
        x = res_trans_attention(self, x, ref, tokens, record, use_temporal, mask_reference)
        return x.reshape(bt, hh, ww, c).permute(0, 3, 1, 2)


def res_trans_attention(block: ResTransBlock, x, ref, tokens, record=None,
                        use_temporal=False, mask_reference=False):
    """Transformer half of the block on a (b, t, h, w, c) map."""
    n = block.norm1(x)
    if record is not None:
        record.append(n[:, 0])
    if ref is not None:
        x = x + spatial_attention_fuse(n, ref, block.attn1, mask_reference)
    else:
        x = x + self_attention(n, block.attn1)
    x = x + cross_attention(block.norm2(x), tokens, block.attn2)
    x = x + block.ff(block.norm3(x))
    if use_temporal:
        if block.temporal is None:
            raise InvalidArgument("block was built without a temporal layer")
        x = temporal_attention(x, block.temporal)
    return x


def res_trans_block(x, ref, tokens, params: ResTransBlock, use_temporal: bool = False,
                    temb=None):
    """Functional form over a (b, t, h, w, c) map; shape preserved when cin == cout."""
    _check_map(x)
    b, t, h, w, c = x.shape
    if temb is None:
        temb = torch.zeros(b * t, params.res.emb.in_features, dtype=x.dtype)
    y = params(x.permute(0, 1, 4, 2, 3).reshape(b * t, c, h, w), temb, tokens, num_frames=t,
               ref=ref, use_temporal=use_temporal)
    cout = y.shape[1]
    return y.view(b, t, cout, h, w).permute(0, 1, 3, 4, 2)
