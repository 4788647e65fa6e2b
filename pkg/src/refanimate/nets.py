"""Denoising UNet, ReferenceNet, reference feature cache and Pose Guider."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ResTransBlock
from .errors import InvalidArgument


@dataclass
class UNetConfig:
    latent_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    num_res_blocks: int = 1
    attention_levels: tuple = (0, 1)
    heads: int = 4
    context_dim: int = 64
    t_emb_dim: int = 128
    norm_groups: int = 8
    temporal_max_len: int = 64

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_levels = tuple(self.attention_levels)
        if len(self.channel_mults) < 1 or any(m <= 0 for m in self.channel_mults):
            raise InvalidArgument("channel_mults must be a non-empty list of positive ints")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    def to_json(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_levels"] = list(self.attention_levels)
        return d


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class UNet(nn.Module):
    """SD-style UNet whose every attention block is a fusion site.

    The same class serves as ReferenceNet (``temporal=False``), so both
    networks have identical site order and per-site feature shapes.
    """

    def __init__(self, config: UNetConfig | None = None, temporal: bool = True):
        super().__init__()
        self.config = cfg = config or UNetConfig()
        self.temporal = temporal
        ch = cfg.base_channels
        te = cfg.t_emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(ch, te), nn.SiLU(), nn.Linear(te, te))
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch, 3, padding=1)

        def block(cin, cout, level):
            return ResTransBlock(cin, cout, te, cfg.context_dim, cfg.heads, temporal=temporal,
                                 attention=level in cfg.attention_levels, groups=cfg.norm_groups,
                                 temporal_max_len=cfg.temporal_max_len)

        skip_ch = [ch]
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cur = ch
        for level, mult in enumerate(cfg.channel_mults):
            out = cfg.base_channels * mult
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(block(cur, out, level))
                cur = out
                skip_ch.append(cur)
            self.down.append(blocks)
            if level < cfg.levels - 1:
                self.downsample.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
                skip_ch.append(cur)
        self.mid = block(cur, cur, cfg.levels - 1)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level in reversed(range(cfg.levels)):
            out = cfg.base_channels * cfg.channel_mults[level]
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                blocks.append(block(cur + skip_ch.pop(), out, level))
                cur = out
            self.up.append(blocks)
            if level > 0:
                self.upsample.append(nn.Conv2d(cur, cur, 3, padding=1))
        self.norm_out = nn.GroupNorm(_group_count(cur, cfg.norm_groups), cur)
        self.conv_out = nn.Conv2d(cur, cfg.latent_channels, 3, padding=1)

    def blocks(self) -> list[ResTransBlock]:
        """All Res-Trans blocks in forward order."""
        out = []
        for blocks in self.down:
            out.extend(blocks)
        out.append(self.mid)
        for blocks in self.up:
            out.extend(blocks)
        return out

    def fusion_sites(self) -> list[ResTransBlock]:
        return [b for b in self.blocks() if b.has_attention]

    def forward(self, z, timesteps, tokens, cache=None, use_temporal=False, record=None,
                mask_reference=False):
        """z: (b, t, C, H, W); timesteps: (b,); tokens: (b, n_tok, d)."""
        b, t, c, h, w = z.shape
        temb = self.time_mlp(timestep_embedding(timesteps, self.config.base_channels).to(z.dtype))
        temb = temb.repeat_interleave(t, dim=0)
        site = iter(cache) if cache is not None else None

        def run(block, x):
            ref = None
            if site is not None and block.has_attention:
                ref = next(site)
            return block(x, temb, tokens, num_frames=t, ref=ref, record=record,
                         use_temporal=use_temporal and self.temporal,
                         mask_reference=mask_reference)

        x = self.conv_in(z.reshape(b * t, c, h, w))
        skips = [x]
        for level, blocks in enumerate(self.down):
            for blk in blocks:
                x = run(blk, x)
                skips.append(x)
            if level < len(self.downsample):
                x = self.downsample[level](x)
                skips.append(x)
        x = run(self.mid, x)
        for i, blocks in enumerate(self.up):
            for blk in blocks:
                x = run(blk, torch.cat([x, skips.pop()], dim=1))
            if i < len(self.upsample):
                x = self.upsample[i](F.interpolate(x, scale_factor=2.0, mode="nearest"))
        x = self.conv_out(F.silu(self.norm_out(x)))
        return x.view(b, t, c, h, w)


def _group_count(channels, preferred):
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class ReferenceNet(UNet):
    """Temporal-free UNet copy; counts how often it is run."""

    def __init__(self, config: UNetConfig | None = None):
        super().__init__(config, temporal=False)
        self.forward_calls = 0


def _check_latent(latent, config: UNetConfig, name="latent"):
    if latent.shape[-3] != config.latent_channels:
        raise InvalidArgument(
            f"{name} has {latent.shape[-3]} channels, config expects {config.latent_channels}")
    down = 2 ** (config.levels - 1)
    if latent.shape[-1] % down or latent.shape[-2] % down:
        raise InvalidArgument(f"{name} spatial dims must be divisible by {down}")


def reference_forward(ref_latent: torch.Tensor, tokens: torch.Tensor,
                      refnet: ReferenceNet) -> list[torch.Tensor]:
    """Run ReferenceNet once on a clean latent (t = 0) and return its cache.

    ``ref_latent`` is (C, H, W) or (b, C, H, W); the cache holds one
    (b, h, w, c) feature per fusion site, in site order.
    """
    if ref_latent.ndim == 3:
        ref_latent = ref_latent[None]
    if tokens.ndim == 2:
        tokens = tokens[None]
    if ref_latent.ndim != 4:
        raise InvalidArgument(f"reference latent must be (b, C, H, W), got {tuple(ref_latent.shape)}")
    _check_latent(ref_latent, refnet.config, "reference latent")
    refnet.forward_calls += 1
    record: list[torch.Tensor] = []
    t0 = torch.zeros(ref_latent.shape[0], dtype=ref_latent.dtype)
    refnet(ref_latent[:, None], t0, tokens, record=record)
    return record


class PoseGuider(nn.Module):
    """Four 4x4 convs to latent resolution, then a zero-initialized projection."""

    def __init__(self, out_channels: int = 4, channels=(16, 32, 64, 128), strides=(2, 2, 2, 1),
                 in_channels: int = 3, init_std: float = 0.02):
        super().__init__()
        if len(channels) != len(strides):
            raise InvalidArgument("channels and strides must have equal length")
        self.channels = tuple(channels)
        self.strides = tuple(strides)
        layers = []
        cin = in_channels
        for cout, s in zip(channels, strides):
            if s not in (1, 2):
                raise InvalidArgument(f"unsupported pose guider stride {s}")
            layers.append(nn.Conv2d(cin, cout, 4, stride=s, padding=1 if s == 2 else 0))
            cin = cout
        self.convs = nn.ModuleList(layers)
        self.proj = nn.Conv2d(cin, out_channels, 3, padding=1)
        for conv in self.convs:
            nn.init.normal_(conv.weight, std=init_std)
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    def forward(self, x):
        """x: (N, 3, H, W) skeleton images in [0, 1] -> (N, C_lat, H/s, W/s)."""
        h, w = x.shape[-2:]
        if h % self.total_stride or w % self.total_stride:
            raise InvalidArgument(
                f"skeleton size {h}x{w} not divisible by total stride {self.total_stride}")
        for conv, s in zip(self.convs, self.strides):
            if s == 1:
                # even kernel at stride 1: pad one more on the far side to keep size
                x = F.pad(x, (1, 2, 1, 2))
            x = F.silu(conv(x))
        return self.proj(x)


def pose_guider(skeleton_images: torch.Tensor, params: PoseGuider) -> torch.Tensor:
    return params(skeleton_images)


def pose_guider_param_count(in_channels, channels, out_channels, kernel=4, proj_kernel=3) -> int:
    total, cin = 0, in_channels
    for cout in channels:
        total += kernel * kernel * cin * cout + cout
        cin = cout
    return total + proj_kernel * proj_kernel * cin * out_channels + out_channels


def denoise_forward(noisy, timesteps, cache, tokens, pose_feat, unet: UNet,
                    use_temporal: bool = False, mask_reference: bool = False):
    """Noise prediction for (b, t, C, H, W) latents; pose features are added first.

    ``cache=None`` drops reference fusion (semantic-token-only conditioning).
    """
    if noisy.ndim != 5:
        raise InvalidArgument(f"noisy latents must be (b, t, C, H, W), got {tuple(noisy.shape)}")
    _check_latent(noisy, unet.config, "noisy latent")
    if pose_feat is not None:
        if pose_feat.shape != noisy.shape:
            raise InvalidArgument(
                f"pose features {tuple(pose_feat.shape)} do not match latents {tuple(noisy.shape)}")
        noisy = noisy + pose_feat
    if cache is not None and len(cache) != len(unet.fusion_sites()):
        raise InvalidArgument(
            f"cache has {len(cache)} entries, UNet has {len(unet.fusion_sites())} fusion sites")
    if tokens.ndim == 2:
        tokens = tokens[None].expand(noisy.shape[0], -1, -1)
    if cache is not None and cache[0].shape[0] != noisy.shape[0]:
        cache = [c.expand(noisy.shape[0], *c.shape[1:]) for c in cache]
    return unet(noisy, timesteps, tokens, cache=cache, use_temporal=use_temporal,
                mask_reference=mask_reference)


def temporal_parameter_names(unet: UNet) -> list[str]:
    return [n for n, _ in unet.named_parameters() if ".temporal." in n]


@torch.no_grad()
def init_temporal_zero(unet: UNet) -> UNet:
    """Zero the output projection of every temporal layer (residual identity)."""
    for blk in unet.blocks():
        if blk.temporal is not None:
            blk.temporal.attn.to_out.weight.zero_()
            blk.temporal.attn.to_out.bias.zero_()
    return unet
