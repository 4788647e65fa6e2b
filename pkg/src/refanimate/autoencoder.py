"""Latent autoencoder (x -> z -> x) and the small semantic image encoder.

Both are trained once on sprite frames and then frozen; the diffusion
stages never update them.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument


@dataclass
class AutoencoderConfig:
    channels_lat: int = 4
    widths: tuple = (32, 64, 64)
    # semantic encoder
    n_tok: int = 8
    d_emb: int = 64
    semantic_res: int = 32
    semantic_widths: tuple = (16, 32, 64)

    @property
    def f(self) -> int:
        return 2 ** len(self.widths)


def _block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU(),
    )


class Autoencoder(nn.Module):
    """Conv encoder/decoder with one stride-2 stage per entry of ``widths``.

    ``encode`` returns the posterior mean multiplied by ``scale_factor`` so the
    diffusion model sees roughly unit-variance latents; ``decode`` undoes it.
    Images are (B, 3, H, W) in [0, 1].
    """

    def __init__(self, config: AutoencoderConfig | None = None):
        super().__init__()
        self.config = config = config or AutoencoderConfig()
        w = list(config.widths)
        self.enc_in = nn.Conv2d(3, w[0], 3, padding=1)
        self.enc_stages = nn.ModuleList(
            _block(w[max(i - 1, 0)], w[i], stride=2) for i in range(len(w)))
        self.enc_out = nn.Conv2d(w[-1], 2 * config.channels_lat, 1)

        self.dec_in = nn.Conv2d(config.channels_lat, w[-1], 3, padding=1)
        rev = w[::-1]
        self.dec_stages = nn.ModuleList(
            _block(rev[i], rev[min(i + 1, len(rev) - 1)]) for i in range(len(rev)))
        self.dec_out = nn.Conv2d(rev[-1], 3, 3, padding=1)
        self.register_buffer("scale_factor", torch.tensor(1.0))

    @property
    def f(self) -> int:
        return self.config.f

    def posterior(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidArgument(f"expected images (B, 3, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.f or w % self.f:
            raise InvalidArgument(f"image size {h}x{w} not divisible by f={self.f}")
        h = self.enc_in(2.0 * x - 1.0)
        for stage in self.enc_stages:
            h = stage(h)
        mean, logvar = self.enc_out(h).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        mean, _ = self.posterior(x)
        z = mean * self.scale_factor
        return z[0] if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        if z.ndim != 4 or z.shape[1] != self.config.channels_lat:
            raise InvalidArgument(
                f"latent has shape {tuple(z.shape)}, expected {self.config.channels_lat} channels")
        h = self.dec_in(z / self.scale_factor)
        for stage in self.dec_stages:
            h = stage(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        x = 0.5 * self.dec_out(h) + 0.5
        return x[0] if squeeze else x


class SemanticEncoder(nn.Module):
    """Resizes to a fixed small input and pools a conv tower into tokens."""

    def __init__(self, config: AutoencoderConfig | None = None):
        super().__init__()
        self.config = config = config or AutoencoderConfig()
        w = list(config.semantic_widths)
        self.tower = nn.ModuleList(
            _block(3 if i == 0 else w[i - 1], w[i], stride=2) for i in range(len(w)))
        self.grid = _token_grid(config.n_tok)
        self.proj = nn.Linear(w[-1], config.d_emb)
        self.pos = nn.Parameter(torch.zeros(config.n_tok, config.d_emb))
        # auxiliary head for the self-supervised objective (coarse image from tokens)
        self.aux_res = 8
        self.aux = nn.Linear(config.n_tok * config.d_emb, 3 * self.aux_res ** 2)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Conv tower activations at every stage, for (B, 3, H, W) in [0, 1]."""
        r = self.config.semantic_res
        if x.shape[-2:] != (r, r):
            x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False, antialias=True)
        h = 2.0 * x - 1.0
        feats = []
        for stage in self.tower:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        h = self.features(x)[-1]
        h = F.adaptive_avg_pool2d(h, self.grid).flatten(2).transpose(1, 2)
        tokens = self.proj(h) + self.pos
        return tokens[0] if squeeze else tokens

    def reconstruct_coarse(self, tokens: torch.Tensor) -> torch.Tensor:
        out = self.aux(tokens.flatten(1))
        return out.view(-1, 3, self.aux_res, self.aux_res)


def _token_grid(n_tok: int) -> tuple[int, int]:
    h = int(n_tok ** 0.5)
    while n_tok % h:
        h -= 1
    return h, n_tok // h


def encode_semantic(image: torch.Tensor, encoder: SemanticEncoder) -> torch.Tensor:
    return encoder(image)


@dataclass
class AutoencoderTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    kl_weight: float = 1e-6
    semantic_weight: float = 1.0
    seed: int = 0


def kl_divergence(mean, logvar):
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()


def train_autoencoder(images: torch.Tensor, config: AutoencoderTrainConfig,
                      ae_config: AutoencoderConfig | None = None, log=None):
    """Stage-0: fit autoencoder + semantic encoder on (N, 3, H, W) images in [0, 1].

    Returns ``(autoencoder, semantic_encoder, losses)`` where losses is a list of
    ``(step, loss)``; both modules come back frozen (requires_grad off).
    """
    if images.ndim != 4 or len(images) == 0:
        raise InvalidArgument("train_autoencoder needs a non-empty (N, 3, H, W) image batch")
    torch.manual_seed(config.seed)
    ae = Autoencoder(ae_config)
    sem = SemanticEncoder(ae_config)
    params = list(ae.parameters()) + list(sem.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    losses = []
    t0 = time.time()
    for step in range(config.steps):
        idx = torch.randint(0, len(images), (config.batch_size,), generator=gen)
        x = images[idx]
        mean, logvar = ae.posterior(x)
        z = mean + torch.randn(mean.shape, generator=gen) * (0.5 * logvar).exp()
        recon = ae.decode(z)
        tokens = sem(x)
        coarse = F.adaptive_avg_pool2d(x, sem.aux_res)
        loss = (F.mse_loss(recon, x) + config.kl_weight * kl_divergence(mean, logvar)
                + config.semantic_weight * F.mse_loss(sem.reconstruct_coarse(tokens), coarse))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append((step, loss.item()))
        if log and (step % 200 == 0 or step == config.steps - 1):
            log(f"stage0 step {step} loss {loss.item():.5f} ({time.time() - t0:.0f}s)")
    if config.steps > 0:
        with torch.no_grad():
            mean = torch.cat([ae.posterior(images[i:i + 64])[0] for i in range(0, len(images), 64)])
            ae.scale_factor.fill_(1.0 / float(mean.std()))
    freeze(ae)
    freeze(sem)
    return ae, sem, losses


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


@torch.no_grad()
def reconstruction_mse(ae: Autoencoder, images: torch.Tensor) -> float:
    return float(F.mse_loss(ae.decode(ae.encode(images)), images))
