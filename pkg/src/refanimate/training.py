"""Two-stage training over synthetic clips, plus the finite-difference harness."""
from __future__ import annotations

import csv
import math
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .autoencoder import (Autoencoder, AutoencoderConfig, AutoencoderTrainConfig, SemanticEncoder,
                          train_autoencoder)
from .checkpoint import CheckpointBundle, Models, tensor_hash
from .datagen import ClipRecord, load_png
from .diffusion import DiffusionSchedule, build_schedule, training_loss
from .errors import DataIOError, InvalidArgument, PreconditionError
from .nets import (PoseGuider, ReferenceNet, UNet, UNetConfig, denoise_forward, init_temporal_zero,
                   reference_forward, temporal_parameter_names)

log = logging.getLogger(__name__)

# values reported for the full-scale runs; desk-scale defaults are below
PAPER_RESOLUTION = 768
PAPER_STAGE1 = {"steps": 30_000, "batch_size": 64, "lr": 1e-5}
PAPER_STAGE2 = {"steps": 10_000, "batch_size": 4, "lr": 1e-5, "clip_length": 24}
DEFAULT_BATCH = {1: 8, 2: 2}
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    batch_size: int | None = None
    lr: float = 1e-5
    # "constant" or "cosine" decay to zero over ``steps``
    lr_schedule: str = "constant"
    clip_length: int = 8
    resolution: int = 64
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size is None and self.stage in DEFAULT_BATCH:
            self.batch_size = DEFAULT_BATCH[self.stage]

    def violations(self) -> list[str]:
        out = []
        if self.stage not in (1, 2):
            out.append(f"stage: must be 1 or 2, got {self.stage}")
        if self.steps < 0:
            out.append(f"steps: must be >= 0, got {self.steps}")
        if self.batch_size is not None and self.batch_size < 1:
            out.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            out.append(f"lr: must be > 0, got {self.lr}")
        if self.lr_schedule not in LR_SCHEDULES:
            out.append(f"lr_schedule: must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.stage == 2 and self.clip_length < 2:
            out.append(f"clip_length: must be >= 2 for stage 2, got {self.clip_length}")
        if self.resolution < 16:
            out.append(f"resolution: must be >= 16, got {self.resolution}")
        return out


@dataclass
class LossRecord:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    elapsed: list[float] = field(default_factory=list)
    started: float = field(default_factory=time.time)

    def append(self, step: int, loss: float):
        self.steps.append(step)
        self.losses.append(loss)
        self.elapsed.append(time.time() - self.started)

    def window_mean(self, start: int, stop: int | None = None) -> float:
        return float(np.mean(self.losses[start:stop]))

    def to_csv(self, path, elapsed: bool = True) -> Path:
        """Write step,loss[,elapsed_s]; drop the wall-clock column for byte-reproducible files."""
        path = Path(path)
        try:
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["step", "loss", "elapsed_s"] if elapsed else ["step", "loss"])
                for s, l, e in zip(self.steps, self.losses, self.elapsed):
                    w.writerow([s, repr(l), f"{e:.3f}"] if elapsed else [s, repr(l)])
        except OSError as exc:
            raise DataIOError(path, "cannot write loss log") from exc
        return path

    @classmethod
    def from_csv(cls, path) -> "LossRecord":
        rec = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rec.steps.append(int(row["step"]))
                rec.losses.append(float(row["loss"]))
                rec.elapsed.append(float(row.get("elapsed_s") or 0.0))
        return rec


# --- data -------------------------------------------------------------------

def _to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> float (..., 3, H, W) in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images)).float() / 255.0
    return t.movedim(-1, -3)


@dataclass
class ClipTensors:
    frames: torch.Tensor      # (clips, L, 3, H, W)
    skeletons: torch.Tensor   # (clips, L, 3, H, W)

    @classmethod
    def from_records(cls, records: Sequence[ClipRecord]) -> "ClipTensors":
        if not records:
            raise InvalidArgument("dataset is empty")
        lengths = {len(r.poses) for r in records}
        if len(lengths) != 1:
            raise InvalidArgument(f"clips must share one length, got {sorted(lengths)}")
        frames = np.stack([[load_png(p) for p in r.frame_paths] for r in records])
        skels = np.stack([[load_png(p) for p in r.skeleton_paths] for r in records])
        return cls(_to_tensor(frames), _to_tensor(skels))

    @property
    def num_clips(self) -> int:
        return self.frames.shape[0]

    @property
    def length(self) -> int:
        return self.frames.shape[1]


@torch.no_grad()
def encode_clips(data: ClipTensors, ae: Autoencoder, sem: SemanticEncoder):
    """Frozen-encoder latents (clips, L, C, h, w) and tokens (clips, L, n, d)."""
    flat = data.frames.flatten(0, 1)
    lat = torch.cat([ae.encode(flat[i:i + 64]) for i in range(0, len(flat), 64)])
    tok = torch.cat([sem(flat[i:i + 64]) for i in range(0, len(flat), 64)])
    c, l = data.frames.shape[:2]
    return lat.view(c, l, *lat.shape[1:]), tok.view(c, l, *tok.shape[1:])


# --- stage 0 ----------------------------------------------------------------

def train_stage0(data: ClipTensors, config: AutoencoderTrainConfig,
                 ae_config: AutoencoderConfig | None = None):
    images = data.frames.flatten(0, 1)
    ae, sem, losses = train_autoencoder(images, config, ae_config, log=log.info)
    record = LossRecord()
    for s, l in losses:
        record.append(s, l)
    return Models(ae=ae, semantic=sem, stage=0).to_bundle(), record


def _lr_scheduler(opt: torch.optim.Optimizer, config: TrainConfig):
    if config.lr_schedule == "cosine":
        n = max(config.steps, 1)
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda i: 0.5 * (1 + math.cos(math.pi * i / n)))
    return torch.optim.lr_scheduler.LambdaLR(opt, lambda i: 1.0)


# --- stage 1 ----------------------------------------------------------------

def _check_frozen(bundle: CheckpointBundle):
    missing = {"vae", "semantic"} - bundle.components()
    if missing:
        raise PreconditionError(f"frozen components missing from checkpoint: {sorted(missing)}")


def init_stage1_models(stage0: CheckpointBundle, unet_config: UNetConfig | None = None,
                       pose_channels=(16, 32, 64, 128), pose_strides=(2, 2, 2, 1),
                       schedule: DiffusionSchedule | None = None, seed: int = 0) -> Models:
    _check_frozen(stage0)
    base = Models.from_bundle(stage0)
    ucfg = unet_config or UNetConfig(latent_channels=base.ae.config.channels_lat,
                                     context_dim=base.ae.config.d_emb)
    if ucfg.latent_channels != base.ae.config.channels_lat or ucfg.context_dim != base.ae.config.d_emb:
        raise InvalidArgument("UNet latent/context dims disagree with the frozen encoders")
    torch.manual_seed(seed)
    unet = UNet(ucfg)
    init_temporal_zero(unet)
    refnet = ReferenceNet(ucfg)
    guider = PoseGuider(ucfg.latent_channels, pose_channels, pose_strides)
    return Models(ae=base.ae, semantic=base.semantic, unet=unet, refnet=refnet,
                  pose_guider=guider, schedule=schedule or build_schedule(), stage=1)


def train_stage1(data: ClipTensors, stage0: CheckpointBundle, config: TrainConfig,
                 unet_config: UNetConfig | None = None, models: Models | None = None,
                 schedule: DiffusionSchedule | None = None,
                 pose_channels=(16, 32, 64, 128), pose_strides=(2, 2, 2, 1)):
    """Single-frame training of UNet, ReferenceNet and Pose Guider.

    The reference frame is drawn uniformly from the whole clip. Returns
    ``(bundle, loss_record)``.
    """
    if config.stage != 1:
        raise InvalidArgument(f"train_stage1 needs stage=1, got {config.stage}")
    _check_frozen(stage0)
    if models is None:
        models = init_stage1_models(stage0, unet_config, pose_channels, pose_strides,
                                    schedule, config.seed)
    frozen_hash = (tensor_hash(models.ae), tensor_hash(models.semantic))
    lat, tok = encode_clips(data, models.ae, models.semantic)
    unet, refnet, guider, sched = models.unet, models.refnet, models.pose_guider, models.schedule
    params = [p for n, p in unet.named_parameters() if ".temporal." not in n]
    params += list(refnet.parameters()) + list(guider.parameters())
    for m in (unet, refnet, guider):
        m.train()
    opt = torch.optim.Adam(params, lr=config.lr)
    sched_lr = _lr_scheduler(opt, config)
    gen = torch.Generator().manual_seed(config.seed)
    record = LossRecord()
    for step in range(config.steps):
        b = config.batch_size
        c = torch.randint(0, data.num_clips, (b,), generator=gen)
        i = torch.randint(0, data.length, (b,), generator=gen)
        r = torch.randint(0, data.length, (b,), generator=gen)
        z0 = lat[c, i][:, None]
        tokens = tok[c, r]
        pose_feat = guider(data.skeletons[c, i])[:, None]
        cache = reference_forward(lat[c, r], tokens, refnet)

        def model(z_t, t, cond):
            return denoise_forward(z_t, t, cache, tokens, pose_feat, unet)

        loss = training_loss(z0, None, model, sched, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched_lr.step()
        record.append(step, loss.item())
        if config.log_every and step % config.log_every == 0:
            log.info("stage1 step %d loss %.5f", step, loss.item())
    for m in (unet, refnet, guider):
        m.eval()
    if (tensor_hash(models.ae), tensor_hash(models.semantic)) != frozen_hash:
        raise AssertionError("frozen encoders changed during stage-1 training")
    models.stage = 1
    return models.to_bundle(), record


# --- stage 2 ----------------------------------------------------------------

def non_temporal_tensors(bundle: CheckpointBundle) -> dict[str, torch.Tensor]:
    return {k: v for k, v in bundle.tensors.items() if ".temporal." not in k}


def temporal_tensors(bundle: CheckpointBundle) -> dict[str, torch.Tensor]:
    return {k: v for k, v in bundle.tensors.items() if ".temporal." in k}


def train_stage2(data: ClipTensors, stage1: CheckpointBundle, config: TrainConfig):
    """Train only the temporal layers on clips of ``clip_length`` frames."""
    if config.stage != 2:
        raise InvalidArgument(f"train_stage2 needs stage=2, got {config.stage}")
    if stage1.stage != 1:
        raise InvalidArgument(f"train_stage2 needs a stage-1 checkpoint, got stage {stage1.stage}")
    if config.clip_length > data.length:
        raise InvalidArgument(f"clip_length {config.clip_length} exceeds clip length {data.length}")
    models = Models.from_bundle(stage1)
    unet, refnet, guider, sched = models.unet, models.refnet, models.pose_guider, models.schedule
    init_temporal_zero(unet)
    for m in (refnet, guider):
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    names = set(temporal_parameter_names(unet))
    params = []
    for n, p in unet.named_parameters():
        p.requires_grad_(n in names)
        if n in names:
            params.append(p)
    unet.eval()
    lat, tok = encode_clips(data, models.ae, models.semantic)
    opt = torch.optim.Adam(params, lr=config.lr)
    sched_lr = _lr_scheduler(opt, config)
    gen = torch.Generator().manual_seed(config.seed)
    record = LossRecord()
    L = config.clip_length
    for step in range(config.steps):
        b = config.batch_size
        c = torch.randint(0, data.num_clips, (b,), generator=gen)
        s = torch.randint(0, data.length - L + 1, (b,), generator=gen)
        r = torch.randint(0, data.length, (b,), generator=gen)
        idx = s[:, None] + torch.arange(L)[None]
        z0 = lat[c[:, None], idx]                       # (b, L, C, h, w)
        tokens = tok[c, r]
        with torch.no_grad():
            skel = data.skeletons[c[:, None], idx].flatten(0, 1)
            pose_feat = guider(skel).view(z0.shape)
            cache = reference_forward(lat[c, r], tokens, refnet)

        def model(z_t, t, cond):
            return denoise_forward(z_t, t, cache, tokens, pose_feat, unet, use_temporal=True)

        loss = training_loss(z0, None, model, sched, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched_lr.step()
        record.append(step, loss.item())
        if config.log_every and step % config.log_every == 0:
            log.info("stage2 step %d loss %.5f", step, loss.item())
    models.stage = 2
    return models.to_bundle({"clip_length": L}), record


# --- gradient checks --------------------------------------------------------

@dataclass
class GradCheckReport:
    component: str
    rel_err: dict[str, float]
    max_abs_grad: dict[str, float]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max(self.rel_err.values()) if self.rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def lines(self) -> list[str]:
        return [f"{self.component}.{k}: rel_err={v:.2e}" for k, v in self.rel_err.items()]


def check_gradients(loss_fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor],
                    h: float = 1e-6, max_elements: int = 24, seed: int = 0,
                    floor: float = 1e-6):
    """Compare autograd against central differences for every named tensor.

    Tensors must be float64 leaves with requires_grad. For tensors larger than
    ``max_elements`` a fixed random subset of entries is perturbed. The error of
    a tensor is max|analytic - numeric| / max(|analytic|, |numeric|, floor).
    Returns ``(rel_err, max_abs_grad)`` dicts.
    """
    for t in tensors.values():
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    rel, mag = {}, {}
    with torch.no_grad():
        for (name, t), g in zip(tensors.items(), analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_elements else rng.choice(n, max_elements, replace=False)
            num, ana = [], []
            for k in idx:
                orig = flat[k].item()
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
                flat[k] = orig
                num.append((up - down) / (2 * h))
                ana.append(g.reshape(-1)[k].item())
            num, ana = np.array(num), np.array(ana)
            scale = max(np.abs(ana).max(), np.abs(num).max(), floor)
            rel[name] = float(np.abs(ana - num).max() / scale)
            mag[name] = float(max(np.abs(ana).max(), np.abs(num).max()))
    return rel, mag


GRAD_CHECK_COMPONENTS = ("conv", "spatial_attention", "cross_attention", "temporal_attention",
                         "res_trans_block", "pose_guider", "autoencoder", "semantic_encoder", "unet")


def _tiny_setup(component: str, seed: int):
    """(module, inputs dict, forward fn) for a dims <= 4 instance of a component."""
    from . import attention as A

    g = torch.Generator().manual_seed(seed)

    def rnd(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    torch.manual_seed(seed)
    if component == "conv":
        mod = A.ResBlock(2, 4, 4, groups=2)
        inputs = {"x": rnd(2, 2, 4, 4), "temb": rnd(2, 4)}
        fwd = lambda: mod(inputs["x"], inputs["temb"])
    elif component == "spatial_attention":
        mod = A.Attention(4, heads=2)
        inputs = {"x1": rnd(1, 2, 2, 2, 4), "x2": rnd(1, 2, 2, 4)}
        fwd = lambda: A.spatial_attention_fuse(inputs["x1"], inputs["x2"], mod)
    elif component == "cross_attention":
        mod = A.Attention(4, context_dim=3, heads=2)
        inputs = {"x": rnd(1, 2, 2, 2, 4), "tokens": rnd(1, 3, 3)}
        fwd = lambda: A.cross_attention(inputs["x"], inputs["tokens"], mod)
    elif component == "temporal_attention":
        mod = A.TemporalAttention(4, heads=2, max_len=4)
        inputs = {"x": rnd(1, 3, 2, 2, 4)}
        fwd = lambda: A.temporal_attention(inputs["x"], mod)
    elif component == "res_trans_block":
        mod = A.ResTransBlock(4, 4, 4, 3, heads=2, groups=2, temporal_max_len=4)
        inputs = {"x": rnd(1, 2, 2, 2, 4), "ref": rnd(1, 2, 2, 4), "tokens": rnd(1, 2, 3),
                  "temb": rnd(2, 4)}
        fwd = lambda: A.res_trans_block(inputs["x"], inputs["ref"], inputs["tokens"], mod,
                                        use_temporal=True, temb=inputs["temb"])
    elif component == "pose_guider":
        mod = PoseGuider(out_channels=2, channels=(2, 2, 2, 2), init_std=0.5)
        torch.nn.init.normal_(mod.proj.weight, std=0.5)
        inputs = {"skeleton": torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)}
        fwd = lambda: mod(inputs["skeleton"])
    elif component in ("autoencoder", "semantic_encoder"):
        cfg = AutoencoderConfig(channels_lat=2, widths=(4, 4, 4), n_tok=2, d_emb=4,
                                semantic_res=8, semantic_widths=(2, 4))
        if component == "autoencoder":
            mod = Autoencoder(cfg)
            # default init shrinks signals through 4-channel stacks until central
            # differences drown in roundoff; He init keeps gradients O(1e-2) or larger
            for m in mod.modules():
                if isinstance(m, torch.nn.Conv2d):
                    torch.nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            inputs = {"image": torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)}
            fwd = lambda: mod.decode(mod.encode(inputs["image"]))
        else:
            mod = SemanticEncoder(cfg)
            inputs = {"image": torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)}
            fwd = lambda: mod(inputs["image"])
    elif component == "unet":
        cfg = UNetConfig(latent_channels=2, base_channels=4, channel_mults=(1, 1), heads=2,
                         context_dim=3, t_emb_dim=4, norm_groups=2, temporal_max_len=4)
        mod = UNet(cfg)
        inputs = {"noisy": rnd(1, 2, 2, 4, 4), "tokens": rnd(1, 2, 3)}
        t = torch.tensor([17])
        fwd = lambda: mod(inputs["noisy"], t, inputs["tokens"], use_temporal=True)
    else:
        raise InvalidArgument(f"unknown grad-check component {component!r}; "
                              f"choose from {GRAD_CHECK_COMPONENTS}")
    mod.double()
    return mod, inputs, fwd


def grad_check(component: str, tolerance: float = 1e-4, seed: int = 0,
               max_elements: int = 24) -> GradCheckReport:
    """Finite-difference check of one component at float64 on a tiny instance."""
    mod, inputs, fwd = _tiny_setup(component, seed)
    for v in inputs.values():
        v.requires_grad_(True)
    named = {f"input.{k}": v for k, v in inputs.items()}
    named.update({n: p for n, p in mod.named_parameters()})
    probe_gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        weights = torch.randn(fwd().shape, generator=probe_gen, dtype=torch.float64)
    loss_fn = lambda: (fwd() * weights).sum()
    rel, mag = check_gradients(loss_fn, named, max_elements=max_elements, seed=seed)
    return GradCheckReport(component, rel, mag, tolerance)
