"""End-to-end animation: pose rescaling, windowed DDIM sampling, latent blending."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointBundle, Models
from .datagen import (ROOT, PoseFrame, PoseSequence, load_clip, load_png, render_skeleton,
                      save_png, skeleton_length)
from .diffusion import SamplerConfig, ddim_sample
from .errors import DataIOError, InvalidArgument
from .nets import denoise_forward, reference_forward


def rescale_pose(driving: PoseSequence, ref_pose: PoseFrame) -> PoseSequence:
    """Scale every frame about its pelvis so frame 0 matches the reference skeleton length.

    One factor ``s = length(ref_pose) / length(driving[0])`` is used for the
    whole sequence, where length is the summed bone length.
    """
    ref_len = skeleton_length(ref_pose)
    drv_len = skeleton_length(driving[0])
    if ref_len <= 0 or drv_len <= 0:
        raise InvalidArgument("cannot rescale a degenerate (zero-length) skeleton")
    s = ref_len / drv_len
    joints = driving.as_array()
    root = joints[:, ROOT:ROOT + 1]
    return PoseSequence.from_array(root + s * (joints - root), fps=driving.fps)


@dataclass
class AggregationPlan:
    num_frames: int
    window: int
    overlap: int
    windows: list[tuple[int, int]]
    # weights[i] maps window index -> exact blend weight of frame i
    weights: list[dict[int, Fraction]]

    def float_weights(self) -> np.ndarray:
        """(num_windows, num_frames) array of blend weights."""
        out = np.zeros((len(self.windows), self.num_frames))
        for i, wd in enumerate(self.weights):
            for k, w in wd.items():
                out[k, i] = float(w)
        return out

    def to_json(self) -> dict:
        return {
            "num_frames": self.num_frames, "window": self.window, "overlap": self.overlap,
            "windows": [list(w) for w in self.windows],
            "weights": [{str(k): str(w) for k, w in wd.items()} for wd in self.weights],
        }


def plan_windows(N: int, W: int, V: int) -> AggregationPlan:
    """Windows at stride W - V; the last one is right-aligned to end at N.

    In an overlap of length ``v`` the later window's weight ramps linearly
    ``1/(v+1), ..., v/(v+1)`` and the earlier one takes the complement.
    """
    if N < 1:
        raise InvalidArgument(f"need at least one frame, got N={N}")
    if W < 2 or not 0 <= V < W:
        raise InvalidArgument(f"need W >= 2 and 0 <= V < W, got W={W}, V={V}")
    if N <= W:
        windows = [(0, N)]
    else:
        windows = []
        start = 0
        while start + W < N:
            windows.append((start, start + W))
            start += W - V
        windows.append((N - W, N))
    raw: list[dict[int, Fraction]] = [{} for _ in range(N)]
    for k, (s, e) in enumerate(windows):
        left = windows[k - 1][1] - s if k > 0 else 0
        right = e - windows[k + 1][0] if k + 1 < len(windows) else 0
        for i in range(s, e):
            r = Fraction(1)
            if left > 0:
                r = min(r, Fraction(i - s + 1, left + 1))
            if right > 0:
                r = min(r, Fraction(e - i, right + 1))
            raw[i][k] = r
    weights = []
    for wd in raw:
        total = sum(wd.values())
        weights.append({k: v / total for k, v in wd.items()})
    return AggregationPlan(N, W, V, windows, weights)


def blend_latents(window_latents: list[torch.Tensor], plan: AggregationPlan) -> torch.Tensor:
    """Convex per-frame combination of window latents (each (len, C, h, w))."""
    if len(plan.windows) == 1:
        return window_latents[0]
    first = window_latents[0]
    out = torch.zeros((plan.num_frames,) + tuple(first.shape[1:]), dtype=first.dtype)
    for i, wd in enumerate(plan.weights):
        if len(wd) == 1:
            (k, _), = wd.items()
            out[i] = window_latents[k][i - plan.windows[k][0]]
            continue
        acc = torch.zeros_like(out[i], dtype=torch.float64)
        for k, w in wd.items():
            acc += float(w) * window_latents[k][i - plan.windows[k][0]].double()
        out[i] = acc.to(out.dtype)
    return out


@dataclass
class AnimationRequest:
    reference_image: Path
    poses: PoseSequence
    reference_pose: PoseFrame | None = None
    seed: int = 0
    window: int = 24
    overlap: int = 8

    def __post_init__(self):
        self.reference_image = Path(self.reference_image)
        if len(self.poses) < 1:
            raise InvalidArgument("pose sequence is empty")


def request_from_clip(clip_dir, seed: int = 0, window: int = 24, overlap: int = 8) -> AnimationRequest:
    rec = load_clip(clip_dir)
    return AnimationRequest(rec.reference_path, rec.poses, rec.poses[rec.reference_index],
                            seed=seed, window=window, overlap=overlap)


@dataclass
class VideoResult:
    frames: list[np.ndarray]
    latents: torch.Tensor
    plan: AggregationPlan
    provenance: list[dict]
    seed: int
    reference_calls: int = 0
    skeletons: list[np.ndarray] = field(default_factory=list)

    def save(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        try:
            (out_dir / "frames").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataIOError(out_dir, "cannot create output directory") from exc
        paths = []
        for i, frame in enumerate(self.frames):
            p = out_dir / "frames" / f"{i:05d}.png"
            save_png(p, frame)
            paths.append(p)
        meta = {"seed": self.seed, "num_frames": len(self.frames), "plan": self.plan.to_json(),
                "provenance": self.provenance, "reference_calls": self.reference_calls}
        p = out_dir / "result.json"
        try:
            p.write_text(json.dumps(meta, indent=1))
        except OSError as exc:
            raise DataIOError(p, "cannot write result") from exc
        return paths + [p]


def _image_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.tensor(np.asarray(img)).float().div(255.0).permute(2, 0, 1)


def to_uint8(images: torch.Tensor) -> list[np.ndarray]:
    """(N, 3, H, W) floats -> list of uint8 (H, W, 3), clamped to [0, 1]."""
    arr = images.clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    return [a.copy() for a in arr]


@torch.no_grad()
def animate(request: AnimationRequest, checkpoint, sampler_config: SamplerConfig | None = None,
            reuse_cache: bool = True) -> VideoResult:
    """Generate one frame per driving pose.

    ``checkpoint`` is a CheckpointBundle, a path to one, or live ``Models``.
    With ``reuse_cache=False`` ReferenceNet is re-run at every denoising call
    (the outputs are identical; used to audit the cache).
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = CheckpointBundle.load(checkpoint)
    models = Models.from_bundle(checkpoint) if isinstance(checkpoint, CheckpointBundle) else checkpoint
    if models.unet is None or models.schedule is None:
        raise InvalidArgument(f"checkpoint at stage {models.stage} has no diffusion model")
    sampler_config = sampler_config or SamplerConfig(seed=request.seed)
    ae, sem, unet, refnet, guider = (models.ae, models.semantic, models.unet, models.refnet,
                                     models.pose_guider)
    for m in (unet, refnet, guider):
        m.eval()
    use_temporal = models.stage >= 2

    ref_img = load_png(request.reference_image)
    res = ref_img.shape[0]
    if ref_img.shape[1] != res:
        raise InvalidArgument(f"reference image must be square, got {ref_img.shape[:2]}")
    ref = _image_tensor(ref_img)[None]
    poses = request.poses
    if request.reference_pose is not None:
        poses = rescale_pose(poses, request.reference_pose)
    skeletons = [render_skeleton(p, res) for p in poses.frames]
    skel = torch.stack([_image_tensor(s) for s in skeletons])

    ref_latent = ae.encode(ref)
    tokens = sem(ref)
    calls_before = refnet.forward_calls
    cache = reference_forward(ref_latent, tokens, refnet) if reuse_cache else None
    pose_feat = guider(skel)
    N = len(poses)
    plan = plan_windows(N, request.window, request.overlap)
    lat_shape = tuple(ref_latent.shape[1:])

    window_latents = []
    for k, (s, e) in enumerate(plan.windows):
        feat = pose_feat[s:e][None]

        def model(z, t, cond, feat=feat):
            c = cache if cache is not None else reference_forward(ref_latent, tokens, refnet)
            return denoise_forward(z, t, c, tokens, feat, unet, use_temporal=use_temporal)

        cfg = SamplerConfig(sampler_config.num_steps, sampler_config.eta, sampler_config.seed + k)
        z = ddim_sample(model, None, cfg, models.schedule, (1, e - s) + lat_shape)
        window_latents.append(z[0])
    latents = blend_latents(window_latents, plan)
    frames = to_uint8(torch.cat([ae.decode(latents[i:i + 32]) for i in range(0, N, 32)]))
    provenance = [{"windows": sorted(wd), "weights": [str(wd[k]) for k in sorted(wd)]}
                  for wd in plan.weights]
    return VideoResult(frames=frames, latents=latents, plan=plan, provenance=provenance,
                       seed=sampler_config.seed, reference_calls=refnet.forward_calls - calls_before,
                       skeletons=skeletons)
