import numpy as np
import pytest
import torch

from refanimate.checkpoint import tensor_hash
from refanimate.datagen import gen_pose_sequence, render_skeleton
from refanimate.errors import InvalidArgument
from refanimate.nets import (PoseGuider, ReferenceNet, UNet, UNetConfig, denoise_forward,
                             init_temporal_zero, pose_guider, pose_guider_param_count,
                             reference_forward, temporal_parameter_names)
from refanimate.training import check_gradients


def _skeletons(seed, n=1, res=64):
    seq = gen_pose_sequence(seed, n, 0.05)
    imgs = np.stack([render_skeleton(p, res) for p in seq.frames])
    return torch.from_numpy(imgs).float().div(255).permute(0, 3, 1, 2)


def _perturb(module, std=0.05):
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn_like(p) * std)
    return module


# --- ReferenceNet cache --------------------------------------------------------

def test_reference_cache_deterministic():
    refnet = ReferenceNet()
    lat, tok = torch.randn(4, 8, 8), torch.randn(8, 64)
    a, b = reference_forward(lat, tok, refnet), reference_forward(lat, tok, refnet)
    assert len(a) == len(refnet.fusion_sites()) == 7
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert refnet.forward_calls == 2


def test_reference_cache_level_shapes():
    cfg = UNetConfig()
    cache = reference_forward(torch.randn(4, 8, 8), torch.randn(8, 64), ReferenceNet(cfg))
    # level l features are (H/f)/2^l square with base * mult[l] channels
    level = [0, 1, 1, 1, 1, 0, 0]   # down0, down1, mid, up(level 1) x2, up(level 0) x2
    for feat, l in zip(cache, level):
        assert feat.shape == (1, 8 // 2 ** l, 8 // 2 ** l, cfg.base_channels * cfg.channel_mults[l])


def test_reference_and_denoiser_topology_match():
    cfg = UNetConfig()
    unet, refnet = UNet(cfg), ReferenceNet(cfg)
    cache = reference_forward(torch.randn(4, 8, 8), torch.randn(8, 64), refnet)
    record = []
    unet(torch.randn(1, 3, 4, 8, 8), torch.tensor([10]), torch.randn(1, 8, 64), record=record)
    assert [tuple(c.shape) for c in cache] == [tuple(r.shape) for r in record]


def test_reference_forward_rejects_bad_latent():
    with pytest.raises(InvalidArgument):
        reference_forward(torch.randn(3, 8, 8), torch.randn(8, 64), ReferenceNet())
    with pytest.raises(InvalidArgument):
        reference_forward(torch.randn(4, 7, 7), torch.randn(8, 64), ReferenceNet())


def test_cache_once_equals_recomputed_per_frame():
    torch.manual_seed(0)
    cfg = UNetConfig()
    unet, refnet, guider = UNet(cfg).eval(), _perturb(ReferenceNet(cfg)).eval(), PoseGuider()
    _perturb(guider)
    ref_lat, tok = torch.randn(4, 8, 8), torch.randn(8, 64)
    noisy = torch.randn(1, 8, 4, 8, 8)
    pose = guider(_skeletons(1, 8)).unsqueeze(0)
    t = torch.tensor([500])
    with torch.no_grad():
        cache = reference_forward(ref_lat, tok, refnet)
        once = [denoise_forward(noisy[:, i:i + 1], t, cache, tok, pose[:, i:i + 1], unet)
                for i in range(8)]
        per_frame = [denoise_forward(noisy[:, i:i + 1], t, reference_forward(ref_lat, tok, refnet),
                                     tok, pose[:, i:i + 1], unet) for i in range(8)]
    assert all(torch.equal(a, b) for a, b in zip(once, per_frame))


# --- Pose Guider ---------------------------------------------------------------

def test_pose_guider_zero_at_init_and_aligned():
    g = PoseGuider()
    out = pose_guider(_skeletons(3, 2), g)
    assert out.shape == (2, 4, 8, 8)
    assert torch.count_nonzero(out) == 0
    assert g.total_stride == 8


def test_pose_guider_init_distribution():
    torch.manual_seed(0)
    g = PoseGuider()
    w = torch.cat([c.weight.detach().flatten() for c in g.convs])
    assert abs(float(w.std()) - 0.02) < 0.002
    assert all(torch.count_nonzero(c.bias) == 0 for c in g.convs)
    assert torch.count_nonzero(g.proj.weight) == 0 and torch.count_nonzero(g.proj.bias) == 0


def test_pose_guider_param_count_formula():
    g = PoseGuider(out_channels=4, channels=(16, 32, 64, 128))
    # independent closed form: sum over convs of k*k*cin*cout + cout, plus the projection
    expect = (4 * 4 * 3 * 16 + 16) + (4 * 4 * 16 * 32 + 32) + (4 * 4 * 32 * 64 + 64) \
        + (4 * 4 * 64 * 128 + 128) + (3 * 3 * 128 * 4 + 4)
    assert sum(p.numel() for p in g.parameters()) == expect == 177_652
    assert pose_guider_param_count(3, (16, 32, 64, 128), 4) == expect


def test_pose_guider_rejects_indivisible():
    with pytest.raises(InvalidArgument):
        PoseGuider()(torch.rand(1, 3, 60, 60))


# --- denoiser --------------------------------------------------------------------

def test_denoise_zero_pose_invariance_at_init():
    torch.manual_seed(0)
    unet, refnet, guider = UNet(), ReferenceNet(), PoseGuider()
    tok = torch.randn(8, 64)
    cache = reference_forward(torch.randn(4, 8, 8), tok, refnet)
    noisy = torch.randn(1, 4, 4, 8, 8)
    t = torch.tensor([321])
    outs = []
    for seed in (1, 2):
        feat = guider(_skeletons(seed, 4)).unsqueeze(0)
        outs.append(denoise_forward(noisy, t, cache, tok, feat, unet))
    assert outs[0].shape == (1, 4, 4, 8, 8)
    assert torch.equal(outs[0], outs[1])


def test_denoise_shape_checks():
    unet = UNet()
    tok = torch.randn(8, 64)
    cache = reference_forward(torch.randn(4, 8, 8), tok, ReferenceNet())
    noisy = torch.randn(1, 2, 4, 8, 8)
    with pytest.raises(InvalidArgument):
        denoise_forward(noisy, torch.tensor([1]), cache, tok, torch.zeros(1, 2, 4, 4, 4), unet)
    with pytest.raises(InvalidArgument):
        denoise_forward(noisy, torch.tensor([1]), cache[:-1], tok, None, unet)
    with pytest.raises(InvalidArgument):
        denoise_forward(torch.randn(1, 2, 3, 8, 8), torch.tensor([1]), None, tok, None, unet)
    with pytest.raises(InvalidArgument):
        denoise_forward(torch.randn(2, 4, 8, 8), torch.tensor([1]), None, tok, None, unet)


def test_image_denoiser_path_frame_independent():
    """cache=None, no temporal layers: identical noisy frames give identical outputs."""
    unet = _perturb(UNet()).eval()
    frame = torch.randn(1, 1, 4, 8, 8)
    out = denoise_forward(frame.expand(1, 5, 4, 8, 8).contiguous(), torch.tensor([50]), None,
                          torch.randn(8, 64), None, unet)
    assert all(torch.allclose(out[:, i], out[:, 0], rtol=0, atol=1e-6) for i in range(5))


def test_denoise_gradient_two_channel_toy():
    torch.manual_seed(0)
    cfg = UNetConfig(latent_channels=2, base_channels=4, channel_mults=(1,), heads=2,
                     context_dim=4, t_emb_dim=4, norm_groups=2)
    unet, refnet = UNet(cfg).double(), ReferenceNet(cfg).double()
    _perturb(unet, 0.3)
    tok = torch.randn(1, 2, 4, dtype=torch.float64)
    cache = reference_forward(torch.randn(2, 2, 2, dtype=torch.float64), tok, refnet)
    noisy = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    pose = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64)
    t = torch.tensor([7])
    rel, mag = check_gradients(
        lambda: denoise_forward(noisy, t, cache, tok, pose, unet, use_temporal=True).sum(),
        {"noisy": noisy}, max_elements=16)
    assert rel["noisy"] < 1e-4 and mag["noisy"] > 1e-3


# --- temporal zero-init ----------------------------------------------------------

def test_init_temporal_zero_contract():
    torch.manual_seed(0)
    unet = _perturb(UNet(), 0.1).eval()
    names = set(temporal_parameter_names(unet))
    before = {k: v.clone() for k, v in unet.state_dict().items() if k not in names}
    init_temporal_zero(unet)
    after = {k: v for k, v in unet.state_dict().items() if k not in names}
    assert tensor_hash(before) == tensor_hash(after)
    proj = {k: v for k, v in unet.state_dict().items() if ".temporal.attn.to_out." in k}
    assert proj and tensor_hash(proj) == tensor_hash({k: torch.zeros_like(v) for k, v in proj.items()})

    tok = torch.randn(1, 8, 64)
    cache = reference_forward(torch.randn(4, 8, 8), tok, ReferenceNet())
    z = torch.randn(1, 6, 4, 8, 8)
    t = torch.tensor([400])
    with torch.no_grad():
        stage2 = denoise_forward(z, t, cache, tok, None, unet, use_temporal=True)
        stage1 = denoise_forward(z, t, cache, tok, None, unet, use_temporal=False)
    assert torch.equal(stage2, stage1)


def test_zero_temporal_model_factorizes_per_frame_fp64():
    """Frame-by-frame evaluation matches the clip pass up to float64 roundoff.

    (In float32 the two batch layouts round differently, at the 1e-6 level.)
    """
    torch.manual_seed(1)
    unet = init_temporal_zero(_perturb(UNet(), 0.1)).double().eval()
    refnet = ReferenceNet().double()
    tok = torch.randn(1, 8, 64, dtype=torch.float64)
    cache = reference_forward(torch.randn(4, 8, 8, dtype=torch.float64), tok, refnet)
    z = torch.randn(1, 6, 4, 8, 8, dtype=torch.float64)
    t = torch.tensor([400])
    with torch.no_grad():
        clip = denoise_forward(z, t, cache, tok, None, unet, use_temporal=True)
        per_frame = torch.cat([denoise_forward(z[:, i:i + 1], t, cache, tok, None, unet)
                               for i in range(6)], dim=1)
    assert (clip - per_frame).abs().max() < 1e-12


def test_referencenet_has_no_temporal_layers():
    assert temporal_parameter_names(ReferenceNet()) == []
    assert len(temporal_parameter_names(UNet())) > 0
