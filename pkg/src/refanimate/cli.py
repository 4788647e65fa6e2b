"""Command-line entry point: ``refanimate <subcommand> ...``.

Exit codes: 0 ok, 1 unexpected error, 2 usage, 3 invalid argument,
4 config error, 5 I/O error, 6 precondition failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .autoencoder import AutoencoderConfig, SemanticEncoder, freeze
from .checkpoint import CheckpointBundle, Models, tensor_hash
from .config import (RunConfig, apply_overrides, dump_config, read_config_file,
                     validate_config)
from .errors import ConfigError
from .datagen import (PoseFrame, PoseSequence, gen_dataset, load_clip, load_dataset, load_png)
from .diffusion import build_schedule
from .errors import EXIT_CODES, DataIOError, InvalidArgument, PreconditionError, RefAnimateError
from .metrics import evaluate
from .pipeline import AnimationRequest, animate, request_from_clip
from .plotting import contact_sheet, plot_loss, plot_metrics
from .training import ClipTensors, train_stage0, train_stage1, train_stage2

log = logging.getLogger("refanimate")

DEVICE_ENV = "REFANIMATE_DEVICE"
CHECKPOINT_NAME = "checkpoint.safetensors"
MANIFEST_NAME = "run.json"


# --- run manifest -------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)   # relative path -> sha256
    started_at: float = field(default_factory=time.time)
    finished_at: float | None = None
    status: str = "running"
    error: str | None = None
    versions: dict = field(default_factory=lambda: {
        "refanimate": __version__, "torch": torch.__version__, "numpy": np.__version__})

    def hash_outputs(self, out_dir: Path):
        self.outputs = {}
        for p in sorted(out_dir.rglob("*")):
            if p.is_file() and p.name != MANIFEST_NAME and not p.name.endswith(".tmp"):
                self.outputs[p.relative_to(out_dir).as_posix()] = sha256_file(p)

    def write(self, out_dir: Path) -> Path:
        """Atomic write: temp file in the same directory, then rename."""
        path = out_dir / MANIFEST_NAME
        tmp = out_dir / (MANIFEST_NAME + ".tmp")
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            tmp.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
            os.replace(tmp, path)
        except OSError as exc:
            raise DataIOError(path, "cannot write run manifest") from exc
        return path


# --- helpers ----------------------------------------------------------------

def resolve_device() -> str:
    dev = os.environ.get(DEVICE_ENV, "cpu").strip().lower()
    if dev != "cpu":
        raise PreconditionError(f"{DEVICE_ENV}={dev!r}: this build runs on cpu only")
    return dev


def _records(data_dir):
    recs = load_dataset(data_dir)
    if not recs:
        raise DataIOError(Path(data_dir) / "clips", "dataset contains no clips")
    return recs


def _write_loss(record, out: Path, title: str):
    record.to_csv(out / "loss.csv", elapsed=False)
    if record.steps:
        plot_loss(record.steps, record.losses, out / "loss.png", title=title)


def _poses_from_json(path) -> tuple[PoseSequence, PoseFrame]:
    """A clip.json-style file: ``joints`` (F, 13, 2), optional ``fps`` and ``reference_index``."""
    path = Path(path)
    if path.is_dir():
        path = path / "clip.json"
    try:
        m = json.loads(path.read_text())
    except OSError as exc:
        raise DataIOError(path, "cannot read pose file") from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{path}: invalid JSON ({exc})") from exc
    if "joints" not in m:
        raise InvalidArgument(f"{path}: missing 'joints'")
    poses = PoseSequence.from_array(np.asarray(m["joints"], dtype=np.float64), fps=m.get("fps", 8.0))
    ref = poses[int(m.get("reference_index", 0))]
    return poses, ref


def _load_frames(clip_dir: Path) -> list[np.ndarray]:
    d = clip_dir / "frames" if (clip_dir / "frames").is_dir() else clip_dir
    files = sorted(d.glob("*.png"))
    if not files:
        raise DataIOError(d, "no PNG frames found")
    return [load_png(p) for p in files]


def find_clips(root) -> list[Path]:
    """A single clip (``frames/`` or bare PNGs), a dataset (``clips/*``) or a directory of clips."""
    root = Path(root)
    if not root.is_dir():
        raise DataIOError(root, "not a directory")
    if (root / "frames").is_dir() or any(root.glob("*.png")):
        return [root]
    base = root / "clips" if (root / "clips").is_dir() else root
    subs = [d for d in sorted(base.iterdir()) if d.is_dir() and
            ((d / "frames").is_dir() or any(d.glob("*.png")))]
    if not subs:
        raise DataIOError(root, "no clips found")
    return subs


# --- subcommands --------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, manifest: RunManifest, out: Path):
    d = cfg.data
    recs = gen_dataset(out, d.clips, d.frames, d.seed, d.resolution, d.motion_amplitude, d.fps)
    print(f"wrote {len(recs)} clips to {out / 'clips'}")


def cmd_train_vae(args, cfg: RunConfig, manifest: RunManifest, out: Path):
    data = ClipTensors.from_records(_records(args.data))
    bundle, record = train_stage0(data, cfg.vae_train, cfg.autoencoder)
    bundle.save(out / CHECKPOINT_NAME)
    _write_loss(record, out, "autoencoder + semantic encoder")
    if record.losses:
        print(f"final loss {record.losses[-1]:.6f}")


def _load_ckpt(path) -> CheckpointBundle:
    return CheckpointBundle.load(path)


def cmd_train_stage1(args, cfg: RunConfig, manifest: RunManifest, out: Path):
    stage0 = _load_ckpt(args.ckpt)
    data = ClipTensors.from_records(_records(args.data))
    s = cfg.schedule
    bundle, record = train_stage1(data, stage0, cfg.train, unet_config=cfg.unet,
                                  schedule=build_schedule(s.T, s.beta_start, s.beta_end, s.kind),
                                  pose_channels=cfg.pose_guider.channels,
                                  pose_strides=cfg.pose_guider.strides)
    bundle.save(out / CHECKPOINT_NAME)
    _write_loss(record, out, "stage 1 (single-frame) denoising loss")
    if record.losses:
        print(f"final loss {record.losses[-1]:.6f}")


def cmd_train_stage2(args, cfg: RunConfig, manifest: RunManifest, out: Path):
    stage1 = _load_ckpt(args.ckpt)
    data = ClipTensors.from_records(_records(args.data))
    bundle, record = train_stage2(data, stage1, cfg.train)
    bundle.save(out / CHECKPOINT_NAME)
    _write_loss(record, out, "stage 2 (temporal) denoising loss")
    if record.losses:
        print(f"final loss {record.losses[-1]:.6f}")


def cmd_animate(args, cfg: RunConfig, manifest: RunManifest, out: Path):
    bundle = _load_ckpt(args.ckpt)
    a = cfg.animate
    gt = None
    if args.clip:
        request = request_from_clip(args.clip, seed=a.seed, window=a.window, overlap=a.overlap)
        gt = [load_png(p) for p in load_clip(args.clip).frame_paths]
    else:
        if not (args.ref and args.poses):
            raise InvalidArgument("animate needs --clip, or both --ref and --poses")
        poses, _ = _poses_from_json(args.poses)
        ref_pose = _poses_from_json(args.ref_pose)[1] if args.ref_pose else None
        if not Path(args.ref).is_file():
            raise DataIOError(args.ref, "reference image not found")
        request = AnimationRequest(Path(args.ref), poses, ref_pose, seed=a.seed,
                                   window=a.window, overlap=a.overlap)
    sampler = cfg.sampler
    sampler.seed = a.seed
    result = animate(request, bundle, sampler)
    result.save(out)
    sheet = {"pose": result.skeletons, "generated": result.frames}
    if gt is not None:
        sheet["ground truth"] = gt
    contact_sheet(sheet, out / "sheet.png", title=f"seed {a.seed}, {sampler.num_steps} DDIM steps")
    print(f"wrote {len(result.frames)} frames to {out / 'frames'}")


def cmd_eval(args, cfg: RunConfig, manifest: RunManifest, out: Path):
    pred_dirs, gt_dirs = find_clips(args.pred), find_clips(args.gt)
    if len(pred_dirs) != len(gt_dirs):
        raise InvalidArgument(f"{len(pred_dirs)} predicted clips vs {len(gt_dirs)} ground-truth clips")
    pred = [_load_frames(d) for d in pred_dirs]
    gt = [_load_frames(d) for d in gt_dirs]
    if args.ckpt:
        encoder = Models.from_bundle(_load_ckpt(args.ckpt)).semantic
        encoder_id = "ckpt:" + tensor_hash(encoder)[:16]
    else:
        torch.manual_seed(0)
        res = pred[0][0].shape[0]
        encoder = freeze(SemanticEncoder(AutoencoderConfig(semantic_res=min(32, res))))
        encoder_id = "untrained-seed0:" + tensor_hash(encoder)[:16]
    report = evaluate(pred, gt, encoder, encoder_id)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["clip", "frame", "ssim", "psnr", "perceptual_dist"])
        w.writeheader()
        for r in report.per_frame:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    plot_metrics(report.per_frame, out / "metrics.png")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for name in ("ssim", "psnr", "perceptual_dist", "fvd_proxy"):
        v = getattr(report, name)
        w.writerow([name, "" if v is None else f"{v:.6f}"])
    sys.stdout.write(buf.getvalue())


# --- parser -----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True, out_default=None):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", required=out_required, default=out_default, help="output directory")
    p.add_argument("--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refanimate", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"refanimate {__version__}")
    ap.add_argument("--log-level", default="WARNING",
                    choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic sprite-animation dataset")
    _common(p)
    p.add_argument("--clips", type=int, help="number of clips")
    p.add_argument("--frames", type=int, help="frames per clip")
    p.add_argument("--resolution", type=int, help="image side in pixels")
    p.add_argument("--amplitude", type=float, help="max per-frame joint displacement")

    p = sub.add_parser("train-vae", help="stage 0: train autoencoder and semantic encoder")
    _common(p)
    p.add_argument("--data", required=True, help="dataset root (contains clips/)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    for name, helptext in (("train-stage1", "stage 1: UNet, ReferenceNet and Pose Guider on single frames"),
                           ("train-stage2", "stage 2: temporal layers only, on clips")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data", required=True, help="dataset root (contains clips/)")
        p.add_argument("--ckpt", required=True, help="checkpoint from the previous stage")
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        if name == "train-stage2":
            p.add_argument("--clip-length", type=int)

    p = sub.add_parser("animate", help="animate a reference image with a pose sequence")
    _common(p)
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--clip", help="clip directory supplying reference, poses and reference pose")
    p.add_argument("--ref", help="reference image (PNG)")
    p.add_argument("--poses", help="clip.json-style pose file or clip directory")
    p.add_argument("--ref-pose", help="pose file whose reference frame is used for rescaling")
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--eta", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--overlap", type=int)

    p = sub.add_parser("eval", help="compare predicted and ground-truth frames")
    _common(p, out_required=False, out_default="eval_report")
    p.add_argument("--pred", required=True, help="predicted clip(s)")
    p.add_argument("--gt", required=True, help="ground-truth clip(s)")
    p.add_argument("--ckpt", help="checkpoint whose semantic encoder backs the proxy metrics")
    return ap


def _overrides(args) -> dict:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    c = args.command
    if c == "gen-data":
        return {"data.clips": g("clips"), "data.frames": g("frames"), "data.seed": g("seed"),
                "data.resolution": g("resolution"), "data.motion_amplitude": g("amplitude")}
    if c == "train-vae":
        return {"vae_train.steps": g("steps"), "vae_train.lr": g("lr"),
                "vae_train.batch_size": g("batch_size"), "vae_train.seed": g("seed")}
    if c in ("train-stage1", "train-stage2"):
        return {"train.steps": g("steps"),
                "train.lr": g("lr"), "train.batch_size": g("batch_size"), "train.seed": g("seed"),
                "train.clip_length": g("clip_length")}
    if c == "animate":
        return {"sampler.num_steps": g("steps"), "sampler.eta": g("eta"), "animate.seed": g("seed"),
                "animate.window": g("window"), "animate.overlap": g("overlap")}
    return {}


def _seed_of(cfg: RunConfig, command: str):
    return {"gen-data": cfg.data.seed, "train-vae": cfg.vae_train.seed,
            "train-stage1": cfg.train.seed, "train-stage2": cfg.train.seed,
            "animate": cfg.animate.seed}.get(command)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "animate": cmd_animate,
    "eval": cmd_eval,
}

_STAGE_OF = {"train-stage1": 1, "train-stage2": 2}
_INPUT_ARGS = ("config", "data", "ckpt", "clip", "ref", "poses", "ref_pose", "pred", "gt")


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if not isinstance(exc.code, str) else EXIT_CODES["usage"]
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    manifest = RunManifest(command=args.command, argv=argv, config={}, seed=None,
                           inputs={k: str(getattr(args, k)) for k in _INPUT_ARGS
                                   if getattr(args, k, None)})
    try:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataIOError(out, "cannot create output directory") from exc
        resolve_device()
        raw = read_config_file(args.config) if args.config else {}
        stage = _STAGE_OF.get(args.command)
        if not isinstance(raw, dict):
            raise ConfigError(["<root>: config must be a JSON object"])
        train_sec = raw.get("train", {})
        if stage is not None and isinstance(train_sec, dict) and "stage" not in train_sec:
            raw = apply_overrides(raw, {"train.stage": stage})
        cfg = validate_config(apply_overrides(raw, _overrides(args)))
        if stage is not None and cfg.train.stage != stage:
            raise ConfigError([f"train.stage: {args.command} needs stage {stage}, "
                               f"config says {cfg.train.stage}"])
        manifest.config = json.loads(dump_config(cfg))
        manifest.seed = _seed_of(cfg, args.command)
        torch.use_deterministic_algorithms(True)
        COMMANDS[args.command](args, cfg, manifest, out)
        manifest.status = "ok"
        code = 0
    except RefAnimateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = exc.exit_code
        manifest.status, manifest.error = "error", str(exc)
    if out.is_dir():
        manifest.finished_at = time.time()
        manifest.hash_outputs(out)
        try:
            manifest.write(out)
        except DataIOError as exc:
            print(f"error: {exc}", file=sys.stderr)
            code = code or exc.exit_code
    return code


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
