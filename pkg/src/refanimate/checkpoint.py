"""CheckpointBundle: one safetensors archive holding every trainable component.

Tensor names are ``<component>/<parameter name>``; components are ``vae``,
``semantic``, ``unet``, ``refnet`` and ``pose_guider``. The JSON header lives
in the safetensors metadata under the key ``refanimate``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from . import __version__
from .autoencoder import Autoencoder, AutoencoderConfig, SemanticEncoder, freeze
from .diffusion import DiffusionSchedule, build_schedule
from .errors import DataIOError, InvalidArgument
from .nets import PoseGuider, ReferenceNet, UNet, UNetConfig

FORMAT = "refanimate-checkpoint"
FORMAT_VERSION = 1
COMPONENTS = ("vae", "semantic", "unet", "refnet", "pose_guider")


@dataclass
class CheckpointBundle:
    header: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return int(self.header["stage"])

    def components(self) -> set[str]:
        return {name.split("/", 1)[0] for name in self.tensors}

    def component(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def save(self, path) -> Path:
        path = Path(path)
        tensors = {k: v.detach().contiguous().clone() for k, v in self.tensors.items()}
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_file(tensors, str(path), metadata={"refanimate": json.dumps(self.header, sort_keys=True)})
        except OSError as exc:
            raise DataIOError(path, "cannot write checkpoint") from exc
        return path

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        path = Path(path)
        if not path.is_file():
            raise DataIOError(path, "checkpoint not found")
        try:
            with safe_open(str(path), framework="pt") as f:
                meta = f.metadata() or {}
            tensors = load_file(str(path))
        except (OSError, SafetensorError) as exc:
            raise DataIOError(path, f"cannot read checkpoint ({exc})") from exc
        if "refanimate" not in meta:
            raise InvalidArgument(f"{path} is not a {FORMAT} archive")
        header = json.loads(meta["refanimate"])
        if header.get("format") != FORMAT:
            raise InvalidArgument(f"{path}: unexpected format {header.get('format')!r}")
        return cls(header=header, tensors=tensors)

    def equals(self, other: "CheckpointBundle") -> bool:
        if self.header != other.header or self.tensors.keys() != other.tensors.keys():
            return False
        return all(torch.equal(self.tensors[k], other.tensors[k]) and
                   self.tensors[k].dtype == other.tensors[k].dtype for k in self.tensors)


@dataclass
class Models:
    """Live modules of a (possibly partial) checkpoint."""
    ae: Autoencoder
    semantic: SemanticEncoder
    unet: UNet | None = None
    refnet: ReferenceNet | None = None
    pose_guider: PoseGuider | None = None
    schedule: DiffusionSchedule | None = None
    stage: int = 0

    def named_modules(self) -> dict[str, torch.nn.Module]:
        mods = {"vae": self.ae, "semantic": self.semantic, "unet": self.unet,
                "refnet": self.refnet, "pose_guider": self.pose_guider}
        return {k: v for k, v in mods.items() if v is not None}

    def to_bundle(self, extra_header: dict | None = None) -> CheckpointBundle:
        ae_cfg = self.ae.config
        header = {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "stage": self.stage,
            "autoencoder": {"channels_lat": ae_cfg.channels_lat, "widths": list(ae_cfg.widths),
                            "n_tok": ae_cfg.n_tok, "d_emb": ae_cfg.d_emb,
                            "semantic_res": ae_cfg.semantic_res,
                            "semantic_widths": list(ae_cfg.semantic_widths)},
            "versions": {"refanimate": __version__, "torch": torch.__version__.split("+")[0]},
        }
        if self.unet is not None:
            header["unet"] = self.unet.config.to_json()
        if self.pose_guider is not None:
            header["pose_guider"] = {"channels": list(self.pose_guider.channels),
                                     "strides": list(self.pose_guider.strides)}
        if self.schedule is not None:
            header["schedule"] = self.schedule.to_json()
        if extra_header:
            header.update(extra_header)
        tensors = {}
        for prefix, mod in self.named_modules().items():
            for name, t in mod.state_dict().items():
                tensors[f"{prefix}/{name}"] = t.detach().clone()
        return CheckpointBundle(header=header, tensors=tensors)

    @classmethod
    def from_bundle(cls, bundle: CheckpointBundle) -> "Models":
        h = bundle.header
        comps = bundle.components()
        a = h["autoencoder"]
        ae_cfg = AutoencoderConfig(channels_lat=a["channels_lat"], widths=tuple(a["widths"]),
                                   n_tok=a["n_tok"], d_emb=a["d_emb"],
                                   semantic_res=a["semantic_res"],
                                   semantic_widths=tuple(a["semantic_widths"]))
        ae, sem = Autoencoder(ae_cfg), SemanticEncoder(ae_cfg)
        _load(ae, bundle.component("vae"), "vae")
        _load(sem, bundle.component("semantic"), "semantic")
        models = cls(ae=freeze(ae), semantic=freeze(sem), stage=bundle.stage)
        if "unet" in comps:
            ucfg = UNetConfig(**h["unet"])
            models.unet = UNet(ucfg)
            models.refnet = ReferenceNet(ucfg)
            _load(models.unet, bundle.component("unet"), "unet")
            _load(models.refnet, bundle.component("refnet"), "refnet")
            g = h["pose_guider"]
            models.pose_guider = PoseGuider(ucfg.latent_channels, g["channels"], g["strides"])
            _load(models.pose_guider, bundle.component("pose_guider"), "pose_guider")
        if "schedule" in h:
            s = h["schedule"]
            models.schedule = build_schedule(s["T"], s["beta_start"], s["beta_end"], s["kind"])
        return models


def _load(module: torch.nn.Module, state: dict, name: str):
    if not state:
        raise InvalidArgument(f"checkpoint has no tensors for component {name!r}")
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise InvalidArgument(f"checkpoint/config mismatch in {name!r}: {exc}") from exc


def tensor_hash(tensors) -> str:
    """sha256 over (name, dtype, shape, bytes) of a module or a name->tensor dict."""
    if isinstance(tensors, torch.nn.Module):
        tensors = dict(tensors.state_dict())
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()
