"""Run configuration: one flat JSON object, validated field by field."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # diffusion
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    # architecture
    g: int = 16
    latent_dim: int = 64
    feat_width: int = 64
    pose_width: int = 128
    pose_blocks: int = 3
    pose_min_width: int = 32
    pose_heads: int = 4
    pose_head_dim: int = 32
    cond_tokens: int = 4
    shape_width: int = 64
    shape_encoder_layers: int = 2
    shape_decoder_layers: int = 6
    shape_heads: int = 4
    shape_head_dim: int = 16
    latent_width: int = 64
    latent_encoder_layers: int = 2
    latent_decoder_layers: int = 2
    latent_heads: int = 4
    latent_head_dim: int = 16
    decoder_hidden: int = 64
    use_isa: bool = True
    # objectives
    align_weight: float = 0.01
    align_samples: int = 16          # m during training
    align_targets: int = 256         # depth points kept per object during training
    eval_samples: int = 1000         # m at evaluation
    drop_probability: float = 0.8
    guidance_weight: float = 1.0
    train_pose: bool = True
    train_shape: bool = True
    regression: bool = False
    joint: bool = True
    # optimisation
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_scenes: int = 16
    cosine_decay: bool = True
    warmup_steps: int = 100
    ema_decay: float = 0.999
    epochs: int = 200
    joint_epochs: int = 50
    decoder_epochs: int = 100
    latent_epochs: int = 100
    decoder_points: int = 256
    # sampling / evaluation
    steps: int = 100
    iou_thresh: float = 0.15
    fscore_tau: float = 0.05
    mesh_res: int = 32
    shape_metrics: bool = True
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            want = {"int": int, "float": (int, float), "bool": bool}[f.type if isinstance(f.type, str) else f.type.__name__]
            if isinstance(v, bool) and want is not bool:
                raise ConfigError(f"{f.name}: expected {f.type}, got bool")
            if not isinstance(v, want):
                raise ConfigError(f"{f.name}: expected {f.type}, got {type(v).__name__}")
        positive = ("T", "g", "latent_dim", "feat_width", "pose_width", "pose_blocks", "pose_min_width", "pose_heads",
                    "pose_head_dim", "cond_tokens", "shape_width", "shape_heads", "shape_head_dim", "latent_width",
                    "latent_heads", "latent_head_dim", "decoder_hidden", "align_samples", "align_targets",
                    "eval_samples", "batch_scenes", "steps", "mesh_res", "decoder_points", "log_every")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay: must lie in [0, 1)")
        for name in ("warmup_steps", "epochs", "joint_epochs", "decoder_epochs", "latent_epochs", "shape_encoder_layers",
                     "shape_decoder_layers", "latent_encoder_layers", "latent_decoder_layers", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        if not 0 < self.beta_1 < self.beta_T < 1:
            raise ConfigError(f"beta_1/beta_T: need 0 < {self.beta_1} < {self.beta_T} < 1")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ConfigError("drop_probability: must lie in [0, 1]")
        if not 0.0 < self.iou_thresh <= 1.0:
            raise ConfigError("iou_thresh: must lie in (0, 1]")
        for name in ("lr", "fscore_tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        for name in ("align_weight", "guidance_weight", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        if self.feat_width % 16:
            raise ConfigError("feat_width: must be a multiple of 16")
        if self.steps > self.T:
            raise ConfigError(f"steps: {self.steps} exceeds T={self.T}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> RunConfig:
        return RunConfig.from_dict({**self.to_dict(), **kw})

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)


PAPER_ARCHITECTURE = {
    "pose_width": 512, "pose_blocks": 8, "pose_heads": 8, "pose_head_dim": 64,
    "shape_encoder_layers": 2, "shape_decoder_layers": 6,
    "latent_encoder_layers": 6, "latent_decoder_layers": 6,
}
