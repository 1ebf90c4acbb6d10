"""Run configuration: model profiles, JSON schema, dotted-key overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict


@dataclass
class ModelConfig:
    img_layers: int
    txt_layers: int
    mm_layers: int
    dec_layers: int
    hidden: int
    heads: int
    mlp_ratio: float
    patch_size: int
    vocab_size: int | None
    max_text_len: int
    proj_dim: int
    train_resolution: int
    finetune_resolution: int
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by heads")
        for res in (self.train_resolution, self.finetune_resolution):
            if res % self.patch_size:
                raise ValueError(f"resolution {res} not divisible by patch {self.patch_size}")

    def grid(self, resolution: int) -> tuple[int, int]:
        side = resolution // self.patch_size
        return side, side

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class ContrastiveConfig:
    queue: int = 128
    m: float = 0.995
    k: int = 1
    tau_init: float = 0.07


@dataclass
class MaskingConfig:
    image_ratio: float = 0.25
    text_ratio: float = 0.15


@dataclass
class OptimConfig:
    lr_init: float = 1e-4
    lr_final: float = 2e-5
    wd: float = 0.002
    betas: tuple[float, float] = (0.9, 0.999)
    clip: float = 1.0
    warmup_steps: int = 0


@dataclass
class RunParams:
    epochs: int = 1
    batch: int = 16
    seed: int = 0


@dataclass
class RunConfig:
    profile: str
    model: ModelConfig
    losses: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)  # (ucl, mcl, itm, mlm)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunParams = field(default_factory=RunParams)
    augment_profile: str = "pretrain"
    itm_image_negatives: bool = False
    vocab_max: int = 4096
    gradcam_layer: int = -1
    rank_by: str = "likelihood"  # or "generate": greedy decode + string similarity

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = {"weights": list(self.losses)}
        d["optim"]["betas"] = list(self.optim.betas)
        d["model"]["pixel_mean"] = list(self.model.pixel_mean)
        d["model"]["pixel_std"] = list(self.model.pixel_std)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def desk_model() -> ModelConfig:
    return ModelConfig(
        img_layers=2, txt_layers=2, mm_layers=2, dec_layers=2,
        hidden=64, heads=4, mlp_ratio=4.0, patch_size=8,
        vocab_size=None, max_text_len=32, proj_dim=32,
        train_resolution=64, finetune_resolution=64,
    )


def paper_model() -> ModelConfig:
    return ModelConfig(
        img_layers=12, txt_layers=6, mm_layers=6, dec_layers=6,
        hidden=768, heads=12, mlp_ratio=4.0, patch_size=16,
        vocab_size=None, max_text_len=40, proj_dim=256,
        train_resolution=256, finetune_resolution=384,
    )


def default_config(profile: str = "desk", phase: str = "pretrain") -> RunConfig:
    """Named profile defaults; optimizer settings depend on the training phase."""
    if profile == "desk":
        cfg = RunConfig(profile="desk", model=desk_model())
        cfg.contrastive = ContrastiveConfig(queue=128)
        if phase == "pretrain":
            cfg.optim = OptimConfig(lr_init=1e-3, lr_final=1e-4)
            cfg.run = RunParams(epochs=60, batch=16, seed=0)
        else:
            cfg.optim = OptimConfig(lr_init=1e-3, lr_final=1e-4)
            cfg.run = RunParams(epochs=30, batch=16, seed=0)
    elif profile == "paper":
        cfg = RunConfig(profile="paper", model=paper_model())
        cfg.contrastive = ContrastiveConfig(queue=65535)
        if phase == "pretrain":
            cfg.optim = OptimConfig(lr_init=1e-4, lr_final=2e-5)
            cfg.run = RunParams(epochs=40, batch=64, seed=0)
        else:
            cfg.optim = OptimConfig(lr_init=2e-5, lr_final=1e-8)
            cfg.run = RunParams(epochs=30, batch=8, seed=0)
    else:
        raise ValueError(f"unknown profile {profile!r}")
    return cfg


def config_from_dict(d: dict) -> RunConfig:
    base = default_config(d.get("profile", "desk"))
    merged = base.to_dict()
    _deep_update(merged, d, path="")
    m = merged["model"]
    model = ModelConfig(
        img_layers=m["img_layers"], txt_layers=m["txt_layers"],
        mm_layers=m["mm_layers"], dec_layers=m["dec_layers"],
        hidden=m["hidden"], heads=m["heads"], mlp_ratio=m["mlp_ratio"],
        patch_size=m["patch_size"], vocab_size=m["vocab_size"],
        max_text_len=m["max_text_len"], proj_dim=m["proj_dim"],
        train_resolution=m["train_resolution"],
        finetune_resolution=m["finetune_resolution"],
        pixel_mean=tuple(m["pixel_mean"]), pixel_std=tuple(m["pixel_std"]),
    )
    weights = merged["losses"]["weights"]
    if len(weights) != 4:
        raise ValueError("losses.weights must have exactly 4 entries (ucl, mcl, itm, mlm)")
    o = merged["optim"]
    return RunConfig(
        profile=merged["profile"],
        model=model,
        losses=tuple(float(w) for w in weights),
        contrastive=ContrastiveConfig(**merged["contrastive"]),
        masking=MaskingConfig(**merged["masking"]),
        optim=OptimConfig(
            lr_init=o["lr_init"], lr_final=o["lr_final"], wd=o["wd"],
            betas=tuple(o["betas"]), clip=o["clip"], warmup_steps=o["warmup_steps"],
        ),
        run=RunParams(**merged["run"]),
        augment_profile=merged["augment_profile"],
        itm_image_negatives=merged["itm_image_negatives"],
        vocab_max=merged["vocab_max"],
        gradcam_layer=merged["gradcam_layer"],
        rank_by=merged["rank_by"],
    )


def _deep_update(target: dict, src: dict, path: str) -> None:
    for key, value in src.items():
        full = f"{path}.{key}" if path else key
        if key not in target:
            raise ValueError(f"unknown config key {full!r}")
        if isinstance(target[key], dict) and isinstance(value, dict):
            _deep_update(target[key], value, full)
        else:
            target[key] = value


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply repeatable `dotted.key=value` overrides; values parse as JSON or string.

    Keys are validated against the config schema before any value is applied.
    """
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return config_from_dict(d)


def write_resolved(cfg: RunConfig, out_dir) -> None:
    from pathlib import Path

    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "resolved_config.json", "w", encoding="utf-8") as f:
        f.write(cfg.to_json() + "\n")


def clone(cfg: RunConfig) -> RunConfig:
    return copy.deepcopy(cfg)
