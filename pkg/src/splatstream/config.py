"""Run configuration: a flat dotted-key JSON file plus CLI overrides.

Unknown keys are rejected; the effective configuration is echoed into the
run directory so every run is reproducible from its artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .anchors import LoDConfig
from .rasterizer import RenderSettings
from .trainer import TrainConfig

VARIANTS = ("standard", "star")
ABLATIONS = ("no-dropout", "separate-mlps", "no-quantize", "no-partition")

# key -> (type, default). None default means "derived at run time".
CONFIG_KEYS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "variant": (str, "standard"),
    "lod.delta": (float, 0.001),
    "lod.d_max": (float, None),
    "lod.d_min": (float, None),
    "lod.levels": (int, None),
    "lod.k": (int, 10),
    "lod.grad_threshold": (float, 2e-4),
    "lod.delta_l": (int, 1),
    "lod.opacity_prune": (float, 0.05),
    "train.init_epochs": (int, 500),
    "train.stream_epochs": (int, 10),
    "train.lambda": (float, 0.2),
    "train.lr_feature": (float, 5e-3),
    "train.lr_offsets": (float, 1e-2),
    "train.lr_scales": (float, 5e-3),
    "train.lr_mlp": (float, 2e-3),
    "train.lr_latents": (float, 1e-2),
    "train.lr_pos": (float, 1e-3),
    "train.lr_decoders": (float, 2e-3),
    "train.grad_window_init": (int, 200),
    "train.grad_window_stream": (int, 30),
    "train.views": (list, None),  # training view indices; rest held out
    "codec.quant_step": (float, 0.02),
    "motion.rho": (float, 0.8),
    "motion.rho_star": (float, 0.9),
    "motion.star_cadence": (int, 4),
    "render.tile_size": (int, 16),
    "render.background": (list, [0.0, 0.0, 0.0]),
    "render.transmittance_cutoff": (float, 1e-4),
    "render.support_sigma": (float, 3.0),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    ablations: set = field(default_factory=set)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def variant(self) -> str:
        return self.values["variant"]

    def rho(self) -> float:
        if self.variant == "star":
            return self.values["motion.rho_star"]
        return self.values["motion.rho"]

    def lod_overrides(self) -> dict:
        out = {
            "delta": self.values["lod.delta"],
            "k": self.values["lod.k"],
            "grad_threshold": self.values["lod.grad_threshold"],
            "delta_l": self.values["lod.delta_l"],
            "opacity_prune": self.values["lod.opacity_prune"],
        }
        if self.values["lod.levels"] is not None:
            out["levels"] = self.values["lod.levels"]
        return out

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            init_epochs=v["train.init_epochs"],
            stream_epochs=v["train.stream_epochs"],
            lam=v["train.lambda"],
            lr_feature=v["train.lr_feature"],
            lr_offsets=v["train.lr_offsets"],
            lr_scales=v["train.lr_scales"],
            lr_mlp=v["train.lr_mlp"],
            lr_latents=v["train.lr_latents"],
            lr_pos=v["train.lr_pos"],
            lr_decoders=v["train.lr_decoders"],
            grad_window_init=v["train.grad_window_init"],
            grad_window_stream=v["train.grad_window_stream"],
            quant_step=v["codec.quant_step"],
            rho=self.rho(),
            seed=v["seed"],
        )

    def render_settings(self) -> RenderSettings:
        v = self.values
        return RenderSettings(
            tile_size=v["render.tile_size"],
            background=tuple(v["render.background"]),
            transmittance_cutoff=v["render.transmittance_cutoff"],
            support_sigma=v["render.support_sigma"],
        )

    def echo(self) -> dict:
        out = dict(self.values)
        out["ablations"] = sorted(self.ablations)
        return out


def _coerce(key: str, value):
    typ, _ = CONFIG_KEYS[key]
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"config key {key} expects a list")
        return value
    if value is None:
        return None
    try:
        return typ(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key {key}: {e}") from e


def load_config(
    path=None, overrides: list[str] | None = None,
    ablations: list[str] | None = None,
) -> RunConfig:
    values = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    if path is not None:
        with open(path) as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in raw.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = _coerce(key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item}")
        key, _, raw_value = item.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _coerce(key, json.loads(raw_value))
    if values["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    abl = set(ablations or [])
    unknown = abl - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablations: {sorted(unknown)}")
    return RunConfig(values=values, ablations=abl)
