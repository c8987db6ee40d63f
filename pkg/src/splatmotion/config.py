"""Run configuration: one JSON document covering scene, weights, optimizer and metrics.

A config is either the name of a built-in preset or a JSON file. A file may
name a ``preset`` to start from and override any subset of keys; keys that
do not exist in the schema are rejected.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import synth
from .losses import LossWeights
from .optim import OptimConfig


class ConfigError(ValueError):
    """Schema violation (unknown key, wrong type, invalid value)."""


def _scene_defaults() -> dict:
    return {
        "kind": "two_link_arm",
        "num_points": 1500,
        "frames": 20,
        "driving_frames": 20,
        "noise_sigma": 0.002,
        "num_background": 0,
        "num_clusters": 4,
        "image_size": 128,
        "focal": 128.0,
        "camera_orbit": 0.0,
        "self_occlusion": True,
        "occluder_spacing": None,
        "occluders": [
            {"center": [0.24, 0.0, 4.0], "half_size": [0.12, 0.3, 0.02], "velocity": [0.0, 0.0, 0.0]},
            {"center": [0.2, 0.66, 4.0], "half_size": [0.2, 0.22, 0.02], "velocity": [0.0, 0.0, 0.0]},
        ],
        "motion": {"primary_amp": 0.08, "primary_freq": 0.5, "secondary_amp": 0.0,
                   "secondary_freq": 0.25, "drift": [0.0, 0.0, 0.0], "rest_offset": 0.0},
        "driving_motion": {"primary_amp": 0.05, "primary_freq": 0.5, "secondary_amp": 1.2,
                           "secondary_freq": 0.25, "drift": [0.0, 0.0, 0.0], "rest_offset": 0.0},
        "artifacts": [],
    }


_OCCLUDER_KEYS = {"center", "half_size", "velocity"}
_MOTION_KEYS = {f for f in synth.MotionScript.__dataclass_fields__}
_ARTIFACT_KEYS = {f for f in synth.ArtifactSpec.__dataclass_fields__}


def _defaults() -> dict:
    weights = asdict(LossWeights())
    optim = asdict(OptimConfig())
    optim.pop("seed")
    return {
        "preset": "default",
        "seed": 0,
        "scene": _scene_defaults(),
        "weights": weights,
        "optim": optim,
        "metrics": {"voxel_fraction": 0.01, "gamma": 1.5, "floor": 1e-12, "edge_sample": 1000,
                    "track_loss_threshold": 0.02},
        "variance": {"num_pairs": 30, "epochs": 50, "seeds": 10, "smooth_factor": 10.0},
        "gradcheck": {"instances": 20, "tolerance": 1e-4, "eps": 1e-5},
    }


def _preset_overrides() -> dict:
    return {
        "default": {},
        "desk": {},
        # the occluded two-link arm used for ablation orderings
        "benchmark": {
            "scene": {"num_points": 300, "frames": 12, "driving_frames": 12},
            "weights": {"num_bases": 6},
            "optim": {"epochs_init": 150, "epochs_refine": 150},
            "metrics": {"voxel_fraction": 0.05},
        },
        # full-size settings: 100 bases over 100 frames
        "full": {
            "scene": {"num_points": 2000, "frames": 50, "driving_frames": 51},
            "weights": {"num_bases": 100},
        },
        # seconds-long runs for smoke tests
        "smoke": {
            "scene": {"num_points": 200, "frames": 6, "driving_frames": 6},
            "weights": {"num_bases": 4},
            "optim": {"epochs_init": 30, "epochs_refine": 20},
            "variance": {"epochs": 20, "seeds": 2},
            "gradcheck": {"instances": 3},
        },
    }


PRESETS = tuple(_preset_overrides())


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = _check_type(base[key], value, where)
    return out


def _check_type(default, value, where):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{where}' must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{where}' must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{where}' must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{where}' must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{where}' must be a list")
        return value
    return value


def _check_items(items, allowed, where):
    for n, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigError(f"config key '{where}[{n}]' must be an object")
        extra = set(item) - allowed
        if extra:
            raise ConfigError(f"unknown config key '{where}[{n}].{sorted(extra)[0]}'")


@dataclass
class RunConfig:
    data: dict = field(default_factory=_defaults)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        d = copy.deepcopy(self.data)
        d["seed"] = int(seed)
        return RunConfig(d)

    def weights(self) -> LossWeights:
        return LossWeights(**self.data["weights"])

    def optim(self) -> OptimConfig:
        return OptimConfig(seed=self.seed, **self.data["optim"])

    def scene_spec(self) -> synth.SceneSpec:
        s = self.data["scene"]
        return synth.SceneSpec(
            kind=s["kind"], num_points=s["num_points"], frames=s["frames"],
            occluders=tuple(synth.Occluder(tuple(o.get("center", (0.0, 0.0, 4.0))),
                                           tuple(o.get("half_size", (0.5, 0.5, 0.02))),
                                           tuple(o.get("velocity", (0.0, 0.0, 0.0))))
                            for o in s["occluders"]),
            noise_sigma=s["noise_sigma"], seed=self.seed, motion=_motion(s["motion"]),
            num_background=s["num_background"], num_clusters=s["num_clusters"],
            image_size=s["image_size"], focal=s["focal"], camera_orbit=s["camera_orbit"],
            self_occlusion=s["self_occlusion"], occluder_spacing=s["occluder_spacing"])

    def driving_motion(self) -> synth.MotionScript:
        return _motion(self.data["scene"]["driving_motion"])

    def artifacts(self) -> tuple:
        return tuple(synth.ArtifactSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in a.items()})
                     for a in self.data["scene"]["artifacts"])

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"


def _motion(d: dict) -> synth.MotionScript:
    return synth.MotionScript(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def validate(data: dict) -> RunConfig:
    scene = data["scene"]
    _check_items(scene["occluders"], _OCCLUDER_KEYS, "scene.occluders")
    _check_items(scene["artifacts"], _ARTIFACT_KEYS, "scene.artifacts")
    for key in ("motion", "driving_motion"):
        extra = set(scene[key]) - _MOTION_KEYS
        if extra:
            raise ConfigError(f"unknown config key 'scene.{key}.{sorted(extra)[0]}'")
    cfg = RunConfig(data)
    try:
        cfg.weights()
        cfg.optim()
        cfg.scene_spec()
        cfg.artifacts()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    if data["metrics"]["gamma"] < 0:
        raise ConfigError("config key 'metrics.gamma' must be >= 0")
    if data["variance"]["num_pairs"] < 30:
        raise ConfigError("config key 'variance.num_pairs' must be >= 30")
    return cfg


def preset(name: str) -> RunConfig:
    overrides = _preset_overrides()
    if name not in overrides:
        raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})")
    data = _merge(_defaults(), overrides[name], "")
    data["preset"] = name
    return validate(data)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    start = preset(raw.get("preset", "default"))
    return validate(_merge(start.data, raw, ""))


def load(spec: str | None) -> RunConfig:
    """Resolve ``spec`` as a preset name, else as a path to a JSON file."""
    if spec is None:
        return preset("default")
    if spec in PRESETS:
        return preset(spec)
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"config '{spec}' is neither a preset nor a readable file")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw)
