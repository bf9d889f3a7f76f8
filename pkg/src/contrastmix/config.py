"""Flat ``key = value`` run configuration with strict validation.

One file drives every command.  Unknown keys are rejected (typos fail
loudly instead of silently falling back to defaults), ``#`` starts a
comment, and every run directory receives a byte-reproducible echo of
the fully resolved configuration for provenance.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .adapt import TrainConfig
from .core import Spacing
from .net import NetConfig
from .phantom import OrganSpec, PhantomConfig
from .sampler import PatchGeometry


class ConfigError(ValueError):
    pass


_ORGAN_KEY = re.compile(r"organ(\d+)$")


def _ints(s: str, n: int, key: str) -> tuple[int, ...]:
    parts = s.split()
    if len(parts) != n:
        raise ConfigError(f"{key}: expected {n} integers, got '{s}'")
    return tuple(int(p) for p in parts)


def _floats(s: str, n: int, key: str) -> tuple[float, ...]:
    parts = s.split()
    if len(parts) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got '{s}'")
    return tuple(float(p) for p in parts)


def _bool(s: str, key: str) -> bool:
    if s in ("true", "yes", "1"):
        return True
    if s in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got '{s}'")


DEFAULT_ORGANS = (
    "1 16 16 16 7 6 5 200 90",
    "2 32 30 20 6 7 5 240 10",
    "3 24 34 32 5 5 6 160 100",
    "4 34 14 30 5 4 5 120 -20",
)

DEFAULTS: dict[str, str] = {
    # phantom
    "dims": "48 48 48",
    "spacing": "0.68 0.68 3.0",
    "background_hu": "40",
    "noise_sigma": "8",
    "center_jitter": "2",
    "misalignment": "0",
    "num_subjects": "24",
    "seed": "0",
    # preprocessing
    "window_lo": "-175",
    "window_hi": "250",
    # split
    "split_ratios": "0.75 0.125 0.125",
    # patch sampling
    "patch_dims": "24 24 12",
    "centers_per_organ": "8",
    # network
    "net_widths": "8 16 32",
    "net_norm": "instance",
    "coarse_widths": "8 16",
    # training
    "epochs": "20",
    "steps_per_epoch": "100",
    "base_lr": "3e-3",
    "weight_decay": "0",
    "k_augment": "1",
    "temperature": "0.1",
    "beta_alpha": "0.5",
    "beta_beta": "0.5",
    "lambda_unsup": "1.0",
    "lambda_l2": "1.0",
    "eps_dice": "1e-5",
    "per_sample_h": "false",
    # coarse prior
    "prior_mode": "oracle",  # oracle | coarse
    "prior_dilation": "2",
    "prior_flip": "0.2",
    "coarse_run": "",
    # paths
    "dataset_dir": "",
    "teacher_run": "",
    "out_dir": "",
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, str] = field(default_factory=dict)
    organs: tuple[str, ...] = DEFAULT_ORGANS

    # -- raw access -------------------------------------------------------
    def raw(self, key: str) -> str:
        if key in self.values:
            return self.values[key]
        return DEFAULTS[key]

    def get_int(self, key: str) -> int:
        return int(self.raw(key))

    def get_float(self, key: str) -> float:
        return float(self.raw(key))

    def get_str(self, key: str) -> str:
        return self.raw(key)

    def get_bool(self, key: str) -> bool:
        return _bool(self.raw(key), key)

    # -- structured views -------------------------------------------------
    @property
    def seed(self) -> int:
        return self.get_int("seed")

    def with_seed(self, seed: int) -> "RunConfig":
        values = dict(self.values)
        values["seed"] = str(seed)
        return replace(self, values=values)

    @property
    def window(self) -> tuple[float, float]:
        return (self.get_float("window_lo"), self.get_float("window_hi"))

    def organ_specs(self) -> tuple[OrganSpec, ...]:
        specs = []
        for i, line in enumerate(self.organs, start=1):
            v = _floats(line, 9, f"organ{i}")
            specs.append(
                OrganSpec(
                    class_id=int(v[0]),
                    center=(v[1], v[2], v[3]),
                    semi_axes=(v[4], v[5], v[6]),
                    source_hu=v[7],
                    target_hu=v[8],
                )
            )
        return tuple(specs)

    def phantom_config(self) -> PhantomConfig:
        sp = _floats(self.raw("spacing"), 3, "spacing")
        return PhantomConfig(
            dims=_ints(self.raw("dims"), 3, "dims"),
            spacing=Spacing(*sp),
            background_hu=self.get_float("background_hu"),
            organs=self.organ_specs(),
            noise_sigma=self.get_float("noise_sigma"),
            center_jitter=self.get_float("center_jitter"),
            misalignment=self.get_float("misalignment"),
            num_subjects=self.get_int("num_subjects"),
            seed=self.seed,
        )

    def split_ratios(self) -> tuple[float, float, float]:
        return _floats(self.raw("split_ratios"), 3, "split_ratios")

    @property
    def num_classes(self) -> int:
        return 1 + max(int(_floats(o, 9, "organ")[0]) for o in self.organs)

    def geometry(self) -> PatchGeometry:
        return PatchGeometry(
            patch_dims=_ints(self.raw("patch_dims"), 3, "patch_dims"),
            centers_per_organ=self.get_int("centers_per_organ"),
        )

    def net_config(self) -> NetConfig:
        return NetConfig(
            in_channels=2,
            num_classes=self.num_classes,
            widths=_ints(self.raw("net_widths"), len(self.raw("net_widths").split()), "net_widths"),
            norm=self.get_str("net_norm"),
        )

    def coarse_net_config(self) -> NetConfig:
        return NetConfig(
            in_channels=1,
            num_classes=self.num_classes,
            widths=_ints(self.raw("coarse_widths"), len(self.raw("coarse_widths").split()), "coarse_widths"),
            norm=self.get_str("net_norm"),
        )

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            num_classes=self.num_classes,
            geometry=self.geometry(),
            epochs=self.get_int("epochs"),
            steps_per_epoch=self.get_int("steps_per_epoch"),
            k_augment=self.get_int("k_augment"),
            temperature=self.get_float("temperature"),
            beta_alpha=self.get_float("beta_alpha"),
            beta_beta=self.get_float("beta_beta"),
            lam=self.get_float("lambda_unsup"),
            lam_t=self.get_float("lambda_l2"),
            eps_dice=self.get_float("eps_dice"),
            base_lr=self.get_float("base_lr"),
            weight_decay=self.get_float("weight_decay"),
            per_sample_h=self.get_bool("per_sample_h"),
            seed=self.seed,
        )

    # -- serialization ----------------------------------------------------
    def resolved_text(self) -> str:
        """Every key with its effective value, deterministic ordering."""
        lines = [f"{k} = {self.raw(k)}" for k in sorted(DEFAULTS)]
        lines += [f"organ{i} = {line}" for i, line in enumerate(self.organs, start=1)]
        return "\n".join(lines) + "\n"

    def validate(self) -> "RunConfig":
        # Force every structured view once so bad values fail at parse time.
        self.phantom_config()
        self.split_ratios()
        self.geometry()
        self.net_config()
        self.coarse_net_config()
        self.train_config("teacher")
        self.window
        if self.get_str("prior_mode") not in ("oracle", "coarse"):
            raise ConfigError(f"prior_mode must be 'oracle' or 'coarse', got '{self.raw('prior_mode')}'")
        if not self.get_float("window_lo") < self.get_float("window_hi"):
            raise ConfigError("window_lo must be < window_hi")
        return self


def parse_config(text: str) -> RunConfig:
    values: dict[str, str] = {}
    organs: dict[int, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw_line.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        m = _ORGAN_KEY.match(key)
        if m:
            organs[int(m.group(1))] = value
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = value
    organ_lines = tuple(organs[i] for i in sorted(organs)) if organs else DEFAULT_ORGANS
    return RunConfig(values=values, organs=organ_lines).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
