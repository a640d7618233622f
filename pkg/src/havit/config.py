"""Flat ``section.key=value`` run configuration.

Resolution order, later wins: built-in defaults, the chosen preset, the
config file, ``--set`` overrides, dedicated command-line flags. The resolved
spec is echoed in the same format and re-parses to an identical spec.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from havit.errors import ConfigurationError
from havit.trainer import DEFAULT_ALPHA_GRID


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    s = s.strip()
    return tuple(float(x) for x in s.split(",") if x.strip()) if s else ()


def _parse_ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(x) for x in s.split(",") if x.strip()) if s else ()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


def _default_out() -> str:
    return os.environ.get("HAVIT_OUT", "runs")


KEYS: dict[str, Key] = {
    "run.preset": Key(str, "desk", "architecture preset: tiny | desk"),
    "run.out": Key(str, None, "output directory (default $HAVIT_OUT or ./runs)"),
    "run.jobs": Key(int, 1, "parallel sweep cells"),
    "model.image_height": Key(int, 0, "input height in pixels (0 = from dataset)"),
    "model.image_width": Key(int, 0, "input width in pixels (0 = from dataset)"),
    "model.patch_size": Key(int, 0, "patch size P (0 = 4 for 32px, 8 for 64px)"),
    "model.d_model": Key(int, 256, "token width"),
    "model.num_heads": Key(int, 8, "attention heads"),
    "model.depth": Key(int, 6, "encoder layers"),
    "model.mlp_ratio": Key(float, 4.0, "MLP hidden width / d_model"),
    "model.num_classes": Key(int, 0, "classifier outputs (0 = from dataset)"),
    "model.alpha": Key(float, 0.45, "blend weight of current logits, in [0, 1]"),
    "model.init": Key(str, "random", "initial history: random | zero"),
    "model.baseline": Key(_parse_bool, False, "plain ViT attention, no history"),
    "model.detach_history": Key(_parse_bool, False, "stop gradients through the history"),
    "model.init_std": Key(float, 0.02, "truncated-normal std for weights"),
    "train.epochs": Key(int, 100, "training epochs"),
    "train.base_lr": Key(float, 0.003, "peak AdamW learning rate"),
    "train.weight_decay": Key(float, 0.05, "decoupled weight decay"),
    "train.batch_size": Key(int, 128, "minibatch size"),
    "train.warmup_epochs": Key(int, 10, "linear warmup epochs"),
    "train.label_smoothing": Key(float, 0.1, "label smoothing factor"),
    "train.seed": Key(int, 0, "seed for weights, data order and the H_0 stream"),
    "train.alpha_grid": Key(_parse_floats, DEFAULT_ALPHA_GRID, "comma-separated sweep alphas"),
    "train.max_steps": Key(int, 0, "stop after this many steps (0 = no limit)"),
    "data.name": Key(str, "synthetic", "dataset: cifar100 | synthetic"),
    "data.path": Key(str, "", "CIFAR-100 binary directory (train.bin, test.bin)"),
    "data.num_classes": Key(int, 2, "synthetic classes"),
    "data.samples_per_class": Key(int, 250, "synthetic training samples per class"),
    "data.eval_samples_per_class": Key(int, 50, "synthetic eval samples per class"),
    "data.image_size": Key(int, 32, "synthetic image side in pixels"),
    "data.seed": Key(int, 0, "synthetic generator seed (eval split uses seed + 1)"),
    "sweep.inits": Key(str, "random,zero", "comma-separated init strategies to sweep"),
    "gradcheck.h": Key(float, 5e-5, "central-difference step"),
    "gradcheck.batch": Key(int, 2, "images in the checked batch"),
    "gradcheck.num_classes": Key(int, 4, "classes of the checked model"),
    "gradcheck.init_std": Key(float, 0.2, "weight std at the checked point"),
    "gradcheck.max_elements": Key(int, 0, "entries checked per parameter (0 = all)"),
    "gradcheck.max_params": Key(int, 20_000, "refuse models larger than this"),
    "gradcheck.tolerance": Key(float, 1e-5, "pass threshold on max relative error"),
    "export.layers": Key(_parse_ints, (), "1-based layers to export (empty = all)"),
    "export.num_images": Key(int, 4, "images to export maps for"),
}

PRESETS: dict[str, dict[str, Any]] = {
    "tiny": {"model.patch_size": 8, "model.d_model": 16, "model.num_heads": 2,
             "model.depth": 2, "model.mlp_ratio": 4.0},
    "desk": {"model.patch_size": 0, "model.d_model": 256, "model.num_heads": 8,
             "model.depth": 6, "model.mlp_ratio": 4.0},
}


def parse_value(key: str, raw: str):
    if key not in KEYS:
        raise ConfigurationError(f"unknown config key {key!r}")
    try:
        return KEYS[key].parse(raw.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from None


def parse_lines(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


@dataclass
class RunSpec:
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def resolve(cls, file_text: str | None = None, overrides: dict[str, Any] | None = None,
                preset: str | None = None) -> RunSpec:
        file_values = parse_lines(file_text) if file_text else {}
        overrides = dict(overrides or {})
        for key in overrides:
            if key not in KEYS:
                raise ConfigurationError(f"unknown config key {key!r}")
        name = preset or overrides.get("run.preset") or file_values.get("run.preset") or KEYS["run.preset"].default
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        values = {k: key.default for k, key in KEYS.items()}
        values["run.out"] = _default_out()
        values.update(PRESETS[name])
        values.update(file_values)
        values.update(overrides)
        values["run.preset"] = name
        spec = cls(values)
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path, overrides=None, preset=None) -> RunSpec:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        return cls.resolve(text, overrides, preset)

    def validate(self) -> None:
        v = self.values
        if v["model.init"] not in ("random", "zero"):
            raise ConfigurationError(f"model.init must be random or zero, got {v['model.init']!r}")
        if not 0.0 <= v["model.alpha"] <= 1.0:
            raise ConfigurationError(f"model.alpha must lie in [0, 1], got {v['model.alpha']}")
        if v["data.name"] not in ("cifar100", "synthetic"):
            raise ConfigurationError(f"data.name must be cifar100 or synthetic, got {v['data.name']!r}")
        for s in self.sweep_inits():
            if s not in ("random", "zero"):
                raise ConfigurationError(f"sweep.inits contains unknown strategy {s!r}")

    def sweep_inits(self) -> list[str]:
        return [s.strip() for s in self.values["sweep.inits"].split(",") if s.strip()]

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in sorted(self.values))


def describe_keys() -> str:
    width = max(map(len, KEYS))
    lines = [f"  {k.ljust(width)}  {key.help} [default: {_fmt(key.default) if key.default is not None else '$HAVIT_OUT or runs'}]"
             for k, key in KEYS.items()]
    return "config keys (section.key=value):\n" + "\n".join(lines)
