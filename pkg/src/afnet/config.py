"""Run configuration: one flat-sectioned key=value document.

Every field is explicit; loading starts from the defaults below, applies the
file, rejects unknown sections/keys, and validates everything at once. The
resolved document is written next to command outputs for provenance, so a
run never depends on hidden defaults.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .arch import VARIANT_TAGS, ModelVariant, backbone_config
from .errors import ValidationError
from .train import AugmentConfig, LrSchedule, TrainHyper

_BACKBONES = ("tiny", "resnet18-topology", "resnet34-topology", "resnet50-topology")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "on", "yes", "1"):
        return True
    if t in ("false", "off", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# (section, key, parser, default) — defaults are the full-scale training recipe
_SCHEMA = [
    ("run", "seed", int, 0),
    ("run", "variant", str, "MPVN-RM"),
    ("model", "main_backbone", str, "resnet50-topology"),
    ("model", "aux_backbone", str, "resnet18-topology"),
    ("model", "decoder_width", int, 512),
    ("model", "num_classes", int, 6),
    ("model", "attention_reduction", int, 16),
    ("model", "sa_on_low", _bool, False),
    ("model", "align_corners", _bool, False),
    ("data", "manifest", str, "data/manifest.txt"),
    ("data", "stats", str, "prepared/stats.csv"),
    ("data", "prepared_dir", str, "prepared"),
    ("data", "slice_size", int, 800),
    ("data", "slice_overlap", int, 400),
    ("data", "crop_size", int, 640),
    ("data", "val_tiles", str, ""),
    ("augment", "hflip", _bool, True),
    ("augment", "vflip", _bool, True),
    ("augment", "rotate90", _bool, True),
    ("optimizer", "beta1", float, 0.9),
    ("optimizer", "beta2", float, 0.999),
    ("optimizer", "eps", float, 1e-8),
    ("optimizer", "weight_decay", float, 1e-4),
    ("schedule", "lr0", float, 1e-5),
    ("schedule", "lr1", float, 1e-3),
    ("schedule", "warmup_epochs", int, 100),
    ("schedule", "step_interval_epochs", int, 200),
    ("schedule", "step_factor", float, 0.1),
    ("train", "epochs", int, 1000),
    ("train", "batch_size", int, 2),
    ("train", "checkpoint_dir", str, "runs/checkpoints"),
    ("infer", "tile_size", int, 1920),
    ("infer", "tta", _bool, True),
    ("infer", "tta_set", str, "d4"),
    ("infer", "stitch_mode", str, "crop"),
    ("infer", "dump_features", _bool, False),
    ("infer", "save_probabilities", _bool, False),
    ("infer", "out_dir", str, "runs/predictions"),
    ("eval", "erode_radius", int, 3),
    ("eval", "mean_f1_classes", str, "named5"),
    ("eval", "figures", _bool, True),
    ("eval", "report_dir", str, "runs/report"),
]


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key)

    def set(self, key: str, value) -> None:
        if key not in self.values:
            raise ValidationError(f"unknown config key {key!r}")
        self.values[key] = value

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(values={key: default for _, key, _, default in _SCHEMA})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ValidationError(f"config parse error: {exc}") from exc
        known = {(s, k): (k, parse) for s, k, parse, _ in _SCHEMA}
        sections = {s for s, _, _, _ in _SCHEMA}
        cfg = cls.defaults()
        problems = []
        for section in parser.sections():
            if section not in sections:
                problems.append(f"unknown section [{section}]")
                continue
            for key, raw in parser.items(section):
                entry = known.get((section, key))
                if entry is None:
                    problems.append(f"unknown key {key!r} in section [{section}]")
                    continue
                name, parse = entry
                try:
                    cfg.values[name] = parse(raw)
                except ValueError as exc:
                    problems.append(f"[{section}] {key}: {exc}")
        if problems:
            raise ValidationError(problems)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        out = io.StringIO()
        current = None
        for section, key, _, _ in _SCHEMA:
            if section != current:
                if current is not None:
                    out.write("\n")
                out.write(f"[{section}]\n")
                current = section
            out.write(f"{key} = {_fmt(self.values[key])}\n")
        return out.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def validate(self) -> None:
        problems = []
        v = self.values
        if v["variant"] not in VARIANT_TAGS:
            problems.append(f"variant must be one of {VARIANT_TAGS}, got {v['variant']!r}")
        for key in ("main_backbone", "aux_backbone"):
            if v[key] not in _BACKBONES:
                problems.append(f"{key} must be one of {_BACKBONES}, got {v[key]!r}")
        for key in ("decoder_width", "num_classes", "attention_reduction", "slice_size",
                    "crop_size", "batch_size", "epochs", "tile_size", "warmup_epochs",
                    "step_interval_epochs"):
            if v[key] < 1 and not (key == "warmup_epochs" and v[key] == 0):
                problems.append(f"{key} must be positive, got {v[key]}")
        if v["num_classes"] < 2:
            problems.append(f"num_classes must be >= 2, got {v['num_classes']}")
        if v["crop_size"] > v["slice_size"]:
            problems.append(f"crop_size {v['crop_size']} exceeds slice_size {v['slice_size']}")
        for key in ("slice_size", "tile_size"):
            if v[key] % 2:
                problems.append(f"{key} must be even, got {v[key]}")
        if v["slice_overlap"] != v["slice_size"] // 2:
            problems.append(f"slice_overlap must be slice_size/2 "
                            f"({v['slice_size'] // 2}), got {v['slice_overlap']}")
        if v["crop_size"] % 32:
            problems.append(f"crop_size must be divisible by 32, got {v['crop_size']}")
        if v["tile_size"] % 32:
            problems.append(f"tile_size must be divisible by 32, got {v['tile_size']}")
        for key in ("lr0", "lr1"):
            if v[key] <= 0:
                problems.append(f"{key} must be positive, got {v[key]}")
        if not 0 < v["step_factor"] < 1:
            problems.append(f"step_factor must be in (0,1), got {v['step_factor']}")
        if v["weight_decay"] < 0 or v["eps"] <= 0:
            problems.append("weight_decay must be >= 0 and eps > 0")
        if not 0 <= v["beta1"] < 1 or not 0 <= v["beta2"] < 1:
            problems.append("betas must be in [0,1)")
        if v["stitch_mode"] not in ("crop", "average"):
            problems.append(f"stitch_mode must be crop or average, got {v['stitch_mode']!r}")
        if v["tta_set"] not in ("d4", "flips", "identity"):
            problems.append(f"tta_set must be d4, flips, or identity, got {v['tta_set']!r}")
        if v["mean_f1_classes"] not in ("named5", "all"):
            problems.append(f"mean_f1_classes must be named5 or all, got {v['mean_f1_classes']!r}")
        if v["erode_radius"] < 0:
            problems.append(f"erode_radius must be >= 0, got {v['erode_radius']}")
        if problems:
            raise ValidationError(problems)

    # ---- derived objects -------------------------------------------------

    def model_variant(self, optical_channels: int = 3, aux_channels: int = 2) -> ModelVariant:
        v = self.values
        tag = v["variant"]
        if tag == "mDFN":
            main = backbone_config(v["main_backbone"], optical_channels + aux_channels)
            aux = None
        elif tag == "DFN":
            main = backbone_config(v["main_backbone"], optical_channels)
            aux = None
        else:
            main = backbone_config(v["main_backbone"], optical_channels)
            aux = backbone_config(v["aux_backbone"], aux_channels)
        return ModelVariant(tag=tag, main=main, aux=aux,
                            decoder_width=v["decoder_width"],
                            num_classes=v["num_classes"],
                            attention_reduction=v["attention_reduction"],
                            sa_on_low=v["sa_on_low"],
                            align_corners=v["align_corners"])

    def schedule(self, iters_per_epoch: int) -> LrSchedule:
        v = self.values
        return LrSchedule(lr0=v["lr0"], lr1=v["lr1"], warmup_epochs=v["warmup_epochs"],
                          step_interval_epochs=v["step_interval_epochs"],
                          step_factor=v["step_factor"], iters_per_epoch=iters_per_epoch)

    def hyper(self) -> TrainHyper:
        v = self.values
        return TrainHyper(epochs=v["epochs"], batch_size=v["batch_size"],
                          beta1=v["beta1"], beta2=v["beta2"], eps=v["eps"],
                          weight_decay=v["weight_decay"], seed=v["seed"])

    def augment_config(self) -> AugmentConfig:
        v = self.values
        crop = v["crop_size"] if v["crop_size"] < v["slice_size"] else None
        return AugmentConfig(hflip=v["hflip"], vflip=v["vflip"],
                             rotate90=v["rotate90"], crop=crop)

    def val_tile_ids(self) -> set:
        raw = self.values["val_tiles"].strip()
        return {t.strip() for t in raw.split(",") if t.strip()} if raw else set()
