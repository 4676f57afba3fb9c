"""Strict JSON run configuration shared by the CLI commands.

One document holds every module config verbatim. Unknown keys are rejected at
every level, and the fields that move results (budget, segment lengths and all
learning rates) have no defaults: they must be written out.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .datagen import GenConfig
from .distill import DistillConfig
from .experts import TrainConfig
from .model import BackboneSpec

SECTIONS = ("datagen", "backbone", "expert", "coreset", "distill", "eval", "output_dir", "seed")
DISTILL_REQUIRED = ("M", "T_plus", "R", "R_hat", "outer_steps", "lr_img", "lr_txt", "lr_alpha")


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CoresetConfig:
    M: int
    encoded: bool = False


@dataclass(frozen=True)
class EvalConfig:
    train: TrainConfig
    seeds: int = 5
    seed0: int = 1000

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "seeds": self.seeds, "seed0": self.seed0}


def _strict(section: str, d, allowed, required=()) -> dict:
    if not isinstance(d, dict):
        raise RunConfigError(f"section '{section}' must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise RunConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise RunConfigError(f"'{section}' must set {missing} explicitly")
    return d


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _build(section: str, fn):
    try:
        return fn()
    except RunConfigError:
        raise
    except (ValueError, TypeError, RuntimeError) as exc:
        raise RunConfigError(f"invalid '{section}' section: {exc}") from None


def _train_config(section: str, d) -> TrainConfig:
    _strict(section, d, _fields(TrainConfig), required=("epochs", "lr"))
    cfg = _build(section, lambda: TrainConfig.from_dict(d))
    _build(section, cfg.validate)
    return cfg


@dataclass
class RunConfig:
    datagen: GenConfig
    backbone: BackboneSpec | None = None
    expert: TrainConfig | None = None
    coreset: CoresetConfig | None = None
    distill: DistillConfig | None = None
    eval: EvalConfig | None = None
    output_dir: str | None = None
    seed: int = 0

    def need(self, section: str):
        value = getattr(self, section)
        if value is None:
            raise RunConfigError(f"this command needs a '{section}' section in the config")
        return value

    def to_dict(self) -> dict:
        out: dict = {"datagen": self.datagen.to_dict(), "seed": self.seed}
        if self.backbone is not None:
            out["backbone"] = self.backbone.to_dict()
        if self.expert is not None:
            out["expert"] = self.expert.to_dict()
        if self.coreset is not None:
            out["coreset"] = dataclasses.asdict(self.coreset)
        if self.distill is not None:
            out["distill"] = self.distill.to_dict()
        if self.eval is not None:
            out["eval"] = self.eval.to_dict()
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        _strict("config", d, SECTIONS)
        datagen = _build("datagen", lambda: GenConfig.from_dict(_strict("datagen", d.get("datagen", {}), _fields(GenConfig))))
        _build("datagen", datagen.validate)
        cfg = cls(datagen=datagen)
        if "backbone" in d:
            cfg.backbone = _build("backbone", lambda: BackboneSpec.from_dict(d["backbone"]))
            _build("backbone", cfg.backbone.validate)
            if cfg.backbone.in_dim != datagen.d_img:
                raise RunConfigError(f"backbone in_dim {cfg.backbone.in_dim} != datagen d_img {datagen.d_img}")
        if "expert" in d:
            cfg.expert = _train_config("expert", d["expert"])
        if "coreset" in d:
            c = _strict("coreset", d["coreset"], _fields(CoresetConfig), required=("M",))
            cfg.coreset = CoresetConfig(**c)
            if not isinstance(cfg.coreset.M, int) or cfg.coreset.M < 0:
                raise RunConfigError("coreset M must be a non-negative integer")
        if "distill" in d:
            dd = _strict("distill", d["distill"], _fields(DistillConfig), required=DISTILL_REQUIRED)
            cfg.distill = _build("distill", lambda: DistillConfig.from_dict(dd))
            _build("distill", cfg.distill.validate)
            if cfg.backbone is not None and cfg.distill.match_scope != cfg.backbone.scope:
                raise RunConfigError(f"distill match_scope '{cfg.distill.match_scope}' != backbone scope '{cfg.backbone.scope}'")
        if "eval" in d:
            e = _strict("eval", d["eval"], ("train", "seeds", "seed0"), required=("train",))
            seeds = e.get("seeds", 5)
            if not isinstance(seeds, int) or seeds < 1:
                raise RunConfigError("eval seeds must be a positive integer")
            cfg.eval = EvalConfig(_train_config("eval.train", e["train"]), seeds, e.get("seed0", 1000))
        if "output_dir" in d:
            cfg.output_dir = str(d["output_dir"])
        if "seed" in d:
            if not isinstance(d["seed"], int):
                raise RunConfigError("seed must be an integer")
            cfg.seed = d["seed"]
        return cfg


def parse_run_config(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(d)


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise RunConfigError(f"cannot read config {path}: {exc}") from None
    return parse_run_config(text)


def load_backbone(path) -> BackboneSpec:
    """A standalone backbone spec (used for cross-architecture evaluation)."""
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RunConfigError(f"cannot read backbone spec {path}: {exc}") from None
    spec = _build("arch", lambda: BackboneSpec.from_dict(d))
    _build("arch", spec.validate)
    return spec
