"""Run configuration: sectioned key=value files, named profiles, and stage fingerprints.

    [teacher]
    steps = 3000
    lr = 1e-4

Every field of every section dataclass below is addressable as
``section.key``. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_train: int = 4000
    n_holdout: int = 512
    image_size: int = 16
    seed_offset: int = 0


@dataclass
class TeacherSection:
    steps: int = 5000
    batch: int = 32
    lr: float = 5e-4
    p_null: float = 0.1
    T: int = 64


@dataclass
class DistillSection:
    w_steps: int = 2000
    w_batch: int = 32
    w_lr: float = 1e-4
    omega_max: float = 19.0
    segments: int = 4
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-4
    lambda_f: float = 1.5
    lambda_r: float = 1.5
    ema_decay: float = 0.95
    solver_skip: int = 4
    start_offset: int = 1
    adapter_rank: int = 0


@dataclass
class CycleSection:
    iterations: int = 1000
    batch: int = 16
    lr: float = 3e-6
    lambda_rec: float = 1.0
    lambda_f: float = 1.5
    lambda_cd: float = 1.0
    adapter_rank: int = 8
    rec_loss: str = "lpips"
    patch_grid: int = 1
    noise_t: int = 0


@dataclass
class EditSection:
    cfg_schedule: tuple[float, ...] = (0.0, 7.0, 11.0, 19.0)
    w_self: float = 500.0
    w_feat: float = 0.5
    r_lower: float = 0.0
    r_upper: float = 1.0
    eps_den: float = 1e-8
    r_profile: tuple[float, ...] = ()


@dataclass
class EvalSection:
    n_recon: int = 256
    n_edit_images: int = 64
    teacher_steps: int = 64
    classifier_steps: int = 1500
    batch: int = 64


SECTIONS = {
    "data": DataSection,
    "teacher": TeacherSection,
    "distill": DistillSection,
    "cycle": CycleSection,
    "edit": EditSection,
    "eval": EvalSection,
}

# Sections each produced artifact depends on, in pipeline order.
STAGE_DEPS = {
    "data": ("data",),
    "teacher": ("data", "teacher"),
    "student": ("data", "teacher", "distill"),
    "icd": ("data", "teacher", "distill"),
    "cycle": ("data", "teacher", "distill", "cycle"),
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    cycle: CycleSection = field(default_factory=CycleSection)
    edit: EditSection = field(default_factory=EditSection)
    eval: EvalSection = field(default_factory=EvalSection)
    profile: str = "toy"

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def config_hash(self) -> str:
        return _digest(self.to_dict())

    def fingerprint(self, stage: str, seed: int) -> str:
        """Hash of exactly the sections an artifact depends on, plus the seed."""
        if stage not in STAGE_DEPS:
            raise ConfigError(f"unknown stage {stage!r}")
        d = self.to_dict()
        return _digest({"seed": seed, **{s: d[s] for s in STAGE_DEPS[stage]}})

    def set(self, path: str, raw: str) -> None:
        section, _, key = path.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(obj, key, _coerce(fields[key], raw, path))

    def to_text(self) -> str:
        lines = [f"# profile: {self.profile}"]
        for name, sec in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                if isinstance(v, (list, tuple)):
                    v = ",".join(repr(float(x)) for x in v)
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(f: dataclasses.Field, raw, path: str):
    kind = type(f.default) if f.default is not dataclasses.MISSING else type(f.default_factory())
    if not isinstance(raw, str):
        return tuple(float(x) for x in raw) if kind is tuple else kind(raw)
    raw = raw.strip()
    try:
        if kind is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {path}: {raw!r}") from e


def toy_profile() -> RunConfig:
    return RunConfig()


def paper_profile() -> RunConfig:
    """Hyperparameters reported for the full-scale setting; architecture and data stay toy-sized."""
    cfg = RunConfig(profile="paper")
    cfg.cycle.lr = 1e-6
    cfg.cycle.lambda_f = 1.5
    cfg.cycle.lambda_rec = 1.0
    cfg.cycle.iterations = 6000
    cfg.cycle.batch = 16
    cfg.distill.lambda_f = 1.5
    cfg.edit.cfg_schedule = (0.0, 7.0, 11.0, 19.0)
    cfg.edit.w_self = 20000.0
    cfg.edit.w_feat = 0.5
    cfg.edit.r_lower = 0.0
    cfg.edit.r_upper = 1.0
    return cfg


PROFILES = {"toy": toy_profile, "paper": paper_profile}


def load_config(path: str | Path | None = None, profile: str = "toy") -> RunConfig:
    """Start from ``profile`` and apply overrides from ``path``."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = PROFILES[profile]()
    if path is None:
        validate(cfg)
        return cfg
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(Path(path).read_text())
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg.set(f"{section}.{key}", raw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.distill.segments < 1 or cfg.teacher.T % cfg.distill.segments:
        raise ConfigError("teacher.T must be divisible by distill.segments")
    if len(cfg.edit.cfg_schedule) != cfg.distill.segments:
        raise ConfigError("edit.cfg_schedule length must equal distill.segments")
    if any(w < 0 for w in cfg.edit.cfg_schedule):
        raise ConfigError("edit.cfg_schedule values must be >= 0")
    if cfg.edit.r_profile and len(cfg.edit.r_profile) != cfg.distill.segments:
        raise ConfigError("edit.r_profile length must equal distill.segments")
    if cfg.edit.r_lower > cfg.edit.r_upper:
        raise ConfigError("edit.r_lower must not exceed edit.r_upper")
    if min(cfg.cycle.lambda_rec, cfg.cycle.lambda_f, cfg.cycle.lambda_cd, cfg.edit.w_self, cfg.edit.w_feat) < 0:
        raise ConfigError("weights must be >= 0")
    if not 0 < cfg.distill.ema_decay < 1:
        raise ConfigError("distill.ema_decay must lie in (0, 1)")
    if cfg.cycle.rec_loss not in ("lpips", "l2", "huber"):
        raise ConfigError(f"unknown cycle.rec_loss {cfg.cycle.rec_loss!r}")
