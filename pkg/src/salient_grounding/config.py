"""Run configuration: nested dataclasses, named profiles, ``key=value`` files.

Config files hold one ``section.field=value`` per line (``#`` comments);
top-level fields take no section prefix.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    n_videos: int = 300
    t_min: int = 64
    t_max: int = 96
    n_concepts: int = 12
    noise: float = 0.05
    span_frac_min: float = 0.02
    span_frac_max: float = 0.08
    min_span: int = 1
    spans_per_video: int = 2
    query_len: int = 3
    vocab: int = 24
    frames: int = 4
    height: int = 8
    width: int = 8
    channels: int = 3
    # side of the square region a concept occupies; 0 fills the whole frame
    object_size: int = 0
    val_frac: float = 0.2
    # sliding-window clipping metadata, recorded in the manifest only
    clip_seconds: float = 1.0
    clip_stride_seconds: float = 1.0

    def validate(self):
        if self.n_concepts < 2:
            raise ConfigError("data.n_concepts must be >= 2")
        if not (8 <= self.t_min <= self.t_max <= 512):
            raise ConfigError("data.t_min/t_max must satisfy 8 <= t_min <= t_max <= 512")
        if not (0 < self.span_frac_min <= self.span_frac_max < 1):
            raise ConfigError("data.span_frac_min/max must satisfy 0 < min <= max < 1")
        if self.min_span < 1:
            raise ConfigError("data.min_span must be >= 1")
        if self.spans_per_video < 1 or self.spans_per_video > self.n_concepts:
            raise ConfigError("data.spans_per_video must be in [1, n_concepts]")
        if self.query_len < 1:
            raise ConfigError("data.query_len must be >= 1")
        if self.noise < 0:
            raise ConfigError("data.noise must be >= 0")
        if not (0 <= self.object_size <= min(self.height, self.width)):
            raise ConfigError("data.object_size must be in [0, min(height, width)]")
        if not (0 < self.val_frac < 1):
            raise ConfigError("data.val_frac must be in (0, 1)")
        if self.vocab ** self.query_len < self.n_concepts:
            raise ConfigError("data.vocab too small to give every concept a distinct query")


@dataclass
class EncoderConfig:
    d_model: int = 32
    n_heads: int = 2
    patch: tuple[int, int, int] = (1, 2, 2)
    sidekick_blocks: int = 2
    expert_blocks: int = 4
    pool_index: int = 1
    pool_factor: int = 4
    tau: int = 2
    text_max_len: int = 16

    def grid(self, data: DataConfig) -> tuple[int, int, int]:
        pl, ph, pw = self.patch
        return data.frames // pl, data.height // ph, data.width // pw

    def validate(self, data: DataConfig):
        pl, ph, pw = self.patch
        if data.frames % pl or data.height % ph or data.width % pw:
            raise ConfigError(f"encoder.patch {self.patch} does not divide the clip "
                              f"({data.frames}x{data.height}x{data.width})")
        if not 1 <= self.pool_index <= self.sidekick_blocks:
            raise ConfigError("encoder.pool_index must lie in [1, sidekick_blocks]")
        if self.tau < 1 or self.pool_factor < 1:
            raise ConfigError("encoder.tau and encoder.pool_factor must be >= 1")
        if any(g % self.pool_factor for g in self.grid(data)):
            raise ConfigError(f"token grid {self.grid(data)} not divisible by pool_factor {self.pool_factor}")
        if self.d_model % self.n_heads:
            raise ConfigError("encoder.d_model must be divisible by encoder.n_heads")
        if data.query_len + 1 > self.text_max_len:
            raise ConfigError("encoder.text_max_len must exceed data.query_len")


@dataclass
class SidekickTrainConfig:
    w_sal: float = 1.0
    w_dist: float = 0.75
    temperature: float = 0.07
    optimizer: str = "adam"
    lr: float = 2e-3
    steps: int = 300
    batch_videos: int = 8
    seed: int = 1
    # contrastive pre-training of the expert (stands in for pretrained weights); 0 leaves it random
    expert_steps: int = 0
    expert_clips: int = 16
    expert_lr: float = 5e-4

    def validate(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("sidekick.optimizer must be sgd or adam")
        if self.expert_steps < 0 or self.expert_clips < 1 or self.expert_lr < 0:
            raise ConfigError("sidekick: expert_steps >= 0 and expert_clips >= 1 required")
        if self.temperature <= 0 or self.lr < 0 or self.steps < 0 or self.batch_videos < 1:
            raise ConfigError("sidekick: temperature > 0, lr >= 0, steps >= 0, batch_videos >= 1 required")


@dataclass
class GrounderConfig:
    levels: int = 3
    attn_window: int = 9
    n_heads: int = 2
    mtr_layers: int = 8
    use_qta: bool = True
    use_mtr: bool = True
    use_dense: bool = True
    use_salient: bool = True
    use_saliency: bool = True
    r0: float = 4.0
    diou_weight: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    prior_prob: float = 0.01
    nms_sigma: float = 0.9
    score_floor: float = 1e-3
    top_k: int = 5
    pre_nms: int = 100

    def validate(self):
        if self.levels < 1:
            raise ConfigError("grounder.levels must be >= 1")
        if self.attn_window < 1 or self.attn_window % 2 == 0:
            raise ConfigError("grounder.attn_window must be a positive odd count")
        if self.top_k < 1 or self.mtr_layers < 1:
            raise ConfigError("grounder.top_k and grounder.mtr_layers must be >= 1")


@dataclass
class GrounderTrainConfig:
    optimizer: str = "adam"
    lr: float = 2e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    batch: int = 16
    seed: int = 2

    def validate(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("grounder_train.optimizer must be sgd or adam")
        if self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ConfigError("grounder_train: epochs >= 0, batch >= 1, lr >= 0 required")


@dataclass
class RunConfig:
    profile: str = "demo"
    seed: int = 0
    jobs: int = 1
    dtype: str = "float32"
    ratio: float = 0.5
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sidekick: SidekickTrainConfig = field(default_factory=SidekickTrainConfig)
    grounder: GrounderConfig = field(default_factory=GrounderConfig)
    grounder_train: GrounderTrainConfig = field(default_factory=GrounderTrainConfig)

    def validate(self) -> "RunConfig":
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not (0 < self.ratio <= 1):
            raise ConfigError("ratio must lie in (0, 1]")
        self.data.validate()
        self.encoder.validate(self.data)
        self.sidekick.validate()
        self.grounder.validate()
        self.grounder_train.validate()
        return self

    @property
    def torch_dtype(self):
        import torch
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_lines(self) -> list[str]:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    lines.append(f"{f.name}.{g.name}={_fmt(getattr(value, g.name))}")
            else:
                lines.append(f"{f.name}={_fmt(value)}")
        return lines

    def dumps(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw: str, typ, key: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, float, str):
            return typ(raw.strip())
        if getattr(typ, "__origin__", None) is tuple:
            return tuple(int(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc
    raise ConfigError(f"{key}: unsupported field type {typ}")


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    for key, raw in items.items():
        target, name = cfg, key
        if "." in key:
            section, name = key.split(".", 1)
            if not hasattr(cfg, section) or not dataclasses.is_dataclass(getattr(cfg, section)):
                raise ConfigError(f"unknown config section {section!r} in {key!r}")
            target = getattr(cfg, section)
        hints = get_type_hints(type(target))
        if name not in hints or dataclasses.is_dataclass(getattr(target, name, None)):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(raw, hints[name], key))
    return cfg


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def profile(name: str) -> RunConfig:
    """Built-in profiles: ``test`` (seconds, float64), ``demo``, ``paper-default``."""
    if name == "demo":
        cfg = RunConfig(profile="demo")
        # three spans per video with small objects: the query has to be told
        # apart from distractors, which the pooled sidekick does less reliably
        cfg.data = DataConfig(n_videos=300, t_min=64, t_max=96, span_frac_min=0.04,
                              span_frac_max=0.10, min_span=2, spans_per_video=3, object_size=2)
        cfg.sidekick = SidekickTrainConfig(expert_steps=300)
        cfg.grounder_train = GrounderTrainConfig(epochs=12)
        return cfg
    if name == "test":
        cfg = RunConfig(profile="test", dtype="float64")
        cfg.data = DataConfig(n_videos=8, t_min=8, t_max=16, span_frac_min=0.1,
                              span_frac_max=0.25, n_concepts=4, vocab=8, query_len=2,
                              spans_per_video=2, val_frac=0.25)
        cfg.encoder = EncoderConfig(d_model=8, n_heads=2, sidekick_blocks=2, expert_blocks=4)
        cfg.sidekick = SidekickTrainConfig(optimizer="sgd", lr=0.001, steps=20, batch_videos=4)
        cfg.grounder = GrounderConfig(levels=2, mtr_layers=3)
        cfg.grounder_train = GrounderTrainConfig(optimizer="sgd", lr=0.05, epochs=2, batch=4)
        return cfg
    if name == "paper-default":
        cfg = RunConfig(profile="paper-default")
        cfg.data = DataConfig(t_min=256, t_max=512, n_videos=16)
        cfg.encoder = EncoderConfig(d_model=64, n_heads=4, sidekick_blocks=12, expert_blocks=12,
                                    pool_index=1, pool_factor=4, tau=2)
        cfg.grounder = GrounderConfig(levels=8, mtr_layers=8)
        return cfg
    raise ConfigError(f"unknown profile {name!r} (test, demo, paper-default)")


def load(path: str | Path | None = None, profile_name: str | None = None,
         overrides: dict[str, str] | None = None) -> RunConfig:
    """Profile defaults, then file values, then explicit overrides; validated."""
    items = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        items = parse_lines(path.read_text(encoding="utf-8"), source=str(path))
    name = profile_name or items.pop("profile", None) or "demo"
    items.pop("profile", None)
    cfg = profile(name)
    apply_overrides(cfg, items)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()
