"""Run configuration: flat key=value text with dotted namespaces.

Example::

    stream.classes=4
    sampler.tau=0.3,0.5,0.7
    train.sampling=score

Unknown keys and malformed values raise ConfigError. Defaults carry the
standard coefficients: momentum 0.99, source weight 0.6, matching weights
2/5/2 and final-loss weights 1/5/2/0.005.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .detector import LossWeights, MatchWeights, ModelConfig
from .errors import ConfigError
from .stream import StreamConfig

SAMPLING_STRATEGIES = ("full", "random", "score", "oracle")
TTA_MODES = ("off", "global", "percam")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class ModelSection:
    d: int = 32
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    queries: int = 20
    ffn_hidden: int = 64
    prototypes: int = 3
    use_memory: bool = True


@dataclass
class SamplerSection:
    tau: tuple = (0.3, 0.5, 0.7)
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 1e-2
    optimizer: str = "sgd"
    sampling: str = "score"
    seed: int = 0
    log_every: int = 50
    head_replay: int = 16  # presence-head replay batch, 0 disables


@dataclass
class TtaSection:
    mode: str = "off"
    beta: float = 0.6
    gate: float = 0.5


@dataclass
class MemorySection:
    alpha: float = 0.99


@dataclass
class RunConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossWeights = field(default_factory=LossWeights)
    match: MatchWeights = field(default_factory=MatchWeights)
    tta: TtaSection = field(default_factory=TtaSection)
    memory: MemorySection = field(default_factory=MemorySection)


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_floats(v: str) -> tuple:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _enum(options):
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"{v!r} not one of {options}")
        return v

    return parse


# key -> (section attr, field name, parser)
KEYS = {
    "stream.classes": ("stream", "num_classes", int),
    "stream.grid": ("stream", "grid_px", int),
    "stream.channels": ("stream", "channels", int),
    "stream.patch": ("stream", "patch", int),
    "stream.frames": ("stream", "frames_per_clip", int),
    "stream.min_objects": ("stream", "min_objects", int),
    "stream.max_objects": ("stream", "max_objects", int),
    "stream.min_size": ("stream", "min_size", int),
    "stream.max_size": ("stream", "max_size", int),
    "stream.motion_step": ("stream", "motion_step", float),
    "stream.occlusion_prob": ("stream", "occlusion_prob", float),
    "stream.blur_prob": ("stream", "blur_prob", float),
    "stream.occlusion_severity": ("stream", "occlusion_severity", float),
    "stream.jitter": ("stream", "appearance_jitter", float),
    "stream.camera_tint": ("stream", "camera_tint", float),
    "stream.position_grid": ("stream", "position_grid", int),
    "stream.cameras": ("stream", "cameras", int),
    "stream.clips_per_camera": ("stream", "clips_per_camera", int),
    "stream.camera_start": ("stream", "camera_start", int),
    "stream.seed": ("stream", "seed", int),
    "model.d": ("model", "d", int),
    "model.heads": ("model", "heads", int),
    "model.enc_layers": ("model", "enc_layers", int),
    "model.dec_layers": ("model", "dec_layers", int),
    "model.queries": ("model", "queries", int),
    "model.ffn_hidden": ("model", "ffn_hidden", int),
    "model.prototypes": ("model", "prototypes", int),
    "model.use_memory": ("model", "use_memory", _parse_bool),
    "sampler.tau": ("sampler", "tau", _parse_floats),
    "sampler.gamma_pos": ("sampler", "gamma_pos", float),
    "sampler.gamma_neg": ("sampler", "gamma_neg", float),
    "sampler.clip": ("sampler", "clip", float),
    "train.steps": ("train", "steps", int),
    "train.lr": ("train", "lr", float),
    "train.optimizer": ("train", "optimizer", _enum(OPTIMIZERS)),
    "train.sampling": ("train", "sampling", _enum(SAMPLING_STRATEGIES)),
    "train.seed": ("train", "seed", int),
    "train.log_every": ("train", "log_every", int),
    "train.head_replay": ("train", "head_replay", int),
    "loss.focal": ("loss", "focal", float),
    "loss.l1": ("loss", "l1", float),
    "loss.giou": ("loss", "giou", float),
    "loss.asl": ("loss", "asl", float),
    "match.focal": ("match", "focal", float),
    "match.l1": ("match", "l1", float),
    "match.giou": ("match", "giou", float),
    "tta.mode": ("tta", "mode", _enum(TTA_MODES)),
    "tta.beta": ("tta", "beta", float),
    "tta.gate": ("tta", "gate", float),
    "memory.alpha": ("memory", "alpha", float),
}


def apply_pairs(cfg: RunConfig, pairs) -> RunConfig:
    for key, raw in pairs:
        spec = KEYS.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key {key!r}")
        section, attr, parse = spec
        try:
            value = parse(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from e
        setattr(getattr(cfg, section), attr, value)
    return cfg


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        pairs.append((key.strip(), raw.strip()))
    apply_pairs(cfg, pairs)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text)


def dump_config(cfg: RunConfig) -> str:
    """Full key=value echo of a config, parseable by ``parse_config_text``."""
    lines = []
    for key, (section, attr, _parse) in KEYS.items():
        value = getattr(getattr(cfg, section), attr)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, tuple):
            rendered = ",".join(format(v, ".17g") for v in value)
        elif isinstance(value, float):
            rendered = format(value, ".17g")
        else:
            rendered = str(value)
        lines.append(f"{key}={rendered}")
    return "\n".join(lines) + "\n"


def validate(cfg: RunConfig) -> RunConfig:
    cfg.stream.validate()
    m = cfg.model
    if m.d % m.heads != 0 or m.d % 4 != 0:
        raise ConfigError(f"model.d {m.d} must be divisible by heads {m.heads} and by 4")
    if not 0.0 <= cfg.memory.alpha <= 1.0:
        raise ConfigError(f"memory.alpha {cfg.memory.alpha} outside [0, 1]")
    if not 0.0 <= cfg.tta.beta <= 1.0:
        raise ConfigError(f"tta.beta {cfg.tta.beta} outside [0, 1]")
    taus = cfg.sampler.tau
    if not taus or any(not 0.0 < t < 1.0 for t in taus) or any(
        b <= a for a, b in zip(taus, taus[1:])
    ):
        raise ConfigError(f"sampler.tau {taus} must be strictly increasing within (0, 1)")
    if cfg.train.steps < 1:
        raise ConfigError("train.steps must be >= 1")
    return cfg


def model_config(cfg: RunConfig) -> ModelConfig:
    """Derive the detector layout from the run config."""
    tokens = cfg.stream.grid_px // cfg.stream.patch
    return ModelConfig(
        num_classes=cfg.stream.num_classes,
        num_prototypes=cfg.model.prototypes,
        d_model=cfg.model.d,
        num_heads=cfg.model.heads,
        enc_layers=cfg.model.enc_layers,
        dec_layers=cfg.model.dec_layers,
        num_queries=cfg.model.queries,
        ffn_hidden=cfg.model.ffn_hidden,
        patch=cfg.stream.patch,
        channels=cfg.stream.channels,
        tokens_h=tokens,
        tokens_w=tokens,
        thresholds=tuple(cfg.sampler.tau),
        use_memory=cfg.model.use_memory,
        asl_gamma_pos=cfg.sampler.gamma_pos,
        asl_gamma_neg=cfg.sampler.gamma_neg,
        asl_clip=cfg.sampler.clip,
    )
