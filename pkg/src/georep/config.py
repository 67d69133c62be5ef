"""Configuration records shared by the world, the learner and the CLI.

Experiment files are INI-style (``[world]``, ``[emission]``, ``[train]``,
``[eval]``); every record round-trips through plain dicts so it can be echoed
into manifests and checkpoint headers.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .geom import Body

EMISSION_KINDS = ("identity", "scrambled", "raster", "raster_anisotropic")
DYNAMICS = ("uniform_teleport", "push_roll")
KL_MODES = ("forward", "reverse", "symmetric")
MODES = ("deterministic", "stochastic")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class EmissionSpec:
    kind: str = "identity"
    seed: int = 0
    out_dim: int = 16
    hidden: tuple = (8,)
    resolution: int = 32
    channels: int = 3
    dynamic_background: bool = False
    background_seed: int = 0
    agent_radius: float = 0.05
    edge_softness: float = 1.5

    def __post_init__(self):
        if self.kind not in EMISSION_KINDS:
            raise ConfigError(f"emission.kind: unknown {self.kind!r}, expected one of {EMISSION_KINDS}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.resolution < 4:
            raise ConfigError("emission.resolution must be at least 4")
        if self.channels not in (1, 3):
            raise ConfigError("emission.channels must be 1 or 3")


@dataclass(frozen=True)
class WorldConfig:
    n: int = 2
    body: Body = field(default_factory=lambda: Body("disc", 0.06))
    dynamics: str = "uniform_teleport"
    emission: EmissionSpec = field(default_factory=EmissionSpec)
    contact_eps: float | None = None
    max_step: float = 0.25
    friction: float = 1.0

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ConfigError(f"world.n: must be 2 or 3, got {self.n}")
        if self.dynamics not in DYNAMICS:
            raise ConfigError(f"world.dynamics: unknown {self.dynamics!r}, expected one of {DYNAMICS}")
        if not 0 < self.max_step <= 1:
            raise ConfigError("world.max_step must lie in (0, 1]")
        if self.body.kind == "box" and len(self.body.half_extents) != self.n:
            raise ConfigError(f"world.half_extents: need {self.n} values for a box")
        if self.emission.kind.startswith("raster") and self.n != 2:
            raise ConfigError("emission.kind: raster emissions need n = 2")
        if self.emission.kind == "raster_anisotropic" and self.body.kind != "box":
            raise ConfigError("emission.kind: raster_anisotropic needs a box body")
        if self.eps < 0:
            raise ConfigError("world.contact_eps must be >= 0")

    @property
    def eps(self) -> float:
        if self.contact_eps is not None:
            return float(self.contact_eps)
        return 0.02 if self.body.kind == "point" else 0.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.001
    mc_samples: int = 4
    kl_mode: str = "forward"
    warmup_epochs: int = 2
    seed: int = 0
    mode: str = "deterministic"
    cont_dim: int = 16
    # one narrow tanh layer: wider encoders memorise the contact pairs of a
    # 10000-transition raster set and the per-batch split degrades late in training
    hidden: tuple = (16,)
    activation: str = "tanh"
    # let the extrinsic loss move z_int; in stochastic mode the likelihood
    # gradient otherwise drags z_int off the isometry
    ext_grad_to_int: bool = False
    # let the contrastive term move z_int; off keeps L_int from being traded away
    cont_grad_to_int: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size", "mc_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 (InfoNCE needs negatives)")
        if self.kl_mode not in KL_MODES:
            raise ConfigError(f"train.kl_mode: unknown {self.kl_mode!r}, expected one of {KL_MODES}")
        if self.mode not in MODES:
            raise ConfigError(f"train.mode: unknown {self.mode!r}, expected one of {MODES}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("train.activation must be relu or tanh")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class EvalConfig:
    test_size: int = 1000
    test_seed: int = 12345
    tol_eq: float = 1e-3
    tol_cond3: float = 1e-2
    tol_inj: float = 1e-4


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    num_records: int = 10000
    seed: int = 0
    out: str = "runs/default"


# --- dict round trips ------------------------------------------------------


def world_to_dict(cfg: WorldConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["body"] = {"kind": cfg.body.kind, "radius": cfg.body.radius, "half_extents": list(cfg.body.half_extents)}
    d["emission"]["hidden"] = list(cfg.emission.hidden)
    return d


def world_from_dict(d: dict) -> WorldConfig:
    d = dict(d)
    body = d.pop("body", {})
    emission = dict(d.pop("emission", {}))
    if "hidden" in emission:
        emission["hidden"] = tuple(emission["hidden"])
    return WorldConfig(
        body=Body(body.get("kind", "disc"), body.get("radius", 0.06), tuple(body.get("half_extents", ()))),
        emission=EmissionSpec(**emission),
        **d,
    )


def train_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d


def train_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return TrainConfig(**d)


# --- INI files ---------------------------------------------------------------

_BODY_KEYS = {"body": "kind", "radius": "radius", "half_extents": "half_extents"}


def _parse_value(raw: str, template, key: str):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float) or template is None:
            return None if raw.lower() in ("none", "") else float(raw)
        if isinstance(template, tuple):
            return tuple(float(x) if "." in x or "e" in x.lower() else int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _apply(cls, base, section: dict, prefix: str, skip=()):
    values = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in fields:
            raise ConfigError(f"{prefix}.{key}: unknown field")
        values[key] = _parse_value(raw, getattr(base, key), f"{prefix}.{key}")
    try:
        return dataclasses.replace(base, **values)
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def load_experiment(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI experiment file on top of ``base`` (defaults if omitted)."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config: cannot read {path}")
    return parse_experiment(parser, base)


def parse_experiment_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    return parse_experiment(parser, base)


def parse_experiment(parser: configparser.ConfigParser, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    known = {"experiment", "world", "emission", "train", "eval"}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"[{name}]: unknown section")
    emission = base.world.emission
    if parser.has_section("emission"):
        emission = _apply(EmissionSpec, emission, dict(parser["emission"]), "emission")
    world = base.world
    body = world.body
    if parser.has_section("world"):
        sec = dict(parser["world"])
        body_vals = {}
        for key, attr in _BODY_KEYS.items():
            if key in sec:
                raw = sec.pop(key)
                body_vals[attr] = (
                    raw.strip()
                    if attr == "kind"
                    else _parse_value(raw, getattr(body, attr), f"world.{key}")
                )
        if body_vals:
            try:
                body = dataclasses.replace(body, **body_vals)
            except ValueError as exc:
                raise ConfigError(f"world.body: {exc}") from None
        world = _apply(WorldConfig, world, sec, "world")
    try:
        world = dataclasses.replace(world, body=body, emission=emission)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train = base.train
    if parser.has_section("train"):
        train = _apply(TrainConfig, train, dict(parser["train"]), "train")
    evalc = base.eval
    if parser.has_section("eval"):
        evalc = _apply(EvalConfig, evalc, dict(parser["eval"]), "eval")
    exp = dataclasses.replace(base, world=world, train=train, eval=evalc)
    if parser.has_section("experiment"):
        exp = _apply(ExperimentConfig, exp, dict(parser["experiment"]), "experiment")
    return exp


def dump_experiment(cfg: ExperimentConfig) -> str:
    """Serialize to the INI layout accepted by :func:`load_experiment`."""

    def fmt(v):
        if isinstance(v, (tuple, list)):
            return " ".join(str(x) for x in v)
        return str(v)

    lines = ["[experiment]"]
    lines += [f"num_records = {cfg.num_records}", f"seed = {cfg.seed}", f"out = {cfg.out}", "", "[world]"]
    w = cfg.world
    lines += [f"n = {w.n}", f"body = {w.body.kind}", f"radius = {w.body.radius}"]
    if w.body.half_extents:
        lines.append(f"half_extents = {fmt(w.body.half_extents)}")
    lines += [
        f"dynamics = {w.dynamics}",
        f"contact_eps = {w.contact_eps}",
        f"max_step = {w.max_step}",
        f"friction = {w.friction}",
        "",
        "[emission]",
    ]
    for f in dataclasses.fields(EmissionSpec):
        lines.append(f"{f.name} = {fmt(getattr(w.emission, f.name))}")
    lines += ["", "[train]"]
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name} = {fmt(getattr(cfg.train, f.name))}")
    lines += ["", "[eval]"]
    for f in dataclasses.fields(EvalConfig):
        lines.append(f"{f.name} = {fmt(getattr(cfg.eval, f.name))}")
    return "\n".join(lines) + "\n"


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
