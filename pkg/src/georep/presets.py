"""Named experiment presets and the thresholds their reproduction is scored on.

Each preset is a 2-D sprites world rendered at 32x32 with 10000 training
triples and the default training schedule. The object is larger and the
exploration step longer than the world defaults so that about one transition
in ten involves contact. With fewer contacts, many 128-transition batches
hold almost none and the per-batch split has nothing to find.

The box is long and thin and the steps are short next to its length, so the
segments that touch it spread mostly along its long axis.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .config import EmissionSpec, ExperimentConfig, TrainConfig, WorldConfig
from .geom import Body


@dataclass(frozen=True)
class Preset:
    name: str
    config: ExperimentConfig
    thresholds: dict = field(default_factory=dict)
    description: str = ""


SPRITES_BODY = Body("disc", 0.1)
SPRITES_STEP = 1.0
BOX_BODY = Body("box", half_extents=(0.4, 0.04))
BOX_STEP = 0.3


def _sprites() -> Preset:
    world = WorldConfig(body=SPRITES_BODY, max_step=SPRITES_STEP, emission=EmissionSpec("raster"))
    cfg = ExperimentConfig(world=world, train=TrainConfig(), out="runs/sprites")
    return Preset(
        "sprites",
        cfg,
        {"l_test": 0.01, "translation_residual_p95": 0.05, "otsu_accuracy_epoch10": 0.95, "monotone_window": 20},
        "disc object on a black background",
    )


def _sprites_background() -> Preset:
    world = WorldConfig(
        body=SPRITES_BODY,
        max_step=SPRITES_STEP,
        emission=EmissionSpec("raster", dynamic_background=True),
    )
    cfg = ExperimentConfig(world=world, train=TrainConfig(), out="runs/sprites-background")
    return Preset("sprites-background", cfg, {"l_test": 0.02}, "disc object over a backdrop that moves with the agent")


def _sprites_anisotropic() -> Preset:
    world = WorldConfig(body=BOX_BODY, max_step=BOX_STEP, emission=EmissionSpec("raster_anisotropic"))
    cfg = ExperimentConfig(world=world, train=TrainConfig(mode="stochastic"), out="runs/sprites-anisotropic")
    return Preset("sprites-anisotropic", cfg, {"orientation_error_deg": 15.0}, "elongated box that turns when pushed")


PRESETS = {p.name: p for p in (_sprites(), _sprites_background(), _sprites_anisotropic())}


def get_preset(name: str, seed: int | None = None) -> Preset:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    preset = PRESETS[name]
    if seed is None:
        return preset
    cfg = dataclasses.replace(
        preset.config, seed=seed, train=dataclasses.replace(preset.config.train, seed=seed)
    )
    return dataclasses.replace(preset, config=cfg)
