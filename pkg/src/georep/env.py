"""Agent/object world: contact-gated object dynamics, emissions and datasets.

The agent moves by its action exactly; the object stays put bitwise unless
the agent's open path segment touches its body, in which case a transition
rule (teleport or push) moves it. Observations come from an injective
emission of the state. Datasets are persisted as a JSON manifest, a flat
little-endian float32 record file (``o | a | o'`` per row) and a separate
ground-truth CSV that training code never opens.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels, geom
from .config import EmissionSpec, WorldConfig, world_from_dict, world_to_dict, write_bytes_atomic, write_text_atomic

DATASET_FORMAT = "georep-dataset/1"
MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.f32"
TRUTH_NAME = "truth.csv"


class InvalidActionError(ValueError):
    """The action would move the agent outside the open unit cube."""


class MissingTruthError(RuntimeError):
    """An evaluation-only operation was called on a dataset without its sidecar."""


@dataclass(frozen=True)
class WorldState:
    s_int: np.ndarray
    s_ext: np.ndarray
    rotation: np.ndarray | None = None

    def angle(self) -> float | None:
        """Box orientation in [0, pi) for 2-D worlds."""
        if self.rotation is None or self.rotation.shape != (2, 2):
            return None
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0]) % math.pi


def in_agent_space(p) -> bool:
    p = np.asarray(p)
    return bool(np.all((p > 0.0) & (p < 1.0)))


def object_margin(cfg: WorldConfig) -> float:
    return max(cfg.body.extent(), 1e-6)


def _touches_point(cfg: WorldConfig, center, rotation, p) -> bool:
    """Whether the agent standing at ``p`` lies on the (eps-grown) body."""
    body, eps = cfg.body, cfg.eps
    d = np.asarray(p) - center
    if body.kind == "box":
        local = (rotation if rotation is not None else np.eye(cfg.n)).T @ d
        return bool(np.all(np.abs(local) <= np.asarray(body.half_extents) + eps))
    r = eps + (body.radius if body.kind == "disc" else 0.0)
    return float(d @ d) <= r * r


def _sample_orientation(cfg: WorldConfig, rng: np.random.Generator):
    if cfg.body.kind != "box":
        return None
    if cfg.n == 2:
        return geom.rotation_2d(rng.uniform(0.0, math.pi))
    return geom.random_rotation(cfg.n, rng)


def place_object(cfg: WorldConfig, agent, rng: np.random.Generator):
    """Uniform object placement in the admissible region, clear of ``agent``."""
    m = object_margin(cfg)
    while True:
        c = rng.uniform(m, 1.0 - m, cfg.n)
        rot = _sample_orientation(cfg, rng)
        if not _touches_point(cfg, c, rot, agent):
            return c, rot


def initial_state(cfg: WorldConfig, rng: np.random.Generator) -> WorldState:
    s_int = rng.uniform(0.0, 1.0, cfg.n)
    while not in_agent_space(s_int):
        s_int = rng.uniform(0.0, 1.0, cfg.n)
    c, rot = place_object(cfg, s_int, rng)
    return WorldState(s_int, c, rot)


def is_contact(cfg: WorldConfig, state: WorldState, a) -> bool:
    seg = geom.OpenSegment(state.s_int, a)
    return geom.contact(cfg.body, state.s_ext, seg, cfg.eps, state.rotation)


def step(cfg: WorldConfig, state: WorldState, a, rng: np.random.Generator):
    """Apply action ``a``; returns ``(next_state, interacted)``."""
    a = np.asarray(a, dtype=np.float64)
    s_next = state.s_int + a
    if not in_agent_space(s_next):
        raise InvalidActionError(f"action {a} moves the agent from {state.s_int} out of the unit cube")
    if not is_contact(cfg, state, a):
        return WorldState(s_next, state.s_ext, state.rotation), False
    if cfg.dynamics == "uniform_teleport":
        c, rot = place_object(cfg, s_next, rng)
        return WorldState(s_next, c, rot), True
    return WorldState(s_next, *_push(cfg, state, a)), True


def _push(cfg: WorldConfig, state: WorldState, a):
    seg = geom.OpenSegment(state.s_int, a)
    t_hit = geom.first_contact_param(cfg.body, state.s_ext, seg, cfg.eps, state.rotation)
    t_hit = 0.0 if t_hit is None else t_hit
    hit_point = seg.point(t_hit)
    remaining = (1.0 - t_hit) * a
    lever = hit_point - state.s_ext
    if cfg.body.kind == "point" or not np.any(lever):
        normal = a / np.linalg.norm(a)
    else:
        normal = -lever / np.linalg.norm(lever)
    shift = cfg.friction * max(float(remaining @ normal), 0.0) * normal
    m = object_margin(cfg)
    c = np.clip(state.s_ext + shift, m, 1.0 - m)
    rot = state.rotation
    if rot is not None:
        denom = float(lever @ lever) + 1e-9
        if cfg.n == 2:
            torque = lever[0] * remaining[1] - lever[1] * remaining[0]
            dtheta = float(np.clip(cfg.friction * torque / denom, -math.pi / 2, math.pi / 2))
            theta = (math.atan2(rot[1, 0], rot[0, 0]) + dtheta) % math.pi
            rot = geom.rotation_2d(theta)
        else:
            axis = np.cross(lever, remaining)
            norm = np.linalg.norm(axis)
            if norm > 0:
                rot = _rodrigues(axis / norm, min(cfg.friction * norm / denom, math.pi / 2)) @ rot
    return c, rot


def _rodrigues(axis, angle):
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def sample_action(state: WorldState, rng: np.random.Generator, max_step: float):
    """Uniform action in ``[-max_step, max_step]^n``, resampled until it keeps the agent inside."""
    if not 0 < max_step <= 1:
        raise ValueError("max_step must lie in (0, 1]")
    n = state.s_int.shape[0]
    while True:
        a = rng.uniform(-max_step, max_step, n)
        if in_agent_space(state.s_int + a):
            return a


# --- emissions -----------------------------------------------------------------


def state_vector(state: WorldState) -> np.ndarray:
    parts = [state.s_int, state.s_ext]
    if state.rotation is not None:
        parts.append(state.rotation.ravel())
    return np.concatenate(parts)


def _monotone(x):
    # strictly increasing: derivative 1 + 2.4 sech^2(3x) > 0
    return x + 0.8 * np.tanh(3.0 * x)


@functools.lru_cache(maxsize=32)
def _scramble_layers(spec: EmissionSpec, in_dim: int):
    if spec.out_dim < in_dim:
        raise ValueError(f"scrambled out_dim {spec.out_dim} is below the state dimension {in_dim}")
    rng = np.random.default_rng(spec.seed)
    widths = [in_dim] + [max(int(h), in_dim) for h in spec.hidden]
    layers = []
    for i in range(len(widths) - 1):
        lo, hi = widths[i], max(widths[i + 1], widths[i])
        # orthonormal columns: injective linear lift
        q = geom.random_rotation(hi, rng)[:, :lo]
        layers.append((q, rng.uniform(-0.5, 0.5, hi)))
    q = geom.random_rotation(spec.out_dim, rng)[:, : widths[-1]]
    return tuple(layers), q


def emit_scrambled(spec: EmissionSpec, states: np.ndarray) -> np.ndarray:
    """Random rotations and strictly monotone coordinate maps, then a linear lift."""
    layers, lift = _scramble_layers(spec, states.shape[1])
    x = 2.0 * states - 1.0
    for q, b in layers:
        x = _monotone(x @ q.T + b)
    return x @ lift.T


@functools.lru_cache(maxsize=8)
def _background_squares(seed: int, count: int = 80):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1.0, 2.0, (count, 2))
    sizes = rng.uniform(0.03, 0.08, count)
    levels = rng.uniform(0.35, 1.0, count)
    return centers, sizes, levels


def render(cfg: WorldConfig, state: WorldState) -> np.ndarray:
    """Channel-last raster image of the state, values in [0, 1]."""
    spec = cfg.emission
    res = spec.resolution
    soft = spec.edge_softness
    agent = np.zeros((res, res))
    obj = np.zeros((res, res))
    ax, ay = state.s_int * res
    _kernels.splat_disc(agent, ax, ay, spec.agent_radius * res, 1.0, soft)
    ox, oy = state.s_ext * res
    body = cfg.body
    if body.kind == "box":
        rot = state.rotation
        _kernels.splat_box(obj, ox, oy, body.half_extents[0] * res, body.half_extents[1] * res,
                           rot[0, 0], rot[1, 0], 1.0, soft)
    else:
        r = body.radius if body.kind == "disc" else 0.03
        _kernels.splat_disc(obj, ox, oy, r * res, 1.0, soft)
    bg = np.zeros((res, res))
    if spec.dynamic_background:
        centers, sizes, levels = _background_squares(spec.background_seed)
        # the view window slides with the agent over a 3x3-larger backdrop
        shifted = (centers - (state.s_int - 0.5)) * res
        reach = (sizes * res * 1.5 + soft + 1.0)
        visible = np.all((shifted > -reach[:, None]) & (shifted < res + reach[:, None]), axis=1)
        for (cx, cy), s, lvl in zip(shifted[visible], sizes[visible], levels[visible]):
            _kernels.splat_box(bg, cx, cy, s * res, s * res, 1.0, 0.0, lvl, soft)
    if spec.channels == 3:
        img = np.stack([agent, obj, bg], axis=-1)
    else:
        img = np.maximum(np.maximum(agent, 0.6 * obj), 0.3 * bg)[..., None]
    return img


def emit(cfg: WorldConfig, state: WorldState) -> np.ndarray:
    """Observation vector of ``state`` under the configured emission."""
    return emit_many(cfg, [state])[0]


def emit_many(cfg: WorldConfig, states) -> np.ndarray:
    spec = cfg.emission
    if spec.kind in ("identity", "scrambled"):
        vecs = np.stack([state_vector(s) for s in states])
        if spec.kind == "identity":
            return vecs
        return emit_scrambled(spec, vecs)
    return np.stack([render(cfg, s).ravel() for s in states])


def obs_dim(cfg: WorldConfig) -> int:
    spec = cfg.emission
    if spec.kind == "identity":
        return 2 * cfg.n + (cfg.n * cfg.n if cfg.body.kind == "box" else 0)
    if spec.kind == "scrambled":
        return spec.out_dim
    return spec.resolution * spec.resolution * spec.channels


# --- datasets ----------------------------------------------------------------


@dataclass
class Truth:
    """Ground-truth sidecar, one row per record; evaluation only."""

    s_int: np.ndarray
    s_ext: np.ndarray
    s_int_next: np.ndarray
    s_ext_next: np.ndarray
    interacted: np.ndarray
    actions: np.ndarray
    rotation: np.ndarray | None = None
    rotation_next: np.ndarray | None = None

    def __len__(self):
        return self.s_int.shape[0]

    def subset(self, idx) -> "Truth":
        rot = None if self.rotation is None else self.rotation[idx]
        rot2 = None if self.rotation_next is None else self.rotation_next[idx]
        return Truth(self.s_int[idx], self.s_ext[idx], self.s_int_next[idx], self.s_ext_next[idx],
                     self.interacted[idx], self.actions[idx], rot, rot2)


@dataclass
class TransitionDataset:
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    config: WorldConfig
    seed: int | None = None
    truth: Truth | None = None

    def __len__(self):
        return self.obs.shape[0]

    @property
    def n(self) -> int:
        return self.actions.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def interaction_fraction(self) -> float | None:
        if self.truth is None:
            return None
        return float(np.mean(self.truth.interacted))

    def without_truth(self) -> "TransitionDataset":
        return TransitionDataset(self.obs, self.actions, self.next_obs, self.config, self.seed, None)

    def subset(self, idx) -> "TransitionDataset":
        truth = None if self.truth is None else self.truth.subset(idx)
        return TransitionDataset(self.obs[idx], self.actions[idx], self.next_obs[idx], self.config, self.seed, truth)


def rollout(cfg: WorldConfig, steps: int, rng: np.random.Generator):
    """Persistent random walk; returns the visited states, actions and contact flags."""
    state = initial_state(cfg, rng)
    states = [state]
    actions = np.empty((steps, cfg.n))
    hits = np.zeros(steps, dtype=bool)
    for i in range(steps):
        a = sample_action(state, rng, cfg.max_step)
        state, hits[i] = step(cfg, state, a, rng)
        actions[i] = a
        states.append(state)
    return states, actions, hits


def generate_dataset(cfg: WorldConfig, num_records: int, seed: int, rollouts: int = 1) -> TransitionDataset:
    """``num_records`` triples from ``rollouts`` independent seeded random walks.

    Rollouts are concatenated in seed-spawn order, so the result depends only
    on ``(cfg, num_records, seed, rollouts)``.
    """
    if num_records < 1:
        raise ValueError("num_records must be >= 1")
    rollouts = max(1, min(rollouts, num_records))
    sizes = [num_records // rollouts + (i < num_records % rollouts) for i in range(rollouts)]
    children = np.random.SeedSequence(seed).spawn(rollouts)
    obs, nxt, acts, hits = [], [], [], []
    s_int, s_ext, rot = [], [], []
    for size, child in zip(sizes, children):
        states, actions, flags = rollout(cfg, size, np.random.default_rng(child))
        images = emit_many(cfg, states).astype(np.float32)
        obs.append(images[:-1])
        nxt.append(images[1:])
        acts.append(actions)
        hits.append(flags)
        s_int.append(np.stack([s.s_int for s in states]))
        s_ext.append(np.stack([s.s_ext for s in states]))
        if cfg.body.kind == "box":
            rot.append(np.stack([s.rotation for s in states]))
    pos_int = [x[:-1] for x in s_int]
    pos_int2 = [x[1:] for x in s_int]
    pos_ext = [x[:-1] for x in s_ext]
    pos_ext2 = [x[1:] for x in s_ext]
    truth = Truth(
        np.concatenate(pos_int),
        np.concatenate(pos_ext),
        np.concatenate(pos_int2),
        np.concatenate(pos_ext2),
        np.concatenate(hits),
        np.concatenate(acts),
        np.concatenate([r[:-1] for r in rot]) if rot else None,
        np.concatenate([r[1:] for r in rot]) if rot else None,
    )
    return TransitionDataset(np.concatenate(obs), np.concatenate(acts), np.concatenate(nxt), cfg, seed, truth)


def ground_truth_labels(dataset: TransitionDataset) -> np.ndarray:
    """Per-record contact flags from the sidecar."""
    if dataset.truth is None:
        raise MissingTruthError("dataset has no ground-truth sidecar")
    return dataset.truth.interacted.copy()


def recompute_contacts(dataset: TransitionDataset) -> np.ndarray:
    """Contact flags recomputed from stored states and actions."""
    truth = dataset.truth
    if truth is None:
        raise MissingTruthError("dataset has no ground-truth sidecar")
    cfg = dataset.config
    return geom.batch_contact(cfg.body, truth.s_ext, truth.s_int, truth.actions, cfg.eps, truth.rotation)


# --- persistence -------------------------------------------------------------


def _truth_header(n: int, box: bool):
    cols = [f"s_int_{i}" for i in range(n)] + [f"s_ext_{i}" for i in range(n)]
    if box:
        cols += [f"rot_{i}{j}" for i in range(n) for j in range(n)]
    cols += [f"s_int_next_{i}" for i in range(n)] + [f"s_ext_next_{i}" for i in range(n)]
    if box:
        cols += [f"rot_next_{i}{j}" for i in range(n) for j in range(n)]
    return cols + [f"a_{i}" for i in range(n)] + ["interacted"]


def save_dataset(dataset: TransitionDataset, directory) -> Path:
    """Write manifest, record file and truth sidecar into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = np.concatenate([dataset.obs, dataset.actions, dataset.next_obs], axis=1).astype("<f4")
    write_bytes_atomic(directory / RECORDS_NAME, rows.tobytes())
    manifest = {
        "format": DATASET_FORMAT,
        "num_records": len(dataset),
        "n": dataset.n,
        "obs_dim": dataset.obs_dim,
        "seed": dataset.seed,
        "interaction_fraction": dataset.interaction_fraction,
        "records": RECORDS_NAME,
        "record_layout": "o[obs_dim] | a[n] | o_next[obs_dim], little-endian float32",
        "truth": TRUTH_NAME if dataset.truth is not None else None,
        "world": world_to_dict(dataset.config),
    }
    if dataset.truth is not None:
        _write_truth(dataset.truth, directory / TRUTH_NAME)
    write_text_atomic(directory / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def _write_truth(truth: Truth, path: Path) -> None:
    n = truth.s_int.shape[1]
    box = truth.rotation is not None
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_truth_header(n, box))
        for i in range(len(truth)):
            row = list(truth.s_int[i]) + list(truth.s_ext[i])
            if box:
                row += list(truth.rotation[i].ravel())
            row += list(truth.s_int_next[i]) + list(truth.s_ext_next[i])
            if box:
                row += list(truth.rotation_next[i].ravel())
            row += list(truth.actions[i])
            writer.writerow([repr(float(x)) for x in row] + [int(truth.interacted[i])])
    tmp.replace(path)


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    return manifest


def load_records(directory):
    """Observations and actions only; never touches the truth sidecar."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    d, n, count = manifest["obs_dim"], manifest["n"], manifest["num_records"]
    flat = np.fromfile(directory / manifest["records"], dtype="<f4")
    width = 2 * d + n
    if flat.size != count * width:
        raise ValueError(f"{directory}: record file holds {flat.size} floats, expected {count * width}")
    rows = flat.reshape(count, width)
    cfg = world_from_dict(manifest["world"])
    obs = np.ascontiguousarray(rows[:, :d])
    actions = rows[:, d : d + n].astype(np.float64)
    nxt = np.ascontiguousarray(rows[:, d + n :])
    return TransitionDataset(obs, actions, nxt, cfg, manifest.get("seed"), None)


def load_truth(directory, n: int, box: bool) -> Truth:
    path = Path(directory) / TRUTH_NAME
    if not path.exists():
        raise MissingTruthError(f"{path} not found")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    cols = _truth_header(n, box)
    if data.shape[1] != len(cols):
        raise ValueError(f"{path}: expected {len(cols)} columns, found {data.shape[1]}")
    i = 0

    def take(k):
        nonlocal i
        out = data[:, i : i + k]
        i += k
        return out

    s_int, s_ext = take(n), take(n)
    rot = take(n * n).reshape(-1, n, n) if box else None
    s_int2, s_ext2 = take(n), take(n)
    rot2 = take(n * n).reshape(-1, n, n) if box else None
    actions = take(n)
    interacted = take(1)[:, 0].astype(bool)
    return Truth(s_int, s_ext, s_int2, s_ext2, interacted, actions, rot, rot2)


def load_dataset(directory, with_truth: bool = True) -> TransitionDataset:
    """Load a saved dataset; the sidecar is attached when requested and present."""
    ds = load_records(directory)
    if with_truth and (Path(directory) / TRUTH_NAME).exists():
        ds.truth = load_truth(directory, ds.n, ds.config.body.kind == "box")
    return ds
