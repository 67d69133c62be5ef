"""Dense feed-forward networks with a reverse-mode tape, and Adam.

Only what the learner needs: affine layers with relu/tanh between them,
gradients of any output cotangent with respect to all parameters, and a
bias-corrected Adam update. Parameters are a flat list ``[W0, b0, W1, b1,
...]`` with ``W`` of shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import write_bytes_atomic, write_text_atomic

CHECKPOINT_FORMAT = "georep-checkpoint/1"


class ShapeError(ValueError):
    pass


class TapeConsumedError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; ``heads`` name slices of the output."""

    widths: tuple
    activation: str = "relu"
    heads: tuple = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid widths {widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        heads = tuple((str(name), int(size)) for name, size in self.heads)
        if heads and sum(size for _, size in heads) != widths[-1]:
            raise ValueError("head sizes must sum to the output width")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "heads", heads)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def param_shapes(self):
        shapes = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            shapes += [(a, b), (b,)]
        return shapes

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation, "heads": [list(h) for h in self.heads]}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), d.get("activation", "relu"), tuple(tuple(h) for h in d.get("heads", ())))


def init_params(spec: MlpSpec, rng: np.random.Generator, dtype=np.float64):
    """He-style uniform fan-in initialization, zero biases."""
    params = []
    for a, b in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(6.0 / a)
        params.append(rng.uniform(-bound, bound, (a, b)).astype(dtype))
        params.append(np.zeros(b, dtype=dtype))
    return params


@dataclass
class Tape:
    spec: MlpSpec
    params: list
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    consumed: bool = False


def _act(kind, x):
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _act_grad(kind, pre, out):
    if kind == "relu":
        return (pre > 0.0).astype(pre.dtype)
    return 1.0 - out * out


def forward(spec: MlpSpec, params, batch):
    """Returns ``(outputs, tape)``; the tape feeds exactly one :func:`backward`."""
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeError(f"batch shape {x.shape} does not match network input width {spec.in_dim}")
    x = x.astype(params[0].dtype, copy=False)
    tape = Tape(spec, params)
    last = len(params) // 2 - 1
    for i in range(last + 1):
        w, b = params[2 * i], params[2 * i + 1]
        tape.inputs.append(x)
        pre = x @ w + b
        if i < last:
            tape.preacts.append(pre)
            x = _act(spec.activation, pre)
        else:
            x = pre
    return x, tape


def backward(tape: Tape, output_grads):
    """Parameter gradients for the cotangent ``output_grads`` of the outputs."""
    if tape.consumed:
        raise TapeConsumedError("tape already used by a previous backward pass")
    tape.consumed = True
    g = np.asarray(output_grads, dtype=tape.params[0].dtype)
    grads = [None] * len(tape.params)
    last = len(tape.params) // 2 - 1
    for i in range(last, -1, -1):
        x = tape.inputs[i]
        w = tape.params[2 * i]
        if i < last:
            pre = tape.preacts[i]
            g = g * _act_grad(tape.spec.activation, pre, tape.inputs[i + 1])
        grads[2 * i] = x.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ w.T
    tape.inputs.clear()
    tape.preacts.clear()
    return grads


def split_heads(spec: MlpSpec, outputs) -> dict:
    out, start = {}, 0
    for name, size in spec.heads:
        out[name] = outputs[:, start : start + size]
        start += size
    return out


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    skipped: int = 0


def adam_step(state: AdamState, params, grads) -> bool:
    """In-place bias-corrected Adam update.

    Returns False, leaving parameters and moments untouched, when any
    gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} vs gradient shape {g.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, networks: dict, header: dict) -> Path:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian float64).

    ``networks`` maps a name to ``(spec, params)``; arrays are stored in
    name order then layer order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(networks)
    blobs = []
    layout = []
    for name in names:
        spec, params = networks[name]
        layout.append({"name": name, "spec": spec.to_dict(), "count": int(sum(p.size for p in params))})
        blobs += [np.asarray(p, dtype="<f8").ravel() for p in params]
    flat = np.concatenate(blobs) if blobs else np.zeros(0, dtype="<f8")
    meta = dict(header)
    meta.update({"format": CHECKPOINT_FORMAT, "networks": layout, "num_values": int(flat.size)})
    write_bytes_atomic(path.with_suffix(".bin"), flat.tobytes())
    write_text_atomic(path.with_suffix(".json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(networks, header)``."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    if flat.size != meta["num_values"]:
        raise ValueError(f"{path}: expected {meta['num_values']} values, found {flat.size}")
    networks, pos = {}, 0
    for entry in meta["networks"]:
        spec = MlpSpec.from_dict(entry["spec"])
        params = []
        for shape in spec.param_shapes():
            size = int(np.prod(shape))
            params.append(flat[pos : pos + size].reshape(shape).astype(np.float64))
            pos += size
        networks[entry["name"]] = (spec, params)
    return networks, meta
