"""Encoders, the per-batch interaction split and the training loop.

Three networks read the same observation: ``int`` predicts the agent's
latent position, ``ext`` the object's latent Gaussian (raw mean/factor
values) and ``cont`` the contrastive code. Each batch is encoded first, its
transitions are split into non-interaction / interaction classes by the
two-means threshold on log code distances, and only then are the loss terms
accumulated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, diff, losses
from .config import TrainConfig, train_from_dict, train_to_dict
from .geom import gaussian_grad_to_raw, raw_size, raw_to_gaussian

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "L_int", "L_ext", "L_cont", "otsu_threshold", "cplus_fraction")
NETS = ("int", "ext", "cont")


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; ``diagnostics`` holds the offending batch state."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class EncoderTriple:
    n: int
    mode: str
    specs: dict
    params: dict

    @classmethod
    def create(cls, obs_dim: int, n: int, cfg: TrainConfig, rng: np.random.Generator) -> "EncoderTriple":
        hidden = tuple(cfg.hidden)
        specs = {
            "int": diff.MlpSpec((obs_dim, *hidden, n), cfg.activation, (("z_int", n),)),
            "ext": diff.MlpSpec(
                (obs_dim, *hidden, raw_size(n)),
                cfg.activation,
                (("mean", n), ("log_diag", n), ("offdiag", raw_size(n) - 2 * n)),
            ),
            "cont": diff.MlpSpec((obs_dim, *hidden, cfg.cont_dim), cfg.activation, (("w", cfg.cont_dim),)),
        }
        params = {name: diff.init_params(specs[name], rng) for name in NETS}
        return cls(n, cfg.mode, specs, params)

    @property
    def obs_dim(self) -> int:
        return self.specs["int"].in_dim

    def flat_params(self):
        return [p for name in NETS for p in self.params[name]]

    def copy(self) -> "EncoderTriple":
        return EncoderTriple(self.n, self.mode, dict(self.specs), {k: [p.copy() for p in v] for k, v in self.params.items()})


@dataclass
class Encodings:
    """Encoder outputs for a set of observations."""

    z_int: np.ndarray
    ext_mean: np.ndarray
    ext_factor: np.ndarray
    w: np.ndarray


def encode(encoders: EncoderTriple, observations, chunk: int = 4096) -> Encodings:
    """Deterministic forward pass of all three networks."""
    obs = np.asarray(observations)
    if obs.ndim == 1:
        obs = obs[None]
    if obs.shape[1] != encoders.obs_dim:
        raise diff.ShapeError(f"observation width {obs.shape[1]} does not match encoder input {encoders.obs_dim}")
    parts = {name: [] for name in NETS}
    for start in range(0, obs.shape[0], chunk):
        x = obs[start : start + chunk].astype(np.float64)
        for name in NETS:
            out, _ = diff.forward(encoders.specs[name], encoders.params[name], x)
            parts[name].append(out)
    z = np.concatenate(parts["int"])
    raw = np.concatenate(parts["ext"])
    mean, fac = raw_to_gaussian(raw, encoders.n)
    return Encodings(z, mean, fac, np.concatenate(parts["cont"]))


@dataclass
class BatchClasses:
    """Two-means split of one batch; ``plus`` marks the interaction class."""

    threshold: float
    plus: np.ndarray
    degenerate: bool = False

    @property
    def minus(self) -> np.ndarray:
        return ~self.plus

    @property
    def plus_fraction(self) -> float:
        return float(np.mean(self.plus)) if self.plus.size else 0.0


def otsu_split(values) -> BatchClasses:
    """Split 1-D ``values`` at the between-class-variance maximizing midpoint.

    Values at or below the threshold go to the non-interaction class. If all
    values are equal, every transition is assigned there and the result is
    flagged degenerate.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("otsu_split needs at least two values")
    threshold, degenerate = _kernels.otsu_threshold(v)
    if degenerate:
        return BatchClasses(float(threshold), np.zeros(v.size, dtype=bool), True)
    return BatchClasses(float(threshold), v > threshold, False)


@dataclass
class LossResult:
    total: float
    terms: dict
    grads: dict = field(default_factory=dict)


def batch_loss(
    outputs: dict,
    actions,
    classes: BatchClasses,
    mode: str = "deterministic",
    kl_mode: str = "forward",
    t_samples=None,
    use_ext: bool = True,
    ext_grad_to_int: bool = True,
    cont_grad_to_int: bool = False,
) -> LossResult:
    """Mean over the batch of ``L_int + L_ext + L_cont`` and its gradients.

    ``outputs`` holds the raw network outputs ``z``, ``z_next``, ``ext``,
    ``ext_next``, ``w``, ``w_next``. Gradients are returned under the same
    keys. ``use_ext=False`` reports ``L_ext`` but leaves it out of the total.
    ``cont_grad_to_int=False`` treats ``z'`` as a constant inside ``L_cont``.
    """
    z, z2 = outputs["z"], outputs["z_next"]
    ext, ext2 = outputs["ext"], outputs["ext_next"]
    w, w2 = outputs["w"], outputs["w_next"]
    a = np.asarray(actions, dtype=np.float64)
    b, n = z.shape
    scale = 1.0 / b

    l_int, (gz, gz2) = losses.loss_int(z, a, z2)
    l_cont, (gw, gw2, gz2_c) = losses.loss_infonce(w, w2, z2)
    if cont_grad_to_int:
        gz2 = gz2 + gz2_c

    mean, fac = raw_to_gaussian(ext, n)
    mean2, fac2 = raw_to_gaussian(ext2, n)
    g_mean = np.zeros_like(mean)
    g_mean2 = np.zeros_like(mean2)
    g_fac = np.zeros_like(fac)
    g_fac2 = np.zeros_like(fac2)
    l_ext = np.zeros(b)
    gz_ext = np.zeros_like(z)
    minus = classes.minus
    plus = classes.plus
    if mode == "deterministic":
        if minus.any():
            l_ext[minus], (gm, gm2) = losses.loss_minus(mean[minus], mean2[minus])
            g_mean[minus], g_mean2[minus] = gm, gm2
        if plus.any():
            l_ext[plus], (gm, gzp) = losses.loss_plus(mean[plus], z[plus], a[plus])
            g_mean[plus] = gm
            gz_ext[plus] = gzp
    elif mode == "stochastic":
        if minus.any():
            l_ext[minus], (gm, gf, gm2, gf2) = losses.loss_minus_kl(
                mean[minus], fac[minus], mean2[minus], fac2[minus], kl_mode
            )
            g_mean[minus], g_fac[minus], g_mean2[minus], g_fac2[minus] = gm, gf, gm2, gf2
        if plus.any():
            if t_samples is None:
                raise ValueError("stochastic mode needs Monte Carlo samples t_samples")
            t = np.asarray(t_samples)[plus]
            l_ext[plus], (gm, gf, gzp) = losses.loss_plus_nll(mean[plus], fac[plus], z[plus], a[plus], t)
            g_mean[plus], g_fac[plus] = gm, gf
            gz_ext[plus] = gzp
    else:
        raise ValueError(f"unknown mode {mode!r}")

    per_item = l_int + l_cont + (l_ext if use_ext else 0.0)
    terms = {"L_int": float(l_int.mean()), "L_ext": float(l_ext.mean()), "L_cont": float(l_cont.mean())}
    grads = {
        "z": gz * scale,
        "z_next": gz2 * scale,
        "w": gw * scale,
        "w_next": gw2 * scale,
        "ext": np.zeros_like(ext),
        "ext_next": np.zeros_like(ext2),
    }
    if use_ext:
        if ext_grad_to_int:
            grads["z"] = grads["z"] + gz_ext * scale
        grads["ext"] = gaussian_grad_to_raw(ext, n, g_mean, g_fac) * scale
        grads["ext_next"] = gaussian_grad_to_raw(ext2, n, g_mean2, g_fac2) * scale
        if mode == "deterministic":
            # covariance outputs are unused in deterministic mode
            grads["ext"][:, n:] = 0.0
            grads["ext_next"][:, n:] = 0.0
    return LossResult(float(per_item.mean()), terms, grads)


def forward_batch(encoders: EncoderTriple, obs, obs_next):
    """Encode ``obs`` and ``obs_next`` together; returns outputs and tapes."""
    x = np.concatenate([obs, obs_next]).astype(np.float64)
    b = obs.shape[0]
    outputs, tapes = {}, {}
    key = {"int": "z", "ext": "ext", "cont": "w"}
    for name in NETS:
        out, tapes[name] = diff.forward(encoders.specs[name], encoders.params[name], x)
        outputs[key[name]] = out[:b]
        outputs[key[name] + "_next"] = out[b:]
    return outputs, tapes


def backward_batch(tapes, grads) -> list:
    key = {"int": "z", "ext": "ext", "cont": "w"}
    flat = []
    for name in NETS:
        g = np.concatenate([grads[key[name]], grads[key[name] + "_next"]])
        flat += diff.backward(tapes[name], g)
    return flat


def total_loss(encoders: EncoderTriple, obs, actions, obs_next, cfg: TrainConfig, rng=None, t_samples=None,
               use_ext: bool = True):
    """Loss and flat parameter gradients on one batch, two passes as in training."""
    outputs, tapes = forward_batch(encoders, obs, obs_next)
    classes = otsu_split(losses.log_distances(outputs["w"], outputs["w_next"]))
    if t_samples is None and encoders.mode == "stochastic":
        rng = rng if rng is not None else np.random.default_rng(0)
        t_samples = rng.uniform(0.0, 1.0, (obs.shape[0], cfg.mc_samples))
    result = batch_loss(outputs, actions, classes, encoders.mode, cfg.kl_mode, t_samples, use_ext,
                        cfg.ext_grad_to_int, cfg.cont_grad_to_int)
    return result, classes, backward_batch(tapes, result.grads)


def train(dataset, cfg: TrainConfig, callback=None, encoders: EncoderTriple | None = None):
    """Train the three encoders on ``dataset`` (observations and actions only).

    ``callback(epoch, encoders, row)`` runs after every epoch; returning
    ``False`` stops training early. Returns ``(encoders, metrics)`` where
    metrics is a list of dicts keyed by :data:`METRIC_COLUMNS`.
    """
    obs, actions, obs_next = dataset.obs, dataset.actions, dataset.next_obs
    count = obs.shape[0]
    if count < 2:
        raise ValueError("training needs at least two transitions")
    rng = np.random.default_rng(cfg.seed)
    if encoders is None:
        encoders = EncoderTriple.create(obs.shape[1], actions.shape[1], cfg, rng)
    params = encoders.flat_params()
    opt = diff.AdamState(lr=cfg.lr)
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        use_ext = epoch > cfg.warmup_epochs
        order = rng.permutation(count)
        sums = {"L_int": 0.0, "L_ext": 0.0, "L_cont": 0.0}
        thresholds, plus_count, seen, batches = [], 0, 0, 0
        for start in range(0, count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            t = rng.uniform(0.0, 1.0, (idx.size, cfg.mc_samples)) if encoders.mode == "stochastic" else None
            result, classes, grads = total_loss(
                encoders, obs[idx], actions[idx], obs_next[idx], cfg, t_samples=t, use_ext=use_ext
            )
            if not np.isfinite(result.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}",
                    {"epoch": epoch, "batch_start": start, "terms": result.terms,
                     "threshold": classes.threshold, "adam_step": opt.step},
                )
            if not diff.adam_step(opt, params, grads):
                log.warning("skipped update with non-finite gradient at epoch %d", epoch)
            for k in sums:
                sums[k] += result.terms[k] * idx.size
            thresholds.append(classes.threshold)
            plus_count += int(classes.plus.sum())
            seen += idx.size
            batches += 1
        row = {
            "epoch": epoch,
            "L_int": sums["L_int"] / seen,
            "L_ext": sums["L_ext"] / seen,
            "L_cont": sums["L_cont"] / seen,
            "otsu_threshold": float(np.mean(thresholds)),
            "cplus_fraction": plus_count / seen,
        }
        metrics.append(row)
        log.info("epoch %d %s", epoch, row)
        if callback is not None and callback(epoch, encoders, row) is False:
            break
    encoders.adam_step = opt.step
    return encoders, metrics


def save_encoders(path, encoders: EncoderTriple, cfg: TrainConfig, extra: dict | None = None):
    header = {
        "n": encoders.n,
        "mode": encoders.mode,
        "train": train_to_dict(cfg),
        "adam_step": getattr(encoders, "adam_step", 0),
        "rng": {"kind": "numpy.PCG64", "seed": cfg.seed},
    }
    if extra:
        header.update(extra)
    nets = {name: (encoders.specs[name], encoders.params[name]) for name in NETS}
    return diff.save_checkpoint(path, nets, header)


def load_encoders(path):
    nets, header = diff.load_checkpoint(path)
    enc = EncoderTriple(
        header["n"], header["mode"], {k: nets[k][0] for k in NETS}, {k: nets[k][1] for k in NETS}
    )
    cfg = train_from_dict(header["train"]) if "train" in header else None
    return enc, cfg, header
