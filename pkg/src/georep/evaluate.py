"""Evaluation of trained encoders against ground truth.

The relative-position error ``l_test``, the best common translation between
latent and true positions, accuracy of the two-means interaction split, the
orientation recovered from the object covariance, and per-transition checks
of the three sufficient conditions for a translation-exact representation.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import diff, env, losses
from .config import EvalConfig
from .geom import LatentGaussian, batch_point_segment_sqdist, principal_axes, raw_size
from .learner import BatchClasses, EncoderTriple, Encodings, encode, otsu_split

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "epoch",
    "l_test",
    "translation_h",
    "translation_residual_p95",
    "otsu_accuracy",
    "orientation_error_deg",
    "violations_equivariance",
    "violations_injectivity",
    "violations_contact",
)
CONDITIONS = ("equivariance", "injectivity", "contact")
ISOTROPY_RATIO = 1.05


def _require_truth(dataset):
    if dataset.truth is None:
        raise env.MissingTruthError("this metric needs the ground-truth sidecar")
    return dataset.truth


def relative_error(z_int, z_ext, s_int, s_ext) -> float:
    """Mean squared difference between latent and true agent-to-object offsets."""
    r = (np.asarray(z_int) - np.asarray(z_ext)) - (np.asarray(s_int) - np.asarray(s_ext))
    return float(np.mean(np.sum(r * r, axis=1)))


def l_test(encoders: EncoderTriple, dataset) -> float:
    """Relative-position error on ``dataset``; the object latent is its mean."""
    truth = _require_truth(dataset)
    e = encode(encoders, dataset.obs)
    return relative_error(e.z_int, e.ext_mean, truth.s_int, truth.s_ext)


def fit_translation(z_int, z_ext, s_int, s_ext):
    """Common offset ``h`` of both heads and per-sample max-norm residuals."""
    dz = np.concatenate([np.asarray(z_int) - s_int, np.asarray(z_ext) - s_ext])
    if dz.shape[0] == 0:
        raise ValueError("fit_translation needs at least one pair")
    h = dz.mean(axis=0)
    r_int = np.abs(np.asarray(z_int) - s_int - h).max(axis=1)
    r_ext = np.abs(np.asarray(z_ext) - s_ext - h).max(axis=1)
    return h, np.maximum(r_int, r_ext)


def classify_dataset(encodings: Encodings, encodings_next: Encodings) -> BatchClasses:
    """Two-means split over all transitions at once."""
    return otsu_split(losses.log_distances(encodings.w, encodings_next.w))


def otsu_accuracy(classes: BatchClasses, labels) -> float:
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != classes.plus.shape:
        raise ValueError("one label per classified transition is needed")
    return float(np.mean(classes.plus == labels))


def axis_angle_deg(u, v) -> np.ndarray:
    """Angle between lines spanned by rows of ``u`` and ``v``, in [0, 90]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    c = np.clip(np.abs(np.sum(u * v, axis=-1)), 0.0, 1.0)
    return np.degrees(np.arccos(c))


def true_long_axes(rotations, half_extents) -> np.ndarray:
    k = int(np.argmax(half_extents))
    return np.asarray(rotations)[:, :, k]


def covariance_long_axes(means, factors, ratio: float = ISOTROPY_RATIO):
    """Leading covariance axis per sample and a mask of usable samples."""
    axes = np.zeros_like(means)
    usable = np.zeros(means.shape[0], dtype=bool)
    for i in range(means.shape[0]):
        pa = principal_axes(LatentGaussian(means[i], factors[i]), iso_ratio=ratio)
        axes[i] = pa.rotation[:, 0]
        usable[i] = not pa.isotropic
    return axes, usable


def orientation_error(encoders: EncoderTriple, dataset, ratio: float = ISOTROPY_RATIO):
    """Mean angle (mod pi) between the covariance's long axis and the box's.

    Returns ``(mean_degrees, used_count)``; near-isotropic covariances are
    skipped, and ``mean_degrees`` is NaN if every sample was skipped.
    """
    if encoders.mode != "stochastic":
        raise ValueError("orientation needs stochastic encoders with a covariance output")
    truth = _require_truth(dataset)
    body = dataset.config.body
    if body.kind != "box" or truth.rotation is None:
        raise ValueError("orientation needs a box body with rotation ground truth")
    e = encode(encoders, dataset.obs)
    axes, usable = covariance_long_axes(e.ext_mean, e.ext_factor, ratio)
    err = axis_angle_deg(axes, true_long_axes(truth.rotation, body.half_extents))
    if not usable.any():
        return float("nan"), 0
    return float(err[usable].mean()), int(usable.sum())


# --- sufficient-condition checker ----------------------------------------------


def condition_violations(e: Encodings, e_next: Encodings, actions, obs, obs_next, cfg: EvalConfig) -> dict:
    """Count per-condition violations on precomputed encodings.

    ``equivariance`` and ``contact`` count transitions; ``injectivity``
    counts pairs of different observations whose joint codes
    ``(z_int, mean(z_ext), w)`` lie within ``tol_inj`` of each other.
    """
    a = np.asarray(actions, dtype=np.float64)
    r = e_next.z_int - e.z_int - a
    eq = np.sum(r * r, axis=1) > cfg.tol_eq

    d_inv = np.sum((e_next.ext_mean - e.ext_mean) ** 2, axis=1)
    d_seg = batch_point_segment_sqdist(e.ext_mean, e.z_int, a)
    contact = np.minimum(d_inv, d_seg) > cfg.tol_cond3

    codes = np.concatenate(
        [np.hstack([e.z_int, e.ext_mean, e.w]), np.hstack([e_next.z_int, e_next.ext_mean, e_next.w])]
    )
    raw = np.concatenate([np.asarray(obs), np.asarray(obs_next)])
    pairs = cKDTree(codes).query_pairs(cfg.tol_inj, output_type="ndarray")
    inj = 0
    if pairs.size:
        distinct = np.any(raw[pairs[:, 0]] != raw[pairs[:, 1]], axis=1)
        inj = int(distinct.sum())
    return {"equivariance": int(eq.sum()), "injectivity": inj, "contact": int(contact.sum())}


def check_theorem_conditions(encoders: EncoderTriple, dataset, cfg: EvalConfig | None = None) -> dict:
    cfg = cfg or EvalConfig()
    e = encode(encoders, dataset.obs)
    e_next = encode(encoders, dataset.next_obs)
    return condition_violations(e, e_next, dataset.actions, dataset.obs, dataset.next_obs, cfg)


# --- reports -------------------------------------------------------------------


@dataclass
class EvalReport:
    l_test: float | None
    translation_h: np.ndarray | None
    translation_residual_p95: float | None
    otsu_accuracy: float | None
    orientation_error_deg: float | None
    condition_violations: dict
    tolerances: dict = field(default_factory=dict)
    test_size: int = 0
    epoch: int | None = None

    def __post_init__(self):
        for name in ("l_test", "translation_residual_p95", "otsu_accuracy"):
            value = getattr(self, name)
            if value is not None and not np.isfinite(value):
                raise ValueError(f"{name} is not finite")
        if self.otsu_accuracy is not None and not 0.0 <= self.otsu_accuracy <= 1.0:
            raise ValueError("otsu_accuracy must lie in [0, 1]")

    def csv_row(self) -> dict:
        def num(x):
            return "" if x is None else repr(float(x))

        h = "" if self.translation_h is None else " ".join(repr(float(v)) for v in self.translation_h)
        return {
            "epoch": "" if self.epoch is None else str(self.epoch),
            "l_test": num(self.l_test),
            "translation_h": h,
            "translation_residual_p95": num(self.translation_residual_p95),
            "otsu_accuracy": num(self.otsu_accuracy),
            "orientation_error_deg": num(self.orientation_error_deg),
            "violations_equivariance": str(self.condition_violations["equivariance"]),
            "violations_injectivity": str(self.condition_violations["injectivity"]),
            "violations_contact": str(self.condition_violations["contact"]),
        }

    def to_text(self) -> str:
        lines = ["[report]", f"test_size = {self.test_size}"]
        for key, value in sorted(self.tolerances.items()):
            lines.append(f"{key} = {value!r}")
        for key, value in self.csv_row().items():
            if key != "epoch":
                lines.append(f"{key} = {value if value != '' else 'n/a'}")
        return "\n".join(lines) + "\n"


def report_csv_header() -> str:
    return ",".join(REPORT_COLUMNS) + "\n"


def report_csv_line(report: EvalReport) -> str:
    buf = io.StringIO()
    csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n").writerow(report.csv_row())
    return buf.getvalue()


def evaluate(encoders: EncoderTriple, dataset, cfg: EvalConfig | None = None, epoch: int | None = None) -> EvalReport:
    """All metrics on ``dataset``; truth-based ones are omitted without truth."""
    cfg = cfg or EvalConfig()
    e = encode(encoders, dataset.obs)
    e_next = encode(encoders, dataset.next_obs)
    violations = condition_violations(e, e_next, dataset.actions, dataset.obs, dataset.next_obs, cfg)
    tolerances = {"tol_eq": cfg.tol_eq, "tol_cond3": cfg.tol_cond3, "tol_inj": cfg.tol_inj}
    if dataset.truth is None:
        log.warning("no ground truth available: l_test and truth-based metrics omitted")
        return EvalReport(None, None, None, None, None, violations, tolerances, len(dataset), epoch)
    truth = dataset.truth
    lt = relative_error(e.z_int, e.ext_mean, truth.s_int, truth.s_ext)
    h, resid = fit_translation(e.z_int, e.ext_mean, truth.s_int, truth.s_ext)
    acc = otsu_accuracy(classify_dataset(e, e_next), truth.interacted)
    orient = None
    if encoders.mode == "stochastic" and dataset.config.body.kind == "box" and truth.rotation is not None:
        axes, usable = covariance_long_axes(e.ext_mean, e.ext_factor)
        if usable.any():
            err = axis_angle_deg(axes, true_long_axes(truth.rotation, dataset.config.body.half_extents))
            orient = float(err[usable].mean())
    return EvalReport(lt, h, float(np.percentile(resid, 95)), acc, orient, violations, tolerances, len(dataset), epoch)


def latent_rows(encoders: EncoderTriple, dataset):
    """Header and rows of the per-sample latent dump."""
    n = encoders.n
    e = encode(encoders, dataset.obs)
    cov = np.einsum("bij,bkj->bik", e.ext_factor, e.ext_factor)
    iu = np.triu_indices(n)
    header = ["index"]
    header += [f"z_int_{i}" for i in range(n)] + [f"z_ext_{i}" for i in range(n)]
    header += [f"cov_{i}{j}" for i, j in zip(*iu)]
    header += [f"w_{i}" for i in range(e.w.shape[1])]
    header += [f"s_int_{i}" for i in range(n)] + [f"s_ext_{i}" for i in range(n)]
    truth = dataset.truth
    rows = []
    for k in range(len(dataset)):
        row = [str(k)]
        row += [repr(float(v)) for v in e.z_int[k]] + [repr(float(v)) for v in e.ext_mean[k]]
        row += [repr(float(v)) for v in cov[k][iu]]
        row += [repr(float(v)) for v in e.w[k]]
        if truth is None:
            row += [""] * (2 * n)
        else:
            row += [repr(float(v)) for v in truth.s_int[k]] + [repr(float(v)) for v in truth.s_ext[k]]
        rows.append(row)
    return header, rows


def latent_csv(encoders: EncoderTriple, dataset) -> str:
    header, rows = latent_rows(encoders, dataset)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# --- ground-truth encoders -------------------------------------------------------


def cheat_encoders(dataset_config, h, mode: str = "deterministic", cont_dim: int | None = None,
                   scale: float = 0.05) -> EncoderTriple:
    """Linear encoders that read the true state off identity observations.

    ``z_int = s_int + h`` and ``mean(z_ext) = s_ext + h``; the covariance is
    isotropic with standard deviation ``scale`` and the contrastive code is
    the object block of the observation (position, plus rotation for boxes).
    """
    cfg = dataset_config
    if cfg.emission.kind != "identity":
        raise ValueError("ground-truth encoders need the identity emission")
    n = cfg.n
    d = env.obs_dim(cfg)
    h = np.asarray(h, dtype=np.float64)
    ext_block = d - n
    cont_dim = ext_block if cont_dim is None else cont_dim
    if cont_dim != ext_block:
        raise ValueError(f"contrastive code width must be {ext_block}")

    w_int = np.zeros((d, n))
    w_int[:n, :n] = np.eye(n)
    r = raw_size(n)
    w_ext = np.zeros((d, r))
    w_ext[n : 2 * n, :n] = np.eye(n)
    b_ext = np.zeros(r)
    b_ext[:n] = h
    # softplus(x) + 1e-6 = scale on the diagonal
    b_ext[n : 2 * n] = np.log(np.expm1(scale - 1e-6))
    w_cont = np.zeros((d, ext_block))
    w_cont[n:, :] = np.eye(ext_block)

    specs = {
        "int": diff.MlpSpec((d, n), "relu", (("z_int", n),)),
        "ext": diff.MlpSpec((d, r), "relu", (("mean", n), ("log_diag", n), ("offdiag", r - 2 * n))),
        "cont": diff.MlpSpec((d, ext_block), "relu", (("w", ext_block),)),
    }
    params = {
        "int": [w_int, h.copy()],
        "ext": [w_ext, b_ext],
        "cont": [w_cont, np.zeros(ext_block)],
    }
    return EncoderTriple(n, mode, specs, params)
