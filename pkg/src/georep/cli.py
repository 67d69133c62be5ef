"""Command line driver: generate, train, eval and reproduce.

Every command is a pure function of its configuration, seed and input
files. Outputs are written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import env, evaluate, learner, presets
from .config import (
    ConfigError,
    ExperimentConfig,
    dump_experiment,
    load_experiment,
    world_from_dict,
    world_to_dict,
    write_text_atomic,
)

log = logging.getLogger("georep")

EMISSION_CHOICES = ("identity", "scrambled", "raster", "raster-bg", "raster-aniso")
CHECKPOINT_NAME = "checkpoint"
METRICS_NAME = "metrics.csv"
CURVE_NAME = "curve.csv"
CURVE_COLUMNS = ("epoch", "l_test", "otsu_accuracy")
REPORT_TEXT = "report.txt"
REPORT_CSV = "report.csv"
LATENTS_NAME = "latents.csv"
SUMMARY_NAME = "summary.txt"

EXIT_DIVERGED = 3
EXIT_USAGE = 2


class CliError(RuntimeError):
    pass


# --- configuration ---------------------------------------------------------------


def apply_emission(cfg: ExperimentConfig, choice: str) -> ExperimentConfig:
    world = cfg.world
    em = world.emission
    if choice == "raster-bg":
        em = dataclasses.replace(em, kind="raster", dynamic_background=True)
    elif choice == "raster-aniso":
        em = dataclasses.replace(em, kind="raster_anisotropic", dynamic_background=False)
    elif choice == "raster":
        em = dataclasses.replace(em, kind="raster", dynamic_background=False)
    else:
        em = dataclasses.replace(em, kind=choice, dynamic_background=False)
    body = world.body
    if choice == "raster-aniso" and body.kind != "box":
        body = presets.BOX_BODY
    try:
        world = dataclasses.replace(world, body=body, emission=em)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return dataclasses.replace(cfg, world=world)


def resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    if getattr(args, "config", None):
        cfg = load_experiment(args.config, cfg)
    if getattr(args, "emission", None):
        cfg = apply_emission(cfg, args.emission)
    if getattr(args, "mode", None):
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mode=args.mode))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, train=dataclasses.replace(cfg.train, seed=args.seed))
    if getattr(args, "epochs", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    if getattr(args, "records", None) is not None:
        cfg = dataclasses.replace(cfg, num_records=args.records)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if v is None:
        return ""
    return repr(float(v))


# --- commands ----------------------------------------------------------------------


def generate(cfg: ExperimentConfig, out: Path, num_records: int | None = None, seed: int | None = None):
    n = cfg.num_records if num_records is None else num_records
    s = cfg.seed if seed is None else seed
    ds = env.generate_dataset(cfg.world, n, s)
    env.save_dataset(ds, out)
    return ds


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    ds = generate(cfg, out)
    write_text_atomic(out / "experiment.ini", dump_experiment(cfg))
    print(f"wrote {len(ds)} records to {out} (interaction fraction {ds.interaction_fraction:.4f})")
    return 0


def check_compatible(cfg: ExperimentConfig, manifest: dict):
    want = env.obs_dim(cfg.world)
    if manifest["obs_dim"] != want or manifest["n"] != cfg.world.n:
        raise ConfigError(
            f"dataset has obs_dim={manifest['obs_dim']}, n={manifest['n']} but the config implies "
            f"obs_dim={want}, n={cfg.world.n}"
        )


def train_run(cfg: ExperimentConfig, dataset, out: Path, epoch_hook=None):
    """Train, streaming metrics to ``out/metrics.csv``; returns encoders and rows."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def callback(epoch, enc, row):
        rows.append(row)
        write_text_atomic(out / METRICS_NAME, _csv_text(learner.METRIC_COLUMNS, rows))
        if epoch_hook is not None:
            return epoch_hook(epoch, enc, row)
        return None

    encoders, _ = learner.train(dataset, cfg.train, callback)
    learner.save_encoders(out / CHECKPOINT_NAME, encoders, cfg.train, {"world": world_to_dict(cfg.world)})
    return encoders, rows


def _diverged(exc: learner.TrainingDivergedError, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    diag = json.dumps(exc.diagnostics, indent=2, sort_keys=True, default=str)
    write_text_atomic(out / "diverged.json", diag + "\n")
    print(f"training diverged: {exc}", file=sys.stderr)
    print(diag, file=sys.stderr)
    return EXIT_DIVERGED


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    manifest = env.read_manifest(data_dir)
    if args.config:
        cfg = resolve_config(args)
    else:
        base = dataclasses.replace(ExperimentConfig(), world=world_from_dict(manifest["world"]))
        cfg = resolve_config(args, base)
    check_compatible(cfg, manifest)
    dataset = env.load_records(data_dir)
    out = Path(cfg.out)
    try:
        _, rows = train_run(cfg, dataset, out)
    except learner.TrainingDivergedError as exc:
        return _diverged(exc, out)
    write_text_atomic(out / "experiment.ini", dump_experiment(cfg))
    last = rows[-1]
    print(f"trained {len(rows)} epochs: L_int={last['L_int']:.5g} L_ext={last['L_ext']:.5g} L_cont={last['L_cont']:.5g}")
    return 0


def write_eval(encoders, dataset, cfg: ExperimentConfig, out: Path, epoch=None) -> evaluate.EvalReport:
    report = evaluate.evaluate(encoders, dataset, cfg.eval, epoch)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / REPORT_TEXT, report.to_text())
    csv_path = out / REPORT_CSV
    text = csv_path.read_text() if csv_path.exists() else evaluate.report_csv_header()
    write_text_atomic(csv_path, text + evaluate.report_csv_line(report))
    write_text_atomic(out / LATENTS_NAME, evaluate.latent_csv(encoders, dataset))
    return report


def test_dataset(cfg: ExperimentConfig):
    return env.generate_dataset(cfg.world, cfg.eval.test_size, cfg.eval.test_seed)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    encoders, _, header = learner.load_encoders(ckpt)
    if args.data:
        dataset = env.load_dataset(args.data, with_truth=True)
        world = dataset.config
    else:
        world = world_from_dict(header["world"])
        dataset = None
    cfg = resolve_config(args, dataclasses.replace(ExperimentConfig(), world=world))
    if dataset is None:
        dataset = test_dataset(cfg)
    if dataset.obs_dim != encoders.obs_dim:
        raise ConfigError(f"checkpoint expects obs_dim={encoders.obs_dim}, dataset has {dataset.obs_dim}")
    out = Path(args.out) if args.out else ckpt.parent
    report = write_eval(encoders, dataset, cfg, out)
    print(report.to_text(), end="")
    return 0


# --- reproduce ---------------------------------------------------------------------


def monotone_windows(values, start: int, window: int):
    """Means of consecutive ``window``-epoch blocks counted back from the end.

    ``values[i]`` belongs to epoch ``i + 1``; epochs before ``start`` are
    ignored and a leading partial block is dropped.
    """
    vals = np.asarray(values[start - 1 :], dtype=np.float64)
    count = vals.size // window
    if count == 0:
        return []
    tail = vals[vals.size - count * window :]
    return [float(x) for x in tail.reshape(count, window).mean(axis=1)]


def is_non_increasing(seq) -> bool:
    return all(b <= a for a, b in zip(seq, seq[1:]))


def reproduce(name: str, out: Path | None = None, seed: int | None = None, epochs: int | None = None,
              num_records: int | None = None) -> dict:
    preset = presets.get_preset(name, seed)
    cfg = preset.config
    if epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=epochs))
    if num_records is not None:
        cfg = dataclasses.replace(cfg, num_records=num_records)
    out = Path(out or cfg.out)
    cfg = dataclasses.replace(cfg, out=str(out))
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / "experiment.ini", dump_experiment(cfg))

    t0 = time.perf_counter()
    train_set = generate(cfg, out / "data")
    test_set = test_dataset(cfg)
    curve = []

    def hook(epoch, enc, row):
        e = learner.encode(enc, test_set.obs)
        e2 = learner.encode(enc, test_set.next_obs)
        t = test_set.truth
        acc = evaluate.otsu_accuracy(evaluate.classify_dataset(e, e2), t.interacted)
        curve.append({"epoch": epoch, "l_test": evaluate.relative_error(e.z_int, e.ext_mean, t.s_int, t.s_ext),
                      "otsu_accuracy": acc})
        write_text_atomic(out / CURVE_NAME, _csv_text(CURVE_COLUMNS, curve))
        return None

    encoders, rows = train_run(cfg, env.load_records(out / "data"), out, hook)
    report = write_eval(encoders, test_set, cfg, out, epoch=len(rows))
    elapsed = time.perf_counter() - t0
    summary = score(preset, cfg, report, curve)
    summary["runtime_s"] = elapsed
    summary["interaction_fraction"] = train_set.interaction_fraction
    write_text_atomic(out / SUMMARY_NAME, format_summary(name, summary))
    return summary


def score(preset: presets.Preset, cfg: ExperimentConfig, report: evaluate.EvalReport, curve) -> dict:
    th = preset.thresholds
    checks = {}
    if "l_test" in th:
        checks["l_test"] = (report.l_test, f"< {th['l_test']}", report.l_test < th["l_test"])
    if "translation_residual_p95" in th:
        v = report.translation_residual_p95
        checks["translation_residual_p95"] = (v, f"< {th['translation_residual_p95']}", v < th["translation_residual_p95"])
    if "otsu_accuracy_epoch10" in th and len(curve) >= 10:
        accs = [c["otsu_accuracy"] for c in curve[9:]]
        v = min(accs)
        checks["otsu_accuracy_from_epoch10"] = (v, f">= {th['otsu_accuracy_epoch10']}", v >= th["otsu_accuracy_epoch10"])
    if "monotone_window" in th:
        blocks = monotone_windows([c["l_test"] for c in curve], cfg.train.warmup_epochs + 1, th["monotone_window"])
        checks["l_test_block_means"] = (blocks, "non-increasing", is_non_increasing(blocks))
    if "orientation_error_deg" in th:
        v = report.orientation_error_deg
        ok = v is not None and v < th["orientation_error_deg"]
        checks["orientation_error_deg"] = (v, f"< {th['orientation_error_deg']}", ok)
    return {"checks": checks, "passed": all(c[2] for c in checks.values())}


def format_summary(name: str, summary: dict) -> str:
    lines = [f"preset = {name}", f"runtime_s = {summary.get('runtime_s', 0.0):.1f}"]
    if summary.get("interaction_fraction") is not None:
        lines.append(f"interaction_fraction = {summary['interaction_fraction']:.4f}")
    for key, (value, target, ok) in summary["checks"].items():
        if isinstance(value, list):
            shown = "[" + ", ".join(f"{v:.5g}" for v in value) + "]"
        elif value is None:
            shown = "n/a"
        else:
            shown = f"{value:.6g}"
        lines.append(f"{'PASS' if ok else 'FAIL'} {key} = {shown} (target {target})")
    lines.append(f"overall = {'PASS' if summary['passed'] else 'FAIL'}")
    return "\n".join(lines) + "\n"


def cmd_reproduce(args) -> int:
    try:
        summary = reproduce(args.name, args.out, args.seed, args.epochs, args.records)
    except learner.TrainingDivergedError as exc:
        return _diverged(exc, Path(args.out or presets.PRESETS[args.name].config.out))
    print(format_summary(args.name, summary), end="")
    return 0 if summary["passed"] else 1


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="georep", description="Learn agent and object positions from transitions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI experiment file")
        p.add_argument("--seed", type=int, help="overrides the experiment and training seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--emission", choices=EMISSION_CHOICES)
        p.add_argument("--mode", choices=("deterministic", "stochastic"))

    p = sub.add_parser("generate", help="simulate a dataset of transitions")
    common(p)
    p.add_argument("--records", type=int, help="number of transitions")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train encoders on a dataset (ground truth is never read)")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint path without suffix")
    p.add_argument("--data", help="test dataset directory; generated from the eval settings if omitted")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="generate, train and evaluate a named preset")
    p.add_argument("name", help=f"one of: {', '.join(sorted(presets.PRESETS))}")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, help="override the training length")
    p.add_argument("--records", type=int, help="override the number of training transitions")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "reproduce" and args.name not in presets.PRESETS:
        print(f"unknown preset {args.name!r}; valid presets: {', '.join(sorted(presets.PRESETS))}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, env.MissingTruthError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
