"""Command-line surface: bpreg_predict, bpreg_train, bpreg_evaluate.

A trained model travels as a bundle directory holding ``model.pt`` (the
checkpoint) and ``characteristics.json`` (empty-slice score, slopes and
reference table).  Exit codes: 0 success, 1 partial failure, 2
configuration error.
"""

import argparse
import csv
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import plotting
from .applications import DEFAULT_THETA, BodyPartBoundaries, build_metadata, metadata_to_json
from .errors import BpregError, ConfigError
from .evaluation import (
    accuracy_5class,
    build_reference_table,
    lmse,
    lmse_per_landmark,
    load_annotations,
    r2_summary,
    z_test_compare,
)
from .landmarks import FIVE_CLASSES
from .model import load_checkpoint, predict_scores, save_checkpoint
from .postprocessing import ModelCharacteristics, compute_model_characteristics
from .training import TrainConfig, derive_schedule, train
from .volumes import load_volume, preprocess_volume

MODEL_DIR_ENV = "BPREG_MODEL_DIR"
VOLUME_SUFFIXES = (".nii", ".nii.gz", ".json")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


# --- model bundles ----------------------------------------------------------

def save_model_bundle(bundle_dir, model, chars: ModelCharacteristics, extra=None):
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, bundle_dir / "model.pt", extra=extra)
    chars.save(bundle_dir / "characteristics.json")


def load_model_bundle(bundle_dir):
    bundle_dir = Path(bundle_dir)
    model, _ = load_checkpoint(bundle_dir / "model.pt")
    chars_path = bundle_dir / "characteristics.json"
    chars = ModelCharacteristics.load(chars_path) if chars_path.exists() else None
    return model, chars


def _resolve_model_dir(arg):
    if arg:
        return Path(arg)
    env = os.environ.get(MODEL_DIR_ENV)
    if env:
        return Path(env)
    raise ConfigError(
        f"no model given: pass --model or set ${MODEL_DIR_ENV} to a bundle directory "
        "(see README for how to train one or fetch the public model)"
    )


def _discover_volumes(input_dir, recursive=False):
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise ConfigError(f"input directory {input_dir} does not exist")
    paths = input_dir.rglob("*") if recursive else input_dir.glob("*")
    found = sorted(p for p in paths if p.is_file() and _is_volume_file(p))
    return found

def _is_volume_file(path):
    name = path.name
    return name.endswith(".nii") or name.endswith(".nii.gz") or (
        name.endswith(".json") and not name.endswith(".meta.json")
    )


def _volume_stem(path):
    name = path.name
    for suffix in (".nii.gz", ".nii", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


OUTPUT_README = """\
Body part metadata files
========================

One <volume>.json file per input volume with these entries:

- "cleaned slice scores": per kept slice, scores on the common scale
  (pelvis-start ~ 0, eyes-end ~ 100) after empty-slice filtering,
  transformation, smoothing and tail removal.
- "unprocessed slice scores": same slices, transformed but not smoothed.
- "z": physical height of each kept slice in mm.
- "body part examined": per body region, the slice indices (into the
  original volume) whose score falls inside the region's expected range.
- "body part examined tag": single tag such as CHEST-ABDOMEN-PELVIS;
  NONE when the scan failed the z-spacing sanity check.
- "look-up table": expected score (mean) and spread (std) per anatomical
  landmark on the common scale.
- "reverse z-ordering": true when scores fall with slice index, i.e. the
  volume is stored head-to-feet.
- "valid z-spacing": false when the observed score slope deviates too
  much from the expected slope (|1 - |slope ratio|| >= theta).
- "expected slope": mean score-per-mm slope of the model's training data.
- "observed slope": fitted score-per-mm slope of this volume.
- "slope ratio": observed / expected slope.
- "expected z-spacing": slice spacing in mm implied by the score slope.
- "z-spacing": slice spacing stored in the volume header.
- "settings": the exact configuration used to produce this file.
"""


def cmd_predict(args) -> int:
    """Write one metadata JSON (and optionally a PNG) per input volume."""
    try:
        model_dir = _resolve_model_dir(args.model)
        model, chars = load_model_bundle(model_dir)
        if chars is None:
            raise ConfigError(f"{model_dir} has no characteristics.json")
        boundaries = BodyPartBoundaries.load(args.boundary_config) if args.boundary_config else None
        volumes = _discover_volumes(args.input, recursive=args.recursive)
        if not volumes:
            print(f"error: no volume files (*.nii, *.nii.gz, *.json) in {args.input}", file=sys.stderr)
            return EXIT_CONFIG
    except (BpregError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "README.md").write_text(OUTPUT_README)

    def process(path):
        volume = preprocess_volume(load_volume(path))
        record = build_metadata(volume, model, chars, theta=args.theta, boundaries=boundaries)
        stem = _volume_stem(path)
        (out_dir / f"{stem}.json").write_text(metadata_to_json(record))
        if args.plot:
            plotting.plot_score_curves(
                record["z"],
                record["unprocessed slice scores"],
                record["cleaned slice scores"],
                out_dir / f"{stem}.png",
                title=stem,
            )

    failures = 0
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futures = {pool.submit(process, p): p for p in volumes}
            for future, path in futures.items():
                try:
                    future.result()
                except Exception as exc:
                    failures += 1
                    print(f"error: {path}: {exc}", file=sys.stderr)
    else:
        for path in volumes:
            try:
                process(path)
            except Exception as exc:
                failures += 1
                print(f"error: {path}: {exc}", file=sys.stderr)
                if args.verbose:
                    traceback.print_exc()

    done = len(volumes) - failures
    print(f"wrote metadata for {done}/{len(volumes)} volumes to {out_dir}")
    return EXIT_OK if failures == 0 else EXIT_PARTIAL


def cmd_train(args) -> int:
    """Run a training config end to end and save the model bundle."""
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
        data_cfg = doc.get("data", {})
        cfg = TrainConfig.from_dict(doc.get("train", {}))
        cfg.validate()
        derive_schedule(cfg.m, cfg.slices_per_batch, cfg.total_slices_per_volume)

        annotations = load_annotations(data_cfg["annotations"])
        train_vols = _load_dir_volumes(data_cfg["train_dir"])
        val_vols = _load_dir_volumes(data_cfg["val_dir"])
    except (BpregError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.output)
    result = train(train_vols, val_vols, annotations, cfg, out_dir=out_dir, resume=args.resume)

    # application-grade characteristics come from the train+val pool
    chars = compute_model_characteristics(
        result.model, train_vols + val_vols, annotations, slope_volumes=train_vols
    )
    save_model_bundle(out_dir / "bundle", result.model, chars, extra={"best_epoch": result.best_epoch})
    plotting.plot_training_history(result.history, out_dir / "history.png")
    print(f"best validation LMSE {result.best_val_lmse:.6g} at epoch {result.best_epoch}")
    print(f"model bundle written to {out_dir / 'bundle'}")
    return EXIT_OK


def _load_dir_volumes(directory):
    paths = _discover_volumes(directory)
    if not paths:
        raise ConfigError(f"no volumes in {directory}")
    volumes = []
    for p in paths:
        vol = preprocess_volume(load_volume(p))
        vol.source_id = _volume_stem(p)
        volumes.append(vol)
    return volumes


def _evaluate_one(model_dir, volumes, annotations):
    model, chars = load_model_bundle(model_dir)
    if chars is not None:
        table = chars.table
    else:
        table = build_reference_table(model, volumes, annotations)
    scores = {v.source_id: predict_scores(model, v) for v in volumes}
    lmse_res = lmse(scores, volumes, annotations, table)
    accuracy = accuracy_5class(scores, volumes, annotations, table)
    _, r2_mean, r2_se = r2_summary([scores[v.source_id] for v in volumes])
    per_landmark = lmse_per_landmark(scores, volumes, annotations, table)
    return {
        "model": str(model_dir),
        "lmse": lmse_res.mean,
        "lmse_se": lmse_res.standard_error,
        "accuracy": accuracy,
        "r2_mean": r2_mean,
        "r2_se": r2_se,
        "per_volume_lmse": lmse_res.per_volume,
        "per_landmark": {k: {"lmse": v[0], "se": v[1], "count": v[2]} for k, v in per_landmark.items()},
    }


def _per_landmark_text(report):
    class_boundaries = {FIVE_CLASSES[0][1]} | {c[2] for c in FIVE_CLASSES}
    lines = ["landmark        LMSE +- SE          n   class boundary",
             "-" * 56]
    for name, entry in report["per_landmark"].items():
        mark = "x" if name in class_boundaries else ""
        lines.append(f"{name:<15} {entry['lmse']:8.4f} +- {entry['se']:<8.4f} {entry['count']:3d}   {mark}")
    lines.append("-" * 56)
    lines.append(f"{'mean':<15} {report['lmse']:8.4f} +- {report['lmse_se']:<8.4f}")
    lines.append(f"{'accuracy':<15} {report['accuracy']:8.4f}")
    if report["r2_mean"] is not None:
        lines.append(f"{'R2':<15} {report['r2_mean']:8.4f} +- {report['r2_se']:<8.4f}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    """Landmark metrics for one model, or a z-test comparison of two."""
    try:
        annotations = load_annotations(args.annotations)
        volumes = _load_dir_volumes(args.volumes)
        report = _evaluate_one(_resolve_model_dir(args.model), volumes, annotations)
        compare_report = None
        if args.compare:
            compare_report = _evaluate_one(Path(args.compare), volumes, annotations)
    except (BpregError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = {"primary": report}
    text = _per_landmark_text(report)
    if compare_report is not None:
        t, significant = z_test_compare(
            report["lmse"], report["lmse_se"], compare_report["lmse"], compare_report["lmse_se"]
        )
        out["compare"] = compare_report
        out["z_test"] = {"t": t, "significant": significant}
        text += (
            f"\nz-test vs {compare_report['model']}: t = {t:.3f} -> "
            f"{'significant' if significant else 'not significant'} at the 5% level\n"
        )

    print(text, end="")

    if args.output:
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(out, indent=1, sort_keys=True))
        (out_dir / "report.txt").write_text(text)
        with open(out_dir / "per_landmark.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["landmark", "lmse", "se", "count"])
            for name, entry in report["per_landmark"].items():
                writer.writerow([name, entry["lmse"], entry["se"], entry["count"]])
        plotting.plot_per_landmark_lmse(
            {k: (v["lmse"], v["se"]) for k, v in report["per_landmark"].items()},
            out_dir / "per_landmark.png",
        )
    return EXIT_OK


# --- argument parsing -------------------------------------------------------

def _predict_parser():
    p = argparse.ArgumentParser(prog="bpreg_predict", description="Create body part metadata JSON files for CT volumes.")
    p.add_argument("-i", "--input", required=True, help="directory with *.nii, *.nii.gz or raw-json volumes")
    p.add_argument("-o", "--output", required=True, help="output directory for the JSON metadata files")
    p.add_argument("--model", default=None, help=f"model bundle directory (default: ${MODEL_DIR_ENV})")
    p.add_argument("--plot", action="store_true", help="also write a score-curve PNG per volume")
    p.add_argument("--theta", type=float, default=DEFAULT_THETA, help="z-spacing sanity threshold (default %(default)s)")
    p.add_argument("--boundary-config", default=None, help="JSON file overriding the body part boundaries")
    p.add_argument("--recursive", action="store_true", help="search the input directory recursively")
    p.add_argument("--jobs", type=int, default=1, help="process volumes with N threads")
    p.add_argument("--verbose", action="store_true")
    return p


def _train_parser():
    p = argparse.ArgumentParser(prog="bpreg_train", description="Train a body part regression model.")
    p.add_argument("-c", "--config", required=True, help="JSON file with 'data' and 'train' sections")
    p.add_argument("-o", "--output", required=True, help="output directory (checkpoints, history, bundle)")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint-last.pt in the output directory")
    return p


def _evaluate_parser():
    p = argparse.ArgumentParser(prog="bpreg_evaluate", description="Evaluate a model with landmark metrics.")
    p.add_argument("-m", "--model", default=None, help=f"model bundle directory (default: ${MODEL_DIR_ENV})")
    p.add_argument("-v", "--volumes", required=True, help="directory with annotated volumes")
    p.add_argument("-a", "--annotations", required=True, help="JSON {volume_id: {landmark: slice_index}}")
    p.add_argument("-o", "--output", default=None, help="write report.json/report.txt/per_landmark.csv here")
    p.add_argument("--compare", default=None, help="second model bundle for a z-test comparison")
    return p


def main_predict(argv=None):
    return cmd_predict(_predict_parser().parse_args(argv))


def main_train(argv=None):
    return cmd_train(_train_parser().parse_args(argv))


def main_evaluate(argv=None):
    return cmd_evaluate(_evaluate_parser().parse_args(argv))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main_predict())
