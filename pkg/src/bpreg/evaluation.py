"""Landmark-based evaluation: reference table, LMSE, z-test, accuracy, R2.

Slice scores live on a model-specific scale, so all metrics first anchor
the scale through the slice score reference table: the mean predicted
score per annotated landmark.  Scores are then expressed in units of the
normalization constant d = (mean[eyes-end] - mean[pelvis-start]) / 100,
which maps pelvis-start to 0 and eyes-end to 100.
"""

import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .landmarks import (
    EVALUATION_LANDMARKS,
    FIVE_CLASSES,
    SCALE_END_LANDMARK,
    SCALE_START_LANDMARK,
)
from .model import SliceScoreModel, predict_slice_scores

# annotations: {volume_id: {landmark_name: slice_index}}


def load_annotations(path):
    with open(path) as fh:
        doc = json.load(fh)
    return {vid: {name: int(idx) for name, idx in marks.items()} for vid, marks in doc.items()}


def save_annotations(annotations, path):
    with open(path, "w") as fh:
        json.dump(annotations, fh, indent=1, sort_keys=True)


@dataclass
class LandmarkStats:
    mean: float
    std: float   # sample std (N-1); 0.0 when only one observation
    count: int


@dataclass
class SliceScoreReferenceTable:
    """Per-landmark mean/std of predicted scores on the raw model scale."""

    entries: dict = field(default_factory=dict)  # landmark -> LandmarkStats

    @property
    def d(self):
        """Normalization constant: one hundredth of the pelvis-start to
        eyes-end score span."""
        lo = self.entries[SCALE_START_LANDMARK].mean
        hi = self.entries[SCALE_END_LANDMARK].mean
        return (hi - lo) / 100.0

    def mean(self, landmark):
        return self.entries[landmark].mean

    def transformed_mean(self, landmark):
        return (self.entries[landmark].mean - self.entries[SCALE_START_LANDMARK].mean) / self.d

    def __contains__(self, landmark):
        return landmark in self.entries

    def eval_means_monotone(self):
        means = [self.entries[lm].mean for lm in EVALUATION_LANDMARKS if lm in self.entries]
        return all(a < b for a, b in zip(means, means[1:]))

    def to_dict(self):
        return {
            name: {"mean": s.mean, "std": s.std, "count": s.count}
            for name, s in sorted(self.entries.items())
        }

    @classmethod
    def from_dict(cls, d):
        return cls(entries={k: LandmarkStats(v["mean"], v["std"], int(v["count"])) for k, v in d.items()})

    def transformed_dict(self):
        """Landmark -> {mean, std} on the common 0..100 scale."""
        d = self.d
        return {
            name: {"mean": self.transformed_mean(name), "std": s.std / d}
            for name, s in sorted(self.entries.items())
        }


def _volume_map(volumes):
    return {v.source_id: v for v in volumes}


def landmark_scores(model_or_scores, volumes, annotations):
    """Predicted scores at every annotated slice.

    Returns {volume_id: {landmark: score}}.  ``model_or_scores`` is either
    a SliceScoreModel (only the annotated slices are evaluated) or a
    {volume_id: per-slice score list} mapping.
    """
    by_id = _volume_map(volumes)
    out = {}
    for vid, marks in annotations.items():
        if vid not in by_id:
            continue
        volume = by_id[vid]
        names = sorted(marks)
        indices = [marks[n] for n in names]
        bad = [i for i in indices if not 0 <= i < volume.n_slices]
        if bad:
            raise ConfigError(f"{vid}: annotated indices {bad} outside volume of {volume.n_slices} slices")
        if isinstance(model_or_scores, SliceScoreModel):
            values = predict_slice_scores(model_or_scores, volume.slices[indices])
        else:
            per_slice = np.asarray(model_or_scores[vid], dtype=np.float64)
            values = per_slice[indices]
        out[vid] = {n: float(v) for n, v in zip(names, values)}
    return out


def build_reference_table(model_or_scores, volumes, annotations) -> SliceScoreReferenceTable:
    """Average predicted scores per landmark over the annotation pool.

    The caller chooses the pool: training annotations for evaluation
    metrics, training plus validation for application pipelines.  Fails
    when pelvis-start or eyes-end is missing, since the common scale is
    undefined without them.
    """
    per_volume = landmark_scores(model_or_scores, volumes, annotations)
    collected = {}
    for marks in per_volume.values():
        for name, score in marks.items():
            collected.setdefault(name, []).append(score)

    for required in (SCALE_START_LANDMARK, SCALE_END_LANDMARK):
        if required not in collected:
            raise ConfigError(
                f"reference table needs at least one {required!r} annotation "
                "(the normalization constant is undefined without it)"
            )

    entries = {}
    for name, values in collected.items():
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        entries[name] = LandmarkStats(mean=float(arr.mean()), std=std, count=len(arr))
    table = SliceScoreReferenceTable(entries=entries)
    if table.d <= 0:
        raise ConfigError("degenerate reference table: eyes-end mean does not exceed pelvis-start mean")
    if not table.eval_means_monotone():
        warnings.warn("reference table means are not monotone along the evaluation landmarks", RuntimeWarning)
    return table


def normalize_scores(scores, table: SliceScoreReferenceTable):
    """Map raw scores onto the common scale: pelvis-start -> 0, eyes-end -> 100."""
    scores = np.asarray(scores, dtype=np.float64)
    return (scores - table.mean(SCALE_START_LANDMARK)) / table.d


class LmseResult(NamedTuple):
    mean: float
    standard_error: float
    per_volume: dict  # volume_id -> lmse


def lmse(model_or_scores, volumes, annotations, table, aggregate="volume") -> LmseResult:
    """Landmark mean square error in units of the normalization constant.

    Per volume: mean over its annotated evaluation landmarks of
    ((table_mean - predicted) / d)^2; the dataset value averages per
    volume (default) or, with aggregate='landmark', first per landmark.
    Volumes without any annotated evaluation landmark are excluded with a
    warning.
    """
    if aggregate not in ("volume", "landmark"):
        raise ValueError("aggregate must be 'volume' or 'landmark'")
    per_volume_scores = landmark_scores(model_or_scores, volumes, annotations)
    d = table.d

    sq_errors = {}  # volume_id -> {landmark: squared normalized error}
    for vid, marks in per_volume_scores.items():
        errs = {
            name: ((table.mean(name) - score) / d) ** 2
            for name, score in marks.items()
            if name in EVALUATION_LANDMARKS and name in table
        }
        if not errs:
            warnings.warn(f"{vid}: no annotated evaluation landmark, excluded from LMSE", RuntimeWarning)
            continue
        sq_errors[vid] = errs

    if not sq_errors:
        raise ConfigError("no volume contributed to the LMSE")

    if aggregate == "volume":
        per_volume = {vid: float(np.mean(list(errs.values()))) for vid, errs in sq_errors.items()}
        values = np.asarray(list(per_volume.values()))
        mean = float(values.mean())
        se = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
        return LmseResult(mean, se, per_volume)

    per_landmark = {}
    for errs in sq_errors.values():
        for name, e in errs.items():
            per_landmark.setdefault(name, []).append(e)
    landmark_means = np.asarray([np.mean(v) for v in per_landmark.values()])
    mean = float(landmark_means.mean())
    se = float(landmark_means.std(ddof=1) / np.sqrt(len(landmark_means))) if len(landmark_means) > 1 else 0.0
    per_volume = {vid: float(np.mean(list(errs.values()))) for vid, errs in sq_errors.items()}
    return LmseResult(mean, se, per_volume)


def lmse_per_landmark(model_or_scores, volumes, annotations, table):
    """Per-landmark LMSE with standard errors: {landmark: (mean, se, count)}."""
    per_volume_scores = landmark_scores(model_or_scores, volumes, annotations)
    d = table.d
    collected = {}
    for marks in per_volume_scores.values():
        for name, score in marks.items():
            if name in EVALUATION_LANDMARKS and name in table:
                collected.setdefault(name, []).append(((table.mean(name) - score) / d) ** 2)
    out = {}
    for name in EVALUATION_LANDMARKS:
        if name in collected:
            arr = np.asarray(collected[name])
            se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
            out[name] = (float(arr.mean()), se, len(arr))
    return out


class ZTestResult(NamedTuple):
    t: float
    significant: bool


def z_test_compare(phi_x, se_x, phi_y, se_y) -> ZTestResult:
    """Two-sided z-test on two LMSE estimates at the 5% level."""
    if se_x <= 0 or se_y <= 0:
        raise ValueError("standard errors must be positive")
    t = (phi_x - phi_y) / np.hypot(se_x, se_y)
    return ZTestResult(float(t), bool(abs(t) > 1.96))


def _class_of(value, boundaries):
    """Index of the half-open interval [b_i, b_{i+1}) containing value."""
    for i in range(len(boundaries) - 1):
        if boundaries[i] <= value < boundaries[i + 1]:
            return i
    return None


def accuracy_5class(model_or_scores, volumes, annotations, table):
    """Share of slices assigned to the correct of five body-part classes.

    Ground truth exists only for slices lying between two landmarks that
    are both annotated in the volume; predictions compare the transformed
    score against the transformed class boundaries.  The result averages
    per-volume accuracies; volumes without classifiable slices are
    excluded with a warning.
    """
    boundary_names = [FIVE_CLASSES[0][1]] + [c[2] for c in FIVE_CLASSES]
    missing = [n for n in boundary_names if n not in table]
    if missing:
        raise ConfigError(f"reference table lacks class boundary landmarks: {missing}")
    score_bounds = [table.transformed_mean(n) for n in boundary_names]

    by_id = _volume_map(volumes)
    per_volume_acc = []
    for vid, marks in annotations.items():
        if vid not in by_id:
            continue
        volume = by_id[vid]
        truth = np.full(volume.n_slices, -1, dtype=int)
        for ci, (_, start, end) in enumerate(FIVE_CLASSES):
            if start in marks and end in marks:
                truth[marks[start] : marks[end]] = ci
        classifiable = np.nonzero(truth >= 0)[0]
        if len(classifiable) == 0:
            warnings.warn(f"{vid}: no classifiable slice, excluded from accuracy", RuntimeWarning)
            continue

        if isinstance(model_or_scores, SliceScoreModel):
            scores = np.asarray(predict_slice_scores(model_or_scores, volume.slices[classifiable]))
        else:
            scores = np.asarray(model_or_scores[vid], dtype=np.float64)[classifiable]
        transformed = normalize_scores(scores, table)
        predicted = np.asarray(
            [-1 if (c := _class_of(v, score_bounds)) is None else c for v in transformed]
        )
        per_volume_acc.append(float(np.mean(predicted == truth[classifiable])))

    if not per_volume_acc:
        raise ConfigError("no volume contributed to the accuracy")
    return float(np.mean(per_volume_acc))


def r2_metric(scores):
    """Goodness of a linear slice-index fit: 1 - SS_res / SS_fit.

    The denominator is the spread of the fitted line itself, so constant
    score curves have no defined value and return None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 3:
        raise ValueError("R2 needs at least 3 slices")
    idx = np.arange(len(scores), dtype=np.float64)
    slope, intercept = np.polyfit(idx, scores, 1)
    fit = slope * idx + intercept
    denom = np.sum((fit - fit.mean()) ** 2)
    # constant curves leave only rounding noise in the fitted spread
    if denom <= 1e-12 * max(1.0, float(np.sum((scores - scores.mean()) ** 2))):
        return None
    return float(1.0 - np.sum((fit - scores) ** 2) / denom)


def r2_summary(score_lists):
    """Per-volume R2 values plus their mean and standard error.

    Undefined values stay None in the per-volume list and are skipped in
    the aggregate.
    """
    values = [r2_metric(s) for s in score_lists]
    defined = np.asarray([v for v in values if v is not None])
    if len(defined) == 0:
        return values, None, None
    mean = float(defined.mean())
    se = float(defined.std(ddof=1) / np.sqrt(len(defined))) if len(defined) > 1 else 0.0
    return values, mean, se
