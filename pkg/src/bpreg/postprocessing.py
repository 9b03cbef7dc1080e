"""From raw per-slice scores to cleaned score curves and model characteristics.

Cleaning steps: (1) drop empty-slice predictions, (2) transform onto the
common 0..100 scale, (3) Gaussian-smooth with sigma = 10 mm in physical
space, (4) cut leading/trailing tails outside [0, 100] whose local slopes
fall outside the model's typical tangential-slope band.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyCurveError
from .evaluation import SliceScoreReferenceTable, build_reference_table, normalize_scores
from .model import SliceScoreModel, empty_slice_score, predict_scores

SMOOTHING_SIGMA_MM = 10.0
TANGENTIAL_QUANTILES = (0.005, 0.995)

# Inference may not reproduce the empty-slice score bitwise.
S0_REL_TOL = 1e-4
S0_ABS_TOL = 1e-6


@dataclass
class ModelCharacteristics:
    """Per-model constants required by every application pipeline."""

    empty_slice_score: float
    table: SliceScoreReferenceTable
    slope_mean: float                  # mean score-curve slope, per mm
    slope_std: float
    tangential_slope_mean: float
    tangential_slope_bounds: tuple    # (0.5%, 99.5%) quantiles of training tangential slopes

    def to_dict(self):
        return {
            "empty_slice_score": self.empty_slice_score,
            "slope_mean": self.slope_mean,
            "slope_std": self.slope_std,
            "tangential_slope_mean": self.tangential_slope_mean,
            "tangential_slope_bounds": list(self.tangential_slope_bounds),
            "reference_table": self.table.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            empty_slice_score=float(d["empty_slice_score"]),
            table=SliceScoreReferenceTable.from_dict(d["reference_table"]),
            slope_mean=float(d["slope_mean"]),
            slope_std=float(d["slope_std"]),
            tangential_slope_mean=float(d["tangential_slope_mean"]),
            tangential_slope_bounds=tuple(d["tangential_slope_bounds"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class CleanedScoreCurve:
    """Transformed, smoothed score curve with its link to the source volume."""

    scores: np.ndarray            # cleaned (smoothed) scores, common scale
    z: np.ndarray                 # physical height of each kept slice, mm
    kept_indices: np.ndarray      # original slice indices, strictly increasing
    z_spacing: float
    removed_tails: list = field(default_factory=list)   # (start, stop) original index ranges
    unsmoothed_scores: np.ndarray = None                # transformed, pre-smoothing

    def __len__(self):
        return len(self.scores)

    @property
    def z_extent_mm(self):
        return float(self.z[-1] - self.z[0]) if len(self.z) > 1 else 0.0


def gaussian_smooth(values, z_spacing_mm, sigma_mm=SMOOTHING_SIGMA_MM):
    """Discrete Gaussian convolution in physical space, reflect-padded.

    Kernel radius is ceil(4 sigma / z_spacing) and the truncated kernel is
    renormalized to unit sum, so linear inputs pass through unchanged away
    from the boundaries.
    """
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2 or sigma_mm <= 0:
        return values.copy()
    radius = math.ceil(4.0 * sigma_mm / z_spacing_mm)
    x = np.arange(-radius, radius + 1, dtype=np.float64) * z_spacing_mm
    kernel = np.exp(-0.5 * (x / sigma_mm) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(values, radius, mode="reflect")
    return np.convolve(padded, kernel, mode="valid")


def _filter_empty(raw_scores, s0):
    raw = np.asarray(raw_scores, dtype=np.float64)
    tol = S0_REL_TOL * abs(s0) + S0_ABS_TOL
    keep = np.abs(raw - s0) > tol
    return raw[keep], np.nonzero(keep)[0]


def _tangential_slopes(scores, heights):
    return np.diff(scores) / np.diff(heights)


def _remove_tails(scores, heights, bounds):
    """Trim out-of-range tails with atypical local slopes.

    Walking inward from each end: a slice is cut while its score is still
    below 0 (leading) or above 100 (trailing) and the local tangential
    slope lies outside ``bounds``; the first in-band slope stops the walk.
    At least two slices always survive.
    """
    lo, hi = bounds
    n = len(scores)
    lead = 0
    while lead < n - 2 and scores[lead] < 0.0:
        slope = (scores[lead + 1] - scores[lead]) / (heights[lead + 1] - heights[lead])
        if lo <= slope <= hi:
            break
        lead += 1
    trail = n
    while trail > lead + 2 and scores[trail - 1] > 100.0:
        slope = (scores[trail - 1] - scores[trail - 2]) / (heights[trail - 1] - heights[trail - 2])
        if lo <= slope <= hi:
            break
        trail -= 1
    return lead, trail


def _clean(raw_scores, z_spacing, s0, table, bounds=None, sigma_mm=SMOOTHING_SIGMA_MM):
    """Shared cleaning path; tail removal only when bounds are given."""
    filtered, kept = _filter_empty(raw_scores, s0)
    if len(filtered) < 2:
        raise EmptyCurveError(
            f"only {len(filtered)} slice(s) survive the empty-slice filter"
        )
    transformed = normalize_scores(filtered, table)
    heights = kept.astype(np.float64) * z_spacing
    smoothed = gaussian_smooth(transformed, z_spacing, sigma_mm)

    removed = []
    lead, trail = 0, len(smoothed)
    if bounds is not None:
        lead, trail = _remove_tails(smoothed, heights, bounds)
        if lead > 0:
            removed.append((int(kept[0]), int(kept[lead])))
        if trail < len(smoothed):
            removed.append((int(kept[trail - 1]) + 1, int(kept[-1]) + 1))

    sl = slice(lead, trail)
    return CleanedScoreCurve(
        scores=smoothed[sl],
        z=heights[sl],
        kept_indices=kept[sl],
        z_spacing=float(z_spacing),
        removed_tails=removed,
        unsmoothed_scores=transformed[sl],
    )


def cleaned_slice_scores(raw_scores, z_spacing, chars: ModelCharacteristics) -> CleanedScoreCurve:
    """Run all four cleaning steps on one volume's raw scores."""
    return _clean(
        raw_scores,
        z_spacing,
        chars.empty_slice_score,
        chars.table,
        bounds=chars.tangential_slope_bounds,
    )


@dataclass
class SlopeFit:
    slope_per_mm: float       # slope of the score curve against height
    slope_per_index: float    # slope against slice index
    intercept: float


def fit_score_slope(curve: CleanedScoreCurve) -> SlopeFit:
    """Ordinary least squares line through (height, score)."""
    if len(curve) < 2:
        raise ValueError("slope fit needs at least 2 points")
    z = np.asarray(curve.z, dtype=np.float64)
    if np.ptp(z) == 0:
        raise ValueError("slope fit needs distinct z positions")
    slope, intercept = np.polyfit(z, np.asarray(curve.scores, dtype=np.float64), 1)
    return SlopeFit(
        slope_per_mm=float(slope),
        slope_per_index=float(slope * curve.z_spacing),
        intercept=float(intercept),
    )


def compute_model_characteristics(
    model,
    volumes,
    annotations,
    slope_volumes=None,
    empty_score=None,
) -> ModelCharacteristics:
    """Derive the per-model constants from a pool of volumes.

    The reference table is built from the annotated pool ``volumes``;
    curve and tangential slopes are collected over ``slope_volumes``
    (defaulting to the same pool) after cleaning steps 1-3, without tail
    removal.  Volumes with fewer than two usable slices are skipped.

    ``model`` may be a {volume_id: per-slice scores} mapping instead of a
    SliceScoreModel; ``empty_score`` must be given explicitly then.
    """
    if isinstance(model, SliceScoreModel):
        s0 = empty_slice_score(model) if empty_score is None else empty_score
    elif empty_score is None:
        raise ValueError("precomputed scores need an explicit empty_score")
    else:
        s0 = empty_score
    table = build_reference_table(model, volumes, annotations)
    slope_volumes = volumes if slope_volumes is None else slope_volumes

    slopes, tangentials = [], []
    for volume in slope_volumes:
        raw = predict_scores(model, volume) if isinstance(model, SliceScoreModel) else model[volume.source_id]
        try:
            curve = _clean(raw, volume.z_spacing, s0, table, bounds=None)
        except EmptyCurveError:
            warnings.warn(f"{volume.source_id}: too few usable slices, skipped", RuntimeWarning)
            continue
        slopes.append(fit_score_slope(curve).slope_per_mm)
        tangentials.extend(_tangential_slopes(curve.scores, curve.z))

    if not slopes:
        raise ConfigError("no volume yielded a usable score curve")
    slopes = np.asarray(slopes)
    tangentials = np.asarray(tangentials)
    lo, hi = np.quantile(tangentials, TANGENTIAL_QUANTILES, method="linear")
    return ModelCharacteristics(
        empty_slice_score=float(s0),
        table=table,
        slope_mean=float(slopes.mean()),
        slope_std=float(slopes.std(ddof=1)) if len(slopes) > 1 else 0.0,
        tangential_slope_mean=float(tangentials.mean()),
        tangential_slope_bounds=(float(lo), float(hi)),
    )
