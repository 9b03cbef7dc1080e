"""Clinical-style applications of the score model.

Three consumers of cleaned slice-score curves: the body-part-examined
dictionary/tag, known-region cropping of volumes or prediction masks,
and data sanity checks on z ordering and z spacing.  build_metadata ties
them together into one JSON record per volume.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyRegionError
from .evaluation import SliceScoreReferenceTable
from .landmarks import FIVE_CLASSES
from .model import SliceScoreModel, predict_scores
from .postprocessing import (
    SMOOTHING_SIGMA_MM,
    CleanedScoreCurve,
    ModelCharacteristics,
    cleaned_slice_scores,
    fit_score_slope,
)
from .volumes import PreprocessedVolume

DEFAULT_THETA = 0.28
SMALL_Z_RANGE_MM = 100.0

# Region -> (start landmark, end landmark); None is an open end.  Regions
# deliberately overlap (abdomen/chest share the lower thorax).
DEFAULT_REGIONS = {
    "legs": (None, "pelvis-start"),
    "pelvis": ("pelvis-start", "pelvis-end"),
    "abdomen": ("L5", "Th8"),
    "chest": ("Th12", "Th1"),
    "neck-and-shoulder": ("Th3", "C2"),
    "head": ("C5", None),
}

# Tag -> (landmark list, minimum count of bracketed landmarks).  These
# lists are configuration with sensible defaults, not a fixed contract.
DEFAULT_TAG_LANDMARKS = {
    "PELVIS": (["pelvis-start", "femur-end", "pelvis-end"], 2),
    "ABDOMEN": (["L5", "L3", "L1"], 2),
    "CHEST": (["Th12", "Th8", "Th5", "Th1"], 3),
    "NECK": (["C6", "C4", "C2"], 2),
    "HEAD": (["C1", "eyes-end"], 2),
}

# Descending anatomical order for tag concatenation.
TAG_ORDER = ["HEAD", "NECK", "CHEST", "ABDOMEN", "PELVIS"]


@dataclass
class BodyPartBoundaries:
    """Region and tag definitions resolved against a reference table."""

    regions: dict = field(default_factory=lambda: dict(DEFAULT_REGIONS))
    tag_landmarks: dict = field(default_factory=lambda: dict(DEFAULT_TAG_LANDMARKS))
    # (class name, start landmark, end landmark) for the short-scan vote,
    # anatomically ascending.
    slice_classes: list = field(default_factory=lambda: list(FIVE_CLASSES))
    small_z_range_mm: float = SMALL_Z_RANGE_MM

    def to_dict(self):
        return {
            "regions": {k: list(v) for k, v in self.regions.items()},
            "tag_landmarks": {k: [list(v[0]), v[1]] for k, v in self.tag_landmarks.items()},
            "slice_classes": [list(c) for c in self.slice_classes],
            "small_z_range_mm": self.small_z_range_mm,
        }

    @classmethod
    def from_dict(cls, d):
        out = cls()
        if "regions" in d:
            out.regions = {k: tuple(v) for k, v in d["regions"].items()}
        if "tag_landmarks" in d:
            out.tag_landmarks = {k: (list(v[0]), int(v[1])) for k, v in d["tag_landmarks"].items()}
        if "slice_classes" in d:
            out.slice_classes = [tuple(c) for c in d["slice_classes"]]
        if "small_z_range_mm" in d:
            out.small_z_range_mm = float(d["small_z_range_mm"])
        return out

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SanityReport:
    reverse_z_ordering: bool
    valid_z_spacing: bool
    observed_slope: float      # per mm
    expected_slope: float      # per mm
    slope_ratio: float
    relative_error: float
    expected_z_spacing: float  # mm
    threshold: float


@dataclass
class KnownRegion:
    s_min: float
    s_max: float
    provenance: str = "manual"

    def __post_init__(self):
        if not self.s_min < self.s_max:
            raise ConfigError(f"known region needs s_min < s_max, got [{self.s_min}, {self.s_max}]")


@dataclass
class CropReport:
    removed_ranges: list            # (start, stop) slice index ranges
    n_removed: int
    intercepted_positives: bool     # mask mode: nonzero content was removed


def body_part_examined_dict(curve: CleanedScoreCurve, table: SliceScoreReferenceTable, boundaries=None):
    """Original slice indices per body region, strictly inside each
    region's expected score interval.  Regions whose boundary landmarks
    are not in the table come out empty."""
    boundaries = boundaries or BodyPartBoundaries()
    scores = np.asarray(curve.scores)
    indices = np.asarray(curve.kept_indices)
    out = {}
    for region, (start, end) in boundaries.regions.items():
        if (start is not None and start not in table) or (end is not None and end not in table):
            out[region] = []
            continue
        lo = -np.inf if start is None else table.transformed_mean(start)
        hi = np.inf if end is None else table.transformed_mean(end)
        inside = (scores > lo) & (scores < hi)
        out[region] = sorted(int(i) for i in indices[inside])
    return out


def _vote_small_range(scores, table, boundaries):
    """Majority per-slice class; ties break toward the lower class."""
    class_names = [c[0] for c in boundaries.slice_classes]
    bounds_names = [boundaries.slice_classes[0][1]] + [c[2] for c in boundaries.slice_classes]
    if any(n not in table for n in bounds_names):
        return None
    bounds = [table.transformed_mean(n) for n in bounds_names]
    counts = np.zeros(len(class_names), dtype=int)
    for s in scores:
        for ci in range(len(class_names)):
            if bounds[ci] <= s < bounds[ci + 1]:
                counts[ci] += 1
                break
    if counts.sum() == 0:
        return None
    return class_names[int(np.argmax(counts))]  # argmax takes the first (lowest) on ties


def body_part_examined_tag(
    curve: CleanedScoreCurve,
    z_range_mm: float,
    sanity: SanityReport,
    table: SliceScoreReferenceTable,
    boundaries=None,
) -> str:
    """Single body-part tag per volume, NONE when the scan looks invalid."""
    boundaries = boundaries or BodyPartBoundaries()
    if not sanity.valid_z_spacing or len(curve) == 0:
        return "NONE"
    scores = np.asarray(curve.scores)

    if z_range_mm < boundaries.small_z_range_mm:
        voted = _vote_small_range(scores, table, boundaries)
        return voted.upper() if voted else "NONE"

    s_lo, s_hi = scores.min(), scores.max()
    visible = []
    for tag, (names, min_count) in boundaries.tag_landmarks.items():
        bracketed = sum(
            1 for n in names if n in table and s_lo < table.transformed_mean(n) < s_hi
        )
        if bracketed >= min_count:
            visible.append(tag)
    ordered = [t for t in TAG_ORDER if t in visible]
    return "-".join(ordered) if ordered else "NONE"


def estimate_known_region(curves, q_min=0.25, q_max=0.75) -> KnownRegion:
    """Data-driven known region from a downstream model's training curves.

    s_min is the q_min quantile of per-volume score minima, s_max the
    q_max quantile of per-volume maxima (linear interpolation between
    order statistics).
    """
    if not curves:
        raise ConfigError("need at least one curve")
    if not 0.0 <= q_min < q_max <= 1.0:
        raise ConfigError("quantiles must satisfy 0 <= q_min < q_max <= 1")
    mins = [float(np.min(c.scores)) for c in curves]
    maxs = [float(np.max(c.scores)) for c in curves]
    s_min = float(np.quantile(mins, q_min, method="linear"))
    s_max = float(np.quantile(maxs, q_max, method="linear"))
    if s_min >= s_max:
        raise ConfigError(f"degenerate training pool: s_min={s_min} >= s_max={s_max}")
    return KnownRegion(s_min=s_min, s_max=s_max, provenance=f"data-driven(q_min={q_min}, q_max={q_max})")


def _ranges_from_mask(removed_mask):
    ranges = []
    start = None
    for i, r in enumerate(removed_mask):
        if r and start is None:
            start = i
        elif not r and start is not None:
            ranges.append((start, i))
            start = None
    if start is not None:
        ranges.append((start, len(removed_mask)))
    return ranges


def crop_to_known_region(obj, curve: CleanedScoreCurve, region: KnownRegion, mode="crop"):
    """Remove or zero out slices whose score falls outside the known region.

    ``obj`` is a (n_slices, ...) array aligned with the curve's source
    volume.  mode='crop' drops the slices, mode='zero' blanks them (the
    post-processing form for prediction masks).  Slices absent from the
    cleaned curve have no usable score and count as outside.  The report
    lists removed index ranges and whether nonzero mask content was
    removed.
    """
    if mode not in ("crop", "zero"):
        raise ValueError("mode must be 'crop' or 'zero'")
    if isinstance(obj, PreprocessedVolume):
        data = obj.slices
    else:
        data = np.asarray(obj)
    n = data.shape[0]

    score_by_index = dict(zip((int(i) for i in curve.kept_indices), curve.scores))
    outside = np.ones(n, dtype=bool)
    for i in range(n):
        s = score_by_index.get(i)
        if s is not None and region.s_min <= s <= region.s_max:
            outside[i] = False

    removed_ranges = _ranges_from_mask(outside)
    intercepted = bool(np.any(data[outside] != 0))
    report = CropReport(
        removed_ranges=removed_ranges,
        n_removed=int(outside.sum()),
        intercepted_positives=intercepted,
    )
    if outside.all():
        raise EmptyRegionError("no slice lies inside the known region", report=report)

    if mode == "crop":
        return data[~outside], report
    blanked = data.copy()
    blanked[outside] = 0
    return blanked, report


def data_sanity_check(curve: CleanedScoreCurve, z_spacing, chars: ModelCharacteristics, theta=DEFAULT_THETA) -> SanityReport:
    """Check z ordering (slope sign) and z spacing (slope ratio vs theta)."""
    if chars.slope_mean == 0:
        raise ConfigError("model characteristics carry a zero mean slope")
    fit = fit_score_slope(curve)
    ratio = fit.slope_per_mm / chars.slope_mean
    rel_error = abs(1.0 - abs(ratio))
    return SanityReport(
        reverse_z_ordering=bool(fit.slope_per_mm < 0),
        valid_z_spacing=bool(rel_error < theta),
        observed_slope=fit.slope_per_mm,
        expected_slope=chars.slope_mean,
        slope_ratio=float(ratio),
        relative_error=float(rel_error),
        expected_z_spacing=float(fit.slope_per_index / chars.slope_mean),
        threshold=float(theta),
    )


METADATA_KEYS = [
    "cleaned slice scores",
    "unprocessed slice scores",
    "z",
    "body part examined",
    "body part examined tag",
    "look-up table",
    "reverse z-ordering",
    "valid z-spacing",
    "expected slope",
    "observed slope",
    "slope ratio",
    "expected z-spacing",
    "z-spacing",
    "settings",
]


def build_metadata(
    volume: PreprocessedVolume,
    model: SliceScoreModel,
    chars: ModelCharacteristics,
    theta=DEFAULT_THETA,
    boundaries=None,
) -> dict:
    """Predict, clean and analyze one volume into the JSON metadata record.

    A failed sanity check is a value in the record, never an exception.
    The record is a plain dict with exactly the documented keys; floats
    serialize with shortest round-trip formatting and sorted keys, so the
    same volume always produces byte-identical JSON.
    """
    boundaries = boundaries or BodyPartBoundaries()
    raw = predict_scores(model, volume)
    curve = cleaned_slice_scores(raw, volume.z_spacing, chars)
    sanity = data_sanity_check(curve, volume.z_spacing, chars, theta=theta)
    bpe_dict = body_part_examined_dict(curve, chars.table, boundaries)
    tag = body_part_examined_tag(curve, volume.z_extent_mm, sanity, chars.table, boundaries)

    record = {
        "cleaned slice scores": [float(v) for v in curve.scores],
        "unprocessed slice scores": [float(v) for v in curve.unsmoothed_scores],
        "z": [float(v) for v in curve.z],
        "body part examined": bpe_dict,
        "body part examined tag": tag,
        "look-up table": chars.table.transformed_dict(),
        "reverse z-ordering": sanity.reverse_z_ordering,
        "valid z-spacing": sanity.valid_z_spacing,
        "expected slope": sanity.expected_slope,
        "observed slope": sanity.observed_slope,
        "slope ratio": sanity.slope_ratio,
        "expected z-spacing": sanity.expected_z_spacing,
        "z-spacing": float(volume.z_spacing),
        "settings": {
            "theta": float(theta),
            "smoothing sigma mm": float(SMOOTHING_SIGMA_MM),
            "empty slice score": chars.empty_slice_score,
            "tangential slope bounds": list(chars.tangential_slope_bounds),
            "boundaries": boundaries.to_dict(),
            "source": volume.source_id,
        },
    }
    assert sorted(record) == sorted(METADATA_KEYS)
    return record


def metadata_to_json(record) -> str:
    return json.dumps(record, sort_keys=True, indent=1)
