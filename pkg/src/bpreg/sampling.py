"""Self-supervision items: m equidistant augmented slices per volume.

The physical distance between consecutive sampled slices is drawn in mm
and converted to an index step through the volume's z-spacing, so the
sampling is independent of how finely a study happens to be sliced.
"""

from dataclasses import dataclass

import numpy as np

from .augmentation import AugmentationConfig, augment_slice
from .errors import SamplingError
from .volumes import PreprocessedVolume

MAX_DELTA_H_RETRIES = 100


@dataclass
class TrainingItem:
    slices: np.ndarray      # (m, 128, 128) float32, independently augmented
    delta_h: float          # realized physical step k * z_spacing, in mm
    k: int                  # index step between consecutive slices
    volume_id: str


def delta_h_to_index_step(delta_h_mm: float, z_spacing_mm: float) -> int:
    """Convert a physical slice distance to an index step, floored at 1.

    A zero step would sample the same slice repeatedly, which the order
    losses cannot rank, so the step never drops below one.
    """
    if delta_h_mm <= 0 or z_spacing_mm <= 0:
        raise ValueError("delta_h and z_spacing must be positive")
    return max(1, int(round(delta_h_mm / z_spacing_mm)))


def _max_feasible_step(n_slices: int, m: int) -> int:
    return (n_slices - 1) // (m - 1)


def sample_training_item(
    volume: PreprocessedVolume,
    m: int,
    delta_h_range,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
    index_step_range=None,
) -> TrainingItem:
    """Sample one training item from a volume.

    delta_h ~ U[min, max] is redrawn until the resulting index ladder
    j, j+k, ..., j+(m-1)k fits the volume; after 100 failed draws the
    distance collapses to the feasible step closest to the range minimum.
    The recorded delta_h is the realized k * z_spacing.

    ``index_step_range`` switches to direct index-step sampling
    k ~ U{lo..hi} (baseline compatibility); delta_h is then derived.
    """
    if m < 2:
        raise ValueError("need m >= 2 slices per item")
    n = volume.n_slices
    if n < m:
        raise SamplingError(f"{volume.source_id}: {n} slices cannot host an m={m} item")
    k_max = _max_feasible_step(n, m)

    if index_step_range is not None:
        lo, hi = index_step_range
        hi_eff = min(hi, k_max)
        if hi_eff < lo:
            raise SamplingError(
                f"{volume.source_id}: no feasible index step in [{lo}, {hi}] for m={m}, {n} slices"
            )
        k = int(rng.integers(lo, hi_eff + 1))
    else:
        lo_mm, hi_mm = delta_h_range
        k = None
        for _ in range(MAX_DELTA_H_RETRIES):
            draw = rng.uniform(lo_mm, hi_mm)
            candidate = delta_h_to_index_step(draw, volume.z_spacing)
            if candidate <= k_max:
                k = candidate
                break
        if k is None:
            # shrink toward the range minimum
            k = min(delta_h_to_index_step(lo_mm, volume.z_spacing), k_max)
            if k < 1:
                raise SamplingError(
                    f"{volume.source_id}: no feasible slice distance in "
                    f"[{lo_mm}, {hi_mm}] mm for m={m}, {n} slices at z={volume.z_spacing} mm"
                )

    j = int(rng.integers(0, n - (m - 1) * k))
    indices = j + k * np.arange(m)
    slices = np.stack([augment_slice(volume.slices[i], cfg, rng) for i in indices])
    return TrainingItem(
        slices=slices,
        delta_h=float(k * volume.z_spacing),
        k=k,
        volume_id=volume.source_id,
    )
