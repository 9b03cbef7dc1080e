"""Procedural phantom volumes with known anatomical-coordinate ground truth.

Each phantom encodes a dimensionless coordinate u (0 = pelvis-start
analog, 100 = eyes-end analog, values outside that range legal) into
slice appearance: a centered tissue disc whose radius grows linearly
with u, concentric rings whose wavelength shrinks with u, and an
off-center blob.  Nuisance variation (global intensity offset, blob
angle, noise) differs per volume, so only augmentation-trained models
map equal u to equal scores.

u is affine in physical height, so a perfect model produces exactly
linear score curves; the generator's analytic functions double as
oracles for slope, R2 and sanity-check tests.
"""

from dataclasses import dataclass, replace

import numpy as np

from .volumes import RawVolume

# Height of the u in [0, 100] span for a scale-1.0 phantom.  The slope of
# a perfect transformed score curve is then 100 / (900 * scale) per mm.
REFERENCE_HEIGHT_MM = 900.0
U_SPAN = 100.0

# Latents of the twelve evaluation-landmark analogs are evenly spaced in
# [0, 100]; the extra landmarks needed by the default body-part
# boundaries sit at fixed interpolated positions between them.
_EVAL_LATENTS = {
    "pelvis-start": 0.0,
    "femur-end": 100.0 / 11 * 1,
    "L5": 100.0 / 11 * 2,
    "L3": 100.0 / 11 * 3,
    "L1": 100.0 / 11 * 4,
    "Th11": 100.0 / 11 * 5,
    "Th8": 100.0 / 11 * 6,
    "Th5": 100.0 / 11 * 7,
    "Th2": 100.0 / 11 * 8,
    "C6": 100.0 / 11 * 9,
    "C1": 100.0 / 11 * 10,
    "eyes-end": 100.0,
}
_EXTRA_LATENTS = {
    "pelvis-end": 22.5,   # between L5 and L3
    "Th12": 41.0,         # between L1 and Th11
    "Th3": 69.7,          # between Th5 and Th2
    "Th1": 76.5,          # between Th2 and C6
    "C5": 83.5,           # between C6 and C1
    "C4": 85.5,
    "C2": 89.4,
}
LANDMARK_LATENTS = {**_EVAL_LATENTS, **_EXTRA_LATENTS}

# Appearance model, all in physical mm so it survives resampling.
_TISSUE_HU = 60.0
_BLOB_HU = 400.0
_RING_AMPLITUDE_HU = 150.0
_BACKGROUND_HU = -1000.0


def disc_radius_mm(u):
    """Radius of the body disc; strictly increasing in u."""
    return 25.0 + 0.75 * np.asarray(u, dtype=np.float64)


def ring_wavelength_mm(u):
    """Ring spacing inside the disc; strictly decreasing in u."""
    return 80.0 - 0.5 * np.asarray(u, dtype=np.float64)


@dataclass
class PhantomSpec:
    u_start: float = 0.0
    u_end: float = 100.0
    scale: float = 1.0              # body-height factor
    z_spacing: float = 2.5          # mm
    noise_std_hu: float = 20.0
    seed: int = 0
    n_xy: int = 64                  # pixels per side
    pixel_spacing_mm: float = 3.5
    volume_id: str = ""

    def validate(self):
        if self.u_end <= self.u_start:
            raise ValueError("u_end must exceed u_start")
        if self.scale <= 0 or self.z_spacing <= 0 or self.pixel_spacing_mm <= 0:
            raise ValueError("scale and spacings must be positive")

    @property
    def u_per_mm(self):
        return U_SPAN / (REFERENCE_HEIGHT_MM * self.scale)

    @property
    def analytic_slope_per_mm(self):
        """Slope of a perfect transformed score curve against height."""
        return self.u_per_mm

    @property
    def n_slices(self):
        du = self.z_spacing * self.u_per_mm
        return int(round((self.u_end - self.u_start) / du)) + 1

    def u_of_slice(self, index):
        return self.u_start + np.asarray(index) * self.z_spacing * self.u_per_mm


def _render_slice(u, spec, intensity_offset, blob_angle, rng):
    n = spec.n_xy
    coords = (np.arange(n) - (n - 1) / 2.0) * spec.pixel_spacing_mm
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    rho = np.hypot(yy, xx)

    img = np.full((n, n), _BACKGROUND_HU)
    radius = float(disc_radius_mm(u))
    body = rho <= radius
    rings = _RING_AMPLITUDE_HU * np.cos(2.0 * np.pi * rho / float(ring_wavelength_mm(u)))
    img[body] = _TISSUE_HU + intensity_offset + rings[body]

    blob_r = 0.25 * radius
    bx = 0.45 * radius * np.cos(blob_angle)
    by = 0.45 * radius * np.sin(blob_angle)
    blob = np.hypot(yy - by, xx - bx) <= blob_r
    img[blob] = _BLOB_HU + intensity_offset

    if spec.noise_std_hu > 0:
        img = img + rng.normal(0.0, spec.noise_std_hu, size=img.shape)
    return img


def generate_phantom_volume(spec: PhantomSpec):
    """Render one phantom; returns (RawVolume, landmark annotations).

    Landmarks are annotated at the slice whose u is closest to the
    landmark latent, for latents inside the covered u range.
    """
    spec.validate()
    n_slices = spec.n_slices
    if n_slices < 2:
        raise ValueError(f"{spec.volume_id or 'phantom'}: spec yields fewer than 2 slices")

    rng = np.random.default_rng(spec.seed)
    intensity_offset = rng.uniform(-30.0, 30.0)
    blob_angle = rng.uniform(0.0, 2.0 * np.pi)

    us = spec.u_of_slice(np.arange(n_slices))
    slices = np.stack([_render_slice(u, spec, intensity_offset, blob_angle, rng) for u in us])
    voxels = np.clip(np.rint(slices), -1024, 3071).astype(np.int16)
    # (nz, ny, nx) -> (nx, ny, nz)
    volume = RawVolume(
        voxels=np.ascontiguousarray(np.transpose(voxels, (2, 1, 0))),
        spacing=(spec.pixel_spacing_mm, spec.pixel_spacing_mm, spec.z_spacing),
        source_id=spec.volume_id or f"phantom-seed{spec.seed}",
    )

    du = us[1] - us[0]
    annotations = {}
    for name, latent in LANDMARK_LATENTS.items():
        if us[0] <= latent <= us[-1]:
            annotations[name] = int(np.clip(round((latent - us[0]) / du), 0, n_slices - 1))
    return volume, annotations


@dataclass
class PhantomDataset:
    train: list   # (RawVolume, annotations) pairs
    val: list
    test: list
    specs: dict   # split name -> list of PhantomSpec

    @property
    def annotations(self):
        merged = {}
        for split in (self.train, self.val, self.test):
            for vol, ann in split:
                merged[vol.source_id] = ann
        return merged


def _draw_spec(base, rng, seed, split, index, full_range):
    scale = rng.uniform(0.8, 1.2)
    z_spacing = rng.uniform(1.0, 4.0)
    if full_range:
        u_start = rng.uniform(-5.0, 0.0)
        u_end = rng.uniform(100.0, 105.0)
    else:
        u_start = rng.uniform(-5.0, 78.0)
        u_end = u_start + rng.uniform(18.0, 26.0)
    return replace(
        base,
        u_start=float(u_start),
        u_end=float(u_end),
        scale=float(scale),
        z_spacing=float(z_spacing),
        seed=int(seed),
        volume_id=f"{split}-{index:03d}",
    )


def generate_phantom_dataset(n_train, n_val, n_test, base_spec=None, seed=0) -> PhantomDataset:
    """Randomized phantom corpus with disjoint per-volume seeds.

    Training volumes mix full-body and partial scans (one in eight covers
    the whole u range so reference tables are constructible from training
    annotations alone); every validation volume covers the full range.
    Scales vary by +-20%, z-spacings uniformly in [1, 4] mm.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("need at least one volume per split")
    base = base_spec or PhantomSpec()
    rng = np.random.default_rng(seed)
    used_seeds = set()

    def next_seed():
        while True:
            s = int(rng.integers(0, 2**31 - 1))
            if s not in used_seeds:
                used_seeds.add(s)
                return s

    specs = {"train": [], "val": [], "test": []}
    for i in range(n_train):
        specs["train"].append(_draw_spec(base, rng, next_seed(), "train", i, full_range=(i % 8 == 0)))
    for i in range(n_val):
        specs["val"].append(_draw_spec(base, rng, next_seed(), "val", i, full_range=True))
    for i in range(n_test):
        specs["test"].append(_draw_spec(base, rng, next_seed(), "test", i, full_range=(i % 2 == 0)))

    built = {name: [generate_phantom_volume(s) for s in split] for name, split in specs.items()}
    return PhantomDataset(train=built["train"], val=built["val"], test=built["test"], specs=specs)
