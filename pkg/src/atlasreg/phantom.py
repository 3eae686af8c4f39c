"""Synthetic cardiac-like test volumes with ground-truth labels.

The phantom is a spherical LV cavity inside a myocardial shell with an
overlapping RV sphere trimmed to a crescent. Per-class intensities come from
a per-pseudo-modality table; the tables are deliberately not affinely related
to each other so that an intensity-relationship-agnostic similarity is needed
to register across modalities. All randomness is driven by the explicit seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .transforms import BSplineTransform, dense_displacement
from .volume import LabelVolume, Volume

# class intensity tables per pseudo-modality: {class id: mean intensity}
DEFAULT_INTENSITIES = {
    "lge": {0: 15.0, 1: 85.0, 2: 40.0, 3: 75.0},
    "bssfp": {0: 70.0, 1: 25.0, 2: 50.0, 3: 30.0},
    "t2": {0: 20.0, 1: 65.0, 2: 90.0, 3: 60.0},
}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lv_center: tuple[float, float, float] | None = None  # mm; None = volume center
    lv_radius: float = 10.0          # mm, cavity
    myo_thickness: float = 6.0       # mm, shell around the cavity
    rv_offset: tuple[float, float, float] = (18.0, 6.0, 0.0)  # mm from LV center
    rv_radius: float = 9.0           # mm
    modality: str = "lge"
    intensities: dict = field(default_factory=lambda: DEFAULT_INTENSITIES)
    noise_sigma: float = 2.0
    texture_amplitude: float = 0.0   # smooth tissue-like intensity variation
    seed: int = 0

    def __post_init__(self):
        if self.lv_radius <= 0 or self.myo_thickness <= 0 or self.rv_radius <= 0:
            raise InvalidInputError("phantom radii and thickness must be positive")
        if self.modality not in self.intensities:
            raise InvalidInputError(f"no intensity table for modality {self.modality!r}")

    def center(self) -> np.ndarray:
        if self.lv_center is not None:
            return np.asarray(self.lv_center, dtype=np.float64)
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing) / 2.0

    def validate_margin(self, margin_voxels: float = 4.0):
        """Structures must fit inside the volume with the given voxel margin."""
        c = self.center()
        rv_c = c + np.asarray(self.rv_offset)
        extent = (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        margin = margin_voxels * np.asarray(self.spacing)
        r_out = self.lv_radius + self.myo_thickness
        for center, radius in ((c, r_out), (rv_c, self.rv_radius)):
            if np.any(center - radius < margin) or np.any(center + radius > extent - margin):
                raise InvalidInputError(
                    "phantom structures do not fit inside the volume with a 4-voxel margin"
                )


def scaled_spec(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0), **kwargs) -> PhantomSpec:
    """Default phantom geometry scaled to fit an arbitrary volume extent.

    The farthest structure reach from the LV center is 27 mm at the default
    64 mm extent; the scale keeps that reach inside the 4-voxel margin.
    """
    half = min((n - 1) * s for n, s in zip(dims, spacing)) / 2.0
    margin = 4.0 * max(spacing)
    k = (half - margin) / 28.0
    if k <= 0:
        raise InvalidInputError("volume too small for a phantom with a 4-voxel margin")
    return PhantomSpec(
        dims=tuple(dims), spacing=tuple(spacing),
        lv_radius=10.0 * k, myo_thickness=6.0 * k,
        rv_offset=(18.0 * k, 6.0 * k, 0.0), rv_radius=9.0 * k,
        **kwargs,
    )


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Render the phantom image and its ground-truth labels."""
    spec.validate_margin()
    nx, ny, nz = spec.dims
    sp = np.asarray(spec.spacing)
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    pos = np.stack([ii, jj, kk], axis=-1) * sp  # mm, identity direction

    c = spec.center()
    d_lv = np.sqrt(((pos - c) ** 2).sum(axis=-1))
    d_rv = np.sqrt(((pos - (c + np.asarray(spec.rv_offset))) ** 2).sum(axis=-1))

    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[d_rv < spec.rv_radius] = 3
    shell = (d_lv >= spec.lv_radius) & (d_lv < spec.lv_radius + spec.myo_thickness)
    labels[shell] = 2                       # myocardium trims the RV overlap
    labels[d_lv < spec.lv_radius] = 1

    table = spec.intensities[spec.modality]
    data = np.zeros(spec.dims, dtype=np.float64)
    for cls, value in table.items():
        data[labels == cls] = value
    rng = np.random.default_rng(spec.seed)
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    if spec.texture_amplitude > 0:
        from scipy.ndimage import gaussian_filter

        raw = rng.normal(size=spec.dims)
        smooth = gaussian_filter(raw, sigma=4.0, mode="nearest")
        smooth /= max(smooth.std(), 1e-12)
        data = data + spec.texture_amplitude * smooth

    vol = Volume(data.astype(np.float32), spec.spacing)
    return vol, LabelVolume(labels, spec.spacing)


def analytic_class_volumes(spec: PhantomSpec) -> dict[int, float]:
    """Expected class volumes in mm^3 from sphere/shell/lens formulas."""
    r_in = spec.lv_radius
    r_out = spec.lv_radius + spec.myo_thickness
    r_rv = spec.rv_radius
    d = float(np.linalg.norm(spec.rv_offset))

    def sphere(r):
        return 4.0 / 3.0 * np.pi * r ** 3

    def lens(r1, r2, dist):
        # intersection volume of two spheres
        if dist >= r1 + r2:
            return 0.0
        if dist <= abs(r1 - r2):
            return sphere(min(r1, r2))
        return (np.pi * (r1 + r2 - dist) ** 2
                * (dist ** 2 + 2 * dist * (r1 + r2) - 3 * (r1 - r2) ** 2)
                / (12 * dist))

    # RV keeps only the part of its sphere outside the outer myo surface
    return {
        1: sphere(r_in),
        2: sphere(r_out) - sphere(r_in),
        3: sphere(r_rv) - lens(r_rv, r_out, d),
    }


def random_smooth_deformation(geometry, max_disp_mm: float, grid_spacing,
                              seed: int) -> BSplineTransform:
    """Random B-spline field whose dense maximum norm equals max_disp_mm.

    Control displacements are drawn uniformly in [-max, max]^3 and the whole
    coefficient set is rescaled so the dense field's maximum voxel norm lands
    exactly on max_disp_mm (deform is linear in the coefficients).
    """
    if max_disp_mm < 0:
        raise InvalidInputError("max_disp_mm must be non-negative")
    t = BSplineTransform.zeros(geometry, grid_spacing)
    if max_disp_mm == 0:
        return t
    rng = np.random.default_rng(seed)
    coef = rng.uniform(-max_disp_mm, max_disp_mm, size=t.coefficients.shape)
    t = t.with_coefficients(coef)
    dense = dense_displacement(t)
    peak = float(np.sqrt((dense ** 2).sum(axis=-1)).max())
    if peak == 0:
        return t
    return t.with_coefficients(coef * (max_disp_mm / peak))
