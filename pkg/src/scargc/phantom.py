"""Synthetic LGE-like atrial phantoms and controlled segmentation error."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume3D


class PhantomError(ValueError):
    pass


class PerturbationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and appearance of one phantom.

    Intensities are in arbitrary units chosen to mimic LGE contrast: nulled
    (dark) myocardium, mid-grey blood pool, bright scar and enhanced vessel
    walls. ``scar_angle_deg`` is the (min, max) angular radius of each scar
    cap, measured in normalised ellipsoid coordinates. The outer
    ``scar_rim_fraction`` of each cap radius is a grey zone whose boost ramps
    linearly from ``scar_rim_floor`` times full strength at the edge.
    ``margin_mm`` keeps the coarsest default patch (corner 46.6 mm from its
    centre) inside the field of view, as a thorax-wide scan would.
    """

    semi_axes_mm: tuple[float, float, float] = (12.0, 10.0, 9.0)
    wall_thickness_mm: float = 2.0
    spacing_mm: float = 1.0
    margin_mm: float = 48.0
    scar_count: int = 3
    scar_angle_deg: tuple[float, float] = (22.0, 38.0)
    scar_boost: float = 0.65
    scar_rim_fraction: float = 0.5
    scar_rim_floor: float = 0.3
    scar_directions: tuple[tuple[float, float, float], ...] | None = None
    tube_count: int = 2
    tube_radius_mm: float = 4.0
    tube_gap_mm: tuple[float, float] = (2.0, 10.0)
    tube_intensity: float = 0.75
    blood_intensity: float = 0.45
    wall_intensity: float = 0.12
    tissue_intensity: float = 0.28
    blur_mm: float = 0.6
    noise_sd: float = 0.10
    seed: int = 0

    def validate(self):
        if len(self.semi_axes_mm) != 3 or min(self.semi_axes_mm) <= 0:
            raise PhantomError(f"semi axes must be positive: {self.semi_axes_mm}")
        if self.spacing_mm <= 0:
            raise PhantomError("spacing must be positive")
        if self.wall_thickness_mm < self.spacing_mm:
            raise PhantomError(
                f"wall thickness {self.wall_thickness_mm} mm is below one voxel ({self.spacing_mm} mm)")
        if self.scar_count < 0 or self.tube_count < 0:
            raise PhantomError("counts must be non-negative")
        lo, hi = self.scar_angle_deg
        if not 0 < lo <= hi < 180:
            raise PhantomError(f"bad scar angle range {self.scar_angle_deg}")
        if self.scar_directions is not None and len(self.scar_directions) != self.scar_count:
            raise PhantomError("scar_directions must list one direction per scar patch")
        if not 0 <= self.scar_rim_fraction <= 1 or not 0 <= self.scar_rim_floor <= 1:
            raise PhantomError("scar rim fraction and floor must lie in [0, 1]")
        values = [self.scar_boost, self.tube_intensity, self.blood_intensity, self.wall_intensity,
                  self.tissue_intensity, self.noise_sd, self.blur_mm]
        if not all(math.isfinite(v) for v in values):
            raise PhantomError("intensities must be finite")
        if self.noise_sd < 0 or self.blur_mm < 0:
            raise PhantomError("noise and blur must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("semi_axes_mm", "scar_angle_deg", "tube_gap_mm"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("scar_directions") is not None:
            d["scar_directions"] = tuple(tuple(v) for v in d["scar_directions"])
        return cls(**d)


def _grid(spec: PhantomSpec):
    ext = np.asarray(spec.semi_axes_mm) + spec.wall_thickness_mm + spec.margin_mm
    dims = tuple(int(math.ceil(2 * e / spec.spacing_mm)) + 1 for e in ext)
    origin = tuple(-(n - 1) / 2 * spec.spacing_mm for n in dims)
    axes = [origin[d] + spec.spacing_mm * np.arange(dims[d]) for d in range(3)]
    return dims, origin, np.meshgrid(*axes, indexing="ij")


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise PhantomError("zero direction")
    return v / n


def wall_shell(cavity: np.ndarray, thickness_mm: float, spacing) -> np.ndarray:
    """Voxels outside ``cavity`` within ``thickness_mm`` of it."""
    dist = ndimage.distance_transform_edt(~cavity, sampling=spacing)
    return (~cavity) & (dist <= thickness_mm)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, LabelVolume, LabelVolume]:
    """Return (intensity, cavity mask, scar mask) for ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims, origin, (X, Y, Z) = _grid(spec)
    spacing = (spec.spacing_mm,) * 3
    a, b, c = spec.semi_axes_mm

    cavity = (X / a) ** 2 + (Y / b) ** 2 + (Z / c) ** 2 <= 1.0
    wall = wall_shell(cavity, spec.wall_thickness_mm, spacing)
    if not wall.any():
        raise PhantomError("spec produces an empty wall shell")

    # direction in normalised ellipsoid coordinates, used for scar caps
    nx, ny, nz = X / a, Y / b, Z / c
    rad = np.sqrt(nx ** 2 + ny ** 2 + nz ** 2)
    rad[rad == 0] = 1.0
    dirs = np.stack([nx / rad, ny / rad, nz / rad], axis=-1)

    scar = np.zeros(dims, dtype=bool)
    boost = np.zeros(dims, dtype=np.float64)
    lo, hi = spec.scar_angle_deg
    for p in range(spec.scar_count):
        if spec.scar_directions is not None:
            centre = _unit(spec.scar_directions[p])
        else:
            centre = _unit(rng.standard_normal(3))
        angle = math.radians(rng.uniform(lo, hi))
        strength = spec.scar_boost * rng.uniform(0.8, 1.2)
        cosang = dirs @ centre
        cap = wall & (cosang >= math.cos(angle))
        scar |= cap
        level = np.full(int(cap.sum()), strength)
        if spec.scar_rim_fraction > 0:
            # grey-zone rim: boost ramps from floor at the edge to full strength
            depth = (angle - np.arccos(np.clip(cosang[cap], -1, 1))) / (spec.scar_rim_fraction * angle)
            level *= spec.scar_rim_floor + (1 - spec.scar_rim_floor) * np.clip(depth, 0, 1)
        boost[cap] = np.maximum(boost[cap], level)

    img = np.full(dims, spec.tissue_intensity, dtype=np.float64)
    for _ in range(spec.tube_count):
        u = _unit(rng.standard_normal(3))
        p0 = u / math.sqrt((u[0] / a) ** 2 + (u[1] / b) ** 2 + (u[2] / c) ** 2)
        normal = _unit(p0 / np.array([a * a, b * b, c * c]))
        gap = rng.uniform(*spec.tube_gap_mm)
        axis_pt = p0 + (spec.wall_thickness_mm + gap + spec.tube_radius_mm) * normal
        t = rng.standard_normal(3)
        t = _unit(t - (t @ normal) * normal)
        rel = np.stack([X - axis_pt[0], Y - axis_pt[1], Z - axis_pt[2]], axis=-1)
        along = rel @ t
        dist = np.linalg.norm(rel - along[..., None] * t, axis=-1)
        ring_inner = max(spec.tube_radius_mm - spec.wall_thickness_mm, 0.0)
        img[(dist <= spec.tube_radius_mm) & (dist > ring_inner)] = spec.tube_intensity
        img[dist <= ring_inner] = spec.blood_intensity

    img[wall] = spec.wall_intensity
    img[scar] = spec.wall_intensity + boost[scar]
    img[cavity] = spec.blood_intensity
    if spec.blur_mm > 0:
        img = ndimage.gaussian_filter(img, spec.blur_mm / spec.spacing_mm, mode="nearest")
    if spec.noise_sd > 0:
        img = img + rng.normal(0.0, spec.noise_sd, size=dims)

    intensity = Volume3D(img.astype(np.float32), spacing, origin)
    return (intensity,
            LabelVolume(cavity.astype(np.uint8), spacing, origin),
            LabelVolume(scar.astype(np.uint8), spacing, origin))


def _n_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(mask)
    return n


def perturb_segmentation(mask: LabelVolume, magnitude_mm: float, seed: int,
                         smoothness_mm: float = 8.0) -> LabelVolume:
    """Locally dilate/erode ``mask`` by a smooth random field bounded by ``magnitude_mm``.

    A voxel outside the mask joins it when its distance to the mask is at
    most the local field value; a voxel inside leaves when its distance to the
    outside is at most minus the field value. No voxel therefore changes
    unless it lies within ``magnitude_mm`` of the original boundary.
    """
    if magnitude_mm < 0:
        raise ValueError("magnitude_mm must be non-negative")
    if magnitude_mm == 0:
        return mask
    inside = mask.data.astype(bool)
    if not inside.any():
        raise PerturbationError("cannot perturb an empty mask")
    sampling = mask.spacing
    dist_out = ndimage.distance_transform_edt(~inside, sampling=sampling)
    dist_in = ndimage.distance_transform_edt(inside, sampling=sampling)
    band = np.where(inside, dist_in, dist_out) <= magnitude_mm + max(sampling)
    sigma = [smoothness_mm / s for s in sampling]

    for attempt in range(10):
        rng = np.random.default_rng([int(seed), attempt])
        field = ndimage.gaussian_filter(rng.standard_normal(mask.dims), sigma, mode="reflect")
        peak = np.abs(field[band]).max()
        if peak == 0:
            continue
        disp = np.clip(field * (magnitude_mm / peak), -magnitude_mm, magnitude_mm)
        out = inside.copy()
        out[~inside & (dist_out <= disp)] = True
        out[inside & (dist_in <= -disp)] = False
        if out.any() and _n_components(out) == 1:
            return mask.with_data(out.astype(np.uint8))
    raise PerturbationError(f"perturbation of {magnitude_mm} mm broke connectivity in 10 attempts")
