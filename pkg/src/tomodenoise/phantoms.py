"""Reproducible 3D foam phantoms and analytic test objects.

The foam phantom is a solid cylinder (inscribed in each square slice) with
spherical voids carved out at seeded random positions.  It is the ground
truth object for the whole simulation pipeline.  ``analytic_disk`` builds a
single-slice constant disk used by the projection and reconstruction
oracles.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError

# Edge anti-aliasing: fraction of subvoxel centers inside the surface.
SUPERSAMPLE = 2


@dataclass
class Volume:
    """3D grid of non-negative attenuation values, dims (D, H, W), H == W."""

    data: np.ndarray
    voxel_size: float = 1.0
    provenance: str = "ground_truth"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InvalidSpecError(f"volume must be 3D, got {self.data.ndim}D")
        d, h, w = self.data.shape
        if h != w:
            raise InvalidSpecError(f"slices must be square, got {h}x{w}")
        if d <= 0 or h <= 0:
            raise InvalidSpecError(f"grid dimensions must be positive, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InvalidSpecError("volume contains non-finite values")
        # reconstructed/denoised volumes may dip below zero (filter ringing,
        # unclipped network output); true attenuation maps may not
        if self.provenance == "ground_truth" and bool((self.data < 0).any()):
            raise InvalidSpecError("attenuation values must be non-negative")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class FoamSpec:
    """Parameters of a seeded foam phantom.

    Defaults are the desk-scale working point: 256^3 grid with 2000 voids,
    scaled down by volume ratio from the full-size 1024^3 / 100000 setup.
    """

    seed: int
    n_features: int = 2000
    grid: tuple = (256, 256, 256)  # (D, H, W)
    radius_range: tuple = (2.0, 12.0)
    background_attenuation: float = 0.01
    feature_attenuation: float = 0.0

    def validate(self):
        d, h, w = self.grid
        if d <= 0 or h <= 0 or w <= 0:
            raise InvalidSpecError(f"grid dimensions must be positive, got {self.grid}")
        if h != w:
            raise InvalidSpecError(f"slices must be square, got {h}x{w}")
        rmin, rmax = self.radius_range
        if not (0 < rmin <= rmax <= min(h, w) / 4):
            raise InvalidSpecError(
                f"radius_range must satisfy 0 < min <= max <= min(H,W)/4, got {self.radius_range}"
            )
        if self.n_features < 0:
            raise InvalidSpecError(f"n_features must be >= 0, got {self.n_features}")


def sphere_parameters(spec: FoamSpec) -> np.ndarray:
    """Seeded (n, 4) array of (z, y, x, radius) per void.

    Drawn as one row-major block so the first k rows are identical for any
    n_features >= k under the same seed (prefix-stable placement).  Exposed
    so membership can be recomputed independently of the rasterizer.
    """
    d, h, w = spec.grid
    rng = np.random.default_rng(spec.seed)
    u = rng.random((spec.n_features, 4))
    cyl_r = w / 2.0 - 1.0
    cz = u[:, 0] * d
    # uniform over the cylinder cross-section
    rho = cyl_r * np.sqrt(u[:, 1])
    phi = 2.0 * np.pi * u[:, 2]
    cy = (h - 1) / 2.0 + rho * np.sin(phi)
    cx = (w - 1) / 2.0 + rho * np.cos(phi)
    rmin, rmax = spec.radius_range
    radius = np.exp(np.log(rmin) + u[:, 3] * (np.log(rmax) - np.log(rmin)))
    return np.stack([cz, cy, cx, radius], axis=1)


def _cylinder_coverage(h, w, antialias):
    """Per-pixel coverage in [0, 1] of the inscribed cylinder cross-section."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    cyl_r = w / 2.0 - 1.0
    if not antialias:
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return (((yy - cy) ** 2 + (xx - cx) ** 2) <= cyl_r**2).astype(np.float32)
    s = SUPERSAMPLE
    off = (np.arange(s) + 0.5) / s - 0.5
    ys = np.arange(h)[:, None, None, None] + off[None, :, None, None]
    xs = np.arange(w)[None, None, :, None] + off[None, None, None, :]
    inside = ((ys - cy) ** 2 + (xs - cx) ** 2) <= cyl_r**2
    return inside.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)


def generate_foam_phantom(spec: FoamSpec, antialias: bool = True) -> Volume:
    """Rasterize a seeded foam phantom.

    Voids are combined by union: a voxel inside any sphere takes
    ``feature_attenuation``.  With ``antialias`` (the default) boundary
    voxels blend by fractional subvoxel coverage; with ``antialias=False``
    membership is decided by the voxel center alone, which is what the
    brute-force counting oracle expects.
    """
    spec.validate()
    d, h, w = spec.grid
    spheres = sphere_parameters(spec)
    cyl = _cylinder_coverage(h, w, antialias)

    # void coverage per voxel, union approximated by per-sphere maximum
    void = np.zeros((d, h, w), dtype=np.float32)
    s = SUPERSAMPLE if antialias else 1
    off = (np.arange(s) + 0.5) / s - 0.5 if antialias else np.zeros(1)
    for cz, cy, cx, r in spheres:
        z0, z1 = max(0, int(np.floor(cz - r - 1))), min(d, int(np.ceil(cz + r + 2)))
        y0, y1 = max(0, int(np.floor(cy - r - 1))), min(h, int(np.ceil(cy + r + 2)))
        x0, x1 = max(0, int(np.floor(cx - r - 1))), min(w, int(np.ceil(cx + r + 2)))
        if z0 >= z1 or y0 >= y1 or x0 >= x1:
            continue
        zz = np.arange(z0, z1)[:, None] + off[None, :] - cz
        yy = np.arange(y0, y1)[:, None] + off[None, :] - cy
        xx = np.arange(x0, x1)[:, None] + off[None, :] - cx
        inside = (
            (zz**2)[:, :, None, None, None, None]
            + (yy**2)[None, None, :, :, None, None]
            + (xx**2)[None, None, None, None, :, :]
        ) <= r * r
        cov = inside.mean(axis=(1, 3, 5), dtype=np.float64).astype(np.float32)
        box = void[z0:z1, y0:y1, x0:x1]
        np.maximum(box, cov, out=box)

    bg = np.float32(spec.background_attenuation)
    feat = np.float32(spec.feature_attenuation)
    slice_values = bg + void * (feat - bg)
    vol = (slice_values * cyl[None, :, :]).astype(np.float32)
    return Volume(vol, meta={"seed": spec.seed, "n_features": spec.n_features})


def analytic_disk(radius: float, attenuation: float, size: int, supersample: int = 8) -> Volume:
    """Single-slice volume holding a centered constant disk.

    Rasterized with ``supersample``^2 coverage samples per pixel so the ideal
    chord length 2*mu*sqrt(r^2 - t^2) is reproduced to well under a percent
    by the projector.
    """
    if size <= 0:
        raise InvalidSpecError(f"size must be positive, got {size}")
    if not (0 <= radius < size / 2):
        raise InvalidSpecError(f"radius must satisfy 0 <= r < size/2, got {radius}")
    c = (size - 1) / 2.0
    if radius == 0:
        return Volume(np.zeros((1, size, size), dtype=np.float32))
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    ys = np.arange(size)[:, None, None, None] + off[None, :, None, None]
    xs = np.arange(size)[None, None, :, None] + off[None, None, None, :]
    inside = ((ys - c) ** 2 + (xs - c) ** 2) <= radius * radius
    cov = inside.mean(axis=(1, 3), dtype=np.float64)
    return Volume((cov * attenuation).astype(np.float32)[None, :, :])
