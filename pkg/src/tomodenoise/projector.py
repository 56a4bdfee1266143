"""Parallel-beam forward projection and dose-reduction degradations.

Geometry: square W x W slices, rotation center at pixel coordinate
((W-1)/2, (W-1)/2), detector bins aligned with the image columns at angle 0,
angles in radians over [0, pi).  A ray with signed detector offset t at view
angle theta is the line {(x, y) : x cos(theta) + y sin(theta) = t}.

Rays are integrated with linear interpolation along the dominant axis
(Joseph's method); the backprojector scatters with the same weights, so the
pair is an exact numerical adjoint, which SIRT and the adjoint oracle rely
on.

Dose reduction comes in two forms: angular subsampling and photon-limited
Poisson noise through the Beer-Lambert law.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import (
    GeometryError,
    InvalidSpecError,
    NumericalError,
    WrongKindError,
)

KINDS = ("line_integral", "counts")


@dataclass
class Sinogram:
    """Per-slice projection data, angles x detector bins."""

    data: np.ndarray
    angles: np.ndarray
    kind: str = "line_integral"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.data.ndim != 2:
            raise InvalidSpecError(f"sinogram data must be 2D, got {self.data.ndim}D")
        if self.angles.ndim != 1 or len(self.angles) != self.data.shape[0]:
            raise InvalidSpecError(
                f"angle count {self.angles.shape} does not match data rows {self.data.shape[0]}"
            )
        if len(self.angles) == 0:
            raise InvalidSpecError("sinogram needs at least one angle")
        if np.any(np.diff(self.angles) <= 0):
            raise InvalidSpecError("angles must be strictly increasing")
        if self.angles[0] < 0 or self.angles[-1] >= np.pi:
            raise InvalidSpecError("angles must lie in [0, pi)")
        if not np.isfinite(self.data).all():
            raise InvalidSpecError("sinogram contains non-finite values")
        if self.kind not in KINDS:
            raise InvalidSpecError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "counts":
            if (self.data < 0).any() or (self.data != np.floor(self.data)).any():
                raise InvalidSpecError("counts sinogram must hold non-negative integers")

    @property
    def detector_bins(self) -> int:
        return self.data.shape[1]

    @property
    def n_angles(self) -> int:
        return self.data.shape[0]


@dataclass
class DoseSpec:
    """Photon budget for the noise degradation."""

    photons_per_pixel: float
    seed: int
    absorption_scale: float = 0.025  # target mean sample absorption

    def validate(self):
        if not (self.photons_per_pixel > 0):
            raise InvalidSpecError(f"photons_per_pixel must be > 0, got {self.photons_per_pixel}")
        if not (0 < self.absorption_scale <= 1):
            raise InvalidSpecError(
                f"absorption_scale must be in (0, 1], got {self.absorption_scale}"
            )


def uniform_angles(n: int) -> np.ndarray:
    """n view angles evenly spaced over [0, pi)."""
    if n < 1:
        raise InvalidSpecError(f"need at least one angle, got {n}")
    return np.linspace(0.0, np.pi, n, endpoint=False)


def _ray_sampling(theta, W):
    """Sample positions for every (step, detector bin) pair at one angle.

    Returns (xi, transpose, scale): xi[s, k] is the fractional index into the
    non-stepping axis where ray k crosses step line s; transpose says whether
    stepping runs along columns instead of rows; scale is the arc length per
    step, 1/max(|cos|, |sin|).
    """
    c = (W - 1) / 2.0
    tk = np.arange(W) - c
    co, si = np.cos(theta), np.sin(theta)
    pos = np.arange(W) - c
    if abs(co) >= abs(si):
        xi = (tk[None, :] - pos[:, None] * si) / co + c
        transpose = False
    else:
        xi = (tk[None, :] - pos[:, None] * co) / si + c
        transpose = True
    return xi, transpose, 1.0 / max(abs(co), abs(si))


def forward_project(volume_slice: np.ndarray, angles) -> Sinogram:
    """Parallel-beam line integrals of one square slice at the given angles."""
    slc = np.asarray(volume_slice, dtype=np.float64)
    if slc.ndim != 2 or slc.shape[0] != slc.shape[1]:
        raise GeometryError(f"slice must be square 2D, got {slc.shape}")
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    if angles.size == 0:
        raise InvalidSpecError("empty angle list")
    W = slc.shape[0]
    sino = np.empty((len(angles), W), dtype=np.float64)
    for a, th in enumerate(angles):
        xi, transpose, scale = _ray_sampling(th, W)
        img = slc.T if transpose else slc
        i0 = np.floor(xi).astype(np.int64)
        w = xi - i0
        i1 = i0 + 1
        m0 = (i0 >= 0) & (i0 < W)
        m1 = (i1 >= 0) & (i1 < W)
        v0 = np.take_along_axis(img, np.clip(i0, 0, W - 1), axis=1)
        v1 = np.take_along_axis(img, np.clip(i1, 0, W - 1), axis=1)
        acc = (np.where(m0, v0, 0.0) * (1.0 - w) + np.where(m1, v1, 0.0) * w).sum(axis=0)
        sino[a] = acc * scale
    return Sinogram(sino, angles)


def backproject(sinogram: Sinogram) -> np.ndarray:
    """Adjoint of forward_project; returns a W x W grid."""
    if sinogram.kind != "line_integral":
        raise WrongKindError(f"backproject needs line integrals, got kind {sinogram.kind!r}")
    W = sinogram.detector_bins
    out = np.zeros(W * W, dtype=np.float64)
    for a, th in enumerate(sinogram.angles):
        xi, transpose, scale = _ray_sampling(th, W)
        srow = sinogram.data[a] * scale
        i0 = np.floor(xi).astype(np.int64)
        w = xi - i0
        i1 = i0 + 1
        m0 = (i0 >= 0) & (i0 < W)
        m1 = (i1 >= 0) & (i1 < W)
        rows = np.arange(W)[:, None] * W
        wt = np.broadcast_to(srow[None, :], xi.shape)
        add = np.bincount(
            (rows + np.clip(i0, 0, W - 1)).ravel(),
            weights=(wt * (1.0 - w) * m0).ravel(),
            minlength=W * W,
        )
        add += np.bincount(
            (rows + np.clip(i1, 0, W - 1)).ravel(),
            weights=(wt * w * m1).ravel(),
            minlength=W * W,
        )
        if transpose:
            out += add.reshape(W, W).T.ravel()
        else:
            out += add
    return out.reshape(W, W)


def subsample_angles(sinogram: Sinogram, factor: int) -> Sinogram:
    """Keep every factor-th view starting at index 0."""
    if factor < 1 or sinogram.n_angles % factor != 0:
        raise InvalidSpecError(
            f"factor {factor} does not divide angle count {sinogram.n_angles}"
        )
    meta = dict(sinogram.meta)
    meta["subsample_factor"] = meta.get("subsample_factor", 1) * factor
    return Sinogram(
        sinogram.data[::factor].copy(), sinogram.angles[::factor].copy(), sinogram.kind, meta
    )


def _absorption_rescale_factor(p: np.ndarray, absorption_scale: float) -> float:
    """Scale s such that mean(exp(-s*p)) over sample-covered pixels is 1 - a.

    Covered pixels are those with a strictly positive line integral.  The
    mean transmittance is monotone decreasing in s, so the root is bracketed
    by doubling.
    """
    covered = p[p > 0]
    if covered.size == 0:
        raise InvalidSpecError("sinogram has no sample-covered pixels to calibrate absorption")
    target = 1.0 - absorption_scale

    def deficit(s):
        return np.exp(-s * covered).mean() - target

    hi = 1.0
    for _ in range(200):
        if deficit(hi) < 0:
            break
        hi *= 2.0
    else:
        raise NumericalError(
            f"absorption target {absorption_scale} not reachable by rescaling"
        )
    return float(brentq(deficit, 0.0, hi, xtol=1e-14, rtol=1e-14))


def apply_photon_noise(
    sinogram: Sinogram,
    dose: DoseSpec,
    slice_index: int = 0,
    noiseless: bool = False,
) -> Sinogram:
    """Re-measure line integrals under a finite photon budget.

    Line integrals are first rescaled so the mean sample absorption matches
    ``dose.absorption_scale`` (factor recorded in ``meta`` so it can be
    inverted).  Expected counts I0*exp(-p) are then Poisson-sampled with an
    independent substream per (seed, slice_index, angle index), so serial and
    slice- or angle-parallel execution agree bitwise.  Zero counts are
    clamped to 1 before the log.
    """
    dose.validate()
    if sinogram.kind != "line_integral":
        raise WrongKindError(f"photon noise needs line integrals, got kind {sinogram.kind!r}")
    i0 = float(dose.photons_per_pixel)
    s = _absorption_rescale_factor(sinogram.data, dose.absorption_scale)
    scaled = sinogram.data * s
    if noiseless:
        noisy = scaled.copy()
    else:
        expected = i0 * np.exp(-scaled)
        counts = np.empty_like(expected)
        for a in range(sinogram.n_angles):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=dose.seed, spawn_key=(slice_index, a))
            )
            counts[a] = rng.poisson(expected[a])
        counts = np.maximum(counts, 1.0)
        noisy = np.log(i0) - np.log(counts)
    meta = dict(sinogram.meta)
    meta.update(
        photons_per_pixel=i0,
        absorption_scale=dose.absorption_scale,
        noise_seed=dose.seed,
        rescale_factor=s,
        noiseless=noiseless,
    )
    return Sinogram(noisy, sinogram.angles.copy(), "line_integral", meta)


def invert_absorption_rescale(sinogram: Sinogram) -> Sinogram:
    """Divide out the recorded absorption rescale factor.

    Returns the noisy line integrals in the units of the original
    forward-projected sinogram, which keeps low-dose and normal-dose
    reconstructions on a common attenuation scale.
    """
    if "rescale_factor" not in sinogram.meta:
        raise InvalidSpecError("sinogram has no recorded rescale factor to invert")
    meta = dict(sinogram.meta)
    s = meta.pop("rescale_factor")
    meta["rescale_factor_inverted"] = s
    return Sinogram(sinogram.data / s, sinogram.angles.copy(), sinogram.kind, meta)
