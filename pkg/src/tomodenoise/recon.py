"""Slice reconstruction: filtered back projection and SIRT.

Both methods share the projector geometry.  Pixels outside the inscribed
reconstruction circle (radius W/2 around the rotation center) are forced to
zero; 180-degree parallel data does not determine them.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError, NumericalError, WrongKindError
from .projector import Sinogram, backproject, forward_project

PROVENANCES = ("ground_truth", "low_dose", "denoised")
FBP_FILTERS = ("ramp", "shepp_logan", "hann")


@dataclass
class SliceImage:
    """One reconstructed (or reference) slice."""

    data: np.ndarray
    provenance: str = "low_dose"
    slice_index: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise InvalidSpecError(f"slice must be square 2D, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InvalidSpecError("slice contains non-finite values")
        if self.provenance not in PROVENANCES:
            raise InvalidSpecError(
                f"provenance must be one of {PROVENANCES}, got {self.provenance!r}"
            )

    @property
    def shape(self):
        return self.data.shape


def reconstruction_circle(W: int) -> np.ndarray:
    """Boolean mask of pixels inside the inscribed circle of radius W/2."""
    c = (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(W) - c, np.arange(W) - c, indexing="ij")
    return (yy**2 + xx**2) <= (W / 2.0) ** 2


def _ramp_filter(P: int, name: str) -> np.ndarray:
    f = np.fft.rfftfreq(P)  # cycles per sample, in [0, 0.5]
    ramp = f.copy()
    if name == "ramp":
        return ramp
    if name == "shepp_logan":
        return ramp * np.sinc(f)
    if name == "hann":
        return ramp * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    raise InvalidSpecError(f"filter must be one of {FBP_FILTERS}, got {name!r}")


def fbp(
    sinogram: Sinogram,
    filter_name: str = "ramp",
    provenance: str = "low_dose",
    slice_index: int = 0,
) -> SliceImage:
    """Filtered back projection of one sinogram.

    Projections are zero-padded to the next power of two >= 2W before
    frequency-domain filtering to suppress circular-convolution wraparound;
    the pi/n_angles scale makes a constant disk reconstruct to its own
    attenuation value.
    """
    if sinogram.kind != "line_integral":
        raise WrongKindError(f"fbp needs line integrals, got kind {sinogram.kind!r}")
    W = sinogram.detector_bins
    P = 1 << max(int(np.ceil(np.log2(2 * W))), 1)
    H = _ramp_filter(P, filter_name)
    padded = np.zeros((sinogram.n_angles, P))
    padded[:, :W] = sinogram.data
    filtered = np.fft.irfft(np.fft.rfft(padded, axis=1) * H[None, :], n=P, axis=1)[:, :W]
    img = backproject(Sinogram(filtered, sinogram.angles)) * (np.pi / sinogram.n_angles)
    img[~reconstruction_circle(W)] = 0.0
    return SliceImage(img, provenance, slice_index)


def sirt(
    sinogram: Sinogram,
    iterations: int,
    nonneg: bool = False,
    provenance: str = "low_dose",
    slice_index: int = 0,
    return_residuals: bool = False,
):
    """Simultaneous iterative reconstruction.

    Updates x <- x + C * A^T(R * (b - A x)) from a zero start, where R and C
    are reciprocal row/column sums of the system restricted to the
    reconstruction circle.  The Euclidean residual ||b - A x|| is recorded
    every iteration; growth beyond 10x the initial residual aborts.
    """
    if iterations < 1:
        raise InvalidSpecError(f"iterations must be >= 1, got {iterations}")
    if sinogram.kind != "line_integral":
        raise WrongKindError(f"sirt needs line integrals, got kind {sinogram.kind!r}")
    W = sinogram.detector_bins
    angles = sinogram.angles
    support = reconstruction_circle(W).astype(np.float64)

    rowsum = forward_project(support, angles).data
    colsum = backproject(Sinogram(np.ones_like(sinogram.data), angles))
    R = np.where(rowsum > 1e-12, 1.0 / np.maximum(rowsum, 1e-12), 0.0)
    C = np.where(colsum > 1e-12, 1.0 / np.maximum(colsum, 1e-12), 0.0) * support

    b = sinogram.data
    x = np.zeros((W, W))
    residuals = np.empty(iterations + 1)
    r = b - forward_project(x, angles).data
    residuals[0] = np.linalg.norm(r)
    for k in range(iterations):
        x = x + C * backproject(Sinogram(R * r, angles))
        if nonneg:
            np.maximum(x, 0.0, out=x)
        r = b - forward_project(x, angles).data
        residuals[k + 1] = np.linalg.norm(r)
        if residuals[k + 1] > 10.0 * residuals[0] and residuals[0] > 0:
            raise NumericalError(
                f"sirt diverged: residual {residuals[k + 1]:.3e} exceeds "
                f"10x initial {residuals[0]:.3e} at iteration {k + 1}"
            )
    out = SliceImage(x, provenance, slice_index)
    if return_residuals:
        return out, residuals
    return out
