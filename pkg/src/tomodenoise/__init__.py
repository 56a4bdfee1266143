"""Low-dose tomography simulation, reconstruction, and adversarial denoising."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("tomodenoise")
except PackageNotFoundError:  # running from a source tree without an install
    __version__ = "0.0.0"
