"""Image quality metrics: SSIM, PSNR, per-slice reports, line profiles.

SSIM follows the standard local-statistics form: Gaussian window (11 taps,
sigma 1.5), K1 = 0.01, K2 = 0.03, averaged over the fully-valid interior.
The dynamic range is always passed explicitly; report builders derive it
from the ground-truth volume (max - min).
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from .errors import IndexRangeError, InvalidSpecError, ShapeError

DEFAULT_WINDOW = (11, 1.5)  # (taps, sigma)
K1, K2 = 0.01, 0.03


def _as_array(img):
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def _gaussian_taps(size: int, sigma: float) -> np.ndarray:
    if size % 2 != 1 or size < 1:
        raise InvalidSpecError(f"window size must be odd and positive, got {size}")
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _local_mean(img, g):
    r = len(g) // 2
    t = convolve1d(img, g, axis=0, mode="constant")
    t = convolve1d(t, g, axis=1, mode="constant")
    return t[r : img.shape[0] - r, r : img.shape[1] - r] if r else t


def ssim(a, b, window=None, *, dynamic_range: float) -> float:
    """Mean local structural similarity between two equally-sized images."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if not (dynamic_range > 0):
        raise InvalidSpecError(f"dynamic_range must be > 0, got {dynamic_range}")
    size, sigma = window if window is not None else DEFAULT_WINDOW
    if min(x.shape) < size:
        raise ShapeError(f"image {x.shape} smaller than {size}-tap window")
    g = _gaussian_taps(size, sigma)
    c1, c2 = (K1 * dynamic_range) ** 2, (K2 * dynamic_range) ** 2
    mu_x, mu_y = _local_mean(x, g), _local_mean(y, g)
    var_x = _local_mean(x * x, g) - mu_x**2
    var_y = _local_mean(y * y, g) - mu_y**2
    cov = _local_mean(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def psnr(a, b, *, dynamic_range: float) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if not (dynamic_range > 0):
        raise InvalidSpecError(f"dynamic_range must be > 0, got {dynamic_range}")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(dynamic_range**2 / mse)


def feature_slice_mask(volume, rel_threshold: float = 0.01) -> np.ndarray:
    """Boolean mask of slices whose variance exceeds rel_threshold x volume variance.

    This is the "slices that have features" rule used by reports and by
    training-slice sampling.
    """
    data = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got {data.ndim}D")
    total_var = data.var()
    return data.var(axis=(1, 2)) > rel_threshold * total_var


def line_profile(images, row: int, col_range) -> dict:
    """Pixel values along one horizontal segment, one entry per image.

    ``col_range`` is a half-open (start, stop) pair; the returned table maps
    each image's provenance to its extracted values.
    """
    c0, c1 = int(col_range[0]), int(col_range[1])
    entries = []
    for img in images:
        data = _as_array(img)
        h, w = data.shape
        if not (0 <= row < h):
            raise IndexRangeError(f"row {row} outside [0, {h})")
        if not (0 <= c0 < c1 <= w):
            raise IndexRangeError(f"column range [{c0}, {c1}) outside [0, {w}]")
        entries.append((getattr(img, "provenance", "image"), data[row, c0:c1].copy()))
    return {"row": row, "col_start": c0, "col_stop": c1, "profiles": entries}


@dataclass
class QualityReport:
    """Per-slice metric pairs plus summary statistics."""

    slice_indices: np.ndarray
    ssim_ld: np.ndarray
    ssim_dn: np.ndarray
    psnr_ld: np.ndarray
    psnr_dn: np.ndarray
    dynamic_range: float
    summary: dict = field(default_factory=dict)
    line_profiles: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.slice_indices)
        cols = (self.ssim_ld, self.ssim_dn, self.psnr_ld, self.psnr_dn)
        if any(len(c) != n for c in cols):
            raise ShapeError("report columns must align with slice indices")
        for name, c in (("ssim_ld", self.ssim_ld), ("ssim_dn", self.ssim_dn)):
            if len(c) and (np.min(c) < -1.0 - 1e-9 or np.max(c) > 1.0 + 1e-9):
                raise InvalidSpecError(f"{name} outside [-1, 1]")
        if not self.summary:
            self.summary = self._summarize()

    def _summarize(self):
        out = {"n_slices": int(len(self.slice_indices)), "dynamic_range": self.dynamic_range}
        for name, col in (
            ("ssim_ld", self.ssim_ld),
            ("ssim_dn", self.ssim_dn),
            ("psnr_ld", self.psnr_ld),
            ("psnr_dn", self.psnr_dn),
        ):
            vals = np.asarray(col, dtype=np.float64)
            if len(vals) == 0:
                continue
            # linear percentile interpolation would form inf - inf on columns
            # holding infinite PSNR; fall back to order statistics there
            method = "lower" if np.isinf(vals).any() else "linear"
            out[name] = {
                "median": float(np.median(vals)),
                "q25": float(np.percentile(vals, 25, method=method)),
                "q75": float(np.percentile(vals, 75, method=method)),
                "n_infinite": int(np.isinf(vals).sum()),
            }
        return out


def build_report(gt, ld, dn, rel_threshold: float = 0.01, window=None) -> QualityReport:
    """SSIM/PSNR of low-dose and denoised volumes against ground truth.

    Only feature-bearing slices (per ``feature_slice_mask`` of the ground
    truth) are evaluated; dynamic range is the ground-truth max - min.
    """
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    l = np.asarray(getattr(ld, "data", ld), dtype=np.float64)
    d = np.asarray(getattr(dn, "data", dn), dtype=np.float64)
    if not (g.shape == l.shape == d.shape):
        raise ShapeError(f"volume shapes differ: {g.shape}, {l.shape}, {d.shape}")
    rng = float(g.max() - g.min())
    if rng <= 0:
        raise InvalidSpecError("ground truth volume has zero dynamic range")
    idx = np.flatnonzero(feature_slice_mask(g, rel_threshold))
    cols = {"ssim_ld": [], "ssim_dn": [], "psnr_ld": [], "psnr_dn": []}
    for i in idx:
        cols["ssim_ld"].append(ssim(l[i], g[i], window, dynamic_range=rng))
        cols["ssim_dn"].append(ssim(d[i], g[i], window, dynamic_range=rng))
        cols["psnr_ld"].append(psnr(l[i], g[i], dynamic_range=rng))
        cols["psnr_dn"].append(psnr(d[i], g[i], dynamic_range=rng))
    return QualityReport(
        slice_indices=idx,
        ssim_ld=np.array(cols["ssim_ld"]),
        ssim_dn=np.array(cols["ssim_dn"]),
        psnr_ld=np.array(cols["psnr_ld"]),
        psnr_dn=np.array(cols["psnr_dn"]),
        dynamic_range=rng,
    )


def write_report(report: QualityReport, tsv_path, summary_path):
    """Serialize per-slice metrics as TSV and the summary as JSON."""
    with open(tsv_path, "w") as f:
        f.write("slice_index\tssim_ld\tssim_dn\tpsnr_ld\tpsnr_dn\n")
        for k in range(len(report.slice_indices)):
            f.write(
                f"{int(report.slice_indices[k])}\t{report.ssim_ld[k]:.9g}\t"
                f"{report.ssim_dn[k]:.9g}\t{report.psnr_ld[k]:.9g}\t{report.psnr_dn[k]:.9g}\n"
            )
    with open(summary_path, "w") as f:
        json.dump(report.summary, f, indent=2, sort_keys=True)
        f.write("\n")


def _figure(figsize):
    # deferred import: keeps metric computation free of the plotting stack
    from matplotlib.figure import Figure

    return Figure(figsize=figsize, dpi=100)


def render_box_plot(groups: dict, ylabel: str, out_path) -> None:
    """Box-and-whisker comparison of named per-slice metric columns.

    Group order follows the dict; non-finite entries (infinite PSNR on
    perfect slices) are dropped before drawing.
    """
    labels = list(groups)
    data = [np.asarray(v, dtype=np.float64).ravel() for v in groups.values()]
    data = [v[np.isfinite(v)] for v in data]
    if not labels or any(len(v) == 0 for v in data):
        raise InvalidSpecError("each box plot group needs at least one finite value")
    fig = _figure((6.4, 4.8))
    ax = fig.add_subplot(111)
    ax.boxplot(data)
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels)
    ax.set_ylabel(ylabel)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="png")


def render_profile_overlay(profile: dict, out_path) -> None:
    """Overlay the traces of one line profile, one curve per image.

    Takes the table produced by ``line_profile``; the x axis is the column
    coordinate of the sampled segment.
    """
    entries = profile.get("profiles", [])
    if not entries:
        raise InvalidSpecError("profile table holds no traces")
    cols = np.arange(profile["col_start"], profile["col_stop"])
    fig = _figure((7.2, 4.2))
    ax = fig.add_subplot(111)
    for name, values in entries:
        values = np.asarray(values, dtype=np.float64)
        if len(values) != len(cols):
            raise ShapeError(
                f"trace {name!r} has {len(values)} samples, segment spans {len(cols)}"
            )
        ax.plot(cols, values, label=str(name), linewidth=1.2)
    ax.set_xlabel("column")
    ax.set_ylabel("attenuation")
    ax.set_title(f"row {profile['row']}")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="png")


def render_training_curves(series: dict, out_path) -> None:
    """Loss-term trajectories against generator step.

    ``series`` maps column names to equal-length arrays and must include
    ``step``; adversarial terms and generator terms go to separate panels
    because their scales differ by orders of magnitude.
    """
    if "step" not in series:
        raise InvalidSpecError("training curves need a 'step' column")
    steps = np.asarray(series["step"], dtype=np.float64)
    panels = (
        ("critic", ("w_term", "gp_term", "adv")),
        ("generator", ("mse", "vgg", "total_g")),
    )
    fig = _figure((7.2, 6.4))
    axes = fig.subplots(2, 1, sharex=True)
    for ax, (title, names) in zip(axes, panels):
        drew = False
        for name in names:
            if name not in series:
                continue
            vals = np.asarray(series[name], dtype=np.float64)
            if len(vals) != len(steps):
                raise ShapeError(f"column {name!r} has {len(vals)} rows, step has {len(steps)}")
            ax.plot(steps, vals, label=name, linewidth=1.0)
            drew = True
        if not drew:
            raise InvalidSpecError(f"no {title} loss columns present")
        ax.set_ylabel(title)
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
    axes[-1].set_xlabel("generator step")
    fig.tight_layout()
    fig.savefig(out_path, format="png")
