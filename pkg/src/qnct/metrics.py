"""Image quality metrics and evaluation protocols.

PSNR, windowed SSIM and its multi-scale product, radially averaged noise
power spectra over a standard two-circle ROI layout, and the white-circle
anomaly protocol with cropped-region scoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import init as pinit
from .errors import ShapeError

log = logging.getLogger("qnct.metrics")

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def psnr(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); +inf for identical inputs."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"psnr: shapes {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(data_range * data_range / mse)


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _windows(x: np.ndarray, size: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, (size, size))


def _local_stats(x, y, kernel):
    size = kernel.shape[0]
    wx = _windows(x, size)
    wy = _windows(y, size)
    mu_x = np.einsum("hwij,ij->hw", wx, kernel, optimize=True)
    mu_y = np.einsum("hwij,ij->hw", wy, kernel, optimize=True)
    xx = np.einsum("hwij,ij->hw", wx * wx, kernel, optimize=True)
    yy = np.einsum("hwij,ij->hw", wy * wy, kernel, optimize=True)
    xy = np.einsum("hwij,ij->hw", wx * wy, kernel, optimize=True)
    return mu_x, mu_y, xx - mu_x ** 2, yy - mu_y ** 2, xy - mu_x * mu_y


def _ssim_terms(x, y, data_range, kernel):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y, var_x, var_y, cov = _local_stats(x, y, kernel)
    luminance = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    return luminance, cs


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0,
         kernel_size: int = 11, sigma: float = 1.5) -> float:
    """Mean windowed structural similarity (Gaussian 11x11, sigma 1.5)."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"ssim: shapes {x.shape} vs {ref.shape}")
    if min(x.shape) < kernel_size:
        raise ShapeError(
            f"ssim: image {x.shape} smaller than the {kernel_size} kernel"
        )
    kernel = gaussian_kernel(kernel_size, sigma)
    luminance, cs = _ssim_terms(x, ref, data_range, kernel)
    return float(np.mean(luminance * cs))


def _mean_pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    x = x[: h - h % 2, : w - w % 2]
    return x.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def max_msssim_levels(shape, kernel_size: int = 11) -> int:
    levels = 0
    size = min(shape)
    while size >= kernel_size and levels < 5:
        levels += 1
        size //= 2
    return levels


def ms_ssim(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0,
            levels: int = 5, kernel_size: int = 11, sigma: float = 1.5,
            weights=MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM: contrast/structure across scales, luminance at the
    coarsest; scales connect by 2x2 mean pooling."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"ms_ssim: shapes {x.shape} vs {ref.shape}")
    if levels < 1 or levels > len(weights):
        raise ShapeError(f"ms_ssim: levels must be in 1..{len(weights)}")
    kernel = gaussian_kernel(kernel_size, sigma)
    weights = np.asarray(weights[:levels], dtype=np.float64)
    score = 1.0
    for level in range(levels):
        if min(x.shape) < kernel_size:
            raise ShapeError(
                f"ms_ssim: level {level + 1} image {x.shape} smaller than "
                f"the {kernel_size} kernel"
            )
        luminance, cs = _ssim_terms(x, ref, data_range, kernel)
        if level == levels - 1:
            score *= float(np.mean(luminance * cs)) ** weights[level]
        else:
            score *= float(np.mean(cs)) ** weights[level]
            x = _mean_pool2(x)
            ref = _mean_pool2(ref)
    return float(score)


# ---------------------------------------------------------------------------
# noise power spectrum
# ---------------------------------------------------------------------------

def paper_roi_layout(image_size: int, base_size: int = 256):
    """Two-circle ROI layout scaled from the 256 reference: one central ROI,
    8 on the inner circle (radius 25), 20 on the outer (radius 50); ROIs are
    20x20 at the reference size."""
    scale = image_size / base_size
    roi = max(4, int(round(20 * scale)))
    center = image_size / 2.0
    corners = []

    def add(cy, cx):
        r = int(round(cy - roi / 2.0))
        c = int(round(cx - roi / 2.0))
        corners.append((r, c))

    add(center, center)
    for count, radius in ((8, 25.0 * scale), (20, 50.0 * scale)):
        for i in range(count):
            ang = 2.0 * np.pi * i / count
            add(center + radius * np.sin(ang), center + radius * np.cos(ang))
    return corners, roi


def nps_radial(noise_images, rois, roi_size: int, pixel_mm: float = 1.0):
    """Averaged periodogram of mean-subtracted ROIs, plus its radial profile.

    Returns (freq_centers, curve, nps2d). nps2d integrates (du dv) to the
    noise variance, so sum(nps2d) / (roi_size * pixel_mm)^2 recovers it.
    """
    images = [np.asarray(img, dtype=np.float64) for img in noise_images]
    if not images or not rois:
        raise ShapeError("nps_radial needs at least one image and one ROI")
    acc = np.zeros((roi_size, roi_size), dtype=np.float64)
    count = 0
    for img in images:
        h, w = img.shape
        for r, c in rois:
            if r < 0 or c < 0 or r + roi_size > h or c + roi_size > w:
                raise ShapeError(
                    f"ROI at ({r},{c}) size {roi_size} outside image {img.shape}"
                )
            patch = img[r:r + roi_size, c:c + roi_size]
            patch = patch - patch.mean()
            spec = np.abs(np.fft.fft2(patch)) ** 2
            acc += spec
            count += 1
    nps2d = acc * (pixel_mm * pixel_mm) / (roi_size * roi_size * count)

    fx = np.fft.fftfreq(roi_size, d=pixel_mm)
    radius = np.sqrt(fx[None, :] ** 2 + fx[:, None] ** 2)
    nyquist = 0.5 / pixel_mm
    n_bins = roi_size // 2
    edges = np.linspace(0.0, nyquist, n_bins + 1)
    which = np.clip(np.digitize(radius.ravel(), edges) - 1, 0, n_bins - 1)
    sums = np.bincount(which, weights=nps2d.ravel(), minlength=n_bins)
    counts = np.bincount(which, minlength=n_bins)
    curve = sums / np.maximum(counts, 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, curve, np.fft.fftshift(nps2d)


def nps_integral(nps2d: np.ndarray, roi_size: int, pixel_mm: float = 1.0) -> float:
    """Integral of the 2D spectrum over frequency; equals noise variance."""
    dudv = 1.0 / (roi_size * pixel_mm) ** 2
    return float(nps2d.sum() * dudv)


# ---------------------------------------------------------------------------
# anomaly (white circle) protocol
# ---------------------------------------------------------------------------

def circle_mask(h: int, w: int, cx: int, cy: int, radius: int) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return dist <= radius


def add_circle_ood(image: np.ndarray, seed=None, value: float = 1.0,
                   rng: np.random.Generator | None = None):
    """Stamp a random bright disk into a copy of the image; returns
    (stamped, mask). Radius is uniform in [5, 20), the center keeps the
    disk inside; small images rescale the radius range (logged)."""
    img = np.array(image, copy=True)
    if img.ndim != 2:
        raise ShapeError(f"add_circle_ood: expected 2-d image, got {img.shape}")
    h, w = img.shape
    if rng is None:
        rng = pinit.substream(int(seed), "ood")
    lo, hi = 5, 20
    if min(h, w) <= 2 * hi:
        hi = max(2, min(h, w) // 4)
        lo = max(1, hi // 4)
        log.info("add_circle_ood: small image, radius range rescaled to "
                 "[%d, %d)", lo, hi)
    radius = int(rng.integers(lo, hi))
    cx = int(rng.integers(radius, w - radius))
    cy = int(rng.integers(radius, h - radius))
    mask = circle_mask(h, w, cx, cy, radius)
    img[mask] = value
    return img, mask


def eval_ood_crop(x: np.ndarray, ref: np.ndarray, mask: np.ndarray,
                  pad: int = 4, data_range: float = 1.0) -> dict:
    """PSNR/SSIM on the padded bounding box of the anomaly mask."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.shape != ref.shape or x.shape != mask.shape:
        raise ShapeError(
            f"eval_ood_crop: shapes {x.shape}/{ref.shape}/{mask.shape}"
        )
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        raise ShapeError("eval_ood_crop: empty mask")
    r0, r1 = np.where(rows)[0][[0, -1]]
    c0, c1 = np.where(cols)[0][[0, -1]]
    r0 = max(0, r0 - pad)
    c0 = max(0, c0 - pad)
    r1 = min(mask.shape[0], r1 + 1 + pad)
    c1 = min(mask.shape[1], c1 + 1 + pad)
    xc = x[r0:r1, c0:c1]
    rc = ref[r0:r1, c0:c1]
    return {
        "psnr": psnr(xc, rc, data_range),
        "ssim": ssim(xc, rc, data_range),
        "bbox": (int(r0), int(c0), int(r1), int(c1)),
    }


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r["psnr"] for r in self.rows]))

    @property
    def std_psnr(self) -> float:
        # identical pairs produce +inf rows; their spread is not a number
        with np.errstate(invalid="ignore"):
            return float(np.std([r["psnr"] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.rows]))

    @property
    def std_ssim(self) -> float:
        return float(np.std([r["ssim"] for r in self.rows]))


def evaluate_pair(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0,
                  msssim_levels: int | None = None) -> dict:
    """psnr / ssim / ms_ssim row; levels default to the largest feasible."""
    if msssim_levels is None:
        msssim_levels = max_msssim_levels(np.asarray(x).shape)
    row = {
        "psnr": psnr(x, ref, data_range),
        "ssim": ssim(x, ref, data_range),
    }
    row["ms_ssim"] = (ms_ssim(x, ref, data_range, levels=msssim_levels)
                      if msssim_levels >= 1 else np.nan)
    return row
