"""Scan geometry, matched projector pair, FBP, view subsampling, and noise.

The forward projector is ray-driven with Joseph-style bilinear sampling at a
fixed step of half a pixel; the adjoint replays the identical interpolation
weights as a scatter, so the pair is a matched transpose by construction.
FBP uses the spatial-domain ramp kernel realized over a zero-padded FFT
(even kernel, hence a symmetric filter matrix) and a pixel-driven
backprojection with its own matched transpose, which makes the whole FBP
map usable as a differentiable linear op.

Units: image values are attenuation per mm times mm of path, i.e. line
integrals are in mm when the image holds unit density.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GeometryError
from .init import substream

PARALLEL = "parallel"
FAN = "fan"


def _as_view_tuple(views) -> tuple:
    return tuple(int(v) for v in views)


@dataclass(frozen=True)
class Geometry:
    """Scan description; defines the forward operator.

    angular_range is [start, end) in radians over the full view set; a
    limited-angle scan is just a narrower range. view_subset indexes into
    the full set of n_views_full uniformly spaced views.
    """

    beam: str = PARALLEL
    n_views_full: int = 180
    n_det: int = 96
    angular_range: tuple = (0.0, np.pi)
    det_spacing_mm: float = 2.0
    image_extent_mm: float = 128.0
    sad_mm: float | None = None
    add_mm: float | None = None
    view_subset: tuple = field(default=None)

    def __post_init__(self):
        if self.beam not in (PARALLEL, FAN):
            raise GeometryError(f"unknown beam type {self.beam!r}")
        if self.beam == FAN:
            if self.sad_mm is None or self.add_mm is None:
                raise GeometryError("fan beam requires sad_mm and add_mm")
        elif self.sad_mm is not None or self.add_mm is not None:
            raise GeometryError("sad_mm/add_mm are fan-beam fields")
        if self.n_views_full < 1 or self.n_det < 1:
            raise GeometryError("n_views_full and n_det must be positive")
        subset = self.view_subset
        if subset is None:
            subset = range(self.n_views_full)
        subset = _as_view_tuple(subset)
        if any(b <= a for a, b in zip(subset, subset[1:])) or not subset:
            raise GeometryError("view_subset must be non-empty, strictly increasing")
        if subset[0] < 0 or subset[-1] >= self.n_views_full:
            raise GeometryError(
                f"view_subset out of range [0, {self.n_views_full})"
            )
        object.__setattr__(self, "view_subset", subset)
        diagonal = self.image_extent_mm * np.sqrt(2.0)
        coverage = self.n_det * self.det_spacing_mm
        if self.beam == FAN:
            coverage *= self.sad_mm / (self.sad_mm + self.add_mm)
        if coverage < diagonal:
            warnings.warn(
                f"detector coverage {coverage:.1f} mm is below the image "
                f"diagonal {diagonal:.1f} mm; rays will truncate",
                stacklevel=2,
            )

    @property
    def n_views(self) -> int:
        return len(self.view_subset)

    def view_angles(self) -> np.ndarray:
        start, end = self.angular_range
        step = (end - start) / self.n_views_full
        return start + step * np.asarray(self.view_subset, dtype=np.float64)

    def full_circle(self) -> bool:
        start, end = self.angular_range
        return end - start >= 2.0 * np.pi - 1e-9

    def pixel_mm(self, w: int) -> float:
        return self.image_extent_mm / w


@dataclass
class Image:
    """Pixel grid of attenuation values, row-major, y axis pointing up."""

    values: np.ndarray
    pixel_mm: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise GeometryError(f"image must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise GeometryError("image contains non-finite values")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, h: int, w: int, geometry: Geometry, dtype=np.float32):
        return cls(np.zeros((h, w), dtype=dtype), geometry.pixel_mm(w))


@dataclass
class Sinogram:
    """Line-integral grid, one row per view in view_subset order."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise GeometryError(
                f"sinogram must be 2-d, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GeometryError("sinogram contains non-finite values")

    @property
    def n_v(self) -> int:
        return self.values.shape[0]

    @property
    def n_d(self) -> int:
        return self.values.shape[1]


def desk_geometry(beam: str = PARALLEL, view_subset=None) -> Geometry:
    """Default desk-scale scan: 64x64 image, 96 detectors, 180 full views."""
    if beam == FAN:
        return Geometry(
            beam=FAN, n_views_full=180, n_det=96,
            angular_range=(0.0, 2.0 * np.pi), det_spacing_mm=3.0,
            image_extent_mm=128.0, sad_mm=300.0, add_mm=150.0,
            view_subset=view_subset,
        )
    return Geometry(view_subset=view_subset)


def paper_geometry(view_subset=None) -> Geometry:
    """Full-scale scan: 256x256 image, 512 detectors, 512 fan views."""
    return Geometry(
        beam=FAN, n_views_full=512, n_det=512,
        angular_range=(0.0, 2.0 * np.pi), det_spacing_mm=1.2,
        image_extent_mm=256.0, sad_mm=600.0, add_mm=290.0,
        view_subset=view_subset,
    )


# ---------------------------------------------------------------------------
# sampling tables shared by the projector pair
# ---------------------------------------------------------------------------

def _bilinear_table(fi, fj, h, w):
    """Corner indices and weights for bilinear sampling, zero outside.

    Weights are float64 (shared verbatim by both projector directions, so
    the pair stays an exact transpose) and indices flat int64.
    """
    i0 = np.floor(fi).astype(np.int64)
    j0 = np.floor(fj).astype(np.int64)
    di = fi - i0
    dj = fj - j0
    idx = []
    wts = []
    for oi, ci in ((0, 1.0 - di), (1, di)):
        for oj, cj in ((0, 1.0 - dj), (1, dj)):
            ii = i0 + oi
            jj = j0 + oj
            valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            lin = np.where(valid, ii * w + jj, 0)
            idx.append(lin.reshape(-1))
            wts.append(np.where(valid, ci * cj, 0.0).reshape(-1))
    return np.concatenate(idx), np.concatenate(wts)


@functools.lru_cache(maxsize=8)
def _ray_tables(geometry: Geometry, h: int, w: int):
    """Per-view Joseph sampling tables: list of (flat indices, weights)."""
    px = geometry.pixel_mm(w)
    step = px / 2.0
    half_diag = 0.5 * px * float(np.hypot(h, w))
    angles = geometry.view_angles()
    t_det = (np.arange(geometry.n_det) - (geometry.n_det - 1) / 2.0) \
        * geometry.det_spacing_mm
    tables = []
    if geometry.beam == PARALLEL:
        n_s = int(np.ceil(2.0 * (half_diag + px) / step)) + 1
        s = -(half_diag + px) + step * np.arange(n_s)
        for theta in angles:
            tx, ty = np.cos(theta), np.sin(theta)
            dx, dy = -np.sin(theta), np.cos(theta)
            pxs = t_det[:, None] * tx + s[None, :] * dx
            pys = t_det[:, None] * ty + s[None, :] * dy
            fj = pxs / px + (w - 1) / 2.0
            fi = (h - 1) / 2.0 - pys / px
            tables.append(_bilinear_table(fi, fj, h, w))
        return tables, np.float64(step), n_s
    else:
        sad = geometry.sad_mm
        vspacing = geometry.det_spacing_mm * sad / (sad + geometry.add_mm)
        u_det = (np.arange(geometry.n_det) - (geometry.n_det - 1) / 2.0) * vspacing
        n_s = int(np.ceil(2.0 * (half_diag + 2 * px) / step)) + 1
        s = sad - (half_diag + 2 * px) + step * np.arange(n_s)
        for beta in angles:
            sx, sy = sad * np.cos(beta), sad * np.sin(beta)
            txv, tyv = -np.sin(beta), np.cos(beta)
            ex = u_det * txv - sx
            ey = u_det * tyv - sy
            norm = np.hypot(ex, ey)
            dx, dy = ex / norm, ey / norm
            pxs = sx + dx[:, None] * s[None, :]
            pys = sy + dy[:, None] * s[None, :]
            fj = pxs / px + (w - 1) / 2.0
            fi = (h - 1) / 2.0 - pys / px
            tables.append(_bilinear_table(fi, fj, h, w))
    return tables, np.float64(step), n_s


# Above this view count the fused (single gather / scatter) tables would
# hold too much memory; fall back to the per-view loop.
_FUSED_VIEW_LIMIT = 64


@functools.lru_cache(maxsize=8)
def _ray_tables_fused(geometry: Geometry, h: int, w: int):
    tables, step, n_s = _ray_tables(geometry, h, w)
    idx = np.concatenate([t[0] for t in tables])
    wts = np.concatenate([t[1] for t in tables])
    return idx, wts, step, n_s


def forward_project(image: Image, geometry: Geometry) -> Sinogram:
    """Discretized line integrals of the image along every geometry ray."""
    _check_image(image, geometry, "forward_project")
    flat = image.values.reshape(-1).astype(np.float64)
    n_v, n_d = geometry.n_views, geometry.n_det
    if n_v <= _FUSED_VIEW_LIMIT:
        idx, wts, step, n_s = _ray_tables_fused(geometry, image.h, image.w)
        acc = (wts * flat[idx]).reshape(n_v, 4, n_d, n_s)
        rows = acc.sum(axis=(1, 3)) * step
    else:
        tables, step, n_s = _ray_tables(geometry, image.h, image.w)
        rows = np.empty((n_v, n_d), dtype=np.float64)
        for v, (idx, wts) in enumerate(tables):
            acc = (wts * flat[idx]).reshape(4, n_d, n_s)
            rows[v] = acc.sum(axis=(0, 2)) * step
    return Sinogram(rows.astype(image.values.dtype))


def back_project(sino: Sinogram, geometry: Geometry, h: int | None = None,
                 w: int | None = None) -> Image:
    """Exact transpose of forward_project (same weights, scattered)."""
    _check_sino(sino, geometry, "back_project")
    if h is None or w is None:
        h = w = _default_image_size(geometry)
    n_v, n_d = geometry.n_views, geometry.n_det
    if n_v <= _FUSED_VIEW_LIMIT:
        idx, wts, step, n_s = _ray_tables_fused(geometry, h, w)
        rows = sino.values.astype(np.float64) * step
        per_entry = np.broadcast_to(rows[:, None, :, None],
                                    (n_v, 4, n_d, n_s)).reshape(-1)
        acc = np.bincount(idx, weights=wts * per_entry, minlength=h * w)
    else:
        tables, step, n_s = _ray_tables(geometry, h, w)
        acc = np.zeros(h * w, dtype=np.float64)
        rows = sino.values.astype(np.float64) * step
        for v, (idx, wts) in enumerate(tables):
            per_entry = np.tile(np.repeat(rows[v], n_s), 4)
            acc += np.bincount(idx, weights=wts * per_entry, minlength=h * w)
    return Image(acc.reshape(h, w).astype(sino.values.dtype),
                 geometry.pixel_mm(w))


def _default_image_size(geometry: Geometry) -> int:
    # Square image whose extent matches the geometry at 2 mm pixels is the
    # desk default; callers reconstructing other sizes pass h, w explicitly.
    return int(round(geometry.image_extent_mm / 2.0))


# ---------------------------------------------------------------------------
# filtered backprojection
# ---------------------------------------------------------------------------

FILTER_RAM_LAK = "ram-lak"
FILTER_HANN = "hann"


@functools.lru_cache(maxsize=8)
def _ramp_response(n_d: int, spacing: float, window: str):
    """Frequency response of the band-limited ramp on a zero-padded grid."""
    length = 1
    while length < 2 * n_d:
        length *= 2
    kernel = np.zeros(length, dtype=np.float64)
    k = np.arange(length)
    dist = np.minimum(k, length - k)  # circular signed distance
    kernel[0] = 1.0 / (4.0 * spacing * spacing)
    odd = dist % 2 == 1
    kernel[odd] = -1.0 / (np.pi * np.pi * dist[odd] ** 2 * spacing * spacing)
    response = np.fft.rfft(kernel).real  # even kernel: real spectrum
    if window == FILTER_HANN:
        freq = np.arange(response.size) / length  # cycles per sample
        response *= 0.5 * (1.0 + np.cos(2.0 * np.pi * freq))
    elif window != FILTER_RAM_LAK:
        raise GeometryError(f"unknown fbp filter {window!r}")
    return response, length


def _filter_rows(rows: np.ndarray, spacing: float, window: str) -> np.ndarray:
    """Ramp-filter each row; symmetric as a matrix (even circular kernel)."""
    n_d = rows.shape[1]
    response, length = _ramp_response(n_d, float(spacing), window)
    spec = np.fft.rfft(rows.astype(np.float64), n=length, axis=1)
    filtered = np.fft.irfft(spec * response, n=length, axis=1)[:, :n_d]
    return filtered * spacing


@functools.lru_cache(maxsize=8)
def _pixel_tables(geometry: Geometry, h: int, w: int):
    """Per-view pixel-driven interpolation tables for FBP backprojection.

    Returns per view (d0, frac, valid, pixel_weight) where the detector
    sample is linear interpolation between bins d0 and d0+1.
    """
    px = geometry.pixel_mm(w)
    xs = (np.arange(w) - (w - 1) / 2.0) * px
    ys = ((h - 1) / 2.0 - np.arange(h)) * px
    X, Y = np.meshgrid(xs, ys)
    angles = geometry.view_angles()
    tables = []
    if geometry.beam == PARALLEL:
        for theta in angles:
            t = X * np.cos(theta) + Y * np.sin(theta)
            fd = t / geometry.det_spacing_mm + (geometry.n_det - 1) / 2.0
            tables.append(_detector_interp(fd, geometry.n_det, 1.0))
    else:
        sad = geometry.sad_mm
        vspacing = geometry.det_spacing_mm * sad / (sad + geometry.add_mm)
        for beta in angles:
            dp = sad - (X * np.cos(beta) + Y * np.sin(beta))
            tau = -X * np.sin(beta) + Y * np.cos(beta)
            u = sad * tau / dp
            fd = u / vspacing + (geometry.n_det - 1) / 2.0
            weight = sad * sad / (dp * dp)
            tables.append(_detector_interp(fd, geometry.n_det, weight))
    return tables


def _detector_interp(fd, n_det, weight):
    d0 = np.floor(fd).astype(np.int64)
    frac = fd - d0
    valid = (d0 >= 0) & (d0 < n_det - 1)
    d0 = np.clip(d0, 0, n_det - 2)
    return d0, frac, valid.astype(np.float64) * weight


def _fbp_weights(geometry: Geometry):
    """Cosine pre-weights per detector (fan) and the angular step weight."""
    start, end = geometry.angular_range
    dtheta = (end - start) / geometry.n_views
    if geometry.full_circle():
        dtheta *= 0.5  # every line is measured twice over a full turn
    if geometry.beam == FAN:
        sad = geometry.sad_mm
        vspacing = geometry.det_spacing_mm * sad / (sad + geometry.add_mm)
        u = (np.arange(geometry.n_det) - (geometry.n_det - 1) / 2.0) * vspacing
        cosw = sad / np.sqrt(sad * sad + u * u)
        return cosw, vspacing, dtheta
    return np.ones(geometry.n_det), geometry.det_spacing_mm, dtheta


def fbp(sino: Sinogram, geometry: Geometry, filter: str = FILTER_RAM_LAK,
        h: int | None = None, w: int | None = None) -> Image:
    """Filtered backprojection; unbiased in magnitude for sparse subsets."""
    _check_sino(sino, geometry, "fbp")
    if geometry.n_views < 2:
        raise GeometryError("fbp needs at least 2 views")
    if h is None or w is None:
        h = w = _default_image_size(geometry)
    cosw, spacing, dtheta = _fbp_weights(geometry)
    rows = sino.values.astype(np.float64) * cosw[None, :]
    q = _filter_rows(rows, spacing, filter)
    tables = _pixel_tables(geometry, h, w)
    out = np.zeros((h, w), dtype=np.float64)
    for v, (d0, frac, wmask) in enumerate(tables):
        row = q[v]
        vals = row[d0] * (1.0 - frac) + row[d0 + 1] * frac
        out += vals * wmask
    return Image((out * dtheta).astype(sino.values.dtype), geometry.pixel_mm(w))


def fbp_transpose(image: Image, geometry: Geometry,
                  filter: str = FILTER_RAM_LAK) -> Sinogram:
    """Exact transpose of fbp as a linear map (for autodiff backward)."""
    _check_image(image, geometry, "fbp_transpose")
    h, w = image.values.shape
    cosw, spacing, dtheta = _fbp_weights(geometry)
    tables = _pixel_tables(geometry, h, w)
    x = image.values.astype(np.float64) * dtheta
    q = np.empty((geometry.n_views, geometry.n_det), dtype=np.float64)
    for v, (d0, frac, wmask) in enumerate(tables):
        contrib = (x * wmask).reshape(-1)
        flat0 = d0.reshape(-1)
        fr = frac.reshape(-1)
        q[v] = np.bincount(flat0, weights=contrib * (1.0 - fr),
                           minlength=geometry.n_det) \
            + np.bincount(flat0 + 1, weights=contrib * fr,
                          minlength=geometry.n_det)
    rows = _filter_rows(q, spacing, filter)  # symmetric filter
    rows *= cosw[None, :]
    return Sinogram(rows.astype(image.values.dtype))


# ---------------------------------------------------------------------------
# view subsampling and measurement noise
# ---------------------------------------------------------------------------

def subsample_views(sino: Sinogram, geometry: Geometry, n_v: int):
    """Keep n_v uniformly spread views: indices round(i * n_full / n_v)."""
    if n_v < 1 or n_v > geometry.n_views_full:
        raise GeometryError(
            f"cannot keep {n_v} of {geometry.n_views_full} views"
        )
    if geometry.n_views != geometry.n_views_full:
        raise GeometryError("subsample_views expects a full-view sinogram")
    _check_sino(sino, geometry, "subsample_views")
    full = geometry.n_views_full
    keep = [int(np.floor(i * full / n_v + 0.5)) for i in range(n_v)]
    sub_geometry = replace(geometry, view_subset=tuple(keep))
    return Sinogram(sino.values[keep].copy()), sub_geometry


def simulate_measurement(sino: Sinogram, poisson_intensity: float,
                         gaussian_frac: float, seed: int,
                         attenuation_cap: float = 4.0) -> Sinogram:
    """Photon-count noise plus relative Gaussian noise, seeded.

    Line integrals are rescaled so their max is attenuation_cap, passed
    through counts ~ Poisson(N0 exp(-y)), floored at one photon, log
    converted back and unscaled; then zero-mean Gaussian noise with
    sigma = gaussian_frac * mean(|y|) is added.
    """
    y = np.asarray(sino.values, dtype=np.float64)
    if np.any(y < 0):
        warnings.warn("negative line integrals clamped to zero before noise",
                      stacklevel=2)
        y = np.maximum(y, 0.0)
    if poisson_intensity < 0:
        raise GeometryError("poisson_intensity must be >= 0")
    rng = substream(seed, "noise")
    out = y.copy()
    ymax = float(y.max())
    if poisson_intensity > 0 and ymax > 0:
        scale = attenuation_cap / ymax
        counts = rng.poisson(poisson_intensity * np.exp(-y * scale))
        counts = np.maximum(counts, 1)
        out = -np.log(counts / poisson_intensity) / scale
    if gaussian_frac > 0:
        sigma = gaussian_frac * float(np.mean(np.abs(y)))
        out = out + rng.normal(0.0, sigma, size=y.shape)
    return Sinogram(out.astype(sino.values.dtype))


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def _check_image(image: Image, geometry: Geometry, op: str):
    if abs(image.pixel_mm * image.w - geometry.image_extent_mm) > 1e-6 * \
            geometry.image_extent_mm:
        raise GeometryError(
            f"{op}: image extent {image.pixel_mm * image.w:.3f} mm does not "
            f"match geometry extent {geometry.image_extent_mm:.3f} mm"
        )


def _check_sino(sino: Sinogram, geometry: Geometry, op: str):
    if sino.n_v != geometry.n_views or sino.n_d != geometry.n_det:
        raise GeometryError(
            f"{op}: sinogram {sino.values.shape} does not match geometry "
            f"({geometry.n_views} views, {geometry.n_det} detectors)"
        )
