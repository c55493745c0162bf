"""Eccentricity-dependent low-pass preprocessing, differentiable end to end.

Each pixel's angular eccentricity (viewer at distance d, image of physical
side s) sets a local acuity radius: r_rad = min(slope * theta, cap), mapped
to pixels through the small-patch projection factor (1 + tan^2 theta). The
local spatial cutoff is pi / r_pixel radians per pixel: two points one blur
radius apart are a half wavelength, hence pi rather than 2*pi.

The image is filtered by a bank of isotropic Gaussian transfer functions
exp(-G^2 / f^2) in the FFT domain, per-pixel linearly interpolated between
the two bracketing cutoffs, then center-cropped to 90% to drop wrap-around
edge artifacts. All stages are linear, so the exact adjoint (crop -> zero
pad, weights -> multiply, filters -> themselves, being real and even) gives
the gradient for attack optimization.

Frequencies are radians/pixel throughout. The last cutoff entry is a
passthrough sentinel (>= 10x Nyquist): that band is the unfiltered image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NYQUIST = math.pi  # radians/pixel
PASSTHROUGH_MIN = 10.0 * NYQUIST

# 8 log-spaced cutoffs pi/64 .. pi, plus the passthrough sentinel
DEFAULT_CUTOFFS = tuple(
    float(v) for v in np.logspace(math.log10(math.pi / 64.0), math.log10(math.pi), 8)
) + (PASSTHROUGH_MIN,)

CROP_FRACTION = 0.9


@dataclass(frozen=True)
class ViewingGeometry:
    """Viewer distance and physical image size, both in meters; square image.

    pixels_per_meter derives from the pixel and physical sizes unless given
    explicitly.
    """

    distance_m: float
    image_size_m: float
    image_px: int
    pixels_per_meter: float = 0.0

    def __post_init__(self):
        if self.distance_m <= 0 or self.image_size_m <= 0 or self.image_px < 2:
            raise ValueError("geometry values must be positive (and image_px >= 2)")
        if self.pixels_per_meter == 0.0:
            object.__setattr__(self, "pixels_per_meter", self.image_px / self.image_size_m)
        elif self.pixels_per_meter <= 0:
            raise ValueError("pixels_per_meter must be positive")

    def to_json_dict(self) -> dict:
        return {
            "distance_m": self.distance_m,
            "image_size_m": self.image_size_m,
            "image_px": self.image_px,
            "pixels_per_meter": self.pixels_per_meter,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ViewingGeometry":
        return ViewingGeometry(
            distance_m=float(d["distance_m"]),
            image_size_m=float(d["image_size_m"]),
            image_px=int(d["image_px"]),
            pixels_per_meter=float(d.get("pixels_per_meter", 0.0)),
        )


@dataclass(frozen=True)
class RetinaParams:
    """Acuity model: radius slope (per radian), radius cap (radians), and the
    ascending cutoff list whose last entry is the passthrough sentinel."""

    slope: float = 0.05
    max_radius_rad: float = 0.1
    cutoffs: tuple[float, ...] = DEFAULT_CUTOFFS

    def __post_init__(self):
        if self.slope <= 0 or self.max_radius_rad <= 0:
            raise ValueError("slope and max_radius_rad must be positive")
        if len(self.cutoffs) < 2:
            raise ValueError("need at least one finite cutoff plus the sentinel")
        if any(b <= a for a, b in zip(self.cutoffs, self.cutoffs[1:])):
            raise ValueError("cutoffs must be strictly ascending")
        if any(c <= 0 for c in self.cutoffs):
            raise ValueError("cutoffs must be positive")
        if self.cutoffs[-1] < PASSTHROUGH_MIN:
            raise ValueError(
                f"last cutoff must be a passthrough sentinel >= {PASSTHROUGH_MIN:.3f} rad/pixel"
            )


def full_image_visual_angle_deg(geom: ViewingGeometry) -> float:
    """Angle subtended edge-to-edge by the full image at the viewer."""
    return math.degrees(2.0 * math.atan(0.5 * geom.image_size_m / geom.distance_m))


def eccentricity_cutoff_map(geom: ViewingGeometry, params: RetinaParams) -> np.ndarray:
    """Per-pixel spatial cutoff in radians/pixel, clamped to the cutoff range.

    The center pixel of an odd-sized image has zero blur radius; it (and any
    pixel whose demanded cutoff exceeds the sentinel) clamps to passthrough.
    """
    n = geom.image_px
    offsets = (np.arange(n, dtype=np.float64) - (n - 1) / 2.0) / geom.pixels_per_meter
    dy, dx = np.meshgrid(offsets, offsets, indexing="ij")
    radius_m = np.sqrt(dx * dx + dy * dy)
    theta = np.arctan(radius_m / geom.distance_m)
    r_rad = np.minimum(params.slope * theta, params.max_radius_rad)
    r_m = r_rad * (1.0 + np.tan(theta) ** 2)
    r_px = r_m * geom.pixels_per_meter
    with np.errstate(divide="ignore"):
        cutoff = np.where(r_px > 0.0, np.pi / np.where(r_px > 0.0, r_px, 1.0), np.inf)
    return np.clip(cutoff, params.cutoffs[0], params.cutoffs[-1])


def _freq_norm_grid(h: int, w: int) -> np.ndarray:
    fy = 2.0 * np.pi * np.fft.fftfreq(h)
    fx = 2.0 * np.pi * np.fft.fftfreq(w)
    gy, gx = np.meshgrid(fy, fx, indexing="ij")
    return np.sqrt(gy * gy + gx * gx)


def lowpass_bank(image: np.ndarray, cutoffs) -> np.ndarray:
    """Stack of low-pass versions of image, one per cutoff (rad/pixel).

    Cutoffs at or above 10x Nyquist are passthrough: that slice equals the
    input exactly. Every filter has DC gain exactly 1. The tiny imaginary
    residue of the inverse FFT is discarded.
    """
    x = np.asarray(image, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    h, w, _ = x.shape
    g2 = _freq_norm_grid(h, w) ** 2
    spectrum = np.fft.fft2(x, axes=(0, 1))
    out = np.empty((len(tuple(cutoffs)), h, w, x.shape[2]), dtype=np.float64)
    for i, f in enumerate(cutoffs):
        if f >= PASSTHROUGH_MIN:
            out[i] = x
            continue
        mask = np.exp(-g2 / (f * f))
        out[i] = np.real(np.fft.ifft2(spectrum * mask[:, :, None], axes=(0, 1)))
    return out[:, :, :, 0] if squeeze else out


def crop_bounds(n: int, fraction: float = CROP_FRACTION) -> tuple[int, int]:
    """Center-crop index range [start, stop) keeping round(fraction * n)."""
    keep = int(np.rint(fraction * n))
    start = (n - keep) // 2
    return start, start + keep


def center_crop(image: np.ndarray, fraction: float = CROP_FRACTION) -> np.ndarray:
    """Center crop both spatial dims to round(fraction * n); no resize."""
    x = np.asarray(image)
    r0, r1 = crop_bounds(x.shape[0], fraction)
    c0, c1 = crop_bounds(x.shape[1], fraction)
    return x[r0:r1, c0:c1]


def center_crop_adjoint(y: np.ndarray, full_hw: tuple[int, int],
                        fraction: float = CROP_FRACTION) -> np.ndarray:
    """Adjoint of center_crop: zero-pad back to the full spatial dims."""
    h, w = full_hw
    r0, r1 = crop_bounds(h, fraction)
    c0, c1 = crop_bounds(w, fraction)
    if y.shape[0] != r1 - r0 or y.shape[1] != c1 - c0:
        raise ValueError(f"cropped shape {y.shape[:2]} does not match {full_hw} at {fraction}")
    out = np.zeros((h, w) + y.shape[2:], dtype=np.float64)
    out[r0:r1, c0:c1] = y
    return out


class BlurOperator:
    """Precomputed retinal blur for one (geometry, params) pair.

    apply() maps a full image to the cropped blurred image; adjoint() is its
    exact transpose. Safe to share read-only across threads.
    """

    def __init__(self, geom: ViewingGeometry, params: RetinaParams):
        self.geom = geom
        self.params = params
        n = geom.image_px
        cutoffs = np.asarray(params.cutoffs, dtype=np.float64)
        fmap = eccentricity_cutoff_map(geom, params)

        # bracket each pixel's cutoff between neighbours j-1, j
        j = np.searchsorted(cutoffs, fmap, side="right")
        j = np.clip(j, 1, len(cutoffs) - 1)
        lower = cutoffs[j - 1]
        upper = cutoffs[j]
        t = np.clip((fmap - lower) / (upper - lower), 0.0, 1.0)
        weights = np.zeros((len(cutoffs), n, n), dtype=np.float64)
        rows = np.arange(n)[:, None] * np.ones(n, dtype=int)[None, :]
        cols = np.ones(n, dtype=int)[:, None] * np.arange(n)[None, :]
        weights[j - 1, rows, cols] += 1.0 - t
        weights[j, rows, cols] += t
        self.cutoff_map = fmap
        self.weights = weights

        g2 = _freq_norm_grid(n, n) ** 2
        self.masks: list[np.ndarray | None] = []
        for f in params.cutoffs:
            if f >= PASSTHROUGH_MIN:
                self.masks.append(None)  # identity band
            else:
                self.masks.append(np.exp(-g2 / (f * f)))
        self._bounds = crop_bounds(n)

    @property
    def out_px(self) -> int:
        r0, r1 = self._bounds
        return r1 - r0

    def _as_3d(self, image: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            return x[:, :, None], True
        if x.ndim == 3:
            return x, False
        raise ValueError(f"expected (H, W) or (H, W, C), got {x.shape}")

    def apply_precrop(self, image: np.ndarray) -> np.ndarray:
        x, squeeze = self._as_3d(image)
        n = self.geom.image_px
        if x.shape[:2] != (n, n):
            raise ValueError(f"expected {n}x{n} image, got {x.shape[:2]}")
        spectrum = np.fft.fft2(x, axes=(0, 1))
        acc = np.zeros_like(x)
        for band, mask in enumerate(self.masks):
            w = self.weights[band][:, :, None]
            if mask is None:
                acc += w * x
            else:
                band_img = np.real(np.fft.ifft2(spectrum * mask[:, :, None], axes=(0, 1)))
                acc += w * band_img
        return acc[:, :, 0] if squeeze else acc

    def apply(self, image: np.ndarray) -> np.ndarray:
        return center_crop(self.apply_precrop(image))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Exact transpose of apply(): cropped-image cotangent to full image."""
        yy, squeeze = self._as_3d(y)
        n = self.geom.image_px
        padded = center_crop_adjoint(yy, (n, n))
        acc = np.zeros_like(padded)
        for band, mask in enumerate(self.masks):
            wz = self.weights[band][:, :, None] * padded
            if mask is None:
                acc += wz
            else:
                # real, even transfer function: the filter is self-adjoint
                acc += np.real(np.fft.ifft2(np.fft.fft2(wz, axes=(0, 1)) * mask[:, :, None], axes=(0, 1)))
        return acc[:, :, 0] if squeeze else acc


_OPERATOR_CACHE: dict[tuple, BlurOperator] = {}


def blur_operator(geom: ViewingGeometry, params: RetinaParams) -> BlurOperator:
    """Cached constructor: the bank for a fixed geometry is built once."""
    key = (geom, params)
    op = _OPERATOR_CACHE.get(key)
    if op is None:
        op = _OPERATOR_CACHE[key] = BlurOperator(geom, params)
    return op


def retinal_blur(image: np.ndarray, geom: ViewingGeometry, params: RetinaParams) -> np.ndarray:
    """Eccentricity-dependent blur + 90% center crop of a full-size image."""
    return blur_operator(geom, params).apply(image)


def retinal_blur_adjoint(y: np.ndarray, geom: ViewingGeometry, params: RetinaParams) -> np.ndarray:
    """Adjoint of retinal_blur; exact, for gradient propagation."""
    return blur_operator(geom, params).adjoint(y)
