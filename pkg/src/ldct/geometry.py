"""Fan-beam scan geometry, forward projector and filtered backprojection.

Coordinate conventions
----------------------
Image pixel ``(row, col)`` has its centre at
``x = (col - c) * pixel_spacing``, ``y = (c - row) * pixel_spacing`` with
``c = (image_size - 1) / 2``; rows run top to bottom.  For view ``k`` the
source sits at ``D * (cos b, sin b)`` with ``b = k * angular_range /
num_views`` and ``D = source_to_center``.  The detector is an equiangular
arc: bin ``m`` sees the ray at fan angle
``(m - (num_detector_bins - 1) / 2) * delta_gamma`` measured from the
central ray, with ``delta_gamma = detector_bin_spacing / (D + d)``.

Sinograms are stored as ``(num_views, num_detector_bins)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace

import numba
import numpy as np

from .errors import ConfigurationError, ValidationError

MU_WATER = 0.0192  # mm^-1
DEFAULT_WINDOW = (-1024.0, 3072.0)
DETECTOR_LAYOUT = "equiangular-arc"


def mu_to_hu(mu):
    return 1000.0 * (np.asarray(mu) - MU_WATER) / MU_WATER


def hu_to_mu(hu):
    return MU_WATER * (1.0 + np.asarray(hu) / 1000.0)


@dataclass(frozen=True)
class ScanGeometry:
    source_to_center: float = 1361.2
    detector_to_center: float = 615.18
    num_views: int = 720
    angular_range: float = 2 * math.pi
    num_detector_bins: int = 720
    detector_bin_spacing: float = 1.2858
    image_size: int = 512
    pixel_spacing: float = 0.68359375

    def __post_init__(self):
        if self.source_to_center <= 0 or self.detector_to_center <= 0:
            raise ConfigurationError("source and detector distances must be positive")
        if int(self.num_views) < 2:
            raise ValidationError(f"need at least 2 views, got {self.num_views}")
        if not (0 < self.angular_range <= 2 * math.pi + 1e-9):
            raise ConfigurationError("angular_range must lie in (0, 2*pi]")
        if self.num_detector_bins < 1 or self.detector_bin_spacing <= 0:
            raise ConfigurationError("detector layout must have positive bin count and spacing")
        if self.image_size <= 0 or self.pixel_spacing <= 0:
            raise ConfigurationError("image_size and pixel_spacing must be positive")
        radius = 0.5 * self.image_size * self.pixel_spacing
        if radius >= self.source_to_center:
            raise ConfigurationError("image circle encloses the source")
        if math.asin(radius / self.source_to_center) > self.fan_half_angle + 1e-12:
            raise ConfigurationError(
                "inscribed image circle does not fit inside the fan; "
                "increase num_detector_bins or detector_bin_spacing")

    @classmethod
    def for_image(cls, image_size=512, num_views=720, num_detector_bins=None,
                  field_of_view=350.0, margin=1.05, **kwargs):
        """Geometry whose fan just covers the inscribed circle of the image.

        ``field_of_view`` is the physical width of the image square in mm;
        ``margin`` widens the fan beyond the inscribed circle.
        """
        source = kwargs.pop("source_to_center", cls.source_to_center)
        detector = kwargs.pop("detector_to_center", cls.detector_to_center)
        if num_detector_bins is None:
            num_detector_bins = max(2, 2 * int(math.ceil(0.75 * image_size)))
        half = math.asin(min(1.0, margin * field_of_view / 2 / source))
        dgamma = 2 * half / num_detector_bins
        return cls(source_to_center=source, detector_to_center=detector,
                   num_views=num_views, num_detector_bins=num_detector_bins,
                   detector_bin_spacing=dgamma * (source + detector),
                   image_size=image_size, pixel_spacing=field_of_view / image_size,
                   **kwargs)

    @property
    def delta_gamma(self) -> float:
        return self.detector_bin_spacing / (self.source_to_center + self.detector_to_center)

    @property
    def fan_half_angle(self) -> float:
        return 0.5 * self.num_detector_bins * self.delta_gamma

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (int(self.num_views), int(self.num_detector_bins))

    @property
    def image_shape(self) -> tuple[int, int]:
        return (int(self.image_size), int(self.image_size))

    @property
    def is_full_scan(self) -> bool:
        return abs(self.angular_range - 2 * math.pi) < 1e-9

    def view_angles(self) -> np.ndarray:
        return np.arange(self.num_views) * (self.angular_range / self.num_views)

    def fan_angles(self) -> np.ndarray:
        return (np.arange(self.num_detector_bins) - 0.5 * (self.num_detector_bins - 1)) * self.delta_gamma

    def with_views(self, num_views: int) -> "ScanGeometry":
        return replace(self, num_views=int(num_views))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector_layout"] = DETECTOR_LAYOUT
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        d = {k: v for k, v in d.items() if k != "detector_layout"}
        return cls(**d)


@dataclass
class Sinogram:
    data: np.ndarray
    geometry: ScanGeometry
    dose_tag: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.geometry.sinogram_shape:
            raise ConfigurationError(
                f"sinogram shape {self.data.shape} does not match geometry {self.geometry.sinogram_shape}")
        if not np.isfinite(self.data).all():
            raise ValidationError("sinogram contains non-finite values")
        if self.dose_tag is not None and not (0 < self.dose_tag <= 1):
            raise ValidationError(f"dose_tag must lie in (0, 1], got {self.dose_tag}")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, dose_tag=...) -> "Sinogram":
        return Sinogram(data, self.geometry, self.dose_tag if dose_tag is ... else dose_tag)


@dataclass
class CTImage:
    """Attenuation image in mm^-1; ``hu()`` applies the fixed water map."""

    data: np.ndarray
    hu_window: tuple[float, float] = field(default=DEFAULT_WINDOW)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValidationError(f"CTImage must be 2-D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValidationError("image contains non-finite values")
        self.hu_window = (float(self.hu_window[0]), float(self.hu_window[1]))

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def hu(self) -> np.ndarray:
        return mu_to_hu(self.data)

    @classmethod
    def from_hu(cls, hu, hu_window=DEFAULT_WINDOW) -> "CTImage":
        return cls(hu_to_mu(hu), hu_window)


# ---------------------------------------------------------------------------
# kernels

@numba.njit(cache=True)
def _ray_kernel(image, out_sino, betas, gammas, D, pix, step, radius, adjoint):
    """Ray-driven projector with bilinear sampling.

    With ``adjoint`` False it fills ``out_sino`` from ``image``; with True it
    scatters ``out_sino`` back into ``image`` using identical weights, so the
    two modes are exact transposes of each other.
    """
    n = image.shape[0]
    c = 0.5 * (n - 1)
    for v in range(betas.shape[0]):
        cb = math.cos(betas[v])
        sb = math.sin(betas[v])
        sx = D * cb
        sy = D * sb
        for k in range(gammas.shape[0]):
            cg = math.cos(gammas[k])
            sg = math.sin(gammas[k])
            dx = -cg * cb - sg * sb
            dy = -cg * sb + sg * cb
            proj = sx * dx + sy * dy
            disc = proj * proj - (D * D - radius * radius)
            if disc <= 0.0:
                continue
            root = math.sqrt(disc)
            t0 = -proj - root
            length = 2.0 * root
            ns = int(math.ceil(length / step))
            dt = length / ns
            acc = 0.0
            val = out_sino[v, k] * dt if adjoint else 0.0
            for m in range(ns):
                t = t0 + (m + 0.5) * dt
                col = (sx + t * dx) / pix + c
                row = c - (sy + t * dy) / pix
                i0 = int(math.floor(row))
                j0 = int(math.floor(col))
                fr = row - i0
                fc = col - j0
                for di in range(2):
                    ii = i0 + di
                    if ii < 0 or ii >= n:
                        continue
                    wr = fr if di == 1 else 1.0 - fr
                    for dj in range(2):
                        jj = j0 + dj
                        if jj < 0 or jj >= n:
                            continue
                        w = wr * (fc if dj == 1 else 1.0 - fc)
                        if adjoint:
                            image[ii, jj] += w * val
                        else:
                            acc += w * image[ii, jj]
            if not adjoint:
                out_sino[v, k] = acc * dt


@numba.njit(cache=True)
def _fan_backproject(filtered, betas, dgamma, D, n, pix):
    """Distance-weighted pixel-driven backprojection of filtered views."""
    img = np.zeros((n, n))
    nb = filtered.shape[1]
    c = 0.5 * (n - 1)
    cbin = 0.5 * (nb - 1)
    for v in range(betas.shape[0]):
        cb = math.cos(betas[v])
        sb = math.sin(betas[v])
        for i in range(n):
            y = (c - i) * pix
            for j in range(n):
                x = (j - c) * pix
                U = D - (x * cb + y * sb)
                V = -x * sb + y * cb
                pos = math.atan2(V, U) / dgamma + cbin
                k0 = int(math.floor(pos))
                if k0 < 0 or k0 + 1 >= nb:
                    continue
                f = pos - k0
                q = (1.0 - f) * filtered[v, k0] + f * filtered[v, k0 + 1]
                img[i, j] += q / (U * U + V * V)
    return img


# ---------------------------------------------------------------------------
# operators

def _projection_radius(geometry: ScanGeometry) -> float:
    # circumscribed circle of the pixel grid plus one pixel of bilinear support
    return (0.5 * math.sqrt(2.0) * geometry.image_size + 1.0) * geometry.pixel_spacing


def _check_image(data: np.ndarray, geometry: ScanGeometry) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.shape != geometry.image_shape:
        raise ConfigurationError(f"image shape {data.shape} does not match geometry {geometry.image_shape}")
    if not np.isfinite(data).all():
        raise ValidationError("image contains non-finite values")
    return np.ascontiguousarray(data)


def forward_project(image, geometry: ScanGeometry, step: float = 0.5) -> Sinogram:
    """Line integrals of ``image`` along every ray of ``geometry``.

    ``step`` is the ray sampling interval in pixels.
    """
    data = image.data if isinstance(image, CTImage) else image
    data = _check_image(data, geometry)
    out = np.zeros(geometry.sinogram_shape)
    _ray_kernel(data, out, geometry.view_angles(), geometry.fan_angles(),
                float(geometry.source_to_center), float(geometry.pixel_spacing),
                step * geometry.pixel_spacing, _projection_radius(geometry), False)
    return Sinogram(out, geometry)


def backproject(sinogram, geometry: ScanGeometry | None = None, step: float = 0.5) -> np.ndarray:
    """Unfiltered backprojection, the exact transpose of ``forward_project``."""
    if isinstance(sinogram, Sinogram):
        geometry = sinogram.geometry
        data = sinogram.data
    else:
        data = np.asarray(sinogram, dtype=np.float64)
        if geometry is None or data.shape != geometry.sinogram_shape:
            raise ConfigurationError("backproject needs a sinogram matching the geometry")
    img = np.zeros(geometry.image_shape)
    _ray_kernel(img, np.ascontiguousarray(data), geometry.view_angles(), geometry.fan_angles(),
                float(geometry.source_to_center), float(geometry.pixel_spacing),
                step * geometry.pixel_spacing, _projection_radius(geometry), True)
    return img


def fan_filter_kernel(num_bins: int, dgamma: float) -> np.ndarray:
    """Equiangular ramp kernel sampled at offsets ``-(N-1)..(N-1)``.

    Centre tap ``1/(8 dg^2)``, zero at even offsets, and
    ``-1/(2 pi^2 sin^2(n dg))`` at odd offsets (Kak & Slaney, ch. 3).
    """
    n = np.arange(-(num_bins - 1), num_bins)
    g = np.zeros(n.shape)
    g[n == 0] = 1.0 / (8.0 * dgamma ** 2)
    odd = (n % 2) != 0
    g[odd] = -1.0 / (2.0 * np.pi ** 2 * np.sin(n[odd] * dgamma) ** 2)
    return g


def filter_views(data: np.ndarray, geometry: ScanGeometry, window: str = "ram-lak") -> np.ndarray:
    nb = geometry.num_detector_bins
    dg = geometry.delta_gamma
    gammas = geometry.fan_angles()
    weighted = data * (geometry.source_to_center * np.cos(gammas))[None, :]
    kernel = fan_filter_kernel(nb, dg)
    nfft = 1 << int(math.ceil(math.log2(3 * nb - 2)))
    kpad = np.zeros(nfft)
    kpad[: 2 * nb - 1] = kernel
    kf = np.fft.rfft(kpad)
    if window == "hann":
        f = np.fft.rfftfreq(nfft)
        kf = kf * (0.5 + 0.5 * np.cos(2 * np.pi * f))
    elif window != "ram-lak":
        raise ConfigurationError(f"unknown reconstruction filter window {window!r}")
    full = np.fft.irfft(np.fft.rfft(weighted, n=nfft, axis=1) * kf[None, :], n=nfft, axis=1)
    return dg * full[:, nb - 1: 2 * nb - 1]


def fbp_reconstruct(sinogram: Sinogram, window: str = "ram-lak",
                    hu_window=DEFAULT_WINDOW) -> CTImage:
    """Equiangular fan-beam filtered backprojection over a full 360 degree scan."""
    geometry = sinogram.geometry
    if geometry.num_views < 2:
        raise ValidationError("FBP needs at least 2 views")
    if not geometry.is_full_scan:
        raise ConfigurationError("only full 360 degree scans are supported (no short-scan weighting)")
    filtered = np.ascontiguousarray(filter_views(sinogram.data, geometry, window))
    img = _fan_backproject(filtered, geometry.view_angles(), geometry.delta_gamma,
                           float(geometry.source_to_center), geometry.image_size,
                           float(geometry.pixel_spacing))
    img *= geometry.angular_range / geometry.num_views
    return CTImage(img, hu_window)


def reconstruction_mask(geometry: ScanGeometry) -> np.ndarray:
    """Pixels inside the inscribed reconstruction circle."""
    n = geometry.image_size
    c = 0.5 * (n - 1)
    yy, xx = np.mgrid[:n, :n]
    return (xx - c) ** 2 + (yy - c) ** 2 <= (0.5 * n) ** 2
