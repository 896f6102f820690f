"""Analytic ellipse phantoms.

Ellipses live on the unit square ``[-1, 1]^2`` (x right, y up) and carry
an attenuation in units of ``MU_WATER`` that is added wherever the ellipse
covers a point.  Rasterisation averages ``supersample**2`` sub-pixel
samples per pixel, which keeps edge pixels at their area fraction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import CTImage, MU_WATER, mu_to_hu
from .rng import make_rng

# Modified Shepp-Logan (Toft), intensities rescaled so that the skull sits
# at +1000 HU and the brain at -600 HU: mu = intensity * 2 * MU_WATER.
# (value, semi-axis a, semi-axis b, x0, y0, angle in degrees)
_SHEPP_LOGAN = [
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0),
]
SHEPP_LOGAN_SCALE = 2.0

# Random-ellipse generator ranges, in MU_WATER units.
BODY_MU = (0.9, 1.1)
INSERT_MU = (-0.9, 1.0)
MAX_INSERTS = 6
# Inserts are disjoint and lie inside the body, so the image mean (MU_WATER
# units) is area_frac * (body + insert share) with area_frac at most
# pi * 0.9 * 0.9 / 4 and the insert share at most 1.0 of the body area.
RANDOM_MEAN_BOUNDS = (0.0, np.pi * 0.81 / 4 * (BODY_MU[1] + INSERT_MU[1]))


@dataclass(frozen=True)
class Ellipse:
    mu: float
    a: float
    b: float
    x0: float = 0.0
    y0: float = 0.0
    angle: float = 0.0  # degrees

    def inside_unit_disk(self) -> bool:
        t = np.linspace(0, 2 * np.pi, 721)
        th = np.deg2rad(self.angle)
        px = self.x0 + self.a * np.cos(t) * np.cos(th) - self.b * np.sin(t) * np.sin(th)
        py = self.y0 + self.a * np.cos(t) * np.sin(th) + self.b * np.sin(t) * np.cos(th)
        return bool(np.all(px ** 2 + py ** 2 <= 1.0 + 1e-9))


@dataclass
class PhantomSpec:
    kind: str = "shepp-logan"
    size: int = 256
    seed: int = 0
    ellipses: list = field(default_factory=list)
    supersample: int = 4


def shepp_logan_ellipses() -> list[Ellipse]:
    return [Ellipse(SHEPP_LOGAN_SCALE * v, a, b, x, y, ang) for v, a, b, x, y, ang in _SHEPP_LOGAN]


def random_ellipses(seed: int) -> list[Ellipse]:
    """A water-like body ellipse with up to six inserts placed inside it."""
    rng = make_rng(seed, "phantom")
    a = rng.uniform(0.6, 0.9)
    b = rng.uniform(0.6, 0.9)
    body = Ellipse(rng.uniform(*BODY_MU), a, b, 0.0, 0.0, rng.uniform(-30, 30))
    out = [body]
    discs = []  # bounding circles of accepted inserts
    for _ in range(int(rng.integers(2, MAX_INSERTS + 1))):
        for _attempt in range(20):
            r = rng.uniform(0.05, 0.3)
            # keep the insert well inside the smaller body axis
            reach = max(0.0, min(a, b) - r - 0.02)
            rad = reach * np.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * np.pi)
            cx, cy = rad * np.cos(phi), rad * np.sin(phi)
            if all(np.hypot(cx - x, cy - y) > r + q for x, y, q in discs):
                break
        else:
            continue
        discs.append((cx, cy, r))
        out.append(Ellipse(rng.uniform(*INSERT_MU), r * rng.uniform(0.5, 1.0),
                           r * rng.uniform(0.5, 1.0), cx, cy, rng.uniform(0, 180)))
    return out


def rasterize(ellipses, size: int, supersample: int = 4) -> np.ndarray:
    """Area-averaged rasterisation; returns attenuation in mm^-1."""
    s = int(supersample)
    # sub-sample centres on the [-1, 1] square, y pointing up
    u = (np.arange(size * s) + 0.5) / (size * s) * 2.0 - 1.0
    xx, yy = np.meshgrid(u, -u)
    acc = np.zeros_like(xx)
    for e in ellipses:
        th = np.deg2rad(e.angle)
        dx = xx - e.x0
        dy = yy - e.y0
        xr = dx * np.cos(th) + dy * np.sin(th)
        yr = -dx * np.sin(th) + dy * np.cos(th)
        acc += e.mu * ((xr / e.a) ** 2 + (yr / e.b) ** 2 <= 1.0)
    acc = acc.reshape(size, s, size, s).mean(axis=(1, 3))
    return acc * MU_WATER


def generate(spec: PhantomSpec) -> CTImage:
    if spec.size <= 0:
        raise ValidationError("phantom size must be positive")
    if spec.kind == "shepp-logan":
        ellipses = spec.ellipses or shepp_logan_ellipses()
    elif spec.kind == "random-ellipses":
        ellipses = spec.ellipses or random_ellipses(spec.seed)
    else:
        raise ValidationError(f"unknown phantom kind {spec.kind!r}")
    for e in ellipses:
        if not e.inside_unit_disk():
            raise ValidationError(f"ellipse {e} leaves the unit disk")
    mu = rasterize(ellipses, spec.size, spec.supersample)
    hu = mu_to_hu(mu)
    # background air maps to -1000 HU; check only the covered pixels
    if hu.min() < -1024 - 1e-6 or hu.max() > 3072 + 1e-6 or mu.min() < -1e-12:
        raise ValidationError("phantom attenuation leaves the [-1024, 3072] HU range")
    return CTImage(np.maximum(mu, 0.0))


def split_seeds(n_train: int, n_test: int, base: int = 0) -> tuple[list[int], list[int]]:
    """Disjoint seed ranges: training seeds first, test seeds after a gap."""
    train = list(range(base, base + n_train))
    start = base + n_train + 10_000
    return train, list(range(start, start + n_test))
