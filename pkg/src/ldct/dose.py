"""Poisson + Gaussian low-dose measurement model in the log domain."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import Sinogram
from .rng import make_rng

log = logging.getLogger(__name__)

# exp(-y) * I_eff above this would overflow float64 counts
_MAX_EXPECTED_COUNTS = 1e300


@dataclass(frozen=True)
class DoseConfig:
    incident_photons: float = 1.5e5
    electronic_noise_variance: float = 10.0
    dose_fraction: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.incident_photons > 0:
            raise ValidationError("incident_photons must be positive")
        if self.electronic_noise_variance < 0:
            raise ValidationError("electronic_noise_variance must be non-negative")
        if not (0 < self.dose_fraction <= 1):
            raise ValidationError(f"dose_fraction must lie in (0, 1], got {self.dose_fraction}")

    @property
    def effective_photons(self) -> float:
        return self.dose_fraction * self.incident_photons


def sample_counts(y0: np.ndarray, cfg: DoseConfig, rng: np.random.Generator,
                  warnings: list | None = None) -> np.ndarray:
    """Detector counts ``Poisson(I_eff exp(-y0)) + N(0, sigma_e^2)`` before clamping."""
    expected = cfg.effective_photons * np.exp(-y0)
    if not np.isfinite(expected).all() or expected.max(initial=0) > _MAX_EXPECTED_COUNTS:
        msg = "expected counts overflow; clamped"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        expected = np.minimum(np.nan_to_num(expected, posinf=_MAX_EXPECTED_COUNTS), _MAX_EXPECTED_COUNTS)
    counts = rng.poisson(expected).astype(np.float64)
    if cfg.electronic_noise_variance > 0:
        counts += rng.normal(0.0, np.sqrt(cfg.electronic_noise_variance), size=counts.shape)
    return counts


def simulate_low_dose(clean: Sinogram, cfg: DoseConfig, stream=("simulate",),
                      warnings: list | None = None) -> Sinogram:
    """Noisy log sinogram ``ln(I_eff / max(counts, 1))``.

    The random stream is ``make_rng(cfg.rng_seed, *stream)``; identical
    inputs give bit-identical outputs.
    """
    y0 = clean.data
    if (y0 < 0).any():
        raise ValidationError("clean sinogram has negative line integrals")
    rng = make_rng(cfg.rng_seed, *stream)
    counts = sample_counts(y0, cfg, rng, warnings)
    counts = np.maximum(counts, 1.0)
    y_ld = np.log(cfg.effective_photons / counts)
    # counts above I_eff give small negative log values; the sinogram type keeps values >= 0
    y_ld = np.maximum(y_ld, 0.0)
    return Sinogram(y_ld, clean.geometry, cfg.dose_fraction)


def make_dose_series(clean: Sinogram, fractions, base_cfg: DoseConfig) -> list[Sinogram]:
    """One low-dose sinogram per fraction, each on its own sub-stream.

    Sub-stream for the k-th fraction is ``("dose-series", k)`` under the
    base seed, so reordering the list changes which stream a fraction gets
    but never correlates two members of one series.
    """
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise ValidationError("dose fraction list is empty")
    if len(set(fractions)) != len(fractions):
        raise ValidationError(f"duplicate dose fractions in {fractions}")
    out = []
    for k, f in enumerate(fractions):
        cfg = DoseConfig(base_cfg.incident_photons, base_cfg.electronic_noise_variance, f, base_cfg.rng_seed)
        out.append(simulate_low_dose(clean, cfg, stream=("dose-series", k)))
    return out
