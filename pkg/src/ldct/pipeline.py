"""Dataset construction and stage orchestration shared by the CLI and tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dose import DoseConfig, simulate_low_dose
from .geometry import CTImage, ScanGeometry, Sinogram, fbp_reconstruct, forward_project
from .phantom import PhantomSpec, generate

log = logging.getLogger(__name__)


@dataclass
class Case:
    seed: int
    phantom: CTImage
    clean: Sinogram
    noisy: dict  # dose fraction -> Sinogram

    _ndct: CTImage | None = None

    @property
    def ndct(self) -> CTImage:
        """FBP of the noiseless sinogram: the full-dose reference."""
        if self._ndct is None:
            self._ndct = fbp_reconstruct(self.clean)
        return self._ndct


def desk_geometry(image_size: int = 64, num_views: int = 180, pixel_spacing: float = 0.68359375,
                  num_detector_bins: int | None = None) -> ScanGeometry:
    """Scanner distances of the clinical protocol, shrunk field of view."""
    return ScanGeometry.for_image(image_size, num_views, num_detector_bins,
                                  field_of_view=image_size * pixel_spacing)


def simulate_case(seed: int, geometry: ScanGeometry, doses, dose_cfg: DoseConfig = DoseConfig(),
                  kind: str = "random-ellipses") -> Case:
    """Phantom, clean sinogram and one low-dose sinogram per dose fraction.

    Noise for phantom ``seed`` at dose ``f`` comes from the sub-stream
    ``("simulate", seed, f)`` under ``dose_cfg.rng_seed``.
    """
    phantom = generate(PhantomSpec(kind, geometry.image_size, seed))
    clean = forward_project(phantom, geometry)
    noisy = {}
    for f in doses:
        cfg = DoseConfig(dose_cfg.incident_photons, dose_cfg.electronic_noise_variance, float(f), dose_cfg.rng_seed)
        noisy[float(f)] = simulate_low_dose(clean, cfg, stream=("simulate", seed, repr(float(f))))
    return Case(seed, phantom, clean, noisy)


def simulate_cases(seeds, geometry: ScanGeometry, doses, dose_cfg: DoseConfig = DoseConfig(),
                   kind: str = "random-ellipses") -> list[Case]:
    return [simulate_case(s, geometry, doses, dose_cfg, kind) for s in seeds]


def prior_images(sinos, proj_ckpt, net=None):
    """``(FBP(y_ld), FBP(f(y_ld)))`` for every low-dose sinogram."""
    from .projection import denoise_projection

    net = net or proj_ckpt.build()
    out = []
    for y in sinos:
        out.append((fbp_reconstruct(y), fbp_reconstruct(denoise_projection(y, proj_ckpt, net))))
    return out


def mean_psnr_gain(preds, refs, baselines, window=(-1024.0, 3072.0)) -> float:
    from .metrics import evaluate

    gains = [evaluate(p, r, window, metrics=()).psnr - evaluate(b, r, window, metrics=()).psnr
             for p, r, b in zip(preds, refs, baselines)]
    return float(np.mean(gains))
