"""Pixel-level self-correcting fusion and the end-to-end inference cascade."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy import ndimage

from .diffusion import DiffusionSchedule, forward_diffuse, reverse_step
from .errors import ConfigurationError, ContractViolation, LDCTError, StageError, ValidationError
from .geometry import CTImage, Sinogram, fbp_reconstruct
from .manifest import config_hash
from .rng import derive_seed, torch_generator

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass(frozen=True)
class FusionConfig:
    k1: float = 10.0  # noise-confidence slope
    k2: float = 10.0  # edge-confidence slope
    tau_e: float = 0.15
    tau_n: float = 0.3
    dose_shift: float = 0.0
    noise_window: int = 7
    gradient_operator: str = "sobel"
    percentile: float = 99.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigurationError("k1 and k2 must be positive")
        if not -1.0 <= self.dose_shift <= 1.0:
            raise ConfigurationError(f"dose_shift must lie in [-1, 1], got {self.dose_shift}")
        if self.noise_window < 3 or self.noise_window % 2 == 0:
            raise ConfigurationError("noise_window must be odd and >= 3")
        if self.gradient_operator != "sobel":
            raise ConfigurationError("only the Sobel gradient operator is available")


@dataclass
class FusionWeightMap:
    lam: np.ndarray
    C_e: np.ndarray
    C_n: np.ndarray
    G: np.ndarray
    N: np.ndarray

    def stats(self) -> dict:
        return {"lambda_mean": float(self.lam.mean()), "lambda_min": float(self.lam.min()),
                "lambda_max": float(self.lam.max()), "C_e_mean": float(self.C_e.mean()),
                "C_n_mean": float(self.C_n.mean())}


def _array(img) -> np.ndarray:
    data = img.data if isinstance(img, CTImage) else np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValidationError("image contains non-finite values")
    return data


# statistics below this fraction of the image's value range count as zero
GUARD_FRACTION = 1e-3


def _robust_normalize(x: np.ndarray, percentile: float, floor: float = 0.0) -> np.ndarray:
    """Divide by the ``percentile`` value (never less than ``floor``), clip to [0, 1]."""
    scale = max(float(np.percentile(x, percentile)), floor)
    if scale <= 0:
        return np.zeros_like(x)
    return np.clip(x / scale, 0.0, 1.0)


def _guard(data: np.ndarray) -> float:
    # the magnitude term keeps round-off on flat images from normalizing up to 1
    span = float(data.max() - data.min())
    return max(GUARD_FRACTION * span, 1e-9 * float(np.abs(data).max()))


def sobel_raw(data: np.ndarray) -> np.ndarray:
    """Un-normalized Sobel magnitude with nearest-edge padding."""
    gx = ndimage.correlate(data, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(data, SOBEL_X.T, mode="nearest")
    return np.hypot(gx, gy)


def gradient_magnitude(img, percentile: float = 99.0) -> np.ndarray:
    """Sobel magnitude scaled by its ``percentile`` value and clipped to [0, 1]."""
    data = _array(img)
    return _robust_normalize(sobel_raw(data), percentile, _guard(data))


def local_noise_std(data: np.ndarray, window: int) -> np.ndarray:
    """Windowed std of ``data`` minus its Gaussian blur (sigma = window / 6).

    The blur sees an odd reflection at the borders, which continues linear
    trends, so smooth ramps leave no residual at the image edge.
    """
    sigma = window / 6.0
    pad = int(4 * sigma + 0.5) + 1
    padded = np.pad(data, pad, mode="reflect", reflect_type="odd")
    blur = ndimage.gaussian_filter(padded, sigma, mode="nearest")[pad:-pad, pad:-pad]
    residual = data - blur
    m = ndimage.uniform_filter(residual, window, mode="reflect")
    m2 = ndimage.uniform_filter(residual * residual, window, mode="reflect")
    return np.sqrt(np.maximum(m2 - m * m, 0.0))


def noise_level(img, window: int = 7, percentile: float = 99.0) -> np.ndarray:
    """Local std of the high-pass residual, normalized to [0, 1].

    The normalizing percentile is floored at a thousandth of the image's
    value range, so noise-free smooth images map to (near) zero.
    """
    data = _array(img)
    if window < 3 or window % 2 == 0:
        raise ValidationError("window must be odd and >= 3")
    if window > min(data.shape):
        raise ValidationError(f"window {window} exceeds image size {data.shape}")
    return _robust_normalize(local_noise_std(data, window), percentile, _guard(data))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def weight_map(G: np.ndarray, N: np.ndarray, cfg: FusionConfig) -> FusionWeightMap:
    C_e = _sigmoid(cfg.k2 * (G - cfg.tau_e))
    C_n = _sigmoid(cfg.k1 * (N - cfg.tau_n))
    s = C_e + C_n
    if cfg.dose_shift != 0.0:
        s = s + cfg.dose_shift
    lam = np.clip(s, 0.0, 1.0)
    if np.all(lam == 1.0):
        raise ContractViolation("fusion weight is 1 everywhere; the prior would be discarded")
    return FusionWeightMap(lam, C_e, C_n, G, N)


def fuse(x_ld, x_prior, cfg: FusionConfig = FusionConfig()):
    """Blend ``lam * x_ld + (1 - lam) * x_prior``; returns ``(CTImage, FusionWeightMap)``."""
    a, b = _array(x_ld), _array(x_prior)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    G = gradient_magnitude(b, cfg.percentile)
    N = noise_level(a, cfg.noise_window, cfg.percentile)
    wm = weight_map(G, N, cfg)
    # same convex combination, written so that equal inputs come back bit-exact
    fused = b + wm.lam * (a - b)
    window = x_ld.hu_window if isinstance(x_ld, CTImage) else CTImage(a).hu_window
    return CTImage(fused, window), wm


def dose_shift_policy(train_dose: float, test_dose: float, c: float = 0.25) -> float:
    """``c * log2(test / train)`` clipped to [-0.5, 0.5].

    A lower test dose gives a negative shift, which moves weight onto the
    prior image.
    """
    for v in (train_dose, test_dose):
        if not 0.0 < v <= 1.0:
            raise ValidationError(f"dose fraction {v} outside (0, 1]")
    return float(np.clip(c * math.log2(test_dose / train_dose), -0.5, 0.5))


# ---------------------------------------------------------------------------
# inference cascade

@dataclass
class InferenceResult:
    image: CTImage
    prior: CTImage  # projection-only reconstruction
    fused: CTImage
    ldct: CTImage  # FBP of the raw low-dose sinogram
    weights: FusionWeightMap
    manifest: dict


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except LDCTError as exc:
        raise StageError(name, exc) from exc
    except (RuntimeError, ValueError) as exc:
        raise StageError(name, exc) from exc


def infer(y_ld: Sinogram, proj_ckpt, refiner_ckpt, sched: DiffusionSchedule | None = None,
          fusion_cfg: FusionConfig = FusionConfig(), seed: int = 0, proj_net=None, refiner=None,
          window: str = "ram-lak", stochastic: bool = True) -> InferenceResult:
    """Projection denoising, FBP, fusion, latent refinement and decoding.

    Pre-built networks may be passed to avoid rebuilding them per call.
    """
    from .projection import denoise_projection
    from .refiner import encode, decode

    if sched is None:
        sched = refiner_ckpt.build_schedule()
    if refiner is None:
        refiner = refiner_ckpt.build()
    if not isinstance(y_ld, Sinogram):
        raise ValidationError("infer expects a Sinogram")

    y0 = _stage("projection", denoise_projection, y_ld, proj_ckpt, proj_net)
    x_prior = _stage("reconstruction", fbp_reconstruct, y0, window)
    x_ld = _stage("reconstruction", fbp_reconstruct, y_ld, window)
    fused, wm = _stage("fusion", fuse, x_ld, x_prior, fusion_cfg)

    steps = []

    def run_chain():
        c = encode(fused, refiner)[None]
        gen = torch_generator(seed, "infer", "chain")
        xi = torch.randn(c.shape, generator=gen)
        z = forward_diffuse(c, sched.sample_grid[0], xi, sched)

        def predictor(zt, t):
            with torch.no_grad():
                return refiner.predictor(zt, torch.tensor([t]), c)

        t = sched.sample_grid[0]
        while t != 0:
            t_prev = t
            z, t = reverse_step(z, t, predictor, sched, gen, stochastic)
            steps.append((t_prev, t))
        return z[0]

    z0 = _stage("refinement", run_chain)
    out = _stage("decode", decode, z0, refiner, x_ld.hu_window)
    manifest = {
        "seed": seed,
        "seed_chain": derive_seed(seed, "infer", "chain"),
        "reverse_steps": len(steps),
        "grid": list(sched.sample_grid),
        "stochastic": stochastic,
        "fusion": asdict(fusion_cfg),
        "fusion_stats": wm.stats(),
        "projection_checkpoint": proj_ckpt.manifest().get("config_hash"),
        "refiner_checkpoint": refiner_ckpt.manifest().get("config_hash"),
        "dose_tag": y_ld.dose_tag,
    }
    manifest["config_hash"] = config_hash(manifest)
    return InferenceResult(out, x_prior, fused, x_ld, wm, manifest)
