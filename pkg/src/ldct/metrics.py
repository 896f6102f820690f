"""Image-quality metrics computed inside a fixed HU window.

Both images are clipped to the window and mapped to [0, 1] by the window
span before any metric is taken, so the PSNR peak is the window span and
RMSE is reported back in HU.

FSIM, VIF and NQM follow their reference MATLAB formulations (FeatureSIM.m,
vifp_mscale.m and the Damera-Venkata noise quality measure).  Those
constants were tuned for 8-bit images, so the three metrics see the
windowed image multiplied by 255.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np
from scipy import ndimage, signal
from skimage.metrics import structural_similarity

from .errors import ValidationError
from .geometry import CTImage, DEFAULT_WINDOW, mu_to_hu

PSNR_CAP = 100.0  # reported when the images are identical
METRIC_NAMES = ("psnr", "ssim", "rmse", "fsim", "vif", "nqm")


def _hu(img) -> np.ndarray:
    if isinstance(img, CTImage):
        return img.hu()
    return np.asarray(img, dtype=np.float64)


def window_scale(hu: np.ndarray, window=DEFAULT_WINDOW) -> np.ndarray:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValidationError(f"window must satisfy lo < hi, got {window}")
    return (np.clip(hu, lo, hi) - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# PSNR / RMSE / SSIM

def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> tuple[float, bool]:
    """``(value, finite)``; identical inputs give ``(PSNR_CAP, False)``."""
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP, False
    return 10.0 * math.log10(peak * peak / mse), True


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM (sigma 1.5, K1 0.01, K2 0.03) on [0, 1] data."""
    return float(structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False))


# ---------------------------------------------------------------------------
# FSIM

def _lowpass(rows, cols, cutoff=0.45, n=15):
    radius = _radius(rows, cols)[0]
    return np.fft.ifftshift(1.0 / (1.0 + (radius / cutoff) ** (2 * n)))


def _freq_range(n):
    if n % 2:
        return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
    return np.arange(-n / 2, n / 2) / n


def _radius(rows, cols):
    x, y = np.meshgrid(_freq_range(cols), _freq_range(rows))
    return np.sqrt(x ** 2 + y ** 2), np.arctan2(-y, x)


def phase_congruency(img: np.ndarray, nscale: int = 4, norient: int = 4, min_wavelength: float = 6,
                     mult: float = 2, sigma_onf: float = 0.55, dtheta_on_sigma: float = 1.2,
                     k: float = 2.0, eps: float = 1e-4) -> np.ndarray:
    """Kovesi phase congruency (the variant embedded in FeatureSIM.m)."""
    rows, cols = img.shape
    imagefft = np.fft.fft2(img)
    radius, theta = _radius(rows, cols)
    radius = np.fft.ifftshift(radius)
    theta = np.fft.ifftshift(theta)
    radius[0, 0] = 1.0
    sintheta, costheta = np.sin(theta), np.cos(theta)
    theta_sigma = math.pi / norient / dtheta_on_sigma
    lp = _lowpass(rows, cols)

    log_gabor = []
    for s in range(nscale):
        fo = 1.0 / (min_wavelength * mult ** s)
        g = np.exp(-(np.log(radius / fo)) ** 2 / (2 * math.log(sigma_onf) ** 2)) * lp
        g[0, 0] = 0.0
        log_gabor.append(g)

    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(norient):
        angl = o * math.pi / norient
        ds = sintheta * math.cos(angl) - costheta * math.sin(angl)
        dc = costheta * math.cos(angl) + sintheta * math.sin(angl)
        spread = np.exp(-np.arctan2(ds, dc) ** 2 / (2 * theta_sigma ** 2))
        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        eo_list, ifft_filters = [], []
        for s in range(nscale):
            filt = log_gabor[s] * spread
            ifft_filters.append(np.real(np.fft.ifft2(filt)) * math.sqrt(rows * cols))
            eo = np.fft.ifft2(imagefft * filt)
            eo_list.append(eo)
            sum_an += np.abs(eo)
            sum_e += eo.real
            sum_o += eo.imag
            if s == 0:
                em_n = np.sum(filt ** 2)
        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + np.finfo(float).eps
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for eo in eo_list:
            e, od = eo.real, eo.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        median_e2n = np.median(np.abs(eo_list[0]).ravel() ** 2)
        mean_e2n = -median_e2n / math.log(0.5)
        noise_power = mean_e2n / em_n
        est_sum_an2 = sum(f ** 2 for f in ifft_filters)
        est_sum_aiaj = np.zeros((rows, cols))
        for si in range(nscale - 1):
            for sj in range(si + 1, nscale):
                est_sum_aiaj += ifft_filters[si] * ifft_filters[sj]
        noise_energy2 = 2 * noise_power * est_sum_an2.sum() + 4 * noise_power * est_sum_aiaj.sum()
        tau = math.sqrt(noise_energy2 / 2)
        noise_energy = tau * math.sqrt(math.pi / 2)
        noise_sigma = math.sqrt((2 - math.pi / 2) * tau ** 2)
        T = (noise_energy + k * noise_sigma) / 1.7  # empirical PC_2 correction
        energy_all += np.maximum(energy - T, 0.0)
        an_all += sum_an
    return energy_all / (an_all + eps)


def fsim(ref: np.ndarray, dist: np.ndarray) -> float:
    """Feature similarity (grayscale) for images on a [0, 255] scale."""
    rows, cols = ref.shape
    f = max(1, round(min(rows, cols) / 256))
    if f > 1:
        kern = np.ones((f, f)) / (f * f)
        ref = signal.convolve2d(ref, kern, mode="same")[::f, ::f]
        dist = signal.convolve2d(dist, kern, mode="same")[::f, ::f]
    pc1, pc2 = phase_congruency(ref), phase_congruency(dist)
    dx = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0
    dy = dx.T

    def gm(img):
        return np.sqrt(signal.convolve2d(img, dx, mode="same") ** 2 + signal.convolve2d(img, dy, mode="same") ** 2)

    g1, g2 = gm(ref), gm(dist)
    T1, T2 = 0.85, 160.0
    pc_sim = (2 * pc1 * pc2 + T1) / (pc1 ** 2 + pc2 ** 2 + T1)
    g_sim = (2 * g1 * g2 + T2) / (g1 ** 2 + g2 ** 2 + T2)
    pcm = np.maximum(pc1, pc2)
    den = pcm.sum()
    if den == 0:
        return 1.0 if np.array_equal(ref, dist) else 0.0
    return float((g_sim * pc_sim * pcm).sum() / den)


# ---------------------------------------------------------------------------
# VIF (pixel domain, four scales)

def _fspecial_gaussian(n: int, sigma: float) -> np.ndarray:
    r = np.arange(n) - (n - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(win, img):
    if img.shape[0] < win.shape[0] or img.shape[1] < win.shape[1]:
        return np.zeros((0, 0))
    return signal.correlate2d(img, win, mode="valid")


def vif(ref: np.ndarray, dist: np.ndarray, sigma_nsq: float = 2.0) -> float:
    """Pixel-domain visual information fidelity, images on [0, 255]."""
    num = den = 0.0
    ref, dist = ref.astype(np.float64), dist.astype(np.float64)
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = _fspecial_gaussian(n, n / 5.0)
        if scale > 1:
            ref = _filter_valid(win, ref)[::2, ::2]
            dist = _filter_valid(win, dist)[::2, ::2]
        mu1, mu2 = _filter_valid(win, ref), _filter_valid(win, dist)
        if mu1.size == 0:
            continue
        s1 = np.maximum(_filter_valid(win, ref * ref) - mu1 * mu1, 0.0)
        s2 = np.maximum(_filter_valid(win, dist * dist) - mu2 * mu2, 0.0)
        s12 = _filter_valid(win, ref * dist) - mu1 * mu2
        g = s12 / (s1 + 1e-10)
        sv = s2 - g * s12
        low1 = s1 < 1e-10
        g[low1] = 0.0
        sv[low1] = s2[low1]
        s1[low1] = 0.0
        low2 = s2 < 1e-10
        g[low2] = 0.0
        sv[low2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, 1e-10)
        num += np.sum(np.log10(1.0 + g * g * s1 / (sv + sigma_nsq)))
        den += np.sum(np.log10(1.0 + s1 / sigma_nsq))
    if den == 0.0:
        return 1.0 if np.array_equal(ref, dist) else 0.0
    return float(num / den)


# ---------------------------------------------------------------------------
# NQM

def _ctf(f):
    """Contrast threshold function of radial frequency (cycles/degree)."""
    return 1.0 / (520.0 * (0.0192 + 0.114 * f) * np.exp(-((0.114 * f) ** 1.1)))


def _cos_log(w, phase):
    with np.errstate(divide="ignore"):
        return 0.5 * (1.0 + np.cos(np.pi * np.log2(w) - phase))


def _nqm_bank(rows, cols):
    yy, xx = np.mgrid[-rows / 2:rows / 2, -cols / 2:cols / 2]
    r = np.hypot(xx, yy)
    bands = [(r + 2, 1, 4, 4.0, np.pi), (r, 1, 4, 4.0, np.pi), (r, 2, 8, 0.5, 0.0),
             (r, 4, 16, 4.0, np.pi), (r, 8, 32, 0.5, 0.0), (r, 16, 64, 4.0, np.pi)]
    bank = []
    for w, lo, hi, fill, phase in bands:
        inside = (w >= lo) & (w <= hi)
        arg = np.where(inside, w, fill)
        bank.append(np.fft.fftshift(_cos_log(arg, phase)))
    return bank


def nqm(ref: np.ndarray, dist: np.ndarray, viewing_angle: float = 1.0 / 3.5) -> float:
    """Noise quality measure in dB (higher is better), images on [0, 255].

    ``viewing_angle`` is in radians.  Identical images give ``PSNR_CAP``.
    """
    bank = _nqm_bank(*ref.shape)
    fr, fd = np.fft.fft2(ref), np.fft.fft2(dist)
    band = lambda f, g: np.real(np.fft.ifft2(f * g))
    l0, li0 = band(fr, bank[0]), band(fd, bank[0])
    a = [band(fr, g) for g in bank[1:]]
    ai = [band(fd, g) for g in bank[1:]]

    def safe(x):
        return np.where(x == 0, 1e-12, x)

    c, ci = [], []
    acc, acci = l0.copy(), li0.copy()
    for k in range(5):
        c.append(a[k] / safe(acc))
        ci.append(ai[k] / safe(acci))
        acc = acc + a[k]
        acci = acci + ai[k]

    va_deg = viewing_angle * 180.0 / math.pi
    thresholds = [_ctf(f / va_deg) for f in (2.0, 4.0, 8.0, 16.0, 32.0)]
    A, AI = [], []
    for k in range(5):
        cik = ci[k].copy()
        cik[np.abs(cik) > 1.0] = 1.0
        ct = _ctf(k + 1)
        T = ct * (0.86 * (c[k] / ct - 1.0) + 0.3)
        aik = ai[k].copy()
        masked = (np.abs(cik - c[k]) - T) < 0.0
        aik[masked] = a[k][masked]
        A.append(np.where(np.abs(c[k]) < thresholds[k], 0.0, a[k]))
        AI.append(np.where(np.abs(cik) < thresholds[k], 0.0, aik))
    y1, y2 = np.sum(A, axis=0), np.sum(AI, axis=0)
    noise = np.mean((y1 - y2) ** 2)
    if noise == 0.0:
        return PSNR_CAP
    return float(10.0 * math.log10(np.mean(y1 ** 2) / noise))


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    rmse: float  # HU
    fsim: float
    vif: float
    nqm: float
    window: tuple = DEFAULT_WINDOW
    psnr_finite: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, ref, window=DEFAULT_WINDOW, mask: np.ndarray | None = None,
             metrics=METRIC_NAMES) -> MetricsReport:
    """All metrics of ``pred`` against ``ref``.

    ``pred``/``ref`` are CTImages (attenuation) or HU arrays.  ``mask``, if
    given, restricts PSNR and RMSE to its pixels; the structural metrics
    always use the full frame.  Metrics left out of ``metrics`` are NaN.
    """
    hp, hr = _hu(pred), _hu(ref)
    if hp.shape != hr.shape:
        raise ValidationError(f"shape mismatch {hp.shape} vs {hr.shape}")
    lo, hi = float(window[0]), float(window[1])
    a, b = window_scale(hp, window), window_scale(hr, window)
    sel = (slice(None),) if mask is None else (np.asarray(mask, dtype=bool),)
    p, finite = psnr(a[sel], b[sel])
    rmse_hu = float(np.sqrt(np.mean((a[sel] - b[sel]) ** 2))) * (hi - lo)
    nan = float("nan")
    return MetricsReport(
        psnr=p,
        ssim=ssim(a, b) if "ssim" in metrics else nan,
        rmse=rmse_hu,
        fsim=fsim(255 * b, 255 * a) if "fsim" in metrics else nan,
        vif=vif(255 * b, 255 * a) if "vif" in metrics else nan,
        nqm=nqm(255 * b, 255 * a) if "nqm" in metrics else nan,
        window=(lo, hi),
        psnr_finite=finite,
    )


def aggregate(reports) -> dict:
    """Mean and population std of every metric over the cases."""
    reports = list(reports)
    if not reports:
        raise ValidationError("aggregation needs at least one case")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    out["cases"] = len(reports)
    return out


def format_table(rows: dict) -> str:
    """Plain text table; ``rows`` maps a label to an ``aggregate`` result."""
    head = f"{'method':<16}" + "".join(f"{m:>20}" for m in METRIC_NAMES)
    lines = [head, "-" * len(head)]
    for label, agg in rows.items():
        cells = "".join(f"{agg[m]['mean']:>11.4f} ± {agg[m]['std']:<6.3f}" for m in METRIC_NAMES)
        lines.append(f"{label:<16}{cells}")
    return "\n".join(lines)
