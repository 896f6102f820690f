"""Gaussian diffusion schedule and the latent-space forward/reverse algebra.

Timesteps are 1-based: ``t = 1..T``; ``t = 0`` denotes clean data with
``alpha_bar(0) = 1``.  Functions accept numpy arrays or torch tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, InferenceFault, ValidationError


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    T_L: int
    sample_grid: tuple

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def sigmas_sq(self) -> np.ndarray:
        return 1.0 - self.alphas

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def sigma_sq(self, t: int) -> float:
        return float(self.sigmas_sq[t - 1])

    def next_step(self, t: int) -> int:
        """Grid timestep after ``t``; 0 once the grid is exhausted."""
        k = self.sample_grid.index(t)
        return self.sample_grid[k + 1] if k + 1 < len(self.sample_grid) else 0

    def check(self, terminal: bool = True) -> None:
        ab = self.alpha_bars
        if self.betas.shape != (self.T,) or not np.all((self.betas > 0) & (self.betas < 1)):
            raise ConfigurationError("betas must lie in (0, 1), one per step")
        if not np.all(np.diff(ab) < 0):
            raise ConfigurationError("alpha_bar is not strictly decreasing")
        if ab[0] < 0.99:
            raise ConfigurationError(f"alpha_bar_1 = {ab[0]:.4f} < 0.99")
        if terminal and ab[-1] > 1e-3:
            raise ConfigurationError(f"alpha_bar_T = {ab[-1]:.3g} > 1e-3; the chain does not reach noise")
        g = self.sample_grid
        if len(g) != self.T_L or g[0] != self.T or any(b >= a for a, b in zip(g, g[1:])) or g[-1] < 1:
            raise ConfigurationError(f"invalid sampling grid {g}")


def make_betas(T: int, beta_spec=("linear", 1e-4, 0.02)) -> np.ndarray:
    """Beta curve.

    ``("linear", start, end)`` is linear at ``T = 1000`` and rescales both
    ends by ``1000 / T`` otherwise so that short schedules still reach
    noise; ``("linear-raw", start, end)`` skips the rescaling;
    ``("cosine", s)`` is the squared-cosine alpha_bar curve.
    """
    kind = beta_spec[0]
    if kind in ("linear", "linear-raw"):
        start, end = float(beta_spec[1]), float(beta_spec[2])
        if kind == "linear":
            start, end = start * 1000.0 / T, end * 1000.0 / T
        return np.linspace(start, min(end, 0.999), T)
    if kind == "cosine":
        s = float(beta_spec[1]) if len(beta_spec) > 1 else 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
        return np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    raise ConfigurationError(f"unknown beta curve {kind!r}")


def make_grid(T: int, T_L: int) -> tuple:
    """``T, T - T/T_L, ...`` rounded, ``T_L`` entries, strictly descending."""
    grid = []
    for k in range(T_L):
        t = int(round(T - k * T / T_L))
        if grid and t >= grid[-1]:
            t = grid[-1] - 1
        grid.append(t)
    return tuple(grid)


def build_schedule(T: int = 1000, T_L: int = 5, beta_spec=("linear", 1e-4, 0.02),
                   check_terminal: bool = True) -> DiffusionSchedule:
    if not (1 <= T_L <= T):
        raise ConfigurationError(f"need 1 <= T_L <= T, got T={T}, T_L={T_L}")
    sched = DiffusionSchedule(int(T), make_betas(int(T), tuple(beta_spec)), int(T_L), make_grid(int(T), int(T_L)))
    sched.check(terminal=check_terminal)
    return sched


def _check_t(t, sched):
    if not (1 <= int(t) <= sched.T):
        raise ValidationError(f"timestep {t} outside [1, {sched.T}]")


def _coef(values, like):
    """Per-sample coefficients broadcast against ``like``."""
    if np.ndim(values) == 0:
        return float(values)
    if isinstance(like, torch.Tensor):
        c = torch.as_tensor(np.asarray(values), dtype=like.dtype)
    else:
        c = np.asarray(values, dtype=np.float64)
    return c.reshape((-1,) + (1,) * (like.ndim - 1))


def mix(z0, eps, alpha_bar):
    return _coef(np.sqrt(alpha_bar), z0) * z0 + _coef(np.sqrt(1.0 - np.asarray(alpha_bar)), z0) * eps


def forward_diffuse(z0, t, eps, sched: DiffusionSchedule):
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` may be a per-sample array."""
    ts = np.atleast_1d(np.asarray(t))
    for v in ts:
        _check_t(v, sched)
    ab = sched.alpha_bars[ts - 1] if np.ndim(t) else sched.alpha_bar(int(t))
    return mix(z0, eps, ab)


def x0_from_eps(zt, eps_hat, alpha_bar):
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if np.any(ab <= 0):
        raise ValidationError("alpha_bar is zero; x0 prediction is singular")
    return (zt - _coef(np.sqrt(1.0 - ab), zt) * eps_hat) / _coef(np.sqrt(ab), zt)


def predict_x0(zt, eps_hat, t, sched: DiffusionSchedule):
    """Invert the forward mix for ``x0`` given a noise estimate."""
    ts = np.atleast_1d(np.asarray(t))
    for v in ts:
        _check_t(v, sched)
    ab = sched.alpha_bars[ts - 1] if np.ndim(t) else sched.alpha_bar(int(t))
    return x0_from_eps(zt, eps_hat, ab)


def posterior_coefficients(sched: DiffusionSchedule, t: int, t_next: int):
    """Mean coefficients ``(c_x0, c_xt)`` and variance for a hop ``t -> t_next``.

    For ``t_next = t - 1`` this is the usual one-step posterior whose mean,
    written in terms of the noise estimate, is
    ``(x_t - (1 - a_t) / sqrt(1 - ab_t) * eps) / sqrt(a_t)`` with variance
    ``1 - a_t``.  Longer hops use the hop's own ``a = ab_t / ab_next``.
    """
    ab_t, ab_n = sched.alpha_bar(t), sched.alpha_bar(t_next)
    a = ab_t / ab_n
    c_x0 = math.sqrt(ab_n) * (1.0 - a) / (1.0 - ab_t)
    c_xt = math.sqrt(a) * (1.0 - ab_n) / (1.0 - ab_t)
    return c_x0, c_xt, 1.0 - a


def _standard_normal(like, rng):
    if isinstance(like, torch.Tensor):
        return torch.randn(like.shape, generator=rng, dtype=like.dtype)
    return rng.standard_normal(like.shape)


def reverse_step(zt, t: int, noise_predictor, sched: DiffusionSchedule, rng=None,
                 stochastic: bool = True):
    """One hop along the sampling grid; returns ``(z_next, t_next)``.

    The final hop (``t_next = 0``) returns the clean estimate itself and
    draws no noise.
    """
    if t not in sched.sample_grid:
        raise ValidationError(f"timestep {t} is not on the sampling grid {sched.sample_grid}")
    eps_hat = noise_predictor(zt, t)
    finite = torch.isfinite(eps_hat).all() if isinstance(eps_hat, torch.Tensor) else np.isfinite(eps_hat).all()
    if not finite:
        raise InferenceFault(f"noise predictor returned non-finite values at t={t}")
    x0 = predict_x0(zt, eps_hat, t, sched)
    t_next = sched.next_step(t)
    if t_next == 0:
        return x0, 0
    c_x0, c_xt, var = posterior_coefficients(sched, t, t_next)
    z = c_x0 * x0 + c_xt * zt
    if stochastic:
        if rng is None:
            raise ValidationError("stochastic reverse step needs an rng")
        z = z + math.sqrt(var) * _standard_normal(zt, rng)
    return z, t_next


def sample_chain(z_T, noise_predictor, sched: DiffusionSchedule, rng=None, stochastic: bool = True,
                 on_step=None):
    """Run ``reverse_step`` over the whole grid starting from ``z_T`` at ``t = T``."""
    z, t = z_T, sched.sample_grid[0]
    while t != 0:
        t_prev = t
        z, t = reverse_step(z, t, noise_predictor, sched, rng, stochastic)
        if on_step is not None:
            on_step(t_prev, t)
    return z
