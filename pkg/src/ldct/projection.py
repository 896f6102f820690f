"""Projection-domain denoiser trained on contextual sub-data pairs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, TrainingFault, ValidationError
from .geometry import Sinogram
from .manifest import MANIFEST_NAME, config_hash, file_sha256, read_json, write_json
from .rng import derive_seed, make_rng
from .sampler import choose_pair, sample_subdata, subsample_like

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProjNetConfig:
    base_channels: int = 48
    depth: int = 3  # number of scales; depth - 1 pooling stages
    activation: str = "leaky_relu"
    # multiplier applied before the network (and undone after); None means
    # "estimate from the training data" so the noise sits near 0.1
    input_scale: float | None = None
    note: str = "3-scale encoder-decoder; receptive field ~ 2**depth * 5 px"

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigurationError("depth and base_channels must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ProjTrainConfig:
    alpha: float = 0.02
    lr: float = 3e-4
    batch_size: int = 8
    epochs: int = 100
    lr_halving_period: int = 20
    optimizer: str = "adam"
    seed: int = 0
    # train on random even-aligned crops of this size (None: whole sinograms)
    patch_size: int | None = None

    def __post_init__(self):
        if self.patch_size is not None and (self.patch_size < 4 or self.patch_size % 4):
            raise ConfigurationError("patch_size must be a positive multiple of 4")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_halving_period < 1:
            raise ConfigurationError("batch_size, epochs and lr_halving_period are out of range")


_ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(0.1),
    "relu": lambda: nn.ReLU(),
    "silu": lambda: nn.SiLU(),
}


class _Block(nn.Sequential):
    def __init__(self, cin, cout, act):
        super().__init__(nn.Conv2d(cin, cout, 3, padding=1), _ACTIVATIONS[act](),
                         nn.Conv2d(cout, cout, 3, padding=1), _ACTIVATIONS[act]())


class ProjectionNet(nn.Module):
    """Fully convolutional U-Net with a residual output.

    Inputs of any spatial size are edge-padded to a multiple of
    ``2**(depth-1)`` and cropped back, so the same weights serve
    half-resolution sub-data in training and full sinograms at inference.
    """

    def __init__(self, cfg: ProjNetConfig = ProjNetConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.enc = nn.ModuleList([_Block(1 if k == 0 else c, c, cfg.activation) for k in range(cfg.depth)])
        self.dec = nn.ModuleList([_Block(2 * c, c, cfg.activation) for _ in range(cfg.depth - 1)])
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        scale = self.cfg.input_scale or 1.0
        return self._forward(x * scale) / scale

    def _forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** (self.cfg.depth - 1)
        ph, pw = (-h) % m, (-w) % m
        z = F.pad(x, (0, pw, 0, ph), mode="replicate") if ph or pw else x
        skips = []
        for k, block in enumerate(self.enc):
            if k:
                z = F.max_pool2d(z, 2)
            z = block(z)
            skips.append(z)
        for block, skip in zip(self.dec, reversed(skips[:-1])):
            z = F.interpolate(z, scale_factor=2, mode="nearest")
            z = block(torch.cat([z, skip], dim=1))
        return x + self.head(z)[..., :h, :w]


@dataclass
class SimilarityMasks:
    eps1: torch.Tensor
    eps2: torch.Tensor

    @property
    def w1(self):
        return 1.0 - self.eps1

    @property
    def w2(self):
        return 1.0 - self.eps2


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def normalize_difference(d, q: float = 0.95, tiny: float = 1e-8):
    """``clip(|d| / (quantile_q(|d|) + tiny), 0, 1)`` per sample.

    Inputs with three or more axes are treated as a batch over axis 0.
    """
    a = _as_tensor(d).abs()
    flat = a.reshape(a.shape[0], -1) if a.ndim >= 3 else a.reshape(1, -1)
    scale = torch.quantile(flat, q, dim=1)
    scale = scale.reshape((-1,) + (1,) * (a.ndim - 1)) if a.ndim >= 3 else scale.reshape(())
    return torch.clamp(a / (scale + tiny), 0.0, 1.0)


def compute_masks(pair_in, pair_out) -> SimilarityMasks:
    """Similarity masks from the input sub-pair and the denoised sub-pair."""
    a, b = (_as_tensor(t) for t in pair_in)
    c, d = (_as_tensor(t) for t in pair_out)
    if not (a.shape == b.shape == c.shape == d.shape):
        raise ValidationError("mask inputs must share one shape")
    for t in (a, b, c, d):
        if not torch.isfinite(t).all():
            raise ValidationError("mask inputs must be finite")
    with torch.no_grad():
        eps1 = normalize_difference(a - b)
        eps2 = normalize_difference(c - d)
    return SimilarityMasks(eps1.detach(), eps2.detach())


def projection_loss(f_out_sub, target_sub, f_full_sub_i, f_full_sub_j, masks: SimilarityMasks, alpha: float):
    """Masked sub-pair loss plus the weighted consistency regulariser."""
    f_out_sub = _as_tensor(f_out_sub)
    if not torch.isfinite(f_out_sub).all():
        raise TrainingFault("non-finite network output")
    target_sub, fi, fj = (_as_tensor(t) for t in (target_sub, f_full_sub_i, f_full_sub_j))
    if not (f_out_sub.shape == target_sub.shape == fi.shape == fj.shape):
        raise ValidationError("loss inputs must share one shape")
    gap = (f_out_sub - target_sub) * masks.w1
    loss = gap.pow(2).mean()
    if alpha:
        loss = loss + alpha * (gap - (fi - fj) * masks.w2).pow(2).mean()
    return loss


@dataclass
class ProjCheckpoint:
    state_dict: dict
    net_cfg: ProjNetConfig
    train_cfg: ProjTrainConfig
    epochs_done: int = 0
    loss_curve: list = field(default_factory=list)
    skipped_steps: int = 0
    input_shape: tuple | None = None

    def build(self) -> ProjectionNet:
        net = ProjectionNet(self.net_cfg)
        net.load_state_dict(self.state_dict)
        net.eval()
        return net

    def manifest(self) -> dict:
        return {
            "kind": "projection-checkpoint",
            "config_hash": config_hash({"net": self.net_cfg, "train": self.train_cfg}),
            "net": asdict(self.net_cfg),
            "train": asdict(self.train_cfg),
            "seed": self.train_cfg.seed,
            "epochs_done": self.epochs_done,
            "loss_curve": self.loss_curve,
            "skipped_steps": self.skipped_steps,
            "input_shape": list(self.input_shape) if self.input_shape else None,
        }

    def save(self, directory) -> dict:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict, directory / "weights.pt")
        man = self.manifest()
        man["weights_sha256"] = file_sha256(directory / "weights.pt")
        write_json(directory / MANIFEST_NAME, man)
        return man

    @classmethod
    def load(cls, directory) -> "ProjCheckpoint":
        directory = Path(directory)
        man = read_json(directory / MANIFEST_NAME)
        if man.get("kind") != "projection-checkpoint":
            raise ConfigurationError(f"{directory} is not a projection checkpoint")
        state = torch.load(directory / "weights.pt", weights_only=True)
        return cls(state, ProjNetConfig(**man["net"]), ProjTrainConfig(**man["train"]),
                   man["epochs_done"], man["loss_curve"], man["skipped_steps"],
                   tuple(man["input_shape"]) if man["input_shape"] else None)


def estimate_noise_std(arrays) -> float:
    """Robust per-pixel noise level from differences along axis 0.

    Adjacent views of a sinogram differ mostly by noise, so the MAD of the
    first difference, divided by sqrt(2), estimates the noise std.
    """
    d = np.concatenate([np.diff(np.asarray(a), axis=0).ravel() for a in arrays])
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / np.sqrt(2.0))


def _sinogram_array(s) -> np.ndarray:
    return s.data if isinstance(s, Sinogram) else np.asarray(s, dtype=np.float64)


def _crop(arrays, size, seed, step):
    rng = make_rng(seed, "train-proj", "crop", step)
    out = []
    for y in arrays:
        h, w = y.shape
        ch, cw = min(size, h), min(size, w)
        r = 2 * int(rng.integers(0, (h - ch) // 2 + 1))
        c = 2 * int(rng.integers(0, (w - cw) // 2 + 1))
        out.append(y[r:r + ch, c:c + cw])
    return out


def _draw_batch(arrays, seed, step):
    """Sub-data inputs/targets and the provenance needed for the regulariser."""
    inputs, targets, draws = [], [], []
    for n, y in enumerate(arrays):
        sds = sample_subdata(y, seed, stream=("train-proj", "sample", step, n))
        i, j = choose_pair(sds, seed, stream=("train-proj", "pair", step, n))
        inputs.append(sds.slot(i))
        targets.append(sds.slot(j))
        draws.append((sds, i, j))
    to_t = lambda xs: torch.as_tensor(np.stack(xs)[:, None], dtype=torch.float32)
    return to_t(inputs), to_t(targets), draws


def train_projection(sinos, cfg: ProjTrainConfig = ProjTrainConfig(),
                     net_cfg: ProjNetConfig = ProjNetConfig(), progress=None) -> ProjCheckpoint:
    """Self-supervised training on low-dose sinograms alone.

    Each step draws fresh sub-data per sinogram, picks an ordered pair,
    runs the network on the sub-input and (without gradient) on the full
    sinogram, rebuilds the similarity masks and takes one Adam step.
    """
    arrays = [_sinogram_array(s) for s in sinos]
    if not arrays:
        raise ValidationError("training set is empty")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValidationError("all training sinograms must share one shape")
    if shape[0] % 2 or shape[1] % 2:
        raise ValidationError(f"sinogram dimensions must be even, got {shape}")

    if net_cfg.input_scale is None:
        sigma = estimate_noise_std(arrays)
        net_cfg = replace(net_cfg, input_scale=0.1 / sigma if sigma > 0 else 1.0)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, "train-proj", "init"))
        net = ProjectionNet(net_cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_halving_period, gamma=0.5)

    curve, skipped, step = [], 0, 0
    initial, runaway = None, 0
    order_rng = make_rng(cfg.seed, "train-proj", "order")
    for epoch in range(cfg.epochs):
        net.train()
        order = order_rng.permutation(len(arrays))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [arrays[i] for i in order[start:start + cfg.batch_size]]
            if cfg.patch_size:
                batch = _crop(batch, cfg.patch_size, cfg.seed, step)
            x_in, x_tgt, draws = _draw_batch(batch, cfg.seed, step)
            step += 1
            full = torch.as_tensor(np.stack(batch)[:, None], dtype=torch.float32)
            with torch.no_grad():
                f_full = net(full)
            fi = torch.stack([subsample_like(f_full[n], sds, i) for n, (sds, i, j) in enumerate(draws)])
            fj = torch.stack([subsample_like(f_full[n], sds, j) for n, (sds, i, j) in enumerate(draws)])
            out = net(x_in)
            try:
                masks = compute_masks((x_in, x_tgt), (fi, fj))
                loss = projection_loss(out, x_tgt, fi, fj, masks, cfg.alpha)
            except (TrainingFault, ValidationError) as exc:
                skipped += 1
                log.warning("epoch %d step %d skipped: %s", epoch, step, exc)
                continue
            if not torch.isfinite(loss):
                skipped += 1
                log.warning("epoch %d step %d skipped: non-finite loss", epoch, step)
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = float(loss.detach())
            losses.append(value)
            if initial is None:
                initial = value
            runaway = runaway + 1 if value > 1e3 * initial else 0
            if runaway >= 100:
                raise TrainingFault(f"projection training diverged at epoch {epoch}: loss {value:.3g} vs initial {initial:.3g}")
        sched.step()
        curve.append(float(np.mean(losses)) if losses else math.nan)
        if progress:
            progress(epoch, curve[-1])
    net.eval()
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return ProjCheckpoint(state, net_cfg, cfg, cfg.epochs, curve, skipped, tuple(shape))


def apply_network(net: nn.Module, arrays: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            x = torch.as_tensor(arrays[start:start + batch_size][:, None], dtype=torch.float32)
            out.append(net(x)[:, 0].double().numpy())
    return np.concatenate(out)


def denoise_projection(sino: Sinogram, ckpt: ProjCheckpoint, net: nn.Module | None = None) -> Sinogram:
    """Full-resolution ``f(y_ld)``; line integrals are clamped at zero."""
    if ckpt.input_shape is not None and tuple(sino.shape) != tuple(ckpt.input_shape):
        raise ConfigurationError(f"checkpoint was trained on {ckpt.input_shape} sinograms, got {sino.shape}")
    net = net or ckpt.build()
    out = apply_network(net, sino.data[None])[0]
    return sino.with_data(np.maximum(out, 0.0))
