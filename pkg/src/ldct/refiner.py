"""Latent diffusion refinement distilled from the projection-stage prior.

Images enter the networks as ``HU / image_scale``.  The encoder maps a
``H x W`` image to a ``latent_channels x H/4 x W/4`` latent, the decoder
maps it back, and a small transformer predicts diffusion noise on latent
patches.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import DiffusionSchedule, build_schedule, predict_x0, forward_diffuse
from .errors import ConfigurationError, TrainingFault, ValidationError
from .geometry import CTImage, MU_WATER
from .manifest import MANIFEST_NAME, config_hash, file_sha256, read_json, write_json
from .rng import derive_seed, make_rng, torch_generator

log = logging.getLogger(__name__)

FACTOR = 4


@dataclass(frozen=True)
class RefinerNetConfig:
    hidden_channels: int = 64
    latent_channels: int = 64
    patch_size: int = 2
    model_dim: int = 128
    num_heads: int = 4
    num_blocks: int = 4
    # HU per network unit; None means "estimate from the training inputs"
    image_scale: float | None = None


@dataclass(frozen=True)
class RefinerTrainConfig:
    beta_ssim: float = 1.0
    gamma_grad: float = 2.0
    eta_l1: float = 0.5
    lr: float = 3e-4
    weight_decay: float = 1e-2
    batch_size: int = 4
    epochs: int = 60
    schedule: str = "cosine"
    optimizer: str = "adamw"
    seed: int = 0

    def __post_init__(self):
        if min(self.beta_ssim, self.gamma_grad, self.eta_l1) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("lr, batch_size or epochs out of range")


# ---------------------------------------------------------------------------
# image <-> network units

def image_to_net(mu, scale: float):
    return 1000.0 * (mu / MU_WATER - 1.0) / scale


def net_to_image(x, scale: float):
    return MU_WATER * (1.0 + x * scale / 1000.0)


def estimate_image_noise_hu(images) -> float:
    """MAD noise estimate (HU) from a 3x3 Laplacian-free high-pass."""
    vals = []
    for im in images:
        hu = 1000.0 * (np.asarray(im) / MU_WATER - 1.0)
        d = hu[1:, :] - hu[:-1, :]
        vals.append(d.ravel())
    d = np.concatenate(vals)
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# networks

def _init_identity_path(conv: nn.Conv2d) -> None:
    """Unit diagonal on a 1x1 conv, so space-to-depth round trips are lossless."""
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        n = min(conv.in_channels, conv.out_channels)
        conv.weight[torch.arange(n), torch.arange(n), 0, 0] = 1.0


class Encoder(nn.Module):
    """Four layers, two of them strided, plus a space-to-depth linear path.

    With at least 16 latent channels the untrained encoder/decoder pair is
    an exact identity: the linear paths start as a unit diagonal and the
    last layer of each convolutional path starts at zero.
    """

    def __init__(self, cfg: RefinerNetConfig):
        super().__init__()
        c, lc = cfg.hidden_channels, cfg.latent_channels
        self.layers = nn.Sequential(
            nn.Conv2d(1, c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, lc, 1),
        )
        self.direct = nn.Conv2d(FACTOR * FACTOR, lc, 1)
        _init_identity_path(self.direct)
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x):
        return self.layers(x) + self.direct(F.pixel_unshuffle(x, FACTOR))


class Decoder(nn.Module):
    def __init__(self, cfg: RefinerNetConfig):
        super().__init__()
        c, lc = cfg.hidden_channels, cfg.latent_channels
        self.layers = nn.Sequential(
            nn.Conv2d(lc, c, 1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, c, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c, 1, 3, padding=1),
        )
        self.direct = nn.Conv2d(lc, FACTOR * FACTOR, 1)
        _init_identity_path(self.direct)
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, z):
        return self.layers(z) + F.pixel_shuffle(self.direct(z), FACTOR)


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _grid_embedding(h: int, w: int, dim: int):
    quarter = dim // 4
    freqs = torch.exp(-math.log(1000.0) * torch.arange(quarter, dtype=torch.float32) / max(quarter, 1))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float32), torch.arange(w, dtype=torch.float32), indexing="ij")
    parts = [torch.sin(ys.reshape(-1, 1) * freqs), torch.cos(ys.reshape(-1, 1) * freqs),
             torch.sin(xs.reshape(-1, 1) * freqs), torch.cos(xs.reshape(-1, 1) * freqs)]
    emb = torch.cat(parts, dim=1)
    return F.pad(emb, (0, dim - emb.shape[1]))


class NoisePredictor(nn.Module):
    """Transformer over latent patches, conditioned on a reference latent.

    Tokens carry the noisy latent and the conditioning latent; a sinusoidal
    timestep embedding is added to every token.  The transformer output is
    a correction on top of the closed-form noise estimate
    ``(z_t - sqrt(ab_t) c) / sqrt(1 - ab_t)``, which is exact when the
    conditioning latent equals the clean latent.  The output projection
    starts at zero.
    """

    def __init__(self, cfg: RefinerNetConfig, sched: DiffusionSchedule):
        super().__init__()
        self.cfg = cfg
        p, lc, d = cfg.patch_size, cfg.latent_channels, cfg.model_dim
        self.register_buffer("alpha_bars", torch.as_tensor(sched.alpha_bars, dtype=torch.float32), persistent=False)
        self.embed = nn.Linear(2 * lc * p * p, d)
        self.time = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        layer = nn.TransformerEncoderLayer(d, cfg.num_heads, dim_feedforward=2 * d, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, cfg.num_blocks, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, lc * p * p)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def correction(self, zt, t, cond):
        b, lc, h, w = zt.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValidationError(f"latent {h}x{w} is not divisible by patch size {p}")
        x = torch.cat([zt, cond], dim=1)
        tokens = F.unfold(x, p, stride=p).transpose(1, 2)  # (b, n, 2*lc*p*p)
        tok = self.embed(tokens) + _grid_embedding(h // p, w // p, self.cfg.model_dim)[None]
        tt = torch.as_tensor(t).reshape(-1).expand(b) if torch.as_tensor(t).numel() == 1 else torch.as_tensor(t)
        tok = tok + self.time(timestep_embedding(tt, self.cfg.model_dim))[:, None, :]
        tok = self.norm(self.blocks(tok))
        out = self.out(tok).transpose(1, 2)
        return F.fold(out, (h, w), p, stride=p)

    def forward(self, zt, t, cond):
        tt = torch.as_tensor(t).reshape(-1)
        ab = self.alpha_bars[(tt - 1).long()].reshape(-1, 1, 1, 1)
        prior = (zt - ab.sqrt() * cond) / (1.0 - ab).sqrt()
        return prior + self.correction(zt, t, cond)


class LatentRefiner(nn.Module):
    def __init__(self, cfg: RefinerNetConfig, sched: DiffusionSchedule):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.predictor = NoisePredictor(cfg, sched)


# ---------------------------------------------------------------------------
# losses

def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-r ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_torch(a, b, data_range=None, k1: float = 0.01, k2: float = 0.03, win: int = 11, sigma: float = 1.5):
    """Mean SSIM with a Gaussian window; borders use whole-sample reflection.

    ``a`` and ``b`` are ``(N, 1, H, W)``; ``data_range`` defaults to the
    value range of ``b`` per sample.
    """
    if data_range is None:
        flat = b.detach().reshape(b.shape[0], -1)
        data_range = (flat.max(1).values - flat.min(1).values).clamp_min(1e-8).reshape(-1, 1, 1, 1)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    w = gaussian_window(win, sigma).to(a.dtype)[None, None]
    pad = win // 2

    def blur(x):
        return F.conv2d(F.pad(x, (pad,) * 4, mode="reflect"), w)

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return (num / den).mean()


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64)


def sobel_magnitude(x, tiny: float = 1e-12):
    """Sobel gradient magnitude with edge replication, ``(N, 1, H, W)``."""
    k = torch.stack([_SOBEL_X, _SOBEL_X.T])[:, None].to(x.dtype)
    g = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k)
    return torch.sqrt(g[:, :1] ** 2 + g[:, 1:] ** 2 + tiny)


def denoising_terms(decoded, prior) -> dict:
    """Unweighted ``1 - SSIM``, Sobel-magnitude L1 and pixel L1 terms."""
    return {
        "ssim": 1.0 - ssim_torch(decoded, prior),
        "grad": (sobel_magnitude(prior) - sobel_magnitude(decoded)).abs().mean(),
        "l1": (prior - decoded).abs().mean(),
    }


def refiner_losses(eps, eps_hat, decoded, prior, cfg: RefinerTrainConfig = RefinerTrainConfig()):
    """``(L_diff, L_denoising, L_image)`` as tensors.

    ``decoded`` and ``prior`` are ``(N, 1, H, W)`` images in network units.
    """
    if decoded.shape != prior.shape or eps.shape != eps_hat.shape:
        raise ValidationError("loss inputs must match in shape")
    l_diff = (eps - eps_hat).pow(2).mean()
    terms = denoising_terms(decoded, prior)
    l_den = cfg.beta_ssim * terms["ssim"] + cfg.gamma_grad * terms["grad"] + cfg.eta_l1 * terms["l1"]
    total = l_diff + l_den
    if not torch.isfinite(total):
        raise TrainingFault("non-finite refiner loss")
    return l_diff, l_den, total


# ---------------------------------------------------------------------------
# checkpoint

@dataclass
class RefinerCheckpoint:
    state_dict: dict
    net_cfg: RefinerNetConfig
    train_cfg: RefinerTrainConfig
    schedule: dict
    epochs_done: int = 0
    loss_curve: list = field(default_factory=list)
    skipped_steps: int = 0
    prior_checkpoint: str | None = None

    def build_schedule(self) -> DiffusionSchedule:
        return build_schedule(**self.schedule)

    def build(self) -> LatentRefiner:
        model = LatentRefiner(self.net_cfg, self.build_schedule())
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def manifest(self) -> dict:
        return {
            "kind": "refiner-checkpoint",
            "config_hash": config_hash({"net": self.net_cfg, "train": self.train_cfg, "schedule": self.schedule}),
            "net": asdict(self.net_cfg),
            "train": asdict(self.train_cfg),
            "schedule": self.schedule,
            "seed": self.train_cfg.seed,
            "epochs_done": self.epochs_done,
            "loss_curve": self.loss_curve,
            "skipped_steps": self.skipped_steps,
            "prior_checkpoint": self.prior_checkpoint,
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
    def load(cls, directory) -> "RefinerCheckpoint":
        directory = Path(directory)
        man = read_json(directory / MANIFEST_NAME)
        if man.get("kind") != "refiner-checkpoint":
            raise ConfigurationError(f"{directory} is not a refiner checkpoint")
        state = torch.load(directory / "weights.pt", weights_only=True)
        sched = dict(man["schedule"])
        sched["beta_spec"] = tuple(sched["beta_spec"])
        return cls(state, RefinerNetConfig(**man["net"]), RefinerTrainConfig(**man["train"]), sched,
                   man["epochs_done"], man["loss_curve"], man["skipped_steps"], man.get("prior_checkpoint"))


# ---------------------------------------------------------------------------
# encode / decode on CTImage

def _image_batch(images, scale):
    arrs = [im.data if isinstance(im, CTImage) else np.asarray(im) for im in images]
    for a in arrs:
        if a.shape[0] % FACTOR or a.shape[1] % FACTOR:
            h, w = a.shape
            raise ValidationError(
                f"image {h}x{w} is not divisible by {FACTOR}; pad to "
                f"{h + (-h) % FACTOR}x{w + (-w) % FACTOR}")
    x = image_to_net(np.stack(arrs), scale)
    return torch.as_tensor(x[:, None], dtype=torch.float32)


def encode(image, model: LatentRefiner) -> torch.Tensor:
    """Latent of one image, shape ``(latent_channels, H/4, W/4)``."""
    with torch.no_grad():
        return model.encoder(_image_batch([image], model.cfg.image_scale))[0]


def decode(z, model: LatentRefiner, hu_window=None) -> CTImage:
    with torch.no_grad():
        x = model.decoder(torch.as_tensor(z, dtype=torch.float32)[None])[0, 0].double().numpy()
    img = net_to_image(x, model.cfg.image_scale)
    return CTImage(img) if hu_window is None else CTImage(img, hu_window)


# ---------------------------------------------------------------------------
# training

def refiner_step(model: LatentRefiner, sched: DiffusionSchedule, x_ld, prior, t, eps, cfg):
    """Losses for one batch in network units."""
    z0 = model.encoder(x_ld)
    zt = forward_diffuse(z0, t, eps, sched)
    eps_hat = model.predictor(zt, torch.as_tensor(t), z0)
    z0_hat = predict_x0(zt, eps_hat, t, sched)
    decoded = model.decoder(z0_hat)
    return refiner_losses(eps, eps_hat, decoded, prior, cfg)


def train_refiner(pairs, sched: DiffusionSchedule | None = None, cfg: RefinerTrainConfig = RefinerTrainConfig(),
                  net_cfg: RefinerNetConfig = RefinerNetConfig(), schedule_args: dict | None = None,
                  prior_checkpoint: str | None = None, progress=None) -> RefinerCheckpoint:
    """Distil the prior images into the latent refiner.

    ``pairs`` holds ``(x_ld, x_prior)`` image pairs; the prior comes from a
    frozen projection checkpoint.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("training set is empty")
    schedule_args = dict(schedule_args or {"T": 1000, "T_L": 5, "beta_spec": ("linear", 1e-4, 0.02)})
    if sched is None:
        sched = build_schedule(**schedule_args)
    x_ld = np.stack([(p[0].data if isinstance(p[0], CTImage) else np.asarray(p[0])) for p in pairs])
    prior = np.stack([(p[1].data if isinstance(p[1], CTImage) else np.asarray(p[1])) for p in pairs])
    if x_ld.shape != prior.shape:
        raise ValidationError("x_ld and prior stacks differ in shape")
    if net_cfg.image_scale is None:
        sigma = estimate_image_noise_hu(x_ld)
        net_cfg = replace(net_cfg, image_scale=10.0 * sigma if sigma > 0 else 100.0)
    xs = _image_batch(list(x_ld), net_cfg.image_scale)
    ps = _image_batch(list(prior), net_cfg.image_scale)

    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, "train-latent", "init"))
        model = LatentRefiner(net_cfg, sched)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.epochs * steps_per_epoch))
    order_rng = make_rng(cfg.seed, "train-latent", "order")
    noise = torch_generator(cfg.seed, "train-latent", "noise")
    tdraw = make_rng(cfg.seed, "train-latent", "t")

    curve, skipped, initial, runaway = [], 0, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        order = order_rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            t = tdraw.integers(1, sched.T + 1, size=len(idx))
            b = xs[idx]
            latent_shape = (len(idx), net_cfg.latent_channels, b.shape[-2] // FACTOR, b.shape[-1] // FACTOR)
            eps = torch.randn(latent_shape, generator=noise)
            try:
                _, _, loss = refiner_step(model, sched, b, ps[idx], t, eps, cfg)
            except TrainingFault as exc:
                skipped += 1
                log.warning("epoch %d: step skipped (%s)", epoch, exc)
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            value = float(loss.detach())
            losses.append(value)
            if initial is None:
                initial = value
            runaway = runaway + 1 if value > 1e3 * initial else 0
            if runaway >= 100:
                raise TrainingFault(f"refiner training diverged at epoch {epoch}")
        curve.append(float(np.mean(losses)) if losses else math.nan)
        if progress:
            progress(epoch, curve[-1])
    model.eval()
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    schedule_args = {"T": sched.T, "T_L": sched.T_L, "beta_spec": tuple(schedule_args.get("beta_spec", ("linear", 1e-4, 0.02))),
                     "check_terminal": schedule_args.get("check_terminal", True)}
    return RefinerCheckpoint(state, net_cfg, cfg, schedule_args, cfg.epochs, curve, skipped, prior_checkpoint)
