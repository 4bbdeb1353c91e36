"""Per-class generative models.

A compact style-based generator: a 2-layer mapping MLP turns a normal latent
into an intermediate code, and a synthesis stack grows a learned constant
4x4 tensor through upsample+conv stages whose channels are modulated by that
code. A matching small conv discriminator drives non-saturating adversarial
training with fixed-probability input augmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import SYNTHETIC, ImageSample, LabeledDataset, quantize
from .errors import ConfigError, ContractError
from .util import append_jsonl, seed_torch

CHECKPOINT_FORMAT = "ssgnet-generator"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LatentCode:
    """Input noise vector z, optionally with its mapped intermediate code w."""

    z: np.ndarray
    w: np.ndarray | None = None


def sample_latents(count: int, seed, dim: int = 64) -> list[LatentCode]:
    """Draw `count` i.i.d. standard-normal latent vectors."""
    if count < 1:
        raise ConfigError(f"latent count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, dim)).astype(np.float32)
    return [LatentCode(z=z[i]) for i in range(count)]


@dataclass(frozen=True)
class GanTrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr_generator: float = 2e-3
    lr_discriminator: float = 2e-3
    aug_prob: float = 0.2
    latent_dim: int = 64
    w_dim: int = 64
    base_channels: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if min(self.lr_generator, self.lr_discriminator) <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0.0 <= self.aug_prob <= 1.0):
            raise ConfigError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_generator": self.lr_generator,
            "lr_discriminator": self.lr_discriminator,
            "aug_prob": self.aug_prob,
            "latent_dim": self.latent_dim,
            "w_dim": self.w_dim,
            "base_channels": self.base_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GanTrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown gan config keys: {sorted(unknown)}")
        return cls(**d)


class MappingNetwork(nn.Module):
    """Two-layer MLP from the input latent to the intermediate code."""

    def __init__(self, latent_dim: int, w_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(latent_dim, w_dim)
        self.fc2 = nn.Linear(w_dim, w_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.leaky_relu(self.fc1(z), 0.2))


class SynthesisNetwork(nn.Module):
    """Grows a learned constant 4x4 input through upsample+conv stages.

    Each stage's channels are rescaled by an affine function of the
    intermediate code; every operation is translation-commuting except for
    conv padding, so `padding_mode="circular"` yields a generator that is
    exactly equivariant to integer shifts of the constant input.
    """

    def __init__(self, w_dim: int, image_size: int, base_channels: int = 128,
                 padding_mode: str = "zeros"):
        super().__init__()
        stages = int(round(math.log2(image_size / 4)))
        if 4 * 2 ** stages != image_size or stages < 1:
            raise ConfigError(f"image_size must be 4 * 2**k with k >= 1, got {image_size}")
        self.image_size = image_size
        self.padding_mode = padding_mode
        self.const = nn.Parameter(torch.randn(1, base_channels, 4, 4))
        convs, styles = [], []
        ch = base_channels
        for _ in range(stages):
            ch_out = max(ch // 2, 8)
            convs.append(nn.Conv2d(ch, ch_out, 3, padding=1, padding_mode=padding_mode))
            styles.append(nn.Linear(w_dim, ch_out))
            ch = ch_out
        self.convs = nn.ModuleList(convs)
        self.styles = nn.ModuleList(styles)
        self.to_image = nn.Conv2d(ch, 1, 3, padding=1, padding_mode=padding_mode)

    def forward(self, w: torch.Tensor, const_override: torch.Tensor | None = None) -> torch.Tensor:
        base = self.const if const_override is None else const_override
        x = base.expand(w.shape[0], -1, -1, -1)
        for conv, style in zip(self.convs, self.styles):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = conv(x)
            gain = 1.0 + style(w)[:, :, None, None]
            x = F.leaky_relu(x * gain, 0.2)
        return torch.sigmoid(self.to_image(x))


class Discriminator(nn.Module):
    def __init__(self, image_size: int, base_channels: int = 16):
        super().__init__()
        stages = int(round(math.log2(image_size / 4)))
        layers = []
        ch_in = 1
        ch = base_channels
        for _ in range(stages):
            layers.append(nn.Conv2d(ch_in, ch, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2))
            ch_in, ch = ch, min(ch * 2, 256)
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch_in * 4 * 4, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.flatten(1)).squeeze(1)


@dataclass
class GeneratorBundle:
    """A trained (or freshly initialized) generator for one class."""

    class_id: int
    mapping: MappingNetwork
    synthesis: SynthesisNetwork
    latent_dim: int
    w_dim: int
    base_channels: int
    image_size: int
    seed: int
    padding_mode: str = "zeros"
    history: list = field(default_factory=list)


def init_generator(class_id: int, image_size: int, cfg: GanTrainConfig,
                   padding_mode: str = "zeros") -> GeneratorBundle:
    """Freshly initialized generator; deterministic under cfg.seed."""
    seed_torch(cfg.seed)
    mapping = MappingNetwork(cfg.latent_dim, cfg.w_dim)
    synthesis = SynthesisNetwork(cfg.w_dim, image_size, cfg.base_channels, padding_mode)
    return GeneratorBundle(
        class_id=class_id,
        mapping=mapping,
        synthesis=synthesis,
        latent_dim=cfg.latent_dim,
        w_dim=cfg.w_dim,
        base_channels=cfg.base_channels,
        image_size=image_size,
        seed=cfg.seed,
        padding_mode=padding_mode,
    )


def _latent_batch(bundle: GeneratorBundle, latents) -> torch.Tensor:
    rows = []
    for code in latents:
        z = np.asarray(code.z if isinstance(code, LatentCode) else code, dtype=np.float32)
        if z.shape != (bundle.latent_dim,):
            raise ContractError(f"latent has shape {z.shape}, expected ({bundle.latent_dim},)")
        rows.append(z)
    if not rows:
        raise ContractError("no latents given")
    return torch.from_numpy(np.stack(rows))


def generate(bundle: GeneratorBundle, latents, id_prefix: str | None = None,
             id_start: int = 0) -> list[ImageSample]:
    """Synthesize one image per latent; pure in (parameters, latent)."""
    z = _latent_batch(bundle, latents)
    prefix = id_prefix if id_prefix is not None else f"syn-c{bundle.class_id}"
    bundle.mapping.eval()
    bundle.synthesis.eval()
    with torch.no_grad():
        images = bundle.synthesis(bundle.mapping(z)).squeeze(1).numpy()
    samples = []
    for i, img in enumerate(images):
        samples.append(ImageSample(
            pixels=quantize(img),
            id=f"{prefix}-{id_start + i:05d}",
            provenance=SYNTHETIC,
            class_label=bundle.class_id,
        ))
    return samples


def _augment_batch(x: torch.Tensor, prob: float) -> torch.Tensor:
    """Fixed-probability discriminator-input augmentation:
    flips plus integer circular translations."""
    if prob <= 0:
        return x
    n = x.shape[0]
    size = x.shape[-1]
    max_shift = max(size // 8, 1)
    apply = torch.rand(n) < prob
    out = x
    if not bool(apply.any()):
        return out
    pieces = []
    for i in range(n):
        img = out[i]
        if bool(apply[i]):
            if bool(torch.rand(()) < 0.5):
                img = torch.flip(img, dims=(2,))
            if bool(torch.rand(()) < 0.5):
                img = torch.flip(img, dims=(1,))
            dy = int(torch.randint(-max_shift, max_shift + 1, ()))
            dx = int(torch.randint(-max_shift, max_shift + 1, ()))
            img = torch.roll(img, shifts=(dy, dx), dims=(1, 2))
        pieces.append(img)
    return torch.stack(pieces)


def train_generator(d: LabeledDataset, class_id: int, cfg: GanTrainConfig,
                    log_path: str | Path | None = None,
                    padding_mode: str = "zeros") -> GeneratorBundle:
    """Adversarially train a generator on class `class_id` samples only."""
    class_samples = d.of_class(class_id)
    if len(class_samples) < 16:
        raise ConfigError(f"class {class_id}: generator training needs >= 16 images, got {len(class_samples)}")
    sizes = {s.pixels.shape for s in class_samples}
    if len(sizes) != 1:
        raise ContractError(f"class {class_id}: images have mixed shapes {sizes}")
    image_size = class_samples[0].pixels.shape[0]

    bundle = init_generator(class_id, image_size, cfg, padding_mode=padding_mode)
    disc = Discriminator(image_size)
    opt_g = torch.optim.Adam(
        list(bundle.mapping.parameters()) + list(bundle.synthesis.parameters()),
        lr=cfg.lr_generator, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_discriminator, betas=(0.5, 0.999))

    real = torch.from_numpy(np.stack([s.pixels for s in class_samples])).unsqueeze(1)
    rng = np.random.default_rng([cfg.seed, class_id])
    n = real.shape[0]

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        g_losses, d_losses = [], []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            real_batch = real[idx]
            b = real_batch.shape[0]

            z = torch.randn(b, cfg.latent_dim)
            fake = bundle.synthesis(bundle.mapping(z))

            d_loss = (F.softplus(-disc(_augment_batch(real_batch, cfg.aug_prob))).mean()
                      + F.softplus(disc(_augment_batch(fake.detach(), cfg.aug_prob))).mean())
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            g_loss = F.softplus(-disc(_augment_batch(fake, cfg.aug_prob))).mean()
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            g_losses.append(float(g_loss.detach()))
            d_losses.append(float(d_loss.detach()))
        row = {"epoch": epoch, "g_loss": float(np.mean(g_losses)), "d_loss": float(np.mean(d_losses))}
        bundle.history.append(row)
        if log_path is not None:
            append_jsonl(log_path, row)
    return bundle


def save_generator(bundle: GeneratorBundle, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "class_id": bundle.class_id,
        "latent_dim": bundle.latent_dim,
        "w_dim": bundle.w_dim,
        "base_channels": bundle.base_channels,
        "image_size": bundle.image_size,
        "seed": bundle.seed,
        "padding_mode": bundle.padding_mode,
        "mapping": bundle.mapping.state_dict(),
        "synthesis": bundle.synthesis.state_dict(),
    }, path)
    return path


def load_generator(path: str | Path) -> GeneratorBundle:
    blob = torch.load(Path(path), weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a generator checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported generator checkpoint version {blob.get('version')}")
    mapping = MappingNetwork(blob["latent_dim"], blob["w_dim"])
    synthesis = SynthesisNetwork(blob["w_dim"], blob["image_size"], blob["base_channels"],
                                 blob["padding_mode"])
    mapping.load_state_dict(blob["mapping"])
    synthesis.load_state_dict(blob["synthesis"])
    return GeneratorBundle(
        class_id=blob["class_id"],
        mapping=mapping,
        synthesis=synthesis,
        latent_dim=blob["latent_dim"],
        w_dim=blob["w_dim"],
        base_channels=blob["base_channels"],
        image_size=blob["image_size"],
        seed=blob["seed"],
        padding_mode=blob["padding_mode"],
    )


def measure_equivariance(bundle: GeneratorBundle, shifts, latents) -> float:
    """Mean absolute gap between shifting the constant input before synthesis
    and shifting the synthesized image.

    Shifts are (dy, dx) in output pixels; each component must be a multiple
    of the constant-grid cell size (image_size // 4) and within +/- that
    cell size, so it corresponds to an integer circular shift of the 4x4
    constant tensor.
    """
    cell = bundle.image_size // 4
    z = _latent_batch(bundle, latents)
    bundle.mapping.eval()
    bundle.synthesis.eval()
    errors = []
    with torch.no_grad():
        w = bundle.mapping(z)
        base = bundle.synthesis(w)
        for dy, dx in shifts:
            if dy % cell != 0 or dx % cell != 0:
                raise ContractError(f"shift ({dy}, {dx}) is not a multiple of the cell size {cell}")
            if abs(dy) > cell or abs(dx) > cell:
                raise ContractError(f"shift ({dy}, {dx}) exceeds +/-{cell} pixels")
            shifted_const = torch.roll(bundle.synthesis.const, shifts=(dy // cell, dx // cell), dims=(2, 3))
            from_shifted_input = bundle.synthesis(w, const_override=shifted_const)
            shifted_output = torch.roll(base, shifts=(dy, dx), dims=(2, 3))
            errors.append(float((from_shifted_input - shifted_output).abs().mean()))
    return float(np.mean(errors))
