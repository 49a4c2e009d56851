"""Volumetric networks: WGAN critic, generator/decoder, VAE encoder, IntroVAE pair, V-Net.

All forward maps take and return channels-last tensors ``(N, D, H, W, C)``;
the channel permutation for ``torch.nn.Conv3d`` happens inside. Strided
(transpose-)convolutions use kernel 4, stride 2, padding 1 so each block
exactly halves (doubles) the spatial size.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

LATENT_DIM = 200
LOG_VAR_CLAMP = 10.0
ENCODER_GROUPS = 8
CHANNEL_CAP = 256
N_BLOCKS = 4
INIT_STD = 0.02
# Expected occupancy used to initialise sigmoid output heads.
OUTPUT_PRIOR = 0.05


class ArchitectureError(ValueError):
    pass


class GaussianPosterior(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor


def default_base_channels(resolution: int) -> int:
    return 32 if resolution >= 128 else 16


def channel_schedule(base_channels: int, n_blocks: int = N_BLOCKS) -> list[int]:
    """Per-block output widths: ``base`` doubling per block, capped at 256."""
    return [min(base_channels * 2**i, CHANNEL_CAP) for i in range(n_blocks)]


def _check_resolution(resolution: int, levels: int) -> None:
    if resolution <= 0 or resolution % (2**levels):
        raise ArchitectureError(f"resolution {resolution} is not divisible by 2^{levels}")


def _groups(channels: int) -> int:
    return math.gcd(ENCODER_GROUPS, channels)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm3d, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def to_channels_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 4, 1, 2, 3)


def to_channels_last(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 4, 1)


def _down_stack(in_channels: int, widths: list[int], norm: str) -> nn.Sequential:
    """Strided conv blocks: conv -> norm -> LeakyReLU(0.2)."""
    layers = []
    c = in_channels
    for w in widths:
        layers.append(nn.Conv3d(c, w, kernel_size=4, stride=2, padding=1))
        if norm == "layer":
            # One group over (C, D, H, W): per-sample layer normalisation.
            layers.append(nn.GroupNorm(1, w))
        elif norm == "group":
            if w % ENCODER_GROUPS:
                raise ArchitectureError(f"group norm needs widths divisible by {ENCODER_GROUPS}, got {w}")
            layers.append(nn.GroupNorm(ENCODER_GROUPS, w))
        else:
            raise ArchitectureError(f"unknown norm {norm!r}")
        layers.append(nn.LeakyReLU(0.2))
        c = w
    return nn.Sequential(*layers)


class Critic(nn.Module):
    """Two-channel volume -> one unbounded score per sample."""

    def __init__(self, resolution: int = 32, base_channels: int = 16, in_channels: int = 2):
        super().__init__()
        _check_resolution(resolution, N_BLOCKS)
        self.config = dict(role="critic", resolution=resolution, base_channels=base_channels, in_channels=in_channels)
        widths = channel_schedule(base_channels)
        self.features = _down_stack(in_channels, widths, "layer")
        self.head = nn.Linear(widths[-1] * (resolution // 16) ** 3, 1)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(to_channels_first(x))
        return self.head(h.flatten(1)).squeeze(1)


class Generator(nn.Module):
    """Latent batch ``(N, latent_dim)`` -> two-channel volume ``(N, R, R, R, 2)``.

    ``norm`` is ``"batch"`` for the WGAN-GP generator and ``"group"`` for the
    VAE/IntroVAE decoders.
    """

    def __init__(
        self,
        latent_dim: int = LATENT_DIM,
        resolution: int = 32,
        base_channels: int = 16,
        final_sigmoid: bool = True,
        norm: str = "batch",
        out_channels: int = 2,
        role: str = "generator",
    ):
        super().__init__()
        _check_resolution(resolution, N_BLOCKS)
        self.config = dict(
            role=role,
            latent_dim=latent_dim,
            resolution=resolution,
            base_channels=base_channels,
            final_sigmoid=final_sigmoid,
            norm=norm,
            out_channels=out_channels,
        )
        widths = channel_schedule(base_channels)
        self.seed_channels = widths[-1]
        self.seed_size = resolution // 16
        outs = widths[-2::-1] + [max(widths[0] // 2, 1)]
        self.final_sigmoid = final_sigmoid

        def norm_layer(c):
            if norm == "batch":
                return nn.BatchNorm3d(c)
            if norm == "group":
                return nn.GroupNorm(_groups(c), c)
            raise ArchitectureError(f"unknown norm {norm!r}")

        self.project = nn.Linear(latent_dim, self.seed_channels * self.seed_size**3)
        self.seed_norm = norm_layer(self.seed_channels)
        layers = []
        c = self.seed_channels
        for w in outs:
            layers += [nn.ConvTranspose3d(c, w, kernel_size=4, stride=2, padding=1), norm_layer(w), nn.ReLU()]
            c = w
        self.blocks = nn.Sequential(*layers)
        self.to_volume = nn.Conv3d(c, out_channels, kernel_size=1)
        init_weights(self)
        # The head keeps PyTorch's fan-in scaled init; with N(0, 0.02) and a zero
        # bias a sigmoid head needs hundreds of Adam steps to leave 0.5.
        self.to_volume.reset_parameters()
        nn.init.constant_(self.to_volume.bias, math.log(OUTPUT_PRIOR / (1 - OUTPUT_PRIOR)) if final_sigmoid else 0.0)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        s = self.seed_size
        h = self.project(z).view(z.shape[0], self.seed_channels, s, s, s)
        h = F.relu(self.seed_norm(h))
        out = self.to_volume(self.blocks(h))
        if self.final_sigmoid:
            out = torch.sigmoid(out)
        return to_channels_last(out)


class Encoder(nn.Module):
    """Critic topology with 8-group normalisation and two affine heads (mu, log_var)."""

    def __init__(self, resolution: int = 32, base_channels: int = 16, latent_dim: int = LATENT_DIM, in_channels: int = 2):
        super().__init__()
        _check_resolution(resolution, N_BLOCKS)
        self.config = dict(
            role="encoder", resolution=resolution, base_channels=base_channels, latent_dim=latent_dim, in_channels=in_channels
        )
        widths = channel_schedule(base_channels)
        self.features = _down_stack(in_channels, widths, "group")
        flat = widths[-1] * (resolution // 16) ** 3
        self.mu = nn.Linear(flat, latent_dim)
        self.log_var = nn.Linear(flat, latent_dim)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> GaussianPosterior:
        h = self.features(to_channels_first(x)).flatten(1)
        return GaussianPosterior(self.mu(h), clamp_log_var(self.log_var(h)))


def clamp_log_var(log_var: torch.Tensor) -> torch.Tensor:
    return log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)


def reparameterize(p: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    """``mu + exp(0.5 * log_var) * noise``."""
    if noise.shape != p.mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match posterior {tuple(p.mu.shape)}")
    return p.mu + torch.exp(0.5 * p.log_var) * noise


class _ResidualStage(nn.Module):
    def __init__(self, channels: int, n_convs: int = 2, in_channels: int | None = None):
        super().__init__()
        in_channels = in_channels or channels
        layers = []
        c = in_channels
        for _ in range(n_convs):
            layers += [nn.Conv3d(c, channels, kernel_size=3, padding=1), nn.GroupNorm(_groups(channels), channels), nn.PReLU(channels)]
            c = channels
        self.body = nn.Sequential(*layers)
        self.skip = nn.Conv3d(in_channels, channels, kernel_size=1) if in_channels != channels else nn.Identity()

    def forward(self, x):
        return self.body(x) + self.skip(x)


class VNet(nn.Module):
    """Shallow V-Net: defective skull ``(N, R, R, R, 1)`` -> defect probability ``(N, R, R, R, 1)``."""

    def __init__(self, resolution: int = 32, base_channels: int = 8, levels: int = 3, in_channels: int = 1):
        super().__init__()
        _check_resolution(resolution, levels)
        self.config = dict(role="vnet", resolution=resolution, base_channels=base_channels, levels=levels, in_channels=in_channels)
        widths = [min(base_channels * 2**i, CHANNEL_CAP) for i in range(levels + 1)]
        self.stem = nn.Conv3d(in_channels, widths[0], kernel_size=3, padding=1)
        self.enc = nn.ModuleList([_ResidualStage(w) for w in widths[:-1]])
        self.down = nn.ModuleList([nn.Conv3d(widths[i], widths[i + 1], kernel_size=2, stride=2) for i in range(levels)])
        self.bottom = _ResidualStage(widths[-1])
        self.up = nn.ModuleList([nn.ConvTranspose3d(widths[i + 1], widths[i], kernel_size=2, stride=2) for i in range(levels)])
        self.dec = nn.ModuleList([_ResidualStage(widths[i], in_channels=2 * widths[i]) for i in range(levels)])
        self.head = nn.Conv3d(widths[0], 1, kernel_size=1)
        init_weights(self)
        self.head.reset_parameters()
        nn.init.constant_(self.head.bias, math.log(OUTPUT_PRIOR / (1 - OUTPUT_PRIOR)))
        # PReLU slopes start at torch's 0.25 default rather than the 0.02 Gaussian.
        for m in self.modules():
            if isinstance(m, nn.PReLU):
                nn.init.constant_(m.weight, 0.25)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Encoder feature maps from full resolution down to the bottleneck."""
        h = self.stem(to_channels_first(x))
        maps = []
        for enc, down in zip(self.enc, self.down):
            h = enc(h)
            maps.append(h)
            h = down(h)
        maps.append(self.bottom(h))
        return maps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        maps = self.features(x)
        h = maps[-1]
        for i in reversed(range(len(self.up))):
            h = self.dec[i](torch.cat([self.up[i](h), maps[i]], dim=1))
        return to_channels_last(torch.sigmoid(self.head(h)))


# -- builders ------------------------------------------------------------------


def build_critic(resolution: int = 32, base_channels: int = 16) -> Critic:
    return Critic(resolution, base_channels)


def build_generator(latent_dim: int = LATENT_DIM, resolution: int = 32, base_channels: int = 16, final_sigmoid: bool = True, norm: str = "batch") -> Generator:
    return Generator(latent_dim, resolution, base_channels, final_sigmoid, norm)


def build_vae_encoder(resolution: int = 32, base_channels: int = 16, latent_dim: int = LATENT_DIM) -> Encoder:
    return Encoder(resolution, base_channels, latent_dim)


def build_vae_decoder(latent_dim: int = LATENT_DIM, resolution: int = 32, base_channels: int = 16) -> Generator:
    return Generator(latent_dim, resolution, base_channels, final_sigmoid=True, norm="group", role="decoder")


def build_introvae(resolution: int = 32, base_channels: int = 16, latent_dim: int = LATENT_DIM) -> tuple[Encoder, Generator]:
    """Inference model and sigmoid-free generator; raw outputs are clamped only at synthesis time."""
    enc = Encoder(resolution, base_channels, latent_dim)
    gen = Generator(latent_dim, resolution, base_channels, final_sigmoid=False, norm="group", role="generator")
    return enc, gen


def build_vnet(resolution: int = 32, base_channels: int = 8, levels: int = 3) -> VNet:
    return VNet(resolution, base_channels, levels)


_ROLES = {"critic": Critic, "encoder": Encoder, "generator": Generator, "decoder": Generator, "vnet": VNet}


def build_network(config: dict) -> nn.Module:
    """Rebuild a network from its ``.config`` dict (as stored in checkpoints)."""
    cfg = dict(config)
    role = cfg.get("role")
    if role not in _ROLES:
        raise ArchitectureError(f"unknown network role {role!r}")
    if role not in ("generator", "decoder"):
        cfg.pop("role")
    return _ROLES[role](**cfg)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
