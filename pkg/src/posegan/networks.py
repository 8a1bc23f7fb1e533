"""Eliminate-add generator, dual-head critic and pose-eliminate probe.

Layer layouts follow the reference architecture tables with a configurable
base width (64 reproduces the tables exactly; desk-scale runs use 16).
Tensors are NCHW inside this module; images are in [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument
from .pose_space import PoseTarget, PoseVocabulary, make_vocabulary, mask_values


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    n_discrete: int = 6
    base_width: int = 64
    k_yaw: int = 3
    k_pitch: int = 3
    n_res_elim: int = 3
    n_res_add: int = 5
    final_norm: bool = True
    # instance norm right after the feature/mask concat removes a spatially constant mask
    # everywhere except the zero-padded border; False keeps that conv un-normalized
    mask_norm: bool = True
    mask_mode: str = "replicate"
    d_max_layers: int = 6
    probe_stages: int = 3
    leaky_slope: float = 0.01

    @property
    def n3d(self) -> int:
        return self.k_yaw + self.k_pitch

    @property
    def feature_channels(self) -> int:
        return 4 * self.base_width

    @property
    def feature_size(self) -> int:
        return self.image_size // 4

    @property
    def d_layers(self) -> int:
        return min(self.d_max_layers, int(math.log2(self.image_size)))

    def validate(self) -> None:
        s = self.image_size
        if s < 4 or s % 4:
            raise InvalidArgument(f"image_size {s} must be divisible by 4 (generator downsamples twice)")
        stride = 2 ** self.d_layers
        if s % stride:
            raise InvalidArgument(
                f"image_size {s} must be divisible by the critic stride product {stride} ({self.d_layers} layers)")
        if self.base_width < 1 or self.n_discrete < 1:
            raise InvalidArgument("base_width and n_discrete must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(c: int) -> nn.Module:
    return nn.InstanceNorm2d(c, affine=True, track_running_stats=False)


class ResidualBlock(nn.Module):
    """conv-IN-ReLU-conv-IN, skip sum, ReLU.

    Convolutions feeding an instance norm carry no bias: the norm would cancel it.
    """

    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, 1, 1, bias=False), _norm(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, 1, 1, bias=False), _norm(c),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


class LeakyResidualBlock(nn.Module):
    def __init__(self, c: int, slope: float):
        super().__init__()
        self.slope = slope
        self.c1 = nn.Conv2d(c, c, 3, 1, 1)
        self.c2 = nn.Conv2d(c, c, 3, 1, 1)

    def forward(self, x):
        h = F.leaky_relu(self.c1(x), self.slope)
        return F.leaky_relu(x + self.c2(h), self.slope)


class Generator(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        b = arch.base_width
        c4 = 4 * b
        self.arch = arch
        self.elim = nn.Sequential(
            nn.Conv2d(3, b, 7, 1, 3, bias=False), _norm(b), nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 4, 2, 1, bias=False), _norm(2 * b), nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, c4, 4, 2, 1, bias=False), _norm(c4), nn.ReLU(inplace=True),
            *[ResidualBlock(c4) for _ in range(arch.n_res_elim)],
        )
        tail = [nn.Conv2d(b, 3, 7, 1, 3, bias=not arch.final_norm)]
        if arch.final_norm:
            tail.append(_norm(3))
        tail.append(nn.Tanh())
        self.add = nn.Sequential(
            *([nn.Conv2d(c4 + arch.n3d, c4, 3, 1, 1, bias=False), _norm(c4)] if arch.mask_norm
              else [nn.Conv2d(c4 + arch.n3d, c4, 3, 1, 1)]),
            nn.ReLU(inplace=True),
            *[ResidualBlock(c4) for _ in range(arch.n_res_add)],
            nn.ConvTranspose2d(c4, 2 * b, 4, 2, 1, bias=False), _norm(2 * b), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * b, b, 4, 2, 1, bias=False), _norm(b), nn.ReLU(inplace=True),
            *tail,
        )

    def eliminate(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x, self.arch)
        return self.elim(x)

    def add_pose(self, feature: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if feature.dim() != 4 or feature.shape[1] != self.arch.feature_channels:
            raise InvalidArgument(f"expected (B, {self.arch.feature_channels}, h, w) features, got {tuple(feature.shape)}")
        if mask.dim() == 2:
            mask = mask[:, :, None, None].expand(-1, -1, feature.shape[2], feature.shape[3])
        if mask.shape[2:] != feature.shape[2:] or mask.shape[0] != feature.shape[0]:
            raise InvalidArgument(f"mask {tuple(mask.shape)} does not match features {tuple(feature.shape)}")
        if mask.shape[1] != self.arch.n3d:
            raise InvalidArgument(f"mask has {mask.shape[1]} channels, expected {self.arch.n3d}")
        return self.add(torch.cat([feature, mask.to(feature.dtype)], dim=1))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.add_pose(self.eliminate(x), mask)


class Discriminator(nn.Module):
    """PatchGAN-style critic with a realism map head and a pose-logit head."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        layers, c_in = [], 3
        for i in range(arch.d_layers):
            c_out = arch.base_width * 2 ** i
            layers += [nn.Conv2d(c_in, c_out, 4, 2, 1), nn.LeakyReLU(arch.leaky_slope, inplace=True)]
            c_in = c_out
        self.trunk = nn.Sequential(*layers)
        self.map_size = arch.image_size // 2 ** arch.d_layers
        self.src = nn.Conv2d(c_in, 1, 3, 1, 1)
        self.cls = nn.Conv2d(c_in, arch.n_discrete, self.map_size, 1, 0)

    def forward(self, x: torch.Tensor):
        _check_image(x, self.arch)
        h = self.trunk(x)
        return self.src(h), self.cls(h).flatten(1)


class PoseProbe(nn.Module):
    """Pose classifier over canonical features (or raw images, for reference probes).

    Three stride-2 stages with a residual block after the first, then a
    full-map convolution to ``n_discrete`` logits.
    """

    def __init__(self, in_channels: int, in_size: int, n_discrete: int, width: int, stages: int = 3,
                 slope: float = 0.01):
        super().__init__()
        stages = max(0, min(stages, int(math.log2(in_size))))
        if in_size % 2 ** stages:
            raise InvalidArgument(f"probe input size {in_size} not divisible by {2 ** stages}")
        self.in_channels, self.in_size = in_channels, in_size
        layers, c = [], in_channels
        for i in range(stages):
            c_out = width * 2 ** i
            layers += [nn.Conv2d(c, c_out, 4, 2, 1), nn.LeakyReLU(slope, inplace=True)]
            if i == 0:
                layers.append(LeakyResidualBlock(c_out, slope))
            c = c_out
        self.trunk = nn.Sequential(*layers)
        self.map_size = in_size // 2 ** stages
        self.head = nn.Conv2d(c, n_discrete, self.map_size, 1, 0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[2] != self.in_size or x.shape[3] != self.in_size:
            raise InvalidArgument(
                f"probe expects (B, {self.in_channels}, {self.in_size}, {self.in_size}), got {tuple(x.shape)}")
        return self.head(self.trunk(x)).flatten(1)


def make_pose_eliminator(arch: ArchConfig) -> PoseProbe:
    return PoseProbe(arch.feature_channels, arch.feature_size, arch.n_discrete, width=arch.feature_channels,
                     stages=arch.probe_stages, slope=arch.leaky_slope)


def _check_image(x: torch.Tensor, arch: ArchConfig) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise InvalidArgument(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise InvalidArgument(f"image size {tuple(x.shape[2:])} not divisible by 4")


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


@dataclass
class Networks:
    arch: ArchConfig
    vocab: PoseVocabulary
    G: Generator
    D: Discriminator
    P: PoseProbe

    def modules(self) -> dict[str, nn.Module]:
        return {"G": self.G, "D": self.D, "P": self.P}

    def eval(self) -> "Networks":
        for m in self.modules().values():
            m.eval()
        return self


def init_params(arch: ArchConfig, seed: int = 0, vocab: PoseVocabulary | None = None) -> Networks:
    arch.validate()
    vocab = vocab or make_vocabulary(arch.n_discrete, 1)
    if vocab.n_discrete != arch.n_discrete:
        raise InvalidArgument(f"vocabulary has {vocab.n_discrete} poses, architecture expects {arch.n_discrete}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        G, D, P = Generator(arch), Discriminator(arch), make_pose_eliminator(arch)
        for m in (G, D, P):
            init_weights(m)
    return Networks(arch, vocab, G, D, P)


# --- numpy-facing helpers ------------------------------------------------------

def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` or ``(B, H, W, 3)`` numpy -> ``(B, 3, H, W)`` float tensor."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def to_numpy(images: torch.Tensor) -> np.ndarray:
    return images.detach().cpu().numpy().transpose(0, 2, 3, 1)


def mask_batch(arch: ArchConfig, vocab: PoseVocabulary, targets) -> torch.Tensor:
    """Per-sample pose-mask channel values ``(B, n3d)`` for a list of targets.

    ``targets`` may hold ``PoseTarget``s, discrete labels, or (yaw, pitch) pairs.
    """
    rows = []
    for t in targets:
        if isinstance(t, PoseTarget):
            tgt = t
        elif np.ndim(t) == 0:
            y, p = vocab.label_coords[int(t)]
            tgt = PoseTarget(float(y), float(p))
        else:
            tgt = PoseTarget(float(t[0]), float(t[1]))
        rows.append(mask_values(vocab, tgt, arch.k_yaw, arch.k_pitch, arch.mask_mode))
    return torch.tensor(np.array(rows), dtype=torch.float32)


def g_eliminate(nets: Networks, images: torch.Tensor) -> torch.Tensor:
    return nets.G.eliminate(images)


def g_add(nets: Networks, feature: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return nets.G.add_pose(feature, mask)


def generate(nets: Networks, images: torch.Tensor, targets) -> torch.Tensor:
    mask = targets if isinstance(targets, torch.Tensor) else mask_batch(nets.arch, nets.vocab, targets)
    return nets.G(images, mask)


def discriminate(nets: Networks, images: torch.Tensor):
    return nets.D(images)


def pose_probe(nets: Networks, feature: torch.Tensor) -> torch.Tensor:
    return nets.P(feature)
