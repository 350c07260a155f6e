"""Prior-aided face hallucination network.

Four cooperating pieces:

* ``CoarseNet``: residual refinement of the bicubically upsampled input.
  Its output head is zero-initialized, so at initialization the coarse
  stage is exactly the identity on its input.
* ``TriPathNet``: a shared stem/trunk at quarter resolution feeding three
  branches that emit reusable features, landmark heatmaps, and a per-pixel
  parsing distribution.
* ``Integrator``: fuses the three branch outputs, upsamples back to full
  resolution, and adds a learned residual onto the coarse image. Its head
  uses a tiny (1e-4 std) init: near-identity behavior at the start, but
  with live gradient flow back into every branch.
* ``DomainEncoder``: strided encoder producing the feature vectors whose
  distribution discrepancy drives the adversarial domain objective.

No normalization layers anywhere; all state is float parameters, which
keeps checkpoints simple and repeat runs bit-identical.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import nn

from .resize import bicubic_resize

# Ratio between full resolution and the grid the prior branches work on.
PRIOR_STRIDE = 4


def clamp_unit(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] with a straight-through gradient.

    A hard clamp zeroes the gradient of saturated pixels, which can lock a
    badly-initialized (or adversarially perturbed) output outside the valid
    range for good: the reconstruction loss no longer reaches the weights.
    Passing the gradient through keeps saturated pixels pulling back.
    """
    return x + (x.clamp(0.0, 1.0) - x).detach()


@dataclasses.dataclass
class FhnConfig:
    """Shapes and sizes of the hallucination network.

    Defaults describe the full-scale network (224 px faces, x8 upscaling,
    194 landmarks, 11 parsing classes); :meth:`desk` gives the small
    configuration used for fast CPU experiments.
    """

    image_size: int = 224
    scale_factor: int = 8
    heatmap_channels: int = 194
    parsing_channels: int = 11
    base_channels: int = 32
    coarse_blocks: int = 4
    trunk_blocks: int = 3
    path_blocks: int = 3
    integrator_blocks: int = 2
    domain_dim: int = 64
    domain_source: str = "sr"  # which image feeds the domain encoder: sr | coarse

    def __post_init__(self):
        if self.image_size % self.scale_factor != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by scale {self.scale_factor}"
            )
        if self.image_size % PRIOR_STRIDE != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by prior stride {PRIOR_STRIDE}"
            )
        if self.domain_source not in ("sr", "coarse"):
            raise ValueError(f"domain_source must be 'sr' or 'coarse', got {self.domain_source!r}")

    @property
    def lr_size(self) -> int:
        return self.image_size // self.scale_factor

    @property
    def prior_size(self) -> int:
        return self.image_size // PRIOR_STRIDE

    @classmethod
    def desk(cls, image_size: int = 64, heatmap_channels: int = 5, parsing_channels: int = 4):
        return cls(
            image_size=image_size,
            scale_factor=8,
            heatmap_channels=heatmap_channels,
            parsing_channels=parsing_channels,
            base_channels=16,
            coarse_blocks=3,
            trunk_blocks=2,
            path_blocks=2,
            integrator_blocks=2,
            domain_dim=32,
        )


class ResidualBlock(nn.Module):
    """conv-lrelu-conv with an identity skip. The second conv is
    zero-initialized so a fresh block is exactly the identity."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class CoarseNet(nn.Module):
    """Residual coarse super-resolver operating at full resolution.

    Input is the bicubically upsampled low-res image; output adds a learned
    correction and clamps to [0, 1]. The correction head starts at zero.
    """

    def __init__(self, cfg: FhnConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock(c) for _ in range(cfg.coarse_blocks)])
        self.act = nn.LeakyReLU(0.2)
        self.head = nn.Conv2d(c, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, coarse_input):
        h = self.blocks(self.act(self.stem(coarse_input)))
        return clamp_unit(coarse_input + self.head(h))


class TriPathNet(nn.Module):
    """Shared stem and trunk with three task branches at quarter resolution.

    Branch outputs: texture features [base, S/4, S/4], landmark heatmaps
    [N, S/4, S/4], and parsing probabilities [C, S/4, S/4] (softmax over
    classes, so they always sum to one per pixel).
    """

    def __init__(self, cfg: FhnConfig):
        super().__init__()
        c = cfg.base_channels
        self.act = nn.LeakyReLU(0.2)
        self.stem1 = nn.Conv2d(3, c, 3, stride=2, padding=1)
        self.stem2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.trunk = nn.Sequential(*[ResidualBlock(2 * c) for _ in range(cfg.trunk_blocks)])

        def branch(out_ch):
            layers = [ResidualBlock(2 * c) for _ in range(cfg.path_blocks)]
            layers.append(nn.Conv2d(2 * c, out_ch, 3, padding=1))
            return nn.Sequential(*layers)

        self.feature_path = branch(c)
        self.landmark_path = branch(cfg.heatmap_channels)
        self.parsing_path = branch(cfg.parsing_channels)

    def forward(self, image):
        h = self.trunk(self.act(self.stem2(self.act(self.stem1(image)))))
        features = self.feature_path(h)
        heatmaps = self.landmark_path(h)
        parsing = torch.softmax(self.parsing_path(h), dim=-3)
        return features, heatmaps, parsing


class Integrator(nn.Module):
    """Fuses prior-branch outputs into a residual on the coarse image.

    Two learned x2 upsampling stages (nearest-neighbor plus conv) bring the
    quarter-resolution fusion back to full size. The final head uses a
    1e-4 std init: the fresh integrator is a near-identity on the coarse
    image while still passing gradient to all three branches.
    """

    def __init__(self, cfg: FhnConfig):
        super().__init__()
        c = cfg.base_channels
        in_ch = c + cfg.heatmap_channels + cfg.parsing_channels
        self.act = nn.LeakyReLU(0.2)
        self.fuse = nn.Conv2d(in_ch, 2 * c, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock(2 * c) for _ in range(cfg.integrator_blocks)])
        self.up1 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.up2 = nn.Conv2d(c, c, 3, padding=1)
        self.head = nn.Conv2d(c, 3, 3, padding=1)
        nn.init.normal_(self.head.weight, std=1e-4)
        nn.init.zeros_(self.head.bias)

    def forward(self, features, heatmaps, parsing, coarse):
        h = self.blocks(self.act(self.fuse(torch.cat([features, heatmaps, parsing], dim=-3))))
        h = self.act(self.up1(nn.functional.interpolate(h, scale_factor=2, mode="nearest")))
        h = self.act(self.up2(nn.functional.interpolate(h, scale_factor=2, mode="nearest")))
        return clamp_unit(coarse + self.head(h))


class DomainEncoder(nn.Module):
    """Four strided convolutions and a global average pool to a fixed-size
    feature vector. Standard init (not zeroed): the adversary must produce
    a non-degenerate discrepancy from the first step."""

    def __init__(self, cfg: FhnConfig):
        super().__init__()
        c = cfg.base_channels
        widths = [c, 2 * c, 2 * c, cfg.domain_dim]
        layers = []
        prev = 3
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = w
        self.encoder = nn.Sequential(*layers[:-1])  # no activation after last conv

    def forward(self, image):
        return self.encoder(image).mean(dim=(-2, -1))


@dataclasses.dataclass
class FhnOutputs:
    """Everything one hallucination forward produces."""

    coarse: torch.Tensor  # [B, 3, S, S]
    sr: torch.Tensor  # [B, 3, S, S]
    heatmaps: torch.Tensor  # [B, N, S/4, S/4]
    parsing: torch.Tensor  # [B, C, S/4, S/4] probabilities
    features: torch.Tensor  # [B, base, S/4, S/4]


class Fhn(nn.Module):
    """Full hallucination network with named parameter groups.

    ``generator_parameters`` covers the coarse net and the tri-path prior
    generator (the parameters updated by the composite hallucination
    objective), ``integrator_parameters`` the fusion/upsampling stage, and
    ``domain_parameters`` the adversarial encoder.
    """

    def __init__(self, cfg: FhnConfig):
        super().__init__()
        self.cfg = cfg
        self.coarse_net = CoarseNet(cfg)
        self.tri_path = TriPathNet(cfg)
        self.integrator = Integrator(cfg)
        self.domain_encoder = DomainEncoder(cfg)

    def generator_parameters(self):
        return list(self.coarse_net.parameters()) + list(self.tri_path.parameters())

    def integrator_parameters(self):
        return list(self.integrator.parameters())

    def domain_parameters(self):
        return list(self.domain_encoder.parameters())

    def parameter_groups(self) -> dict[str, list[torch.nn.Parameter]]:
        return {
            "generator": self.generator_parameters(),
            "integrator": self.integrator_parameters(),
            "domain": self.domain_parameters(),
        }

    def upsample_lr(self, lr: torch.Tensor) -> torch.Tensor:
        """Bicubic x``scale_factor`` upsample of a low-res batch (no grad)."""
        size = self.cfg.image_size
        out = np.stack(
            [bicubic_resize(item.detach().cpu().numpy(), (size, size)) for item in lr]
        )
        return torch.from_numpy(out).to(lr.dtype)

    def hallucinate(
        self, lr: torch.Tensor, coarse_input: torch.Tensor | None = None
    ) -> FhnOutputs:
        """Run the full pipeline on a low-res batch.

        ``coarse_input`` (the bicubic upsample of ``lr``) may be passed in
        when the data pipeline has it precomputed; otherwise it is derived
        here. Accepts [3, h, w] or [B, 3, h, w]; output shapes follow the
        input batching.
        """
        squeeze = lr.ndim == 3
        if squeeze:
            lr = lr.unsqueeze(0)
            if coarse_input is not None:
                coarse_input = coarse_input.unsqueeze(0)
        if lr.ndim != 4 or lr.shape[-3] != 3:
            raise ValueError(f"expected [B, 3, h, w] input, got {tuple(lr.shape)}")
        if lr.shape[-1] != self.cfg.lr_size or lr.shape[-2] != self.cfg.lr_size:
            raise ValueError(
                f"low-res input must be {self.cfg.lr_size}x{self.cfg.lr_size}, "
                f"got {lr.shape[-2]}x{lr.shape[-1]}"
            )
        if coarse_input is None:
            coarse_input = self.upsample_lr(lr)
        coarse = self.coarse_net(coarse_input)
        features, heatmaps, parsing = self.tri_path(coarse)
        sr = self.integrator(features, heatmaps, parsing, coarse)
        if squeeze:
            coarse, sr, heatmaps, parsing, features = (
                t.squeeze(0) for t in (coarse, sr, heatmaps, parsing, features)
            )
        return FhnOutputs(coarse=coarse, sr=sr, heatmaps=heatmaps, parsing=parsing,
                          features=features)

    def domain_image(self, outputs: FhnOutputs) -> torch.Tensor:
        """The generated image the domain encoder compares against real
        high-res images, per ``cfg.domain_source``."""
        return outputs.sr if self.cfg.domain_source == "sr" else outputs.coarse

    def encode_domain(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 3:
            return self.domain_encoder(image.unsqueeze(0)).squeeze(0)
        return self.domain_encoder(image)
