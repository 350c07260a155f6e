"""Recognition networks and residual feature distillation.

A frozen, wide teacher embeds high-resolution faces; a narrower student
learns to match the teacher's final-block features on (hallucinated)
low-resolution inputs; an assistant of the student's shape learns the
per-block teacher-student residuals, so that student + assistant composes
back to the teacher's features.

Teacher taps are compared as-is; student and assistant taps pass through
per-block 1x1 projectors onto the teacher's widths. Projectors train with
their own network; the teacher is never projected and never trains.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import torch
from torch import nn


@dataclasses.dataclass
class HrnConfig:
    """Shapes of the teacher/student/assistant backbones.

    ``teacher_widths`` are per-block channel counts; the student and
    assistant share ``student_widths``. The embedding dimension equals the
    final teacher width. Defaults describe the full-scale network,
    :meth:`desk` the CPU-friendly one.
    """

    image_size: int = 224
    teacher_widths: tuple[int, ...] = (64, 128, 256, 512)
    student_widths: tuple[int, ...] = (32, 64, 128, 256)

    def __post_init__(self):
        if len(self.teacher_widths) != len(self.student_widths):
            raise ValueError(
                f"teacher and student must have the same block count, got "
                f"{len(self.teacher_widths)} vs {len(self.student_widths)}"
            )
        if not self.teacher_widths:
            raise ValueError("need at least one block")

    @property
    def block_count(self) -> int:
        return len(self.teacher_widths)

    @property
    def embed_dim(self) -> int:
        return self.teacher_widths[-1]

    @classmethod
    def desk(cls, image_size: int = 64):
        return cls(
            image_size=image_size,
            teacher_widths=(32, 64, 96, 128),
            student_widths=(16, 32, 48, 64),
        )


class TapBackbone(nn.Module):
    """Strided conv backbone exposing one feature tap per block.

    Each block halves the spatial size: downconv, activation, then a
    conv-lrelu-conv residual refiner. ``forward_taps`` returns the list of
    per-block features, last entry being the usual embedding source.
    """

    def __init__(self, widths: tuple[int, ...]):
        super().__init__()
        self.act = nn.LeakyReLU(0.2)
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        downs, refine_a, refine_b = [], [], []
        prev = widths[0]
        for w in widths:
            downs.append(nn.Conv2d(prev, w, 3, stride=2, padding=1))
            refine_a.append(nn.Conv2d(w, w, 3, padding=1))
            refine_b.append(nn.Conv2d(w, w, 3, padding=1))
            prev = w
        self.downs = nn.ModuleList(downs)
        self.refine_a = nn.ModuleList(refine_a)
        self.refine_b = nn.ModuleList(refine_b)
        # a frozen random teacher must keep O(1) tap magnitudes through all
        # blocks, or distillation targets collapse toward zero and students
        # learn nothing transferable
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)

    def forward_taps(self, image: torch.Tensor) -> list[torch.Tensor]:
        h = self.act(self.stem(image))
        taps = []
        for down, ra, rb in zip(self.downs, self.refine_a, self.refine_b):
            h = self.act(down(h))
            h = h + rb(self.act(ra(h)))
            taps.append(h)
        return taps

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.forward_taps(image)[-1]


def _projectors(src: tuple[int, ...], dst: tuple[int, ...]) -> nn.ModuleList:
    return nn.ModuleList(
        nn.Identity() if s == d else nn.Conv2d(s, d, 1) for s, d in zip(src, dst)
    )


class HrnNets(nn.Module):
    """Teacher, student, and assistant with their tap projectors.

    The teacher is frozen at construction (random features are a valid
    teacher for distillation experiments; a pretrained state can be loaded
    into it before freezing semantics matter). Student and assistant each
    own a projector stack mapping their widths onto the teacher's.
    """

    def __init__(self, cfg: HrnConfig):
        super().__init__()
        self.cfg = cfg
        self.teacher = TapBackbone(cfg.teacher_widths)
        self.student = TapBackbone(cfg.student_widths)
        self.assistant = TapBackbone(cfg.student_widths)
        self.student_proj = _projectors(cfg.student_widths, cfg.teacher_widths)
        self.assistant_proj = _projectors(cfg.student_widths, cfg.teacher_widths)
        self.teacher.requires_grad_(False)
        self.teacher.eval()

    def student_parameters(self):
        return list(self.student.parameters()) + list(self.student_proj.parameters())

    def assistant_parameters(self):
        return list(self.assistant.parameters()) + list(self.assistant_proj.parameters())

    def teacher_taps(self, image: torch.Tensor) -> list[torch.Tensor]:
        with torch.no_grad():
            return self.teacher.forward_taps(image)

    def student_taps(self, image: torch.Tensor) -> list[torch.Tensor]:
        return [p(t) for p, t in zip(self.student_proj, self.student.forward_taps(image))]

    def assistant_taps(self, image: torch.Tensor) -> list[torch.Tensor]:
        return [p(t) for p, t in zip(self.assistant_proj, self.assistant.forward_taps(image))]


def residual_compose(student_tap: torch.Tensor, assistant_tap: torch.Tensor) -> torch.Tensor:
    """Recombine student features with the assistant's residual estimate,
    approximating (or, when the assistant is exact, recovering) the
    teacher's features."""
    return student_tap + assistant_tap


def embed(tap: torch.Tensor) -> torch.Tensor:
    """Global-average-pool a [C, H, W] or [B, C, H, W] tap and L2-normalize.

    Raises on an (exactly) zero-norm vector rather than returning NaNs.
    """
    if tap.ndim not in (3, 4):
        raise ValueError(f"expected [C, H, W] or [B, C, H, W], got {tuple(tap.shape)}")
    v = tap.mean(dim=(-2, -1))
    norm = v.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("cannot normalize a zero embedding")
    return v / norm


def cosine_distance(e1: torch.Tensor, e2: torch.Tensor) -> float:
    """1 - cosine similarity of two already-normalized embeddings.

    Clamped to the mathematical range [0, 2]: rounding in the dot product
    can push an identical pair to -1e-16, which would print as "-0.0000".
    """
    d = float(1.0 - (e1.to(torch.float64) * e2.to(torch.float64)).sum(dim=-1))
    return min(max(d, 0.0), 2.0)


class VerifyResult(NamedTuple):
    same: bool
    distance: float


def cosine_verify(e1: torch.Tensor, e2: torch.Tensor, threshold: float) -> VerifyResult:
    """Same-identity decision: distance <= threshold."""
    d = cosine_distance(e1, e2)
    return VerifyResult(same=d <= threshold, distance=d)


def rank1_identify(probe: torch.Tensor, gallery: torch.Tensor) -> int:
    """Index of the gallery embedding closest to the probe (first argmin on
    ties). ``gallery`` is [G, D], ``probe`` is [D]."""
    if gallery.ndim != 2 or probe.ndim != 1 or gallery.shape[1] != probe.shape[0]:
        raise ValueError(
            f"expected probe [D] and gallery [G, D], got {tuple(probe.shape)} and "
            f"{tuple(gallery.shape)}"
        )
    d = 1.0 - gallery.to(torch.float64) @ probe.to(torch.float64)
    return int(torch.argmin(d))
