"""Training objectives.

Reconstruction and prior-supervision losses for the hallucination network,
the multi-kernel maximum mean discrepancy used as the adversarial domain
objective, and the two distillation losses of the recognition network.

Distance computations upcast both operands to their common dtype before
subtracting, so a float64 copy of a float32 tensor subtracts exactly.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence

import torch

MEDIAN_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


def _common(*tensors: torch.Tensor) -> tuple[torch.Tensor, ...]:
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        dtype = torch.promote_types(dtype, t.dtype)
    return tuple(t.to(dtype) for t in tensors)


def _check_reduction(reduction: str) -> None:
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def pixel_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Squared intensity error between two images.

    'sum' is the literal sum of squared differences over all elements;
    'mean' (default) divides by the element count so the magnitude is
    comparable across resolutions.
    """
    _check_reduction(reduction)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    pred, target = _common(pred, target)
    d2 = (pred - target) ** 2
    return d2.mean() if reduction == "mean" else d2.sum()


def landmark_loss(
    pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Heatmap regression loss (1/N) sum_n sum_ij (pred - target)^2.

    Accepts [N, H, W] or [B, N, H, W]; a leading batch dimension is averaged.
    'sum' keeps the literal per-map pixel sum (with the 1/N in front);
    'mean' further divides by H*W.
    """
    _check_reduction(reduction)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim not in (3, 4):
        raise ValueError(f"expected [N, H, W] or [B, N, H, W], got {tuple(pred.shape)}")
    pred, target = _common(pred, target)
    per_map = ((pred - target) ** 2).sum(dim=(-2, -1))  # [..., N]
    loss = per_map.mean(dim=-1)
    if reduction == "mean":
        loss = loss / (pred.shape[-2] * pred.shape[-1])
    return loss.mean() if loss.ndim else loss


def parsing_loss(pred_probs: torch.Tensor, target_labels: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -(1/C) * log p(true class).

    ``pred_probs`` is a per-pixel distribution over C classes ([C, H, W] or
    [B, C, H, W]); per-pixel probabilities must sum to 1 within 1e-4.
    ``target_labels`` holds integer class indices. Probabilities are clipped
    to [1e-12, 1] inside the log.
    """
    if pred_probs.ndim not in (3, 4):
        raise ValueError(f"expected [C, H, W] or [B, C, H, W], got {tuple(pred_probs.shape)}")
    class_dim = 0 if pred_probs.ndim == 3 else 1
    if target_labels.shape != pred_probs.shape[:class_dim] + pred_probs.shape[class_dim + 1 :]:
        raise ValueError(
            f"labels shape {tuple(target_labels.shape)} does not match probs "
            f"{tuple(pred_probs.shape)}"
        )
    if not (target_labels.dtype in (torch.int32, torch.int64)):
        raise ValueError(f"target labels must be integer, got {target_labels.dtype}")
    num_classes = pred_probs.shape[class_dim]
    if target_labels.min() < 0 or target_labels.max() >= num_classes:
        raise ValueError(
            f"label values must lie in [0, {num_classes}), got "
            f"[{int(target_labels.min())}, {int(target_labels.max())}]"
        )
    sums = pred_probs.sum(dim=class_dim)
    if (sums - 1.0).abs().max() > 1e-4:
        raise ValueError(
            f"per-pixel class probabilities must sum to 1 (max deviation "
            f"{float((sums - 1.0).abs().max()):.3g})"
        )
    true_p = pred_probs.gather(class_dim, target_labels.unsqueeze(class_dim)).squeeze(class_dim)
    return -(torch.log(true_p.clamp(1e-12, 1.0))).mean() / num_classes


def integrator_loss(
    pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Reconstruction objective of the feature integrator; same form as
    :func:`pixel_loss` applied to the final hallucinated image."""
    return pixel_loss(pred, target, reduction)


# ---------------------------------------------------------------------------
# multi-kernel MMD

@dataclasses.dataclass(frozen=True)
class KernelBank:
    """Convex combination of Gaussian kernels sum_u beta_u exp(-d^2 / (2 sigma_u)).

    ``sigmas`` enter the exponent linearly (not squared). Weights must be
    positive and sum to 1 within 1e-9.
    """

    sigmas: tuple[float, ...]
    betas: tuple[float, ...]

    def __post_init__(self):
        if len(self.sigmas) != len(self.betas) or not self.sigmas:
            raise ValueError(
                f"need matching non-empty sigmas/betas, got {len(self.sigmas)}/{len(self.betas)}"
            )
        if any(s <= 0 for s in self.sigmas):
            raise ValueError(f"kernel widths must be positive: {self.sigmas}")
        if any(b <= 0 for b in self.betas):
            raise ValueError(f"kernel weights must be positive: {self.betas}")
        if abs(sum(self.betas) - 1.0) > 1e-9:
            raise ValueError(f"kernel weights must sum to 1, got {sum(self.betas)!r}")

    @classmethod
    def uniform(cls, sigmas: Sequence[float]) -> "KernelBank":
        n = len(sigmas)
        return cls(tuple(float(s) for s in sigmas), tuple(1.0 / n for _ in sigmas))

    @classmethod
    def from_features(
        cls,
        features: torch.Tensor,
        multipliers: Sequence[float] = MEDIAN_MULTIPLIERS,
    ) -> "KernelBank":
        """Median-heuristic bank: widths are multiples of the median pairwise
        squared distance among ``features`` ([B, D]), uniform weights."""
        f = features.detach().to(torch.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError(f"need at least two feature rows, got shape {tuple(f.shape)}")
        d2 = torch.cdist(f, f).pow(2)
        off = d2[~torch.eye(f.shape[0], dtype=torch.bool)]
        med = float(off.median())
        if not med > 0:
            med = 1.0
        return cls.uniform([m * med for m in multipliers])


def _pairwise_sq_dists(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    xx = (x * x).sum(dim=1)
    yy = (y * y).sum(dim=1)
    d2 = xx[:, None] + yy[None, :] - 2.0 * (x @ y.T)
    return d2.clamp_min(0.0)


def _kernel_matrix(d2: torch.Tensor, bank: KernelBank) -> torch.Tensor:
    out = torch.zeros_like(d2)
    for sigma, beta in zip(bank.sigmas, bank.betas):
        out = out + beta * torch.exp(-d2 / (2.0 * sigma))
    return out


def mk_mmd(
    x: torch.Tensor,
    y: torch.Tensor,
    bank: KernelBank,
    unbiased: bool = False,
) -> torch.Tensor:
    """Squared maximum mean discrepancy between feature batches x and y.

    Default is the biased V-statistic

        (1/n^2) sum k(x, x') - (2/nm) sum k(x, y) + (1/m^2) sum k(y, y'),

    which is exactly zero when both batches are identical. ``unbiased``
    switches the within-batch terms to the U-statistic (diagonal excluded,
    1/(n(n-1)) normalization) and then needs at least two rows per batch.
    """
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError(f"features must be 2-D, got {tuple(x.shape)} and {tuple(y.shape)}")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("each batch needs at least one row")
    x, y = _common(x, y)
    k_xx = _kernel_matrix(_pairwise_sq_dists(x, x), bank)
    k_yy = _kernel_matrix(_pairwise_sq_dists(y, y), bank)
    k_xy = _kernel_matrix(_pairwise_sq_dists(x, y), bank)
    n, m = x.shape[0], y.shape[0]
    if unbiased:
        if n < 2 or m < 2:
            raise ValueError("unbiased estimator needs at least two rows per batch")
        t_xx = (k_xx.sum() - k_xx.diagonal().sum()) / (n * (n - 1))
        t_yy = (k_yy.sum() - k_yy.diagonal().sum()) / (m * (m - 1))
    else:
        t_xx = k_xx.mean()
        t_yy = k_yy.mean()
    return (t_xx - 2.0 * k_xy.mean()) + t_yy


def domain_discriminator_loss(
    f_src: torch.Tensor,
    f_hr: torch.Tensor,
    bank: KernelBank,
    unbiased: bool = False,
) -> torch.Tensor:
    """Objective the domain encoder descends: the negated discrepancy, so
    minimizing it maximizes the separation the generator then reduces."""
    return -mk_mmd(f_src, f_hr, bank, unbiased=unbiased)


# ---------------------------------------------------------------------------
# composite generator objective

@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Mixing weights for the hallucination objective: domain term plus
    lambda0 * pixel + lambda1 * landmark + lambda2 * parsing."""

    lambda0: float = 1.0
    lambda1: float = 10.0
    lambda2: float = 1.0

    def __post_init__(self):
        for name in ("lambda0", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


def generator_loss(
    domain: torch.Tensor | float,
    pixel: torch.Tensor | float,
    landmark: torch.Tensor | float,
    parsing: torch.Tensor | float,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor | float:
    return (
        domain
        + weights.lambda0 * pixel
        + weights.lambda1 * landmark
        + weights.lambda2 * parsing
    )


# ---------------------------------------------------------------------------
# distillation

def student_distill_loss(
    teacher_tap: torch.Tensor, student_tap: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Squared distance between final-block teacher and student features."""
    _check_reduction(reduction)
    if teacher_tap.shape != student_tap.shape:
        raise ValueError(
            f"tap shape mismatch: {tuple(teacher_tap.shape)} vs {tuple(student_tap.shape)}"
        )
    t, s = _common(teacher_tap, student_tap)
    d2 = (t - s) ** 2
    return d2.mean() if reduction == "mean" else d2.sum()


def assistant_distill_loss(
    teacher_taps: Sequence[torch.Tensor],
    student_taps: Sequence[torch.Tensor],
    assistant_taps: Sequence[torch.Tensor],
    reduction: str = "mean",
) -> torch.Tensor:
    """Residual objective sum_k || (f_T^k - f_S^k) - f_A^k ||^2.

    The assistant regresses the per-block teacher-student residual; terms
    are summed over blocks, each reduced per ``reduction``.
    """
    _check_reduction(reduction)
    if not (len(teacher_taps) == len(student_taps) == len(assistant_taps)):
        raise ValueError(
            f"tap list lengths differ: {len(teacher_taps)}/{len(student_taps)}/"
            f"{len(assistant_taps)}"
        )
    if not teacher_taps:
        raise ValueError("tap lists are empty")
    total = None
    for t, s, a in zip(teacher_taps, student_taps, assistant_taps):
        if not (t.shape == s.shape == a.shape):
            raise ValueError(
                f"tap shape mismatch: {tuple(t.shape)}/{tuple(s.shape)}/{tuple(a.shape)}"
            )
        t, s, a = _common(t, s, a)
        d2 = ((t - s) - a) ** 2
        term = d2.mean() if reduction == "mean" else d2.sum()
        total = term if total is None else total + term
    return total
