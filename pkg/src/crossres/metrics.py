"""Quality metrics, recognition protocols, and report emission.

PSNR and SSIM are computed in float64 numpy. SSIM is the standard
single-scale form: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
K2 = 0.03, grayscale by channel mean, statistics over valid windows only,
Gaussian-weighted (not sample) covariance.

``evaluate_checkpoint`` runs one of four protocols over a held-out
manifest: image quality of the hallucinated output against the bicubic
baseline, threshold-sweep verification, rank-1 identification, or the
component ablation grid.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .config import ConfigError, EvalConfig
from .data import DatasetManifest, load_pair_sample
from .recognizer import embed, residual_compose
from .training import Trainer, load_trainer

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PROTOCOLS = ("sr-quality", "verify", "identify", "ablate")


def _gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=0)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"expected a 2-D or [C, H, W] image, got shape {arr.shape}")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over all channels, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def _ssim_window() -> np.ndarray:
    d = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2
    g = np.exp(-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    g /= g.sum()
    return np.outer(g, g)


def _windowed_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.tensordot(view, kernel, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity between two images."""
    ga, gb = _gray(a), _gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < SSIM_WINDOW:
        raise ValueError(
            f"image {ga.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    kernel = _ssim_window()
    mu_a = _windowed_mean(ga, kernel)
    mu_b = _windowed_mean(gb, kernel)
    var_a = _windowed_mean(ga * ga, kernel) - mu_a * mu_a
    var_b = _windowed_mean(gb * gb, kernel) - mu_b * mu_b
    cov = _windowed_mean(ga * gb, kernel) - mu_a * mu_b
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def csd_curve(scores, grid) -> list[tuple[float, float]]:
    """Cumulative score distribution: for each grid threshold t, the
    fraction of scores >= t. Nonincreasing along an ascending grid."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("csd_curve needs at least one score")
    return [(float(t), float(np.mean(scores >= t))) for t in grid]


@dataclasses.dataclass
class VerificationSweep:
    thresholds: list[float]
    accuracies: list[float]
    best_threshold: float
    best_accuracy: float


def _pair_distance(e1, e2) -> float:
    return 1.0 - float(
        np.dot(np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64))
    )


def augment_thresholds(base_grid, pairs) -> list[float]:
    """Base grid plus midpoints of adjacent observed pair distances.

    Desk-scale embeddings can cluster within one grid step of each other;
    the midpoints let the sweep separate such clusters while the fixed grid
    keeps the configured sweep range.
    """
    d = np.unique([_pair_distance(e1, e2) for e1, e2, _ in pairs])
    mids = (d[:-1] + d[1:]) / 2.0
    return sorted({float(t) for t in base_grid} | {float(m) for m in mids})


def verification_sweep(pairs, thresholds) -> VerificationSweep:
    """Accuracy of the distance-threshold rule over a grid.

    ``pairs`` holds (embedding, embedding, same_identity) triples; a pair is
    declared same when cosine distance <= t. The best threshold is the
    argmax accuracy, ties resolved toward the smallest t.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("verification needs at least one pair")
    labels = np.array([bool(s) for _, _, s in pairs])
    if labels.all() or not labels.any():
        raise ValueError("verification labels contain only one class")
    dist = np.array([_pair_distance(e1, e2) for e1, e2, _ in pairs])
    thresholds = [float(t) for t in thresholds]
    accs = [float(np.mean((dist <= t) == labels)) for t in thresholds]
    best = int(np.argmax(accs))
    return VerificationSweep(
        thresholds=thresholds,
        accuracies=accs,
        best_threshold=thresholds[best],
        best_accuracy=accs[best],
    )


ABLATE_ROWS = (
    "teacher_hr",
    "student_lr",
    "kd_lr",
    "fhn_teacher",
    "fhn_kd",
    "fhn_residual_kd",
)


@dataclasses.dataclass
class MetricReport:
    """Everything a protocol run produced; unused fields stay None.

    Mean fields always equal the arithmetic mean of their per-image lists.
    """

    protocol: str
    count: int = 0
    psnr_values: list[float] | None = None
    ssim_values: list[float] | None = None
    psnr_baseline_values: list[float] | None = None
    ssim_baseline_values: list[float] | None = None
    mean_psnr: float | None = None
    mean_ssim: float | None = None
    mean_psnr_baseline: float | None = None
    mean_ssim_baseline: float | None = None
    csd_thresholds: list[float] | None = None
    csd_fractions: list[float] | None = None
    verify_thresholds: list[float] | None = None
    verify_accuracies: list[float] | None = None
    best_threshold: float | None = None
    best_accuracy: float | None = None
    rank1_rate: float | None = None
    rows: dict[str, float] | None = None
    rows_by_seed: dict[str, list[float]] | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# embedding machinery shared by the recognition protocols

@dataclasses.dataclass
class EvalStacks:
    """All held-out records as tensors, plus their hallucinated views."""

    hr: torch.Tensor  # [n, 3, S, S]
    lr: torch.Tensor
    coarse: torch.Tensor
    sr: torch.Tensor
    identities: np.ndarray


def build_eval_stacks(trainer: Trainer, manifest: DatasetManifest, batch: int = 16) -> EvalStacks:
    scale = trainer.cfg.fhn.scale_factor
    samples = [load_pair_sample(manifest, i, scale) for i in range(len(manifest.records))]
    hr = torch.stack([torch.from_numpy(s.hr).float() for s in samples])
    lr = torch.stack([torch.from_numpy(s.lr).float() for s in samples])
    coarse = torch.stack([torch.from_numpy(s.coarse_input).float() for s in samples])
    srs = []
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            srs.append(trainer.fhn.hallucinate(lr[i : i + batch], coarse[i : i + batch]).sr)
    return EvalStacks(
        hr=hr,
        lr=lr,
        coarse=coarse,
        sr=torch.cat(srs),
        identities=np.array([s.identity for s in samples]),
    )


def embed_stack(tap_fn, images: torch.Tensor, batch: int = 16) -> torch.Tensor:
    """Embed a stack of images with a taps-producing callable; returns
    [n, D] float64 normalized embeddings."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            out.append(embed(tap_fn(images[i : i + batch])[-1]).to(torch.float64))
    return torch.cat(out)


def method_probe_embeddings(trainer: Trainer, images: torch.Tensor) -> torch.Tensor:
    """Full-method probe embedding: student + assistant residual composed on
    the hallucinated image."""
    hrn = trainer.hrn

    def taps(x):
        s = hrn.student_taps(x)
        a = hrn.assistant_taps(x)
        return [residual_compose(si, ai) for si, ai in zip(s, a)]

    return embed_stack(taps, images)


def sample_verify_pairs(identities: np.ndarray, n_pairs: int, seed: int):
    """Index pairs (probe, gallery, same) balanced between classes.

    Draws up to ``n_pairs`` genuine ordered cross-record pairs and as many
    impostor pairs, without replacement, from one identity array.
    """
    ids = np.asarray(identities)
    n = len(ids)
    genuine = [(i, j) for i in range(n) for j in range(n) if i != j and ids[i] == ids[j]]
    impostor = [(i, j) for i in range(n) for j in range(n) if ids[i] != ids[j]]
    if not genuine or not impostor:
        raise ConfigError(
            "verification needs both genuine and impostor pairs; "
            f"manifest has {len(set(ids.tolist()))} identities over {n} records"
        )
    rng = np.random.default_rng(seed)
    k = min(n_pairs, len(genuine), len(impostor))
    gen_idx = rng.choice(len(genuine), size=k, replace=False)
    imp_idx = rng.choice(len(impostor), size=k, replace=False)
    return [(genuine[i], True) for i in gen_idx] + [(impostor[i], False) for i in imp_idx]


def _check_compatible(trainer: Trainer, manifest: DatasetManifest) -> None:
    cfg = trainer.cfg
    checks = [
        ("image size", manifest.image_size, cfg.fhn.image_size),
        ("landmark count", manifest.landmark_count, cfg.fhn.heatmap_channels),
    ]
    for name, got, want in checks:
        if got != want:
            raise ConfigError(f"manifest {name} {got} does not match checkpoint config {want}")
    if manifest.class_count > cfg.fhn.parsing_channels:
        raise ConfigError(
            f"manifest has {manifest.class_count} parsing classes, checkpoint config "
            f"supports {cfg.fhn.parsing_channels}"
        )


# ---------------------------------------------------------------------------
# protocols

def _protocol_sr_quality(trainer: Trainer, manifest: DatasetManifest) -> MetricReport:
    stacks = build_eval_stacks(trainer, manifest)
    hr = stacks.hr.numpy().astype(np.float64)
    sr = stacks.sr.numpy().astype(np.float64)
    coarse = stacks.coarse.numpy().astype(np.float64)
    p_model = [psnr(s, h) for s, h in zip(sr, hr)]
    s_model = [ssim(s, h) for s, h in zip(sr, hr)]
    p_base = [psnr(c, h) for c, h in zip(coarse, hr)]
    s_base = [ssim(c, h) for c, h in zip(coarse, hr)]
    return MetricReport(
        protocol="sr-quality",
        count=len(hr),
        psnr_values=p_model,
        ssim_values=s_model,
        psnr_baseline_values=p_base,
        ssim_baseline_values=s_base,
        mean_psnr=float(np.mean(p_model)),
        mean_ssim=float(np.mean(s_model)),
        mean_psnr_baseline=float(np.mean(p_base)),
        mean_ssim_baseline=float(np.mean(s_base)),
    )


def _protocol_verify(
    trainer: Trainer, manifest: DatasetManifest, eval_cfg: EvalConfig
) -> MetricReport:
    stacks = build_eval_stacks(trainer, manifest)
    probe = method_probe_embeddings(trainer, stacks.sr)
    gallery = embed_stack(trainer.hrn.teacher.forward_taps, stacks.hr)
    indexed = sample_verify_pairs(stacks.identities, eval_cfg.verify_pairs, eval_cfg.seed)
    pairs = [(probe[i].numpy(), gallery[j].numpy(), same) for (i, j), same in indexed]
    sweep = verification_sweep(pairs, augment_thresholds(eval_cfg.thresholds(), pairs))
    genuine_scores = [
        float(np.dot(e1, e2)) for (e1, e2, same) in pairs if same
    ]
    curve = csd_curve(genuine_scores, np.linspace(-1.0, 1.0, eval_cfg.csd_points))
    return MetricReport(
        protocol="verify",
        count=len(pairs),
        csd_thresholds=[t for t, _ in curve],
        csd_fractions=[f for _, f in curve],
        verify_thresholds=sweep.thresholds,
        verify_accuracies=sweep.accuracies,
        best_threshold=sweep.best_threshold,
        best_accuracy=sweep.best_accuracy,
    )


def _protocol_identify(trainer: Trainer, manifest: DatasetManifest) -> MetricReport:
    stacks = build_eval_stacks(trainer, manifest)
    ids = stacks.identities
    if len(set(ids.tolist())) < 2:
        raise ConfigError("identification needs at least two identities")
    gallery_idx = []
    seen = set()
    for i, ident in enumerate(ids):
        if ident not in seen:
            seen.add(ident)
            gallery_idx.append(i)
    probe_idx = [i for i in range(len(ids)) if i not in set(gallery_idx)]
    if not probe_idx:
        raise ConfigError("identification needs probe records beyond the gallery")
    gallery = embed_stack(trainer.hrn.teacher.forward_taps, stacks.hr[gallery_idx])
    probes = method_probe_embeddings(trainer, stacks.sr[probe_idx])
    sim = probes @ gallery.T
    nearest = np.asarray(sim.argmax(dim=1))
    gallery_ids = ids[gallery_idx]
    hits = gallery_ids[nearest] == ids[probe_idx]
    return MetricReport(
        protocol="identify",
        count=len(probe_idx),
        rank1_rate=float(np.mean(hits)),
    )


def evaluate_checkpoint(
    ckpt: str | Path | Trainer,
    manifest: DatasetManifest,
    protocol: str,
    train_manifest: DatasetManifest | None = None,
    out_dir: str | Path | None = None,
    log=None,
) -> MetricReport:
    """Run one evaluation protocol on held-out records.

    ``ckpt`` is a checkpoint path or an in-memory trainer. The ablation
    protocol additionally needs ``train_manifest`` to fit its per-row
    students. With ``out_dir`` set, writes report.json plus a CSD plot for
    the verify protocol.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")
    trainer = ckpt if isinstance(ckpt, Trainer) else load_trainer(ckpt)
    _check_compatible(trainer, manifest)
    if protocol == "sr-quality":
        report = _protocol_sr_quality(trainer, manifest)
    elif protocol == "verify":
        report = _protocol_verify(trainer, manifest, trainer.cfg.eval)
    elif protocol == "identify":
        report = _protocol_identify(trainer, manifest)
    else:
        if train_manifest is None:
            raise ConfigError("the ablate protocol needs a training manifest")
        from .ablation import run_ablation  # deferred: ablation trains models

        report = run_ablation(trainer, train_manifest, manifest, log=log)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "report.json")
        if report.csd_thresholds is not None:
            plot_csd(report, out / "csd.png")
    return report


# ---------------------------------------------------------------------------
# plots

def plot_csd(report: MetricReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(report.csd_thresholds, report.csd_fractions, marker="o", ms=3)
    ax.set_xlabel("similarity score")
    ax.set_ylabel("fraction of genuine pairs >= score")
    ax.set_title("cumulative score distribution")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curves(rows: list[dict], path: str | Path) -> None:
    """Plot the six per-step losses from loss-log rows ({step, <loss>...})."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in rows]
    for key in ("domain", "pixel", "landmark", "parsing", "student_kd", "assistant_kd"):
        ax.plot(steps, [r[key] for r in rows], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
