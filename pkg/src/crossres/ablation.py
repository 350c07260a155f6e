"""Component ablation grid.

Measures toy verification accuracy for six configurations sharing one
trained hallucinator and one frozen teacher:

* ``teacher_hr``       teacher embeddings on both sides (no resolution gap)
* ``student_lr``       plain-KD student embedding both sides of bicubically
                       upsampled low-res views
* ``kd_lr``            plain-KD student trained on bicubic low-res probes,
                       matched against teacher high-res gallery
* ``fhn_teacher``      teacher on hallucinated probes vs teacher gallery
* ``fhn_kd``           student distilled on hallucinated probes vs teacher
* ``fhn_residual_kd``  the fhn_kd student plus the residual assistant

Rows differing only in the distillation recipe are trained here, per seed,
from the given trainer's hallucinator; the trainer's own weights are never
modified. Every controlled quantity is shared across rows: the verification
pair sample, the student init, and the batch sequence all depend on the
seed alone, so row gaps reflect the component change rather than init or
draw luck. Accuracies are averaged over the configured seeds.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from . import metrics
from .config import ExperimentConfig
from .data import DatasetManifest
from .losses import assistant_distill_loss, student_distill_loss
from .optim import RmsProp
from .recognizer import TapBackbone, _projectors, residual_compose
from .training import Batcher, Trainer


@dataclasses.dataclass
class _KdStack:
    """A student- or assistant-shaped backbone with its tap projectors."""

    net: TapBackbone
    proj: torch.nn.ModuleList

    def taps(self, images: torch.Tensor) -> list[torch.Tensor]:
        return [p(t) for p, t in zip(self.proj, self.net.forward_taps(images))]

    def parameters(self):
        return list(self.net.parameters()) + list(self.proj.parameters())


def _fresh_stack(cfg: ExperimentConfig) -> _KdStack:
    return _KdStack(
        net=TapBackbone(cfg.hrn.student_widths),
        proj=_projectors(cfg.hrn.student_widths, cfg.hrn.teacher_widths),
    )


def _probe_images(trainer: Trainer, batch: dict, source: str) -> torch.Tensor:
    if source == "coarse":
        return batch["coarse"]
    with torch.no_grad():
        return trainer.fhn.hallucinate(batch["lr"], batch["coarse"]).sr


def _train_kd(
    trainer: Trainer,
    train_manifest: DatasetManifest,
    cfg: ExperimentConfig,
    seed: int,
    source: str,
    with_assistant: bool,
) -> tuple[_KdStack, _KdStack | None]:
    """Distill a fresh student (and optionally an assistant) against the
    trainer's teacher, probing with ``source`` images ('coarse' or 'sr').

    Reseeds before building each stack and uses a per-seed batcher, so two
    calls with the same seed give rows identical inits and batch draws.
    """
    torch.manual_seed(seed)
    student = _fresh_stack(cfg)
    torch.manual_seed(seed + 1000)
    assistant = _fresh_stack(cfg) if with_assistant else None
    ab = cfg.ablate
    tc = cfg.train
    batcher = Batcher(train_manifest, dataclasses.replace(cfg, seed=seed))
    s_opt = RmsProp(student.parameters(), lr=ab.kd_lr, decay=tc.rms_decay, eps=tc.rms_eps)
    a_opt = (
        RmsProp(assistant.parameters(), lr=ab.kd_lr, decay=tc.rms_decay, eps=tc.rms_eps)
        if with_assistant
        else None
    )
    for _ in range(ab.kd_steps):
        batch = batcher.draw(ab.kd_batch)
        probe = _probe_images(trainer, batch, source)
        t_taps = trainer.hrn.teacher_taps(batch["hr"])
        s_taps = student.taps(probe)
        s_loss = student_distill_loss(t_taps[-1], s_taps[-1])
        s_opt.zero_grad()
        s_loss.backward()
        s_opt.step()
        if with_assistant:
            with torch.no_grad():
                s_det = [t.detach() for t in student.taps(probe)]
            a_taps = assistant.taps(probe)
            a_loss = assistant_distill_loss(t_taps, s_det, a_taps)
            a_opt.zero_grad()
            a_loss.backward()
            a_opt.step()
    return student, assistant


def _accuracy(probe_emb, gallery_emb, indexed_pairs, thresholds) -> float:
    pairs = [
        (probe_emb[i].numpy(), gallery_emb[j].numpy(), same) for (i, j), same in indexed_pairs
    ]
    grid = metrics.augment_thresholds(thresholds, pairs)
    return metrics.verification_sweep(pairs, grid).best_accuracy


def run_ablation(
    trainer: Trainer,
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    log=None,
) -> metrics.MetricReport:
    """Evaluate the six-row grid; returns a report with per-row mean
    accuracies and the per-seed breakdown."""
    cfg = trainer.cfg
    stacks = metrics.build_eval_stacks(trainer, test_manifest)
    indexed = metrics.sample_verify_pairs(
        stacks.identities, cfg.ablate.verify_pairs, cfg.eval.seed
    )
    thresholds = cfg.eval.thresholds()
    teacher_taps = trainer.hrn.teacher.forward_taps
    emb_teacher_hr = metrics.embed_stack(teacher_taps, stacks.hr)
    emb_teacher_sr = metrics.embed_stack(teacher_taps, stacks.sr)

    by_seed: dict[str, list[float]] = {row: [] for row in metrics.ABLATE_ROWS}
    for seed in cfg.ablate.seeds:
        student_c, _ = _train_kd(
            trainer, train_manifest, cfg, seed, "coarse", with_assistant=False
        )
        student_e, assistant_e = _train_kd(
            trainer, train_manifest, cfg, seed, "sr", with_assistant=True
        )

        emb_c_coarse = metrics.embed_stack(student_c.taps, stacks.coarse)
        emb_e_sr = metrics.embed_stack(student_e.taps, stacks.sr)

        def composed(x):
            s = student_e.taps(x)
            a = assistant_e.taps(x)
            return [residual_compose(si, ai) for si, ai in zip(s, a)]

        emb_f_sr = metrics.embed_stack(composed, stacks.sr)

        accs = {
            "teacher_hr": _accuracy(emb_teacher_hr, emb_teacher_hr, indexed, thresholds),
            "student_lr": _accuracy(emb_c_coarse, emb_c_coarse, indexed, thresholds),
            "kd_lr": _accuracy(emb_c_coarse, emb_teacher_hr, indexed, thresholds),
            "fhn_teacher": _accuracy(emb_teacher_sr, emb_teacher_hr, indexed, thresholds),
            "fhn_kd": _accuracy(emb_e_sr, emb_teacher_hr, indexed, thresholds),
            "fhn_residual_kd": _accuracy(emb_f_sr, emb_teacher_hr, indexed, thresholds),
        }
        for row, acc in accs.items():
            by_seed[row].append(acc)
        if log is not None:
            vals = ", ".join(f"{k}={v:.3f}" for k, v in accs.items())
            log(f"ablate seed {seed}: {vals}")
    return metrics.MetricReport(
        protocol="ablate",
        count=len(indexed),
        rows={row: float(np.mean(vals)) for row, vals in by_seed.items()},
        rows_by_seed=by_seed,
    )
