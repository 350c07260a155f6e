"""Joint training of the hallucinator and the distilled recognizers.

Every iteration runs five phases, each with its own optimizer over its own
parameter group:

1. domain adversary ascends the feature discrepancy (by descending its
   negation) between hallucinated and real high-res images;
2. the generator (coarse net + tri-path priors) descends the composite
   objective: domain term + weighted pixel/landmark/parsing losses;
3. the integrator descends the reconstruction loss of the fused image;
4. the student descends the final-block feature distance to the frozen
   teacher, probing with the hallucinated image (optionally, with
   ``e2e_coupling``, this phase also updates the hallucinator);
5. the assistant descends the per-block residual objective against the
   detached student taps.

All phases share one RMSprop rule and learning rate. The kernel bank for
the domain term is fixed from the first batch by the median heuristic.
Everything runs in-process on CPU with explicit seeding, so a repeated run
is bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from . import losses
from .checkpoint import load_checkpoint, match_arrays, save_checkpoint
from .config import ExperimentConfig, config_from_dict, config_to_dict
from .data import (
    DatasetManifest,
    PairSample,
    default_flip_swap,
    flip_horizontal,
    load_pair_sample,
    nearest_resize_labels,
    render_heatmaps,
)
from .hallucinator import PRIOR_STRIDE, Fhn
from .optim import RmsProp
from .recognizer import HrnNets

PHASES = ("domain", "generator", "integrator", "student", "assistant")
LOSS_KEYS = ("domain", "pixel", "landmark", "parsing", "student_kd", "assistant_kd")


class TrainingDivergedError(RuntimeError):
    """A phase produced a non-finite loss; message names the phase."""


@dataclasses.dataclass
class StepReport:
    """Scalar losses of one training iteration."""

    step: int
    domain: float
    pixel: float
    landmark: float
    parsing: float
    student_kd: float
    assistant_kd: float

    def losses(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in LOSS_KEYS}

    def to_json(self) -> str:
        return json.dumps({"step": self.step, **self.losses()}, sort_keys=True)


class Batcher:
    """Loads every sample up front and serves random batches as tensors.

    Prior targets (heatmaps at sigma/stride, nearest-downsampled parsing
    labels) are precomputed per sample, as are flipped twins when flip
    augmentation is on. Batch composition is driven by one numpy generator,
    so the sequence of batches is a pure function of the seed.
    """

    def __init__(self, manifest: DatasetManifest, cfg: ExperimentConfig):
        self.cfg = cfg
        scale = cfg.fhn.scale_factor
        prior_size = cfg.fhn.prior_size
        sigma = cfg.data.heatmap_sigma / PRIOR_STRIDE
        swap = default_flip_swap(manifest.landmark_count)
        self.samples: list[dict] = []
        for idx in range(len(manifest.records)):
            base = load_pair_sample(manifest, idx, scale)
            variants = [base]
            if cfg.train.flip_augment:
                variants.append(flip_horizontal(base, swap))
            for s in variants:
                self.samples.append(self._pack(s, prior_size, sigma))
        self.rng = np.random.default_rng(cfg.seed)

    @staticmethod
    def _pack(s: PairSample, prior_size: int, sigma: float) -> dict:
        size = s.hr.shape[1]
        # landmarks mapped onto the prior grid with the half-pixel convention
        prior_lms = (s.landmarks + 0.5) * (prior_size / size) - 0.5
        heat = render_heatmaps(prior_lms, prior_size, sigma)
        parse = nearest_resize_labels(s.parsing, prior_size)
        return {
            "hr": torch.from_numpy(s.hr).float(),
            "lr": torch.from_numpy(s.lr).float(),
            "coarse": torch.from_numpy(s.coarse_input).float(),
            "heat": torch.from_numpy(heat).float(),
            "parse": torch.from_numpy(parse),
            "identity": s.identity,
        }

    def draw(self, batch_size: int) -> dict[str, torch.Tensor]:
        idx = self.rng.integers(0, len(self.samples), size=batch_size)
        batch = {
            key: torch.stack([self.samples[i][key] for i in idx])
            for key in ("hr", "lr", "coarse", "heat", "parse")
        }
        batch["identity"] = torch.tensor([self.samples[i]["identity"] for i in idx])
        return batch


def _finite(value: torch.Tensor, phase: str, step: int) -> torch.Tensor:
    if not torch.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss in phase '{phase}' at step {step}: {float(value.detach())!r}"
        )
    return value


class Trainer:
    """Owns the networks, optimizers, and the five phase updates.

    Seeds torch before building the models, so two trainers constructed
    from equal configs start from identical weights.
    """

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.fhn = Fhn(cfg.fhn)
        self.hrn = HrnNets(cfg.hrn)
        tc = cfg.train
        mk = lambda params: RmsProp(params, lr=tc.lr, decay=tc.rms_decay, eps=tc.rms_eps)
        self.opts = {
            "domain": mk(self.fhn.domain_parameters()),
            "generator": mk(self.fhn.generator_parameters()),
            "integrator": mk(self.fhn.integrator_parameters()),
            "student": mk(self.hrn.student_parameters()),
            "assistant": mk(self.hrn.assistant_parameters()),
        }
        self.bank: losses.KernelBank | None = None
        self.step_count = 0

    # -- phases ------------------------------------------------------------

    def _ensure_bank(self, f_src: torch.Tensor, f_hr: torch.Tensor) -> losses.KernelBank:
        if self.bank is None:
            feats = torch.cat([f_src, f_hr], dim=0).detach()
            self.bank = losses.KernelBank.from_features(
                feats, self.cfg.train.kernel_multipliers
            )
        return self.bank

    def phase_domain(self, batch) -> float:
        """Adversary update; returns the (positive) discrepancy value."""
        with torch.no_grad():
            outs = self.fhn.hallucinate(batch["lr"], batch["coarse"])
            src_img = self.fhn.domain_image(outs)
        f_src = self.fhn.encode_domain(src_img)
        f_hr = self.fhn.encode_domain(batch["hr"])
        bank = self._ensure_bank(f_src, f_hr)
        mmd = losses.mk_mmd(f_src, f_hr, bank, self.cfg.train.unbiased_mmd)
        loss = _finite(-mmd, "domain", self.step_count)
        opt = self.opts["domain"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        return float(mmd.detach())

    def _generator_losses(self, batch, outs):
        pixel = losses.pixel_loss(outs.sr, batch["hr"])
        landmark = losses.landmark_loss(outs.heatmaps, batch["heat"])
        parsing = losses.parsing_loss(outs.parsing, batch["parse"])
        return pixel, landmark, parsing

    def phase_generator(self, batch) -> tuple[float, float, float, float]:
        """Composite generator update; returns (domain, pixel, landmark,
        parsing) loss values."""
        outs = self.fhn.hallucinate(batch["lr"], batch["coarse"])
        pixel, landmark, parsing = self._generator_losses(batch, outs)
        f_src = self.fhn.encode_domain(self.fhn.domain_image(outs))
        with torch.no_grad():
            f_hr = self.fhn.encode_domain(batch["hr"])
        bank = self._ensure_bank(f_src, f_hr)
        domain = losses.mk_mmd(f_src, f_hr, bank, self.cfg.train.unbiased_mmd)
        total = losses.generator_loss(domain, pixel, landmark, parsing,
                                      self.cfg.train.weights)
        _finite(total, "generator", self.step_count)
        opt = self.opts["generator"]
        opt.zero_grad()
        total.backward()
        opt.step()
        return float(domain.detach()), float(pixel.detach()), float(landmark.detach()), float(
            parsing.detach()
        )

    def phase_integrator(self, batch) -> float:
        outs = self.fhn.hallucinate(batch["lr"], batch["coarse"])
        loss = _finite(
            losses.integrator_loss(outs.sr, batch["hr"]), "integrator", self.step_count
        )
        opt = self.opts["integrator"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        return float(loss.detach())

    def phase_student(self, batch) -> float:
        """Distill the teacher's final tap into the student on hallucinated
        probes. With ``e2e_coupling`` the hallucinator trains through this
        objective as well; otherwise the probe is detached."""
        coupled = self.cfg.train.e2e_coupling
        if coupled:
            probe = self.fhn.hallucinate(batch["lr"], batch["coarse"]).sr
        else:
            with torch.no_grad():
                probe = self.fhn.hallucinate(batch["lr"], batch["coarse"]).sr
        t_tap = self.hrn.teacher_taps(batch["hr"])[-1]
        s_tap = self.hrn.student_taps(probe)[-1]
        loss = _finite(losses.student_distill_loss(t_tap, s_tap), "student", self.step_count)
        opts = ["student"] + (["generator", "integrator"] if coupled else [])
        for name in opts:
            self.opts[name].zero_grad()
        loss.backward()
        for name in opts:
            self.opts[name].step()
        return float(loss.detach())

    def phase_assistant(self, batch) -> float:
        """Assistant update against the current (post-update, detached)
        student taps."""
        with torch.no_grad():
            probe = self.fhn.hallucinate(batch["lr"], batch["coarse"]).sr
            t_taps = self.hrn.teacher_taps(batch["hr"])
            s_taps = [t.detach() for t in self.hrn.student_taps(probe)]
        a_taps = self.hrn.assistant_taps(probe)
        loss = _finite(
            losses.assistant_distill_loss(t_taps, s_taps, a_taps), "assistant", self.step_count
        )
        opt = self.opts["assistant"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        return float(loss.detach())

    # -- steps -------------------------------------------------------------

    def train_step(self, batch) -> StepReport:
        tc = self.cfg.train
        self.step_count += 1
        domain = pixel = landmark = parsing = float("nan")
        for _ in range(tc.domain_updates):
            domain = self.phase_domain(batch)
        for _ in range(tc.generator_updates):
            domain, pixel, landmark, parsing = self.phase_generator(batch)
        for _ in range(tc.integrator_updates):
            pixel = self.phase_integrator(batch)
        student_kd = float("nan")
        for _ in range(tc.student_updates):
            student_kd = self.phase_student(batch)
        assistant_kd = float("nan")
        for _ in range(tc.assistant_updates):
            assistant_kd = self.phase_assistant(batch)
        return StepReport(
            step=self.step_count,
            domain=domain,
            pixel=pixel,
            landmark=landmark,
            parsing=parsing,
            student_kd=student_kd,
            assistant_kd=assistant_kd,
        )

    # -- persistence -------------------------------------------------------

    def _array_map(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for prefix, module in (("fhn", self.fhn), ("hrn", self.hrn)):
            for name, p in module.state_dict().items():
                out[f"{prefix}.{name}"] = p
        for phase, opt in self.opts.items():
            for i, v in enumerate(opt.state_arrays()):
                out[f"opt.{phase}.{i}"] = v
        return out

    def save(self, path: str | Path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self._array_map().items()}
        extra = {"bank": None}
        if self.bank is not None:
            extra["bank"] = {"sigmas": list(self.bank.sigmas), "betas": list(self.bank.betas)}
        save_checkpoint(path, arrays, step=self.step_count,
                        config=config_to_dict(self.cfg), extra=extra)

    def restore(self, path: str | Path) -> None:
        """Load a checkpoint into this trainer. Fully validates the file and
        its array inventory before touching any state."""
        header, arrays = load_checkpoint(path)
        targets = self._array_map()
        match_arrays(arrays, {k: tuple(v.shape) for k, v in targets.items()})
        with torch.no_grad():
            for name, tensor in targets.items():
                tensor.copy_(torch.from_numpy(arrays[name]).to(tensor.dtype))
        bank = header.get("extra", {}).get("bank")
        self.bank = (
            losses.KernelBank(tuple(bank["sigmas"]), tuple(bank["betas"])) if bank else None
        )
        self.step_count = int(header["step"])


def load_trainer(path: str | Path) -> Trainer:
    """Rebuild a trainer from a checkpoint's own config snapshot."""
    header, _ = load_checkpoint(path)
    trainer = Trainer(config_from_dict(header["config"]))
    trainer.restore(path)
    return trainer


def fit(
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    log=None,
) -> tuple[Trainer, list[StepReport]]:
    """Train from scratch on ``manifest`` for ``cfg.train.steps`` iterations.

    When ``out_dir`` is given, writes losses.jsonl (one line per logged
    step), periodic checkpoints per ``checkpoint_every``, and a final
    checkpoint.ckpt. ``log`` is an optional callable for progress lines.
    """
    trainer = Trainer(cfg)
    batcher = Batcher(manifest, cfg)
    reports: list[StepReport] = []
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "losses.jsonl", "w")
    try:
        for step in range(1, cfg.train.steps + 1):
            report = trainer.train_step(batcher.draw(cfg.train.batch_size))
            reports.append(report)
            if log_fh is not None and (
                step % cfg.train.log_every == 0 or step == cfg.train.steps
            ):
                log_fh.write(report.to_json() + "\n")
                log_fh.flush()
            if log is not None and (step % cfg.train.log_every == 0 or step == 1):
                vals = ", ".join(f"{k}={v:.4g}" for k, v in report.losses().items())
                log(f"step {step}/{cfg.train.steps}: {vals}")
            if (
                out is not None
                and cfg.train.checkpoint_every > 0
                and step % cfg.train.checkpoint_every == 0
            ):
                trainer.save(out / f"checkpoint_{step:06d}.ckpt")
        if out is not None:
            trainer.save(out / "checkpoint.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return trainer, reports
