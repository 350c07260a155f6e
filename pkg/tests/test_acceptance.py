"""Top-level acceptance suite.

Ten criteria, one test each, each ending in a single printed PASS line with
the measured numbers. The heavyweight training fixtures are session-scoped
so the full-length desk run happens once and is shared.
"""

import math
import time

import numpy as np
import pytest
import torch

from crossres import losses as L
from crossres.config import ExperimentConfig
from crossres.data import render_heatmaps, split_manifest, synth_dataset
from crossres.losses import KernelBank, LossWeights
from crossres.metrics import (
    csd_curve,
    evaluate_checkpoint,
    psnr,
    ssim,
    verification_sweep,
)
from crossres.recognizer import HrnNets, residual_compose
from crossres.training import Batcher, Trainer, fit, load_trainer

from gradcheck_lib import check_loss_gradients
from oracles import mmd_double_loop
from test_metrics import _pair_from_distance

torch.set_num_threads(1)

TOL_ORACLE = 1e-10
TOL_SYM = 1e-12
TOL_ANALYTIC = 1e-9


def _ok(name: str, detail: str) -> None:
    print(f"\n[{name}] PASS - {detail}")


# ---------------------------------------------------------------------------
# shared heavyweight fixtures

@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """The default synthetic dataset (32 identities x 8 records, 64 px)."""
    cfg = ExperimentConfig()
    root = tmp_path_factory.mktemp("desk_data")
    manifest = synth_dataset(
        root,
        n_identities=cfg.data.n_identities,
        per_identity=cfg.data.per_identity,
        size=cfg.data.image_size,
        seed=cfg.data.seed,
        n_landmarks=cfg.data.n_landmarks,
        n_classes=cfg.data.n_classes,
    )
    return split_manifest(manifest, cfg.data.holdout_per_identity)


@pytest.fixture(scope="session")
def desk_run(desk_dataset, tmp_path_factory):
    """Full-length training on the default config; shared by criteria 7/8."""
    train_m, _ = desk_dataset
    out = tmp_path_factory.mktemp("desk_run")
    cfg = ExperimentConfig()
    t0 = time.monotonic()
    trainer, _ = fit(train_m, cfg, out_dir=out)
    elapsed = time.monotonic() - t0
    return {"trainer": trainer, "out": out, "elapsed": elapsed}


@pytest.fixture(scope="session")
def ablate_corpus(tmp_path_factory):
    """Verification pool for the ablation grid: many records per identity,
    identities disjoint from the training corpus. The default held-out
    split offers only 32 genuine pairs, which quantizes accuracy at 1/128;
    this pool supports a 600-pair balanced sample."""
    cfg = ExperimentConfig()
    root = tmp_path_factory.mktemp("ablate_eval")
    return synth_dataset(
        root,
        n_identities=32,
        per_identity=8,
        size=cfg.data.image_size,
        seed=99,
        n_landmarks=cfg.data.n_landmarks,
        n_classes=cfg.data.n_classes,
    )


# ---------------------------------------------------------------------------

def test_criterion_01_mmd_oracle_equivalence():
    rng = np.random.default_rng(20240817)
    t0 = time.monotonic()
    worst = 0.0
    worst_sym = 0.0
    for _ in range(200):
        n1 = int(rng.integers(1, 33))
        n2 = int(rng.integers(1, 33))
        d = int(rng.integers(1, 17))
        u = int(rng.choice([1, 3, 5]))
        sigmas = tuple(float(s) for s in rng.uniform(0.2, 3.0, size=u))
        betas = tuple(1.0 / u for _ in range(u))
        bank = KernelBank(sigmas, betas)
        x = rng.normal(size=(n1, d))
        y = rng.normal(size=(n2, d))
        ours = float(L.mk_mmd(torch.as_tensor(x), torch.as_tensor(y), bank))
        ref = mmd_double_loop(x, y, sigmas, betas)
        worst = max(worst, abs(ours - ref))
        flipped = float(L.mk_mmd(torch.as_tensor(y), torch.as_tensor(x), bank))
        worst_sym = max(worst_sym, abs(ours - flipped))
        self_val = float(L.mk_mmd(torch.as_tensor(x), torch.as_tensor(x), bank))
        assert self_val == 0.0, f"MMD(X, X) = {self_val!r}, expected literal zero"
    elapsed = time.monotonic() - t0
    assert worst <= TOL_ORACLE, f"max |delta| vs oracle = {worst:.3e}"
    assert worst_sym <= TOL_SYM, f"max symmetry gap = {worst_sym:.3e}"
    assert elapsed < 10.0, f"took {elapsed:.1f}s, budget 10s"
    _ok(
        "criterion 1",
        f"multi-kernel discrepancy matches the double-loop oracle over 200 pairs "
        f"(max |delta| {worst:.2e}, symmetry {worst_sym:.2e}, self-zero exact, "
        f"{elapsed:.1f}s)",
    )


def test_criterion_02_analytic_loss_values():
    checks = []

    # uniform-prediction parsing loss = log(C)/C
    for c in (2, 4, 11):
        probs = torch.full((c, 3, 3), 1.0 / c, dtype=torch.float64)
        labels = torch.zeros((3, 3), dtype=torch.int64)
        got = float(L.parsing_loss(probs, labels))
        want = math.log(c) / c
        checks.append((f"parsing uniform C={c}", got, want))

    # singleton MMD with x={0}, y={1}, sigma=0.5: 2 - 2e^-1
    bank = KernelBank((0.5,), (1.0,))
    got = float(L.mk_mmd(torch.zeros((1, 1), dtype=torch.float64),
                         torch.ones((1, 1), dtype=torch.float64), bank))
    checks.append(("singleton MMD", got, 2.0 - 2.0 * math.exp(-1.0)))

    # landmark loss: N=2 channels, each with squared-error sum 3 -> 3.0
    pred = torch.zeros((2, 2, 2), dtype=torch.float64)
    target = torch.tensor([[[1.0, 1.0], [1.0, 0.0]],
                           [[0.0, 1.0], [1.0, 1.0]]], dtype=torch.float64)
    checks.append(("landmark sum", float(L.landmark_loss(pred, target, "sum")), 3.0))

    # generator composite: 1 + 0.1*2 + 0.2*3 + 0.3*4 = 3.0
    w = LossWeights(0.1, 0.2, 0.3)
    got = float(L.generator_loss(torch.tensor(1.0), torch.tensor(2.0),
                                 torch.tensor(3.0), torch.tensor(4.0), w))
    checks.append(("generator composite", got, 3.0))

    # integrator loss on a constant 0.1 gap -> 0.01
    a = torch.full((3, 4, 4), 0.6, dtype=torch.float64)
    b = torch.full((3, 4, 4), 0.5, dtype=torch.float64)
    checks.append(("integrator constant gap", float(L.integrator_loss(a, b)), 0.01))

    # pixel loss equals the integrator objective on the same fixture
    checks.append(("pixel constant gap", float(L.pixel_loss(a, b)), 0.01))

    # student distillation on a constant gap of 1 -> 1.0
    t = torch.ones((4, 2, 2), dtype=torch.float64)
    s = torch.zeros((4, 2, 2), dtype=torch.float64)
    checks.append(("student constant gap", float(L.student_distill_loss(t, s)), 1.0))

    # assistant loss when taps equal the residual -> 0, and a hand value
    ts = [torch.ones((1, 2, 2), dtype=torch.float64)]
    ss = [torch.zeros((1, 2, 2), dtype=torch.float64)]
    checks.append(("assistant exact residual",
                   float(L.assistant_distill_loss(ts, ss, [ts[0] - ss[0]])), 0.0))

    worst = 0.0
    for name, got, want in checks:
        err = abs(got - want)
        worst = max(worst, err)
        assert err <= TOL_ANALYTIC, f"{name}: got {got!r}, want {want!r}"
    _ok(
        "criterion 2",
        f"{len(checks)} hand-derived loss values reproduced (max error {worst:.2e})",
    )


def test_criterion_03_gradient_checks():
    worst, elapsed = check_loss_gradients(n_inputs=20, seed=0)
    for name, err in worst.items():
        assert err < 1e-4, f"{name}: relative error {err:.3e}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 60s"
    peak = max(worst.values())
    _ok(
        "criterion 3",
        f"autograd matches central differences for all 8 losses x 20 inputs "
        f"(worst relative error {peak:.2e}, {elapsed:.1f}s)",
    )


def test_criterion_04_residual_distillation_identities(desk_dataset):
    train_m, _ = desk_dataset
    cfg = ExperimentConfig()
    cfg.train.steps = 3
    torch.manual_seed(0)
    nets = HrnNets(cfg.hrn)
    faces = torch.rand((2, 3, 64, 64), generator=torch.Generator().manual_seed(1))

    # float32 taps; residuals formed in float64 are exact, so composition
    # recovers the teacher bit-for-bit
    t_taps = [t.double() for t in nets.teacher_taps(faces)]
    s_taps = [t.double().detach() for t in nets.student_taps(faces)]
    residuals = [t - s for t, s in zip(t_taps, s_taps)]
    loss = float(L.assistant_distill_loss(t_taps, s_taps, residuals))
    assert loss == 0.0, f"assistant loss at the analytic residual = {loss!r}"
    for t, s, r in zip(t_taps, s_taps, residuals):
        assert torch.equal(residual_compose(s, r), t)

    # gradient routing: a short full run moves student/assistant groups only
    # through their own objectives and never touches the teacher
    trainer = Trainer(cfg)
    batcher = Batcher(train_m, cfg)
    teacher_sum = float(sum(p.double().sum() for p in trainer.hrn.teacher.parameters()))

    batch = batcher.draw(cfg.train.batch_size)
    stud_before = [p.detach().clone() for p in trainer.hrn.student_parameters()]
    asst_before = [p.detach().clone() for p in trainer.hrn.assistant_parameters()]
    trainer.phase_student(batch)
    stud_moved = any(
        not torch.equal(p, b) for p, b in zip(trainer.hrn.student_parameters(), stud_before)
    )
    asst_still = all(
        torch.equal(p, b) for p, b in zip(trainer.hrn.assistant_parameters(), asst_before)
    )
    assert stud_moved and asst_still, "student objective must update only the student"

    stud_mid = [p.detach().clone() for p in trainer.hrn.student_parameters()]
    trainer.phase_assistant(batch)
    asst_moved = any(
        not torch.equal(p, b) for p, b in zip(trainer.hrn.assistant_parameters(), asst_before)
    )
    stud_still = all(
        torch.equal(p, b) for p, b in zip(trainer.hrn.student_parameters(), stud_mid)
    )
    assert asst_moved and stud_still, "assistant objective must update only the assistant"

    for _ in range(cfg.train.steps):
        trainer.train_step(batcher.draw(cfg.train.batch_size))
    teacher_after = float(sum(p.double().sum() for p in trainer.hrn.teacher.parameters()))
    assert teacher_after == teacher_sum, "teacher parameters changed during training"
    _ok(
        "criterion 4",
        "assistant loss is exactly 0 at the analytic residual, composition "
        "recovers the teacher bit-exactly, objectives update disjoint "
        "parameter groups, teacher checksum unchanged",
    )


def test_criterion_05_minimax_signs(desk_dataset):
    train_m, _ = desk_dataset
    cfg = ExperimentConfig()
    cfg.train.lr = 1e-4
    cfg.train.weights = LossWeights(0.0, 0.0, 0.0)  # isolate the domain term
    trainer = Trainer(cfg)
    batch = Batcher(train_m, cfg).draw(cfg.train.batch_size)

    def measure() -> float:
        with torch.no_grad():
            outs = trainer.fhn.hallucinate(batch["lr"], batch["coarse"])
            f_src = trainer.fhn.encode_domain(trainer.fhn.domain_image(outs))
            f_hr = trainer.fhn.encode_domain(batch["hr"])
            bank = trainer._ensure_bank(f_src, f_hr)
            return float(L.mk_mmd(f_src, f_hr, bank, trainer.cfg.train.unbiased_mmd))

    before_d = measure()
    trainer.phase_domain(batch)
    after_d = measure()
    assert after_d >= before_d - 1e-9, (
        f"adversary phase decreased the discrepancy: {before_d!r} -> {after_d!r}"
    )

    before_g = measure()
    trainer.phase_generator(batch)
    after_g = measure()
    assert after_g <= before_g + 1e-9, (
        f"generator phase increased the discrepancy: {before_g!r} -> {after_g!r}"
    )
    _ok(
        "criterion 5",
        f"on a frozen batch at lr 1e-4 the adversary raised the discrepancy "
        f"({before_d:.6f} -> {after_d:.6f}) and the generator lowered it "
        f"({before_g:.6f} -> {after_g:.6f})",
    )


def test_criterion_06_heatmap_rendering():
    # full-scale landmark count
    rng = np.random.default_rng(3)
    lms = rng.uniform(20, 200, size=(194, 2))
    maps = render_heatmaps(lms, 224, sigma=3.0)
    assert maps.shape == (194, 224, 224)

    # peak exactly 1.0 at the landmark pixel, e^-2 exactly at a 2-sigma offset
    sigma = 3.0
    lms = np.array([[40.0, 30.0]])
    maps = render_heatmaps(lms, 64, sigma=sigma)
    assert maps[0, 30, 40] == 1.0
    off = maps[0, 30, 40 + int(2 * sigma)]
    err = abs(off - math.exp(-2.0))
    assert err <= TOL_ANALYTIC
    peaks = [float(m.max()) for m in render_heatmaps(rng.uniform(5, 58, (7, 2)), 64, 2.0)]
    assert all(p == 1.0 for p in peaks)
    _ok(
        "criterion 6",
        f"194-landmark render gives 194 channels; peak exactly 1.0; "
        f"2-sigma offset within {err:.1e} of e^-2",
    )


def test_criterion_07_hallucination_trend(desk_run, desk_dataset):
    _, test_m = desk_dataset
    report = evaluate_checkpoint(desk_run["trainer"], test_m, "sr-quality")
    psnr_gain = report.mean_psnr - report.mean_psnr_baseline
    ssim_gain = report.mean_ssim - report.mean_ssim_baseline
    assert psnr_gain >= 0.5, (
        f"PSNR {report.mean_psnr:.2f} vs bicubic {report.mean_psnr_baseline:.2f} "
        f"(gain {psnr_gain:+.2f} dB, need +0.5)"
    )
    assert ssim_gain >= 0.02, (
        f"SSIM {report.mean_ssim:.4f} vs bicubic {report.mean_ssim_baseline:.4f} "
        f"(gain {ssim_gain:+.4f}, need +0.02)"
    )
    assert desk_run["elapsed"] < 1800.0, f"training took {desk_run['elapsed']:.0f}s"
    _ok(
        "criterion 7",
        f"2000-step desk run beats bicubic by {psnr_gain:+.2f} dB PSNR and "
        f"{ssim_gain:+.4f} SSIM on held-out records "
        f"({desk_run['elapsed']:.0f}s training)",
    )


def test_criterion_08_ablation_direction(desk_run, desk_dataset, ablate_corpus):
    train_m, _ = desk_dataset
    report = evaluate_checkpoint(
        desk_run["trainer"], ablate_corpus, "ablate", train_manifest=train_m
    )
    rows = report.rows
    slack = 0.01
    f, e, c = rows["fhn_residual_kd"], rows["fhn_kd"], rows["kd_lr"]
    assert f >= e - slack, f"residual distillation {f:.3f} < plain {e:.3f} - slack"
    assert e >= c - slack, f"hallucinated probes {e:.3f} < low-res probes {c:.3f} - slack"
    _ok(
        "criterion 8",
        f"3-seed mean accuracy orders full method {f:.3f} >= plain "
        f"distillation {e:.3f} >= low-res distillation {c:.3f} "
        f"(1-point slack)",
    )


def test_criterion_09_metric_correctness():
    # PSNR hand values
    a = np.zeros((3, 8, 8))
    b = np.full((3, 8, 8), 0.1)
    assert abs(psnr(a, b) - 20.0) < 1e-12
    assert psnr(a, a) == 99.0

    # SSIM identical
    img = np.random.default_rng(0).random((3, 16, 16))
    assert ssim(img, img) == 1.0

    # CSD counting examples and monotonicity
    assert csd_curve([1.0, 2.0, 3.0], [2.0]) == [(2.0, 2.0 / 3.0)]
    assert csd_curve([30.0] * 5, [20.0, 40.0]) == [(20.0, 1.0), (40.0, 0.0)]
    fracs = [f for _, f in csd_curve(np.random.default_rng(1).normal(size=40),
                                     np.linspace(-3, 3, 15))]
    assert all(x >= y for x, y in zip(fracs, fracs[1:]))

    # verification fixture: distances .1/.3 genuine, .6/.9 impostor, t=0.45
    pairs = [
        _pair_from_distance(0.1, True),
        _pair_from_distance(0.3, True),
        _pair_from_distance(0.6, False),
        _pair_from_distance(0.9, False),
    ]
    sweep = verification_sweep(pairs, [0.45])
    assert sweep.best_accuracy == 1.0
    _ok(
        "criterion 9",
        "PSNR/SSIM hand values, capped identical-image PSNR, CSD counting "
        "examples, and the threshold-rule fixture all exact",
    )


def test_criterion_10_reproducibility(desk_dataset, tmp_path_factory):
    train_m, test_m = desk_dataset
    outs, trainers = [], []
    for tag in ("one", "two"):
        cfg = ExperimentConfig()
        cfg.train.steps = 30
        out = tmp_path_factory.mktemp(f"repro_{tag}")
        trainer, _ = fit(train_m, cfg, out_dir=out)
        evaluate_checkpoint(trainer, test_m, "sr-quality", out_dir=out)
        outs.append(out)
        trainers.append(trainer)
    ck_a = (outs[0] / "checkpoint.ckpt").read_bytes()
    ck_b = (outs[1] / "checkpoint.ckpt").read_bytes()
    assert ck_a == ck_b, "checkpoints differ between identical runs"
    assert (outs[0] / "losses.jsonl").read_bytes() == (outs[1] / "losses.jsonl").read_bytes()
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()

    # save/load round trip reproduces the forward pass bit-exactly
    restored = load_trainer(outs[0] / "checkpoint.ckpt")
    batch = Batcher(train_m, ExperimentConfig()).draw(4)
    with torch.no_grad():
        sr_direct = trainers[0].fhn.hallucinate(batch["lr"], batch["coarse"]).sr
        sr_restored = restored.fhn.hallucinate(batch["lr"], batch["coarse"]).sr
    assert torch.equal(sr_direct, sr_restored), "restored forward differs"
    _ok(
        "criterion 10",
        "two identical 30-step runs agree byte-for-byte (checkpoint, loss "
        "log, metric report) and a restored checkpoint reproduces the "
        "forward pass bit-exactly",
    )
