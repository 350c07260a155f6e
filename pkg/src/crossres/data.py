"""Datasets for cross-resolution training.

A dataset is a directory of 8-bit PNGs plus a JSONL manifest, one record per
line::

    {"image_path": ..., "landmarks": [[x, y], ...],
     "parsing_path": ..., "identity": ...}

Images load as float arrays in [0, 1], channel first. The low-resolution and
coarse (bicubically re-upsampled) views are always computed at load time from
the stored high-resolution image, never stored, so the invariant
``lr == bicubic(hr)`` holds by construction.

Also houses the deterministic synthetic face generator used by the desk-scale
experiments: mask-rendered ellipse heads with eyes and a mouth, per-identity
geometry with per-sample jitter, matching parsing labels and landmarks.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .resize import bicubic_resize

# Landmarks snap to this grid so that the horizontal mirror (W - 1) - x is
# exact in float arithmetic (both operands become dyadic rationals).
COORD_GRID = 65536.0

PARSING_CLASS_NAMES = ("background", "skin", "eye", "mouth")


class ManifestError(ValueError):
    """Malformed or internally inconsistent dataset manifest."""


@dataclasses.dataclass
class ManifestRecord:
    image_path: str
    landmarks: np.ndarray  # [N, 2] float64, (x, y) in high-res pixel units
    parsing_path: str
    identity: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_path": self.image_path,
                "landmarks": [[float(x), float(y)] for x, y in self.landmarks],
                "parsing_path": self.parsing_path,
                "identity": int(self.identity),
            },
            sort_keys=True,
        )


@dataclasses.dataclass
class DatasetManifest:
    """Parsed manifest plus the root directory its paths are relative to."""

    root: Path
    records: list[ManifestRecord]
    image_size: int
    landmark_count: int
    class_count: int

    def __len__(self) -> int:
        return len(self.records)

    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records})


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ManifestError(msg)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a JSONL manifest.

    Validation is strict: every record must carry all four fields with the
    right types, every referenced file must exist, and the landmark count
    must agree across records. Errors name the offending line.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        _require(isinstance(raw, dict), f"{path}:{lineno}: record is not an object")
        for key in ("image_path", "landmarks", "parsing_path", "identity"):
            _require(key in raw, f"{path}:{lineno}: missing field '{key}'")
        _require(
            isinstance(raw["identity"], int) and not isinstance(raw["identity"], bool),
            f"{path}:{lineno}: identity must be an integer",
        )
        lms = raw["landmarks"]
        _require(
            isinstance(lms, list)
            and len(lms) > 0
            and all(
                isinstance(p, list)
                and len(p) == 2
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)
                for p in lms
            ),
            f"{path}:{lineno}: landmarks must be a non-empty list of [x, y] pairs",
        )
        for key in ("image_path", "parsing_path"):
            _require(isinstance(raw[key], str), f"{path}:{lineno}: {key} must be a string")
            _require(
                (root / raw[key]).is_file(),
                f"{path}:{lineno}: {key} '{raw[key]}' does not exist under {root}",
            )
        records.append(
            ManifestRecord(
                image_path=raw["image_path"],
                landmarks=np.asarray(lms, dtype=np.float64),
                parsing_path=raw["parsing_path"],
                identity=raw["identity"],
            )
        )
    _require(bool(records), f"{path}: manifest contains no records")
    n_lm = {len(r.landmarks) for r in records}
    _require(len(n_lm) == 1, f"{path}: inconsistent landmark counts across records: {sorted(n_lm)}")
    first_img = load_image(root / records[0].image_path)
    _require(
        first_img.shape[1] == first_img.shape[2],
        f"{path}: images must be square, got {first_img.shape[1]}x{first_img.shape[2]}",
    )
    labels = load_labels(root / records[0].parsing_path)
    return DatasetManifest(
        root=root,
        records=records,
        image_size=first_img.shape[1],
        landmark_count=n_lm.pop(),
        class_count=int(labels.max()) + 1,
    )


def save_manifest(records: list[ManifestRecord], path: str | Path) -> None:
    path = Path(path)
    path.write_text("".join(r.to_json() + "\n" for r in records))


# ---------------------------------------------------------------------------
# image and label IO

def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG as a [3, H, W] float64 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a [3, H, W] float array in [0, 1] as an 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path)


def load_labels(path: str | Path) -> np.ndarray:
    """Read a single-channel PNG of class indices as an int64 [H, W] array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.int64)


def save_labels(labels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# prior targets

def render_heatmaps(landmarks: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Render one Gaussian heatmap per landmark on a size x size grid.

    Each map is exp(-((i - cy)^2 + (j - cx)^2) / (2 sigma^2)) centered at the
    landmark rounded to the nearest pixel, so the peak value is exactly 1 and
    a pixel at distance 2*sigma reads exactly exp(-2). Landmarks are given in
    (x, y) order; out-of-range centers clip to the grid border.
    """
    lms = np.asarray(landmarks, dtype=np.float64)
    if lms.ndim != 2 or lms.shape[1] != 2:
        raise ValueError(f"expected [N, 2] landmarks, got shape {lms.shape}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    centers = np.clip(np.floor(lms + 0.5), 0, size - 1)
    ii = np.arange(size, dtype=np.float64)
    rows = (ii[None, :] - centers[:, 1][:, None]) ** 2  # [N, size]
    cols = (ii[None, :] - centers[:, 0][:, None]) ** 2
    d2 = rows[:, :, None] + cols[:, None, :]
    return np.exp(-d2 / (2.0 * sigma * sigma))


def one_hot_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Expand an int [H, W] label map into a float [C, H, W] one-hot stack."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels out of range [0, {num_classes}): min {labels.min()}, max {labels.max()}"
        )
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float64)
    np.put_along_axis(out, labels[None], 1.0, axis=0)
    return out


def nearest_resize_labels(labels: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor downsample of an int label map (no class mixing)."""
    labels = np.asarray(labels)
    h, w = labels.shape
    ri = np.minimum(((np.arange(size) + 0.5) * (h / size)).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(size) + 0.5) * (w / size)).astype(np.int64), w - 1)
    return labels[np.ix_(ri, ci)]


# ---------------------------------------------------------------------------
# training samples

@dataclasses.dataclass
class PairSample:
    """One training example: high-res target, low-res input, priors.

    ``lr`` is always the bicubic downsample of ``hr`` and ``coarse_input``
    the bicubic re-upsample of ``lr``; both are derived, never stored.
    """

    hr: np.ndarray  # [3, S, S]
    lr: np.ndarray  # [3, S/scale, S/scale]
    coarse_input: np.ndarray  # [3, S, S]
    landmarks: np.ndarray  # [N, 2] in hr pixel units
    parsing: np.ndarray  # [S, S] int labels
    identity: int


def make_pair_sample(
    hr: np.ndarray,
    landmarks: np.ndarray,
    parsing: np.ndarray,
    identity: int,
    scale: int,
) -> PairSample:
    hr = np.asarray(hr, dtype=np.float64)
    size = hr.shape[1]
    if size % scale != 0:
        raise ValueError(f"image size {size} not divisible by scale {scale}")
    lr = bicubic_resize(hr, (size // scale, size // scale))
    coarse = bicubic_resize(lr, (size, size))
    return PairSample(
        hr=hr,
        lr=lr,
        coarse_input=coarse,
        landmarks=np.asarray(landmarks, dtype=np.float64),
        parsing=np.asarray(parsing, dtype=np.int64),
        identity=int(identity),
    )


def load_pair_sample(manifest: DatasetManifest, index: int, scale: int) -> PairSample:
    rec = manifest.records[index]
    hr = load_image(manifest.root / rec.image_path)
    parsing = load_labels(manifest.root / rec.parsing_path)
    return make_pair_sample(hr, rec.landmarks, parsing, rec.identity, scale)


def default_flip_swap(n_landmarks: int) -> np.ndarray:
    """Index permutation pairing left/right landmarks under a mirror.

    The synthetic layout is [left eye, right eye, mouth left, mouth center,
    mouth right]; extra landmarks (head boundary points) map to themselves.
    """
    perm = np.arange(n_landmarks)
    if n_landmarks >= 2:
        perm[[0, 1]] = [1, 0]
    if n_landmarks >= 5:
        perm[[2, 4]] = [4, 2]
    return perm


def flip_horizontal(sample: PairSample, swap: np.ndarray | None = None) -> PairSample:
    """Mirror a sample left-right, consistently across all its fields.

    Stored arrays are mirrored directly (hr, lr, coarse, parsing), landmark x
    becomes (S - 1) - x, and the swap permutation exchanges left/right
    landmark roles. Applying the flip twice returns the original sample
    bit for bit.
    """
    size = sample.hr.shape[1]
    if swap is None:
        swap = default_flip_swap(len(sample.landmarks))
    lms = sample.landmarks[np.asarray(swap)].copy()
    lms[:, 0] = (size - 1) - lms[:, 0]
    return PairSample(
        hr=sample.hr[:, :, ::-1].copy(),
        lr=sample.lr[:, :, ::-1].copy(),
        coarse_input=sample.coarse_input[:, :, ::-1].copy(),
        landmarks=lms,
        parsing=sample.parsing[:, ::-1].copy(),
        identity=sample.identity,
    )


# ---------------------------------------------------------------------------
# synthetic faces

def _snap(v: float) -> float:
    return float(np.floor(v * COORD_GRID + 0.5) / COORD_GRID)


@dataclasses.dataclass
class _FaceParams:
    cx: float
    cy: float
    head_a: float  # semi-axis along x
    head_b: float
    eye_dx: float
    eye_dy: float
    eye_r: float
    mouth_dy: float
    mouth_hw: float
    mouth_hh: float
    tone_bg: float
    tone_skin: float
    tone_eye: float
    tone_mouth: float
    shade_v: float
    shade_fx: float


def _sample_identity(rng: np.random.Generator, size: int) -> _FaceParams:
    s = float(size)
    return _FaceParams(
        cx=s / 2 + rng.uniform(-0.03, 0.03) * s,
        cy=s / 2 + rng.uniform(-0.02, 0.04) * s,
        head_a=rng.uniform(0.30, 0.40) * s,
        head_b=rng.uniform(0.36, 0.46) * s,
        eye_dx=rng.uniform(0.13, 0.19) * s,
        eye_dy=rng.uniform(-0.17, -0.09) * s,
        eye_r=max(rng.uniform(0.035, 0.06) * s, 2.0),
        mouth_dy=rng.uniform(0.18, 0.27) * s,
        mouth_hw=rng.uniform(0.10, 0.17) * s,
        mouth_hh=max(rng.uniform(0.022, 0.045) * s, 1.5),
        tone_bg=rng.uniform(0.10, 0.28),
        tone_skin=rng.uniform(0.55, 0.80),
        tone_eye=rng.uniform(0.09, 0.25),
        tone_mouth=rng.uniform(0.16, 0.38),
        shade_v=rng.uniform(-0.08, 0.08),
        shade_fx=rng.uniform(0.5, 2.0),
    )


def _jitter(p: _FaceParams, rng: np.random.Generator, size: int) -> _FaceParams:
    s = float(size)
    q = dataclasses.replace(p)
    q.cx += rng.uniform(-0.012, 0.012) * s
    q.cy += rng.uniform(-0.012, 0.012) * s
    q.head_a *= rng.uniform(0.97, 1.03)
    q.head_b *= rng.uniform(0.97, 1.03)
    q.eye_dx *= rng.uniform(0.96, 1.04)
    q.eye_dy *= rng.uniform(0.96, 1.04)
    q.mouth_dy *= rng.uniform(0.96, 1.04)
    q.mouth_hw *= rng.uniform(0.95, 1.05)
    q.tone_skin = float(np.clip(q.tone_skin + rng.uniform(-0.03, 0.03), 0.40, 0.90))
    q.tone_bg = float(np.clip(q.tone_bg + rng.uniform(-0.02, 0.02), 0.08, 0.32))
    q.shade_v += rng.uniform(-0.02, 0.02)
    return q


def render_face(
    p: _FaceParams, size: int, n_landmarks: int = 5, n_classes: int = 4
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize one face from its geometry.

    Returns (image [3, S, S] in [0.05, 0.95], labels [S, S] int,
    landmarks [N, 2]). Rendering is pure masking on the pixel grid: no
    antialiasing, so a parameter set symmetric about the pixel grid center
    yields a bit-symmetric image. Classes beyond the base four become
    concentric bands inside the head; landmarks beyond the base five sit on
    the head ellipse.
    """
    if n_landmarks < 5:
        raise ValueError(f"need at least 5 landmarks, got {n_landmarks}")
    if n_classes < 4:
        raise ValueError(f"need at least 4 parsing classes, got {n_classes}")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    nx = (xx - p.cx) / p.head_a
    ny = (yy - p.cy) / p.head_b
    rho2 = nx * nx + ny * ny
    head = rho2 <= 1.0

    labels = np.zeros((size, size), dtype=np.int64)
    labels[head] = 1
    if n_classes > 4:
        # concentric rings between rho = 0.55 and the head boundary
        n_rings = n_classes - 4
        edges = np.linspace(0.55, 1.0, n_rings + 1) ** 2
        for k in range(n_rings):
            ring = head & (rho2 > edges[k]) & (rho2 <= edges[k + 1])
            labels[ring] = 4 + k

    eye_y = p.cy + p.eye_dy
    eye_lx = p.cx - p.eye_dx
    eye_rx = p.cx + p.eye_dx
    for ex in (eye_lx, eye_rx):
        eye = (xx - ex) ** 2 + (yy - eye_y) ** 2 <= p.eye_r**2
        labels[eye & head] = 2
    mouth_y = p.cy + p.mouth_dy
    mouth = (np.abs(xx - p.cx) <= p.mouth_hw) & (np.abs(yy - mouth_y) <= p.mouth_hh)
    labels[mouth & head] = 3

    shade = p.shade_v * (yy - p.cy) / size + 0.03 * np.cos(
        2.0 * np.pi * p.shade_fx * (xx - p.cx) / size
    )
    tones = [p.tone_bg, p.tone_skin, p.tone_eye, p.tone_mouth]
    for k in range(n_classes - 4):
        tones.append(p.tone_skin + (0.06 if k % 2 == 0 else -0.06) * (1 + k // 2))
    img = np.choose(labels, [np.full((size, size), t) for t in tones])
    img = img + np.where(labels >= 1, shade, 0.0)
    img = np.clip(img, 0.05, 0.95)
    image = np.stack([img, img * 0.97 + 0.01, img * 0.94 + 0.02])

    lms = [
        (eye_lx, eye_y),
        (eye_rx, eye_y),
        (p.cx - p.mouth_hw, mouth_y),
        (p.cx, mouth_y),
        (p.cx + p.mouth_hw, mouth_y),
    ]
    for k in range(n_landmarks - 5):
        theta = 2.0 * np.pi * (k + 0.5) / max(n_landmarks - 5, 1)
        lms.append((p.cx + 0.92 * p.head_a * np.cos(theta), p.cy + 0.92 * p.head_b * np.sin(theta)))
    coords = np.array(
        [
            (
                _snap(min(max(x, 0.0), size - 1.0)),
                _snap(min(max(y, 0.0), size - 1.0)),
            )
            for x, y in lms
        ],
        dtype=np.float64,
    )
    return image, labels, coords


def synth_dataset(
    out_dir: str | Path,
    n_identities: int,
    per_identity: int,
    size: int,
    seed: int,
    n_landmarks: int = 5,
    n_classes: int = 4,
) -> DatasetManifest:
    """Generate a synthetic face dataset under ``out_dir``.

    Writes images/ and parsing/ PNGs plus manifest.jsonl, then reloads the
    manifest through the normal validation path. Same arguments produce
    byte-identical files.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "parsing").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for ident in range(n_identities):
        base = _sample_identity(rng, size)
        for j in range(per_identity):
            face = _jitter(base, rng, size)
            image, labels, lms = render_face(face, size, n_landmarks, n_classes)
            img_rel = f"images/id{ident:03d}_{j:02d}.png"
            lab_rel = f"parsing/id{ident:03d}_{j:02d}.png"
            save_image(image, out / img_rel)
            save_labels(labels, out / lab_rel)
            records.append(
                ManifestRecord(
                    image_path=img_rel,
                    landmarks=np.round(lms * COORD_GRID) / COORD_GRID,
                    parsing_path=lab_rel,
                    identity=ident,
                )
            )
    save_manifest(records, out / "manifest.jsonl")
    return load_manifest(out / "manifest.jsonl")


def split_manifest(
    manifest: DatasetManifest, holdout_per_identity: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split into train/test, holding out the last k records per identity."""
    by_id: dict[int, list[ManifestRecord]] = {}
    for rec in manifest.records:
        by_id.setdefault(rec.identity, []).append(rec)
    ok = all(len(v) > holdout_per_identity for v in by_id.values())
    if holdout_per_identity < 0 or not ok:
        raise ManifestError(
            f"cannot hold out {holdout_per_identity} records from identities with "
            f"{min(len(v) for v in by_id.values())} records"
        )
    train, test = [], []
    for ident in sorted(by_id):
        recs = by_id[ident]
        train.extend(recs[: len(recs) - holdout_per_identity])
        test.extend(recs[len(recs) - holdout_per_identity :])
    mk = lambda recs: dataclasses.replace(manifest, records=recs)
    return mk(train), mk(test)
