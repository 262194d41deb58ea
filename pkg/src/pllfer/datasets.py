"""Synthetic sketch-face datasets, manifest I/O, and candidate-set construction.

Each class renders a parametric face (head outline, eyes, brows, mouth) whose
part geometry encodes the class, so local regions carry class evidence the
way action units do on real faces. Ground truth stays known, which the
disambiguation reports rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataLoadError, SchemaError, ValidationError


@dataclass
class Sample:
    """One grayscale image with an optional true label and a stable id."""

    image: np.ndarray
    true_label: int | None
    id: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 2:
            raise ValidationError(f"sample {self.id}: image must be 2-D, got {self.image.shape}")
        lo, hi = float(self.image.min()), float(self.image.max())
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo < -1e-9 or hi > 1 + 1e-9:
            raise ValidationError(f"sample {self.id}: intensities outside [0,1] ({lo}, {hi})")


@dataclass
class PartialSample:
    """A sample plus its binary candidate vector over K classes."""

    sample: Sample
    candidates: np.ndarray

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=np.int8)
        if self.candidates.ndim != 1:
            raise ValidationError("candidates must be a 1-D indicator vector")
        if not np.isin(self.candidates, (0, 1)).all():
            raise ValidationError("candidates must be binary")
        if self.candidates.sum() < 1:
            raise ValidationError(f"sample {self.sample.id}: empty candidate set")

    @property
    def candidate_count(self) -> int:
        return int(self.candidates.sum())

    @property
    def truth_in_candidates(self) -> bool:
        y = self.sample.true_label
        return y is not None and bool(self.candidates[y])


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 7
    train_count: int = 2000
    test_count: int = 500
    image_size: int = 64
    noise_sigma: float = 0.1
    seed: int = 0
    imbalance: float = 1.0  # most-frequent / least-frequent train class ratio

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigurationError("train_count and test_count must be >= 1")
        if self.image_size < 16:
            raise ConfigurationError(f"image_size must be >= 16, got {self.image_size}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.imbalance < 1:
            raise ConfigurationError(f"imbalance must be >= 1, got {self.imbalance}")


# Per-class face geometry: (brow_raise, brow_tilt, mouth_curve, mouth_open, eye_scale).
# Rows are mutually distinct in several parts at once, so classes stay separable
# in pixel space at zero noise.
_FACE_TABLE = np.array(
    [
        [0.00, 0.00, 0.00, 0.05, 1.00],
        [0.02, 0.15, 0.80, 0.15, 1.05],
        [0.06, -0.55, -0.70, 0.05, 0.85],
        [-0.10, 0.00, 0.10, 1.00, 1.45],
        [-0.03, 0.65, -0.40, 0.30, 0.75],
        [-0.08, -0.30, -0.15, 0.65, 1.25],
        [0.04, 0.35, -0.75, 0.40, 0.62],
    ]
)


def _class_params(label: int) -> np.ndarray:
    base = _FACE_TABLE[label % len(_FACE_TABLE)].copy()
    # past the canonical table, shift geometry deterministically per wrap count
    wrap = label // len(_FACE_TABLE)
    if wrap:
        base[0] += 0.05 * wrap
        base[4] *= 0.85**wrap
    return base


def _stroke(dist: np.ndarray, width: float, feather: float) -> np.ndarray:
    return np.clip((width + feather - dist) / feather, 0.0, 1.0)


def _segment_dist(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    if denom < 1e-12:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def _polyline_dist(px, py, xs, ys):
    d = np.full(px.shape, np.inf)
    for i in range(len(xs) - 1):
        d = np.minimum(d, _segment_dist(px, py, xs[i], ys[i], xs[i + 1], ys[i + 1]))
    return d


def render_face(
    size: int, label: int, shift: tuple[float, float] = (0.0, 0.0), scale: float = 1.0
) -> np.ndarray:
    """Render one face sketch (white strokes on black) for a class label."""
    brow_raise, brow_tilt, mouth_curve, mouth_open, eye_scale = _class_params(label)
    coords = np.linspace(-1.0, 1.0, size)
    x, y = np.meshgrid(coords, coords)  # y grows downward
    u = (x - shift[0]) / scale
    v = (y - shift[1]) / scale
    feather = 2.0 / size
    img = np.zeros((size, size))

    # head outline
    a, b = 0.60, 0.78
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    img = np.maximum(img, _stroke(np.abs(r - 1.0) * min(a, b), 0.030, feather))

    eye_y, eye_dx = -0.22, 0.27
    for sx in (-1.0, 1.0):
        # eye: filled ellipse
        er = np.sqrt(
            ((u - sx * eye_dx) / (0.085 * eye_scale)) ** 2 + ((v - eye_y) / (0.055 * eye_scale)) ** 2
        )
        img = np.maximum(img, np.clip((1.0 - er) / (feather / (0.055 * eye_scale)) + 1.0, 0.0, 1.0))
        # brow: tilted segment; positive tilt lowers the inner end
        by = eye_y - 0.14 + brow_raise
        inner = (sx * (eye_dx - 0.11), by + brow_tilt * 0.09)
        outer = (sx * (eye_dx + 0.11), by - brow_tilt * 0.09)
        d = _segment_dist(u, v, inner[0], inner[1], outer[0], outer[1])
        img = np.maximum(img, _stroke(d, 0.022, feather))

    # mouth: upper/lower lip polylines around a curved midline
    t = np.linspace(-1.0, 1.0, 13)
    mid_y = 0.38 + 0.20 * mouth_curve * (t**2 - 0.5)
    gap = 0.5 * (0.28 * mouth_open)
    mx = 0.30 * t
    for lip_y in (mid_y - gap, mid_y + gap):
        d = _polyline_dist(u, v, mx, lip_y)
        img = np.maximum(img, _stroke(d, 0.020, feather))
        if gap < feather:  # closed mouth: one stroke is enough
            break

    return img


def _class_counts(n: int, num_classes: int, imbalance: float) -> np.ndarray:
    if imbalance == 1.0:
        counts = np.full(num_classes, n // num_classes, dtype=np.int64)
        counts[: n % num_classes] += 1
        return counts
    weights = imbalance ** (-np.arange(num_classes) / (num_classes - 1))
    counts = np.maximum(1, np.floor(n * weights / weights.sum()).astype(np.int64))
    # distribute the rounding remainder over the head classes
    i = 0
    while counts.sum() < n:
        counts[i % num_classes] += 1
        i += 1
    while counts.sum() > n:
        j = int(np.argmax(counts))
        counts[j] -= 1
    return counts


def _render_split(
    spec: SynthSpec, count: int, rng: np.random.Generator, start_id: int, imbalance: float
) -> list[Sample]:
    counts = _class_counts(count, spec.num_classes, imbalance)
    labels = rng.permutation(np.repeat(np.arange(spec.num_classes), counts))
    samples = []
    for i, label in enumerate(labels):
        shift = tuple(rng.uniform(-0.015, 0.015, size=2))
        scale = float(rng.uniform(0.97, 1.03))
        img = render_face(spec.image_size, int(label), shift, scale)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
        img = np.clip(img, 0.0, 1.0)
        samples.append(Sample(image=img, true_label=int(label), id=start_id + i))
    return samples


def generate_synthetic_dataset(spec: SynthSpec) -> tuple[list[Sample], list[Sample]]:
    """Deterministic (train, test) split of rendered sketch faces."""
    rng = np.random.default_rng(spec.seed)
    train = _render_split(spec, spec.train_count, rng, 0, spec.imbalance)
    test = _render_split(spec, spec.test_count, rng, spec.train_count, 1.0)
    return train, test


# ---------------------------------------------------------------------------
# manifest + image-folder I/O
# ---------------------------------------------------------------------------


def _write_pgm(path: Path, image: np.ndarray) -> None:
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def save_dataset(
    samples: list[Sample],
    out_dir: str | Path,
    candidates: list[np.ndarray] | None = None,
) -> Path:
    """Write one PGM per sample plus a JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="ascii") as f:
        for i, s in enumerate(samples):
            rel = f"images/{i:06d}.pgm"
            _write_pgm(out_dir / rel, s.image)
            row: dict = {"path": rel}
            if s.true_label is not None:
                row["label"] = int(s.true_label)
            if candidates is not None:
                row["candidates"] = [int(j) for j in np.flatnonzero(candidates[i])]
            f.write(json.dumps(row) + "\n")
    return manifest


def _read_manifest(manifest_path: Path) -> list[dict]:
    if not manifest_path.is_file():
        raise DataLoadError(f"manifest not found: {manifest_path}")
    rows = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{manifest_path}:{lineno}: invalid JSON ({e})") from e
            if not isinstance(row, dict) or "path" not in row:
                raise SchemaError(f"{manifest_path}:{lineno}: row must be an object with 'path'")
            rows.append(row)
    return rows


def load_image_folder(
    root_path: str | Path,
    manifest_path: str | Path | None = None,
    *,
    image_size: int | None = None,
    num_classes: int | None = None,
) -> list[Sample]:
    """Load samples listed in a JSON-lines manifest, in manifest order.

    Images are decoded to grayscale, optionally resized to ``image_size``, and
    scaled to [0,1]. Labels are bounds-checked against ``num_classes`` when given.
    """
    root = Path(root_path)
    manifest = Path(manifest_path) if manifest_path is not None else root / "manifest.jsonl"
    samples = []
    for i, row in enumerate(_read_manifest(manifest)):
        path = root / row["path"]
        if not path.is_file():
            raise DataLoadError(f"image file not found: {path}")
        img = Image.open(path).convert("L")
        if image_size is not None and img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float64) / 255.0
        label = row.get("label")
        if label is not None:
            label = int(label)
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise SchemaError(
                    f"{manifest}: row {i}: label {label} out of range for K={num_classes}"
                )
        samples.append(Sample(image=arr, true_label=label, id=i))
    return samples


def load_candidate_sets(
    manifest_path: str | Path, num_classes: int
) -> list[np.ndarray | None]:
    """Candidate indicator vectors per manifest row (None where the column is absent)."""
    out: list[np.ndarray | None] = []
    for i, row in enumerate(_read_manifest(Path(manifest_path))):
        cands = row.get("candidates")
        if cands is None:
            out.append(None)
            continue
        y = np.zeros(num_classes, dtype=np.int8)
        for j in cands:
            j = int(j)
            if j < 0 or j >= num_classes:
                raise SchemaError(
                    f"{manifest_path}: row {i}: candidate {j} out of range for K={num_classes}"
                )
            y[j] = 1
        out.append(y)
    return out


# ---------------------------------------------------------------------------
# candidate-set construction
# ---------------------------------------------------------------------------


def corrupt_to_partial_labels(
    samples: list[Sample], q: float, seed: int, num_classes: int | None = None
) -> list[PartialSample]:
    """Candidate sets containing the true label plus each wrong label w.p. ``q``."""
    if not 0.0 <= q < 1.0:
        raise ConfigurationError(f"flip-in probability q must be in [0,1), got {q}")
    labels = [s.true_label for s in samples]
    if any(y is None for y in labels):
        raise ValidationError("corrupt_to_partial_labels requires every sample to carry a label")
    k = num_classes if num_classes is not None else max(labels) + 1
    rng = np.random.default_rng(seed)
    flips = rng.random((len(samples), k)) < q
    out = []
    for s, row in zip(samples, flips):
        y = row.astype(np.int8)
        y[s.true_label] = 1
        out.append(PartialSample(sample=s, candidates=y))
    return out


def build_candidate_sets_from_reference(
    samples: list[Sample],
    ref_probs: np.ndarray,
    k: int,
    ambiguity_margin: float,
) -> list[PartialSample]:
    """Candidate sets from a reference classifier's probabilities.

    A sample counts as ambiguous when its top-1/top-2 probability margin is
    below ``ambiguity_margin``; ambiguous samples get the top-k indicator set,
    confident ones the top-1 singleton.
    """
    ref_probs = np.asarray(ref_probs, dtype=np.float64)
    if ref_probs.ndim != 2 or ref_probs.shape[0] != len(samples):
        raise ValidationError(f"ref_probs must be (n_samples, K), got {ref_probs.shape}")
    num_classes = ref_probs.shape[1]
    if not 1 <= k <= num_classes:
        raise ConfigurationError(f"k must be in [1, {num_classes}], got {k}")
    sums = ref_probs.sum(axis=1)
    bad = np.where(np.abs(sums - 1.0) > 1e-6)[0]
    if bad.size:
        raise ValidationError(f"ref_probs row {bad[0]} sums to {sums[bad[0]]:.8f}, expected 1")
    if (ref_probs < -1e-12).any():
        raise ValidationError("ref_probs must be non-negative")

    order = np.argsort(-ref_probs, axis=1, kind="stable")
    out = []
    for s, probs, idx in zip(samples, ref_probs, order):
        margin = probs[idx[0]] - probs[idx[1]]
        y = np.zeros(num_classes, dtype=np.int8)
        if margin < ambiguity_margin:
            y[idx[:k]] = 1
        else:
            y[idx[0]] = 1
        out.append(PartialSample(sample=s, candidates=y))
    return out
