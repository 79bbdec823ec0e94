"""Deterministic synthetic paired data at desk scale, plus mask construction
and ingestion of pre-aligned external pairs.

Each identity is a parametric face (ellipse head, hair, two eyes, nose
polyline, mouth arc) rendered twice: a colored photo-like image and an
outline-only sketch on a white background. The two renderings share the
exact same geometry, so every pair is pixel-aligned by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .images import Domain, DomainImage, load_image, save_image
from .generation import Mask

SUPERSAMPLE = 2
STROKE_VALUE = 0.08          # near-black sketch strokes, in [0, 1]
EYE_ASYMMETRY_MAX = 0.012    # allowed |left - right| eye offset difference

FEATURE_KINDS = ("eye_left", "eye_right", "nose", "mouth")


class FaceSpecError(ValueError):
    """Raised when procedural face parameters leave the drawable region."""


class MaskSpecError(ValueError):
    """Raised when a requested mask cannot be realized."""


@dataclass(frozen=True)
class FaceSpec:
    """Normalized-coordinate description of one synthetic identity.

    All positions and lengths are fractions of the image side; colors are
    RGB in [0, 1].
    """

    seed: int
    face_center: tuple[float, float]
    face_axes: tuple[float, float]
    skin_color: tuple[float, float, float]
    hair_color: tuple[float, float, float]
    iris_color: tuple[float, float, float]
    mouth_color: tuple[float, float, float]
    hairline_y: float
    eye_y: float
    eye_dx_left: float
    eye_dx_right: float
    eye_radius: float
    nose_points: tuple[tuple[float, float], ...]
    mouth_center: tuple[float, float]
    mouth_half_width: float
    mouth_curve: float

    def __post_init__(self):
        cx, cy = self.face_center
        ax, ay = self.face_axes
        if not (cx - ax > 0.01 and cx + ax < 0.99):
            raise FaceSpecError("face ellipse leaves horizontal bounds")
        if not (cy - ay * 1.18 > 0.0 and cy + ay < 0.98):
            raise FaceSpecError("face/hair ellipse leaves vertical bounds")
        if abs(self.eye_dx_left - self.eye_dx_right) > EYE_ASYMMETRY_MAX:
            raise FaceSpecError("eyes exceed the symmetry jitter bound")
        if not (self.hairline_y < self.eye_y - 0.06):
            raise FaceSpecError("hairline must sit clearly above the eyes")
        if not (self.eye_y < self.nose_points[-1][1] < self.mouth_center[1]):
            raise FaceSpecError("expected eye/nose/mouth vertical ordering")
        if self.mouth_center[1] + self.mouth_curve > cy + ay * 0.95:
            raise FaceSpecError("mouth leaves the face ellipse")
        for x, y in self.landmarks(1.0).values():
            if not (0.0 < x < 1.0 and 0.0 < y < 1.0):
                raise FaceSpecError("landmark outside image bounds")

    def landmarks(self, size: float) -> dict[str, tuple[float, float]]:
        """Landmark positions; pass the image side to get pixel coordinates."""
        cx, cy = self.face_center
        nose = np.mean(self.nose_points, axis=0)
        mx, my = self.mouth_center
        pts = {
            "eye_left": (cx - self.eye_dx_left, self.eye_y),
            "eye_right": (cx + self.eye_dx_right, self.eye_y),
            "nose": (float(nose[0]), float(nose[1])),
            "mouth": (mx, my + 2.0 * self.mouth_curve / 3.0),
            "chin": (cx, cy + self.face_axes[1]),
        }
        if size == 1.0:
            return pts
        return {k: (x * size - 0.5, y * size - 0.5) for k, (x, y) in pts.items()}


def random_face_spec(seed: int) -> FaceSpec:
    rng = np.random.default_rng(seed)
    u = rng.uniform
    cx, cy = 0.5 + u(-0.015, 0.015), 0.50 + u(-0.02, 0.02)
    ax, ay = u(0.26, 0.33), u(0.33, 0.40)
    eye_y = cy - u(0.10, 0.14)
    dx = u(0.11, 0.15)
    asym = u(-0.004, 0.004)
    skin_r = u(0.72, 0.92)
    skin = (skin_r, skin_r * u(0.78, 0.88), skin_r * u(0.60, 0.75))
    hair_base = u(0.08, 0.35)
    hair = tuple(float(np.clip(hair_base * u(0.7, 1.3), 0.02, 0.5)) for _ in range(3))
    iris = tuple(float(u(0.05, 0.30)) for _ in range(3))
    mouth = (u(0.55, 0.80), u(0.15, 0.35), u(0.20, 0.40))
    nose_top = (cx + u(-0.005, 0.005), eye_y + 0.045)
    nose_mid = (cx - u(0.010, 0.025), cy + u(0.05, 0.08))
    nose_end = (nose_mid[0] + u(0.020, 0.035), nose_mid[1] + u(0.0, 0.012))
    return FaceSpec(
        seed=seed,
        face_center=(cx, cy),
        face_axes=(ax, ay),
        skin_color=tuple(float(c) for c in skin),
        hair_color=hair,
        iris_color=iris,
        mouth_color=tuple(float(c) for c in mouth),
        hairline_y=eye_y - u(0.10, 0.15),
        eye_y=eye_y,
        eye_dx_left=dx + asym,
        eye_dx_right=dx - asym,
        eye_radius=u(0.030, 0.042),
        nose_points=(nose_top, nose_mid, nose_end),
        mouth_center=(cx + u(-0.01, 0.01), cy + u(0.16, 0.20)),
        mouth_half_width=u(0.10, 0.15),
        mouth_curve=u(0.005, 0.020),
    )


def jitter_spec(spec: FaceSpec, seed: int, scale: float = 1.0) -> FaceSpec:
    """A same-identity variant with slightly perturbed geometry and colors."""
    rng = np.random.default_rng(seed)

    def wiggle(v, amount):
        return v + float(rng.uniform(-amount, amount)) * scale

    def wiggle_color(c, amount=0.02):
        return tuple(float(np.clip(wiggle(v, amount), 0.02, 0.98)) for v in c)

    pos = 0.006
    return replace(
        spec,
        face_center=(wiggle(spec.face_center[0], pos), wiggle(spec.face_center[1], pos)),
        skin_color=wiggle_color(spec.skin_color),
        hair_color=wiggle_color(spec.hair_color),
        mouth_color=wiggle_color(spec.mouth_color),
        eye_y=wiggle(spec.eye_y, pos),
        mouth_center=(wiggle(spec.mouth_center[0], pos), wiggle(spec.mouth_center[1], pos)),
        eye_radius=float(np.clip(wiggle(spec.eye_radius, 0.002), 0.028, 0.044)),
    )


# ---------------------------------------------------------------------------
# rendering

def _grids(size: int):
    s = size * SUPERSAMPLE
    ys, xs = np.mgrid[0:s, 0:s]
    return (xs + 0.5) / s, (ys + 0.5) / s


def _ellipse(xs, ys, cx, cy, ax, ay):
    return ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0


def _ellipse_ring(xs, ys, cx, cy, ax, ay, width):
    e = np.sqrt(((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2)
    return np.abs((e - 1.0) * min(ax, ay)) <= width / 2


def _segment_stroke(xs, ys, p0, p1, width):
    px, py = p1[0] - p0[0], p1[1] - p0[1]
    norm = px * px + py * py
    if norm == 0:
        return (xs - p0[0]) ** 2 + (ys - p0[1]) ** 2 <= (width / 2) ** 2
    t = np.clip(((xs - p0[0]) * px + (ys - p0[1]) * py) / norm, 0.0, 1.0)
    dx = xs - (p0[0] + t * px)
    dy = ys - (p0[1] + t * py)
    return dx * dx + dy * dy <= (width / 2) ** 2


def _polyline_stroke(xs, ys, points, width):
    mask = np.zeros(xs.shape, dtype=bool)
    for p0, p1 in zip(points[:-1], points[1:]):
        mask |= _segment_stroke(xs, ys, p0, p1, width)
    return mask


def _mouth_points(spec: FaceSpec, n: int = 24):
    mx, my = spec.mouth_center
    hw, c = spec.mouth_half_width, spec.mouth_curve
    ts = np.linspace(0.0, 1.0, n)
    return [(mx + (2 * t - 1) * hw, my + c * (1 - (2 * t - 1) ** 2)) for t in ts]


def _paint(canvas, region, color):
    canvas[region] = color


def _downsample(canvas: np.ndarray, size: int) -> np.ndarray:
    s = SUPERSAMPLE
    return canvas.reshape(size, s, size, s, 3).mean(axis=(1, 3))


def render_face(spec: FaceSpec, size: int) -> DomainImage:
    xs, ys = _grids(size)
    canvas = np.ones((*xs.shape, 3), dtype=np.float32)
    cx, cy = spec.face_center
    ax, ay = spec.face_axes
    stroke = 1.5 / size

    _paint(canvas, _ellipse(xs, ys, cx, cy - 0.03, ax * 1.15, ay * 1.12), spec.hair_color)
    face = _ellipse(xs, ys, cx, cy, ax, ay)
    _paint(canvas, face, spec.skin_color)
    _paint(canvas, face & (ys < spec.hairline_y), spec.hair_color)

    r = spec.eye_radius
    for ex in (cx - spec.eye_dx_left, cx + spec.eye_dx_right):
        _paint(canvas, _ellipse(xs, ys, ex, spec.eye_y, r * 1.5, r * 1.5), (0.95, 0.95, 0.95))
        _paint(canvas, _ellipse(xs, ys, ex, spec.eye_y, r, r), spec.iris_color)

    nose_color = tuple(c * 0.55 for c in spec.skin_color)
    _paint(canvas, _polyline_stroke(xs, ys, spec.nose_points, stroke), nose_color)
    _paint(canvas, _polyline_stroke(xs, ys, _mouth_points(spec), stroke * 1.6), spec.mouth_color)

    pixels = _downsample(canvas, size) * 2.0 - 1.0
    return DomainImage(np.clip(pixels, -1.0, 1.0).astype(np.float32), Domain.FACE)


def render_sketch(spec: FaceSpec, size: int) -> DomainImage:
    xs, ys = _grids(size)
    canvas = np.ones((*xs.shape, 3), dtype=np.float32)
    cx, cy = spec.face_center
    ax, ay = spec.face_axes
    stroke = 1.5 / size
    ink = (STROKE_VALUE,) * 3

    lines = _ellipse_ring(xs, ys, cx, cy - 0.03, ax * 1.15, ay * 1.12, stroke)
    lines &= ys < cy  # only the upper hair contour reads as hair
    lines |= _ellipse_ring(xs, ys, cx, cy, ax, ay, stroke)

    # hairline chord across the face
    half = ax * np.sqrt(max(0.0, 1.0 - ((spec.hairline_y - cy) / ay) ** 2))
    lines |= _segment_stroke(
        xs, ys, (cx - half, spec.hairline_y), (cx + half, spec.hairline_y), stroke
    )

    r = spec.eye_radius
    for ex in (cx - spec.eye_dx_left, cx + spec.eye_dx_right):
        lines |= _ellipse_ring(xs, ys, ex, spec.eye_y, r * 1.4, r * 1.4, stroke)
        lines |= _ellipse(xs, ys, ex, spec.eye_y, r * 0.55, r * 0.55)

    lines |= _polyline_stroke(xs, ys, spec.nose_points, stroke)
    lines |= _polyline_stroke(xs, ys, _mouth_points(spec), stroke)

    _paint(canvas, lines, ink)
    pixels = _downsample(canvas, size) * 2.0 - 1.0
    return DomainImage(np.clip(pixels, -1.0, 1.0).astype(np.float32), Domain.SKETCH)


@dataclass(frozen=True)
class ImagePair:
    face: DomainImage
    sketch: DomainImage


def synth_pair(spec: FaceSpec, size: int) -> ImagePair:
    """Render the aligned (face, sketch) pair for one identity."""
    return ImagePair(face=render_face(spec, size), sketch=render_sketch(spec, size))


# ---------------------------------------------------------------------------
# masks

@dataclass(frozen=True)
class MaskSpec:
    """Either a centered rectangle or a feature-anchored box, sized so that
    the missing (zeroed) fraction hits ``target_missing``."""

    kind: str  # "rect" or one of FEATURE_KINDS
    target_missing: float

    def __post_init__(self):
        if self.kind != "rect" and self.kind not in FEATURE_KINDS:
            raise MaskSpecError(f"unknown mask kind {self.kind!r}")
        if not (0.0 <= self.target_missing < 1.0):
            raise MaskSpecError("target_missing must lie in [0, 1)")


def _best_box(keep_area: float, min_w: int, min_h: int, size: int) -> tuple[int, int]:
    best = None
    for w in range(max(1, min_w), size + 1):
        h = int(np.clip(round(keep_area / w), max(1, min_h), size))
        err = abs(w * h - keep_area)
        aspect = abs(np.log(w / h))
        if best is None or (err, aspect) < (best[0], best[1]):
            best = (err, aspect, w, h)
    return best[2], best[3]


def _feature_extent(spec: FaceSpec, kind: str, size: int) -> tuple[int, int]:
    if kind in ("eye_left", "eye_right"):
        half = spec.eye_radius * 2.2
        return int(np.ceil(2 * half * size)), int(np.ceil(2 * half * size))
    if kind == "mouth":
        w = 2 * (spec.mouth_half_width + 0.02)
        h = 2 * (abs(spec.mouth_curve) + 0.035)
        return int(np.ceil(w * size)), int(np.ceil(h * size))
    pts = np.asarray(spec.nose_points)
    w = pts[:, 0].max() - pts[:, 0].min() + 0.04
    h = pts[:, 1].max() - pts[:, 1].min() + 0.04
    return int(np.ceil(w * size)), int(np.ceil(h * size))


def make_mask(spec: MaskSpec, face_spec: FaceSpec | None, size: int) -> Mask:
    """Binary keep-mask realizing the requested missing fraction (within
    ±2 percentage points)."""
    keep_area = (1.0 - spec.target_missing) * size * size
    if spec.kind == "rect":
        w, h = _best_box(keep_area, 1, 1, size)
        x0 = (size - w) // 2
        y0 = (size - h) // 2
    else:
        if face_spec is None:
            raise MaskSpecError("feature masks require a FaceSpec")
        min_w, min_h = _feature_extent(face_spec, spec.kind, size)
        if min_w * min_h > keep_area:
            raise MaskSpecError(
                f"{spec.kind} needs {min_w}×{min_h} px but the kept area budget is "
                f"{keep_area:.0f} px²; lower target_missing"
            )
        w, h = _best_box(keep_area, min_w, min_h, size)
        lx, ly = face_spec.landmarks(size)[spec.kind]
        x0 = int(np.clip(round(lx - w / 2 + 0.5), 0, size - w))
        y0 = int(np.clip(round(ly - h / 2 + 0.5), 0, size - h))

    mask = Mask.from_rect(size, x0, y0, x0 + w, y0 + h)
    realized = missing_percentage(mask)
    if abs(realized - spec.target_missing) > 0.02:
        raise MaskSpecError(
            f"cannot realize missing={spec.target_missing:.3f} at size {size}"
            f" (best achievable {realized:.3f})"
        )
    return mask


def missing_percentage(mask: Mask | np.ndarray) -> float:
    """Fraction of the image area the mask zeroes out."""
    m = mask.map if isinstance(mask, Mask) else np.asarray(mask)
    values = np.unique(m)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError("mask must be binary")
    return float((m == 0).sum() / m.size)


# ---------------------------------------------------------------------------
# datasets on disk

@dataclass(frozen=True)
class ManifestEntry:
    identity: str
    face_path: Path
    sketch_path: Path
    split: str
    seed: int | None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]
    seed: int | None = None

    def __post_init__(self):
        ids = [e.identity for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest identities must be unique")

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def make_dataset(
    n: int,
    size: int,
    seed: int,
    root: str | Path,
    test_fraction: float = 0.1,
) -> DatasetManifest:
    """Render ``n`` identities into ``root`` and write the manifest CSV.

    Layout: ``faces/<id>.png``, ``sketches/<id>.png``, ``manifest.csv``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(root)
    (root / "faces").mkdir(parents=True, exist_ok=True)
    (root / "sketches").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    item_seeds = rng.integers(0, 2**31 - 1, size=n)
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx = set(order[:n_test].tolist())

    entries = []
    for i in range(n):
        identity = f"{i:05d}"
        spec = random_face_spec(int(item_seeds[i]))
        pair = synth_pair(spec, size)
        face_path = root / "faces" / f"{identity}.png"
        sketch_path = root / "sketches" / f"{identity}.png"
        save_image(pair.face, face_path)
        save_image(pair.sketch, sketch_path)
        entries.append(
            ManifestEntry(
                identity=identity,
                face_path=face_path,
                sketch_path=sketch_path,
                split="test" if i in test_idx else "train",
                seed=int(item_seeds[i]),
            )
        )

    manifest = DatasetManifest(root=root, entries=tuple(entries), seed=seed)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> None:
    path = manifest.root / "manifest.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "seed"])
        for e in manifest.entries:
            writer.writerow([e.identity, e.split, "" if e.seed is None else e.seed])


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    entries = []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            entries.append(
                ManifestEntry(
                    identity=row["id"],
                    face_path=root / "faces" / f"{row['id']}.png",
                    sketch_path=root / "sketches" / f"{row['id']}.png",
                    split=row["split"],
                    seed=int(row["seed"]) if row["seed"] else None,
                )
            )
    return DatasetManifest(root=root, entries=tuple(entries))


def load_pair_arrays(manifest: DatasetManifest, split: str | None = None):
    """Load (faces, sketches) as stacked float32 arrays for training."""
    from .training import PairArrays

    entries = manifest.entries if split is None else manifest.split_entries(split)
    faces = np.stack([load_image(e.face_path, Domain.FACE).pixels for e in entries])
    sketches = np.stack([load_image(e.sketch_path, Domain.SKETCH).pixels for e in entries])
    return PairArrays(faces=faces, sketches=sketches)


# ---------------------------------------------------------------------------
# ingestion of external pre-aligned pairs

@dataclass(frozen=True)
class IngestFailure:
    identity: str
    reason: str


@dataclass(frozen=True)
class IngestResult:
    manifest: DatasetManifest
    failures: tuple[IngestFailure, ...]


def ingest_pairs(root: str | Path) -> IngestResult:
    """Match ``faces/*.png`` with ``sketches/*.png`` by basename.

    Entries that fail validation (unmatched basename, non-square image,
    mismatched face/sketch shapes, unsupported side length) are itemized in
    the result instead of aborting the ingest.
    """
    from PIL import Image as PILImage

    root = Path(root)
    faces = {p.stem: p for p in sorted((root / "faces").glob("*.png"))} if (root / "faces").is_dir() else {}
    sketches = {p.stem: p for p in sorted((root / "sketches").glob("*.png"))} if (root / "sketches").is_dir() else {}

    entries, failures = [], []
    for stem in sorted(set(faces) | set(sketches)):
        if stem not in faces:
            failures.append(IngestFailure(stem, "missing face image"))
            continue
        if stem not in sketches:
            failures.append(IngestFailure(stem, "missing sketch image"))
            continue
        with PILImage.open(faces[stem]) as im:
            fsize = im.size
        with PILImage.open(sketches[stem]) as im:
            ssize = im.size
        if fsize[0] != fsize[1] or ssize[0] != ssize[1]:
            failures.append(IngestFailure(stem, f"non-square image (face {fsize}, sketch {ssize})"))
            continue
        if fsize != ssize:
            failures.append(IngestFailure(stem, f"shape mismatch: face {fsize} vs sketch {ssize}"))
            continue
        side = fsize[0]
        if side < 8 or side & (side - 1):
            failures.append(IngestFailure(stem, f"side {side} is not a power of two >= 8"))
            continue
        entries.append(
            ManifestEntry(
                identity=stem,
                face_path=faces[stem],
                sketch_path=sketches[stem],
                split="train",
                seed=None,
            )
        )
    manifest = DatasetManifest(root=root, entries=tuple(entries))
    return IngestResult(manifest=manifest, failures=tuple(failures))
