"""Synthetic paired data: additive 2D specular highlights composited over clean text images.

Every sample draws from its own substream ``default_rng([seed, image_index,
sample_index])`` so output does not depend on generation order.
"""

import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, GeometryError
from .imaging import (
    DEFAULT_T_BRIGHT,
    DEFAULT_T_DIFF,
    MIN_COMPONENT_AREA,
    drop_small_components,
    TextAnnotation,
    save_image,
    load_image,
    load_mask,
    SampleTriplet,
)

log = logging.getLogger(__name__)

SHAPES = ("circle", "triangle", "ellipse", "ring")
ROUGHNESS_RANGE = (0.1, 0.3)
INTENSITY_RANGE = (40.0, 70.0)
# falloff width = FALLOFF_SCALE * roughness * outer radius
FALLOFF_SCALE = 0.5
# silhouette is exactly zero beyond this many falloff widths
FALLOFF_CUTOFF = 4.0
MANIFEST_VERSION = "1"


@dataclass
class HighlightSpec:
    shape: str
    center: tuple
    radius: float
    roughness: float
    intensity: float
    rotation: float = 0.0
    # ellipse minor/major ratio
    aspect: float = 1.0
    # ring thickness as a fraction of the outer radius
    thickness: float = 0.3
    # test hook: overrides intensity/100 as the peak added luminance
    amplitude: float = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise GeometryError(f"unknown shape {self.shape!r}")
        self.center = (float(self.center[0]), float(self.center[1]))

    @property
    def peak(self):
        return self.intensity / 100.0 if self.amplitude is None else self.amplitude

    @property
    def falloff(self):
        return FALLOFF_SCALE * self.roughness * self.radius

    def check_bounds(self, height, width):
        cx, cy = self.center
        r = self.radius
        if r <= 0 or cx - r < 0 or cy - r < 0 or cx + r > width or cy + r > height:
            raise GeometryError(
                f"{self.shape} at {self.center} radius {r:.2f} does not fit {width}x{height}"
            )


@dataclass
class GeneratorConfig:
    seed: int = 0
    samples_per_clean_image: int = 1
    size: int = 512
    t_diff: float = DEFAULT_T_DIFF
    t_bright: float = DEFAULT_T_BRIGHT
    min_radius_frac: float = 0.06
    max_radius_frac: float = 0.2
    uniform_fallback: bool = False

    def __post_init__(self):
        if self.size <= 0 or self.size % 8:
            raise ConfigError(f"size must be a positive multiple of 8, got {self.size}")
        if self.samples_per_clean_image < 0:
            raise ConfigError("samples_per_clean_image must be >= 0")
        if not 0 < self.min_radius_frac <= self.max_radius_frac < 0.5:
            raise ConfigError("need 0 < min_radius_frac <= max_radius_frac < 0.5")


@dataclass
class ManifestEntry:
    id: str
    highlight_path: str
    clean_path: str
    mask_path: str
    annotation: TextAnnotation = field(default_factory=TextAnnotation)


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    split: str = "train"
    version: str = MANIFEST_VERSION
    root: Path = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train or test, got {self.split!r}")
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise DataError("duplicate ids in manifest")

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel):
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_triplet(self, entry):
        return SampleTriplet(
            entry.id,
            load_image(self.resolve(entry.highlight_path)),
            load_image(self.resolve(entry.clean_path)),
            load_mask(self.resolve(entry.mask_path)),
            entry.annotation,
        )

    def to_dict(self):
        return {
            "version": self.version,
            "split": self.split,
            "entries": [
                {
                    "id": e.id,
                    "highlight_path": e.highlight_path,
                    "clean_path": e.clean_path,
                    "mask_path": e.mask_path,
                    "annotation": e.annotation.to_dict(),
                }
                for e in self.entries
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, check_files=True):
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read manifest {path}: {e}") from e
        if d.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {d.get('version')!r}")
        entries = [
            ManifestEntry(
                e["id"], e["highlight_path"], e["clean_path"], e["mask_path"],
                TextAnnotation.from_dict(e.get("annotation", {})),
            )
            for e in d["entries"]
        ]
        m = cls(entries, d.get("split", "train"), d["version"], root=path.parent)
        if check_files:
            for e in m.entries:
                for p in (e.highlight_path, e.clean_path, e.mask_path):
                    if not m.resolve(p).is_file():
                        raise DataError(f"manifest {path}: missing file {p}")
        return m


def sample_spec(rng, annotation, image_size, min_radius_frac=0.06, max_radius_frac=0.2,
                uniform_fallback=False):
    """Draw a random highlight centred inside one of the annotated text boxes.

    ``image_size`` is ``(height, width)`` or a single int for square images.
    With no boxes this raises unless ``uniform_fallback`` is set, in which
    case the centre is uniform over the image.
    """
    if isinstance(image_size, int):
        height = width = image_size
    else:
        height, width = image_size
    short = min(height, width)
    r_min = max(2.0, min_radius_frac * short)
    r_max = max(r_min, max_radius_frac * short)

    shape = SHAPES[rng.integers(len(SHAPES))]
    roughness = rng.uniform(*ROUGHNESS_RANGE)
    intensity = rng.uniform(*INTENSITY_RANGE)
    rotation = rng.uniform(0.0, 2 * math.pi)
    aspect = rng.uniform(0.4, 0.9)
    thickness = rng.uniform(0.2, 0.5)
    r = rng.uniform(r_min, r_max)

    if annotation is not None and annotation.boxes:
        x, y, w, h = annotation.boxes[rng.integers(len(annotation.boxes))]
    elif uniform_fallback:
        x, y, w, h = 0.0, 0.0, float(width), float(height)
    else:
        raise DataError("annotation has no text boxes (set uniform_fallback to place uniformly)")
    # keep the centre at least r_min from the border so the shape fits
    x0, x1 = max(x, r_min), min(x + w, width - r_min)
    y0, y1 = max(y, r_min), min(y + h, height - r_min)
    cx = rng.uniform(x0, x1) if x1 > x0 else min(max(x + w / 2, r_min), width - r_min)
    cy = rng.uniform(y0, y1) if y1 > y0 else min(max(y + h / 2, r_min), height - r_min)
    r = min(r, cx, cy, width - cx, height - cy)

    return HighlightSpec(shape, (cx, cy), r, roughness, intensity, rotation, aspect, thickness)


def _polygon_sdf(px, py, verts):
    """Signed distance to a convex polygon (negative inside)."""
    n = len(verts)
    dist = np.full(px.shape, np.inf)
    inside = np.ones(px.shape, dtype=bool)
    # orientation sign so "inside" is on the same side of every edge
    area = sum(verts[i][0] * verts[(i + 1) % n][1] - verts[(i + 1) % n][0] * verts[i][1]
               for i in range(n))
    sign = 1.0 if area > 0 else -1.0
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        wx, wy = px - ax, py - ay
        t = np.clip((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0)
        dx, dy = wx - t * ex, wy - t * ey
        dist = np.minimum(dist, np.hypot(dx, dy))
        inside &= sign * (ex * wy - ey * wx) >= 0
    return np.where(inside, -dist, dist)


def signed_distance(spec, height, width):
    """Pixel-centre signed distance to the highlight shape, negative inside."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    px = xs + 0.5 - spec.center[0]
    py = ys + 0.5 - spec.center[1]
    r = spec.radius
    if spec.shape == "circle":
        return np.hypot(px, py) - r
    if spec.shape == "ring":
        inner = r * (1.0 - spec.thickness)
        d = np.hypot(px, py)
        return np.maximum(d - r, inner - d)
    if spec.shape == "ellipse":
        c, s = math.cos(spec.rotation), math.sin(spec.rotation)
        u = c * px + s * py
        v = -s * px + c * py
        b = r * spec.aspect
        # first-order distance approximation: level-set value scaled by gradient norm
        k = np.hypot(u / r, v / b)
        grad = np.hypot(u / (r * r), v / (b * b))
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(k > 0, k * (k - 1.0) / np.maximum(grad, 1e-12), -b)
        return d
    # triangle: equilateral, vertices on the circumscribed circle
    verts = [
        (r * math.cos(spec.rotation + 2 * math.pi * k / 3),
         r * math.sin(spec.rotation + 2 * math.pi * k / 3))
        for k in range(3)
    ]
    return _polygon_sdf(px, py, verts)


def silhouette(spec, height, width):
    """1 inside the shape, Gaussian falloff outside, exactly 0 past the cutoff."""
    sd = signed_distance(spec, height, width)
    w = spec.falloff
    if w <= 0:
        return (sd <= 0).astype(np.float64)
    s = np.exp(-0.5 * (np.maximum(sd, 0.0) / w) ** 2)
    s[sd > FALLOFF_CUTOFF * w] = 0.0
    return s


def render_highlight(clean, spec, t_diff=DEFAULT_T_DIFF, t_bright=DEFAULT_T_BRIGHT,
                     min_area=MIN_COMPONENT_AREA):
    """Composite one highlight over ``clean``; returns ``(highlight, mask)``.

    The mask marks pixels where the added luminance exceeds ``t_diff`` and the
    result is visible under the same screening rule used by
    :func:`tashr.imaging.extract_mask` (clipped difference above ``t_diff``,
    brightness above ``t_bright``, fragments under ``min_area`` pixels dropped),
    so synthetic and extracted masks agree.
    """
    clean = np.asarray(clean, dtype=np.float32)
    h, w = clean.shape[:2]
    spec.check_bounds(h, w)
    added = spec.peak * silhouette(spec, h, w)
    out = np.clip(clean.astype(np.float64) + added[..., None], 0.0, 1.0)
    highlight = np.where(added[..., None] > 0, out, clean).astype(np.float32)

    c64 = clean.astype(np.float64)
    visible_diff = (out - c64).max(axis=2)
    mask = (added > t_diff) & (visible_diff > t_diff) & (out.max(axis=2) > t_bright)
    return highlight, drop_small_components(mask, min_area).astype(np.float32)


def _fit_size(img, annotation, size):
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img, annotation
    pil = Image.fromarray(np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8), "RGB")
    pil = pil.resize((size, size), Image.BICUBIC)
    return np.asarray(pil, dtype=np.float32) / 255.0, annotation.scaled(size / w, size / h)


def generate_sample(config, clean, annotation, image_index, sample_index):
    rng = np.random.default_rng([config.seed, image_index, sample_index])
    spec = sample_spec(
        rng, annotation, clean.shape[:2], config.min_radius_frac, config.max_radius_frac,
        config.uniform_fallback,
    )
    highlight, mask = render_highlight(clean, spec, config.t_diff, config.t_bright)
    return spec, highlight, mask


def generate_dataset(config, corpus, out_dir, split="train", names=None):
    """Write highlight/clean/mask PNG triplets and a ``{split}.json`` manifest.

    ``corpus`` is a sequence of ``(image, TextAnnotation)`` pairs. On any
    failure everything written by this call is removed before re-raising.
    """
    if not corpus:
        raise DataError("clean corpus is empty")
    out_dir = Path(out_dir)
    sub = {k: out_dir / split / k for k in ("highlight", "clean", "mask")}
    created = [d for d in [out_dir, out_dir / split, *sub.values()] if not d.exists()]
    written = []
    entries = []
    try:
        for d in sub.values():
            d.mkdir(parents=True, exist_ok=True)
        for i, (img, ann) in enumerate(corpus):
            stem = names[i] if names else f"img{i:05d}"
            img, ann = _fit_size(np.asarray(img, dtype=np.float32), ann, config.size)
            ann.validate(config.size, config.size)
            for k in range(config.samples_per_clean_image):
                sid = f"{stem}_{k:03d}"
                _, highlight, mask = generate_sample(config, img, ann, i, k)
                rel = {key: f"{split}/{key}/{sid}.png" for key in sub}
                for key, arr in (("highlight", highlight), ("clean", img), ("mask", mask)):
                    written.append(out_dir / rel[key])
                    save_image(arr, out_dir / rel[key])
                entries.append(ManifestEntry(sid, rel["highlight"], rel["clean"], rel["mask"], ann))
        manifest = DatasetManifest(entries, split, root=out_dir)
        written.append(out_dir / f"{split}.json")
        manifest.save(out_dir / f"{split}.json")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        for d in reversed(created):
            shutil.rmtree(d, ignore_errors=True)
        raise
    log.info("wrote %d %s triplets to %s", len(entries), split, out_dir)
    return manifest


def load_corpus(corpus_dir):
    """Read ``*.png`` / ``*.jpg`` images with ``<stem>.json`` annotation sidecars."""
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise DataError(f"corpus directory {corpus_dir} does not exist")
    images = sorted(p for p in corpus_dir.iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    corpus, names = [], []
    for p in images:
        sidecar = p.with_suffix(".json")
        if not sidecar.is_file():
            raise DataError(f"missing annotation sidecar {sidecar.name}")
        try:
            ann = TextAnnotation.from_dict(json.loads(sidecar.read_text()))
        except json.JSONDecodeError as e:
            raise DataError(f"{sidecar}: {e}") from e
        img = load_image(p)
        ann.validate(*img.shape[:2])
        corpus.append((img, ann))
        names.append(p.stem)
    if not corpus:
        raise DataError(f"no images found in {corpus_dir}")
    return corpus, names
