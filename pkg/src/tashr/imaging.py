"""Raster types, 8-bit PNG I/O and ground-truth mask extraction.

Images are ``float32`` numpy arrays in ``[0, 1]``: ``(H, W, 3)`` for RGB and
``(H, W)`` for masks.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ImageNotFoundError, ShapeMismatchError, UnsupportedImageError, DataError

DEFAULT_T_DIFF = 25 / 255
DEFAULT_T_BRIGHT = 170 / 255
MIN_COMPONENT_AREA = 16


@dataclass
class TextAnnotation:
    """Axis-aligned text boxes ``(x, y, w, h)`` in pixels plus one transcription per box."""

    boxes: list = field(default_factory=list)
    transcriptions: list = field(default_factory=list)

    def __post_init__(self):
        self.boxes = [tuple(float(v) for v in b) for b in self.boxes]
        self.transcriptions = [str(t) for t in self.transcriptions]
        if len(self.boxes) != len(self.transcriptions):
            raise DataError(
                f"{len(self.boxes)} boxes but {len(self.transcriptions)} transcriptions"
            )
        for b in self.boxes:
            if len(b) != 4 or b[2] <= 0 or b[3] <= 0:
                raise DataError(f"malformed box {b}")

    def validate(self, height, width):
        for x, y, w, h in self.boxes:
            if x < 0 or y < 0 or x + w > width or y + h > height:
                raise DataError(f"box {(x, y, w, h)} outside {width}x{height} image")

    def scaled(self, sx, sy):
        return TextAnnotation(
            [(x * sx, y * sy, w * sx, h * sy) for x, y, w, h in self.boxes],
            list(self.transcriptions),
        )

    def to_dict(self):
        return {"boxes": [list(b) for b in self.boxes], "transcriptions": list(self.transcriptions)}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("boxes", []), d.get("transcriptions", []))


@dataclass
class SampleTriplet:
    id: str
    highlight: np.ndarray
    clean: np.ndarray
    mask: np.ndarray
    annotation: TextAnnotation = field(default_factory=TextAnnotation)

    def __post_init__(self):
        hw = self.highlight.shape[:2]
        if self.clean.shape[:2] != hw or self.mask.shape[:2] != hw:
            raise ShapeMismatchError(
                f"triplet {self.id}: sizes {self.highlight.shape}, {self.clean.shape}, {self.mask.shape}"
            )


def quantize8(x):
    """Round-half-up to 8-bit codes."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def _open(path):
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"no such image: {path}")
    try:
        return Image.open(path)
    except OSError as e:
        raise UnsupportedImageError(f"{path}: {e}") from e


def load_image(path):
    """Load an 8-bit RGB raster as ``(H, W, 3)`` float32 in ``[0, 1]``."""
    with _open(path) as im:
        if im.mode != "RGB":
            raise UnsupportedImageError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def load_mask(path):
    """Load an 8-bit grayscale mask as ``(H, W)`` float32 in ``[0, 1]``."""
    with _open(path) as im:
        if im.mode not in ("L", "1"):
            raise UnsupportedImageError(f"{path}: expected 8-bit grayscale, got mode {im.mode!r}")
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def save_image(img, path):
    """Write an RGB image or a mask as 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        mode = "L"
    elif img.ndim == 3 and img.shape[2] == 3:
        mode = "RGB"
    else:
        raise UnsupportedImageError(f"cannot save array of shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains non-finite values")
    path = Path(path)
    try:
        Image.fromarray(quantize8(img), mode=mode).save(path, format="PNG")
    except (OSError, ValueError) as e:
        raise DataError(f"cannot write {path}: {e}") from e


def extract_mask(highlight, clean, t_diff=DEFAULT_T_DIFF, t_bright=DEFAULT_T_BRIGHT,
                 min_area=MIN_COMPONENT_AREA):
    """Binary highlight mask from a highlight/clean pair.

    A pixel is marked when its max-channel absolute difference exceeds
    ``t_diff`` and its max-channel highlight brightness exceeds ``t_bright``;
    8-connected components smaller than ``min_area`` pixels are dropped.
    """
    highlight = np.asarray(highlight, dtype=np.float32)
    clean = np.asarray(clean, dtype=np.float32)
    if highlight.shape != clean.shape:
        raise ShapeMismatchError(f"{highlight.shape} vs {clean.shape}")
    if highlight.ndim == 2:
        highlight, clean = highlight[..., None], clean[..., None]
    diff = np.abs(highlight - clean).max(axis=2)
    bright = highlight.max(axis=2)
    mask = (diff > t_diff) & (bright > t_bright)
    return drop_small_components(mask, min_area).astype(np.float32)


def drop_small_components(mask, min_area=MIN_COMPONENT_AREA):
    """Remove 8-connected components of a boolean mask with fewer than ``min_area`` pixels."""
    mask = np.asarray(mask, dtype=bool)
    if min_area <= 1 or not mask.any():
        return mask
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def mask_iou(a, b):
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
