"""PSNR / SSIM and end-to-end text spotting recall, precision and f-measure."""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError, ShapeMismatchError
from .imaging import load_image
from .ocr import OcrError

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation of a 2D array with the 1D kernel ``g``."""
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, data_range=1.0):
    """Mean single-scale SSIM, Gaussian window 11x11 (sigma 1.5), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeMismatchError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def box_iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def normalize_text(s, case_sensitive=False):
    s = " ".join(str(s).split())
    return s if case_sensitive else s.casefold()


def match_and_score(pred, gt, iou_thresh=0.5, case_sensitive=False):
    """One-to-one matching of predicted words to ground-truth words; returns ``(tp, fp, fn)``.

    A pair is admissible when IoU >= ``iou_thresh`` and the normalised
    transcriptions are equal. Among admissible pairs the assignment maximises
    the number of matches, then the summed IoU.
    """
    pboxes, ptexts = list(pred.boxes), list(pred.texts)
    gboxes, gtexts = list(gt.boxes), list(gt.transcriptions)
    if not pboxes or not gboxes:
        return 0, len(pboxes), len(gboxes)
    ok = np.zeros((len(pboxes), len(gboxes)), dtype=bool)
    iou = np.zeros(ok.shape)
    for i, (pb, pt) in enumerate(zip(pboxes, ptexts)):
        for j, (gb, gtxt) in enumerate(zip(gboxes, gtexts)):
            iou[i, j] = box_iou(pb, gb)
            ok[i, j] = iou[i, j] >= iou_thresh and (
                normalize_text(pt, case_sensitive) == normalize_text(gtxt, case_sensitive))
    if not ok.any():
        return 0, len(pboxes), len(gboxes)
    # 1 per admissible match dominates any IoU tie-break (summed IoU < min(n, m) <= 1 * n)
    scale = 1.0 + min(ok.shape)
    weight = np.where(ok, scale + iou, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    tp = int(ok[rows, cols].sum())
    return tp, len(pboxes) - tp, len(gboxes) - tp


def ratios(tp, fp, fn):
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f = 2 * recall * precision / (recall + precision) if recall + precision else 0.0
    return recall, precision, f


@dataclass
class ImageRow:
    id: str
    recall: float
    precision: float
    psnr_db: float
    ssim: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates,
            "metadata": self.metadata,
            "failures": self.failures,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d):
        return cls([ImageRow(**r) for r in d.get("rows", [])], dict(d.get("aggregates", {})),
                   dict(d.get("metadata", {})), list(d.get("failures", [])))

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise DataError(f"cannot read report {path}: {e}") from e


def aggregate(rows, failures=(), metadata=None):
    tp = sum(r.tp for r in rows)
    fp = sum(r.fp for r in rows)
    fn = sum(r.fn for r in rows)
    recall, precision, f = ratios(tp, fp, fn)
    agg = {
        "recall": recall,
        "precision": precision,
        "f_measure": f,
        "mean_psnr": float(np.mean([r.psnr_db for r in rows])) if rows else 0.0,
        "mean_ssim": float(np.mean([r.ssim for r in rows])) if rows else 0.0,
        "tp": tp, "fp": fp, "fn": fn,
        "images": len(rows),
        "failed": len(failures),
    }
    return EvalReport(list(rows), agg, dict(metadata or {}), list(failures))


def evaluate_images(items, ocr, iou_thresh=0.5, case_sensitive=False, metadata=None, workers=1):
    """Score ``(id, output_path, clean_image, annotation)`` items.

    OCR failures mark the image failed; it is excluded from every aggregate
    and listed in ``failures``. Rows are folded in sorted id order.
    """
    items = sorted(items, key=lambda it: it[0])

    def one(item):
        sid, out_path, clean, ann = item
        out = load_image(out_path)
        try:
            pred = ocr.recognize(out_path)
        except OcrError as e:
            log.warning("OCR failed on %s: %s", sid, e)
            return sid, None, str(e)
        tp, fp, fn = match_and_score(pred, ann, iou_thresh, case_sensitive)
        r, p, _ = ratios(tp, fp, fn)
        return sid, ImageRow(sid, r, p, psnr(out, clean), ssim(out, clean), tp, fp, fn), None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, items))
    else:
        results = [one(it) for it in items]
    rows = [row for _, row, _ in results if row is not None]
    failures = [{"id": sid, "error": err} for sid, row, err in results if row is None]
    meta = dict(metadata or {})
    meta.setdefault("ocr_engine", getattr(ocr, "engine_id", type(ocr).__name__))
    meta["iou_thresh"] = iou_thresh
    meta["case_sensitive"] = case_sensitive
    return aggregate(rows, failures, meta)


def evaluate_dataset(manifest, outputs_dir, ocr, iou_thresh=0.5, case_sensitive=False,
                     method="ours", dataset=None, workers=1):
    """Evaluate ``<outputs_dir>/<id>.png`` against each manifest entry's clean image.

    ``outputs_dir`` may be the string ``"highlight"`` to score the unprocessed
    highlight inputs themselves (the light-image baseline).
    """
    items = []
    for e in manifest.entries:
        if outputs_dir == "highlight":
            out_path = manifest.resolve(e.highlight_path)
        else:
            out_path = Path(outputs_dir) / f"{e.id}.png"
        if not Path(out_path).is_file():
            raise DataError(f"no output image for {e.id} ({out_path})")
        items.append((e.id, out_path, load_image(manifest.resolve(e.clean_path)), e.annotation))
    meta = {"method": method, "dataset": dataset or manifest.split}
    return evaluate_images(items, ocr, iou_thresh, case_sensitive, meta, workers)


COLUMNS = ("Recall", "Precision", "F-measure", "PSNR", "SSIM")


def report_row(report):
    a = report.aggregates
    return [100 * a["recall"], 100 * a["precision"], 100 * a["f_measure"], a["mean_psnr"],
            100 * a["mean_ssim"]]


def render_table(reports, labels=None):
    """Plain-text comparison table, ratios in percent with two decimals."""
    labels = labels or [r.metadata.get("method", f"run{i}") for i, r in enumerate(reports)]
    width = max([len("Method")] + [len(l) for l in labels])
    lines = ["Method".ljust(width) + "  " + "  ".join(c.rjust(9) for c in COLUMNS)]
    for label, rep in zip(labels, reports):
        lines.append(label.ljust(width) + "  " + "  ".join(f"{v:9.2f}" for v in report_row(rep)))
    return "\n".join(lines) + "\n"
