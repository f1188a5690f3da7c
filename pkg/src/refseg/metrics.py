"""Segmentation metrics: IoU, cumulative IoU, region similarity J, boundary
measure F, and their video-level J&F aggregation.

All functions operate on binary numpy masks (any integer/bool dtype; nonzero
is foreground). Conventions for degenerate inputs:

* ``iou``: both masks empty -> 1.0
* ``boundary_f``: both boundaries empty -> 1.0, exactly one empty -> 0.0
* ``ciou``: every union empty -> 1.0 (flagged degenerate in reports)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

REPORT_SCHEMA_VERSION = 1

# Boundary-matching tolerance as a fraction of the image diagonal; the
# radius in pixels is max(1, round(frac * diagonal)).
BOUNDARY_TOLERANCE_FRAC = 0.008


def _as_bool(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D mask, got shape {arr.shape}")
    return arr != 0


def iou(pred, gt) -> float:
    """Intersection-over-union of two binary masks. Both empty -> 1.0."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def ciou(pairs) -> float:
    """Cumulative IoU over (pred, gt) pairs: sum of intersections divided by
    sum of unions. Weights large objects more than mean per-sample IoU.

    Every union empty -> 1.0 (degenerate; reported as such by eval_dataset).
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("ciou needs a nonempty dataset")
    inter = 0
    union = 0
    for pred, gt in pairs:
        p, g = _as_bool(pred), _as_bool(gt)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
        inter += np.count_nonzero(p & g)
        union += np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return inter / union


def boundary_mask(mask) -> np.ndarray:
    """1-pixel-wide boundary: foreground pixels with at least one background
    4-neighbor, where pixels beyond the image border count as background."""
    m = _as_bool(mask)
    padded = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return m & ~interior


def _dilate_disk(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a Euclidean disk of the given integer radius."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > radius * radius:
                continue
            ys = slice(max(0, dy), min(h, h + dy))
            xs = slice(max(0, dx), min(w, w + dx))
            ys_src = slice(max(0, -dy), min(h, h - dy))
            xs_src = slice(max(0, -dx), min(w, w - dx))
            out[ys, xs] |= mask[ys_src, xs_src]
    return out


def boundary_tolerance(shape: tuple[int, int], frac: float = BOUNDARY_TOLERANCE_FRAC) -> int:
    diag = float(np.hypot(shape[0], shape[1]))
    return max(1, int(np.floor(frac * diag + 0.5)))


def boundary_f(pred, gt, tolerance: int | None = None) -> float:
    """Boundary F-measure: precision/recall of boundary pixels matched within
    a disk of ``tolerance`` pixels (default max(1, round(0.008 * diagonal)))."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if tolerance is None:
        tolerance = boundary_tolerance(p.shape)
    pb = boundary_mask(p)
    gb = boundary_mask(g)
    n_p = np.count_nonzero(pb)
    n_g = np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    gb_dil = _dilate_disk(gb, tolerance)
    pb_dil = _dilate_disk(pb, tolerance)
    precision = np.count_nonzero(pb & gb_dil) / n_p
    recall = np.count_nonzero(gb & pb_dil) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jf_video(pred_masks, gt_masks, tolerance: int | None = None) -> tuple[float, float, float]:
    """Per-video (J, F, J&F): J = mean per-frame IoU, F = mean per-frame
    boundary F, J&F = (J + F) / 2. Frame counts must match."""
    pred = np.asarray(pred_masks)
    gt = np.asarray(gt_masks)
    if pred.shape != gt.shape:
        raise ValueError(f"masklet shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or pred.shape[0] == 0:
        raise ValueError(f"expected nonempty T x H x W masklets, got {pred.shape}")
    js = [iou(pred[t], gt[t]) for t in range(pred.shape[0])]
    fs = [boundary_f(pred[t], gt[t], tolerance) for t in range(pred.shape[0])]
    j = float(np.mean(js))
    f = float(np.mean(fs))
    return j, f, (j + f) / 2


@dataclass
class EvalReport:
    """Aggregated evaluation results with per-sample rows.

    Rows are dicts with at least an ``id``; image rows carry ``iou``, video
    rows carry ``j``, ``f``, ``jf``.
    """

    rows: list[dict] = field(default_factory=list)
    ciou: float | None = None
    ciou_degenerate: bool = False
    mean_j: float | None = None
    mean_f: float | None = None
    jf: float | None = None
    n_images: int = 0
    n_videos: int = 0
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "aggregates": {
                "ciou": self.ciou,
                "ciou_degenerate": self.ciou_degenerate,
                "mean_j": self.mean_j,
                "mean_f": self.mean_f,
                "jf": self.jf,
            },
            "counts": {"images": self.n_images, "videos": self.n_videos},
            "rows": self.rows,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def eval_dataset(image_pairs=(), video_pairs=(), ids=None, workers: int = 1) -> EvalReport:
    """Evaluate a dataset. ``image_pairs`` are (pred, gt) H x W masks scored
    by cIoU; ``video_pairs`` are (pred, gt) T x H x W masklets scored by J&F.
    ``workers`` parallelizes per-sample scoring; the reduction order is the
    input order either way.
    """
    report = EvalReport()
    image_pairs = list(image_pairs)
    video_pairs = list(video_pairs)
    if ids is None:
        ids = [f"sample_{i}" for i in range(len(image_pairs) + len(video_pairs))]

    inter = 0
    union = 0
    for idx, (pred, gt) in enumerate(image_pairs):
        p, g = _as_bool(pred), _as_bool(gt)
        sample_iou = iou(p, g)
        inter += np.count_nonzero(p & g)
        union += np.count_nonzero(p | g)
        report.rows.append({"id": ids[idx], "kind": "image", "iou": sample_iou})
    if image_pairs:
        report.ciou = 1.0 if union == 0 else inter / union
        report.ciou_degenerate = union == 0
        report.n_images = len(image_pairs)

    if workers > 1 and len(video_pairs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(lambda pair: jf_video(*pair), video_pairs))
    else:
        scores = [jf_video(pred, gt) for pred, gt in video_pairs]

    js, fs = [], []
    for vidx, (j, f, jf) in enumerate(scores):
        js.append(j)
        fs.append(f)
        report.rows.append(
            {"id": ids[len(image_pairs) + vidx], "kind": "video", "j": j, "f": f, "jf": jf}
        )
    if video_pairs:
        report.mean_j = float(np.mean(js))
        report.mean_f = float(np.mean(fs))
        report.jf = (report.mean_j + report.mean_f) / 2
        report.n_videos = len(video_pairs)
    return report
