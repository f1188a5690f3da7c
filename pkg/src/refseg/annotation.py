"""Three-stage referring-expression annotation with pluggable backends.

Stage 1 captions two views of the object (tight crop, background-masked
full frame) and keeps the masked description only when a consistency check
accepts the pair. Stage 2 grounds the kept description in its scene. Stage 3
captions motion over 8 uniformly sampled frames with the object outlined by
a highlight border. Backends are either deterministic mocks that read the
synthetic images directly or JSON-over-HTTP clients.
"""

from __future__ import annotations

import base64
import io
import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .metrics import boundary_mask, _dilate_disk
from .refvos import SamplingStrategy, select_keyframes
from .synth import PALETTE
from .tasks import Masklet

HIGHLIGHT_COLOR = (255, 255, 0)
BORDER_WIDTH = 2

OBJECT_INSTRUCTION = "describe the object in the image"
SCENE_INSTRUCTION_PREFIX = "describe the scene location of the object described as: "
VIDEO_INSTRUCTION_PREFIX = "describe the motion of the outlined object described as: "


class BackendError(RuntimeError):
    """Retriable backend failure; the pipeline marks the record pending."""


@dataclass
class AnnotationRecord:
    video_id: str
    object_id: str
    object_level: str = ""
    scene_level: str = ""
    video_level: str = ""
    status: str = "kept"  # kept | discarded_inconsistent

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "object_id": self.object_id,
            "object_level": self.object_level,
            "scene_level": self.scene_level,
            "video_level": self.video_level,
            "status": self.status,
        }


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------


def _nearest_palette_color(rgb: np.ndarray) -> str:
    best, best_d = None, None
    for name, ref in PALETTE.items():
        d = float(np.sum((rgb.astype(float) - np.array(ref)) ** 2))
        if best_d is None or d < best_d:
            best, best_d = name, d
    return best


def _dominant_color_pixels(image: np.ndarray) -> tuple[str, np.ndarray]:
    """Most frequent exact non-black, non-highlight color and its pixel mask."""
    flat = image.reshape(-1, 3)
    nonblack = np.any(flat != 0, axis=1)
    colors, counts = np.unique(flat[nonblack], axis=0, return_counts=True)
    keep = [i for i, c in enumerate(colors) if tuple(c) != HIGHLIGHT_COLOR]
    if not keep:
        return "", np.zeros(image.shape[:2], dtype=bool)
    best = keep[int(np.argmax(counts[keep]))]
    pix = np.all(image == colors[best], axis=2)
    return _nearest_palette_color(colors[best]), pix


def _shape_word(pixels: np.ndarray) -> str:
    ys, xs = np.nonzero(pixels)
    h = ys.max() - ys.min() + 1
    w = xs.max() - xs.min() + 1
    fill = len(ys) / (h * w)
    if fill > 0.92:
        return "square"
    if fill > 0.62:
        return "circle"
    return "triangle"


def _size_word(pixels: np.ndarray) -> str:
    ys, xs = np.nonzero(pixels)
    extent = max(ys.max() - ys.min(), xs.max() - xs.min()) + 1
    return "large" if extent >= 19 else "small"


def _position_word(pixels: np.ndarray, shape: tuple[int, int]) -> str:
    ys, xs = np.nonzero(pixels)
    cy, cx = ys.mean(), xs.mean()
    h, w = shape
    if cx < 0.4 * w:
        return "left"
    if cx > 0.6 * w:
        return "right"
    if cy < 0.4 * h:
        return "top"
    if cy > 0.6 * h:
        return "bottom"
    return "center"


class MockCaptioner:
    """Template captioner that reads the synthetic images directly; pure
    function of its inputs, so deterministic for any seed."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def describe(self, image: np.ndarray, instruction: str) -> str:
        image = np.asarray(image)
        if instruction.startswith(SCENE_INSTRUCTION_PREFIX):
            object_level = instruction[len(SCENE_INSTRUCTION_PREFIX) :]
            return self._scene(image, object_level)
        if instruction.startswith(VIDEO_INSTRUCTION_PREFIX):
            scene_level = instruction[len(VIDEO_INSTRUCTION_PREFIX) :]
            return self._video(image, scene_level)
        return self._object(image)

    def _object(self, image: np.ndarray) -> str:
        color, pixels = _dominant_color_pixels(image)
        if not color or not pixels.any():
            return "an empty region"
        return f"a {_size_word(pixels)} {color} {_shape_word(pixels)}"

    def _scene(self, image: np.ndarray, object_level: str) -> str:
        target = None
        for name in PALETTE:
            if name in object_level.split():
                target = name
                break
        if target is None:
            return f"{object_level} in the scene"
        pixels = np.all(image == np.array(PALETTE[target]), axis=2)
        if not pixels.any():
            return f"{object_level} in the scene"
        pos = _position_word(pixels, image.shape[:2])
        return f"{object_level} in the {pos} of the scene"

    def _video(self, frames: np.ndarray, scene_level: str) -> str:
        if frames.ndim == 3:
            frames = frames[None]
        centers = []
        for frame in frames:
            pix = np.all(frame == np.array(HIGHLIGHT_COLOR), axis=2)
            if pix.any():
                ys, xs = np.nonzero(pix)
                centers.append((xs.mean(), ys.mean()))
        if len(centers) < 2:
            return f"{scene_level}, staying still"
        dx = centers[-1][0] - centers[0][0]
        dy = centers[-1][1] - centers[0][1]
        if max(abs(dx), abs(dy)) < 1.5:
            word = "staying still"
        elif abs(dx) >= abs(dy):
            word = "moving right" if dx > 0 else "moving left"
        else:
            word = "moving down" if dy > 0 else "moving up"
        return f"{scene_level}, {word}"


class MockConsistencyChecker:
    """Jaccard token-overlap check; symmetric by construction."""

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold

    def consistent(self, desc_a: str, desc_b: str) -> bool:
        a, b = set(desc_a.split()), set(desc_b.split())
        if not a and not b:
            return True
        overlap = len(a & b) / len(a | b)
        return overlap >= self.threshold


def _encode_png(image: np.ndarray) -> str:
    if image.ndim == 4:  # frame stack: tile horizontally into one image
        image = np.concatenate(list(image), axis=1)
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _post_json(url: str, payload: dict, retries: int = 3, backoff: float = 0.25) -> dict:
    data = json.dumps(payload).encode()
    last = None
    for attempt in range(retries):
        try:
            req = urllib.request.Request(
                url, data=data, headers={"Content-Type": "application/json"}
            )
            with urllib.request.urlopen(req, timeout=10) as resp:
                return json.loads(resp.read())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            last = exc
            time.sleep(backoff * (2**attempt))
    raise BackendError(f"backend unreachable after {retries} attempts: {last}")


class RemoteCaptioner:
    """JSON-over-HTTP captioner: {image: base64 PNG, instruction} -> {text}."""

    def __init__(self, endpoint: str, retries: int = 3):
        self.endpoint = endpoint
        self.retries = retries

    def describe(self, image: np.ndarray, instruction: str) -> str:
        reply = _post_json(
            self.endpoint,
            {"image": _encode_png(np.asarray(image)), "instruction": instruction},
            retries=self.retries,
        )
        return reply.get("text", "")


class RemoteConsistencyChecker:
    def __init__(self, endpoint: str, retries: int = 3):
        self.endpoint = endpoint
        self.retries = retries

    def consistent(self, desc_a: str, desc_b: str) -> bool:
        reply = _post_json(
            self.endpoint, {"text_a": desc_a, "text_b": desc_b}, retries=self.retries
        )
        return bool(reply.get("consistent"))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def select_object_frame(masklet: Masklet) -> int:
    """Frame with the largest mask area; ties break to the lowest index."""
    areas = masklet.masks.reshape(masklet.frame_count, -1).sum(axis=1)
    if areas.max() == 0:
        raise ValueError("object never visible")
    return int(np.argmax(areas))


def render_object_views(frame: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(tight crop of the unmasked frame, full frame with background zeroed)."""
    mask = np.asarray(mask) != 0
    if not mask.any():
        raise ValueError("mask is empty")
    ys, xs = np.nonzero(mask)
    cropped = frame[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1].copy()
    masked_full = frame.copy()
    masked_full[~mask] = 0
    return cropped, masked_full


def object_stage(views, captioner, checker) -> tuple[str, bool]:
    """Caption both views; returns (masked-view description, kept?)."""
    cropped, masked_full = views
    desc_crop = captioner.describe(cropped, OBJECT_INSTRUCTION)
    desc_mask = captioner.describe(masked_full, OBJECT_INSTRUCTION)
    if not checker.consistent(desc_crop, desc_mask):
        return desc_mask, False
    return desc_mask, True


def scene_stage(frame: np.ndarray, object_level: str, captioner) -> str:
    text = captioner.describe(frame, SCENE_INSTRUCTION_PREFIX + object_level)
    if not text:
        raise BackendError("empty scene caption")
    return text


def highlight_object(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Outline the mask contour with a BORDER_WIDTH-pixel highlight border
    (one pixel inside the contour, one ring outside)."""
    mask = np.asarray(mask) != 0
    contour = boundary_mask(mask)
    outside_ring = _dilate_disk(mask, 1) & ~mask
    border = contour | outside_ring
    out = frame.copy()
    out[border] = HIGHLIGHT_COLOR
    return out


def video_stage(video_frames: np.ndarray, masklet: Masklet, scene_level: str, captioner) -> str:
    """Caption the object's motion over 8 uniform frames with highlight
    borders; videos shorter than 8 frames use every frame."""
    T = masklet.frame_count
    indices = select_keyframes(T, SamplingStrategy("uniform_k", 8))
    highlighted = np.stack(
        [highlight_object(video_frames[t], masklet.masks[t]) for t in indices]
    )
    text = captioner.describe(highlighted, VIDEO_INSTRUCTION_PREFIX + scene_level)
    if not text:
        raise BackendError("empty video caption")
    return text


def annotate_one(video_id: str, frames: np.ndarray, masklet: Masklet, captioner, checker):
    """All three stages for one (video, masklet) pair."""
    record = AnnotationRecord(video_id=video_id, object_id=masklet.object_id)
    frame_idx = select_object_frame(masklet)
    views = render_object_views(frames[frame_idx], masklet.masks[frame_idx])
    object_level, kept = object_stage(views, captioner, checker)
    if not kept:
        record.status = "discarded_inconsistent"
        return record
    record.object_level = object_level
    record.scene_level = scene_stage(frames[frame_idx], object_level, captioner)
    record.video_level = video_stage(frames, masklet, record.scene_level, captioner)
    return record


def run_pipeline(items, captioner, checker, out_path: str | None = None):
    """Annotate (video_id, frames, masklet) items; per-record errors are
    isolated (counted pending, not written). Returns (records, stats)."""
    records = []
    pending = 0
    for video_id, frames, masklet in items:
        try:
            records.append(annotate_one(video_id, frames, masklet, captioner, checker))
        except BackendError:
            pending += 1
        except ValueError:
            pending += 1
    kept = [r for r in records if r.status == "kept"]
    lengths = [len(r.video_level.split()) for r in kept]
    stats = {
        "kept": len(kept),
        "discarded": len(records) - len(kept),
        "pending": pending,
        "avg_expression_len": float(np.mean(lengths)) if lengths else 0.0,
    }
    if out_path:
        with open(out_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return records, stats
