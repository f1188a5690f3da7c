"""Synthetic ground-truth corpus: moving geometric shapes with exact masks.

Scenes hold 1-4 shapes (circle / square / triangle) from a 6-color palette
with static, linear, or sinusoidal motion, optional occluders and late-entry
objects. Masks are analytic: a pixel is foreground iff its integer grid
point satisfies the shape's indicator, minus anything drawn above it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .tasks import Masklet, TaskSample, VisualInput, VisualPrompt

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 220, 50),
    "purple": (160, 60, 200),
    "orange": (240, 140, 40),
}
SHAPES = ("circle", "square", "triangle")
PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles"}
SIZE_RANGES = {"small": (5, 8), "large": (10, 13)}
COUNT_WORDS = ("zero", "one", "two", "three", "four")


class SceneOverconstrained(RuntimeError):
    pass


class NoDiscriminatingExpression(RuntimeError):
    pass


@dataclass
class ShapeSpec:
    shape: str
    color: str
    size_label: str
    half_extent: float
    start: tuple[float, float]
    motion_kind: str = "static"  # static | linear | sinusoidal
    velocity: tuple[float, float] = (0.0, 0.0)
    sin_axis: str = "x"
    sin_amplitude: float = 0.0
    sin_period: float = 8.0
    entry_frame: int = 0
    is_occluder: bool = False

    def center(self, t: int) -> tuple[float, float]:
        cx, cy = self.start
        if self.motion_kind == "linear":
            return cx + self.velocity[0] * t, cy + self.velocity[1] * t
        if self.motion_kind == "sinusoidal":
            off = self.sin_amplitude * np.sin(2 * np.pi * t / self.sin_period)
            if self.sin_axis == "x":
                return cx + off, cy
            return cx, cy + off
        return cx, cy

    def motion_phrase(self) -> str:
        if self.motion_kind == "static":
            return "is not moving"
        if self.motion_kind == "sinusoidal":
            return "moves back and forth" if self.sin_axis == "x" else "bobs up and down"
        vx, vy = self.velocity
        if abs(vx) >= abs(vy):
            return "moves to the right" if vx > 0 else "moves to the left"
        return "moves down" if vy > 0 else "moves up"


@dataclass
class Scene:
    size: int
    frame_count: int
    shapes: list[ShapeSpec] = field(default_factory=list)


def shape_indicator(spec: ShapeSpec, t: int, size: int) -> np.ndarray:
    """Exact point-in-shape test on the integer pixel grid."""
    cx, cy = spec.center(t)
    r = spec.half_extent
    ys, xs = np.mgrid[0:size, 0:size]
    if spec.shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if spec.shape == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= r
    # triangle: apex up, base down; sign test tolerant of vertex orientation
    ax, ay = cx, cy - r
    bx, by = cx - r, cy + r
    dx, dy = cx + r, cy + r

    def side(px, py, qx, qy):
        return (qx - px) * (ys - py) - (qy - py) * (xs - px)

    s1 = side(ax, ay, bx, by)
    s2 = side(bx, by, dx, dy)
    s3 = side(dx, dy, ax, ay)
    return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))


def point_in_shape(spec: ShapeSpec, t: int, x: float, y: float) -> bool:
    """Scalar indicator for a single pixel; the renderer's independent oracle."""
    cx, cy = spec.center(t)
    r = spec.half_extent
    if spec.shape == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    if spec.shape == "square":
        return max(abs(x - cx), abs(y - cy)) <= r
    ax, ay = cx, cy - r
    bx, by = cx - r, cy + r
    dx, dy = cx + r, cy + r

    def side(px, py, qx, qy):
        return (qx - px) * (y - py) - (qy - py) * (x - px)

    s1 = side(ax, ay, bx, by)
    s2 = side(bx, by, dx, dy)
    s3 = side(dx, dy, ax, ay)
    return (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0)


def render_scene(scene: Scene) -> tuple[np.ndarray, list[np.ndarray], dict]:
    """Render frames plus per-shape visible masks (z-order: later on top)."""
    size, T = scene.size, scene.frame_count
    frames = np.zeros((T, size, size, 3), dtype=np.uint8)
    masks = [np.zeros((T, size, size), dtype=np.uint8) for _ in scene.shapes]
    for t in range(T):
        indicators = []
        for spec in scene.shapes:
            if t < spec.entry_frame:
                indicators.append(np.zeros((size, size), dtype=bool))
            else:
                indicators.append(shape_indicator(spec, t, size))
        for i, spec in enumerate(scene.shapes):
            frames[t][indicators[i]] = PALETTE[spec.color]
            visible = indicators[i].copy()
            for j in range(i + 1, len(scene.shapes)):
                visible &= ~indicators[j]
            masks[i][t] = visible.astype(np.uint8)
    meta = scene_metadata(scene)
    return frames, masks, meta


def scene_metadata(scene: Scene) -> dict:
    objects = []
    for spec in scene.shapes:
        objects.append(
            {
                "shape": spec.shape,
                "color": spec.color,
                "size": spec.size_label,
                "half_extent": spec.half_extent,
                "start": list(spec.start),
                "motion_kind": spec.motion_kind,
                "motion_phrase": spec.motion_phrase(),
                "entry_frame": spec.entry_frame,
                "is_occluder": spec.is_occluder,
            }
        )
    return {"canvas": scene.size, "frame_count": scene.frame_count, "objects": objects}


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------


def _path_in_bounds(spec: ShapeSpec, size: int, T: int) -> bool:
    margin = spec.half_extent + 1
    for t in range(T):
        cx, cy = spec.center(t)
        if not (margin <= cx <= size - 1 - margin and margin <= cy <= size - 1 - margin):
            return False
    return True


def _sample_shape(rng: np.random.Generator, size: int, T: int, moving: bool) -> ShapeSpec | None:
    shape = str(rng.choice(SHAPES))
    color = str(rng.choice(list(PALETTE)))
    size_label = str(rng.choice(("small", "large")))
    lo, hi = SIZE_RANGES[size_label]
    # half-extent ranges are calibrated for a 64px canvas; scale for others
    scale = size / 64.0
    lo = max(3, int(round(lo * scale)))
    hi = max(lo, int(round(hi * scale)))
    r = float(rng.integers(lo, hi + 1))
    margin = r + 2
    if margin >= size - 1 - margin:
        return None  # shape cannot fit on this canvas
    cx = float(rng.uniform(margin, size - 1 - margin))
    cy = float(rng.uniform(margin, size - 1 - margin))
    spec = ShapeSpec(shape, color, size_label, r, (cx, cy))
    if moving:
        kind = str(rng.choice(("linear", "sinusoidal", "static")))
        if kind == "linear":
            speed = rng.uniform(0.6, 1.8)
            angle = rng.choice((0.0, np.pi / 2, np.pi, 3 * np.pi / 2))
            spec.motion_kind = "linear"
            spec.velocity = (float(speed * np.cos(angle)), float(speed * np.sin(angle)))
        elif kind == "sinusoidal":
            spec.motion_kind = "sinusoidal"
            spec.sin_axis = str(rng.choice(("x", "y")))
            spec.sin_amplitude = float(rng.uniform(4.0, 9.0))
            spec.sin_period = float(max(4, T))
    return spec


def _boxes_overlap(a: ShapeSpec, b: ShapeSpec) -> bool:
    (ax, ay), (bx, by) = a.start, b.start
    return abs(ax - bx) < a.half_extent + b.half_extent + 2 and abs(ay - by) < (
        a.half_extent + b.half_extent + 2
    )


def sample_scene(
    rng: np.random.Generator,
    n_shapes: int,
    frame_count: int,
    size: int = 64,
    moving: bool = True,
    occluder: bool = False,
    late_entry: bool = False,
    max_tries: int = 200,
) -> Scene:
    """Sample a valid scene; shapes get unique (color, shape, size) triples,
    start positions do not overlap, and every path stays in bounds."""
    if not 1 <= n_shapes <= 4:
        raise ValueError("n_shapes must be in 1..4")
    if not 1 <= frame_count <= 24:
        raise ValueError("frame_count must be in 1..24")
    for _ in range(max_tries):
        shapes: list[ShapeSpec] = []
        triples = set()
        ok = True
        for _ in range(n_shapes):
            placed = False
            for _ in range(40):
                cand = _sample_shape(rng, size, frame_count, moving and frame_count > 1)
                if cand is None:
                    continue
                triple = (cand.color, cand.shape, cand.size_label)
                if triple in triples:
                    continue
                if any(_boxes_overlap(cand, s) for s in shapes):
                    continue
                if not _path_in_bounds(cand, size, frame_count):
                    continue
                shapes.append(cand)
                triples.add(triple)
                placed = True
                break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        if late_entry and frame_count >= 8:
            target = shapes[0]
            lo = max(5, frame_count // 2 - 1)
            hi = frame_count - 3
            if lo < hi:
                target.entry_frame = int(rng.integers(lo, hi))
        if occluder and frame_count >= 4:
            occ = _make_occluder(rng, shapes[0], size, frame_count, triples)
            if occ is not None:
                shapes.append(occ)
        return Scene(size=size, frame_count=frame_count, shapes=shapes)
    raise SceneOverconstrained(f"could not place {n_shapes} shapes on a {size}px canvas")


def _make_occluder(rng, target: ShapeSpec, size, T, triples) -> ShapeSpec | None:
    """A top-of-stack shape whose linear path crosses the target mid-video."""
    mid = T // 2
    tx, ty = target.center(mid)
    scale = size / 64.0
    r = float(rng.integers(max(3, int(8 * scale)), max(4, int(12 * scale))))
    from_left = bool(rng.integers(0, 2))
    start_x = r + 1 if from_left else size - 2 - r
    vx = (tx - start_x) / max(mid, 1)
    for color in rng.permutation(list(PALETTE)):
        for shape in rng.permutation(SHAPES):
            if (str(color), str(shape), "large") not in triples:
                occ = ShapeSpec(
                    str(shape), str(color), "large", r, (float(start_x), float(ty)),
                    motion_kind="linear", velocity=(float(vx), 0.0), is_occluder=True,
                )
                cx0 = min(occ.center(t)[0] for t in range(T))
                cx1 = max(occ.center(t)[0] for t in range(T))
                if cx0 >= 1 and cx1 <= size - 2:
                    return occ
    return None


# ---------------------------------------------------------------------------
# expressions and QA
# ---------------------------------------------------------------------------


def _matches(obj: dict, attrs: dict) -> bool:
    return all(obj[k] == v for k, v in attrs.items())


def _minimal_attrs(metadata: dict, target_idx: int) -> dict:
    """Smallest attribute set that picks out the target among all objects."""
    objects = metadata["objects"]
    target = objects[target_idx]
    for keys in (("color", "shape"), ("color", "shape", "size")):
        attrs = {k: target[k] for k in keys}
        if sum(1 for o in objects if _matches(o, attrs)) == 1:
            return attrs
    raise NoDiscriminatingExpression(
        f"object {target_idx} is not uniquely describable by its attributes"
    )


def _side_phrase(metadata: dict, target_idx: int) -> str:
    size = metadata["canvas"]
    cx, cy = metadata["objects"][target_idx]["start"]
    if cx < 0.4 * size:
        return "near the left side"
    if cx > 0.6 * size:
        return "near the right side"
    if cy < 0.4 * size:
        return "near the top"
    if cy > 0.6 * size:
        return "near the bottom"
    return "near the center"


def _relation_phrase(metadata: dict, target_idx: int) -> str:
    objects = metadata["objects"]
    others = [i for i in range(len(objects)) if i != target_idx and not objects[i]["is_occluder"]]
    if not others:
        return _side_phrase(metadata, target_idx)
    other = objects[others[0]]
    (tx, ty) = metadata["objects"][target_idx]["start"]
    (ox, oy) = other["start"]
    ref = f"the {other['color']} {other['shape']}"
    if tx < ox - 3:
        return f"left of {ref}"
    if tx > ox + 3:
        return f"right of {ref}"
    if ty < oy - 3:
        return f"above {ref}"
    return f"below {ref}"


def gen_expression(metadata: dict, target_idx: int = 0, style: str = "short") -> str:
    """A referring expression that uniquely resolves the target in its scene.

    short: minimal attribute template ("the red circle"). long: attributes
    plus a spatial relation and a motion clause (always >= 8 words).
    """
    attrs = _minimal_attrs(metadata, target_idx)
    target = metadata["objects"][target_idx]
    if style == "short":
        if "size" in attrs:
            return f"the {attrs['size']} {attrs['color']} {attrs['shape']}"
        return f"the {attrs['color']} {attrs['shape']}"
    rel = _relation_phrase(metadata, target_idx)
    motion = target["motion_phrase"]
    return (
        f"the {target['size']} {target['color']} {target['shape']} "
        f"that starts {rel} and {motion}"
    )


def expression_is_unique(metadata: dict, expression: str, target_idx: int) -> bool:
    """Attribute-matching check: the expression's attribute words select the
    target and no other object."""
    words = expression.split()
    matches = []
    for i, obj in enumerate(metadata["objects"]):
        attrs_present = obj["color"] in words and obj["shape"] in words
        if "small" in words or "large" in words:
            attrs_present = attrs_present and obj["size"] in words
        if attrs_present:
            matches.append(i)
    return matches == [target_idx]


def gen_qa(metadata: dict, rng: np.random.Generator) -> tuple[str, str]:
    """One templated (question, answer) pair over counts, colors, or motion."""
    objects = metadata["objects"]
    kinds = ["count", "color", "motion"] if metadata["frame_count"] > 1 else ["count", "color"]
    kind = str(rng.choice(kinds))
    if kind == "count":
        shape = str(rng.choice(SHAPES))
        n = sum(1 for o in objects if o["shape"] == shape)
        return f"how many {PLURALS[shape]} are there", COUNT_WORDS[n]
    if kind == "color":
        candidates = [o for o in objects if sum(1 for p in objects if p["shape"] == o["shape"]) == 1]
        if not candidates:
            shape = str(rng.choice(SHAPES))
            n = sum(1 for o in objects if o["shape"] == shape)
            return f"how many {PLURALS[shape]} are there", COUNT_WORDS[n]
        obj = candidates[int(rng.integers(0, len(candidates)))]
        return f"what color is the {obj['shape']}", obj["color"]
    idx = int(rng.integers(0, len(objects)))
    obj = objects[idx]
    expr = gen_expression(metadata, idx, "short")
    return f"how does {expr} move", f"it {obj['motion_phrase']}"


# ---------------------------------------------------------------------------
# sample assembly
# ---------------------------------------------------------------------------


def _ref_sample(task, frames, masks, meta, target, expr, sample_id, scene_id):
    meta = dict(meta)
    meta["target_index"] = target
    meta["scene_id"] = scene_id  # split assignment groups by scene
    return TaskSample(
        task=task,
        visual=VisualInput("video" if task == "ref_video_seg" else "image", frames),
        instruction_text=f"please segment {expr}",
        answer_text=f"{expr} is [SEG]",
        gt_masklets=[Masklet(masks[target], object_id=f"obj{target}")],
        sample_id=sample_id,
        meta=meta,
    )


def gen_video_samples(
    seed: int,
    scene_id: str,
    n_shapes: int | None = None,
    frame_count: int | None = None,
    size: int = 64,
    stress: str | None = None,
    expression_style: str = "long",
    max_targets: int = 2,
) -> list[TaskSample]:
    """Ref-video samples for one scene, one per referable target (the same
    frames appear under several expressions, so only prompt-conditioned
    decoding fits the data). Stress in {None, "late", "occlusion"}; the
    late-entry target is always the entering object."""
    rng = np.random.default_rng(seed)
    if n_shapes is None:
        n_shapes = int(rng.integers(1, 4))
    if frame_count is None:
        frame_count = int(rng.integers(8, 17))
    for attempt in range(20):
        scene = sample_scene(
            rng,
            n_shapes,
            frame_count,
            size=size,
            occluder=stress == "occlusion",
            late_entry=stress == "late",
        )
        frames, masks, meta = render_scene(scene)
        meta["stress"] = stress
        targets = [
            i for i, obj in enumerate(meta["objects"])
            if not obj["is_occluder"] and masks[i].sum() > 0
        ]
        if stress == "late":
            targets = targets[:1]
        targets = targets[:max_targets]
        samples = []
        try:
            for k, target in enumerate(targets):
                expr = gen_expression(meta, target, expression_style)
                samples.append(
                    _ref_sample("ref_video_seg", frames, masks, meta, target, expr,
                                f"{scene_id}o{k}", scene_id)
                )
        except NoDiscriminatingExpression:
            continue
        if samples:
            return samples
    raise SceneOverconstrained("no referable scene found")


def gen_video_sample(seed: int, sample_id: str, **kwargs) -> TaskSample:
    """Single-target convenience wrapper around gen_video_samples."""
    sample = gen_video_samples(seed, sample_id, max_targets=1, **kwargs)[0]
    sample.sample_id = sample_id
    return sample


def gen_image_samples(
    seed: int,
    scene_id: str,
    n_shapes: int | None = None,
    size: int = 64,
    expression_style: str = "short",
    max_targets: int = 3,
) -> list[TaskSample]:
    """Ref-image samples for one scene, one per referable target."""
    rng = np.random.default_rng(seed)
    if n_shapes is None:
        n_shapes = int(rng.integers(1, 4))
    for attempt in range(20):
        scene = sample_scene(rng, n_shapes, 1, size=size, moving=False)
        frames, masks, meta = render_scene(scene)
        targets = [i for i in range(n_shapes) if masks[i].sum() > 0][:max_targets]
        samples = []
        try:
            for k, target in enumerate(targets):
                expr = gen_expression(meta, target, expression_style)
                samples.append(
                    _ref_sample("ref_image_seg", frames, masks, meta, target, expr,
                                f"{scene_id}o{k}", scene_id)
                )
        except NoDiscriminatingExpression:
            continue
        if samples:
            return samples
    raise SceneOverconstrained("no referable scene found")


def gen_image_sample(seed: int, sample_id: str, **kwargs) -> TaskSample:
    """Single-target convenience wrapper around gen_image_samples."""
    sample = gen_image_samples(seed, sample_id, max_targets=1, **kwargs)[0]
    sample.sample_id = sample_id
    return sample


def gen_qa_sample(seed: int, sample_id: str, video: bool = False, size: int = 64) -> TaskSample:
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, 4))
    T = int(rng.integers(8, 13)) if video else 1
    scene = sample_scene(rng, n_shapes, T, size=size, moving=video)
    frames, _, meta = render_scene(scene)
    question, answer = gen_qa(meta, rng)
    return TaskSample(
        task="video_chat" if video else "image_chat",
        visual=VisualInput("video" if video else "image", frames),
        instruction_text=question,
        answer_text=answer,
        sample_id=sample_id,
        meta=meta,
    )


def gen_gcg_sample(seed: int, sample_id: str, size: int = 64) -> TaskSample:
    """Grounded caption: every object phrase paired with a [SEG] marker."""
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(2, 4))
    for attempt in range(20):
        scene = sample_scene(rng, n_shapes, 1, size=size, moving=False)
        frames, masks, meta = render_scene(scene)
        try:
            phrases = [gen_expression(meta, i, "short") for i in range(n_shapes)]
        except NoDiscriminatingExpression:
            continue
        if any(m.sum() == 0 for m in masks):
            continue
        parts = [f"<p> {p} </p> [SEG]" for p in phrases]
        return TaskSample(
            task="gcg",
            visual=VisualInput("image", frames),
            instruction_text="describe every object in the image",
            answer_text=" and ".join(parts),
            gt_masklets=[Masklet(m, object_id=f"obj{i}") for i, m in enumerate(masks)],
            sample_id=sample_id,
            meta=meta,
        )
    raise SceneOverconstrained("no scene with distinct objects found")


def gen_vp_sample(seed: int, sample_id: str, size: int = 64) -> TaskSample:
    """Visual-prompt captioning: a box around one object, caption as answer."""
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, 4))
    scene = sample_scene(rng, n_shapes, 1, size=size, moving=False)
    frames, masks, meta = render_scene(scene)
    target = int(rng.integers(0, n_shapes))
    spec = scene.shapes[target]
    cx, cy = spec.start
    r = spec.half_extent + 2
    x0 = max(0.0, (cx - r) / size)
    y0 = max(0.0, (cy - r) / size)
    x1 = min(1.0, (cx + r) / size)
    y1 = min(1.0, (cy + r) / size)
    obj = meta["objects"][target]
    meta["target_index"] = target
    return TaskSample(
        task="visual_prompt_caption",
        visual=VisualInput("image", frames),
        prompts=[VisualPrompt("box", (x0, y0, x1, y1))],
        instruction_text="describe the marked region",
        answer_text=f"the {obj['size']} {obj['color']} {obj['shape']}",
        sample_id=sample_id,
        meta=meta,
    )


_GENERATORS = {
    "vid": gen_video_samples,
    "img": gen_image_samples,
    "qa": gen_qa_sample,
    "gcg": gen_gcg_sample,
    "vp": gen_vp_sample,
}


def _sub_seed(seed: int, tag: str, i: int) -> int:
    tag_key = zlib.crc32(tag.encode())
    return int(np.random.default_rng([seed, tag_key, i]).integers(0, 2**31))


def dataset_plan(
    n_videos: int = 0,
    n_images: int = 0,
    n_qa: int = 0,
    n_gcg: int = 0,
    n_vp: int = 0,
    seed: int = 0,
    size: int = 64,
    stress: tuple[str, ...] = (),
) -> list[tuple[str, dict]]:
    """Per-scene generator calls; each item is independently seeded from
    (seed, kind, index), so execution order never matters. Referring scenes
    yield one sample per referable target."""
    plan = []
    for i in range(n_videos):
        stress_kind = None
        if stress and i % 3 == 1:
            stress_kind = stress[i % len(stress)]
        plan.append(
            (
                "vid",
                {
                    "seed": _sub_seed(seed, "vid", i),
                    "scene_id": f"vid{i:05d}",
                    "size": size,
                    "stress": stress_kind,
                },
            )
        )
    for i in range(n_images):
        plan.append(
            ("img", {"seed": _sub_seed(seed, "img", i), "scene_id": f"img{i:05d}", "size": size})
        )
    for i in range(n_qa):
        plan.append(
            (
                "qa",
                {
                    "seed": _sub_seed(seed, "qa", i),
                    "sample_id": f"qa{i:05d}",
                    "video": i % 2 == 1,
                    "size": size,
                },
            )
        )
    for i in range(n_gcg):
        plan.append(
            ("gcg", {"seed": _sub_seed(seed, "gcg", i), "sample_id": f"gcg{i:05d}", "size": size})
        )
    for i in range(n_vp):
        plan.append(
            ("vp", {"seed": _sub_seed(seed, "vp", i), "sample_id": f"vp{i:05d}", "size": size})
        )
    return plan


def _run_plan_item(item: tuple[str, dict]) -> list[TaskSample]:
    kind, kwargs = item
    result = _GENERATORS[kind](**kwargs)
    return result if isinstance(result, list) else [result]


def make_dataset(
    n_videos: int = 0,
    n_images: int = 0,
    n_qa: int = 0,
    n_gcg: int = 0,
    n_vp: int = 0,
    seed: int = 0,
    size: int = 64,
    stress: tuple[str, ...] = (),
    workers: int = 1,
) -> list[TaskSample]:
    """The full mixed-task corpus, deterministic for a given seed.

    ``n_videos`` and ``n_images`` count scenes; multi-object referring
    scenes contribute one sample per target.
    """
    plan = dataset_plan(n_videos, n_images, n_qa, n_gcg, n_vp, seed, size, stress)
    if workers <= 1:
        nested = [_run_plan_item(item) for item in plan]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(_run_plan_item, plan, chunksize=16))
    return [sample for group in nested for sample in group]
