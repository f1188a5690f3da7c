"""Domain types and the unified token-level task contract.

Every task family (chat, referring segmentation, grounded caption
generation, visual-prompt captioning) is serialized into one input/output
format: a token sequence with per-position kind labels (text / visual /
visual_prompt), a loss mask over answer positions, and the positions of
``[SEG]``-family tokens whose hidden states later drive the mask decoder.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

TASKS = (
    "image_chat",
    "video_chat",
    "ref_image_seg",
    "ref_video_seg",
    "gcg",
    "visual_prompt_caption",
)
SEG_TASKS = ("ref_image_seg", "ref_video_seg", "gcg")

SEG_TOKEN = "[SEG]"
PHRASE_OPEN = "<p>"
PHRASE_CLOSE = "</p>"

# Markers that tokenize as standalone words even when glued to other text.
_MARKER_RE = re.compile(r"(\[SEG\d*\]|</?p>)")
_PHRASE_RE = re.compile(r"<p>\s*(.*?)\s*</p>", re.DOTALL)


class SequenceTooLongError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Whitespace word split; SEG/phrase markers split off even if attached."""
    words = []
    for chunk in text.split():
        parts = [p for p in _MARKER_RE.split(chunk) if p]
        words.extend(parts)
    return words


def gcg_phrases(text: str) -> list[str]:
    """Phrase spans of a grounded caption, in order of appearance."""
    return [" ".join(m.split()) for m in _PHRASE_RE.findall(text)]


@dataclass
class VisualInput:
    """An image (T=1) or video: frames as a T x H x W x 3 uint8 array."""

    kind: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValueError(f"frames must be T x H x W x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("need at least one frame")
        if self.kind not in ("image", "video"):
            raise ValueError(f"bad kind {self.kind!r}")
        if self.kind == "image" and self.frame_count != 1:
            raise ValueError("image input must have exactly one frame")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class VisualPrompt:
    """A box (x0,y0,x1,y1) or point (x,y) in normalized [0,1] coordinates."""

    kind: str
    coords: tuple
    frame_index: int = 0

    def __post_init__(self):
        self.coords = tuple(float(c) for c in self.coords)
        if self.kind == "box":
            if len(self.coords) != 4:
                raise ValueError("box needs 4 coords")
            x0, y0, x1, y1 = self.coords
            if not (x0 < x1 and y0 < y1):
                raise ValueError("box needs x0<x1 and y0<y1")
        elif self.kind == "point":
            if len(self.coords) != 2:
                raise ValueError("point needs 2 coords")
        else:
            raise ValueError(f"bad prompt kind {self.kind!r}")
        if any(c < 0.0 or c > 1.0 for c in self.coords):
            raise ValueError("coords must lie in [0,1]")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")


@dataclass
class Masklet:
    """Binary spatio-temporal mask for one object: T x H x W values in {0,1}."""

    masks: np.ndarray
    object_id: str = "obj0"

    def __post_init__(self):
        self.masks = np.asarray(self.masks)
        if self.masks.ndim != 3:
            raise ValueError(f"masks must be T x H x W, got {self.masks.shape}")
        vals = np.unique(self.masks)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("mask values must be 0/1")
        self.masks = self.masks.astype(np.uint8)

    @property
    def frame_count(self) -> int:
        return self.masks.shape[0]


@dataclass
class TaskSample:
    """One training/eval unit: visual input + instruction + expected answer
    + ground-truth masklets aligned with the [SEG] markers in the answer."""

    task: str
    visual: VisualInput
    instruction_text: str
    answer_text: str = ""
    prompts: list[VisualPrompt] = field(default_factory=list)
    gt_masklets: list[Masklet] = field(default_factory=list)
    sample_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        n_seg = sum(1 for w in tokenize(self.answer_text) if w == SEG_TOKEN)
        if self.task in SEG_TASKS:
            if n_seg != len(self.gt_masklets):
                raise ValueError(
                    f"{self.task}: {n_seg} [SEG] markers vs {len(self.gt_masklets)} masklets"
                )
        elif self.gt_masklets:
            raise ValueError(f"{self.task}: chat tasks carry no masklets")
        for m in self.gt_masklets:
            if m.masks.shape != (self.visual.frame_count, self.visual.height, self.visual.width):
                raise ValueError("masklet shape must match visual input")
        for p in self.prompts:
            if p.frame_index >= self.visual.frame_count:
                raise ValueError("prompt frame_index out of range")


SPECIAL_TOKENS = (
    "<pad>",
    "<s>",
    "</s>",
    "<unk>",
    "<img>",
    "</img>",
    "<patch>",
    "<vp>",
    "<region>",
    PHRASE_OPEN,
    PHRASE_CLOSE,
    SEG_TOKEN,
)


class Vocab:
    """Word-level vocabulary with a fixed special-token block.

    Special ids occupy the low range and stay stable across save/load; the
    [SEG] family is ``[SEG]`` plus ``[SEG1]..[SEGK]`` for the unique
    token-design variant.
    """

    def __init__(self, words=(), n_seg_variants: int = 8):
        self.n_seg_variants = n_seg_variants
        self._word_to_id: dict[str, int] = {}
        for tok in SPECIAL_TOKENS:
            self._word_to_id[tok] = len(self._word_to_id)
        for k in range(1, n_seg_variants + 1):
            self._word_to_id[f"[SEG{k}]"] = len(self._word_to_id)
        for w in words:
            if w not in self._word_to_id:
                self._word_to_id[w] = len(self._word_to_id)
        self._id_to_word = {i: w for w, i in self._word_to_id.items()}

    @classmethod
    def build(cls, texts, n_seg_variants: int = 8) -> "Vocab":
        words = []
        seen = set()
        for text in texts:
            for w in tokenize(text):
                if w not in seen:
                    seen.add(w)
                    words.append(w)
        return cls(sorted(words), n_seg_variants=n_seg_variants)

    # -- special ids ---------------------------------------------------
    @property
    def pad_id(self) -> int:
        return self._word_to_id["<pad>"]

    @property
    def bos_id(self) -> int:
        return self._word_to_id["<s>"]

    @property
    def eos_id(self) -> int:
        return self._word_to_id["</s>"]

    @property
    def unk_id(self) -> int:
        return self._word_to_id["<unk>"]

    @property
    def img_start_id(self) -> int:
        return self._word_to_id["<img>"]

    @property
    def img_end_id(self) -> int:
        return self._word_to_id["</img>"]

    @property
    def patch_id(self) -> int:
        return self._word_to_id["<patch>"]

    @property
    def vp_id(self) -> int:
        return self._word_to_id["<vp>"]

    @property
    def region_id(self) -> int:
        return self._word_to_id["<region>"]

    @property
    def seg_id(self) -> int:
        return self._word_to_id[SEG_TOKEN]

    def seg_variant_id(self, k: int) -> int:
        if not 1 <= k <= self.n_seg_variants:
            raise ValueError(f"[SEG{k}] not configured (K={self.n_seg_variants})")
        return self._word_to_id[f"[SEG{k}]"]

    @property
    def seg_family_ids(self) -> set[int]:
        ids = {self.seg_id}
        ids.update(self.seg_variant_id(k) for k in range(1, self.n_seg_variants + 1))
        return ids

    def __len__(self) -> int:
        return len(self._word_to_id)

    def __contains__(self, word: str) -> bool:
        return word in self._word_to_id

    def encode_word(self, word: str) -> int:
        return self._word_to_id.get(word, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.encode_word(w) for w in tokenize(text)]

    def decode(self, ids) -> str:
        return " ".join(self._id_to_word.get(int(i), "<unk>") for i in ids)

    # -- persistence ---------------------------------------------------
    def save(self, path) -> None:
        blob = {
            "n_seg_variants": self.n_seg_variants,
            "word_to_id": self._word_to_id,
        }
        with open(path, "w") as fh:
            json.dump(blob, fh, indent=0, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path) as fh:
            blob = json.load(fh)
        vocab = cls.__new__(cls)
        vocab.n_seg_variants = blob["n_seg_variants"]
        vocab._word_to_id = {w: int(i) for w, i in blob["word_to_id"].items()}
        vocab._id_to_word = {i: w for w, i in vocab._word_to_id.items()}
        return vocab


KIND_TEXT = 0
KIND_VISUAL = 1
KIND_VISUAL_PROMPT = 2


@dataclass
class TokenSequence:
    """Interleaved text/visual token ids with role spans.

    ``loss_mask`` is true exactly on answer positions (answer words plus the
    closing EOS); ``seg_positions`` index the SEG-family tokens within the
    answer region.
    """

    ids: list[int]
    kinds: list[int]
    loss_mask: list[bool]
    seg_positions: list[int]
    answer_start: int

    def __post_init__(self):
        if not (len(self.ids) == len(self.kinds) == len(self.loss_mask)):
            raise ValueError("ids/kinds/loss_mask lengths differ")
        for pos in self.seg_positions:
            if not self.loss_mask[pos]:
                raise ValueError("seg position outside the answer region")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_visual(self) -> int:
        return sum(1 for k in self.kinds if k == KIND_VISUAL)

    @property
    def n_visual_prompts(self) -> int:
        return sum(1 for k in self.kinds if k == KIND_VISUAL_PROMPT)


def default_keyframe_count(frame_count: int, k: int = 5) -> int:
    return 1 if frame_count == 1 else min(k, frame_count)


def _expand_seg_markers(words: list[str], token_design: str, n_keyframes: int) -> list[str]:
    if token_design == "single":
        return list(words)
    out = []
    for w in words:
        if w == SEG_TOKEN:
            if token_design == "repetitive":
                out.extend([SEG_TOKEN] * n_keyframes)
            else:  # unique
                out.extend(f"[SEG{k}]" for k in range(1, n_keyframes + 1))
        else:
            out.append(w)
    return out


def format_sample(
    sample: TaskSample,
    vocab: Vocab,
    token_design: str = "single",
    *,
    n_keyframes: int | None = None,
    patch_tokens_per_frame: int = 64,
    max_len: int = 512,
    include_answer: bool = True,
) -> TokenSequence:
    """Serialize a TaskSample into the unified token contract.

    Layout: BOS <img> <patch>*V </img> (<vp> <region>)* instruction answer EOS,
    where V = n_keyframes * patch_tokens_per_frame placeholder positions that
    the model fills with visual tokens, and each visual prompt contributes a
    marker plus one pooled region-feature placeholder.

    For ref_video_seg the [SEG] markers in the answer expand per
    ``token_design``: single -> one per object, repetitive -> one per keyframe
    (same id), unique -> [SEG1]..[SEGM] one per keyframe.
    """
    if token_design not in ("single", "repetitive", "unique"):
        raise ValueError(f"unknown token design {token_design!r}")
    if n_keyframes is None:
        n_keyframes = default_keyframe_count(sample.visual.frame_count)
    if n_keyframes < 1 or n_keyframes > sample.visual.frame_count:
        raise ValueError("n_keyframes out of range")
    if token_design == "unique" and n_keyframes > vocab.n_seg_variants:
        raise ValueError(
            f"unique design needs {n_keyframes} SEG variants, vocab has {vocab.n_seg_variants}"
        )

    ids = [vocab.bos_id, vocab.img_start_id]
    kinds = [KIND_TEXT, KIND_TEXT]
    n_vis = n_keyframes * patch_tokens_per_frame
    ids.extend([vocab.patch_id] * n_vis)
    kinds.extend([KIND_VISUAL] * n_vis)
    ids.append(vocab.img_end_id)
    kinds.append(KIND_TEXT)

    for _ in sample.prompts:
        ids.append(vocab.vp_id)
        kinds.append(KIND_TEXT)
        ids.append(vocab.region_id)
        kinds.append(KIND_VISUAL_PROMPT)

    for w in tokenize(sample.instruction_text):
        ids.append(vocab.encode_word(w))
        kinds.append(KIND_TEXT)

    answer_start = len(ids)
    loss_mask = [False] * answer_start
    seg_positions = []
    if include_answer and sample.answer_text.strip():
        answer_words = tokenize(sample.answer_text)
        if sample.task == "ref_video_seg":
            answer_words = _expand_seg_markers(answer_words, token_design, n_keyframes)
        seg_ids = vocab.seg_family_ids
        for w in answer_words:
            wid = vocab.encode_word(w)
            if wid in seg_ids:
                seg_positions.append(len(ids))
            ids.append(wid)
            kinds.append(KIND_TEXT)
            loss_mask.append(True)
        ids.append(vocab.eos_id)
        kinds.append(KIND_TEXT)
        loss_mask.append(True)

    if len(ids) > max_len:
        raise SequenceTooLongError(f"sequence too long: {len(ids)} > {max_len}")
    return TokenSequence(ids, kinds, loss_mask, seg_positions, answer_start)


def parse_answer(generated_ids, vocab: Vocab) -> tuple[str, list[int]]:
    """Detokenize a generation and locate SEG-family tokens.

    Returns the answer text (SEG markers inline, EOS stripped) and the
    indices of SEG-family tokens within ``generated_ids``, in order. No SEG
    tokens is not an error; callers decide what an empty list signals.
    """
    ids = [int(i) for i in generated_ids]
    if vocab.eos_id in ids:
        ids = ids[: ids.index(vocab.eos_id)]
    seg_ids = vocab.seg_family_ids
    seg_positions = [i for i, t in enumerate(ids) if t in seg_ids]
    return vocab.decode(ids), seg_positions
