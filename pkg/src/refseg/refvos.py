"""Referring video object segmentation inference.

Keyframes are encoded for the LM together with the expression; the LM
generates an answer whose SEG hidden states become decoder prompts. Keyframe
masks are decoded from those prompts while building the memory bank; every
other frame gets its mask by memory propagation (frames before the first
keyframe are propagated in reverse from the first keyframe's memory state).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import ModelBundle
from .sam import MemoryBank, MemoryEntry, update_memory
from .tasks import Masklet, TaskSample, TokenSequence, VisualInput, format_sample, parse_answer


@dataclass
class SamplingStrategy:
    kind: str = "uniform_k"  # first_k | uniform_k
    k: int = 5

    def __post_init__(self):
        if self.kind not in ("first_k", "uniform_k"):
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def parse(cls, name: str) -> "SamplingStrategy":
        """Parse names like "uniform_5" or "first_3"."""
        kind, _, k = name.rpartition("_")
        return cls(kind=f"{kind}_k", k=int(k))


def select_keyframes(frame_count: int, strategy: SamplingStrategy) -> list[int]:
    """Keyframe indices; uniform_k uses round-half-up of i*(T-1)/(k-1)."""
    if frame_count <= 0:
        raise ValueError("frame_count must be positive")
    k = min(strategy.k, frame_count)
    if strategy.kind == "first_k":
        return list(range(k))
    if k == 1:
        return [0]
    raw = [int(np.floor(i * (frame_count - 1) / (k - 1) + 0.5)) for i in range(k)]
    dedup = sorted(set(raw))
    if len(dedup) < k:
        return list(range(frame_count))
    return dedup


@dataclass
class RunTrace:
    """Instrumentation for one inference run: which path produced each frame
    and how large the memory bank ever got."""

    keyframes: list[int] = field(default_factory=list)
    frame_source: dict = field(default_factory=dict)  # frame -> "seg_prompt" | "memory"
    max_bank_len: int = 0
    no_object: bool = False
    answer_text: str = ""

    def observe_bank(self, bank: MemoryBank) -> None:
        self.max_bank_len = max(self.max_bank_len, len(bank))


def build_prefix(
    sample: TaskSample,
    bundle: ModelBundle,
    n_keyframes: int,
    token_design: str = "single",
) -> TokenSequence:
    """The instruction-only part of the unified sequence (no answer)."""
    return format_sample(
        sample,
        bundle.vocab,
        token_design,
        n_keyframes=n_keyframes,
        patch_tokens_per_frame=bundle.lm.cfg.patches_per_frame,
        max_len=bundle.lm.cfg.max_len,
        include_answer=False,
    )


@torch.no_grad()
def run_refvos(
    video: VisualInput,
    expression: str,
    bundle: ModelBundle,
    strategy: SamplingStrategy | None = None,
    token_design: str = "single",
    max_new: int = 16,
    update_memory_during_propagation: bool = True,
    return_trace: bool = False,
):
    """Segment the referred object across a video; returns a full-length
    Masklet (all zeros, flagged, when the answer contains no SEG token)."""
    strategy = strategy or SamplingStrategy()
    T = video.frame_count
    H, W = video.height, video.width
    keyframes = select_keyframes(T, strategy)
    trace = RunTrace(keyframes=list(keyframes))

    sample = TaskSample(
        task="ref_video_seg" if T > 1 else "ref_image_seg",
        visual=video,
        instruction_text=f"please segment {expression}",
    )
    prefix = build_prefix(sample, bundle, len(keyframes), token_design)
    visual_tokens = bundle.lm.encode_visual(video, keyframes)
    generated = bundle.lm.generate(
        prefix, visual_tokens, max_new=max_new, eos_id=bundle.vocab.eos_id
    )
    answer_text, gen_seg_positions = parse_answer(generated, bundle.vocab)
    trace.answer_text = answer_text

    masks = np.zeros((T, H, W), dtype=np.uint8)
    if not gen_seg_positions:
        trace.no_object = True
        masklet = Masklet(masks, object_id="none")
        return (masklet, trace) if return_trace else masklet

    # hidden states over prefix + generated answer (teacher-forced re-read)
    full_ids = prefix.ids + generated
    full_kinds = prefix.kinds + [0] * len(generated)
    full_mask = prefix.loss_mask + [True] * len(generated)
    seg_positions = [len(prefix) + p for p in gen_seg_positions]
    full_seq = TokenSequence(full_ids, full_kinds, full_mask, seg_positions, prefix.answer_start)
    _, hidden = bundle.lm.forward(full_seq, visual_tokens)
    seg_hidden = bundle.lm.extract_seg_hidden(hidden, seg_positions)

    def prompt_for_keyframe(pos: int) -> torch.Tensor:
        if token_design == "single":
            return bundle.sam.project_seg(seg_hidden[0])
        idx = min(pos, seg_hidden.shape[0] - 1)
        return bundle.sam.project_seg(seg_hidden[idx])

    bank = MemoryBank(capacity=bundle.sam.cfg.memory_capacity)
    bank_after_first = None
    for pos, frame_idx in enumerate(keyframes):
        features = bundle.sam.encode_frame(video.frames[frame_idx])
        logits, mask = bundle.sam.decode_mask(features, prompt_for_keyframe(pos))
        masks[frame_idx] = _to_frame_mask(mask, H, W)
        trace.frame_source[frame_idx] = "seg_prompt"
        bank = update_memory(bank, MemoryEntry(features, mask, frame_idx))
        trace.observe_bank(bank)
        if bank_after_first is None:
            bank_after_first = bank

    # backward fill for frames before the first keyframe
    first_kf = keyframes[0]
    back_bank = bank_after_first
    for frame_idx in range(first_kf - 1, -1, -1):
        features = bundle.sam.encode_frame(video.frames[frame_idx])
        logits, mask = bundle.sam.propagate_mask(features, back_bank)
        masks[frame_idx] = _to_frame_mask(mask, H, W)
        trace.frame_source[frame_idx] = "memory"
        if update_memory_during_propagation:
            back_bank = update_memory(back_bank, MemoryEntry(features, mask, frame_idx))
            trace.observe_bank(back_bank)

    # forward fill for the remaining frames
    keyset = set(keyframes)
    for frame_idx in range(first_kf + 1, T):
        if frame_idx in keyset:
            continue
        features = bundle.sam.encode_frame(video.frames[frame_idx])
        logits, mask = bundle.sam.propagate_mask(features, bank)
        masks[frame_idx] = _to_frame_mask(mask, H, W)
        trace.frame_source[frame_idx] = "memory"
        if update_memory_during_propagation:
            bank = update_memory(bank, MemoryEntry(features, mask, frame_idx))
            trace.observe_bank(bank)

    masklet = Masklet(masks, object_id="pred")
    return (masklet, trace) if return_trace else masklet


def _to_frame_mask(mask: np.ndarray, H: int, W: int) -> np.ndarray:
    """Decoder output is at the decoder's input side; nearest-resize back to
    the source frame size when they differ."""
    if mask.shape == (H, W):
        return mask
    rows = np.minimum((np.arange(H) * mask.shape[0] / H).astype(int), mask.shape[0] - 1)
    cols = np.minimum((np.arange(W) * mask.shape[1] / W).astype(int), mask.shape[1] - 1)
    return mask[rows][:, cols]


@torch.no_grad()
def run_ref_image(image: VisualInput, expression: str, bundle: ModelBundle, max_new: int = 16):
    """Image referring segmentation: the T=1 degenerate case."""
    masklet, trace = run_refvos(
        image, expression, bundle, SamplingStrategy("first_k", 1), return_trace=True
    )
    return masklet.masks[0], trace
