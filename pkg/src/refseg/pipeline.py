"""High-level orchestration: prewarm, two-stage training, and evaluation.

Training runs in two stages that stand in for the pretrained components the
full-scale recipe inherits: a text-only LM pretrain (full finetune), then
joint co-training under the default freeze policy (LoRA on the LM, frozen
encoder/memory, finetuned decoder).
"""

from __future__ import annotations

import os

import torch

from . import corpus as corpus_io
from .checkpoint import ModelBundle
from .metrics import eval_dataset
from .refvos import SamplingStrategy, build_prefix, run_ref_image, run_refvos
from .tasks import TaskSample, parse_answer
from .training import (
    COTRAIN_FAMILY_WEIGHTS,
    FreezePolicy,
    TrainConfig,
    pretrain_lm,
    prewarm_tracker,
    run_training,
)


def prewarm_pipeline(
    corpus_dir: str,
    out_dir: str,
    seed: int = 0,
    epochs: int = 3,
    learning_rate: float = 1e-3,
    lm_overrides: dict | None = None,
    sam_overrides: dict | None = None,
) -> ModelBundle:
    """Create a fresh model bundle and prewarm its tracker stack on the
    corpus' video samples; saves the checkpoint to ``out_dir``."""
    vocab = corpus_io.load_vocab(corpus_dir)
    bundle = ModelBundle.create(vocab, lm_overrides, sam_overrides, seed=seed)
    videos = corpus_io.read_corpus(corpus_dir, split="train", tasks=("ref_video_seg",))
    cfg = TrainConfig(learning_rate=learning_rate, epochs=epochs, seed=seed, warmup_ratio=0.02)
    os.makedirs(out_dir, exist_ok=True)
    prewarm_tracker(bundle, videos, cfg, log_path=os.path.join(out_dir, "train_log.jsonl"))
    cfg.save(os.path.join(out_dir, "train_config.txt"))
    bundle.save(out_dir, extra={"stage": "prewarm"})
    return bundle


def train_pipeline(
    corpus_dir: str,
    out_dir: str,
    ckpt_in: str | None = None,
    seed: int = 0,
    lm_epochs: int = 9,
    cotrain_epochs: int = 13,
    lm_lr: float = 2e-3,
    cotrain_lr: float = 1.5e-3,
    batch_size: int = 16,
    token_design: str = "single",
    keyframe_strategy: str = "uniform_5",
    decoder_lr_scale: float = 0.2,
    exclude_tasks: tuple = (),
    policy: FreezePolicy | None = None,
    bundle: ModelBundle | None = None,
) -> ModelBundle:
    """LM text pretrain followed by joint co-training; saves ``out_dir``."""
    if bundle is None:
        if ckpt_in is None:
            raise ValueError("need either a bundle or a checkpoint to start from")
        bundle = ModelBundle.load(ckpt_in)
    samples = corpus_io.read_corpus(corpus_dir, split="train")
    if exclude_tasks:
        samples = [s for s in samples if s.task not in exclude_tasks]
    os.makedirs(out_dir, exist_ok=True)

    lm_cfg = TrainConfig(
        learning_rate=lm_lr,
        epochs=lm_epochs,
        batch_size=batch_size,
        seed=seed,
        token_design=token_design,
        keyframe_strategy=keyframe_strategy,
    )
    pretrain_lm(bundle, samples, lm_cfg, log_path=os.path.join(out_dir, "train_log.jsonl"))

    co_cfg = TrainConfig(
        learning_rate=cotrain_lr,
        epochs=cotrain_epochs,
        batch_size=batch_size,
        seed=seed + 1,
        token_design=token_design,
        keyframe_strategy=keyframe_strategy,
        decoder_lr_scale=decoder_lr_scale,
    )
    policy = policy or FreezePolicy()
    run_training(
        bundle,
        samples,
        co_cfg,
        policy,
        with_masks=True,
        log_path=os.path.join(out_dir, "train_log.jsonl"),
        checkpoint_dir=out_dir,
        family_weights=COTRAIN_FAMILY_WEIGHTS,
    )
    co_cfg.save(os.path.join(out_dir, "train_config.txt"))
    bundle.save(out_dir, extra={"stage": "cotrain", "token_design": token_design})
    return bundle


@torch.no_grad()
def chat_exact_match(bundle: ModelBundle, samples: list[TaskSample], max_new: int = 12) -> float:
    """Fraction of chat samples whose greedy generation reproduces the
    templated answer exactly (whitespace-normalized)."""
    from .refvos import select_keyframes

    if not samples:
        return 0.0
    hits = 0
    for sample in samples:
        keyframes = (
            [0]
            if sample.visual.frame_count == 1
            else select_keyframes(sample.visual.frame_count, SamplingStrategy("uniform_k", 5))
        )
        prefix = build_prefix(sample, bundle, len(keyframes))
        visual_tokens = bundle.lm.encode_visual(sample.visual, keyframes)
        prompt_tokens = None
        if sample.prompts:
            prompt_tokens = torch.stack(
                [bundle.lm.encode_visual_prompt(sample.visual, p) for p in sample.prompts]
            )
        out = bundle.lm.generate(
            prefix, visual_tokens, prompt_tokens, max_new=max_new, eos_id=bundle.vocab.eos_id
        )
        text, _ = parse_answer(out, bundle.vocab)
        if text.split() == sample.answer_text.split():
            hits += 1
    return hits / len(samples)


@torch.no_grad()
def eval_bundle(
    bundle: ModelBundle,
    corpus_dir: str,
    split: str = "val",
    strategy: SamplingStrategy | None = None,
    token_design: str = "single",
    max_videos: int | None = None,
    max_images: int | None = None,
    max_chat: int | None = None,
) -> dict:
    """Held-out metrics: image cIoU, video J&F, chat exact match."""
    out: dict = {}
    images = corpus_io.read_corpus(corpus_dir, split=split, tasks=("ref_image_seg",))
    if max_images is not None:
        images = images[:max_images]
    if images:
        pairs = []
        for sample in images:
            pred, _ = run_ref_image(sample.visual, _expression_of(sample), bundle)
            pairs.append((pred, sample.gt_masklets[0].masks[0]))
        report = eval_dataset(image_pairs=pairs)
        out["image_ciou"] = report.ciou
        out["n_images"] = len(pairs)

    videos = corpus_io.read_corpus(corpus_dir, split=split, tasks=("ref_video_seg",))
    if max_videos is not None:
        videos = videos[:max_videos]
    if videos:
        pairs = []
        for sample in videos:
            pred = run_refvos(
                sample.visual,
                _expression_of(sample),
                bundle,
                strategy=strategy,
                token_design=token_design,
            )
            pairs.append((pred.masks, sample.gt_masklets[0].masks))
        report = eval_dataset(video_pairs=pairs)
        out["video_j"] = report.mean_j
        out["video_f"] = report.mean_f
        out["video_jf"] = report.jf
        out["n_videos"] = len(pairs)

    chats = corpus_io.read_corpus(corpus_dir, split=split, tasks=("image_chat", "video_chat"))
    if max_chat is not None:
        chats = chats[:max_chat]
    if chats:
        out["chat_exact_match"] = chat_exact_match(bundle, chats)
        out["n_chat"] = len(chats)
    return out


def _expression_of(sample: TaskSample) -> str:
    """Recover the raw expression from the stored instruction template."""
    prefix = "please segment "
    text = sample.instruction_text
    return text[len(prefix):] if text.startswith(prefix) else text


def reinit_lm(bundle: ModelBundle, seed: int) -> None:
    """Fresh random LM weights (same config); used by ablation reruns so
    seeds vary the full training trajectory."""
    from .lm import MicroLM

    torch.manual_seed(seed)
    bundle.lm = MicroLM(bundle.lm.cfg)


def late_entry_eval_set(seed: int, n_videos: int = 12, frame_count: int = 16):
    """Held-out synthetic videos whose target appears after frame 5, so
    first-k keyframes never see it."""
    from .synth import gen_video_sample

    videos = []
    for i in range(n_videos):
        videos.append(
            gen_video_sample(
                seed * 100003 + i,
                f"late{seed}_{i:03d}",
                frame_count=frame_count,
                stress="late",
            )
        )
    return videos


@torch.no_grad()
def _jf_over(bundle: ModelBundle, videos, strategy: SamplingStrategy, token_design="single"):
    pairs = []
    for sample in videos:
        pred = run_refvos(
            sample.visual, _expression_of(sample), bundle, strategy, token_design=token_design
        )
        pairs.append((pred.masks, sample.gt_masklets[0].masks))
    return eval_dataset(video_pairs=pairs).jf


def ablate_sampling(bundle: ModelBundle, seeds=(0, 1, 2), n_videos: int = 12) -> dict:
    """Uniform-k vs first-k keyframe sampling on late-entry videos."""
    rows = []
    for seed in seeds:
        videos = late_entry_eval_set(seed, n_videos)
        uniform = _jf_over(bundle, videos, SamplingStrategy("uniform_k", 5))
        first = _jf_over(bundle, videos, SamplingStrategy("first_k", 5))
        rows.append(
            {
                "seed": seed,
                "uniform_5_jf": uniform,
                "first_5_jf": first,
                "gap": uniform - first,
            }
        )
    return {"axis": "sampling", "rows": rows}


def ablate_seg_design(
    corpus_dir: str,
    prewarm_ckpt: str,
    work_dir: str,
    seeds=(0, 1, 2),
    designs=("single", "unique"),
    lm_epochs: int = 6,
    cotrain_epochs: int = 6,
    batch_size: int = 16,
    max_eval_videos: int = 24,
) -> dict:
    """Reduced-budget SEG-token design comparison on held-out video J&F.

    Per design the LM is pretrained once (text formatting depends on the
    design); the seeds then vary the co-training trajectory (adapter init
    and batch order), which is where the designs actually diverge.
    """
    import copy

    from .training import COTRAIN_FAMILY_WEIGHTS, run_training

    rows = {seed: {"seed": seed} for seed in seeds}
    for design in designs:
        base = ModelBundle.load(prewarm_ckpt)
        reinit_lm(base, seeds[0])
        samples = corpus_io.read_corpus(corpus_dir, split="train")
        lm_cfg = TrainConfig(
            learning_rate=2e-3, epochs=lm_epochs, batch_size=batch_size,
            seed=seeds[0], token_design=design,
        )
        pretrain_lm(base, samples, lm_cfg)
        for seed in seeds:
            bundle = copy.deepcopy(base)
            co_cfg = TrainConfig(
                learning_rate=1.5e-3, epochs=cotrain_epochs, batch_size=batch_size,
                seed=seed + 1, token_design=design, decoder_lr_scale=0.2,
            )
            out_dir = os.path.join(work_dir, f"{design}_seed{seed}")
            os.makedirs(out_dir, exist_ok=True)
            run_training(
                bundle, samples, co_cfg, FreezePolicy(), with_masks=True,
                log_path=os.path.join(out_dir, "train_log.jsonl"),
                family_weights=COTRAIN_FAMILY_WEIGHTS,
            )
            bundle.save(out_dir, extra={"stage": "ablate", "token_design": design})
            metrics = eval_bundle(
                bundle, corpus_dir, token_design=design, max_videos=max_eval_videos,
                max_images=0, max_chat=0,
            )
            rows[seed][f"{design}_jf"] = metrics.get("video_jf")
    return {"axis": "seg_design", "rows": [rows[s] for s in seeds]}
