"""Freeze/LoRA policy, the joint train step, tracker prewarm, and the
co-training loop over mixed task batches.

The default policy trains the LM through LoRA adapters only, freezes the
frame encoder and memory module, and finetunes the mask decoder (the SEG
projector counts as decoder-side). Because every module starts from random
init rather than pretrained weights, two prewarm stages make the frozen
parts functional before the policy applies: ``prewarm_tracker`` trains the
perception stack on class-agnostic tracking, and ``pretrain_lm`` trains the
LM with text loss only.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import ModelBundle
from .losses import mask_loss, text_loss
from .refvos import SamplingStrategy, select_keyframes
from .sam import MemoryBank, MemoryEntry, update_memory
from .tasks import TaskSample, format_sample

POLICY_CHOICES = {
    "mllm": ("lora", "full", "frozen"),
    "sam_encoder": ("frozen", "finetune"),
    "sam_decoder": ("finetune", "frozen"),
    "sam_memory": ("frozen", "finetune"),
}


class DivergenceError(RuntimeError):
    pass


@dataclass
class FreezePolicy:
    mllm: str = "lora"
    sam_encoder: str = "frozen"
    sam_decoder: str = "finetune"
    sam_memory: str = "frozen"

    def __post_init__(self):
        for name, choices in POLICY_CHOICES.items():
            if getattr(self, name) not in choices:
                raise ValueError(f"{name} must be one of {choices}")

    def classify(self, bundle: ModelBundle) -> dict[str, bool]:
        """Map every parameter name (lm/... and sam/...) to trainability.
        Raises if any parameter falls outside the known component groups."""
        table: dict[str, bool] = {}
        for name, _ in bundle.lm.named_parameters():
            is_lora = "lora_a" in name or "lora_b" in name
            if self.mllm == "full":
                trainable = True
            elif self.mllm == "frozen":
                trainable = False
            else:
                trainable = is_lora
            table[f"lm/{name}"] = trainable
        for name, _ in bundle.sam.named_parameters():
            if name.startswith("encoder."):
                trainable = self.sam_encoder == "finetune"
            elif name.startswith(("decoder.", "projector.")):
                trainable = self.sam_decoder == "finetune"
            elif name.startswith("memory."):
                trainable = self.sam_memory == "finetune"
            else:
                raise ValueError(f"parameter sam/{name} not covered by the freeze policy")
            table[f"sam/{name}"] = trainable
        return table

    def apply(self, bundle: ModelBundle) -> list[torch.nn.Parameter]:
        """Set requires_grad per the policy; returns trainable parameters."""
        table = self.classify(bundle)
        trainable = []
        for prefix, module in (("lm/", bundle.lm), ("sam/", bundle.sam)):
            for name, param in module.named_parameters():
                on = table[prefix + name]
                param.requires_grad_(on)
                if on:
                    trainable.append(param)
        return trainable


@dataclass
class TrainConfig:
    learning_rate: float = 4e-5
    weight_decay: float = 0.05
    warmup_ratio: float = 0.05
    grad_clip_norm: float = 1.0
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    max_video_frames: int = 12  # prewarm truncation
    token_design: str = "single"
    keyframe_strategy: str = "uniform_5"
    # mask-decoder params train at learning_rate * this scale; < 1 protects
    # the propagation path the decoder shares with the memory module
    decoder_lr_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            for key, val in vars(self).items():
                fh.write(f"{key}={val}\n")

    @classmethod
    def load(cls, path: str) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in cls.__dataclass_fields__.values()}  # noqa: F841
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, val = line.partition("=")
                default = getattr(cls(), key)
                kwargs[key] = type(default)(val) if not isinstance(default, str) else val
        return cls(**kwargs)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params,
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )


def make_policy_optimizer(bundle: ModelBundle, policy: FreezePolicy, cfg: TrainConfig):
    """AdamW over the policy-trainable parameters, with the mask decoder in
    its own group scaled by ``cfg.decoder_lr_scale``. Returns (params, opt)."""
    table = policy.classify(bundle)
    decoder_params, other_params = [], []
    for prefix, module in (("lm/", bundle.lm), ("sam/", bundle.sam)):
        for name, param in module.named_parameters():
            if not table[prefix + name]:
                continue
            if (prefix + name).startswith("sam/decoder."):
                decoder_params.append(param)
            else:
                other_params.append(param)
    groups = []
    if other_params:
        groups.append({"params": other_params, "lr_scale": 1.0})
    if decoder_params:
        groups.append({"params": decoder_params, "lr_scale": cfg.decoder_lr_scale})
    optimizer = torch.optim.AdamW(
        groups, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8,
        weight_decay=cfg.weight_decay,
    )
    return decoder_params + other_params, optimizer


def warmup_lr(base_lr: float, step: int, total_steps: int, warmup_ratio: float) -> float:
    warmup_steps = max(1, int(total_steps * warmup_ratio))
    return base_lr * min(1.0, (step + 1) / warmup_steps)


# ---------------------------------------------------------------------------
# per-sample loss assembly
# ---------------------------------------------------------------------------


def _keyframes_for(sample: TaskSample, cfg: TrainConfig) -> list[int]:
    if sample.visual.frame_count == 1:
        return [0]
    return select_keyframes(
        sample.visual.frame_count, SamplingStrategy.parse(cfg.keyframe_strategy)
    )


def _decode_jobs(sample: TaskSample, seq, keyframes, token_design: str):
    """(seg_index, masklet_index, frame_index) triples pairing every SEG
    position with the frame it decodes and the ground truth it trains on."""
    jobs = []
    n_obj = len(sample.gt_masklets)
    if n_obj == 0:
        return jobs
    if sample.task == "ref_video_seg" and token_design in ("repetitive", "unique"):
        m = len(keyframes)
        assert len(seq.seg_positions) == n_obj * m
        for obj in range(n_obj):
            for k, frame_idx in enumerate(keyframes):
                jobs.append((obj * m + k, obj, frame_idx))
    elif sample.task == "ref_video_seg":
        for obj in range(n_obj):
            for frame_idx in keyframes:
                jobs.append((obj, obj, frame_idx))
    else:  # image tasks: one SEG per object, frame 0
        for obj in range(n_obj):
            jobs.append((obj, obj, 0))
    return jobs


def _prepare_sample(
    bundle: ModelBundle, sample: TaskSample, cfg: TrainConfig, cache: dict | None = None
):
    keyframes = _keyframes_for(sample, cfg)
    seq = format_sample(
        sample,
        bundle.vocab,
        cfg.token_design,
        n_keyframes=len(keyframes),
        patch_tokens_per_frame=bundle.lm.cfg.patches_per_frame,
        max_len=bundle.lm.cfg.max_len,
    )
    vis_cache = cache.get("visual") if cache else None
    if vis_cache is not None and sample.sample_id in vis_cache:
        visual_tokens = vis_cache[sample.sample_id]
    else:
        visual_tokens = bundle.lm.encode_visual(sample.visual, keyframes)
        if vis_cache is not None:
            visual_tokens = visual_tokens.detach()
            vis_cache[sample.sample_id] = visual_tokens
    prompt_tokens = None
    if sample.prompts:
        prompt_tokens = torch.stack(
            [bundle.lm.encode_visual_prompt(sample.visual, p) for p in sample.prompts]
        )
    return seq, keyframes, visual_tokens, prompt_tokens


def _mask_terms_for(
    bundle: ModelBundle,
    sample: TaskSample,
    seq,
    keyframes,
    seg_hidden: torch.Tensor,
    cfg: TrainConfig,
    cache: dict | None = None,
) -> torch.Tensor | None:
    jobs = _decode_jobs(sample, seq, keyframes, cfg.token_design)
    per_mask = []
    feat_cache = cache.get("features") if cache else None
    features_by_frame: dict[int, object] = {}
    for seg_idx, obj_idx, frame_idx in jobs:
        if frame_idx not in features_by_frame:
            key = (sample.sample_id, frame_idx)
            if feat_cache is not None and key in feat_cache:
                features_by_frame[frame_idx] = feat_cache[key]
            else:
                features_by_frame[frame_idx] = bundle.sam.encode_frame(
                    sample.visual.frames[frame_idx]
                )
                if feat_cache is not None:
                    feat_cache[key] = features_by_frame[frame_idx]
        prompt = bundle.sam.project_seg(seg_hidden[seg_idx])
        mask_logits = bundle.sam.decoder(features_by_frame[frame_idx].fmap, prompt)
        gt = _gt_at_decoder_side(sample.gt_masklets[obj_idx].masks[frame_idx], bundle)
        per_mask.append(mask_loss(mask_logits, gt))
    return torch.stack(per_mask).mean() if per_mask else None


def sample_losses(
    bundle: ModelBundle,
    sample: TaskSample,
    cfg: TrainConfig,
    with_masks: bool = True,
):
    """(text_loss, mask_loss or None) for one sample, with gradients."""
    seq, keyframes, visual_tokens, prompt_tokens = _prepare_sample(bundle, sample, cfg)
    logits, hidden = bundle.lm.forward(seq, visual_tokens, prompt_tokens)
    t_loss = text_loss(logits, seq)
    if not with_masks or not sample.gt_masklets:
        return t_loss, None
    seg_hidden = bundle.lm.extract_seg_hidden(hidden, seq.seg_positions)
    return t_loss, _mask_terms_for(bundle, sample, seq, keyframes, seg_hidden, cfg)


def batch_losses(
    bundle: ModelBundle,
    batch: list[TaskSample],
    cfg: TrainConfig,
    with_masks: bool = True,
    cache: dict | None = None,
):
    """Text and mask loss terms for a whole batch via one padded LM forward.

    Right padding is safe under the causal mask: padded positions never feed
    a real position, and their logits are never read.
    """
    preps = [_prepare_sample(bundle, s, cfg, cache) for s in batch]
    embs = [
        bundle.lm.embed_sequence(seq, vis, vp) for (seq, _, vis, vp) in preps
    ]
    n_max = max(e.shape[0] for e in embs)
    padded = embs[0].new_zeros((len(embs), n_max, embs[0].shape[1]))
    for i, e in enumerate(embs):
        padded[i, : e.shape[0]] = e
    logits, hidden = bundle.lm.forward_embedded(padded)
    text_terms, mask_terms = [], []
    for i, (sample, (seq, keyframes, _, _)) in enumerate(zip(batch, preps)):
        text_terms.append(text_loss(logits[i, : len(seq)], seq))
        if with_masks and sample.gt_masklets:
            seg_hidden = bundle.lm.extract_seg_hidden(hidden[i, : len(seq)], seq.seg_positions)
            m = _mask_terms_for(bundle, sample, seq, keyframes, seg_hidden, cfg, cache)
            if m is not None:
                mask_terms.append(m)
    return text_terms, mask_terms


def _gt_at_decoder_side(mask: np.ndarray, bundle: ModelBundle) -> torch.Tensor:
    side = bundle.sam.cfg.input_side
    if mask.shape != (side, side):
        rows = np.minimum((np.arange(side) * mask.shape[0] / side).astype(int), mask.shape[0] - 1)
        cols = np.minimum((np.arange(side) * mask.shape[1] / side).astype(int), mask.shape[1] - 1)
        mask = mask[rows][:, cols]
    return torch.from_numpy(mask.astype(np.float32))


def train_step(
    bundle: ModelBundle,
    batch: list[TaskSample],
    policy_params: list[torch.nn.Parameter],
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    step: int,
    total_steps: int,
    with_masks: bool = True,
    cache: dict | None = None,
) -> dict:
    """One optimizer update over a batch; returns the step record."""
    lr = warmup_lr(cfg.learning_rate, step, total_steps, cfg.warmup_ratio)
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)
    text_terms, mask_terms = batch_losses(bundle, batch, cfg, with_masks, cache)
    loss = torch.stack(text_terms).mean()
    if mask_terms:
        loss = loss + torch.stack(mask_terms).mean()
    if not torch.isfinite(loss):
        raise DivergenceError("divergence: non-finite loss")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(policy_params, cfg.grad_clip_norm)
    optimizer.step()
    return {
        "step": step,
        "lr": lr,
        "loss": float(loss.detach()),
        "text_loss": float(torch.stack(text_terms).mean().detach()),
        "mask_loss": float(torch.stack(mask_terms).mean().detach()) if mask_terms else None,
    }


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def _mixed_batches(
    samples,
    batch_size: int,
    rng: np.random.Generator,
    family_weights: dict[str, float] | None = None,
):
    """Each batch draws one task family (uniformly by default, or per
    ``family_weights``) and fills from that family's shuffled cyclic stream.
    Homogeneous batches keep padding tight (video sequences are ~4x longer
    than image ones)."""
    by_task: dict[str, list[TaskSample]] = {}
    for s in samples:
        by_task.setdefault(s.task, []).append(s)
    tasks = sorted(by_task)
    weights = np.array([(family_weights or {}).get(t, 1.0) for t in tasks], dtype=float)
    weights = weights / weights.sum()
    streams = {}
    for task in tasks:
        pool = by_task[task]
        order = rng.permutation(len(pool))
        streams[task] = {"pool": pool, "order": order, "pos": 0}

    def next_from(task):
        st = streams[task]
        if st["pos"] >= len(st["order"]):
            st["order"] = rng.permutation(len(st["pool"]))
            st["pos"] = 0
        sample = st["pool"][st["order"][st["pos"]]]
        st["pos"] += 1
        return sample

    n_steps = max(1, len(samples) // batch_size)
    for _ in range(n_steps):
        task = tasks[int(rng.choice(len(tasks), p=weights))]
        yield [next_from(task) for _ in range(batch_size)]


def run_training(
    bundle: ModelBundle,
    samples: list[TaskSample],
    cfg: TrainConfig,
    policy: FreezePolicy,
    with_masks: bool = True,
    log_path: str | None = None,
    log_every: int = 10,
    checkpoint_dir: str | None = None,
    family_weights: dict[str, float] | None = None,
) -> list[dict]:
    """The co-training loop (also used for LM text pretraining with
    ``with_masks=False`` and an mllm=full policy). When ``checkpoint_dir``
    is given the bundle is saved there at every epoch boundary."""
    if not samples:
        return []
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    policy.apply(bundle)
    params, optimizer = make_policy_optimizer(bundle, policy, cfg)
    if not params:
        raise ValueError("policy leaves no trainable parameters")
    steps_per_epoch = max(1, len(samples) // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    # frozen modules produce identical activations every epoch: cache them
    cache: dict = {}
    if policy.sam_encoder == "frozen":
        cache["features"] = {}
    if policy.mllm in ("lora", "frozen"):
        cache["visual"] = {}
    records = []
    log_fh = open(log_path, "a") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for batch in _mixed_batches(samples, cfg.batch_size, rng, family_weights):
                rec = train_step(
                    bundle, batch, params, cfg, optimizer, step, total_steps, with_masks,
                    cache,
                )
                rec["epoch"] = epoch
                rec["time"] = time.time()
                records.append(rec)
                if log_fh and (step % log_every == 0 or step == total_steps - 1):
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                step += 1
            if checkpoint_dir is not None:
                bundle.save(checkpoint_dir, extra={"epoch": epoch, "step": step})
    finally:
        if log_fh:
            log_fh.close()
    return records


PRETRAIN_FAMILY_WEIGHTS = {"image_chat": 2.0, "video_chat": 2.0}

# co-training mix: grounding families need far more gradient steps than a
# uniform family draw gives them at desk scale (the reference recipe's data
# proportions are similarly seg-heavy: 270K seg vs 765K chat of 1.1M)
COTRAIN_FAMILY_WEIGHTS = {
    "ref_image_seg": 3.0,
    "ref_video_seg": 2.0,
    "gcg": 1.5,
    "image_chat": 1.0,
    "video_chat": 1.0,
    "visual_prompt_caption": 0.5,
}


def pretrain_lm(
    bundle: ModelBundle,
    samples: list[TaskSample],
    cfg: TrainConfig,
    log_path: str | None = None,
    family_weights: dict[str, float] | None = None,
) -> list[dict]:
    """Text-only full-finetune of the LM; the desk-scale stand-in for
    starting from a pretrained multimodal LM. Chat families are upweighted
    by default: their answers are the only ones that demand vision during
    this stage (segmentation answers echo the instruction)."""
    policy = FreezePolicy(
        mllm="full", sam_encoder="frozen", sam_decoder="frozen", sam_memory="frozen"
    )
    if family_weights is None:
        family_weights = PRETRAIN_FAMILY_WEIGHTS
    return run_training(
        bundle, samples, cfg, policy, with_masks=False, log_path=log_path,
        family_weights=family_weights,
    )


# ---------------------------------------------------------------------------
# tracker prewarm
# ---------------------------------------------------------------------------


def prewarm_tracker(
    bundle: ModelBundle,
    videos: list[TaskSample],
    cfg: TrainConfig,
    log_path: str | None = None,
    empty_seed_prob: float = 0.15,
) -> list[dict]:
    """Class-agnostic tracking pretrain of encoder + memory + decoder.

    Memory is seeded with the first visible ground-truth mask. For the first
    half of the epochs memory updates are teacher-forced with ground truth;
    afterwards they use the predicted masks, matching inference conditions.
    A fraction of visits seed an all-empty memory and train toward empty
    masks so an object-free memory yields an object-free prediction. Zero
    epochs leave the weights untouched; the caller applies the freeze policy
    after.
    """
    if cfg.epochs <= 0:
        return []
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    policy = FreezePolicy(
        mllm="frozen", sam_encoder="finetune", sam_decoder="finetune", sam_memory="finetune"
    )
    params = policy.apply(bundle)
    optimizer = make_optimizer(params, cfg)
    total_steps = cfg.epochs * max(1, len(videos))
    records = []
    log_fh = open(log_path, "a") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(videos))
            for vid_pos in order:
                sample = videos[vid_pos]
                masklet = sample.gt_masklets[0] if sample.gt_masklets else None
                if masklet is None:
                    continue
                gt = masklet.masks
                T = sample.visual.frame_count
                frames = sample.visual.frames
                visible = [t for t in range(T) if gt[t].sum() > 0]
                if not visible or T < 2:
                    continue
                empty_run = rng.random() < empty_seed_prob
                seed_t = visible[0]
                span = [t for t in range(seed_t, T)][: cfg.max_video_frames]
                feats = {t: bundle.sam.encode_frame(frames[t]) for t in span}
                if empty_run:
                    seed_mask = np.zeros_like(gt[seed_t])
                else:
                    seed_mask = gt[seed_t]
                bank = MemoryBank(capacity=bundle.sam.cfg.memory_capacity)
                bank = update_memory(bank, MemoryEntry(feats[seed_t], seed_mask, seed_t))
                teacher_force = epoch < max(1, cfg.epochs // 2)
                losses = []
                for t in span[1:]:
                    fused = bundle.sam.memory.fuse(feats[t], bank)
                    logits = bundle.sam.decoder(fused, bundle.sam.memory.track_token)
                    target = np.zeros_like(gt[t]) if empty_run else gt[t]
                    losses.append(
                        mask_loss(logits, _gt_at_decoder_side(target, bundle))
                    )
                    if teacher_force or empty_run:
                        mem_mask = target
                    else:
                        mem_mask = (logits.detach() > 0).to(torch.uint8).numpy()
                    bank = update_memory(bank, MemoryEntry(feats[t], mem_mask, t))
                if not losses:
                    continue
                # warmup then per-epoch cosine decay; late epochs sharpen
                # boundaries at a fraction of the base rate
                decay = 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, cfg.epochs)))
                decay = max(decay, 0.05)
                lr = warmup_lr(cfg.learning_rate, step, total_steps, cfg.warmup_ratio) * decay
                for group in optimizer.param_groups:
                    group["lr"] = lr
                loss = torch.stack(losses).mean()
                if not torch.isfinite(loss):
                    raise DivergenceError("divergence: non-finite loss")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
                optimizer.step()
                rec = {"step": step, "epoch": epoch, "loss": float(loss.detach()), "lr": lr}
                records.append(rec)
                if log_fh and step % 20 == 0:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                step += 1
    finally:
        if log_fh:
            log_fh.close()
    return records
