"""Corpus directory format.

Layout:
    samples.jsonl            one record per TaskSample, masks by file path
    frames/<sample>/<t>.png  RGB frames
    masks/<sample>/<obj>_<t>.png  8-bit masks, 0/255
    vocab.json               word->id map with the special-token block
    manifest.json            per-task counts and train/val split assignment
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
from PIL import Image

from .tasks import Masklet, TaskSample, Vocab, VisualInput, VisualPrompt


def split_of(sample_id: str, seed: int, val_fraction: float = 0.1) -> str:
    """Seed-stable train/val assignment by hashing (seed, sample_id)."""
    digest = hashlib.sha1(f"{seed}:{sample_id}".encode()).hexdigest()
    return "val" if (int(digest[:8], 16) % 1000) < int(val_fraction * 1000) else "train"


def _save_png(path: str, array: np.ndarray) -> None:
    Image.fromarray(array).save(path)


def _load_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path))


def write_corpus(samples, out_dir: str, seed: int = 0) -> dict:
    """Write samples to ``out_dir``; returns the manifest."""
    frames_dir = os.path.join(out_dir, "frames")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)

    counts: dict[str, int] = {}
    split_counts = {"train": 0, "val": 0}
    records = []
    for sample in samples:
        sid = sample.sample_id
        sdir = os.path.join(frames_dir, sid)
        os.makedirs(sdir, exist_ok=True)
        for t in range(sample.visual.frame_count):
            _save_png(os.path.join(sdir, f"{t:03d}.png"), sample.visual.frames[t])
        mask_entries = []
        if sample.gt_masklets:
            mdir = os.path.join(masks_dir, sid)
            os.makedirs(mdir, exist_ok=True)
            for m in sample.gt_masklets:
                for t in range(m.frame_count):
                    _save_png(
                        os.path.join(mdir, f"{m.object_id}_{t:03d}.png"),
                        (m.masks[t] * 255).astype(np.uint8),
                    )
                mask_entries.append({"object_id": m.object_id})
        # samples sharing a scene must land in the same split (no leakage)
        split = split_of(sample.meta.get("scene_id", sid), seed)
        split_counts[split] += 1
        counts[sample.task] = counts.get(sample.task, 0) + 1
        records.append(
            {
                "sample_id": sid,
                "task": sample.task,
                "visual_kind": sample.visual.kind,
                "frame_count": sample.visual.frame_count,
                "height": sample.visual.height,
                "width": sample.visual.width,
                "instruction": sample.instruction_text,
                "answer": sample.answer_text,
                "prompts": [
                    {"kind": p.kind, "coords": list(p.coords), "frame_index": p.frame_index}
                    for p in sample.prompts
                ],
                "masklets": mask_entries,
                "split": split,
                "meta": sample.meta,
            }
        )

    with open(os.path.join(out_dir, "samples.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    manifest = {"seed": seed, "n_samples": len(records), "counts": counts, "splits": split_counts}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    vocab = Vocab.build(
        [r["instruction"] for r in records] + [r["answer"] for r in records]
    )
    vocab.save(os.path.join(out_dir, "vocab.json"))
    return manifest


def read_corpus(corpus_dir: str, split: str | None = None, tasks=None) -> list[TaskSample]:
    samples = []
    with open(os.path.join(corpus_dir, "samples.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            if split is not None and rec["split"] != split:
                continue
            if tasks is not None and rec["task"] not in tasks:
                continue
            samples.append(_record_to_sample(corpus_dir, rec))
    return samples


def _record_to_sample(corpus_dir: str, rec: dict) -> TaskSample:
    sid = rec["sample_id"]
    frames = np.stack(
        [
            _load_png(os.path.join(corpus_dir, "frames", sid, f"{t:03d}.png"))
            for t in range(rec["frame_count"])
        ]
    )
    masklets = []
    for entry in rec["masklets"]:
        oid = entry["object_id"]
        masks = np.stack(
            [
                _load_png(os.path.join(corpus_dir, "masks", sid, f"{oid}_{t:03d}.png")) // 255
                for t in range(rec["frame_count"])
            ]
        )
        masklets.append(Masklet(masks, object_id=oid))
    prompts = [
        VisualPrompt(p["kind"], tuple(p["coords"]), p["frame_index"]) for p in rec["prompts"]
    ]
    meta = dict(rec.get("meta") or {})
    meta["split"] = rec["split"]
    return TaskSample(
        task=rec["task"],
        visual=VisualInput(rec["visual_kind"], frames),
        instruction_text=rec["instruction"],
        answer_text=rec["answer"],
        prompts=prompts,
        gt_masklets=masklets,
        sample_id=sid,
        meta=meta,
    )


def load_vocab(corpus_dir: str) -> Vocab:
    return Vocab.load(os.path.join(corpus_dir, "vocab.json"))
