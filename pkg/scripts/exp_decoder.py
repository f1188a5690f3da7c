"""Small-scale probe of decoder prompt-selectivity after the structural
change (mask weights derived from the prompt token). Not part of the package."""

import json
import os
import sys
import time
from collections import defaultdict

import numpy as np
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
torch.set_num_threads(2)

from refseg import corpus as corpus_io  # noqa: E402
from refseg import synth  # noqa: E402
from refseg.checkpoint import ModelBundle  # noqa: E402
from refseg.metrics import iou  # noqa: E402
from refseg.pipeline import (  # noqa: E402
    _expression_of,
    chat_exact_match,
    eval_bundle,
    prewarm_pipeline,
    train_pipeline,
)
from refseg.refvos import run_ref_image  # noqa: E402
from refseg.tasks import format_sample  # noqa: E402

WORK = os.environ.get("EXP_WORK", "/tmp/exp1")
CO_LR = float(os.environ.get("EXP_CO_LR", 8e-4))
CO_EPOCHS = int(os.environ.get("EXP_CO_EPOCHS", 3))
LM_EPOCHS = int(os.environ.get("EXP_LM_EPOCHS", 8))
os.makedirs(WORK, exist_ok=True)
corpus_dir = os.path.join(WORK, "corpus")

t0 = time.time()
if not os.path.exists(os.path.join(corpus_dir, "manifest.json")):
    samples = synth.make_dataset(
        n_videos=150, n_images=800, n_qa=500, n_gcg=60, n_vp=30, seed=2,
        stress=("late", "occlusion"),
    )
    corpus_io.write_corpus(samples, corpus_dir, seed=2)
print(json.dumps({"phase": "gen", "sec": round(time.time() - t0, 1)}), flush=True)

t0 = time.time()
prewarm_dir = os.path.join(WORK, "prewarm")
if not os.path.exists(os.path.join(prewarm_dir, "manifest.json")):
    prewarm_pipeline(corpus_dir, prewarm_dir, seed=0, epochs=4, learning_rate=1.5e-3,
                     lm_overrides={"lora_rank": 16})
print(json.dumps({"phase": "prewarm", "sec": round(time.time() - t0, 1)}), flush=True)

t0 = time.time()
train_dir = os.path.join(WORK, "train")
bundle = train_pipeline(
    corpus_dir, train_dir, ckpt_in=prewarm_dir, seed=0,
    lm_epochs=LM_EPOCHS, cotrain_epochs=CO_EPOCHS, lm_lr=2e-3, cotrain_lr=CO_LR,
    batch_size=16,
)
print(json.dumps({"phase": "train", "sec": round(time.time() - t0, 1)}), flush=True)

# teacher-forced discrimination probe
images = corpus_io.read_corpus(corpus_dir, split="val", tasks=("ref_image_seg",))[:80]
tf = defaultdict(list)
gen = defaultdict(list)
with torch.no_grad():
    for s in images:
        seq = format_sample(s, bundle.vocab, n_keyframes=1,
                            patch_tokens_per_frame=bundle.lm.cfg.patches_per_frame)
        vis = bundle.lm.encode_visual(s.visual, [0])
        _, hidden = bundle.lm.forward(seq, vis)
        seg_h = bundle.lm.extract_seg_hidden(hidden, seq.seg_positions)
        prompt = bundle.sam.project_seg(seg_h[0])
        feat = bundle.sam.encode_frame(s.visual.frames[0])
        _, mask = bundle.sam.decode_mask(feat, prompt)
        tf[len(s.meta["objects"])].append(iou(mask, s.gt_masklets[0].masks[0]))
        pred, _ = run_ref_image(s.visual, _expression_of(s), bundle)
        gen[len(s.meta["objects"])].append(iou(pred, s.gt_masklets[0].masks[0]))
print(json.dumps({
    "teacher_forced_iou": {k: round(float(np.mean(v)), 3) for k, v in sorted(tf.items())},
    "generated_iou": {k: round(float(np.mean(v)), 3) for k, v in sorted(gen.items())},
}), flush=True)

metrics = eval_bundle(bundle, corpus_dir, split="val", max_images=80, max_videos=15,
                      max_chat=80)
print(json.dumps({"phase": "eval", **{k: (round(v, 4) if isinstance(v, float) else v)
                                      for k, v in metrics.items()}}), flush=True)
