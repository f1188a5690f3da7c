"""Mid-scale training calibration: measures wall time and held-out metrics
so the full-run budgets can be pinned. Not part of the package."""

import json
import os
import sys
import tempfile
import time

import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
torch.set_num_threads(2)

from refseg import corpus, synth  # noqa: E402
from refseg.pipeline import eval_bundle, prewarm_pipeline, train_pipeline  # noqa: E402

N_IMAGES = int(os.environ.get("CAL_IMAGES", 400))
N_VIDEOS = int(os.environ.get("CAL_VIDEOS", 80))
N_QA = int(os.environ.get("CAL_QA", 200))
N_GCG = int(os.environ.get("CAL_GCG", 40))
N_VP = int(os.environ.get("CAL_VP", 30))
PREWARM_EPOCHS = int(os.environ.get("CAL_PREWARM_EPOCHS", 3))
LM_EPOCHS = int(os.environ.get("CAL_LM_EPOCHS", 8))
CO_EPOCHS = int(os.environ.get("CAL_CO_EPOCHS", 4))
LM_LR = float(os.environ.get("CAL_LM_LR", 2e-3))
CO_LR = float(os.environ.get("CAL_CO_LR", 1e-3))
PREWARM_LR = float(os.environ.get("CAL_PREWARM_LR", 1e-3))
BATCH = int(os.environ.get("CAL_BATCH", 16))
LORA_RANK = int(os.environ.get("CAL_LORA_RANK", 8))
WORK = os.environ.get("CAL_WORK", tempfile.mkdtemp(prefix="refseg_cal_"))

os.makedirs(WORK, exist_ok=True)
corpus_dir = os.path.join(WORK, "corpus")
stamp = {"work": WORK}
print(json.dumps({"phase": "start", **stamp}), flush=True)

t0 = time.time()
if not os.path.exists(os.path.join(corpus_dir, "manifest.json")):
    samples = synth.make_dataset(
        n_videos=N_VIDEOS, n_images=N_IMAGES, n_qa=N_QA, n_gcg=N_GCG, n_vp=N_VP,
        seed=0, stress=("late", "occlusion"),
    )
    corpus.write_corpus(samples, corpus_dir, seed=0)
print(json.dumps({"phase": "gen", "sec": round(time.time() - t0, 1)}), flush=True)

t0 = time.time()
prewarm_dir = os.path.join(WORK, "prewarm")
bundle = prewarm_pipeline(corpus_dir, prewarm_dir, seed=0, epochs=PREWARM_EPOCHS,
                          learning_rate=PREWARM_LR,
                          lm_overrides={"lora_rank": LORA_RANK})
print(json.dumps({"phase": "prewarm", "sec": round(time.time() - t0, 1)}), flush=True)

t0 = time.time()
train_dir = os.path.join(WORK, "train")
bundle = train_pipeline(
    corpus_dir, train_dir, ckpt_in=prewarm_dir, seed=0,
    lm_epochs=LM_EPOCHS, cotrain_epochs=CO_EPOCHS,
    lm_lr=LM_LR, cotrain_lr=CO_LR, batch_size=BATCH,
)
print(json.dumps({"phase": "train", "sec": round(time.time() - t0, 1)}), flush=True)

t0 = time.time()
metrics = eval_bundle(bundle, corpus_dir, split="val")
metrics["eval_sec"] = round(time.time() - t0, 1)
print(json.dumps({"phase": "eval", **{k: (round(v, 4) if isinstance(v, float) else v) for k, v in metrics.items()}}), flush=True)
