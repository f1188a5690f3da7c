"""Post-training diagnostics: where quality comes from and where it leaks.
Not part of the package."""

import json
import os
import sys
from collections import defaultdict

import numpy as np
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
torch.set_num_threads(2)

from refseg import corpus as corpus_io  # noqa: E402
from refseg.checkpoint import ModelBundle  # noqa: E402
from refseg.metrics import boundary_f, iou  # noqa: E402
from refseg.pipeline import _expression_of, chat_exact_match  # noqa: E402
from refseg.refvos import SamplingStrategy, run_ref_image, run_refvos  # noqa: E402

WORK = sys.argv[1] if len(sys.argv) > 1 else "/tmp/cal2"
corpus_dir = os.path.join(WORK, "corpus")
bundle = ModelBundle.load(os.path.join(WORK, "train"))

# --- image ref-seg, split by scene complexity -------------------------------
images = corpus_io.read_corpus(corpus_dir, split="val", tasks=("ref_image_seg",))[:150]
by_nobj = defaultdict(list)
no_obj = 0
for s in images:
    pred, trace = run_ref_image(s.visual, _expression_of(s), bundle)
    v = iou(pred, s.gt_masklets[0].masks[0])
    no_obj += trace.no_object
    by_nobj[len(s.meta["objects"])].append(v)
all_iou = [v for vs in by_nobj.values() for v in vs]
print(json.dumps({
    "image_mean_iou": round(float(np.mean(all_iou)), 4),
    "image_iou_by_n_objects": {k: round(float(np.mean(v)), 3) for k, v in sorted(by_nobj.items())},
    "image_no_object_flags": no_obj,
    "worst5": [round(v, 3) for v in sorted(all_iou)[:5]],
}))

# --- video: keyframe vs propagated quality ----------------------------------
videos = corpus_io.read_corpus(corpus_dir, split="val", tasks=("ref_video_seg",))[:25]
kf_j, prop_j, kf_f, prop_f = [], [], [], []
for s in videos:
    pred, trace = run_refvos(
        s.visual, _expression_of(s), bundle, SamplingStrategy("uniform_k", 5),
        return_trace=True,
    )
    gt = s.gt_masklets[0].masks
    for t in range(s.visual.frame_count):
        j = iou(pred.masks[t], gt[t])
        f = boundary_f(pred.masks[t], gt[t])
        if trace.frame_source.get(t) == "seg_prompt":
            kf_j.append(j); kf_f.append(f)
        else:
            prop_j.append(j); prop_f.append(f)
print(json.dumps({
    "keyframe_J": round(float(np.mean(kf_j)), 4),
    "keyframe_F": round(float(np.mean(kf_f)), 4),
    "propagated_J": round(float(np.mean(prop_j)), 4),
    "propagated_F": round(float(np.mean(prop_f)), 4),
}))

# --- chat EM by question type ------------------------------------------------
chats = corpus_io.read_corpus(corpus_dir, split="val", tasks=("image_chat", "video_chat"))[:120]
by_kind = defaultdict(list)
for s in chats:
    kind = s.instruction_text.split()[0]  # how / what
    kind = s.instruction_text.split()[:2]
    kind = " ".join(kind)
    by_kind[kind].append(s)
out = {}
for kind, group in sorted(by_kind.items()):
    out[kind] = {"n": len(group), "em": round(chat_exact_match(bundle, group), 3)}
print(json.dumps({"chat_by_type": out}))
