"""Behavioral checks that only hold for trained checkpoints: propagation
quality, empty-memory behavior, grounded decoding, and hidden-state facts.
These reuse the session artifacts built for the acceptance suite.
"""

import numpy as np
import torch

from refseg.metrics import iou
from refseg.refvos import SamplingStrategy, run_ref_image, run_refvos
from refseg.sam import MemoryBank, MemoryEntry, update_memory
from refseg.synth import Scene, ShapeSpec, gen_video_sample, render_scene
from refseg.tasks import VisualInput, format_sample


def track_with(bundle, frames, seed_mask, span):
    """Seed memory with (frame0, mask) and propagate across span frames."""
    sam = bundle.sam
    feats = [sam.encode_frame(frames[t]) for t in span]
    bank = update_memory(
        MemoryBank(capacity=sam.cfg.memory_capacity),
        MemoryEntry(feats[0], seed_mask, span[0]),
    )
    preds = [seed_mask]
    with torch.no_grad():
        for i, t in enumerate(span[1:], start=1):
            _, mask = sam.propagate_mask(feats[i], bank)
            preds.append(mask)
            bank = update_memory(bank, MemoryEntry(feats[i], mask, t))
    return np.stack(preds)


class TestPrewarmTracker:
    def test_static_video_propagation_iou(self, prewarm_bundle):
        scene = Scene(
            size=64, frame_count=8,
            shapes=[ShapeSpec("circle", "red", "large", 10.0, (30.0, 30.0))],
        )
        frames, masks, _ = render_scene(scene)
        preds = track_with(prewarm_bundle, frames, masks[0][0], list(range(8)))
        ious = [iou(preds[t], masks[0][0]) for t in range(1, 8)]
        assert min(ious) >= 0.99, ious

    def test_held_out_tracking_j(self, prewarm_bundle):
        js = []
        for seed in range(300, 316):
            sample = gen_video_sample(seed * 31 + 7, f"ho{seed}", frame_count=10)
            gt = sample.gt_masklets[0].masks
            if gt[0].sum() == 0:
                continue
            preds = track_with(
                prewarm_bundle, sample.visual.frames, gt[0], list(range(10))
            )
            js.append(np.mean([iou(preds[t], gt[t]) for t in range(1, 10)]))
        assert np.mean(js) >= 0.8, (np.mean(js), sorted(js)[:3])

    def test_empty_memory_propagates_almost_nothing(self, prewarm_bundle):
        scene = Scene(
            size=64, frame_count=2,
            shapes=[ShapeSpec("square", "blue", "large", 11.0, (32.0, 32.0))],
        )
        frames, _, _ = render_scene(scene)
        sam = prewarm_bundle.sam
        bank = update_memory(
            MemoryBank(capacity=5),
            MemoryEntry(sam.encode_frame(frames[0]), np.zeros((64, 64), np.uint8), 0),
        )
        with torch.no_grad():
            _, mask = sam.propagate_mask(sam.encode_frame(frames[1]), bank)
        assert mask.mean() < 0.05


class TestTrainedGrounding:
    def test_red_circle_prompt_selects_circle_region(self, trained_bundle):
        scene = Scene(
            size=64, frame_count=1,
            shapes=[
                ShapeSpec("circle", "red", "large", 11.0, (20.0, 36.0)),
                ShapeSpec("square", "blue", "large", 10.0, (46.0, 24.0)),
            ],
        )
        frames, masks, _ = render_scene(scene)
        image = VisualInput("image", frames)
        pred, trace = run_ref_image(image, "the red circle", trained_bundle)
        assert not trace.no_object
        assert iou(pred, masks[0][0]) >= 0.7

    def test_static_video_frames_agree(self, trained_bundle):
        scene = Scene(
            size=64, frame_count=8,
            shapes=[ShapeSpec("triangle", "green", "large", 11.0, (32.0, 32.0))],
        )
        frames, masks, _ = render_scene(scene)
        video = VisualInput("video", frames)
        masklet = run_refvos(
            video, "the green triangle", trained_bundle, SamplingStrategy("uniform_k", 5)
        )
        ref = masklet.masks[0]
        for t in range(1, 8):
            agreement = np.mean(masklet.masks[t] == ref)
            assert agreement >= 0.99, (t, agreement)

    def test_repetitive_design_seg_hiddens_pairwise_distinct(self, trained_bundle):
        sample = gen_video_sample(77, "rep0", frame_count=10)
        seq = format_sample(
            sample, trained_bundle.vocab, "repetitive", n_keyframes=5,
            patch_tokens_per_frame=trained_bundle.lm.cfg.patches_per_frame,
        )
        keyframes = [0, 2, 5, 7, 9]
        vis = trained_bundle.lm.encode_visual(sample.visual, keyframes)
        with torch.no_grad():
            _, hidden = trained_bundle.lm.forward(seq, vis)
        seg_hidden = trained_bundle.lm.extract_seg_hidden(hidden, seq.seg_positions)
        assert seg_hidden.shape[0] == 5
        for i in range(5):
            for j in range(i + 1, 5):
                assert not torch.allclose(seg_hidden[i], seg_hidden[j]), (i, j)


class TestAblateCli:
    def test_sampling_axis_emits_both_strategies(self, artifacts, tmp_path, capsys):
        import json

        from refseg.cli import main

        out = tmp_path / "sampling.json"
        code = main(
            ["ablate", "--axis", "sampling", "--ckpt", artifacts["train"],
             "--out", str(out), "--seeds", "0", "--n-videos", "4"]
        )
        assert code == 0
        table = json.loads(out.read_text())
        assert table["axis"] == "sampling"
        row = table["rows"][0]
        assert {"uniform_5_jf", "first_5_jf", "gap"} <= set(row)
        printed = json.loads(capsys.readouterr().out.strip())
        assert printed == table
