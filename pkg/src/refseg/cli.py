"""Command-line entry point.

Subcommands: gen-data, prewarm, train, infer, eval, annotate, ablate.
Exit codes: 0 success, 1 usage error, 2 runtime error. Logs are
line-delimited JSON on stderr; every subcommand honors --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np


def log(**kwargs) -> None:
    print(json.dumps(kwargs, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refseg",
        description="desk-scale referring image/video segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=0)
    p.add_argument("--images", type=int, default=0)
    p.add_argument("--qa", type=int, default=0)
    p.add_argument("--gcg", type=int, default=0)
    p.add_argument("--vp", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--stress", default="", help="comma list from {late,occlusion}")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("prewarm", help="prewarm the tracker stack")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default="", help="key=value file; flags win")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="LM pretrain + joint co-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt-in", required=True, help="prewarmed checkpoint")
    p.add_argument("--config", default="", help="key=value file; flags win")
    p.add_argument("--lm-epochs", type=int, default=None)
    p.add_argument("--cotrain-epochs", type=int, default=None)
    p.add_argument("--lm-lr", type=float, default=None)
    p.add_argument("--cotrain-lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--token-design", default=None,
                   choices=("single", "repetitive", "unique"))
    p.add_argument("--keyframe-strategy", default=None)
    p.add_argument("--exclude-tasks", default="", help="comma list of tasks to drop")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("infer", help="referring video segmentation")
    p.add_argument("--video", required=True, help="directory of PNG frames")
    p.add_argument("--expr", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="uniform_5")
    p.add_argument("--token-design", default="single",
                   choices=("single", "repetitive", "unique"))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("annotate", help="run the 3-stage annotation pipeline")
    p.add_argument("--corpus", required=True)
    p.add_argument("--backend", default="mock", choices=("mock", "remote"))
    p.add_argument("--endpoint", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="desk-scale ablation comparisons")
    p.add_argument("--axis", required=True, choices=("sampling", "seg_design"))
    p.add_argument("--ckpt", required=True,
                   help="trained ckpt (sampling) or prewarmed ckpt (seg_design)")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", default="", help="required for --axis seg_design")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--n-videos", type=int, default=12)
    p.add_argument("--lm-epochs", type=int, default=8)
    p.add_argument("--cotrain-epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from . import corpus, synth

    stress = tuple(s for s in args.stress.split(",") if s)
    for s in stress:
        if s not in ("late", "occlusion"):
            raise ValueError(f"unknown stress kind {s!r}")
    t0 = time.time()
    samples = synth.make_dataset(
        n_videos=args.videos,
        n_images=args.images,
        n_qa=args.qa,
        n_gcg=args.gcg,
        n_vp=args.vp,
        seed=args.seed,
        size=args.size,
        stress=stress,
        workers=args.workers,
    )
    manifest = corpus.write_corpus(samples, args.out, seed=args.seed)
    log(event="gen-data", out=args.out, manifest=manifest, seconds=round(time.time() - t0, 2))
    return 0


def _resolve(args, key: str, fallback, caster=None):
    """Flag value if given, else config-file value, else the built-in."""
    value = getattr(args, key.replace("-", "_"))
    if value is not None:
        return value
    config = getattr(args, "_config_values", {})
    if key in config:
        raw = config[key]
        return caster(raw) if caster else raw
    return fallback


def _load_config_file(args) -> None:
    values = {}
    if getattr(args, "config", ""):
        with open(args.config) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    key, _, val = line.partition("=")
                    values[key.strip()] = val.strip()
    args._config_values = values


def cmd_prewarm(args) -> int:
    from .pipeline import prewarm_pipeline

    _load_config_file(args)
    t0 = time.time()
    prewarm_pipeline(
        args.corpus,
        args.out,
        seed=_resolve(args, "seed", 0, int),
        epochs=_resolve(args, "epochs", 3, int),
        learning_rate=_resolve(args, "lr", 1e-3, float),
    )
    log(event="prewarm", out=args.out, seconds=round(time.time() - t0, 2))
    return 0


def cmd_train(args) -> int:
    from .pipeline import train_pipeline

    _load_config_file(args)
    t0 = time.time()
    exclude = tuple(t for t in args.exclude_tasks.split(",") if t)
    train_pipeline(
        args.corpus,
        args.out,
        ckpt_in=args.ckpt_in,
        seed=_resolve(args, "seed", 0, int),
        lm_epochs=_resolve(args, "lm-epochs", 12, int),
        cotrain_epochs=_resolve(args, "cotrain-epochs", 4, int),
        lm_lr=_resolve(args, "lm-lr", 1.5e-3, float),
        cotrain_lr=_resolve(args, "cotrain-lr", 1e-3, float),
        batch_size=_resolve(args, "batch-size", 16, int),
        token_design=_resolve(args, "token-design", "single"),
        keyframe_strategy=_resolve(args, "keyframe-strategy", "uniform_5"),
        exclude_tasks=exclude,
    )
    log(event="train", out=args.out, seconds=round(time.time() - t0, 2))
    return 0


def _load_frames_dir(path: str) -> np.ndarray:
    from PIL import Image

    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no PNG frames in {path}")
    return np.stack([np.asarray(Image.open(os.path.join(path, n)).convert("RGB")) for n in names])


def cmd_infer(args) -> int:
    from PIL import Image

    from .checkpoint import ModelBundle
    from .refvos import SamplingStrategy, run_refvos
    from .tasks import VisualInput

    frames = _load_frames_dir(args.video)
    bundle = ModelBundle.load(args.ckpt)
    video = VisualInput("video" if frames.shape[0] > 1 else "image", frames)
    t0 = time.time()
    masklet, trace = run_refvos(
        video,
        args.expr,
        bundle,
        SamplingStrategy.parse(args.strategy),
        token_design=args.token_design,
        return_trace=True,
    )
    elapsed = time.time() - t0
    os.makedirs(args.out, exist_ok=True)
    for t in range(masklet.frame_count):
        Image.fromarray((masklet.masks[t] * 255).astype(np.uint8)).save(
            os.path.join(args.out, f"{t:03d}.png")
        )
    result = {
        "no_object": trace.no_object,
        "keyframes": trace.keyframes,
        "strategy": args.strategy,
        "answer_text": trace.answer_text,
        "max_bank_len": trace.max_bank_len,
        "seconds": round(elapsed, 3),
    }
    with open(os.path.join(args.out, "result.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    log(event="infer", **result)
    return 0


def _mask_from_png(path: str) -> np.ndarray:
    from PIL import Image

    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def cmd_eval(args) -> int:
    from .metrics import eval_dataset

    entries = sorted(os.listdir(args.gt))
    image_pairs, video_pairs, ids = [], [], []
    video_ids = []
    for name in entries:
        gt_path = os.path.join(args.gt, name)
        pred_path = os.path.join(args.pred, name)
        if os.path.isdir(gt_path):
            frame_names = sorted(n for n in os.listdir(gt_path) if n.endswith(".png"))
            gt = np.stack([_mask_from_png(os.path.join(gt_path, n)) for n in frame_names])
            pred = np.stack([_mask_from_png(os.path.join(pred_path, n)) for n in frame_names])
            video_pairs.append((pred, gt))
            video_ids.append(name)
        elif name.endswith(".png"):
            image_pairs.append((_mask_from_png(pred_path), _mask_from_png(gt_path)))
            ids.append(name)
    report = eval_dataset(image_pairs, video_pairs, ids=ids + video_ids, workers=args.workers)
    report.save(args.out)
    summary = {k: v for k, v in report.to_dict()["aggregates"].items() if v is not None}
    log(event="eval", out=args.out, **summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_annotate(args) -> int:
    from . import corpus
    from .annotation import (
        MockCaptioner,
        MockConsistencyChecker,
        RemoteCaptioner,
        RemoteConsistencyChecker,
        run_pipeline,
    )

    if args.backend == "remote":
        if not args.endpoint:
            raise ValueError("--endpoint required for remote backend")
        captioner = RemoteCaptioner(args.endpoint)
        checker = RemoteConsistencyChecker(args.endpoint)
    else:
        captioner = MockCaptioner(seed=args.seed)
        checker = MockConsistencyChecker(threshold=args.threshold)
    samples = corpus.read_corpus(args.corpus)
    items = []
    for sample in samples:
        for masklet in sample.gt_masklets:
            items.append((sample.sample_id, sample.visual.frames, masklet))
    records, stats = run_pipeline(items, captioner, checker, out_path=args.out)
    stats_path = os.path.join(os.path.dirname(os.path.abspath(args.out)), "stats.json")
    with open(stats_path, "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    log(event="annotate", out=args.out, **stats)
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from .checkpoint import ModelBundle
    from .pipeline import ablate_sampling, ablate_seg_design

    seeds = tuple(int(s) for s in args.seeds.split(",") if s)
    if args.axis == "sampling":
        bundle = ModelBundle.load(args.ckpt)
        table = ablate_sampling(bundle, seeds=seeds, n_videos=args.n_videos)
    else:
        if not args.corpus:
            raise ValueError("--corpus required for --axis seg_design")
        work_dir = os.path.splitext(args.out)[0] + "_runs"
        table = ablate_seg_design(
            args.corpus,
            args.ckpt,
            work_dir,
            seeds=seeds,
            lm_epochs=args.lm_epochs,
            cotrain_epochs=args.cotrain_epochs,
        )
    with open(args.out, "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    log(event="ablate", axis=args.axis, out=args.out)
    print(json.dumps(table, sort_keys=True))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "prewarm": cmd_prewarm,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "annotate": cmd_annotate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log(event="error", command=args.command, error=f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
