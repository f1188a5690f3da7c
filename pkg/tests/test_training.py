import numpy as np
import pytest
import torch

from refseg.checkpoint import ModelBundle
from refseg.synth import make_dataset
from refseg.tasks import Vocab
from refseg.training import (
    DivergenceError,
    FreezePolicy,
    TrainConfig,
    batch_losses,
    make_optimizer,
    prewarm_tracker,
    run_training,
    train_step,
    warmup_lr,
)

TINY_LM = {"d_model": 32, "n_layers": 2, "n_heads": 2, "image_side": 16, "lora_rank": 4}
TINY_SAM = {"input_side": 32, "channels": 32}


@pytest.fixture()
def tiny_bundle():
    samples = make_dataset(n_videos=2, n_images=4, n_qa=2, n_gcg=1, seed=5, size=32)
    texts = [s.instruction_text for s in samples] + [s.answer_text for s in samples]
    vocab = Vocab.build(texts)
    bundle = ModelBundle.create(vocab, TINY_LM, TINY_SAM, seed=0)
    return bundle, samples


def snapshot(module):
    return {n: p.detach().clone() for n, p in module.named_parameters()}


class TestFreezePolicy:
    def test_defaults_match_component_table(self):
        policy = FreezePolicy()
        assert policy.mllm == "lora"
        assert policy.sam_encoder == "frozen"
        assert policy.sam_decoder == "finetune"
        assert policy.sam_memory == "frozen"

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            FreezePolicy(mllm="finetune")

    def test_every_parameter_classified(self, tiny_bundle):
        bundle, _ = tiny_bundle
        table = FreezePolicy().classify(bundle)
        names = {f"lm/{n}" for n, _ in bundle.lm.named_parameters()}
        names |= {f"sam/{n}" for n, _ in bundle.sam.named_parameters()}
        assert set(table) == names

    def test_default_trainable_groups(self, tiny_bundle):
        bundle, _ = tiny_bundle
        table = FreezePolicy().classify(bundle)
        for name, trainable in table.items():
            if name.startswith("lm/"):
                assert trainable == ("lora_a" in name or "lora_b" in name), name
            elif name.startswith(("sam/decoder.", "sam/projector.")):
                assert trainable, name
            else:
                assert not trainable, name

    def test_unknown_sam_parameter_rejected(self, tiny_bundle):
        bundle, _ = tiny_bundle
        bundle.sam.rogue = torch.nn.Linear(2, 2)
        with pytest.raises(ValueError, match="not covered"):
            FreezePolicy().classify(bundle)


class TestTrainStep:
    def test_frozen_tensors_bit_identical_and_trainable_changed(self, tiny_bundle):
        bundle, samples = tiny_bundle
        policy = FreezePolicy()
        params = policy.apply(bundle)
        cfg = TrainConfig(learning_rate=1e-2, batch_size=4, seed=0)
        opt = make_optimizer(params, cfg)
        lm_before = snapshot(bundle.lm)
        sam_before = snapshot(bundle.sam)
        table = policy.classify(bundle)
        for step in range(3):
            train_step(bundle, samples[:4], params, cfg, opt, step, 10)
        for name, tensor in bundle.lm.named_parameters():
            if table[f"lm/{name}"]:
                continue
            assert torch.equal(tensor, lm_before[name]), name
        changed_lora = any(
            not torch.equal(t, lm_before[n])
            for n, t in bundle.lm.named_parameters()
            if "lora" in n
        )
        assert changed_lora
        for name, tensor in bundle.sam.named_parameters():
            if name.startswith(("decoder.", "projector.")):
                continue
            assert torch.equal(tensor, sam_before[name]), name
        changed_decoder = any(
            not torch.equal(t, sam_before[n])
            for n, t in bundle.sam.named_parameters()
            if n.startswith("decoder.")
        )
        assert changed_decoder

    def test_grad_clip_scales_by_norm_ratio(self):
        p = torch.nn.Parameter(torch.tensor([6.0, 8.0]))
        loss = (p * torch.tensor([6.0, 8.0])).sum() / 10.0  # grad = (0.6, 0.8), norm 1
        loss10 = loss * 10  # grad norm 10
        loss10.backward()
        assert torch.norm(p.grad).item() == pytest.approx(10.0)
        torch.nn.utils.clip_grad_norm_([p], 1.0)
        assert torch.norm(p.grad).item() == pytest.approx(1.0, abs=1e-6)
        assert p.grad[0].item() == pytest.approx(0.6, abs=1e-6)

    def test_overfit_single_batch_monotone(self, tiny_bundle):
        bundle, samples = tiny_bundle
        policy = FreezePolicy(mllm="full")
        params = policy.apply(bundle)
        cfg = TrainConfig(learning_rate=2e-4, batch_size=2, seed=0, warmup_ratio=0.0)
        opt = make_optimizer(params, cfg)
        batch = samples[2:4]  # two image seg samples
        losses = []
        for step in range(50):
            rec = train_step(bundle, batch, params, cfg, opt, step, 50)
            losses.append(rec["loss"])
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a + 1e-6)
        assert drops == 49, f"non-monotone at lr {cfg.learning_rate}: {losses}"
        assert losses[-1] < losses[0]

    def test_divergence_raises(self, tiny_bundle):
        bundle, samples = tiny_bundle
        policy = FreezePolicy()
        params = policy.apply(bundle)
        cfg = TrainConfig(batch_size=2, seed=0)
        opt = make_optimizer(params, cfg)
        with torch.no_grad():
            bundle.lm.lm_head.weight.fill_(float("nan"))
        with pytest.raises(DivergenceError, match="divergence"):
            train_step(bundle, samples[:2], params, cfg, opt, 0, 10)

    def test_seg_bridge_gradient_reaches_lora(self, tiny_bundle):
        bundle, samples = tiny_bundle
        policy = FreezePolicy()
        policy.apply(bundle)
        seg_samples = [s for s in samples if s.task == "ref_image_seg"]
        cfg = TrainConfig(batch_size=2, seed=0)
        _, mask_terms = batch_losses(bundle, seg_samples[:2], cfg, with_masks=True)
        loss = torch.stack(mask_terms).mean()
        loss.backward()
        lora_norm = sum(
            float(p.grad.norm()) for p in bundle.lm.lora_parameters() if p.grad is not None
        )
        assert lora_norm > 0


class TestWarmup:
    def test_linear_ramp(self):
        assert warmup_lr(1.0, 0, 100, 0.1) == pytest.approx(0.1)
        assert warmup_lr(1.0, 4, 100, 0.1) == pytest.approx(0.5)
        assert warmup_lr(1.0, 9, 100, 0.1) == pytest.approx(1.0)
        assert warmup_lr(1.0, 50, 100, 0.1) == 1.0


class TestLoops:
    def test_run_training_writes_log(self, tiny_bundle, tmp_path):
        bundle, samples = tiny_bundle
        log = tmp_path / "train_log.jsonl"
        recs = run_training(
            bundle,
            samples,
            TrainConfig(learning_rate=1e-3, epochs=1, batch_size=4, seed=0),
            FreezePolicy(),
            log_path=str(log),
            log_every=1,
        )
        assert recs
        import json

        lines = [json.loads(x) for x in log.read_text().splitlines()]
        assert len(lines) == len(recs)
        assert {"step", "loss", "lr"} <= set(lines[0])

    def test_training_deterministic_given_seed(self, tmp_path):
        def run():
            samples = make_dataset(n_images=4, n_qa=2, seed=5, size=32)
            texts = [s.instruction_text for s in samples] + [s.answer_text for s in samples]
            vocab = Vocab.build(texts)
            bundle = ModelBundle.create(vocab, TINY_LM, TINY_SAM, seed=0)
            recs = run_training(
                bundle,
                samples,
                TrainConfig(learning_rate=1e-3, epochs=2, batch_size=2, seed=3),
                FreezePolicy(mllm="full"),
            )
            return [r["loss"] for r in recs]

        assert run() == run()

    def test_zero_epoch_prewarm_leaves_weights_unchanged(self, tiny_bundle):
        bundle, samples = tiny_bundle
        before = snapshot(bundle.sam)
        recs = prewarm_tracker(
            bundle,
            [s for s in samples if s.task == "ref_video_seg"],
            TrainConfig(epochs=0, seed=0),
        )
        assert recs == []
        for name, tensor in bundle.sam.named_parameters():
            assert torch.equal(tensor, before[name]), name

    def test_prewarm_trains_tracker_groups_only(self, tiny_bundle):
        bundle, samples = tiny_bundle
        lm_before = snapshot(bundle.lm)
        videos = [s for s in samples if s.task == "ref_video_seg"]
        prewarm_tracker(bundle, videos, TrainConfig(learning_rate=1e-3, epochs=1, seed=0))
        for name, tensor in bundle.lm.named_parameters():
            assert torch.equal(tensor, lm_before[name]), name


class TestTrainConfig:
    def test_key_value_round_trip(self, tmp_path):
        cfg = TrainConfig(learning_rate=2e-3, epochs=7, batch_size=3, token_design="unique")
        path = tmp_path / "train_config.txt"
        cfg.save(str(path))
        text = path.read_text()
        assert "learning_rate=0.002" in text
        loaded = TrainConfig.load(str(path))
        assert loaded == cfg

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(grad_clip_norm=0)
