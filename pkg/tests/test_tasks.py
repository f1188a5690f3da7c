import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refseg.tasks import (
    Masklet,
    SequenceTooLongError,
    TaskSample,
    TokenSequence,
    Vocab,
    VisualInput,
    VisualPrompt,
    format_sample,
    gcg_phrases,
    parse_answer,
    tokenize,
)


def make_visual(T=1, side=16):
    return VisualInput("image" if T == 1 else "video", np.zeros((T, side, side, 3), np.uint8))


def make_masklets(n, T=1, side=16):
    masks = np.zeros((T, side, side), np.uint8)
    masks[:, 0, 0] = 1
    return [Masklet(masks.copy(), object_id=f"obj{i}") for i in range(n)]


def build_vocab(*texts):
    return Vocab.build(list(texts))


class TestTokenizer:
    def test_markers_split_off(self):
        assert tokenize("<p>the cat</p>[SEG] sits") == [
            "<p>", "the", "cat", "</p>", "[SEG]", "sits",
        ]

    def test_unique_seg_markers(self):
        assert tokenize("[SEG1] [SEG12]") == ["[SEG1]", "[SEG12]"]

    @given(
        st.lists(
            st.text(alphabet="abcdefg", min_size=1, max_size=6), min_size=1, max_size=8
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip_whitespace_normalized(self, words):
        text = "  ".join(words)
        vocab = Vocab.build([text])
        assert vocab.decode(vocab.encode(text)) == " ".join(tokenize(text))

    def test_corpus_string_round_trip(self):
        s = "the small red circle that starts left of the blue square and moves to the right"
        vocab = Vocab.build([s])
        assert vocab.decode(vocab.encode(s)) == s

    def test_unknown_maps_to_unk(self):
        vocab = Vocab.build(["hello"])
        assert vocab.encode("hello zebra") == [vocab.encode_word("hello"), vocab.unk_id]


class TestVocab:
    def test_special_ids_distinct(self):
        vocab = Vocab.build(["a b c"])
        ids = [
            vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.unk_id,
            vocab.img_start_id, vocab.img_end_id, vocab.patch_id,
            vocab.vp_id, vocab.region_id, vocab.seg_id,
        ]
        assert len(set(ids)) == len(ids)

    def test_save_load_stable(self, tmp_path):
        vocab = Vocab.build(["alpha beta [SEG]"])
        path = tmp_path / "vocab.json"
        vocab.save(path)
        loaded = Vocab.load(path)
        assert loaded.seg_id == vocab.seg_id
        assert loaded.encode("alpha beta") == vocab.encode("alpha beta")
        assert len(loaded) == len(vocab)

    def test_seg_variant_bounds(self):
        vocab = Vocab(n_seg_variants=3)
        vocab.seg_variant_id(3)
        with pytest.raises(ValueError):
            vocab.seg_variant_id(4)


class TestSampleInvariants:
    def test_seg_count_must_match_masklets(self):
        with pytest.raises(ValueError):
            TaskSample(
                task="ref_image_seg",
                visual=make_visual(),
                instruction_text="segment it",
                answer_text="it is [SEG] [SEG]",
                gt_masklets=make_masklets(1),
            )

    def test_chat_may_not_carry_masklets(self):
        with pytest.raises(ValueError):
            TaskSample(
                task="image_chat",
                visual=make_visual(),
                instruction_text="what",
                answer_text="ans",
                gt_masklets=make_masklets(1),
            )

    def test_prompt_frame_bounds(self):
        with pytest.raises(ValueError):
            TaskSample(
                task="visual_prompt_caption",
                visual=make_visual(),
                instruction_text="describe",
                answer_text="a thing",
                prompts=[VisualPrompt("point", (0.5, 0.5), frame_index=3)],
            )


class TestFormatSample:
    def test_chat_loss_mask_covers_answer_plus_eos(self):
        sample = TaskSample(
            task="image_chat",
            visual=make_visual(),
            instruction_text="what shape",
            answer_text="a red circle",
        )
        vocab = build_vocab("what shape", "a red circle")
        seq = format_sample(sample, vocab, patch_tokens_per_frame=4)
        assert sum(seq.loss_mask) == 4  # 3 answer words + EOS
        assert seq.ids[-1] == vocab.eos_id
        assert seq.loss_mask[-1]

    def test_single_object_single_design(self):
        sample = TaskSample(
            task="ref_image_seg",
            visual=make_visual(),
            instruction_text="segment the circle",
            answer_text="it is [SEG]",
            gt_masklets=make_masklets(1),
        )
        vocab = build_vocab("segment the circle", "it is")
        seq = format_sample(sample, vocab, patch_tokens_per_frame=4)
        assert len(seq.seg_positions) == 1
        assert seq.ids[seq.seg_positions[0]] == vocab.seg_id

    def _video_sample(self, T=10):
        return TaskSample(
            task="ref_video_seg",
            visual=make_visual(T),
            instruction_text="segment the circle",
            answer_text="it is [SEG]",
            gt_masklets=make_masklets(1, T),
        )

    def test_repetitive_design_expansion(self):
        vocab = build_vocab("segment the circle", "it is")
        seq = format_sample(
            self._video_sample(), vocab, "repetitive", n_keyframes=5, patch_tokens_per_frame=4
        )
        assert len(seq.seg_positions) == 5
        assert {seq.ids[p] for p in seq.seg_positions} == {vocab.seg_id}

    def test_unique_design_expansion(self):
        vocab = build_vocab("segment the circle", "it is")
        seq = format_sample(
            self._video_sample(), vocab, "unique", n_keyframes=5, patch_tokens_per_frame=4
        )
        ids = [seq.ids[p] for p in seq.seg_positions]
        assert ids == [vocab.seg_variant_id(k) for k in range(1, 6)]
        assert len(set(ids)) == 5

    def test_expansion_against_hand_table(self):
        # hand expansion for answer "it is [SEG]" with M=3:
        #   single     -> [SEG]
        #   repetitive -> [SEG] [SEG] [SEG]
        #   unique     -> [SEG1] [SEG2] [SEG3]
        vocab = build_vocab("segment the circle", "it is")
        expected = {
            "single": [vocab.seg_id],
            "repetitive": [vocab.seg_id] * 3,
            "unique": [vocab.seg_variant_id(k) for k in (1, 2, 3)],
        }
        for design, ids in expected.items():
            seq = format_sample(
                self._video_sample(), vocab, design, n_keyframes=3, patch_tokens_per_frame=4
            )
            assert [seq.ids[p] for p in seq.seg_positions] == ids

    def test_unique_design_needs_enough_variants(self):
        vocab = Vocab.build(["segment it is"], n_seg_variants=3)
        with pytest.raises(ValueError):
            format_sample(
                self._video_sample(), vocab, "unique", n_keyframes=5, patch_tokens_per_frame=4
            )

    def test_visual_placeholder_count(self):
        vocab = build_vocab("segment the circle", "it is")
        seq = format_sample(
            self._video_sample(), vocab, n_keyframes=5, patch_tokens_per_frame=16
        )
        assert seq.n_visual == 80

    def test_visual_prompt_tokens(self):
        sample = TaskSample(
            task="visual_prompt_caption",
            visual=make_visual(),
            instruction_text="describe the marked region",
            answer_text="a red circle",
            prompts=[VisualPrompt("box", (0.1, 0.1, 0.5, 0.5))],
        )
        vocab = build_vocab(sample.instruction_text, sample.answer_text)
        seq = format_sample(sample, vocab, patch_tokens_per_frame=4)
        assert seq.n_visual_prompts == 1
        assert vocab.vp_id in seq.ids

    def test_deterministic(self):
        sample = self._video_sample()
        vocab = build_vocab("segment the circle", "it is")
        a = format_sample(sample, vocab, n_keyframes=5, patch_tokens_per_frame=4)
        b = format_sample(sample, vocab, n_keyframes=5, patch_tokens_per_frame=4)
        assert a.ids == b.ids and a.kinds == b.kinds
        assert a.loss_mask == b.loss_mask and a.seg_positions == b.seg_positions

    def test_too_long_errors(self):
        sample = self._video_sample()
        vocab = build_vocab("segment the circle", "it is")
        with pytest.raises(SequenceTooLongError, match="sequence too long"):
            format_sample(
                sample, vocab, n_keyframes=5, patch_tokens_per_frame=64, max_len=64
            )

    def test_loss_mask_empty_iff_no_answer(self):
        sample = TaskSample(
            task="image_chat", visual=make_visual(), instruction_text="hi", answer_text=""
        )
        vocab = build_vocab("hi")
        seq = format_sample(sample, vocab, patch_tokens_per_frame=4, include_answer=False)
        assert sum(seq.loss_mask) == 0

    @given(
        n_obj=st.integers(1, 3),
        design=st.sampled_from(["single", "repetitive", "unique"]),
        m=st.integers(1, 5),
    )
    @settings(max_examples=40, deadline=None)
    def test_seg_count_conservation(self, n_obj, design, m):
        T = 6
        answer = " and ".join(["here is [SEG]"] * n_obj)
        sample = TaskSample(
            task="ref_video_seg",
            visual=make_visual(T),
            instruction_text="segment all",
            answer_text=answer,
            gt_masklets=make_masklets(n_obj, T),
        )
        vocab = build_vocab("segment all", "here is and")
        seq = format_sample(sample, vocab, design, n_keyframes=m, patch_tokens_per_frame=4)
        factor = 1 if design == "single" else m
        assert len(seq.seg_positions) == n_obj * factor


class TestParseAnswer:
    def test_single_seg(self):
        vocab = build_vocab("it is")
        ids = vocab.encode("it is [SEG]") + [vocab.eos_id]
        text, pos = parse_answer(ids, vocab)
        assert text == "it is [SEG]"
        assert pos == [2]

    def test_no_seg(self):
        vocab = build_vocab("just words")
        ids = vocab.encode("just words") + [vocab.eos_id]
        text, pos = parse_answer(ids, vocab)
        assert pos == []
        assert text == "just words"

    def test_gcg_phrases_align_with_segs(self):
        vocab = build_vocab("the cat sits on the mat")
        raw = "<p> the cat </p> [SEG] sits on <p> the mat </p> [SEG]"
        ids = vocab.encode(raw) + [vocab.eos_id]
        text, pos = parse_answer(ids, vocab)
        assert len(pos) == 2
        phrases = gcg_phrases(text)
        assert phrases == ["the cat", "the mat"]
        # phrase k precedes SEG k in the token stream
        assert [ids[p] for p in pos] == [vocab.seg_id, vocab.seg_id]
        close_positions = [i for i, t in enumerate(ids) if t == vocab.encode_word("</p>")]
        assert all(c < s for c, s in zip(close_positions, pos))

    def test_truncates_at_eos(self):
        vocab = build_vocab("a b")
        ids = vocab.encode("a") + [vocab.eos_id] + vocab.encode("b [SEG]")
        text, pos = parse_answer(ids, vocab)
        assert text == "a"
        assert pos == []

    def test_unique_variants_found(self):
        vocab = build_vocab("go")
        ids = [vocab.seg_variant_id(1), vocab.seg_variant_id(2), vocab.eos_id]
        _, pos = parse_answer(ids, vocab)
        assert pos == [0, 1]


class TestTokenSequence:
    def test_length_consistency_enforced(self):
        with pytest.raises(ValueError):
            TokenSequence([1, 2], [0], [True, False], [], 0)

    def test_seg_positions_must_be_in_answer(self):
        with pytest.raises(ValueError):
            TokenSequence([1, 2, 3], [0, 0, 0], [False, False, True], [0], 2)
