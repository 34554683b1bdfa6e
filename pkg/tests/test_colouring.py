"""Colouring: shapes, channel maps, round trips, future padding."""

import numpy as np
import pytest

from convdial.colouring import (MODE_PREDICTED_ANSWERS, MODE_PREDICTED_DIALOGUE,
                                MODE_TEACHER_FORCED, PHASE_ANSWER, PHASE_QUESTION, ColouredBlock,
                                DialogueBlock, colour_dialogue, colour_sentence,
                                context_id_matrix, nearest_token_ids, pad_future)
from convdial.text import PAD_ID, TokenSequence, build_vocabulary


def make_vocab_and_table(vocab_size=12, dim=6, seed=0):
    tokens = [f"w{i}" for i in range(vocab_size - 2)]
    vocab = build_vocabulary([tokens], 1)
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((vocab.size, dim))
    return vocab, table


def make_block(vocab, num_turns=3, length=5, seed=1):
    rng = np.random.default_rng(seed)
    turns = []
    for _ in range(num_turns):
        q = TokenSequence(rng.integers(2, vocab.size, size=length))
        a = TokenSequence(rng.integers(2, vocab.size, size=length))
        turns.append((q, a))
    return DialogueBlock(tuple(turns))


class TestColouring:
    def test_sentence_shape(self):
        vocab, table = make_vocab_and_table(dim=8)
        seq = TokenSequence.from_tokens(["w0", "w1"], vocab, length=6)
        block = colour_sentence(seq, table)
        assert block.values.shape == (1, 8, 6)

    def test_pad_only_sentence_has_constant_columns(self):
        vocab, table = make_vocab_and_table()
        block = colour_sentence(TokenSequence.padding(5), table)
        for col in range(5):
            np.testing.assert_array_equal(block.values[0, :, col], table[PAD_ID])

    def test_dialogue_shape_desk_scale(self):
        vocab, table = make_vocab_and_table(dim=32)
        block = make_block(vocab, num_turns=5, length=16)
        coloured = colour_dialogue(block, table)
        assert coloured.values.shape == (10, 32, 16)

    def test_channels_alternate_question_answer(self):
        vocab, table = make_vocab_and_table()
        block = make_block(vocab, num_turns=3, length=4)
        coloured = colour_dialogue(block, table)
        for t in range(3):
            np.testing.assert_array_equal(coloured.values[2 * t], table[block.question(t).ids].T)
            np.testing.assert_array_equal(coloured.values[2 * t + 1], table[block.answer(t).ids].T)

    def test_sentence_equals_dialogue_channel_slice(self):
        vocab, table = make_vocab_and_table()
        block = make_block(vocab, num_turns=2, length=4)
        coloured = colour_dialogue(block, table)
        single = colour_sentence(block.answer(1), table)
        np.testing.assert_array_equal(single.values[0], coloured.values[3])

    def test_swapping_turns_permutes_exactly_their_channels(self):
        vocab, table = make_vocab_and_table()
        block = make_block(vocab, num_turns=4, length=4, seed=7)
        swapped_turns = list(block.turns)
        swapped_turns[1], swapped_turns[3] = swapped_turns[3], swapped_turns[1]
        swapped = DialogueBlock(tuple(swapped_turns))
        a = colour_dialogue(block, table).values
        b = colour_dialogue(swapped, table).values
        touched = {2, 3, 6, 7}
        for ch in range(8):
            if ch in touched:
                partner = ch + 4 if ch < 4 else ch - 4
                np.testing.assert_array_equal(b[ch], a[partner])
            else:
                np.testing.assert_array_equal(b[ch], a[ch])

    def test_uncolour_round_trip(self):
        vocab, table = make_vocab_and_table(vocab_size=20, dim=12, seed=11)
        block = make_block(vocab, num_turns=3, length=6, seed=5)
        coloured = colour_dialogue(block, table)
        np.testing.assert_array_equal(nearest_token_ids(coloured, table), block.id_matrix())

    def test_coloured_block_validation(self):
        with pytest.raises(ValueError):
            ColouredBlock(np.zeros((2, 3, 4)), ((0, "question"),))


class TestContextMatrix:
    def test_turn_one_has_only_the_question(self):
        vocab, _ = make_vocab_and_table()
        block = make_block(vocab, num_turns=3, length=4)
        rows = context_id_matrix(block, t=1, num_turns=3, length=4)
        assert rows.shape == (5, 4)
        np.testing.assert_array_equal(rows[0], block.question(0).ids)
        assert (rows[1:] == PAD_ID).all()

    def test_question_channel_is_stable_and_history_follows(self):
        vocab, _ = make_vocab_and_table()
        block = make_block(vocab, num_turns=3, length=4)
        rows = context_id_matrix(block, t=3, num_turns=3, length=4)
        np.testing.assert_array_equal(rows[0], block.question(2).ids)
        np.testing.assert_array_equal(rows[1], block.question(0).ids)
        np.testing.assert_array_equal(rows[2], block.answer(0).ids)
        np.testing.assert_array_equal(rows[3], block.question(1).ids)
        np.testing.assert_array_equal(rows[4], block.answer(1).ids)

    def test_active_rows_grow_by_two_per_turn(self):
        vocab, _ = make_vocab_and_table()
        block = make_block(vocab, num_turns=4, length=4)
        for t in range(1, 5):
            rows = context_id_matrix(block, t=t, num_turns=4, length=4)
            active = 2 * (t - 1) + 1
            assert (rows[active:] == PAD_ID).all()
            assert not (rows[active - 1] == PAD_ID).all()

    def test_out_of_range_turn(self):
        vocab, _ = make_vocab_and_table()
        block = make_block(vocab, num_turns=2, length=4)
        with pytest.raises(ValueError):
            context_id_matrix(block, t=3, num_turns=2, length=4)


class TestPadFuture:
    def setup_method(self):
        self.vocab, _ = make_vocab_and_table()
        self.block = make_block(self.vocab, num_turns=3, length=4, seed=9)

    def test_teacher_forced_turn_one_only_first_question(self):
        out = pad_future(1, MODE_TEACHER_FORCED, PHASE_ANSWER, num_turns=3, length=4,
                         ground_truth=self.block)
        ids = out.id_matrix()
        np.testing.assert_array_equal(ids[0], self.block.question(0).ids)
        assert (ids[1:] == PAD_ID).all()

    def test_fully_predicted_turn_one_question_phase_is_all_pad(self):
        out = pad_future(1, MODE_PREDICTED_DIALOGUE, PHASE_QUESTION, num_turns=3, length=4)
        assert (out.id_matrix() == PAD_ID).all()

    def test_future_turns_are_always_pad(self):
        for mode, phase in [(MODE_TEACHER_FORCED, PHASE_ANSWER),
                            (MODE_PREDICTED_ANSWERS, PHASE_ANSWER),
                            (MODE_PREDICTED_DIALOGUE, PHASE_QUESTION),
                            (MODE_PREDICTED_DIALOGUE, PHASE_ANSWER)]:
            preds_q = [TokenSequence(np.full(4, 3))] * 3
            preds_a = [TokenSequence(np.full(4, 4))] * 3
            out = pad_future(2, mode, phase, num_turns=3, length=4, ground_truth=self.block,
                             predicted_questions=preds_q, predicted_answers=preds_a)
            ids = out.id_matrix()
            assert (ids[4:] == PAD_ID).all()  # channels of turn 3 onward
            assert (ids[3] == PAD_ID).all()   # answer slot at the current turn

    def test_predicted_answer_mode_mixes_histories(self):
        pred_a = [TokenSequence(np.full(4, 5))]
        out = pad_future(2, MODE_PREDICTED_ANSWERS, PHASE_ANSWER, num_turns=3, length=4,
                         ground_truth=self.block, predicted_answers=pred_a)
        ids = out.id_matrix()
        np.testing.assert_array_equal(ids[0], self.block.question(0).ids)  # ground-truth question
        np.testing.assert_array_equal(ids[1], np.full(4, 5))               # predicted answer
        np.testing.assert_array_equal(ids[2], self.block.question(1).ids)  # current question

    def test_missing_history_raises(self):
        with pytest.raises(ValueError):
            pad_future(2, MODE_PREDICTED_ANSWERS, PHASE_ANSWER, num_turns=3, length=4,
                       ground_truth=self.block, predicted_answers=[])

    def test_invalid_phase_for_mode_raises(self):
        with pytest.raises(ValueError):
            pad_future(1, MODE_TEACHER_FORCED, PHASE_QUESTION, num_turns=3, length=4,
                       ground_truth=self.block)

    def test_ground_truth_required_for_teacher_modes(self):
        with pytest.raises(ValueError):
            pad_future(1, MODE_TEACHER_FORCED, PHASE_ANSWER, num_turns=3, length=4)

    def test_fully_predicted_consumes_no_ground_truth(self):
        # structurally: the call succeeds with ground_truth=None at every step
        preds_q = [TokenSequence(np.full(4, 3))]
        out = pad_future(1, MODE_PREDICTED_DIALOGUE, PHASE_ANSWER, num_turns=3, length=4,
                         predicted_questions=preds_q)
        np.testing.assert_array_equal(out.id_matrix()[0], np.full(4, 3))


class TestDialogueBlock:
    def test_inconsistent_lengths_rejected(self):
        q = TokenSequence(np.zeros(3, dtype=np.int64))
        a = TokenSequence(np.zeros(4, dtype=np.int64))
        with pytest.raises(ValueError):
            DialogueBlock(((q, a),))

    def test_id_matrix_roundtrip(self):
        vocab, _ = make_vocab_and_table()
        block = make_block(vocab, num_turns=2, length=3)
        again = DialogueBlock.from_id_matrix(block.id_matrix())
        np.testing.assert_array_equal(again.id_matrix(), block.id_matrix())
