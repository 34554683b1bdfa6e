"""Packing sentences and dialogues into multi-channel embedding tensors.

A sentence of L token ids becomes a single-channel (1, E, L) "image"
whose columns are embedding vectors; a dialogue of T question-answer
pairs becomes a (2T, E, L) stack whose channels alternate question,
answer, question, answer in turn order.  Channel 2t holds question t+1
and channel 2t+1 holds answer t+1.

``pad_future`` builds the inputs for turn-by-turn evaluation: everything
before the current turn is filled from ground-truth or predicted history
depending on the mode, the current turn holds the question being answered
(or nothing, in the question phase of fully-predicted evaluation), and
every later turn is PAD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .text import PAD_ID, TokenSequence

MODE_BLOCK = "block"
MODE_TEACHER_FORCED = "d-qa"          # ground-truth questions and answers
MODE_PREDICTED_ANSWERS = "d-qhat-a"   # ground-truth questions, predicted answers
MODE_PREDICTED_DIALOGUE = "d-qhat-ahat"  # fully predicted history
ITERATIVE_MODES = (MODE_TEACHER_FORCED, MODE_PREDICTED_ANSWERS, MODE_PREDICTED_DIALOGUE)

PHASE_QUESTION = "question"
PHASE_ANSWER = "answer"


@dataclass(frozen=True)
class DialogueBlock:
    """Exactly T (question, answer) pairs of equal-length id sequences."""

    turns: tuple

    def __post_init__(self):
        turns = tuple((q, a) for q, a in self.turns)
        lengths = {len(q) for q, a in turns} | {len(a) for q, a in turns}
        if len(lengths) > 1:
            raise ValueError(f"inconsistent sequence lengths in dialogue block: {lengths}")
        object.__setattr__(self, "turns", turns)

    @property
    def num_turns(self) -> int:
        return len(self.turns)

    @property
    def length(self) -> int:
        return len(self.turns[0][0])

    def question(self, t: int) -> TokenSequence:
        return self.turns[t][0]

    def answer(self, t: int) -> TokenSequence:
        return self.turns[t][1]

    def id_matrix(self) -> np.ndarray:
        """(2T, L) int matrix in channel order q1, a1, ..., qT, aT."""
        rows = []
        for q, a in self.turns:
            rows.append(q.ids)
            rows.append(a.ids)
        return np.stack(rows)

    @classmethod
    def from_id_matrix(cls, ids: np.ndarray) -> "DialogueBlock":
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[0] % 2 != 0:
            raise ValueError(f"expected (2T, L) id matrix, got {ids.shape}")
        turns = tuple((TokenSequence(ids[2 * t]), TokenSequence(ids[2 * t + 1]))
                      for t in range(ids.shape[0] // 2))
        return cls(turns)

    @classmethod
    def all_pad(cls, num_turns: int, length: int) -> "DialogueBlock":
        pad = TokenSequence.padding(length)
        return cls(tuple((pad, pad) for _ in range(num_turns)))


@dataclass(frozen=True)
class ColouredBlock:
    """Embedded block: values (M, E, L), with the channel-to-item map."""

    values: np.ndarray
    channel_items: tuple  # per channel: (turn index, "question"|"answer")

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"coloured block must be (M, E, L), got {v.shape}")
        if v.shape[0] != len(self.channel_items):
            raise ValueError("channel map size does not match channel count")
        object.__setattr__(self, "values", v)

    @property
    def num_channels(self):
        return self.values.shape[0]


def colour_sentence(seq: TokenSequence, table: np.ndarray) -> ColouredBlock:
    """Single-channel colouring: column l is the embedding of token l."""
    table = np.asarray(table)
    values = table[seq.ids].T[None, :, :]
    return ColouredBlock(values, ((0, PHASE_ANSWER),))


def colour_dialogue(block: DialogueBlock, table: np.ndarray) -> ColouredBlock:
    """2T-channel colouring with channels alternating question/answer."""
    table = np.asarray(table)
    ids = block.id_matrix()
    values = table[ids].transpose(0, 2, 1)  # (2T, E, L)
    items = []
    for t in range(block.num_turns):
        items.append((t, PHASE_QUESTION))
        items.append((t, PHASE_ANSWER))
    return ColouredBlock(values, tuple(items))


def nearest_token_ids(coloured: ColouredBlock, table: np.ndarray) -> np.ndarray:
    """Decode each column back to the id of its nearest embedding row."""
    table = np.asarray(table)
    m, e, l = coloured.values.shape
    cols = coloured.values.transpose(0, 2, 1).reshape(-1, e)
    d2 = (cols * cols).sum(1)[:, None] - 2.0 * cols @ table.T + (table * table).sum(1)[None, :]
    return d2.argmin(axis=1).reshape(m, l)


def context_id_matrix(block_or_history, t: int, num_turns: int, length: int) -> np.ndarray:
    """Fixed-width context rows for per-answer conditioning at turn ``t``.

    Row 0 holds the current question (a stable channel position at every
    step), rows 1..2(t-1) the history q/a pairs in dialogue order, and the
    remaining rows up to 2T-1 are PAD.  The fixed width keeps convolution
    weights well-defined for every step; the number of active rows at step
    t is 2(t-1)+1.
    """
    if not (1 <= t <= num_turns):
        raise ValueError(f"turn index {t} outside 1..{num_turns}")
    rows = np.full((2 * num_turns - 1, length), PAD_ID, dtype=np.int64)
    if isinstance(block_or_history, DialogueBlock):
        pairs = block_or_history.turns
    else:
        pairs = tuple(block_or_history)
    rows[0] = pairs[t - 1][0].ids
    for s in range(t - 1):
        q, a = pairs[s]
        rows[2 * s + 1] = q.ids
        rows[2 * s + 2] = a.ids
    return rows


def pad_future(t: int, mode: str, phase: str, *, num_turns: int, length: int,
               ground_truth: DialogueBlock | None = None,
               predicted_questions=(), predicted_answers=()) -> DialogueBlock:
    """Future-padded input block for iterative evaluation at turn ``t``.

    Modes fill turns below ``t`` with (ground-truth q, ground-truth a),
    (ground-truth q, predicted a), or (predicted q, predicted a).  At turn
    ``t`` the ground-truth-question modes place (q_t, PAD); the fully
    predicted mode places (PAD, PAD) in its question phase and
    (predicted q_t, PAD) in its answer phase.  Turns above ``t`` are PAD.
    """
    if mode not in ITERATIVE_MODES:
        raise ValueError(f"unknown iterative mode {mode!r}")
    if phase not in (PHASE_QUESTION, PHASE_ANSWER):
        raise ValueError(f"unknown phase {phase!r}")
    if mode in (MODE_TEACHER_FORCED, MODE_PREDICTED_ANSWERS):
        if phase != PHASE_ANSWER:
            raise ValueError(f"mode {mode} only has an answer phase")
        if ground_truth is None:
            raise ValueError(f"mode {mode} requires ground truth")
    if not (1 <= t <= num_turns):
        raise ValueError(f"turn index {t} outside 1..{num_turns}")

    predicted_questions = list(predicted_questions)
    predicted_answers = list(predicted_answers)
    pad = TokenSequence.padding(length)

    def hist_question(s):
        if mode == MODE_PREDICTED_DIALOGUE:
            if s >= len(predicted_questions):
                raise ValueError(f"missing predicted question for turn {s + 1}")
            return predicted_questions[s]
        return ground_truth.question(s)

    def hist_answer(s):
        if mode == MODE_TEACHER_FORCED:
            return ground_truth.answer(s)
        if s >= len(predicted_answers):
            raise ValueError(f"missing predicted answer for turn {s + 1}")
        return predicted_answers[s]

    turns = []
    for s in range(t - 1):
        turns.append((hist_question(s), hist_answer(s)))
    if mode == MODE_PREDICTED_DIALOGUE:
        if phase == PHASE_QUESTION:
            turns.append((pad, pad))
        else:
            if len(predicted_questions) < t:
                raise ValueError(f"answer phase at turn {t} requires the predicted question")
            turns.append((predicted_questions[t - 1], pad))
    else:
        turns.append((ground_truth.question(t - 1), pad))
    for _ in range(t, num_turns):
        turns.append((pad, pad))
    return DialogueBlock(tuple(turns))
