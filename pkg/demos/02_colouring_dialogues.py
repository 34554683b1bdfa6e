"""Dialogue colouring: sentences and dialogues as multi-channel tensors.

Shows the text pipeline (preprocessing, vocabulary), the packing of a
dialogue into its 2T-channel embedding block, the nearest-embedding
round trip, and the future-padded inputs used by turn-by-turn evaluation.
"""

import numpy as np

from convdial.colouring import (DialogueBlock, colour_dialogue, colour_sentence,
                                nearest_token_ids, pad_future)
from convdial.text import TokenSequence, build_vocabulary, preprocess_sentence

dialogue_text = [
    ("What's in the picture?", "2 red balls"),
    ("Is it crowded?", "No"),
    ("What color appears the most?", "Red"),
]

tokenised = [(preprocess_sentence(q), preprocess_sentence(a)) for q, a in dialogue_text]
print("preprocessed:", tokenised[0])  # apostrophes dropped, digits worded

vocab = build_vocabulary([toks for pair in tokenised for toks in pair], min_freq=1)
print(f"vocabulary of {vocab.size} entries (PAD=0, UNK=1)")

LENGTH = 8
block = DialogueBlock(tuple(
    (TokenSequence.from_tokens(q, vocab, LENGTH), TokenSequence.from_tokens(a, vocab, LENGTH))
    for q, a in tokenised))

# a random embedding table stands in for the learned one
table = np.random.default_rng(0).standard_normal((vocab.size, 12))

sentence = colour_sentence(block.question(0), table)
coloured = colour_dialogue(block, table)
print("one sentence colours to", sentence.values.shape, "(channels, embed, positions)")
print("the dialogue colours to ", coloured.values.shape, "- channels alternate q1,a1,q2,a2,...")

decoded = nearest_token_ids(coloured, table)
print("nearest-embedding decode recovers the ids:",
      bool((decoded == block.id_matrix()).all()))

# future-padded input for evaluating turn 2 with ground-truth history
padded = pad_future(2, "d-qa", "answer", num_turns=3, length=LENGTH, ground_truth=block)
ids = padded.id_matrix()
print("\npad_future at turn 2 (mode d-qa): non-PAD channels =",
      [ch for ch in range(ids.shape[0]) if ids[ch].any()],
      "- history pair, current question; everything later is PAD")

# the fully predicted mode starts from nothing at all
empty = pad_future(1, "d-qhat-ahat", "question", num_turns=3, length=LENGTH)
print("pad_future at turn 1 (mode d-qhat-ahat, question phase) is all PAD:",
      bool((empty.id_matrix() == 0).all()))
