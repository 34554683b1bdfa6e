"""Train the per-answer model on a small corpus and evaluate it.

A shortened version of the full small-scale recipe (fewer records and
epochs, about a minute of CPU): the conditional evidence bound is
optimised with KL annealing, batch-norm statistics are recalibrated, and
the held-out report shows candidate-ranking quality of the generated
answers.
"""

from convdial.cvae import DialogueCVAE, Dimensions, ModelSpec
from convdial.data import corpus_token_lists, encode_corpus, generate_synthetic_corpus
from convdial.evaluation import evaluate_answer_model
from convdial.text import build_vocabulary, random_embedding_table
from convdial.training import TrainConfig, train_model

records = generate_synthetic_corpus(seed=3, n_records=220, turns=5, n_candidates=10,
                                    feature_dim=272)
train_recs, eval_recs = records[:180], records[180:]

vocab = build_vocabulary(corpus_token_lists(train_recs), min_freq=1)
tokens = {t for toks in corpus_token_lists(records, include_candidates=True) for t in toks}
table = random_embedding_table(sorted(tokens), dim=32, seed=3)
train_enc = encode_corpus(train_recs, vocab, table, max_len=16)
eval_enc = encode_corpus(eval_recs, vocab, table, max_len=16)

spec = ModelSpec(kind="answer", dims=Dimensions(vocab=vocab.size)).validate()
model = DialogueCVAE(spec, seed=3)
print(f"answer model: vocab {vocab.size}, "
      f"{sum(p.size for p in model.parameters())} parameters")

cfg = TrainConfig(epochs=18, ramp_epochs=8, batch_size=16, lr=2e-3, seed=3, checkpoint_every=0)
log = train_model(model, train_enc, cfg,
                  log_fn=lambda e: print(f"  epoch {e['epoch']:2d} alpha {e['alpha']:.2f} "
                                         f"ce {e['ce']:7.3f} kld {e['kld']:6.3f}")
                  if e["epoch"] % 3 == 0 else None)
print(f"CE: {log[0]['ce']:.2f} -> {log[-1]['ce']:.2f}")

report = evaluate_answer_model(model, eval_enc, table, vocab, score_fn="w2v", seed=3)
print("\nheld-out report:")
print(report.to_text())
