"""Dataset-level evaluation runners and the report format.

A report aggregates, over one corpus split:

* CE / KLD of the model's objective terms under the evaluation mode,
* candidate-ranking metrics (MR, MRR, R@k) where ranking applies,
* the question-relevance and latent-dispersion similarity metrics for
  block models,
* teacher-forced token accuracy for the answer model.

CE bookkeeping: for iterative modes the reported CE is the summed token
NLL of the ground-truth *answers* under each turn's extraction, which
keeps the three modes directly comparable (they differ only in what fills
the history).  Block-mode CE is the full-block NLL of the true dialogue
decoded at the prior mean.  The answer model reports its per-turn
reconstruction CE.

Reports serialise to a flat key-value text table and a JSON document;
neither carries timestamps, so identical runs produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import log_softmax_np, no_grad
from .colouring import (ITERATIVE_MODES, MODE_BLOCK, MODE_PREDICTED_ANSWERS,
                        MODE_PREDICTED_DIALOGUE, MODE_TEACHER_FORCED, DialogueBlock)
from .cvae import DialogueCVAE, KIND_ANSWER, kl_diag_gaussian
from .data import EncodedRecord
from .inference import (SCORE_ELBO, SCORE_LW, SCORE_W2V, _nll_of_targets, _single_condition_batch,
                        caption_question_similarity, generate_block, generate_iterative,
                        latent_dispersion, rank_of_truth, ranking_metrics, score_candidates_model,
                        score_candidates_w2v)
from .text import FixedEmbeddingTable, Vocabulary
from .training import answer_batch

MODE_ANSWER = "answer"


@dataclass
class EvalReport:
    model_kind: str
    mode: str
    score_fn: str | None
    seed: int
    n_records: int
    ce: float
    kld: float
    mr: float | None = None
    mrr: float | None = None
    r_at_1: float | None = None
    r_at_5: float | None = None
    r_at_10: float | None = None
    sim_cq: float | None = None
    sim_dispersion: float | None = None
    token_accuracy: float | None = None

    def __post_init__(self):
        if self.mr is not None and self.mr < 1:
            raise ValueError(f"mean rank {self.mr} < 1")
        if self.mrr is not None and not (0 < self.mrr <= 1):
            raise ValueError(f"mean reciprocal rank {self.mrr} outside (0, 1]")
        recalls = [r for r in (self.r_at_1, self.r_at_5, self.r_at_10) if r is not None]
        if recalls != sorted(recalls):
            raise ValueError("recall must be nondecreasing in k")
        if self.sim_cq is not None and not (-1.0 - 1e-9 <= self.sim_cq <= 1.0 + 1e-9):
            raise ValueError(f"sim_cq {self.sim_cq} outside [-1, 1]")
        if self.sim_dispersion is not None and self.sim_dispersion < 0:
            raise ValueError(f"sim_dispersion {self.sim_dispersion} < 0")

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if value is None:
                continue
            if isinstance(value, float):
                lines.append(f"{key:<16} {value:.6f}")
            else:
                lines.append(f"{key:<16} {value}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    def save(self, json_path, text_path=None):
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        if text_path is not None:
            with open(text_path, "w", encoding="utf-8") as fh:
                fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


def evaluate_answer_model(model: DialogueCVAE, encoded: list[EncodedRecord],
                          table: FixedEmbeddingTable, vocab: Vocabulary,
                          score_fn: str = SCORE_W2V, lw_samples: int = 50,
                          seed: int = 0, rng: np.random.Generator | None = None) -> EvalReport:
    """Per-turn evaluation with ground-truth context (the answer model's task).

    CE/KLD are the reconstruction objective terms.  The predicted answer is
    the prior-mean decode; its tokens feed the embedding-similarity ranking
    (``w2v``) while ``elbo``/``lw`` rank candidates by model likelihood.
    """
    if model.spec.kind != KIND_ANSWER:
        raise ValueError("evaluate_answer_model requires an answer model")
    turns = model.spec.dims.turns
    ranks = []
    ce_sum = kld_sum = 0.0
    correct = 0
    total_tokens = 0
    for rec in encoded:
        items = [(0, t) for t in range(1, turns + 1)]
        batch = answer_batch([rec], items)
        with no_grad():
            logits, gauss_q, gauss_p = model.reconstruction(batch, "eval", eps=None)
            lp = log_softmax_np(logits.data, axis=-1)
            answers = np.asarray(batch.x_ids)[:, 0]  # (T, L)
            pos = np.arange(answers.shape[1])
            ll = lp[:, 0][np.arange(turns)[:, None], pos[None, :], answers]
            ce_sum += float(-ll.sum())
            if not model.spec.dirac:
                kld_sum += float(kl_diag_gaussian(gauss_q, gauss_p).data.sum())
            gen_logits, _ = model.generation(batch, "eval", eps=None)
        pred_ids = gen_logits.data[:, 0].argmax(axis=-1)  # (T, L)
        mask = answers != 0
        correct += int((pred_ids[mask] == answers[mask]).sum())
        total_tokens += int(mask.sum())
        if rec.candidate_ids is not None:
            for t in range(1, turns + 1):
                gt_index = int(rec.answer_index[t - 1])
                if score_fn == SCORE_W2V:
                    pred_tokens = vocab.decode(pred_ids[t - 1])
                    scores = score_candidates_w2v(pred_tokens, rec.candidate_tokens[t - 1], table)
                elif score_fn in (SCORE_ELBO, SCORE_LW):
                    scores = score_candidates_model(model, rec, t, rec.candidate_ids[t - 1],
                                                    method=score_fn, lw_samples=lw_samples, rng=rng)
                else:
                    raise ValueError(f"unknown score function {score_fn!r}")
                ranks.append(rank_of_truth(scores, gt_index))
    n = len(encoded)
    report = dict(model_kind=model.spec.kind, mode=MODE_ANSWER, score_fn=score_fn, seed=seed,
                  n_records=n, ce=ce_sum / n, kld=kld_sum / n,
                  token_accuracy=(correct / total_tokens) if total_tokens else None)
    if ranks:
        rm = ranking_metrics(ranks)
        report.update(mr=rm.mr, mrr=rm.mrr, r_at_1=rm.r_at_1, r_at_5=rm.r_at_5, r_at_10=rm.r_at_10)
    return EvalReport(**report)


def evaluate_block_model(model: DialogueCVAE, encoded: list[EncodedRecord],
                         table: FixedEmbeddingTable, vocab: Vocabulary, mode: str,
                         score_fn: str | None = SCORE_W2V, seed: int = 0,
                         rng: np.random.Generator | None = None) -> EvalReport:
    """Block or iterative evaluation of the whole-dialogue models."""
    if model.spec.kind == KIND_ANSWER:
        raise ValueError("evaluate_block_model requires a block model")
    if mode == MODE_BLOCK:
        return _evaluate_block_generation(model, encoded, table, vocab, seed, rng)
    if mode not in ITERATIVE_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if score_fn in (SCORE_ELBO, SCORE_LW):
        raise ValueError("model-likelihood scoring applies to the answer model; use w2v")

    turns = model.spec.dims.turns
    ce_sum = kld_sum = 0.0
    sim_cq_sum = disp_sum = 0.0
    ranks = []
    rank_candidates = mode in (MODE_TEACHER_FORCED, MODE_PREDICTED_ANSWERS)
    for rec in encoded:
        truth = DialogueBlock.from_id_matrix(rec.dialogue_ids.reshape(-1, rec.dialogue_ids.shape[-1]))
        trace = generate_iterative(
            model, rec, mode,
            ground_truth=None if mode == MODE_PREDICTED_DIALOGUE else truth)
        for t, pred in enumerate(trace.per_turn, start=1):
            gt_answer = rec.dialogue_ids[t - 1, 1]
            lp = log_softmax_np(pred.answer_logits, axis=-1)
            ce_sum += float(-lp[np.arange(len(gt_answer)), gt_answer].sum())
            kld_sum += pred.kld / turns
            if rank_candidates and rec.candidate_ids is not None:
                pred_tokens = vocab.decode(pred.answer_ids)
                scores = score_candidates_w2v(pred_tokens, rec.candidate_tokens[t - 1], table)
                ranks.append(rank_of_truth(scores, int(rec.answer_index[t - 1])))
        question_tokens = [vocab.decode(trace.predicted.question(t).ids) for t in range(turns)]
        sim_cq_sum += caption_question_similarity(question_tokens, rec.caption_tokens, table)
        disp_sum += latent_dispersion(model, trace.predicted.id_matrix(),
                                      rec.dialogue_ids.reshape(-1, rec.dialogue_ids.shape[-1]), rec)
    n = len(encoded)
    report = dict(model_kind=model.spec.kind, mode=mode,
                  score_fn=score_fn if rank_candidates else None, seed=seed, n_records=n,
                  ce=ce_sum / n, kld=kld_sum / n, sim_cq=sim_cq_sum / n,
                  sim_dispersion=disp_sum / n)
    if ranks:
        rm = ranking_metrics(ranks)
        report.update(mr=rm.mr, mrr=rm.mrr, r_at_1=rm.r_at_1, r_at_5=rm.r_at_5, r_at_10=rm.r_at_10)
    return EvalReport(**report)


def _evaluate_block_generation(model, encoded, table, vocab, seed, rng):
    turns = model.spec.dims.turns
    ce_sum = kld_sum = sim_cq_sum = disp_sum = 0.0
    for rec in encoded:
        true_ids = rec.dialogue_ids.reshape(-1, rec.dialogue_ids.shape[-1])
        generated, gen_logits = generate_block(model, rec, rng=rng)
        ce_sum += _nll_of_targets(gen_logits, true_ids)
        with no_grad():
            batch = _single_condition_batch(rec)
            gauss_p, y = model.prior_forward(batch, "eval")
            gauss_q = model.encoder_forward(true_ids[None], y, "eval")
            kld_sum += float(kl_diag_gaussian(gauss_q, gauss_p).data[0])
        question_tokens = [vocab.decode(generated.question(t).ids) for t in range(turns)]
        sim_cq_sum += caption_question_similarity(question_tokens, rec.caption_tokens, table)
        disp_sum += latent_dispersion(model, generated.id_matrix(), true_ids, rec)
    n = len(encoded)
    return EvalReport(model_kind=model.spec.kind, mode=MODE_BLOCK, score_fn=None, seed=seed,
                      n_records=n, ce=ce_sum / n, kld=kld_sum / n, sim_cq=sim_cq_sum / n,
                      sim_dispersion=disp_sum / n)


def write_transcripts(records, blocks, vocab: Vocabulary, path):
    """Plain-text prediction transcripts, one dialogue block per image."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec, block in zip(records, blocks):
            fh.write(f"image {rec.image_id}\n")
            fh.write(f"caption: {' '.join(rec.caption_tokens)}\n")
            for t in range(block.num_turns):
                q = " ".join(vocab.decode(block.question(t).ids)) or "-"
                a = " ".join(vocab.decode(block.answer(t).ids)) or "-"
                fh.write(f"q{t + 1}: {q}\n")
                fh.write(f"a{t + 1}: {a}\n")
            fh.write("\n")


def render_report_table(reports: list[EvalReport]) -> str:
    """Aligned comparison table, one row per report."""
    columns = ["model_kind", "mode", "score_fn", "ce", "kld", "mr", "mrr",
               "r_at_1", "r_at_5", "r_at_10", "sim_cq", "sim_dispersion", "token_accuracy"]
    rows = [columns]
    for rep in reports:
        d = asdict(rep)
        row = []
        for c in columns:
            v = d.get(c)
            if v is None:
                row.append("-")
            elif isinstance(v, float):
                row.append(f"{v:.4f}")
            else:
                row.append(str(v))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(columns))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"
