"""Generation pipelines, candidate scoring, and the ranking metrics.

Generation and scoring run in eval mode under ``no_grad``; the default is
the deterministic decode (latents at the relevant Gaussian mean) so that
fixed seeds give byte-identical outputs.  Pass an ``rng`` to sample.

For the autoregressive block model a single causal pass already realises
sequential decoding: the masking guarantees that the logits for unravelled
row r depend only on rows before r, so choosing tokens in row order reads
the same values a row-by-row recomputation would produce (a test asserts
this equivalence).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import log_softmax_np, logmeanexp_np, no_grad
from .colouring import (ITERATIVE_MODES, MODE_PREDICTED_ANSWERS, MODE_PREDICTED_DIALOGUE,
                        MODE_TEACHER_FORCED, PHASE_ANSWER, PHASE_QUESTION, DialogueBlock,
                        pad_future)
from .cvae import Batch, DialogueCVAE, KIND_ANSWER, gaussian_log_density, kl_diag_gaussian, reparameterize
from .data import EncodedRecord
from .text import FixedEmbeddingTable, TokenSequence, cosine_similarity, sentence_embedding_avg
from .training import context_rows

SCORE_ELBO = "elbo"
SCORE_LW = "lw"
SCORE_W2V = "w2v"


def _single_condition_batch(rec: EncodedRecord, x_ids=None, context=None) -> Batch:
    return Batch(features=rec.features[None, :], caption_cols=rec.caption_cols[None],
                 x_ids=x_ids, context_ids=context)


def _nll_of_targets(logits: np.ndarray, targets: np.ndarray) -> float:
    """Summed token NLL of an id matrix under (channels, L, V) logits."""
    lp = log_softmax_np(logits, axis=-1)
    ch, length = targets.shape
    rows = lp.reshape(ch * length, -1)
    return float(-rows[np.arange(ch * length), targets.reshape(-1)].sum())


def generate_block(model: DialogueCVAE, rec: EncodedRecord, rng: np.random.Generator | None = None):
    """Whole-dialogue generation from the condition alone.

    Returns (DialogueBlock, logits array).  ``rng=None`` decodes at the
    prior mean; otherwise one prior sample is drawn.  Token choice is the
    per-position argmax, taken in unravelled row order.
    """
    if model.spec.kind == KIND_ANSWER:
        raise ValueError("block generation applies to block models")
    with no_grad():
        batch = _single_condition_batch(rec)
        gauss_p, y = model.prior_forward(batch, "eval")
        eps = None if rng is None else rng.standard_normal((1, model.spec.dims.latent))
        z = gauss_p.mu if eps is None else reparameterize(gauss_p, eps)
        logits = model.decoder_forward(z, y, "eval").data[0]
    ids = logits.argmax(axis=-1)
    return DialogueBlock.from_id_matrix(ids), logits


@dataclass
class TurnPrediction:
    turn: int
    answer_ids: np.ndarray
    answer_logits: np.ndarray              # (L, V)
    kld: float
    question_ids: np.ndarray | None = None


@dataclass
class IterativeTrace:
    mode: str
    predicted: DialogueBlock
    per_turn: list


def generate_iterative(model: DialogueCVAE, rec: EncodedRecord, mode: str,
                       ground_truth: DialogueBlock | None = None) -> IterativeTrace:
    """Turn-by-turn reconstruction-pipeline decoding.

    Each step builds the future-padded input block for the mode, encodes it
    with the condition, decodes at the posterior mean, and extracts the
    current turn's item.  Ground truth is required (and used) only by the
    modes whose history contains it; the fully predicted mode never touches
    it.
    """
    if model.spec.kind == KIND_ANSWER:
        raise ValueError("iterative evaluation applies to block models")
    if mode not in ITERATIVE_MODES:
        raise ValueError(f"unknown iterative mode {mode!r}")
    if mode in (MODE_TEACHER_FORCED, MODE_PREDICTED_ANSWERS) and ground_truth is None:
        raise ValueError(f"mode {mode} requires the ground-truth dialogue")
    d = model.spec.dims
    turns, length = d.turns, d.max_len
    pred_questions: list[TokenSequence] = []
    pred_answers: list[TokenSequence] = []
    per_turn: list[TurnPrediction] = []

    def reconstruct(block: DialogueBlock):
        with no_grad():
            batch = _single_condition_batch(rec, x_ids=block.id_matrix()[None])
            logits, gauss_q, gauss_p = model.reconstruction(batch, "eval", eps=None)
            kld = float(kl_diag_gaussian(gauss_q, gauss_p).data[0])
        return logits.data[0], kld

    for t in range(1, turns + 1):
        if mode == MODE_PREDICTED_DIALOGUE:
            q_input = pad_future(t, mode, PHASE_QUESTION, num_turns=turns, length=length,
                                 predicted_questions=pred_questions, predicted_answers=pred_answers)
            q_logits, _ = reconstruct(q_input)
            q_ids = q_logits[2 * (t - 1)].argmax(axis=-1)
            pred_questions.append(TokenSequence(q_ids))
        input_block = pad_future(t, mode, PHASE_ANSWER, num_turns=turns, length=length,
                                 ground_truth=ground_truth,
                                 predicted_questions=pred_questions,
                                 predicted_answers=pred_answers)
        logits, kld = reconstruct(input_block)
        a_channel = 2 * (t - 1) + 1
        answer_logits = logits[a_channel]
        a_ids = answer_logits.argmax(axis=-1)
        pred_answers.append(TokenSequence(a_ids))
        per_turn.append(TurnPrediction(
            turn=t, answer_ids=a_ids, answer_logits=answer_logits, kld=kld,
            question_ids=pred_questions[t - 1].ids if mode == MODE_PREDICTED_DIALOGUE else None))

    if mode == MODE_PREDICTED_DIALOGUE:
        questions = pred_questions
    else:
        questions = [ground_truth.question(t) for t in range(turns)]
    predicted = DialogueBlock(tuple((questions[t], pred_answers[t]) for t in range(turns)))
    return IterativeTrace(mode=mode, predicted=predicted, per_turn=per_turn)


# -- candidate scoring -------------------------------------------------------------


def score_candidates_model(model: DialogueCVAE, rec: EncodedRecord, turn: int,
                           candidate_ids: np.ndarray, method: str = SCORE_ELBO,
                           lw_samples: int = 50, rng: np.random.Generator | None = None) -> np.ndarray:
    """Marginal-likelihood candidate scores under the answer model.

    ``elbo`` scores each candidate by its conditional evidence bound with a
    posterior-mean latent; ``lw`` estimates log p(candidate | condition) by
    averaging the decoder likelihood over prior samples (log-mean-exp).
    In dirac mode every prior sample is the deterministic encoding, so the
    ``lw`` score equals the direct conditional log-likelihood for any K.
    """
    if model.spec.kind != KIND_ANSWER:
        raise ValueError("model-likelihood scoring is defined for the answer model")
    if method not in (SCORE_ELBO, SCORE_LW):
        raise ValueError(f"unknown scoring method {method!r}")
    candidate_ids = np.asarray(candidate_ids)
    n_cands, length = candidate_ids.shape
    ctx = context_rows(rec.dialogue_ids, turn)
    with no_grad():
        if method == SCORE_ELBO:
            batch = Batch(features=np.repeat(rec.features[None], n_cands, axis=0),
                          caption_cols=np.repeat(rec.caption_cols[None], n_cands, axis=0),
                          x_ids=candidate_ids[:, None, :],
                          context_ids=np.repeat(ctx[None], n_cands, axis=0))
            logits, gauss_q, gauss_p = model.reconstruction(batch, "eval", eps=None)
            lp = log_softmax_np(logits.data, axis=-1)[:, 0]  # (C, L, V)
            ll = lp[np.arange(n_cands)[:, None], np.arange(length)[None, :], candidate_ids].sum(axis=1)
            if model.spec.dirac:
                return ll
            kld = kl_diag_gaussian(gauss_q, gauss_p).data
            return ll - kld

        k = 1 if model.spec.dirac else int(lw_samples)
        if k < 1:
            raise ValueError("lw requires at least one sample")
        cond = _single_condition_batch(rec, context=ctx[None])
        gauss_p, y = model.prior_forward(cond, "eval")
        mu = np.repeat(gauss_p.mu.data, k, axis=0)
        log_var = np.repeat(gauss_p.log_var.data, k, axis=0)
        if model.spec.dirac or rng is None:
            z_data = mu
        else:
            z_data = mu + rng.standard_normal(mu.shape) * np.exp(0.5 * log_var)
        from .autodiff import Tensor
        y_rep = Tensor(np.repeat(y.data, k, axis=0))
        logits = model.decoder_forward(Tensor(z_data), y_rep, "eval")
        lp = log_softmax_np(logits.data, axis=-1)[:, 0]  # (K, L, V)
        per_sample = np.empty((k, n_cands))
        pos = np.arange(length)
        for c in range(n_cands):
            per_sample[:, c] = lp[:, pos, candidate_ids[c]].sum(axis=1)
        if model.spec.dirac or k == 1:
            return per_sample[0]
        return logmeanexp_np(per_sample, axis=0)


def score_candidates_w2v(predicted_tokens: list, candidate_tokens: list,
                         table: FixedEmbeddingTable) -> np.ndarray:
    """Cosine similarity between averaged fixed embeddings, one per candidate."""
    pred = sentence_embedding_avg(predicted_tokens, table)
    return np.asarray([cosine_similarity(pred, sentence_embedding_avg(c, table))
                       for c in candidate_tokens])


def rank_of_truth(scores: np.ndarray, truth_index: int) -> int:
    """1-based rank under descending score; ties resolve by list order."""
    scores = np.asarray(scores)
    s = scores[truth_index]
    better = int((scores > s).sum())
    tied_before = int((scores[:truth_index] == s).sum())
    return 1 + better + tied_before


@dataclass(frozen=True)
class RankingMetrics:
    mr: float
    mrr: float
    r_at_1: float
    r_at_5: float
    r_at_10: float


def ranking_metrics(ranks) -> RankingMetrics:
    """Mean rank, mean reciprocal rank, and recall at 1/5/10.

    MRR is the mean of per-example reciprocal ranks, which is what the
    reference result tables are consistent with (it is not 1/MR).
    """
    ranks = np.asarray(list(ranks), dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("ranking_metrics requires at least one rank")
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    return RankingMetrics(
        mr=float(ranks.mean()),
        mrr=float((1.0 / ranks).mean()),
        r_at_1=float((ranks <= 1).mean()),
        r_at_5=float((ranks <= 5).mean()),
        r_at_10=float((ranks <= 10).mean()),
    )


# -- dialogue-level similarity metrics ----------------------------------------------


def caption_question_similarity(question_token_lists: list, caption_tokens: list,
                                table: FixedEmbeddingTable) -> float:
    """Mean cosine between each question's average embedding and the caption's."""
    cap = sentence_embedding_avg(caption_tokens, table)
    sims = [cosine_similarity(sentence_embedding_avg(q, table), cap)
            for q in question_token_lists]
    return float(np.mean(sims))


def latent_dispersion(model: DialogueCVAE, generated_ids: np.ndarray, true_ids: np.ndarray,
                      rec: EncodedRecord) -> float:
    """KL between the posterior encodings of a generated and the true dialogue.

    Both dialogues are encoded against the same condition; the value is 0
    exactly when they encode identically and is always non-negative.
    """
    if model.spec.kind == KIND_ANSWER:
        raise ValueError("latent dispersion is defined for block models")
    with no_grad():
        batch = _single_condition_batch(rec)
        _, y = model.prior_forward(batch, "eval")
        gauss_gen = model.encoder_forward(np.asarray(generated_ids)[None], y, "eval")
        gauss_true = model.encoder_forward(np.asarray(true_ids)[None], y, "eval")
        return float(kl_diag_gaussian(gauss_gen, gauss_true).data[0])


def importance_weights(model: DialogueCVAE, batch_one: Batch, n_samples: int,
                       rng: np.random.Generator, chunk: int = 2000) -> np.ndarray:
    """Log importance weights for the evidence, posterior proposal.

    Each weight is log p(x | z, y) + log p(z | y) - log q(z | x, y) for one
    posterior draw.  Their mean estimates the evidence bound; their
    log-mean-exp estimates log p(x | y) itself.
    """
    if batch_one.size != 1:
        raise ValueError("importance_weights expects a single example")
    d = model.spec.dims
    with no_grad():
        gauss_p, y = model.prior_forward(batch_one, "eval")
        gauss_q = model.encoder_forward(batch_one.x_ids, y, "eval")
        mu_q = gauss_q.mu.data[0]
        lv_q = gauss_q.log_var.data[0]
        mu_p = gauss_p.mu.data[0]
        lv_p = gauss_p.log_var.data[0]
        targets = np.asarray(batch_one.x_ids)[0]
        weights = []
        from .autodiff import Tensor
        remaining = n_samples
        while remaining > 0:
            k = min(chunk, remaining)
            remaining -= k
            z = mu_q + rng.standard_normal((k, d.latent)) * np.exp(0.5 * lv_q)
            y_rep = Tensor(np.repeat(y.data, k, axis=0))
            logits = model.decoder_forward(Tensor(z), y_rep, "eval").data
            lp = log_softmax_np(logits, axis=-1)
            ch, length = targets.shape
            flat = lp.reshape(k, ch * length, -1)
            ll = flat[:, np.arange(ch * length), targets.reshape(-1)].sum(axis=1)
            weights.append(ll + gaussian_log_density(z, mu_p, lv_p)
                           - gaussian_log_density(z, mu_q, lv_q))
        return np.concatenate(weights)


def evidence_bounds(model: DialogueCVAE, batch_one: Batch, n_samples: int,
                    rng: np.random.Generator, chunk: int = 2000) -> tuple:
    """(ELBO estimate, log-marginal estimate) from one shared sample set.

    Sharing the draws keeps the comparison meaningful even when the
    posterior has collapsed onto the prior and the true gap is tiny:
    independent estimates of two nearly equal quantities differ by pure
    sampling noise, whereas here the difference is the (non-negative)
    Jensen gap of the same weights.
    """
    weights = importance_weights(model, batch_one, n_samples, rng, chunk=chunk)
    return float(weights.mean()), float(logmeanexp_np(weights, axis=0))


def importance_log_marginal(model: DialogueCVAE, batch_one: Batch, n_samples: int,
                            rng: np.random.Generator, chunk: int = 2000) -> float:
    """Importance-sampling estimate of log p(x | y) with the posterior proposal."""
    return float(logmeanexp_np(importance_weights(model, batch_one, n_samples, rng, chunk),
                               axis=0))


def monte_carlo_elbo(model: DialogueCVAE, batch_one: Batch, n_samples: int,
                     rng: np.random.Generator) -> float:
    """Sampled evidence bound: mean reconstruction log-likelihood minus KL."""
    if batch_one.size != 1:
        raise ValueError("monte_carlo_elbo expects a single example")
    d = model.spec.dims
    with no_grad():
        gauss_p, y = model.prior_forward(batch_one, "eval")
        gauss_q = model.encoder_forward(batch_one.x_ids, y, "eval")
        kld = float(kl_diag_gaussian(gauss_q, gauss_p).data[0])
        mu_q = gauss_q.mu.data[0]
        lv_q = gauss_q.log_var.data[0]
        z = mu_q + rng.standard_normal((n_samples, d.latent)) * np.exp(0.5 * lv_q)
        from .autodiff import Tensor
        y_rep = Tensor(np.repeat(y.data, n_samples, axis=0))
        logits = model.decoder_forward(Tensor(z), y_rep, "eval").data
        lp = log_softmax_np(logits, axis=-1)
        targets = np.asarray(batch_one.x_ids)[0]
        ch, length = targets.shape
        flat = lp.reshape(n_samples, ch * length, -1)
        ll = flat[:, np.arange(ch * length), targets.reshape(-1)].sum(axis=1)
        return float(ll.mean()) - kld
