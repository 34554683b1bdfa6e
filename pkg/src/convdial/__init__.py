"""convdial: convolutional conditional-VAE models of grounded dialogue.

The package turns token sequences into multi-channel embedding tensors
("colouring"), trains conditional-VAE models over them with a small
numpy-backed autodiff engine, and evaluates generations with a candidate
ranking stack plus dialogue-level similarity metrics.
"""

from .autodiff import Tensor, no_grad
from .colouring import (ColouredBlock, DialogueBlock, colour_dialogue, colour_sentence,
                        pad_future)
from .config import RunConfig
from .cvae import (ConditionBundle, Dimensions, DialogueCVAE, GaussianParams, ModelSpec,
                   build_model, elbo_dialogue_block, elbo_per_answer, kl_annealing_weight,
                   kl_diag_gaussian, reparameterize)
from .data import CorpusRecord, generate_synthetic_corpus, load_corpus, save_corpus
from .evaluation import EvalReport, evaluate_answer_model, evaluate_block_model
from .inference import (caption_question_similarity, generate_block, generate_iterative,
                        latent_dispersion, ranking_metrics, score_candidates_model,
                        score_candidates_w2v)
from .layers import layer_forward, masked_conv_forward
from .optim import Adam, AdamState, adam_step
from .text import (FixedEmbeddingTable, TokenSequence, Vocabulary, build_vocabulary,
                   cosine_similarity, preprocess_sentence, sentence_embedding_avg)
from .training import TrainConfig, train_model

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamState", "ColouredBlock", "ConditionBundle", "CorpusRecord", "Dimensions",
    "DialogueBlock", "DialogueCVAE", "EvalReport", "FixedEmbeddingTable", "GaussianParams",
    "ModelSpec", "RunConfig", "Tensor", "TokenSequence", "TrainConfig", "Vocabulary",
    "adam_step", "build_model", "build_vocabulary", "caption_question_similarity",
    "colour_dialogue", "colour_sentence", "cosine_similarity", "elbo_dialogue_block",
    "elbo_per_answer", "evaluate_answer_model", "evaluate_block_model", "generate_block",
    "generate_iterative", "generate_synthetic_corpus", "kl_annealing_weight",
    "kl_diag_gaussian", "latent_dispersion", "layer_forward", "load_corpus",
    "masked_conv_forward", "no_grad", "pad_future", "preprocess_sentence", "ranking_metrics",
    "reparameterize", "save_corpus", "score_candidates_model", "score_candidates_w2v",
    "sentence_embedding_avg", "train_model",
]
