"""Command-line front door: synth, train, eval, generate, report.

Every command is driven by a JSON config (see :mod:`convdial.config`) and
an output directory; corpus paths in the config resolve against that
directory, so one workspace holds a whole reproducible run.  With a fixed
seed every output byte is reproducible; timestamps only ever go to the
log file (``convdial.log``), never into reports or transcripts.

Errors print a single machine-parseable line ``error <kind>: message`` on
stderr and exit nonzero; the log file carries the full traceback.  The
``CONVDIAL_LOG`` environment variable (quiet|info|debug) controls stderr
verbosity.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from .colouring import ITERATIVE_MODES, MODE_BLOCK, MODE_PREDICTED_DIALOGUE
from .config import EVAL_MODES, SCORE_FNS, ConfigError, RunConfig
from .cvae import DialogueCVAE
from .data import (CorpusError, corpus_token_lists, encode_corpus, generate_synthetic_corpus,
                   load_corpus, save_corpus)
from .evaluation import (EvalReport, evaluate_answer_model, evaluate_block_model,
                         render_report_table, write_transcripts)
from .inference import generate_block, generate_iterative
from .params import load_checkpoint
from .text import FixedEmbeddingTable, build_vocabulary, random_embedding_table
from .colouring import DialogueBlock
from .training import train_model


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _verbosity() -> str:
    return os.environ.get("CONVDIAL_LOG", "info").lower()


class _Logger:
    def __init__(self, out_dir: Path | None):
        self.path = out_dir / "convdial.log" if out_dir is not None else None
        self.fh = open(self.path, "a", encoding="utf-8") if self.path else None

    def log(self, message: str, level: str = "info"):
        if self.fh:
            import time
            self.fh.write(f"[{time.strftime('%Y-%m-%dT%H:%M:%S')}] {level}: {message}\n")
            self.fh.flush()
        order = {"quiet": 0, "info": 1, "debug": 2}
        if level != "debug" and order.get(_verbosity(), 1) >= 1:
            print(message, file=sys.stderr)
        elif level == "debug" and order.get(_verbosity(), 1) >= 2:
            print(message, file=sys.stderr)

    def close(self):
        if self.fh:
            self.fh.close()


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.training.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.evaluation.mode = args.mode
    if getattr(args, "score", None) is not None:
        cfg.evaluation.score = args.score
    return cfg.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus_path(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out / p


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    log = _Logger(out)
    c = cfg.corpus
    dims = cfg.model_spec(vocab_size=2).dims  # vocab placeholder; only sizes used here
    log.log(f"generating {c.n_train}+{c.n_eval} synthetic records (seed {cfg.seed})")
    records = generate_synthetic_corpus(cfg.seed, c.n_train + c.n_eval, turns=dims.turns,
                                        n_candidates=c.candidates, feature_dim=dims.feature_dim)
    save_corpus(records[:c.n_train], _corpus_path(out, c.train), seed=cfg.seed)
    save_corpus(records[c.n_train:], _corpus_path(out, c.eval), seed=cfg.seed)
    tokens = set()
    for toks in corpus_token_lists(records, include_candidates=True):
        tokens.update(toks)
    table = random_embedding_table(sorted(tokens), dim=dims.fixed_embed, seed=cfg.seed)
    table.save(_corpus_path(out, c.embeddings))
    log.log(f"wrote {c.train}, {c.eval}, {c.embeddings} under {out}")
    log.close()
    return 0


def _load_world(cfg: RunConfig, out: Path):
    c = cfg.corpus
    train_path = _corpus_path(out, c.train)
    eval_path = _corpus_path(out, c.eval)
    emb_path = _corpus_path(out, c.embeddings)
    for p in (train_path, eval_path, emb_path):
        if not p.exists():
            raise CliError("missing-input", f"required file does not exist: {p}")
    train_records = load_corpus(train_path)
    eval_records = load_corpus(eval_path)
    # the vocabulary comes from the training dialogues only
    vocab = build_vocabulary(corpus_token_lists(train_records), min_freq=c.min_freq)
    table = FixedEmbeddingTable.load(emb_path)
    spec = cfg.model_spec(vocab.size)
    max_len = spec.dims.max_len
    return spec, vocab, table, \
        encode_corpus(train_records, vocab, table, max_len), \
        encode_corpus(eval_records, vocab, table, max_len), eval_records


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    log = _Logger(out)
    spec, vocab, table, train_enc, _, _ = _load_world(cfg, out)
    log.log(f"training {spec.kind} model: vocab={vocab.size}, "
            f"{len(train_enc)} records, {cfg.training.epochs} epochs")
    model = DialogueCVAE(spec, seed=cfg.seed)
    train_model(model, train_enc, cfg.training, out_dir=out,
                log_fn=lambda e: log.log(
                    f"epoch {e['epoch']:3d} alpha {e['alpha']:.3f} "
                    f"ce {e['ce']:.4f} kld {e['kld']:.4f}"))
    log.log(f"checkpoints under {out / 'checkpoints'}")
    log.close()
    return 0


def _restore_model(cfg: RunConfig, spec, checkpoint: Path) -> DialogueCVAE:
    if not checkpoint.exists():
        raise CliError("missing-checkpoint", f"checkpoint does not exist: {checkpoint}")
    model = DialogueCVAE(spec, seed=cfg.seed)
    load_checkpoint(model.store, checkpoint, arch_extra=model.arch_extra())
    return model


def _checkpoint_path(args, out: Path) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    return out / "checkpoints" / "final.ckpt"


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    log = _Logger(out)
    spec, vocab, table, _, eval_enc, _ = _load_world(cfg, out)
    mode = cfg.evaluation.mode
    score = cfg.evaluation.score
    if spec.kind == "answer":
        if mode is not None:
            raise CliError("bad-mode", "evaluation modes apply to block models; "
                           "the answer model evaluates per-turn directly")
        model = _restore_model(cfg, spec, _checkpoint_path(args, out))
        report = evaluate_answer_model(model, eval_enc, table, vocab, score_fn=score,
                                       lw_samples=cfg.evaluation.lw_samples, seed=cfg.seed,
                                       rng=np.random.default_rng(cfg.seed))
    else:
        if mode is None:
            raise CliError("bad-mode", "block models need --mode "
                           f"(one of {', '.join(EVAL_MODES)})")
        if score in ("elbo", "lw"):
            raise CliError("bad-score", "elbo/lw scoring applies to the answer model")
        model = _restore_model(cfg, spec, _checkpoint_path(args, out))
        report = evaluate_block_model(model, eval_enc, table, vocab, mode=mode,
                                      score_fn=score, seed=cfg.seed)
    report.save(out / "report.json", out / "report.txt")
    log.log(f"report written to {out / 'report.json'}")
    log.log("\n" + report.to_text(), level="debug")
    log.close()
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    log = _Logger(out)
    spec, vocab, table, _, eval_enc, _ = _load_world(cfg, out)
    if spec.kind == "answer":
        raise CliError("bad-mode", "transcript generation applies to block models")
    mode = cfg.evaluation.mode or MODE_BLOCK
    model = _restore_model(cfg, spec, _checkpoint_path(args, out))
    blocks = []
    for rec in eval_enc:
        if mode == MODE_BLOCK:
            blocks.append(generate_block(model, rec)[0])
        elif mode in ITERATIVE_MODES:
            truth = None
            if mode != MODE_PREDICTED_DIALOGUE:
                truth = DialogueBlock.from_id_matrix(
                    rec.dialogue_ids.reshape(-1, rec.dialogue_ids.shape[-1]))
            blocks.append(generate_iterative(model, rec, mode, ground_truth=truth).predicted)
        else:
            raise CliError("bad-mode", f"unknown mode {mode!r}")
    path = out / "transcripts.txt"
    write_transcripts(eval_enc, blocks, vocab, path)
    log.log(f"wrote {len(blocks)} transcripts to {path}")
    log.close()
    return 0


def cmd_report(args) -> int:
    reports = [EvalReport.load(p) for p in args.reports]
    table = render_report_table(reports)
    if args.out_file:
        Path(args.out_file).write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convdial",
        description="Conditional-VAE dialogue models: synthesise corpora, train, "
                    "evaluate, and generate transcripts.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".", help="workspace directory for inputs and outputs")

    p = sub.add_parser("synth", help="generate a synthetic corpus and embedding table")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a report")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path "
                   "(default: <out>/checkpoints/final.ckpt)")
    p.add_argument("--mode", choices=EVAL_MODES, default=None,
                   help="block evaluation mode: block = whole-dialogue generation; "
                        "d-qa = ground-truth question+answer history; "
                        "d-qhat-a = ground-truth questions with predicted answers; "
                        "d-qhat-ahat = fully predicted history")
    p.add_argument("--score", choices=SCORE_FNS, default=None,
                   help="candidate scoring function (elbo/lw: answer model; w2v: any)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="write prediction transcripts for the eval corpus")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mode", choices=EVAL_MODES, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("report", help="render a comparison table from report files")
    p.add_argument("reports", nargs="+", help="report.json files")
    p.add_argument("--out", dest="out_file", default=None, help="also write the table here")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error {exc.kind}: {exc}", file=sys.stderr)
        _log_failure(args, exc)
        return 1
    except (ConfigError, CorpusError, ValueError, OSError) as exc:
        kind = type(exc).__name__.lower().removesuffix("error") or "runtime"
        print(f"error {kind}: {exc}", file=sys.stderr)
        _log_failure(args, exc)
        return 1


def _log_failure(args, exc):
    out = getattr(args, "out", None)
    if out is None:
        return
    try:
        log = _Logger(Path(out))
        log.log("".join(traceback.format_exception(exc)), level="debug")
        log.close()
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
