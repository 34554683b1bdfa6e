"""Seeded training loop with KL annealing and checkpointing.

One quirk worth knowing: before any optimisation step the loop runs a
single forward pass in train mode over the first batch.  That warm-up
initialises the batch-norm running statistics, so the "untrained"
checkpoint saved immediately afterwards can be evaluated (eval-mode
batch norm with never-touched statistics is an error by contract).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .cvae import Batch, DialogueCVAE, kl_annealing_weight
from .data import EncodedRecord
from .optim import Adam
from .params import save_checkpoint


@dataclass
class TrainConfig:
    # the small-scale defaults: 20 annealing epochs then 40 more at full
    # KL weight, minibatches of 16, and a doubled Adam step, which reliably
    # reaches high answer accuracy on the bundled synthetic worlds
    epochs: int = 60
    ramp_epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10
    mask_pad: bool = False


def context_rows(dialogue_ids: np.ndarray, t: int) -> np.ndarray:
    """(2T-1, L) context for answering turn ``t`` (1-based).

    The current question occupies channel 0 at every step so its channel
    position is stable across turns; the 2(t-1) history rows follow in
    dialogue order, and the remaining channels are PAD.
    """
    turns, _, length = dialogue_ids.shape
    rows = np.zeros((2 * turns - 1, length), dtype=np.int64)
    rows[0] = dialogue_ids[t - 1, 0]
    if t > 1:
        rows[1:2 * (t - 1) + 1] = dialogue_ids[:t - 1].reshape(-1, length)
    return rows


def answer_batch(encoded: list[EncodedRecord], items: list[tuple]) -> Batch:
    """Batch of (record index, turn) items for the answer model."""
    feats, caps, ctx, x = [], [], [], []
    for rec_i, t in items:
        rec = encoded[rec_i]
        feats.append(rec.features)
        caps.append(rec.caption_cols)
        ctx.append(context_rows(rec.dialogue_ids, t))
        x.append(rec.dialogue_ids[t - 1, 1][None, :])
    return Batch(features=np.stack(feats), caption_cols=np.stack(caps),
                 x_ids=np.stack(x), context_ids=np.stack(ctx))


def block_batch(encoded: list[EncodedRecord], indices) -> Batch:
    feats, caps, x = [], [], []
    for i in indices:
        rec = encoded[i]
        feats.append(rec.features)
        caps.append(rec.caption_cols)
        x.append(rec.dialogue_ids.reshape(-1, rec.dialogue_ids.shape[-1]))
    return Batch(features=np.stack(feats), caption_cols=np.stack(caps), x_ids=np.stack(x))


def training_items(model: DialogueCVAE, encoded: list[EncodedRecord]):
    if model.spec.kind == "answer":
        turns = model.spec.dims.turns
        return [(i, t) for i in range(len(encoded)) for t in range(1, turns + 1)]
    return list(range(len(encoded)))


def make_batch(model: DialogueCVAE, encoded, items) -> Batch:
    if model.spec.kind == "answer":
        return answer_batch(encoded, items)
    return block_batch(encoded, items)


def calibrate_batchnorm(model: DialogueCVAE, encoded: list[EncodedRecord], batch_size: int,
                        seed: int = 0):
    """Refresh running statistics to the dataset statistics under current weights.

    The training-time exponential update (momentum 0.001) tracks activations
    with a long memory; after the parameters settle, one cumulative sweep
    over the training data gives eval mode the true statistics.
    """
    from .autodiff import no_grad

    norms = model.batchnorm_layers()
    for bn in norms:
        bn.begin_calibration()
    items = training_items(model, encoded)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    with no_grad():
        for start in range(0, len(order), batch_size):
            chosen = [items[i] for i in order[start:start + batch_size]]
            batch = make_batch(model, encoded, chosen)
            model.elbo(batch, alpha=0.0, mode="train")
    for bn in norms:
        bn.end_calibration()


def train_model(model: DialogueCVAE, encoded: list[EncodedRecord], cfg: TrainConfig,
                out_dir: str | Path | None = None, log_fn=None) -> list[dict]:
    """Shuffled minibatch Adam on the model's objective; returns the epoch log."""
    rng = np.random.default_rng(cfg.seed)
    items = training_items(model, encoded)
    if not items:
        raise ValueError("empty training set")
    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    # warm-up: populate batch-norm running statistics, no parameter update
    warm = make_batch(model, encoded, items[:min(cfg.batch_size, len(items))])
    model.elbo(warm, alpha=0.0, mode="train")
    if ckpt_dir is not None:
        _save(model, ckpt_dir / "epoch0000.ckpt", cfg.seed, epoch=0)

    log: list[dict] = []
    latent = model.spec.dims.latent
    for epoch in range(cfg.epochs):
        alpha = kl_annealing_weight(epoch, cfg.ramp_epochs)
        order = rng.permutation(len(items))
        ce_sum = kld_sum = loss_sum = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chosen = [items[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch(model, encoded, chosen)
            eps = None if model.spec.dirac else rng.standard_normal((batch.size, latent))
            result = model.elbo(batch, alpha=alpha, eps=eps, mode="train", mask_pad=cfg.mask_pad)
            loss_value = result.loss.item()
            if not np.isfinite(loss_value):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {n_batches}: "
                    f"loss={loss_value} ce={result.ce} kld={result.kld}")
            result.loss.backward()
            opt.step()
            opt.zero_grad()
            ce_sum += result.ce
            kld_sum += result.kld
            loss_sum += loss_value
            n_batches += 1
        entry = {"epoch": epoch, "alpha": alpha, "ce": ce_sum / n_batches,
                 "kld": kld_sum / n_batches, "loss": loss_sum / n_batches}
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if ckpt_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save(model, ckpt_dir / f"epoch{epoch + 1:04d}.ckpt", cfg.seed, epoch=epoch + 1)

    if cfg.epochs > 0:
        calibrate_batchnorm(model, encoded, cfg.batch_size, seed=cfg.seed)
    if ckpt_dir is not None:
        _save(model, ckpt_dir / "final.ckpt", cfg.seed, epoch=cfg.epochs)
        with open(out_dir / "training_log.json", "w", encoding="utf-8") as fh:
            json.dump({"config": asdict(cfg), "epochs": log}, fh, sort_keys=True, indent=1)
    return log


def _save(model: DialogueCVAE, path, seed, epoch):
    save_checkpoint(model.store, path, seed=seed, arch_extra=model.arch_extra(),
                    meta={"epoch": epoch})
