"""Conditional-VAE dialogue models: prior, encoder, decoder, objectives.

Three model kinds share one architecture family:

* ``answer``   -- encodes one answer (single-channel block) conditioned on
  image features, caption, and the dialogue history up to the current
  question.  Its degenerate ``dirac`` variant drops the stochastic latent
  entirely, recovering a deterministic encoder-decoder.
* ``block``    -- encodes a whole dialogue (2T channels) conditioned on
  image features and caption only; context is implicit in the channels.
* ``block_ar`` -- the block model with a causally masked convolution stack
  between the decoder's intermediate volume and the vocabulary projection,
  so logits for each unravelled word row depend only on earlier rows.

The condition pipeline mirrors a fixed topology at any configured scale:
the caption colouring is convolved down to a small grid, the image feature
vector is reshaped onto the same grid, the two are fused, and (for the
answer model) the embedded context joins through one more fusion.  The
fused grid is the encoded condition reused by the encoder head and the
decoder.  Latents are diagonal Gaussians; log-variances are clamped to
[-10, 10] before exponentiation.

The decoder's vocabulary projection shares its weight matrix with the
learnable word embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor, concat, softmax_cross_entropy
from .layers import (BatchNorm, Conv2d, ConvBlock, DeconvBlock, Embedding, Linear,
                     MaskedConv1d, relu)
from .params import ParameterStore

KIND_ANSWER = "answer"
KIND_BLOCK = "block"
KIND_BLOCK_AR = "block_ar"
KINDS = (KIND_ANSWER, KIND_BLOCK, KIND_BLOCK_AR)

LOG_VAR_CLAMP = 10.0


@dataclass(frozen=True)
class Dimensions:
    """Size configuration shared by every network in a model."""

    vocab: int
    embed: int = 32
    max_len: int = 16
    turns: int = 5
    latent: int = 32
    fixed_embed: int = 32
    feature_dim: int = 272
    cond_channels: int = 17
    cond_grid: tuple = (4, 4)

    def validate(self):
        gh, gw = self.cond_grid
        if self.feature_dim != self.cond_channels * gh * gw:
            raise ValueError(
                f"feature_dim {self.feature_dim} must equal cond_channels*grid "
                f"({self.cond_channels}*{gh}*{gw} = {self.cond_channels * gh * gw})")
        if gh < 2 or gw < 2 or gh % 2 or gw % 2:
            raise ValueError(f"cond_grid must have even extents >= 2, got {self.cond_grid}")
        for label, (h, w) in (("embed x max_len", (self.embed, self.max_len)),
                              ("fixed_embed x max_len", (self.fixed_embed, self.max_len))):
            for name, src, dst in (("height", h, gh), ("width", w, gw)):
                ratio = src / dst
                if src < 2 * dst or ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
                    raise ValueError(
                        f"{label} {name} {src} must be cond_grid extent {dst} times a power of two (>= 2x)")
        if self.vocab < 2 or self.latent < 1 or self.turns < 1:
            raise ValueError("vocab >= 2, latent >= 1 and turns >= 1 required")
        return self


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    dims: Dimensions
    ar_layers: int = 0
    ar_kernel: int = 3
    dirac: bool = False

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.dims.validate()
        if self.kind == KIND_BLOCK_AR and self.ar_layers < 1:
            raise ValueError("block_ar requires at least one autoregressive layer")
        if self.kind != KIND_BLOCK_AR and self.ar_layers:
            raise ValueError("ar_layers only applies to block_ar models")
        if self.ar_kernel % 2 != 1 or self.ar_kernel < 3:
            raise ValueError("ar_kernel must be odd and >= 3")
        if self.dirac and self.kind != KIND_ANSWER:
            raise ValueError("dirac mode is the answer model's deterministic baseline")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"]["cond_grid"] = list(self.dims.cond_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        dims = dict(d["dims"])
        dims["cond_grid"] = tuple(dims["cond_grid"])
        return cls(kind=d["kind"], dims=Dimensions(**dims), ar_layers=d.get("ar_layers", 0),
                   ar_kernel=d.get("ar_kernel", 3), dirac=d.get("dirac", False)).validate()

    @property
    def num_channels(self) -> int:
        return 1 if self.kind == KIND_ANSWER else 2 * self.dims.turns


@dataclass
class GaussianParams:
    """Diagonal Gaussian: mean and log-variance, each (B, Z)."""

    mu: Tensor
    log_var: Tensor


@dataclass(frozen=True)
class ConditionBundle:
    """Per-example condition: image features, coloured caption, optional context rows."""

    features: np.ndarray
    caption_cols: np.ndarray
    context_ids: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "caption_cols", np.asarray(self.caption_cols))

    def check_normalized(self, tol: float = 1e-6):
        norm = np.linalg.norm(self.features)
        if abs(norm - 1.0) > tol:
            raise ValueError(f"image feature norm {norm:.8f} is not 1 within {tol}")
        return self


@dataclass
class Batch:
    """Model-facing arrays for one minibatch."""

    features: np.ndarray                  # (B, F)
    caption_cols: np.ndarray              # (B, 1, E_fixed, L)
    x_ids: np.ndarray | None = None       # (B, M, L) target / encoder input
    context_ids: np.ndarray | None = None  # (B, 2T-1, L), answer kind only

    @property
    def size(self):
        return self.features.shape[0]


def batch_from_bundles(bundles, x_ids=None) -> Batch:
    feats = np.stack([b.features for b in bundles])
    caps = np.stack([b.caption_cols for b in bundles])
    ctx = None
    if bundles[0].context_ids is not None:
        ctx = np.stack([b.context_ids for b in bundles])
    return Batch(features=feats, caption_cols=caps, x_ids=x_ids, context_ids=ctx)


# -- objectives ----------------------------------------------------------------


def reparameterize(gauss: GaussianParams, eps) -> Tensor:
    """z = mu + eps * sigma with sigma = exp(log_var / 2); eps from the caller."""
    eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=gauss.mu.dtype))
    return gauss.mu + eps_t * (gauss.log_var * 0.5).exp()


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) per example, summed over latent dimensions."""
    vq = q.log_var.exp()
    vp = p.log_var.exp()
    diff = q.mu - p.mu
    per_dim = ((vq + diff * diff) / vp - 1.0 + p.log_var - q.log_var) * 0.5
    return per_dim.sum(axis=-1)


def kl_annealing_weight(epoch: int, ramp_epochs: int) -> float:
    """Linear ramp of the KL weight: 0 at epoch 0, 1 from ``ramp_epochs`` on."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if ramp_epochs < 1:
        raise ValueError("ramp_epochs must be >= 1")
    return min(epoch / ramp_epochs, 1.0)


def gaussian_log_density(z: np.ndarray, mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over the final axis."""
    var = np.exp(log_var)
    return -0.5 * (np.log(2.0 * np.pi) + log_var + (z - mu) ** 2 / var).sum(axis=-1)


@dataclass
class ElboResult:
    loss: Tensor
    ce: float
    kld: float


# -- architecture helpers -------------------------------------------------------


def _halving_plan(src_hw, dst_hw):
    h, w = src_hw
    th, tw = dst_hw
    steps = []
    while h > th or w > tw:
        sh = 2 if h > th else 1
        sw = 2 if w > tw else 1
        steps.append((sh, sw))
        h = (h + 2 - 3) // sh + 1
        w = (w + 2 - 3) // sw + 1
    if (h, w) != (th, tw):
        raise ValueError(f"cannot reduce {src_hw} to {dst_hw} by stride-2 halvings")
    return steps


class _DownStack:
    """Conv blocks reducing an (in_ch, H, W) volume to (out_ch, grid)."""

    def __init__(self, in_ch, src_hw, grid, out_ch, rng, dtype, momentum):
        steps = _halving_plan(src_hw, grid) or [(1, 1)]
        self.blocks = []
        ch = in_ch
        for stride in steps:
            self.blocks.append(ConvBlock(ch, out_ch, kernel=3, stride=stride, padding=1,
                                         rng=rng, dtype=dtype, momentum=momentum))
            ch = out_ch

    def register(self, store, prefix):
        for i, blk in enumerate(self.blocks):
            store.register_layer(f"{prefix}.{i}", blk)

    def norms(self):
        return [blk.norm for blk in self.blocks]

    def __call__(self, x, mode):
        for blk in self.blocks:
            x = blk(x, mode)
        return x


class _FuseBlock:
    """Two conv blocks mixing concatenated condition grids (2*cc -> cc)."""

    def __init__(self, in_ch, out_ch, rng, dtype, momentum):
        self.a = ConvBlock(in_ch, in_ch, rng=rng, dtype=dtype, momentum=momentum)
        self.b = ConvBlock(in_ch, out_ch, rng=rng, dtype=dtype, momentum=momentum)

    def register(self, store, prefix):
        store.register_layer(f"{prefix}.0", self.a)
        store.register_layer(f"{prefix}.1", self.b)

    def norms(self):
        return [self.a.norm, self.b.norm]

    def __call__(self, x, mode):
        return self.b(self.a(x, mode), mode)


class _UpStack:
    """Transpose-conv blocks growing (in_ch, grid) to (out_ch, H, W).

    All blocks but the last carry batchnorm + relu; the last is a bare
    transpose convolution producing the intermediate volume.
    """

    def __init__(self, in_ch, grid, dst_hw, out_ch, rng, dtype, momentum):
        steps = _halving_plan(dst_hw, grid)
        self.blocks = []
        for i, (sh, sw) in enumerate(steps):
            last = i == len(steps) - 1
            kernel = (4 if sh == 2 else 3, 4 if sw == 2 else 3)
            self.blocks.append(DeconvBlock(in_ch, out_ch if last else in_ch, kernel,
                                           (sh, sw), 1, rng=rng, dtype=dtype,
                                           momentum=momentum, activate=not last))

    def register(self, store, prefix):
        for i, blk in enumerate(self.blocks):
            store.register_layer(f"{prefix}.{i}", blk)

    def norms(self):
        return [blk.norm for blk in self.blocks if blk.norm is not None]

    def __call__(self, x, mode):
        for blk in self.blocks:
            x = blk(x, mode)
        return x


class _GaussianHead:
    """Condition grid -> (mu, log_var), both (B, Z); log_var clamped."""

    def __init__(self, in_ch, mid_ch, latent, grid, rng, dtype, momentum):
        gh, gw = grid
        self.pre = ConvBlock(in_ch, mid_ch, kernel=3, stride=1, padding=1,
                             rng=rng, dtype=dtype, momentum=momentum)
        self.down = ConvBlock(mid_ch, mid_ch, kernel=3, stride=2, padding=1,
                              rng=rng, dtype=dtype, momentum=momentum)
        self.mu_conv = Conv2d(mid_ch, latent, (gh // 2, gw // 2), 1, 0, rng=rng, dtype=dtype)
        self.logvar_conv = Conv2d(mid_ch, latent, (gh // 2, gw // 2), 1, 0, rng=rng, dtype=dtype)
        self.latent = latent

    def register(self, store, prefix):
        store.register_layer(f"{prefix}.pre", self.pre)
        store.register_layer(f"{prefix}.down", self.down)
        store.register_layer(f"{prefix}.mu", self.mu_conv)
        store.register_layer(f"{prefix}.logvar", self.logvar_conv)

    def norms(self):
        return [self.pre.norm, self.down.norm]

    def __call__(self, x, mode) -> GaussianParams:
        h = self.down(self.pre(x, mode), mode)
        b = x.shape[0]
        mu = self.mu_conv(h, mode).reshape((b, self.latent))
        log_var = self.logvar_conv(h, mode).reshape((b, self.latent)).clip(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        return GaussianParams(mu, log_var)


class _ARLayer:
    """Masked conv -> batchnorm -> relu over the unravelled row stack.

    The normalisation uses pre-update running statistics in train mode
    (``causal_stats``): batch statistics would couple every row to every
    other row and break the exact causality the decode contract promises.
    """

    def __init__(self, channels, kernel, mask, rng, dtype, momentum):
        self.conv = MaskedConv1d(channels, channels, kernel, mask, rng=rng, dtype=dtype)
        self.norm = BatchNorm(channels, momentum=momentum, dtype=dtype, causal_stats=True)

    def register(self, store, prefix):
        store.register_layer(f"{prefix}.conv", self.conv)
        store.register_layer(f"{prefix}.norm", self.norm)

    def __call__(self, x, mode):
        return relu(self.norm(self.conv(x, mode), mode))


# -- the model -------------------------------------------------------------------


class DialogueCVAE:
    """Prior, encoder and decoder networks for one model specification."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32, bn_momentum: float = 0.001):
        spec.validate()
        self.spec = spec
        self.seed = seed
        self.dtype = dtype
        d = spec.dims
        cc = d.cond_channels
        grid = d.cond_grid
        rng = np.random.default_rng(seed)
        m = bn_momentum

        self.embedding = Embedding(d.vocab, d.embed, rng=rng, dtype=dtype)
        self.caption_stack = _DownStack(1, (d.fixed_embed, d.max_len), grid, cc, rng, dtype, m)
        self.image_caption_fuse = _FuseBlock(2 * cc, cc, rng, dtype, m)
        if spec.kind == KIND_ANSWER:
            self.context_stack = _DownStack(2 * d.turns - 1, (d.embed, d.max_len), grid, cc, rng, dtype, m)
            self.context_fuse = _FuseBlock(2 * cc, cc, rng, dtype, m)
        else:
            self.context_stack = None
            self.context_fuse = None
        self.prior_head = _GaussianHead(cc, 2 * cc, d.latent, grid, rng, dtype, m)
        self.encoder_stack = _DownStack(spec.num_channels, (d.embed, d.max_len), grid, cc, rng, dtype, m)
        self.encoder_head = _GaussianHead(2 * cc, 2 * cc, d.latent, grid, rng, dtype, m)
        self.latent_expand = DeconvBlock(d.latent, cc, grid, 1, 0, rng=rng, dtype=dtype, momentum=m)
        self.decoder_fuse = _FuseBlock(2 * cc, cc, rng, dtype, m)
        self.up_stack = _UpStack(cc, grid, (d.embed, d.max_len), spec.num_channels, rng, dtype, m)
        if spec.kind == KIND_BLOCK_AR:
            self.ar_layers = [_ARLayer(d.embed, spec.ar_kernel, "A" if i == 0 else "B", rng, dtype, m)
                              for i in range(spec.ar_layers)]
        else:
            self.ar_layers = []
        self.vocab_proj = Linear(d.embed, d.vocab, weight=self.embedding.table, dtype=dtype)

        self.store = ParameterStore()
        self.store.register_layer("embedding", self.embedding)
        self.caption_stack.register(self.store, "caption")
        self.image_caption_fuse.register(self.store, "fuse_ic")
        if self.context_stack is not None:
            self.context_stack.register(self.store, "context")
            self.context_fuse.register(self.store, "fuse_ctx")
        self.prior_head.register(self.store, "prior")
        self.encoder_stack.register(self.store, "encoder")
        self.encoder_head.register(self.store, "posterior")
        self.store.register_layer("latent_expand", self.latent_expand)
        self.decoder_fuse.register(self.store, "decoder_fuse")
        self.up_stack.register(self.store, "up")
        for i, layer in enumerate(self.ar_layers):
            layer.register(self.store, f"ar.{i}")
        self.store.register_layer("vocab_proj", self.vocab_proj)

    # -- pieces ------------------------------------------------------------

    def arch_extra(self) -> dict:
        return self.spec.to_dict()

    def parameters(self):
        return self.store.trainable()

    def batchnorm_layers(self):
        norms = list(self.caption_stack.norms()) + list(self.image_caption_fuse.norms())
        if self.context_stack is not None:
            norms += self.context_stack.norms() + self.context_fuse.norms()
        norms += self.prior_head.norms() + self.encoder_stack.norms() + self.encoder_head.norms()
        norms += [self.latent_expand.norm] + self.decoder_fuse.norms() + self.up_stack.norms()
        norms += [layer.norm for layer in self.ar_layers]
        return norms

    def colour_ids(self, ids: np.ndarray) -> Tensor:
        """Embed an id block (B, M, L) into columns (B, M, E, L)."""
        emb = self.embedding(ids)               # (B, M, L, E)
        return emb.transpose(0, 1, 3, 2)

    def prior_forward(self, batch: Batch, mode: str = "train"):
        """Condition encoding; returns prior params and the fused grid."""
        d = self.spec.dims
        b = batch.size
        cap = Tensor(np.asarray(batch.caption_cols, dtype=self.dtype))
        cap_enc = self.caption_stack(cap, mode)
        gh, gw = d.cond_grid
        img = Tensor(np.asarray(batch.features, dtype=self.dtype).reshape(b, d.cond_channels, gh, gw))
        y = self.image_caption_fuse(concat([cap_enc, img], axis=1), mode)
        if self.spec.kind == KIND_ANSWER:
            if batch.context_ids is None:
                raise ValueError("answer model requires context_ids in the batch")
            ctx = self.colour_ids(batch.context_ids)
            ctx_enc = self.context_stack(ctx, mode)
            y = self.context_fuse(concat([y, ctx_enc], axis=1), mode)
        return self.prior_head(y, mode), y

    def encoder_forward(self, x_ids: np.ndarray, encoded_condition: Tensor,
                        mode: str = "train") -> GaussianParams:
        x_ids = np.asarray(x_ids)
        if x_ids.ndim != 3 or x_ids.shape[1] != self.spec.num_channels:
            raise ValueError(
                f"encoder expected (B, {self.spec.num_channels}, L) ids, got {x_ids.shape}")
        h = self.encoder_stack(self.colour_ids(x_ids), mode)
        return self.encoder_head(concat([h, encoded_condition], axis=1), mode)

    def decoder_forward(self, z: Tensor, encoded_condition: Tensor, mode: str = "train") -> Tensor:
        """Latent + condition -> logits (B, M, L, V)."""
        d = self.spec.dims
        b = z.shape[0]
        h = self.latent_expand(z.reshape((b, d.latent, 1, 1)), mode)
        h = self.decoder_fuse(concat([h, encoded_condition], axis=1), mode)
        intermediate = self.up_stack(h, mode)   # (B, M, E, L)
        if self.spec.kind == KIND_BLOCK_AR:
            return self.ar_decode(intermediate, mode)
        return self._project(intermediate)

    def ar_decode(self, intermediate: Tensor, mode: str = "train") -> Tensor:
        """Causal stack over the unravelled rows, then vocabulary logits.

        Rows are ordered channel-major (turn by turn, word by word), so the
        masked convolutions enforce sequencing at both the sentence and the
        dialogue level: logits for row r never see rows >= r.
        """
        if self.spec.kind != KIND_BLOCK_AR:
            raise ValueError("ar_decode applies to block_ar models only")
        b, m_ch, e, l = intermediate.shape
        rows = intermediate.transpose(0, 2, 1, 3).reshape((b, e, m_ch * l))
        for layer in self.ar_layers:
            rows = layer(rows, mode)
        back = rows.reshape((b, e, m_ch, l)).transpose(0, 2, 3, 1)  # (B, M, L, E)
        return self.vocab_proj(back)

    def _project(self, intermediate: Tensor) -> Tensor:
        volume = intermediate.transpose(0, 1, 3, 2)  # (B, M, L, E)
        return self.vocab_proj(volume)

    # -- latents -----------------------------------------------------------

    def sample_latent(self, gauss: GaussianParams, eps=None) -> Tensor:
        """Draw z; ``eps=None`` decodes at the mean, dirac mode always does."""
        if self.spec.dirac or eps is None:
            return gauss.mu
        return reparameterize(gauss, eps)

    # -- pipelines ----------------------------------------------------------

    def reconstruction(self, batch: Batch, mode: str = "eval", eps=None):
        """Posterior-sample decode of ``batch.x_ids`` given its condition.

        Dirac mode has a single deterministic encoding of the condition, so
        reconstruction and generation coincide there.
        """
        gauss_p, y = self.prior_forward(batch, mode)
        if self.spec.dirac:
            return self.decoder_forward(gauss_p.mu, y, mode), gauss_p, gauss_p
        gauss_q = self.encoder_forward(batch.x_ids, y, mode)
        z = self.sample_latent(gauss_q, eps)
        logits = self.decoder_forward(z, y, mode)
        return logits, gauss_q, gauss_p

    def generation(self, batch: Batch, mode: str = "eval", eps=None):
        """Prior-sample decode using the condition only."""
        gauss_p, y = self.prior_forward(batch, mode)
        z = self.sample_latent(gauss_p, eps)
        logits = self.decoder_forward(z, y, mode)
        return logits, gauss_p

    # -- objective -----------------------------------------------------------

    def elbo(self, batch: Batch, alpha: float, eps=None, mode: str = "train",
             mask_pad: bool = False) -> ElboResult:
        """Negative conditional evidence bound for one batch.

        CE is the summed token negative log-likelihood per example (PAD
        positions included unless ``mask_pad``), KLD the closed-form
        divergence between posterior and prior; the loss is
        ``CE + alpha * KLD``, batch-meaned.  With ``alpha == 0`` the loss
        is exactly the CE tensor.  In dirac mode the latent is the
        deterministic posterior encoding and KLD is identically zero.
        """
        if batch.x_ids is None:
            raise ValueError("elbo requires target ids in the batch")
        d = self.spec.dims
        b = batch.size
        gauss_p, y = self.prior_forward(batch, mode)
        if self.spec.dirac:
            # the degenerate baseline: posterior and prior coincide in one
            # deterministic encoding of the condition, so the latent never
            # sees the target and the KL term is identically zero
            z = gauss_p.mu
            gauss_q = gauss_p
        else:
            gauss_q = self.encoder_forward(batch.x_ids, y, mode)
            z = reparameterize(gauss_q, eps) if eps is not None else gauss_q.mu
        logits = self.decoder_forward(z, y, mode)
        v = d.vocab
        targets = np.asarray(batch.x_ids).reshape(-1)
        nll = softmax_cross_entropy(logits.reshape((-1, v)), targets)
        if mask_pad:
            keep = (targets != 0).astype(logits.dtype)
            nll = nll * Tensor(keep)
        ce = nll.reshape((b, -1)).sum(axis=1).mean()
        if self.spec.dirac:
            return ElboResult(loss=ce, ce=ce.item(), kld=0.0)
        kld = kl_diag_gaussian(gauss_q, gauss_p).mean()
        loss = ce if alpha == 0.0 else ce + alpha * kld
        return ElboResult(loss=loss, ce=ce.item(), kld=kld.item())


def elbo_per_answer(model: DialogueCVAE, batch: Batch, alpha: float, eps=None, **kw) -> ElboResult:
    """Per-turn objective; the dialogue objective is its sum over turns."""
    if model.spec.kind != KIND_ANSWER:
        raise ValueError("per-answer objective applies to the answer model")
    return model.elbo(batch, alpha, eps=eps, **kw)


def elbo_dialogue_block(model: DialogueCVAE, batch: Batch, alpha: float, eps=None, **kw) -> ElboResult:
    """Whole-dialogue objective for the block models."""
    if model.spec.kind not in (KIND_BLOCK, KIND_BLOCK_AR):
        raise ValueError("block objective applies to block models")
    return model.elbo(batch, alpha, eps=eps, **kw)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> DialogueCVAE:
    return DialogueCVAE(spec, seed=seed, dtype=dtype)
