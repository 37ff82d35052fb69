"""Prompt-based tuners: CoOp, CoCoOp, KgCoOp and class-conditioned ContCoOp."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from plugcompat.data import ZS_TEMPLATE
from plugcompat.errors import ConfigError, DimensionError
from plugcompat.numcore import Tensor, as_tensor, broadcast_to, concat, cosine_logits, l2_normalize, matmul, relu, softmax
from plugcompat.rng import Rng, derive_seed
from plugcompat.tuners.core import Method, get_method, make_context, register

log = logging.getLogger(__name__)


@dataclass
class AttnFuser:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int = 1

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide width {d}")

    @classmethod
    def kaiming(cls, width, rng, heads=1, zero_init_output=False):
        """Kaiming-uniform with a = sqrt(5), i.e. U(-1/sqrt(D), 1/sqrt(D)), as for a default linear layer."""
        bound = 1.0 / math.sqrt(width)
        wq, wk, wv, wo = (bound * (2.0 * rng.uniforms((width, width)) - 1.0) for _ in range(4))
        if zero_init_output:
            wo = np.zeros((width, width))
        return cls(wq, wk, wv, wo, heads)

    def as_params(self):
        return {"fuser.wq": self.wq, "fuser.wk": self.wk, "fuser.wv": self.wv, "fuser.wo": self.wo}


def fuse(p, c, wq, wk, wv, wo, heads=1):
    """Self-attention over X = [p; c]; returns the first N output rows.

    ``p`` is [N, D] or [B, N, D]; ``c`` is [B, T, D] (T condition rows).
    Scores are scaled by sqrt of the per-head width (sqrt(D) for one head).
    """
    p, c = as_tensor(p), as_tensor(c)
    if c.ndim == 2:
        c = c.reshape(1, *c.shape)
    if p.ndim == 2:
        p = p.reshape(1, *p.shape)
    d = p.shape[-1]
    if c.shape[-1] != d or wq.shape != (d, d):
        raise DimensionError(f"attn_fuse shape mismatch: p {p.shape}, c {c.shape}, W {wq.shape}")
    if d % heads:
        raise ConfigError(f"heads={heads} must divide width {d}")
    batch = max(p.shape[0], c.shape[0])
    n = p.shape[1]
    if p.shape[0] != batch:
        p = broadcast_to(p, (batch,) + tuple(p.shape[1:]))
    x = concat([p, c], axis=1)
    s = x.shape[1]
    dh = d // heads

    def split(t):
        return t.reshape(batch, s, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(matmul(x, wq)), split(matmul(x, wk)), split(matmul(x, wv))
    att = softmax(matmul(q, k.T) * (1.0 / math.sqrt(dh)))
    o = matmul(att, v).transpose(0, 2, 1, 3).reshape(batch, s, d)
    o = matmul(o, wo)
    return o[:, 0:n, :]


def attn_fuse(p, c, fuser):
    """Attn(p, c): fused prompt offsets, numpy in / numpy out ([N, D] for one class)."""
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    single = c.ndim == 2
    out = fuse(p, c[None] if single else c, fuser.wq, fuser.wk, fuser.wv, fuser.wo, fuser.heads).data
    return out[0] if single else out


def class_conditioned_prompts(p, c, fuser):
    """p(c) = p + Attn(p, c)."""
    return np.asarray(p, dtype=np.float64) + attn_fuse(p, c, fuser)


def init_context(ctx, hyper, seed):
    return Rng(derive_seed(seed, "ctx")).normals((hyper.ctx_len, ctx.config.width), hyper.prompt_std)


def class_token_ids(ctx):
    return ctx.class_ids().reshape(-1, 1)


@register
class CoOp(Method):
    name = "coop"

    def init(self, ctx, task, feats, hyper, seed):
        if not 0 <= hyper.depth <= ctx.config.layers - 1:
            raise ConfigError(f"depth {hyper.depth} outside [0, {ctx.config.layers - 1}]")
        return {"ctx": init_context(ctx, hyper, seed)}, {}

    def classifier(self, params, ctx, hyper):
        return ctx.encode(class_token_ids(ctx), params["ctx"], hyper.depth)

    def forward(self, params, buffers, ctx, feats, hyper):
        w = self.classifier(params, ctx, hyper)
        return cosine_logits(feats, w, ctx.pair.temperature), w


@register
class KgCoOp(CoOp):
    name = "kgcoop"
    uses_kd = True


@register
class CoCoOp(Method):
    name = "cocoop"

    def init(self, ctx, task, feats, hyper, seed):
        feat_dim, width = ctx.config.feat_dim, ctx.config.width
        hidden = max(1, feat_dim // 16)
        rng = Rng(derive_seed(seed, "metanet"))
        params = {
            "ctx": init_context(ctx, hyper, seed),
            "meta.w1": rng.normals((feat_dim, hidden), math.sqrt(2.0 / feat_dim)),
            "meta.b1": np.zeros(hidden),
            "meta.w2": rng.normals((hidden, width), math.sqrt(2.0 / hidden)),
            "meta.b2": np.zeros(width),
        }
        return params, {}

    def forward(self, params, buffers, ctx, feats, hyper):
        f = l2_normalize(feats)
        shift = matmul(relu(matmul(f, params["meta.w1"]) + params["meta.b1"]), params["meta.w2"]) + params["meta.b2"]
        b = f.shape[0]
        n_cls = len(ctx.class_tokens)
        n, d = params["ctx"].shape
        prompts = params["ctx"].reshape(1, 1, n, d) + shift.reshape(b, 1, 1, d)
        prompts = broadcast_to(prompts, (b, n_cls, n, d)).reshape(b * n_cls, n, d)
        tokens = np.tile(class_token_ids(ctx), (b, 1))
        w = ctx.encode(tokens, prompts, 0).reshape(b, n_cls, ctx.config.feat_dim)
        return cosine_logits(feats, w, ctx.pair.temperature), None


def condition_rows(ctx, hyper):
    """Embedding rows the prompts are conditioned on: [C, T, D]."""
    table = ctx.text["tok_emb"]
    ids = class_token_ids(ctx)
    if hyper.condition == "template":
        ids = np.concatenate([np.tile(np.array(ZS_TEMPLATE, dtype=np.int64), (len(ids), 1)), ids], axis=1)
    return table[ids]


@register
class ContCoOp(Method):
    name = "contcoop"
    uses_kd = True
    fuser_params = ("fuser.wq", "fuser.wk", "fuser.wv", "fuser.wo")

    def init(self, ctx, task, feats, hyper, seed):
        fuser = AttnFuser.kaiming(
            ctx.config.width, Rng(derive_seed(seed, "fuser")), hyper.heads, hyper.zero_init_output
        )
        return {"ctx": init_context(ctx, hyper, seed), **fuser.as_params()}, {}

    def conditioned(self, params, ctx, hyper):
        c = condition_rows(ctx, hyper)
        offsets = fuse(
            params["ctx"], c, params["fuser.wq"], params["fuser.wk"], params["fuser.wv"], params["fuser.wo"], hyper.heads
        )
        return params["ctx"] + offsets

    def classifier(self, params, ctx, hyper):
        return ctx.encode(class_token_ids(ctx), self.conditioned(params, ctx, hyper), 0)

    def forward(self, params, buffers, ctx, feats, hyper):
        w = self.classifier(params, ctx, hyper)
        return cosine_logits(feats, w, ctx.pair.temperature), w


def build_contcoop_classifier(module, pair, class_tokens=None):
    """Normalised [C, D_feat] classifier; class embeddings come from ``pair``."""
    if module.method != "contcoop":
        raise ConfigError(f"expected a contcoop module, got {module.method!r}")
    ctx = make_context(pair, class_tokens or module.class_tokens)
    vocab = module.provenance.get("vocab_size")
    if vocab is not None and vocab != pair.text.config.vocab_size:
        log.warning("vocabulary mismatch: module %s vs pair %s", vocab, pair.text.config.vocab_size)
    bound = {k: Tensor(v) for k, v in module.params.items()}
    w = get_method("contcoop").classifier(bound, ctx, module.hyper).data
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def prompt_classifier(module, pair):
    """Normalised classifier rows for any of the image-independent prompt methods."""
    ctx = make_context(pair, module.class_tokens)
    bound = {k: Tensor(v) for k, v in module.params.items()}
    w = get_method(module.method).classifier(bound, ctx, module.hyper).data
    return w / np.linalg.norm(w, axis=1, keepdims=True)
