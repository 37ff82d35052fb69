"""Output-side tuners: zero-shot, linear probe, CLIP-Adapter and Tip-Adapter.

All of them act on final features, so when reused on an upgraded pair their
trained weights are applied verbatim to that pair's features.
"""

from __future__ import annotations

import math

import numpy as np

from plugcompat.numcore import Tensor, cosine_logits, exp, l2_normalize, matmul, relu
from plugcompat.rng import Rng, derive_seed
from plugcompat.tuners.core import Method, register


@register
class ZeroShot(Method):
    name = "zs"

    def init(self, ctx, task, feats, hyper, seed):
        return {}, {}

    def forward(self, params, buffers, ctx, feats, hyper):
        w = Tensor(ctx.wzs)
        return cosine_logits(feats, w, ctx.pair.temperature), w


@register
class LinearProbe(Method):
    name = "lp"

    def init(self, ctx, task, feats, hyper, seed):
        n_cls, dim = len(ctx.class_tokens), ctx.config.feat_dim
        w = Rng(derive_seed(seed, "linear-probe")).normals((n_cls, dim), 1.0 / math.sqrt(dim))
        return {"weight": w}, {}

    def forward(self, params, buffers, ctx, feats, hyper):
        return cosine_logits(feats, params["weight"], ctx.pair.temperature), params["weight"]


def _adapter(x, params):
    return relu(matmul(relu(matmul(x, params["adapter.w1"])), params["adapter.w2"]))


@register
class ClipAdapter(Method):
    """Residual bottleneck MLP; refines text features by default, image features with adapter_side='image'."""

    name = "clip_adapter"

    def init(self, ctx, task, feats, hyper, seed):
        dim = ctx.config.feat_dim
        hidden = max(1, dim // 4)
        rng = Rng(derive_seed(seed, "clip-adapter"))
        return {
            "adapter.w1": rng.normals((dim, hidden), math.sqrt(2.0 / dim)),
            "adapter.w2": rng.normals((hidden, dim), math.sqrt(2.0 / hidden)),
        }, {}

    def forward(self, params, buffers, ctx, feats, hyper):
        rho = hyper.adapter_ratio
        if hyper.adapter_side == "image":
            f = l2_normalize(feats)
            f = _adapter(f, params) * rho + f * (1.0 - rho)
            w = Tensor(ctx.wzs)
            return cosine_logits(f, w, ctx.pair.temperature), None
        w0 = Tensor(ctx.wzs)
        w = _adapter(w0, params) * rho + w0 * (1.0 - rho)
        return cosine_logits(feats, w, ctx.pair.temperature), w


@register
class TipAdapter(Method):
    """Zero-shot logits plus alpha * exp(-beta (1 - f.keys)) . values over a few-shot cache."""

    name = "tip_adapter"

    def init(self, ctx, task, feats, hyper, seed):
        keys = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        values = np.eye(len(ctx.class_tokens))[task.train.y]
        if hyper.tip_finetune:
            return {"keys": keys}, {"values": values}
        return {}, {"keys": keys, "values": values}

    def forward(self, params, buffers, ctx, feats, hyper):
        w = Tensor(ctx.wzs)
        logits = cosine_logits(feats, w, ctx.pair.temperature)
        if hyper.tip_alpha == 0:
            return logits, None
        keys = params["keys"] if "keys" in params else Tensor(buffers["keys"])
        affinity = matmul(l2_normalize(feats), l2_normalize(keys).T)
        cache = matmul(exp((affinity - 1.0) * hyper.tip_beta), Tensor(buffers["values"]))
        return logits + cache * hyper.tip_alpha, None
