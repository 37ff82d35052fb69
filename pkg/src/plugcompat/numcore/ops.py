"""Fused differentiable kernels used by the encoders and tuners."""

from __future__ import annotations

import numpy as np

from plugcompat.errors import DegenerateInputError, DimensionError
from plugcompat.numcore.tensor import Tensor, as_tensor, matmul  # noqa: F401

LN_EPS = 1e-5


def softmax(x, axis=-1):
    """Softmax along ``axis`` with max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def softmax_rows(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward)


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got shape {x.shape}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match width {n}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gain, bias), backward)


def l2_normalize(x, axis=-1):
    """Scale each vector along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalise a zero-norm vector")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._result(out, (x,), backward)


def row_norms(x, axis=-1):
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis))
    safe = np.where(norm > 0, norm, 1.0)

    def backward(g):
        scale = np.where(norm > 0, g / safe, 0.0)
        return (x.data * np.expand_dims(scale, axis),)

    return Tensor._result(norm, (x,), backward)


def cosine(a, b):
    """Cosine similarity of two vectors, as a float."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def cross_entropy(logits, labels):
    """Mean negative log-probability of the true class; returns a scalar Tensor."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"label out of range [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(batch)
    value = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return Tensor._result(np.asarray(value), (logits,), backward)


def cosine_logits(features, classifier, temperature):
    """``cos(w_i, f) / tau`` for every (f, w_i); inputs need not be normalised.

    ``features`` is [B, D]; ``classifier`` is [C, D] or per-sample [B, C, D].
    """
    f = l2_normalize(features)
    w = l2_normalize(classifier)
    if w.ndim == 2:
        return matmul(f, w.T) * (1.0 / temperature)
    fb = f.reshape(f.shape[0], 1, f.shape[1])
    return matmul(fb, w.T).reshape(f.shape[0], w.shape[1]) * (1.0 / temperature)
