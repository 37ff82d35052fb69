"""Toy dual encoder: a pre-LN transformer text tower and an MLP image tower."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from plugcompat import data as data_mod
from plugcompat.errors import CapacityError, ConfigError, DegenerateInputError, DimensionError, TrainingError
from plugcompat.numcore import (
    Tensor,
    broadcast_to,
    concat,
    container,
    cosine_logits,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    matmul,
    softmax,
)
from plugcompat.numcore.optim import Adam
from plugcompat.rng import Rng, derive_seed

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.01


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64
    width: int = 32
    layers: int = 6
    heads: int = 2
    max_len: int = 24
    feat_dim: int = 32
    img_dim: int = 16
    img_hidden: tuple = (64,)
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"heads={self.heads} must divide width={self.width}")
        object.__setattr__(self, "img_hidden", tuple(int(h) for h in self.img_hidden))

    def text_shapes(self):
        d, h = self.width, self.width * self.mlp_ratio
        shapes = {"tok_emb": (self.vocab_size, d), "pos_emb": (self.max_len, d)}
        for layer in range(self.layers):
            p = f"blocks.{layer}."
            shapes.update(
                {
                    p + "ln1.g": (d,),
                    p + "ln1.b": (d,),
                    p + "attn.wq": (d, d),
                    p + "attn.wk": (d, d),
                    p + "attn.wv": (d, d),
                    p + "attn.wo": (d, d),
                    p + "ln2.g": (d,),
                    p + "ln2.b": (d,),
                    p + "mlp.w1": (d, h),
                    p + "mlp.b1": (h,),
                    p + "mlp.w2": (h, d),
                    p + "mlp.b2": (d,),
                }
            )
        shapes["proj"] = (d, self.feat_dim)
        return shapes


class TextEncoder:
    """Frozen text tower. ``params`` maps names to float64 arrays."""

    def __init__(self, config, params):
        self.config = config
        expected = config.text_shapes()
        if set(params) != set(expected):
            raise ConfigError(f"text parameter names mismatch: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    vocab_size = property(lambda self: self.config.vocab_size)
    width = property(lambda self: self.config.width)
    layers = property(lambda self: self.config.layers)

    @classmethod
    def init(cls, config, rng):
        d, L = config.width, config.layers
        params = {}
        for name, shape in config.text_shapes().items():
            if name.endswith(".g"):
                params[name] = np.ones(shape)
            elif name.endswith((".b", ".b1", ".b2")):
                params[name] = np.zeros(shape)
            elif name == "tok_emb":
                params[name] = rng.normals(shape, 0.02)
            elif name == "pos_emb":
                params[name] = rng.normals(shape, 0.01)
            elif name.endswith(("wo", "w2")):
                params[name] = rng.normals(shape, 1.0 / math.sqrt(shape[0] * 2 * L))
            else:
                params[name] = rng.normals(shape, 1.0 / math.sqrt(d))
        return cls(config, params)

    def tensors(self, trainable=False):
        return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in self.params.items()}

    def copy(self):
        return TextEncoder(self.config, {k: v.copy() for k, v in self.params.items()})


class ImageEncoder:
    def __init__(self, in_dim, hidden, out_dim, params):
        self.in_dim, self.hidden, self.out_dim = int(in_dim), tuple(hidden), int(out_dim)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        for name, shape in self.shapes().items():
            if tuple(self.params[name].shape) != shape:
                raise DimensionError(f"{name}: expected {shape}, got {self.params[name].shape}")

    def shapes(self):
        dims = (self.in_dim,) + self.hidden
        shapes = {}
        for i in range(len(self.hidden)):
            shapes[f"layers.{i}.w"] = (dims[i], dims[i + 1])
            shapes[f"layers.{i}.b"] = (dims[i + 1],)
        shapes["proj.w"] = (dims[-1], self.out_dim)
        shapes["proj.b"] = (self.out_dim,)
        return shapes

    @classmethod
    def init(cls, in_dim, hidden, out_dim, rng):
        enc = cls.__new__(cls)
        enc.in_dim, enc.hidden, enc.out_dim = int(in_dim), tuple(hidden), int(out_dim)
        params = {}
        for name, shape in enc.shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normals(shape, math.sqrt(2.0 / shape[0]))
        return cls(in_dim, hidden, out_dim, params)

    def tensors(self, trainable=False):
        return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in self.params.items()}

    def copy(self):
        return ImageEncoder(self.in_dim, self.hidden, self.out_dim, {k: v.copy() for k, v in self.params.items()})


@dataclass
class ModelPair:
    text: TextEncoder
    image: ImageEncoder
    tag: str = "base"
    temperature: float = DEFAULT_TAU
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in ("base", "upgraded"):
            raise ConfigError(f"unknown pair tag {self.tag!r}")
        if self.image.out_dim != self.text.config.feat_dim:
            raise DimensionError(
                f"image feature dim {self.image.out_dim} != text feature dim {self.text.config.feat_dim}"
            )

    def tensors(self):
        out = {f"text.{k}": v for k, v in self.text.params.items()}
        out.update({f"image.{k}": v for k, v in self.image.params.items()})
        return out

    def text_checksum(self):
        return container.checksum(self.text.params)

    def manifest(self):
        return {
            "tag": self.tag,
            "temperature": self.temperature,
            "text_config": {**asdict(self.text.config), "img_hidden": list(self.text.config.img_hidden)},
            "image": {"in_dim": self.image.in_dim, "hidden": list(self.image.hidden), "out_dim": self.image.out_dim},
            "text_checksum": self.text_checksum(),
            "meta": self.meta,
        }

    def save(self, path):
        container.save(path, self.tensors())
        with open(str(path) + ".json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        tensors = container.load(path)
        with open(str(path) + ".json") as fh:
            manifest = json.load(fh)
        cfg = dict(manifest["text_config"])
        cfg["img_hidden"] = tuple(cfg["img_hidden"])
        config = EncoderConfig(**cfg)
        text = TextEncoder(config, {k[5:]: v for k, v in tensors.items() if k.startswith("text.")})
        im = manifest["image"]
        image = ImageEncoder(
            im["in_dim"], im["hidden"], im["out_dim"], {k[6:]: v for k, v in tensors.items() if k.startswith("image.")}
        )
        return cls(text, image, manifest["tag"], manifest["temperature"], manifest.get("meta", {}))

    def with_tag(self, tag):
        return replace(self, tag=tag)


# -- forward passes ---------------------------------------------------------


def _block(h, p, prefix, heads, capture_attn=None):
    b, s, d = h.shape
    dh = d // heads
    a = layer_norm(h, p[prefix + "ln1.g"], p[prefix + "ln1.b"])

    def split(t):
        return t.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)

    q = split(matmul(a, p[prefix + "attn.wq"]))
    k = split(matmul(a, p[prefix + "attn.wk"]))
    v = split(matmul(a, p[prefix + "attn.wv"]))
    att = softmax(matmul(q, k.T) * (1.0 / math.sqrt(dh)))
    o = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    h = h + matmul(o, p[prefix + "attn.wo"])
    m = layer_norm(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    m = gelu(matmul(m, p[prefix + "mlp.w1"]) + p[prefix + "mlp.b1"])
    return h + matmul(m, p[prefix + "mlp.w2"]) + p[prefix + "mlp.b2"]


def text_forward(params, config, tokens, inject=None, depth=0, capture=None):
    """Batched text features [B, D_feat].

    ``tokens`` is an int array [B, T]; ``inject`` an optional Tensor
    [B, N, D] (or [N, D], broadcast) prepended to the hidden sequence at the
    input of block ``depth``. Token positions shift by N whenever vectors
    are injected; injected slots take positions 0..N-1. ``capture``, if a
    list, receives the token-embedding output and every block output.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    batch, length = tokens.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ConfigError(f"token id outside vocabulary of size {config.vocab_size}")
    n_inj = 0
    if inject is not None:
        if not 0 <= depth <= config.layers - 1:
            raise ConfigError(f"injection depth {depth} outside [0, {config.layers - 1}]")
        if inject.ndim == 2:
            inject = inject.reshape(1, *inject.shape)
        if inject.shape[-1] != config.width:
            raise DimensionError(f"injected width {inject.shape[-1]} != model width {config.width}")
        n_inj = inject.shape[1]
        if inject.shape[0] == 1 and batch > 1:
            inject = broadcast_to(inject, (batch,) + tuple(inject.shape[1:]))
        elif inject.shape[0] != batch:
            raise DimensionError(f"injection batch {inject.shape[0]} != token batch {batch}")
    if n_inj + length > config.max_len:
        raise CapacityError(f"sequence of {n_inj} injected + {length} tokens exceeds max_len {config.max_len}")
    pos = params["pos_emb"]
    h = embedding(params["tok_emb"], tokens) + pos[n_inj : n_inj + length]
    if capture is not None:
        capture.append(h.data.copy())
    for layer in range(config.layers):
        if inject is not None and layer == depth:
            h = concat([inject + pos[0:n_inj], h], axis=1)
        h = _block(h, params, f"blocks.{layer}.", config.heads)
        if capture is not None:
            capture.append(h.data.copy())
    last = h[:, h.shape[1] - 1, :]
    return matmul(last, params["proj"])


def image_forward(params, x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    h = x
    i = 0
    while f"layers.{i}.w" in params:
        h = gelu(matmul(h, params[f"layers.{i}.w"]) + params[f"layers.{i}.b"])
        i += 1
    return matmul(h, params["proj.w"]) + params["proj.b"]


def encode_text(enc, tokens, injection=None):
    """Feature vector [D_feat] for one token sequence.

    ``injection`` is ``(depth, vectors[N, D])`` or None.
    """
    if injection is None:
        out = text_forward(enc.tensors(), enc.config, np.asarray(tokens)[None, :])
    else:
        depth, vectors = injection
        vec = vectors if isinstance(vectors, Tensor) else Tensor(vectors)
        out = text_forward(enc.tensors(), enc.config, np.asarray(tokens)[None, :], vec, depth)
    return out.data[0]


def encode_image(enc, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != enc.in_dim:
        raise DimensionError(f"image input dim {x.shape[-1]} != encoder input dim {enc.in_dim}")
    out = image_forward(enc.tensors(), x.reshape(-1, enc.in_dim)).data
    return out[0] if single else out


def class_sequences(class_tokens, template=()):
    seqs = [list(template) + list(t) for t in class_tokens]
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise ConfigError("class token sequences must share one length")
    return np.array(seqs, dtype=np.int64)


def zero_shot_classifier(pair, class_tokens, template=data_mod.ZS_TEMPLATE):
    """[C, D_feat] rows = normalised encode_text(template + class)."""
    if len(class_tokens) < 2:
        raise ConfigError("zero-shot classifier needs at least two classes")
    feats = text_forward(pair.text.tensors(), pair.text.config, class_sequences(class_tokens, template))
    return normalize_rows(feats.data)


def normalize_rows(w):
    w = np.asarray(w, dtype=np.float64)
    norms = np.linalg.norm(w, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm classifier row")
    return w / norms


def cosine_scores(classifier, feats):
    w = normalize_rows(classifier)
    f = normalize_rows(np.atleast_2d(feats))
    if w.ndim == 2:
        return f @ w.T
    return np.einsum("bd,bcd->bc", f, w)


def probabilities(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(pair, classifier, f):
    """Class probabilities softmax(cos(w_i, f) / tau); f may be [D] or [B, D]."""
    f = np.asarray(f, dtype=np.float64)
    probs = probabilities(cosine_scores(classifier, f) / pair.temperature)
    return probs[0] if f.ndim == 1 else probs


def argmax_lowest(scores):
    """Row-wise argmax; ties resolve to the lowest index (numpy's rule)."""
    return np.argmax(scores, axis=-1)


# -- contrastive pretraining -------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    encoder: EncoderConfig = EncoderConfig()
    steps_per_epoch: int = 48
    epochs: int = 20
    batch: int = 32
    lr: float = 3e-3
    tau_train: float = 0.07
    image_noise: float = 0.15
    eval_batches: int = 8
    world_seed: int = data_mod.WORLD_SEED

    def to_dict(self):
        d = asdict(self)
        d["encoder"]["img_hidden"] = list(self.encoder.img_hidden)
        return d


class PairStream:
    """Infinite stream of (caption tokens, images) batches over distinct concepts."""

    def __init__(self, world, rng, batch, noise, shift=None, shift_fraction=0.0, templates=data_mod.CAPTION_TEMPLATES):
        if batch > world.n_concepts:
            raise ConfigError(f"batch {batch} exceeds concept count {world.n_concepts}")
        self.world = world
        self.bank = world.prototypes()
        self.rng = rng
        self.batch = batch
        self.noise = noise
        self.shift = shift
        self.shift_fraction = shift_fraction
        self.templates = templates

    def next(self, template=None):
        concepts = self.rng.choice(self.world.n_concepts, self.batch)
        if template is None:
            template = self.templates[self.rng.integer(len(self.templates))]
        tokens = np.array([list(template) + [self.world.token_of(c)] for c in concepts], dtype=np.int64)
        x = self.bank[concepts] + self.noise * self.rng.normals((self.batch, self.world.img_dim))
        if self.shift is not None and self.shift_fraction > 0:
            mask = self.rng.uniforms((self.batch,)) < self.shift_fraction
            if mask.any():
                x[mask] = data_mod.apply_shift(x[mask], self.shift)
        return tokens, x


def infonce_loss(text_feats, img_feats, tau):
    logits = cosine_logits(img_feats, text_feats, tau)
    labels = np.arange(logits.shape[0])
    return (cross_entropy(logits, labels) + cross_entropy(logits.T, labels)) * 0.5


def retrieval_accuracy(pair, world, seed, batches=8, batch=32, noise=0.15):
    """Image-to-caption top-1 accuracy on held-out batches of distinct concepts."""
    stream = PairStream(world, Rng(derive_seed(seed, "retrieval")), batch, noise)
    hits = total = 0
    for _ in range(batches):
        tokens, x = stream.next(template=data_mod.ZS_TEMPLATE)
        t = text_forward(pair.text.tensors(), pair.text.config, tokens).data
        f = encode_image(pair.image, x)
        scores = cosine_scores(t, f)
        hits += int((argmax_lowest(scores) == np.arange(len(x))).sum())
        total += len(x)
    return hits / total


def train_contrastive(text, image, stream, steps, lr, tau, lr_scale=None, train_text=True, label="pretrain"):
    """Joint Adam training of both towers on symmetric InfoNCE; returns loss history."""
    params = {}
    if train_text:
        params.update({f"text.{k}": v for k, v in text.params.items()})
    params.update({f"image.{k}": v for k, v in image.params.items()})
    opt = Adam(params, lr, total_steps=steps, lr_scale=lr_scale)
    history = []
    for step in range(steps):
        tokens, x = stream.next()
        tp = text.tensors(trainable=train_text)
        ip = image.tensors(trainable=True)
        loss = infonce_loss(text_forward(tp, text.config, tokens), image_forward(ip, x), tau)
        value = float(loss)
        if not np.isfinite(value):
            raise TrainingError(
                f"{label}: loss became non-finite at step {step}",
                {"step": step, "last_losses": history[-5:], "lr": lr},
            )
        history.append(value)
        loss.backward()
        grads = {f"image.{k}": t.grad for k, t in ip.items()}
        if train_text:
            grads.update({f"text.{k}": t.grad for k, t in tp.items()})
        opt.step(grads)
    return history


def contrastive_pretrain(config=PretrainConfig(), seed=0):
    """Train a base ModelPair from scratch; returns (pair, metrics)."""
    enc = config.encoder
    world = data_mod.World(img_dim=enc.img_dim, vocab_size=enc.vocab_size, seed=config.world_seed)
    root = Rng(derive_seed(seed, "pretrain"))
    text = TextEncoder.init(enc, root.child("text"))
    image = ImageEncoder.init(enc.img_dim, enc.img_hidden, enc.feat_dim, root.child("image"))
    stream = PairStream(world, root.child("stream"), config.batch, config.image_noise)
    steps = config.epochs * config.steps_per_epoch
    history = train_contrastive(text, image, stream, steps, config.lr, config.tau_train)
    pair = ModelPair(text, image, "base", DEFAULT_TAU, meta={"seed": int(seed), "pretrain": config.to_dict()})
    acc = retrieval_accuracy(pair, world, seed, config.eval_batches, config.batch, config.image_noise)
    metrics = {"retrieval_accuracy": acc, "final_loss": history[-1], "steps": steps}
    pair.meta["metrics"] = metrics
    log.info("pretrain seed=%s retrieval=%.3f loss=%.4f", seed, acc, history[-1])
    return pair, metrics
