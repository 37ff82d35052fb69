"""Shared tuner machinery: module container, losses, training and scoring."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from plugcompat.data import ZS_TEMPLATE
from plugcompat.encoder import ModelPair, encode_image, probabilities, text_forward, class_sequences
from plugcompat.errors import ConfigError, TrainingError
from plugcompat.numcore import Tensor, container, cross_entropy, l2_normalize, row_norms
from plugcompat.numcore.optim import SGD
from plugcompat.rng import Rng, derive_seed

log = logging.getLogger(__name__)

METHODS = ("zs", "lp", "clip_adapter", "tip_adapter", "coop", "cocoop", "kgcoop", "contcoop")
_REGISTRY = {}


@dataclass(frozen=True)
class TunerHyper:
    lr: float = 2e-3
    epochs: int = 200
    batch: int = 0  # 0 = full shot set
    ctx_len: int = 16
    depth: int = 0
    lam: float = 1.0
    heads: int = 1
    condition: str = "class"
    zero_init_output: bool = False
    train_fuser: bool = True
    kd_on_raw: bool = False
    prompt_std: float = 0.02
    adapter_ratio: float = 0.2
    adapter_side: str = "text"
    tip_alpha: float = 1.0
    tip_beta: float = 5.5
    tip_finetune: bool = True

    def __post_init__(self):
        if self.ctx_len < 1:
            raise ConfigError("ctx_len must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.condition not in ("class", "template"):
            raise ConfigError(f"unknown condition {self.condition!r}")
        if self.adapter_side not in ("text", "image"):
            raise ConfigError(f"unknown adapter side {self.adapter_side!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# Per-method defaults that differ from the shared ones. CoCoOp's meta-net bias
# is shared by every context token, so its effective step grows with ctx_len;
# four tokens and minibatches keep its SGD stable.
METHOD_DEFAULTS = {
    "cocoop": {"ctx_len": 4, "batch": 32, "epochs": 50},
}


def default_hyper(method, **overrides):
    base = dict(METHOD_DEFAULTS.get(method, {}))
    base.update(overrides)
    return TunerHyper(**base)


@dataclass
class Context:
    """Frozen view of one ModelPair for a fixed class list."""

    pair: ModelPair
    class_tokens: list
    text: dict
    wzs_raw: np.ndarray

    @property
    def wzs(self):
        return self.wzs_raw / np.linalg.norm(self.wzs_raw, axis=1, keepdims=True)

    @property
    def config(self):
        return self.pair.text.config

    def class_ids(self):
        return np.array([t[-1] for t in self.class_tokens], dtype=np.int64)

    def encode(self, tokens, inject=None, depth=0):
        return text_forward(self.text, self.config, tokens, inject, depth)


def make_context(pair, class_tokens):
    text = pair.text.tensors()
    raw = text_forward(text, pair.text.config, class_sequences(class_tokens, ZS_TEMPLATE)).data
    return Context(pair, [list(t) for t in class_tokens], text, raw)


@dataclass
class TunerModule:
    method: str
    params: dict
    buffers: dict
    hyper: TunerHyper
    class_tokens: list
    provenance: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def tensors(self):
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out

    def manifest(self):
        return {
            "method": self.method,
            "hyperparameters": self.hyper.to_dict(),
            "class_tokens": self.class_tokens,
            "provenance": self.provenance,
            "metrics": self.metrics,
            "loss_history": self.history,
        }

    def save(self, path):
        container.save(path, self.tensors())
        with open(str(path) + ".json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        tensors = container.load(path)
        with open(str(path) + ".json") as fh:
            m = json.load(fh)
        return cls(
            method=m["method"],
            params={k[6:]: v for k, v in tensors.items() if k.startswith("param.")},
            buffers={k[7:]: v for k, v in tensors.items() if k.startswith("buffer.")},
            hyper=TunerHyper.from_dict(m["hyperparameters"]),
            class_tokens=m["class_tokens"],
            provenance=m["provenance"],
            metrics=m["metrics"],
            history=m["loss_history"],
        )


class Method:
    """One fine-tuning method. Subclasses fill in init/forward."""

    name = ""
    uses_kd = False
    # Trainable payload entries that are held fixed when hyper.train_fuser is False.
    fuser_params = ()

    def init(self, ctx, task, feats, hyper, seed):
        raise NotImplementedError

    def forward(self, params, buffers, ctx, feats, hyper):
        """Return (logits [B, C], raw classifier [C, D_feat] or None)."""
        raise NotImplementedError


def register(cls):
    _REGISTRY[cls.name] = cls()
    return cls


def get_method(name):
    if name not in _REGISTRY:
        raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return _REGISTRY[name]


def kd_loss(w, w_zs, normalize=True):
    """Mean over classes of ||w_i - w_zs_i||_2 (a norm, not its square)."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    w_zs = w_zs if isinstance(w_zs, Tensor) else Tensor(w_zs)
    if w.shape != w_zs.shape:
        raise ConfigError(f"kd_loss shape mismatch: {w.shape} vs {w_zs.shape}")
    if normalize:
        w = l2_normalize(w)
        w_zs = l2_normalize(w_zs)
    return row_norms(w - w_zs).mean()


def total_loss(ce, kd, lam):
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    return ce + lam * kd


def _batches(n, batch, rng):
    if batch <= 0 or batch >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def module_loss(method, params, buffers, ctx, feats, labels, hyper):
    logits, raw = method.forward(params, buffers, ctx, feats, hyper)
    ce = cross_entropy(logits, labels)
    if method.uses_kd and hyper.lam > 0:
        target = ctx.wzs_raw if hyper.kd_on_raw else ctx.wzs
        return total_loss(ce, kd_loss(raw, target, normalize=not hyper.kd_on_raw), hyper.lam), logits
    return ce, logits


def train_tuner(method, pair, task, hyper=None, seed=0):
    """Train only the method's payload on the base pair; encoders stay frozen."""
    if pair.tag != "base":
        raise ConfigError("tuners are always trained on the base pair")
    spec = get_method(method)
    hyper = hyper or default_hyper(method)
    ctx = make_context(pair, task.class_tokens)
    feats = encode_image(pair.image, task.train.x)
    labels = task.train.y
    params, buffers = spec.init(ctx, task, feats, hyper, seed)
    frozen = set(spec.fuser_params) if not hyper.train_fuser else set()
    trainable = sorted(k for k in params if k not in frozen)
    steps_per_epoch = len(_batches(len(labels), hyper.batch, Rng(0)))
    opt = SGD(params, hyper.lr, total_steps=hyper.epochs * steps_per_epoch)
    batch_rng = Rng(derive_seed(seed, "batches"))
    history = []
    if trainable:
        for epoch in range(hyper.epochs):
            for idx in _batches(len(labels), hyper.batch, batch_rng):
                bound = {k: Tensor(v, requires_grad=k in trainable, name=k) for k, v in params.items()}
                loss, _ = module_loss(spec, bound, buffers, ctx, Tensor(feats[idx]), labels[idx], hyper)
                value = float(loss)
                if not np.isfinite(value):
                    raise TrainingError(
                        f"{method}: non-finite loss at epoch {epoch}",
                        {"epoch": epoch, "last_losses": history[-5:], "lr": hyper.lr},
                    )
                history.append(value)
                loss.backward()
                opt.step({k: bound[k].grad if bound[k].grad is not None else np.zeros_like(v)
                          for k, v in params.items() if k in trainable})
    module = TunerModule(
        method=method,
        params=params,
        buffers=buffers,
        hyper=hyper,
        class_tokens=[list(map(int, t)) for t in task.class_tokens],
        provenance={
            "base_checksum": pair.text_checksum(),
            "vocab_size": pair.text.config.vocab_size,
            "seed": int(seed),
            "task_seed": int(task.seed),
        },
        history=history,
    )
    train_logits = module_logits(module, pair, task.train.x, ctx=ctx)
    module.metrics = {
        "final_loss": history[-1] if history else None,
        "train_accuracy": float(100.0 * np.mean(np.argmax(train_logits, axis=1) == labels)),
    }
    return module


def module_logits(module, pair, x, ctx=None, chunk=256):
    """Cosine logits of a trained module evaluated against any pair, no retraining."""
    spec = get_method(module.method)
    if ctx is None or ctx.pair is not pair:
        ctx = make_context(pair, module.class_tokens)
    vocab = module.provenance.get("vocab_size")
    if vocab is not None and vocab != pair.text.config.vocab_size:
        log.warning("reusing %s module across vocabularies (%s vs %s)", module.method, vocab, pair.text.config.vocab_size)
    feats = encode_image(pair.image, np.atleast_2d(x))
    bound = {k: Tensor(v) for k, v in module.params.items()}
    out = []
    for start in range(0, len(feats), chunk):
        logits, _ = spec.forward(bound, module.buffers, ctx, Tensor(feats[start : start + chunk]), module.hyper)
        out.append(logits.data)
    return np.concatenate(out)


def module_probabilities(module, pair, x):
    return probabilities(module_logits(module, pair, x))


def with_hyper(module, **changes):
    return replace(module, hyper=replace(module.hyper, **changes))
