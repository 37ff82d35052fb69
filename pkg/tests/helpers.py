"""Small models and loss graphs shared by the tuner tests and the acceptance suite."""

import numpy as np

from plugcompat.data import generate_task
from plugcompat.encoder import EncoderConfig, ImageEncoder, ModelPair, TextEncoder, encode_image
from plugcompat.numcore import DiffGraph, Tensor, finite_diff_check
from plugcompat.rng import Rng
from plugcompat.tuners import default_hyper, get_method, make_context, module_loss

SMALL = EncoderConfig(width=8, layers=2, heads=2, feat_dim=8, img_hidden=(8,))

# (method, hyperparameter overrides) covering every trainable path
GRAD_CASES = [
    ("lp", {}),
    ("clip_adapter", {}),
    ("clip_adapter", {"adapter_side": "image"}),
    ("tip_adapter", {}),
    ("coop", {}),
    ("coop", {"depth": 1}),
    ("kgcoop", {}),
    ("cocoop", {}),
    ("contcoop", {}),
    ("contcoop", {"heads": 2, "condition": "template"}),
]


def small_pair(seed):
    """A randomly initialised pair with O(1) weights so gradients are not tiny."""
    rng = Rng(seed)
    text = TextEncoder(SMALL, {k: rng.normals(s, 0.5) for k, s in SMALL.text_shapes().items()})
    image = ImageEncoder.init(SMALL.img_dim, SMALL.img_hidden, SMALL.feat_dim, rng)
    return ModelPair(text, image, "base", temperature=0.5)


def loss_graph(method, seed, **overrides):
    """DiffGraph of the full training loss (CE plus KD where used) over the method's payload."""
    pair = small_pair(seed)
    task = generate_task(seed, C=3, K=2, M=1)
    hyper = default_hyper(method, ctx_len=3, **overrides)
    spec = get_method(method)
    ctx = make_context(pair, task.class_tokens)
    feats = encode_image(pair.image, task.train.x)
    params, buffers = spec.init(ctx, task, feats, hyper, seed)
    rng = Rng(seed + 1)
    params = {k: v + 0.3 * rng.normals(v.shape) for k, v in params.items()}

    def forward(p):
        loss, _ = module_loss(spec, p, buffers, ctx, Tensor(feats), task.train.y, hyper)
        return loss

    return DiffGraph(forward, params, set(params))


def gradient_errors(seed, tolerance=1e-6, h=1e-5):
    """Max relative finite-difference error per (case, parameter) for one seed."""
    out = {}
    for method, overrides in GRAD_CASES:
        graph = loss_graph(method, seed, **overrides)
        label = method + "".join(f"[{k}={v}]" for k, v in overrides.items())
        for name in sorted(graph.trainable):
            report = finite_diff_check(graph, name, tolerance=tolerance, h=h)
            out[(label, name)] = report.max_rel_error
    return out


def accuracy(logits, labels):
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))
