"""Simulated backbone upgrades of a base ModelPair.

``continued_training`` keeps the base text tower, swaps in a freshly
initialised (wider) image tower and trains both contrastively on a larger,
partly shifted stream, with a learning rate that grows with text depth.
``synthetic_drift`` perturbs text weights with depth-increasing noise and
briefly re-aligns the image tower.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from plugcompat import data as data_mod
from plugcompat.encoder import (
    DEFAULT_TAU,
    ImageEncoder,
    ModelPair,
    PairStream,
    cosine_scores,
    encode_image,
    train_contrastive,
    zero_shot_classifier,
)
from plugcompat.errors import ConfigError, UpgradeError
from plugcompat.rng import Rng, derive_seed

log = logging.getLogger(__name__)

HELDOUT_TASK_SEEDS = (9001, 9002, 9003)


@dataclass(frozen=True)
class UpgradeRecipe:
    kind: str = "continued_training"
    epochs: int = 30
    steps_per_epoch: int = 48
    data_multiplier: int = 2
    batch: int = 32
    lr: float = 3e-3
    tau_train: float = 0.07
    image_noise: float = 0.15
    image_hidden: tuple = (128,)
    rotation: float = 0.3
    shift_fraction: float = 0.5
    layer_decay: float = 0.6
    embed_lr_scale: float | None = None
    sigma0: float = 0.05
    realign_epochs: int = 5
    retries: int = 5
    gate_tasks: tuple = HELDOUT_TASK_SEEDS

    def __post_init__(self):
        if self.kind not in ("continued_training", "synthetic_drift"):
            raise ConfigError(f"unknown upgrade recipe {self.kind!r}")
        object.__setattr__(self, "image_hidden", tuple(self.image_hidden))
        object.__setattr__(self, "gate_tasks", tuple(self.gate_tasks))

    def to_dict(self):
        d = asdict(self)
        d["image_hidden"] = list(self.image_hidden)
        d["gate_tasks"] = list(self.gate_tasks)
        return d


def layer_of(name, layers):
    """Depth index of a text parameter: -1 embeddings, 0..L-1 blocks, L projection."""
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    if name in ("tok_emb", "pos_emb"):
        return -1
    return layers


def depth_lr_scale(text, decay, embed_scale=None):
    """Per-parameter learning-rate multipliers decay**(L - depth).

    ``embed_scale`` overrides the multiplier of the embedding tables.
    """
    L = text.config.layers
    out = {f"text.{k}": decay ** (L - layer_of(k, L)) for k in text.params}
    if embed_scale is not None:
        for k in text.params:
            if layer_of(k, L) < 0:
                out[f"text.{k}"] = embed_scale
    return out


@dataclass
class GateReport:
    base_acc: list
    upgraded_acc: list
    task_seeds: list

    @property
    def passed(self):
        return float(np.mean(self.upgraded_acc)) >= float(np.mean(self.base_acc))

    @property
    def strictly_better(self):
        return int(sum(u > b for u, b in zip(self.upgraded_acc, self.base_acc)))

    def to_dict(self):
        return {
            "task_seeds": list(self.task_seeds),
            "base_zero_shot": list(self.base_acc),
            "upgraded_zero_shot": list(self.upgraded_acc),
            "passed": self.passed,
            "strictly_better": self.strictly_better,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def zero_shot_accuracy(pair, task, split=None):
    split = split or task.test
    w = zero_shot_classifier(pair, task.class_tokens)
    scores = cosine_scores(w, encode_image(pair.image, split.x))
    return float(100.0 * np.mean(np.argmax(scores, axis=1) == split.y))


def upgrade_gate_report(base, upgraded, heldout_tasks):
    for name in base.text.params:
        if base.text.params[name].shape != upgraded.text.params[name].shape:
            raise ConfigError(f"pairs are not layer-aligned at {name}")
    return GateReport(
        [zero_shot_accuracy(base, t) for t in heldout_tasks],
        [zero_shot_accuracy(upgraded, t) for t in heldout_tasks],
        [t.seed for t in heldout_tasks],
    )


def _world_for(pair):
    cfg = pair.text.config
    seed = pair.meta.get("pretrain", {}).get("world_seed", data_mod.WORLD_SEED)
    return data_mod.World(img_dim=cfg.img_dim, vocab_size=cfg.vocab_size, seed=seed)


def _continued_training(base, recipe, seed):
    rng = Rng(derive_seed(seed, "upgrade", recipe.kind))
    text = base.text.copy()
    cfg = text.config
    image = ImageEncoder.init(cfg.img_dim, recipe.image_hidden, cfg.feat_dim, rng.child("image"))
    shift = data_mod.ShiftSpec("rotation", recipe.rotation, derive_seed(seed, "upgrade-shift"))
    stream = PairStream(_world_for(base), rng.child("stream"), recipe.batch, recipe.image_noise, shift, recipe.shift_fraction)
    steps = recipe.epochs * recipe.steps_per_epoch * recipe.data_multiplier
    train_contrastive(
        text, image, stream, steps, recipe.lr, recipe.tau_train,
        lr_scale=depth_lr_scale(text, recipe.layer_decay, recipe.embed_lr_scale), label="upgrade",
    )
    return text, image


def _synthetic_drift(base, recipe, seed):
    rng = Rng(derive_seed(seed, "upgrade", recipe.kind))
    text = base.text.copy()
    L = text.config.layers
    for name in sorted(text.params):
        sigma = recipe.sigma0 * (1 + layer_of(name, L)) / L
        if sigma > 0:
            text.params[name] = text.params[name] + rng.child("noise", name).normals(text.params[name].shape, sigma)
    image = base.image.copy()
    if recipe.sigma0 > 0 and recipe.realign_epochs > 0:
        stream = PairStream(_world_for(base), rng.child("stream"), recipe.batch, recipe.image_noise)
        steps = recipe.realign_epochs * recipe.steps_per_epoch
        train_contrastive(text, image, stream, steps, recipe.lr, recipe.tau_train, train_text=False, label="realign")
    return text, image


def simulate_upgrade(base, recipe=UpgradeRecipe(), seed=0, heldout_tasks=None, enforce_gate=True):
    """Return an upgraded, layer-aligned ModelPair (tag "upgraded").

    With ``enforce_gate`` the zero-shot improvement gate is checked on the
    held-out tasks and the upgrade is retried with derived seeds up to
    ``recipe.retries`` times before raising :class:`UpgradeError`.
    """
    if recipe.kind == "continued_training" and recipe.epochs == 0:
        return ModelPair(base.text.copy(), base.image.copy(), "upgraded", base.temperature,
                         meta={**base.meta, "upgrade": {"recipe": recipe.to_dict(), "seed": int(seed)}})
    if heldout_tasks is None:
        cfg = base.text.config
        heldout_tasks = [data_mod.generate_task(s, d_img=cfg.img_dim) for s in recipe.gate_tasks]
    build = _continued_training if recipe.kind == "continued_training" else _synthetic_drift
    reports = []
    attempts = recipe.retries + 1 if enforce_gate else 1
    for attempt in range(attempts):
        attempt_seed = seed if attempt == 0 else derive_seed(seed, "retry", attempt)
        text, image = build(base, recipe, attempt_seed)
        pair = ModelPair(text, image, "upgraded", base.temperature or DEFAULT_TAU, meta={})
        report = upgrade_gate_report(base, pair, heldout_tasks)
        reports.append(report.to_dict())
        log.info("upgrade attempt %d: base %s -> upgraded %s", attempt, report.base_acc, report.upgraded_acc)
        if report.passed or not enforce_gate:
            pair.meta = {
                "seed": int(seed),
                "attempt_seed": int(attempt_seed),
                "attempts": attempt + 1,
                "recipe": recipe.to_dict(),
                "gate": report.to_dict(),
                "base_checksum": base.text_checksum(),
            }
            return pair
    raise UpgradeError(f"zero-shot gate failed after {attempts} attempts", reports)
