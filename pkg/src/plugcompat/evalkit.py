"""Compatibility metrics, drift profiles, the prompt-depth sweep and OOD tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from plugcompat.data import ZS_TEMPLATE
from plugcompat.encoder import text_forward
from plugcompat.errors import ConfigError, PlugCompatError
from plugcompat.tuners import default_hyper, module_logits, train_tuner
from plugcompat.upgrade import layer_of

log = logging.getLogger(__name__)

EPS = 1e-8


def fingerprint(config):
    """Short, stable hash of a JSON-serialisable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance_line(config):
    """Comment line heading every emitted table: fingerprint plus seeds."""
    seeds = config.get("seeds", config.get("seed", ""))
    if isinstance(seeds, (list, tuple)):
        seeds = ",".join(str(s) for s in seeds)
    return f"# fingerprint={fingerprint(config)} seeds={seeds}\n"


def read_table(text, delimiter=","):
    """Parse an emitted CSV/TSV back into a list of dicts, skipping comment lines."""
    body = [line for line in text.splitlines() if line and not line.startswith("#")]
    return list(csv.DictReader(body, delimiter=delimiter))


def accuracy(pair, module, split):
    """Percent of argmax-correct predictions; ties go to the lowest class index."""
    if len(split.y) == 0:
        raise ConfigError("accuracy needs a nonempty split")
    logits = module_logits(module, pair, split.x)
    return float(100.0 * np.mean(np.argmax(logits, axis=1) == split.y))


def harmonic_mean(base, new):
    if base < 0 or new < 0:
        raise ConfigError("accuracies must be non-negative")
    if base + new == 0:
        return 0.0
    return 2.0 * base * new / (base + new)


# -- Base / New / H -----------------------------------------------------------


@dataclass
class CompatCell:
    task: int
    method: str
    seed: int
    base: float = float("nan")
    new: float = float("nan")
    error: str | None = None

    @property
    def h(self):
        if self.error is not None:
            return float("nan")
        return harmonic_mean(self.base, self.new)


@dataclass
class CompatReport:
    cells: list
    seeds: list
    config: dict = field(default_factory=dict)

    @property
    def fingerprint(self):
        return fingerprint(self.config)

    def tasks(self):
        return sorted({c.task for c in self.cells})

    def methods(self):
        order = {m: i for i, m in enumerate(self.config.get("methods", []))}
        return sorted({c.method for c in self.cells}, key=lambda m: (order.get(m, len(order)), m))

    def mean(self, method, task=None):
        """Seed-averaged (and, without ``task``, task-averaged) Base, New, H."""
        tasks = [task] if task is not None else self.tasks()
        per_task = []
        for t in tasks:
            ok = [c for c in self.cells if c.method == method and c.task == t and c.error is None]
            if not ok:
                continue
            b = float(np.mean([c.base for c in ok]))
            n = float(np.mean([c.new for c in ok]))
            per_task.append((b, n, harmonic_mean(b, n)))
        if not per_task:
            return {"base": float("nan"), "new": float("nan"), "h": float("nan")}
        b, n, h = np.mean(per_task, axis=0)
        return {"base": float(b), "new": float(n), "h": float(h)}

    def rows(self):
        """(task, method, seed, base, new, h) per cell, plus a seed-mean row per (task, method)."""
        out = []
        for t in self.tasks():
            for m in self.methods():
                cells = sorted((c for c in self.cells if c.task == t and c.method == m), key=lambda c: c.seed)
                for c in cells:
                    out.append((t, m, str(c.seed), c.base, c.new, c.h))
                mean = self.mean(m, t)
                out.append((t, m, "mean", mean["base"], mean["new"], mean["h"]))
        return out

    def to_csv(self):
        buf = io.StringIO()
        buf.write(provenance_line(self.config))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "method", "seed", "base", "new", "h"])
        for t, m, s, b, n, h in self.rows():
            w.writerow([t, m, s, f"{b:.2f}", f"{n:.2f}", f"{h:.2f}"])
        return buf.getvalue()

    def to_dict(self):
        return {
            "fingerprint": self.fingerprint,
            "config": self.config,
            "seeds": list(self.seeds),
            "cells": [
                {"task": c.task, "method": c.method, "seed": c.seed, "base": c.base, "new": c.new,
                 "h": c.h, "error": c.error}
                for c in sorted(self.cells, key=lambda c: (c.task, c.method, c.seed))
            ],
            "summary": {m: self.mean(m) for m in self.methods()},
        }


def compat_experiment(base, upgraded, tasks, methods, seeds=(0, 1, 2), hyper=None):
    """Train every method on ``base`` per seed and task; score on both pairs.

    ``hyper`` maps method name to overrides of its default hyperparameters.
    A failing cell is recorded with its error message instead of aborting.
    """
    tasks = tasks if isinstance(tasks, (list, tuple)) else [tasks]
    hyper = hyper or {}
    cells = []
    for task in tasks:
        for method in methods:
            for seed in seeds:
                cell = CompatCell(int(task.seed), method, int(seed))
                try:
                    module = train_tuner(method, base, task, default_hyper(method, **hyper.get(method, {})), seed=seed)
                    cell.base = accuracy(base, module, task.test)
                    cell.new = accuracy(upgraded, module, task.test)
                except PlugCompatError as exc:
                    log.warning("cell %s/%s/%s failed: %s", task.seed, method, seed, exc)
                    cell.error = f"{type(exc).__name__}: {exc}"
                cells.append(cell)
    config = {
        "methods": list(methods),
        "seeds": [int(s) for s in seeds],
        "tasks": [int(t.seed) for t in tasks],
        "hyper": hyper,
        "base_checksum": base.text_checksum(),
        "upgraded_checksum": upgraded.text_checksum(),
    }
    return CompatReport(cells, [int(s) for s in seeds], config)


# -- drift --------------------------------------------------------------------


def layer_labels(layers):
    return ["pre"] + [str(i) for i in range(layers)] + ["post"]


@dataclass
class DriftProfile:
    """Per-layer changes, keyed "pre", "0".."L-1", "post"."""

    layers: list
    param_abs: dict = field(default_factory=dict)
    param_rel: dict = field(default_factory=dict)
    feat_abs: dict = field(default_factory=dict)
    feat_rel: dict = field(default_factory=dict)

    def depths(self):
        return [-1 if k == "pre" else len(self.layers) - 2 if k == "post" else int(k) for k in self.layers]

    def series(self, name):
        values = getattr(self, name)
        return [values[k] for k in self.layers if k in values]

    def spearman(self, name):
        """Spearman rho between layer depth and one drift series."""
        return spearman(self.depths(), self.series(name))

    def merged(self, other):
        return DriftProfile(
            self.layers,
            {**self.param_abs, **other.param_abs},
            {**self.param_rel, **other.param_rel},
            {**self.feat_abs, **other.feat_abs},
            {**self.feat_rel, **other.feat_rel},
        )

    def to_dict(self):
        return {
            "layers": list(self.layers),
            "param_abs": self.param_abs,
            "param_rel": self.param_rel,
            "feat_abs": self.feat_abs,
            "feat_rel": self.feat_rel,
        }

    def to_tsv(self, config=None):
        lines = [provenance_line(config or {}).rstrip("\n"), "layer\tparam_abs\tparam_rel\tfeat_abs\tfeat_rel"]
        for k in self.layers:
            vals = [getattr(self, n).get(k, float("nan")) for n in ("param_abs", "param_rel", "feat_abs", "feat_rel")]
            lines.append(k + "\t" + "\t".join(f"{v:.10g}" for v in vals))
        return "\n".join(lines) + "\n"


def spearman(x, y):
    """Spearman rank correlation; 0 when either input is constant."""
    if np.ptp(np.asarray(x, dtype=float)) == 0 or np.ptp(np.asarray(y, dtype=float)) == 0:
        return 0.0
    rho = spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def _check_aligned(a, b):
    if a.config.layers != b.config.layers or set(a.params) != set(b.params):
        raise ConfigError("encoders are not layer-aligned")
    for k in a.params:
        if a.params[k].shape != b.params[k].shape:
            raise ConfigError(f"encoders are not layer-aligned at {k}")


def param_change(before, after):
    """(mean |delta|, mean |delta| / (|theta| + eps)) over flat parameter vectors."""
    before = np.asarray(before, dtype=np.float64).ravel()
    delta = np.abs(np.asarray(after, dtype=np.float64).ravel() - before)
    return float(delta.mean()), float((delta / (np.abs(before) + EPS)).mean())


def layer_param_change(base_text, upgraded_text):
    """Mean |delta| and mean |delta|/(|theta|+eps) over the scalars of each layer."""
    _check_aligned(base_text, upgraded_text)
    L = base_text.config.layers
    labels = layer_labels(L)
    groups = {k: [] for k in labels}
    for name in sorted(base_text.params):
        depth = layer_of(name, L)
        key = "pre" if depth < 0 else "post" if depth == L else str(depth)
        groups[key].append(name)
    prof = DriftProfile(labels)
    for key, names in groups.items():
        before = np.concatenate([base_text.params[n].ravel() for n in names])
        after = np.concatenate([upgraded_text.params[n].ravel() for n in names])
        prof.param_abs[key], prof.param_rel[key] = param_change(before, after)
    return prof


def default_probes(config, class_tokens=None):
    """The zero-shot template followed by each class token."""
    if class_tokens is None:
        class_tokens = [[t] for t in range(8, config.vocab_size)]
    return np.array([list(ZS_TEMPLATE) + list(t) for t in class_tokens], dtype=np.int64)


def _captures(text, probes):
    capture = []
    feats = text_forward(text.tensors(), text.config, probes, capture=capture).data
    return capture + [feats]


def layer_feature_change(base_text, upgraded_text, probes=None):
    """Per-layer hidden-state changes over all probes, positions and dimensions."""
    _check_aligned(base_text, upgraded_text)
    probes = default_probes(base_text.config) if probes is None else np.atleast_2d(np.asarray(probes, dtype=np.int64))
    if probes.size == 0:
        raise ConfigError("need at least one probe")
    labels = layer_labels(base_text.config.layers)
    prof = DriftProfile(labels)
    for key, a, b in zip(labels, _captures(base_text, probes), _captures(upgraded_text, probes)):
        delta = np.abs(b - a)
        prof.feat_abs[key] = float(delta.mean())
        prof.feat_rel[key] = float((delta / (np.abs(a) + EPS)).mean())
    return prof


def drift_profile(base, upgraded, probes=None):
    return layer_param_change(base.text, upgraded.text).merged(layer_feature_change(base.text, upgraded.text, probes))


# -- depth sweep ----------------------------------------------------------------


@dataclass
class SweepCurve:
    depths: list
    base: dict  # seed -> [acc per depth]
    new: dict
    zero_shot_base: float = float("nan")
    config: dict = field(default_factory=dict)

    def mean(self, which):
        table = getattr(self, which)
        return [float(np.mean([table[s][i] for s in sorted(table)])) for i in range(len(self.depths))]

    def spearman_new(self):
        """Per-seed Spearman rho between depth and New accuracy."""
        return {s: spearman(self.depths, self.new[s]) for s in sorted(self.new)}

    def to_dict(self):
        return {
            "fingerprint": fingerprint(self.config),
            "config": self.config,
            "depths": list(self.depths),
            "base": {str(s): v for s, v in sorted(self.base.items())},
            "new": {str(s): v for s, v in sorted(self.new.items())},
            "mean_base": self.mean("base"),
            "mean_new": self.mean("new"),
            "zero_shot_base": self.zero_shot_base,
        }

    def to_tsv(self):
        lines = [provenance_line(self.config).rstrip("\n"), "depth\tbase\tnew"]
        for d, b, n in zip(self.depths, self.mean("base"), self.mean("new")):
            lines.append(f"{d}\t{b:.4f}\t{n:.4f}")
        return "\n".join(lines) + "\n"


def depth_sweep(base, upgraded, task, depths=None, seeds=(0, 1, 2, 3, 4), hyper=None):
    """Train CoOp with prompts injected at each depth; Base and New per seed."""
    L = base.text.config.layers
    depths = list(range(L)) if depths is None else [int(d) for d in depths]
    if any(not 0 <= d < L for d in depths):
        raise ConfigError(f"depths must lie in [0, {L - 1}]")
    hyper = hyper or {}
    curve = SweepCurve(depths, {}, {})
    for seed in seeds:
        curve.base[int(seed)], curve.new[int(seed)] = [], []
        for d in depths:
            module = train_tuner("coop", base, task, default_hyper("coop", **{**hyper, "depth": d}), seed=seed)
            curve.base[int(seed)].append(accuracy(base, module, task.test))
            curve.new[int(seed)].append(accuracy(upgraded, module, task.test))
    zs = train_tuner("zs", base, task)
    curve.zero_shot_base = accuracy(base, zs, task.test)
    curve.config = {
        "depths": depths,
        "seeds": [int(s) for s in seeds],
        "task": int(task.seed),
        "hyper": hyper,
        "base_checksum": base.text_checksum(),
        "upgraded_checksum": upgraded.text_checksum(),
    }
    return curve


# -- OOD ----------------------------------------------------------------------


def ood_eval(pair, module, task):
    """Accuracy on the source test split and on every shifted split, no retraining."""
    if not task.shifted_tests:
        raise ConfigError("task has no shifted test splits")
    out = {"source": accuracy(pair, module, task.test)}
    for name in sorted(task.shifted_tests):
        out[name] = accuracy(pair, module, task.shifted_tests[name])
    return out


def shift_average(table):
    vals = [v for k, v in table.items() if k != "source"]
    return float(np.mean(vals))


def ood_table(pair, modules, task):
    """{method: {split: accuracy}} for a list of trained modules."""
    return {m.method: ood_eval(pair, m, task) for m in modules}


def ood_table_tsv(table, config=None):
    methods = sorted(table)
    cols = ["source"] + sorted(k for k in table[methods[0]] if k != "source")
    lines = [provenance_line(config or {}).rstrip("\n"), "method\t" + "\t".join(cols)]
    for m in methods:
        lines.append(m + "\t" + "\t".join(f"{table[m][c]:.2f}" for c in cols))
    return "\n".join(lines) + "\n"


# -- emitters -------------------------------------------------------------------


def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)
