"""Synthetic few-shot tasks over a fixed concept world.

The world assigns every class token of the vocabulary a unit "concept"
direction in image space. Pretraining pairs images of a concept with
captions ending in its token; a task picks ``C`` well-separated concepts and
renders each one with a task-specific appearance offset, so zero-shot
transfer is good but leaves room for few-shot tuning.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from plugcompat.errors import ConfigError, GenerationError
from plugcompat.numcore import container
from plugcompat.rng import Rng, derive_seed

FUNCTION_WORDS = ("a", "photo", "of", "the", "picture", "an", "image", "texture")
N_FUNCTION_TOKENS = len(FUNCTION_WORDS)
WORLD_SEED = 20240501

# "a photo of a [class]"
ZS_TEMPLATE = (0, 1, 2, 0)
CAPTION_TEMPLATES = (
    (0, 1, 2, 0),
    (0, 4, 2, 3),
    (5, 6, 2, 0),
    (0, 1, 2, 3),
    (3, 6, 2, 0),
    (3,),
    (0,),
    (),
)


@dataclass(frozen=True)
class World:
    """Concept bank shared by pretraining, upgrades and every task."""

    img_dim: int = 16
    vocab_size: int = 64
    seed: int = WORLD_SEED

    @property
    def n_concepts(self):
        return self.vocab_size - N_FUNCTION_TOKENS

    def token_of(self, concept):
        return N_FUNCTION_TOKENS + int(concept)

    def concept_of(self, token):
        return int(token) - N_FUNCTION_TOKENS

    def prototypes(self):
        rng = Rng(derive_seed(self.seed, "concepts", self.img_dim))
        return np.stack([rng.unit_vector(self.img_dim) for _ in range(self.n_concepts)])


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class ShiftSpec:
    kind: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("noise", "rotation", "scale"):
            raise ConfigError(f"unknown shift kind {self.kind!r}")
        if self.magnitude < 0:
            raise ConfigError("shift magnitude must be >= 0")

    @property
    def name(self):
        return f"{self.kind}-{self.magnitude:g}"


DEFAULT_SHIFTS = (
    ShiftSpec("noise", 0.5, 11),
    ShiftSpec("rotation", 0.6, 12),
    ShiftSpec("scale", 0.6, 13),
)


@dataclass
class SyntheticTask:
    seed: int
    class_tokens: list
    prototypes: np.ndarray
    train: Split
    test: Split
    config: dict = field(default_factory=dict)
    shifted_tests: dict = field(default_factory=dict)
    shift_specs: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.class_tokens)

    def with_shifts(self, specs=DEFAULT_SHIFTS):
        for spec in specs:
            self.shifted_tests[spec.name] = make_shifted_testset(self, spec)
            self.shift_specs[spec.name] = spec
        return self

    def tensors(self):
        out = {
            "prototypes": self.prototypes,
            "train.x": self.train.x,
            "train.y": self.train.y.astype(np.float64),
            "test.x": self.test.x,
            "test.y": self.test.y.astype(np.float64),
        }
        for name, split in self.shifted_tests.items():
            out[f"shift.{name}.x"] = split.x
            out[f"shift.{name}.y"] = split.y.astype(np.float64)
        return out

    def manifest(self):
        return {
            "seed": self.seed,
            "class_tokens": [list(map(int, t)) for t in self.class_tokens],
            "config": self.config,
            "shifts": {k: asdict(v) for k, v in sorted(self.shift_specs.items())},
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

        def split(prefix):
            return Split(tensors[f"{prefix}.x"], tensors[f"{prefix}.y"].astype(np.int64))

        task = cls(
            seed=manifest["seed"],
            class_tokens=[list(t) for t in manifest["class_tokens"]],
            prototypes=tensors["prototypes"],
            train=split("train"),
            test=split("test"),
            config=manifest["config"],
        )
        for name, spec in manifest["shifts"].items():
            task.shift_specs[name] = ShiftSpec(**spec)
            task.shifted_tests[name] = split(f"shift.{name}")
        return task


def _select_concepts(rng, bank, jitter_for, count, bound, attempts=200):
    n = len(bank)
    for _ in range(attempts):
        chosen, protos = [], []
        for concept in rng.permutation(n):
            proto = jitter_for(int(concept))
            if all(abs(float(proto @ q)) <= bound for q in protos):
                chosen.append(int(concept))
                protos.append(proto)
                if len(chosen) == count:
                    return chosen, np.stack(protos)
    raise GenerationError(
        f"could not find {count} concepts with pairwise |cos| <= {bound:.3f} "
        f"among {n} in {bank.shape[1]} dimensions"
    )


def generate_task(
    seed,
    C=8,
    K=16,
    M=64,
    d_img=16,
    class_separation=0.72,
    noise=0.2,
    appearance_jitter=1.4,
    world=None,
):
    """Sample a K-shot task with M test images per class.

    ``class_separation`` bounds the pairwise prototype cosine by
    ``1 - class_separation``; ``appearance_jitter`` controls how far the
    task's rendering of a concept departs from its pretraining direction.
    """
    world = world or World(img_dim=d_img)
    if world.img_dim != d_img:
        raise ConfigError(f"world image dim {world.img_dim} != requested {d_img}")
    if C < 2 or K < 1 or M < 1:
        raise ConfigError("need C >= 2, K >= 1, M >= 1")
    if C > world.n_concepts:
        raise ConfigError(f"C={C} exceeds the class-token budget {world.n_concepts}")
    if not 0.0 < class_separation <= 1.0:
        raise ConfigError("class_separation must lie in (0, 1]")
    bank = world.prototypes()
    rng = Rng(derive_seed(seed, "task"))

    def jitter_for(concept):
        g = Rng(derive_seed(seed, "appearance", concept)).normals((d_img,))
        v = bank[concept] + appearance_jitter * g / np.sqrt(d_img)
        return v / np.linalg.norm(v)

    concepts, protos = _select_concepts(rng, bank, jitter_for, C, 1.0 - class_separation)
    sample_rng = rng.child("samples")

    def draw(per_class):
        xs, ys = [], []
        for c in range(C):
            xs.append(protos[c] + noise * sample_rng.normals((per_class, d_img)))
            ys.extend([c] * per_class)
        return Split(np.concatenate(xs), np.array(ys, dtype=np.int64))

    train = draw(K)
    test = draw(M)
    config = dict(
        C=C,
        K=K,
        M=M,
        d_img=d_img,
        class_separation=class_separation,
        noise=noise,
        appearance_jitter=appearance_jitter,
        world_seed=world.seed,
    )
    return SyntheticTask(
        seed=int(seed),
        class_tokens=[[world.token_of(c)] for c in concepts],
        prototypes=protos,
        train=train,
        test=test,
        config=config,
    )


def rotation_matrix(dim, magnitude, seed):
    """exp(magnitude * A) for a random skew-symmetric A of unit spectral norm."""
    g = Rng(derive_seed(seed, "rotation", dim)).normals((dim, dim))
    a = g - g.T
    a /= np.linalg.norm(a, 2)
    r = scipy.linalg.expm(magnitude * a)
    det = np.linalg.det(r)
    if not np.isclose(det, 1.0, atol=1e-9):
        raise GenerationError(f"rotation determinant {det} != +1")
    return r


def apply_shift(x, spec):
    x = np.asarray(x, dtype=np.float64)
    if spec.magnitude == 0:
        return x.copy()
    dim = x.shape[1]
    if spec.kind == "rotation":
        return x @ rotation_matrix(dim, spec.magnitude, spec.seed).T
    rng = Rng(derive_seed(spec.seed, spec.kind, dim))
    if spec.kind == "noise":
        return x + spec.magnitude * rng.normals(x.shape)
    return x * np.exp(spec.magnitude * rng.normals((dim,)))


def make_shifted_testset(task, spec):
    return Split(apply_shift(task.test.x, spec), task.test.y.copy())
