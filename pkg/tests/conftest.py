"""Shared fixtures: pretrained and upgraded pairs, cached on disk per source hash.

Pretraining and upgrading take tens of seconds each, so the pairs are built
once and stored under pytest's cache directory, keyed by a hash of the
package sources; any code change rebuilds them.
"""

import hashlib
import pathlib

import pytest

import plugcompat
from plugcompat.data import generate_task
from plugcompat.encoder import ModelPair, contrastive_pretrain
from plugcompat.upgrade import UpgradeRecipe, simulate_upgrade

SRC = pathlib.Path(plugcompat.__file__).parent


def source_hash():
    h = hashlib.sha256()
    for path in sorted(SRC.rglob("*.py")):
        h.update(path.relative_to(SRC).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class PairStore:
    def __init__(self, root):
        self.root = pathlib.Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._memo = {}

    def _cached(self, name, build):
        if name in self._memo:
            return self._memo[name]
        path = self.root / f"{name}.pcmp"
        if path.exists() and pathlib.Path(str(path) + ".json").exists():
            pair = ModelPair.load(path)
        else:
            pair = build()
            pair.save(path)
            pair = ModelPair.load(path)
        self._memo[name] = pair
        return pair

    def base(self, seed=0):
        return self._cached(f"base-{seed}", lambda: contrastive_pretrain(seed=seed)[0])

    def upgraded(self, seed=0):
        return self._cached(f"upgraded-{seed}", lambda: simulate_upgrade(self.base(seed), UpgradeRecipe(), seed=seed))


@pytest.fixture(scope="session")
def pairs(request):
    root = request.config.cache.mkdir(f"plugcompat-{source_hash()}")
    return PairStore(root)


@pytest.fixture(scope="session")
def base_pair(pairs):
    return pairs.base(0)


@pytest.fixture(scope="session")
def upgraded_pair(pairs):
    return pairs.upgraded(0)


@pytest.fixture(scope="session")
def task0():
    return generate_task(0)
