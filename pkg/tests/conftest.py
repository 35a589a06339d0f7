"""Shared fixtures. The trained joint model is expensive (about a
minute), so it is trained once and cached on disk keyed by the full
recipe; tests always consume the checkpoint reload so cached and fresh
runs see bit-identical weights.
"""

import dataclasses
import hashlib
import json
import os

import pytest

from mvrecon.corpus import generate_corpus
from mvrecon.embedding import load_checkpoint, save_checkpoint
from mvrecon.training import ModelConfig, TrainConfig, train_joint

CACHE_DIR = os.path.join(os.path.dirname(__file__), ".cache")
CORPUS_SIZE = 20
CORPUS_SEED = 0


def model_recipe():
    mc = ModelConfig.desk()
    tc = TrainConfig.desk()
    tc.epochs = 1600
    tc.decay_every = 400
    return mc, tc


def _recipe_key(mc, tc):
    doc = {
        "corpus": [CORPUS_SIZE, CORPUS_SEED],
        "model": dataclasses.asdict(mc),
        "train": dataclasses.asdict(tc),
    }
    blob = json.dumps(doc, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(CORPUS_SIZE, seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def model(corpus):
    mc, tc = model_recipe()
    path = os.path.join(CACHE_DIR, f"model-{_recipe_key(mc, tc)}.json")
    if not os.path.exists(path):
        trained, _ = train_joint(corpus, mc, tc)
        os.makedirs(CACHE_DIR, exist_ok=True)
        save_checkpoint(path, trained)
    return load_checkpoint(path)
