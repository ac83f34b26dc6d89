"""Shared fixtures: tiny networks, small molecules and synthetic datasets"""

import numpy as np
import pytest

from config.pipeline import EvalConfig, NetConfig, TrainConfig
from config.settings import TestingConfig
from core.chemgraph import build_graph, random_split
from core.models import MoleculeRecord
from core.synthetic import make_synthetic_dataset

WATER_XYZ = """3
id=water U0=-2080.5 zpe=0.56
O  0.000000  0.000000  0.117300
H  0.000000  0.757200 -0.469200
H  0.000000 -0.757200 -0.469200
"""


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def tiny_net():
    return NetConfig(
        embedding_dim=4,
        interaction_steps=2,
        rbf_count=6,
        cutoff=5.0,
        hidden_dims=(5,),
        elements=(1, 6, 8),
    )


@pytest.fixture
def small_net():
    return NetConfig(embedding_dim=16, interaction_steps=2, rbf_count=24, cutoff=5.0, hidden_dims=(16,), elements=(1,))


@pytest.fixture
def quick_train():
    return TrainConfig(
        max_steps=60,
        warmup_steps=20,
        interp_steps=20,
        batch_size=16,
        lr0=5e-3,
        eval_every=10,
        patience=5,
    )


@pytest.fixture
def eval_config():
    return EvalConfig(bins=4, quantile_levels=9)


@pytest.fixture
def app_config():
    return TestingConfig()


def make_record(molecule_id, elements, positions, target=None):
    return MoleculeRecord(
        id=molecule_id,
        elements=tuple(elements),
        positions=np.asarray(positions, dtype=np.float64),
        target=target,
    )


def random_graph(rng, n_atoms, elements=(1, 6, 8), cutoff=5.0, molecule_id="g"):
    """Random molecule in a 2.5 Å box, so every pair is within the cutoff"""
    record = make_record(
        molecule_id,
        rng.choice(elements, size=n_atoms),
        rng.uniform(0.0, 2.5, size=(n_atoms, 3)),
        target=float(rng.normal()),
    )
    return build_graph(record, cutoff)


@pytest.fixture
def water():
    return make_record("water", (8, 1, 1), [[0.0, 0.0, 0.1173], [0.0, 0.7572, -0.4692], [0.0, -0.7572, -0.4692]], 1.0)


@pytest.fixture
def synthetic():
    dataset = make_synthetic_dataset(240, seed=3)
    split = random_split(dataset.ids, (160, 40), seed=3)
    return dataset, split
