"""Synthetic one-dimensional regression task dressed as diatomic molecules

Each molecule is an H-H pair whose bond length encodes x (d = 2 Å + x), so
the message-passing network sees x through its single distance feature.
"""

from typing import Callable, Tuple, Union

import numpy as np

from core.chemgraph import MolecularDataset
from core.errors import ConfigError
from core.models import MoleculeRecord
from utils import numpy_rng

BOND_OFFSET = 2.0  # Å
HYDROGEN = 1

TARGET_FUNCTIONS = {
    "sin2x": lambda x: np.sin(2.0 * x),
    "sinx": np.sin,
}


def heteroscedastic_sd(x: np.ndarray) -> np.ndarray:
    """True noise SD 0.05 + 0.2 x^2"""
    return 0.05 + 0.2 * np.asarray(x) ** 2


def noise_function(noise: Union[str, float]) -> Callable[[np.ndarray], np.ndarray]:
    if noise == "heteroscedastic":
        return heteroscedastic_sd
    try:
        level = float(noise)
    except (TypeError, ValueError):
        raise ConfigError(f"unknown noise model {noise!r}")
    return lambda x: np.full_like(np.asarray(x, dtype=np.float64), level)


def diatomic(molecule_id: str, x: float, target: float, noise_sd: float) -> MoleculeRecord:
    positions = np.array([[0.0, 0.0, 0.0], [BOND_OFFSET + x, 0.0, 0.0]])
    return MoleculeRecord(
        id=molecule_id,
        elements=(HYDROGEN, HYDROGEN),
        positions=positions,
        properties={"x": float(x), "noise_sd": float(noise_sd)},
        target=float(target),
        source="synthetic",
    )


def make_synthetic_dataset(
    n: int,
    seed: int,
    x_range: Tuple[float, float] = (-1.0, 1.0),
    function: str = "sin2x",
    noise: Union[str, float] = "heteroscedastic",
    prefix: str = "syn",
) -> MolecularDataset:
    """
    Draw x uniformly on x_range and y = f(x) + noise

    Args:
        n: Number of molecules
        seed: Seed of the draw; the same seed gives the same dataset
        x_range: Interval of x; keep BOND_OFFSET + x within the graph cutoff
        function: "sin2x" or "sinx"
        noise: "heteroscedastic" (0.05 + 0.2 x^2) or a constant SD
        prefix: Id prefix, so in- and out-of-distribution sets can be merged
    """
    if function not in TARGET_FUNCTIONS:
        raise ConfigError(f"unknown synthetic function {function!r}")
    lo, hi = x_range
    if BOND_OFFSET + lo <= 0.0:
        raise ConfigError(f"x range {x_range} gives non-positive bond lengths")
    rng = numpy_rng("synthetic", prefix, seed)
    x = rng.uniform(lo, hi, size=n)
    sd = noise_function(noise)(x)
    y = TARGET_FUNCTIONS[function](x) + rng.normal(0.0, 1.0, size=n) * sd
    records = tuple(
        diatomic(f"{prefix}{i:06d}", x[i], y[i], sd[i]) for i in range(n)
    )
    return MolecularDataset(records, name=f"synthetic-{function}")


def x_values(dataset: MolecularDataset) -> np.ndarray:
    return np.array([record.properties["x"] for record in dataset.records])


def true_sd(dataset: MolecularDataset) -> np.ndarray:
    return np.array([record.properties["noise_sd"] for record in dataset.records])
