from pathlib import Path

import numpy as np
import pytest

from mixup_merge.checkpoint import write_checkpoint
from mixup_merge.components.config import LabConfig
from mixup_merge.tensors import TensorMap

DATA_DIR = Path(__file__).parent / "data"

SHAPES = {
    "encoder.bias": (4,),
    "encoder.weight": (4, 3),
    "head.weight": (2, 4),
}


def dyadic_map(seed: int, shapes: dict[str, tuple[int, ...]] = SHAPES) -> TensorMap:
    """Values ``1 + k / 64`` in [1, 2): sums and differences of two such maps are exact."""
    rng = np.random.default_rng(seed)
    return TensorMap({n: 1.0 + rng.integers(0, 64, size=s) / 64.0 for n, s in shapes.items()})


def random_map(seed: int, shapes: dict[str, tuple[int, ...]] = SHAPES) -> TensorMap:
    rng = np.random.default_rng(seed)
    return TensorMap({n: rng.normal(size=s) for n, s in shapes.items()})


@pytest.fixture
def base() -> TensorMap:
    return dyadic_map(0)


@pytest.fixture
def theta1() -> TensorMap:
    return dyadic_map(1)


@pytest.fixture
def theta2() -> TensorMap:
    return dyadic_map(2)


@pytest.fixture
def pdr_table() -> Path:
    return DATA_DIR / "pdr_tables.csv"


@pytest.fixture
def small_lab() -> LabConfig:
    return LabConfig(
        hidden=(8, 8),
        n_train=64,
        n_test=64,
        pretext_steps=150,
        task1_steps=150,
        task2_steps=80,
    )


@pytest.fixture
def ckpt_files(tmp_path: Path, base: TensorMap, theta1: TensorMap, theta2: TensorMap) -> dict:
    paths = {}
    for name, t in (("base", base), ("a", theta1), ("b", theta2)):
        paths[name] = tmp_path / f"{name}.ckpt"
        write_checkpoint(t, paths[name])
    return paths
