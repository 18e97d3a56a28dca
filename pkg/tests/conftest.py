import numpy as np
import pytest

from recipnet.data import DatasetRecord
from recipnet.lattice import CrystalStructure


def random_lattice(rng, min_det=0.1, max_cond=1e6):
    """Random 3x3 lattice with entries U[-3,3], non-degenerate and well conditioned."""
    while True:
        lat = rng.uniform(-3.0, 3.0, size=(3, 3))
        if abs(np.linalg.det(lat)) > min_det and np.linalg.cond(lat) < max_cond:
            return lat


def random_structure(rng, num_atoms=None, max_z=20, labels=None):
    n = int(num_atoms if num_atoms is not None else rng.integers(1, 7))
    return CrystalStructure(
        atomic_numbers=[int(z) for z in rng.integers(1, max_z + 1, size=n)],
        frac_coords=rng.uniform(0.0, 1.0, size=(n, 3)),
        lattice=random_lattice(rng) + np.eye(3) * 2.0,
        labels=labels or {},
        id=f"rand-{rng.integers(1 << 30)}",
    )


def synthetic_records(rng, count, tasks=("energy",), max_atoms=5, drop_rate=0.0):
    """Records whose labels are a smooth function of composition and cell size."""
    records = []
    for i in range(count):
        n = int(rng.integers(2, max_atoms + 1))
        zs = [int(z) for z in rng.integers(1, 20, size=n)]
        lattice = random_lattice(rng) + np.eye(3) * 2.0
        volume = abs(np.linalg.det(lattice))
        targets = {}
        for t, task in enumerate(tasks):
            if drop_rate and rng.uniform() < drop_rate:
                continue
            targets[task] = float(
                (t + 1) * (-0.15 * np.mean(zs) + 0.4 * volume ** (1 / 3))
                + 0.02 * rng.normal()
            )
        records.append(
            DatasetRecord(
                id=f"synth-{i}",
                lattice=lattice,
                frac_coords=rng.uniform(0, 1, size=(n, 3)),
                atomic_numbers=zs,
                targets=targets,
            )
        )
    return records


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
