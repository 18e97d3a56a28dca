"""Initial node and edge features.

Node features come from a 92-wide per-element descriptor table mapped
through a linear layer to the hidden width.  Edge features expand the
inverse-scaled distance c/d over a grid of Gaussian radial basis functions,
then apply linear + softplus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import AtomOverlap, UnknownElement
from .graph import DISTANCE_EPS

FEATURE_WIDTH = 92
MAX_Z = 100


def _fallback_rows() -> np.ndarray:
    """One-hot element encoding padded to 92 columns.

    Z <= 92 is a plain one-hot; heavier elements reuse column 91 plus a
    low column so every Z in 1..100 stays distinct.
    """
    rows = np.zeros((MAX_Z, FEATURE_WIDTH), dtype=np.float64)
    for z in range(1, MAX_Z + 1):
        if z <= FEATURE_WIDTH:
            rows[z - 1, z - 1] = 1.0
        else:
            rows[z - 1, z - FEATURE_WIDTH - 1] = 1.0
            rows[z - 1, FEATURE_WIDTH - 1] = 1.0
    return rows


@dataclass
class AtomFeatureTable:
    """Per-element descriptor rows indexed by atomic number."""

    rows: np.ndarray

    @classmethod
    def from_json(cls, path) -> "AtomFeatureTable":
        """Load a JSON map of atomic-number string -> 92 reals."""
        with open(path) as fh:
            raw = json.load(fh)
        max_z = max(int(z) for z in raw)
        rows = np.zeros((max_z, FEATURE_WIDTH), dtype=np.float64)
        present = np.zeros(max_z, dtype=bool)
        for z_str, vec in raw.items():
            z = int(z_str)
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (FEATURE_WIDTH,):
                raise ValueError(f"feature row for Z={z} has length {vec.size}, want {FEATURE_WIDTH}")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"feature row for Z={z} has non-finite entries")
            rows[z - 1] = vec
            present[z - 1] = True
        table = cls(rows=rows)
        table._present = present
        return table

    @classmethod
    def default(cls) -> "AtomFeatureTable":
        """The packaged table; falls back to the generated one-hot encoding."""
        try:
            path = resources.files("recipnet").joinpath("data/atom_features.json")
            with resources.as_file(path) as p:
                return cls.from_json(p)
        except (FileNotFoundError, ModuleNotFoundError):
            return cls(rows=_fallback_rows())

    def features(self, atomic_numbers: Sequence[int]) -> np.ndarray:
        out = np.empty((len(atomic_numbers), FEATURE_WIDTH), dtype=np.float64)
        present = getattr(self, "_present", None)
        for i, z in enumerate(atomic_numbers):
            if z < 1 or z > self.rows.shape[0] or (present is not None and not present[z - 1]):
                raise UnknownElement(f"no feature row for atomic number {z}")
            out[i] = self.rows[z - 1]
        return out


@dataclass
class EdgeFeatureConfig:
    """Inverse-distance scaling constant and the Gaussian RBF grid."""

    scale_constant: float = -0.75
    num_centers: int = 256
    center_min: float = -4.0
    center_max: float = 4.0
    rbf_width: Optional[float] = None  # default: the center spacing

    def __post_init__(self):
        if self.center_min >= self.center_max:
            raise ValueError("center_min must be below center_max")
        if self.num_centers < 2:
            raise ValueError("need at least 2 RBF centers")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.center_min, self.center_max, self.num_centers)

    @property
    def width(self) -> float:
        if self.rbf_width is not None:
            return self.rbf_width
        return (self.center_max - self.center_min) / (self.num_centers - 1)


def rbf_expand(distances: np.ndarray, config: EdgeFeatureConfig) -> np.ndarray:
    """Gaussian RBF features of the inverse-scaled distances, (E, num_centers)."""
    distances = np.asarray(distances, dtype=np.float64)
    if np.any(distances <= DISTANCE_EPS):
        raise AtomOverlap(f"distance at or below {DISTANCE_EPS} cannot be embedded")
    scaled = config.scale_constant / distances
    diff = scaled[:, None] - config.centers[None, :]
    return np.exp(-(diff**2) / (2.0 * config.width**2))


def atom_embed(
    atomic_numbers: Sequence[int],
    table: AtomFeatureTable,
    weight: ad.Tensor,
    bias: ad.Tensor,
) -> ad.Tensor:
    """Initial short-range node features: linear map of the element rows."""
    return ad.linear(ad.Tensor(table.features(atomic_numbers)), weight, bias)


def init_global(h_local: ad.Tensor, weight: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    """Initial long-range node features: softplus of a linear map."""
    return ad.softplus(ad.linear(h_local, weight, bias))


def edge_embed(
    distances: np.ndarray,
    config: EdgeFeatureConfig,
    weight: ad.Tensor,
    bias: ad.Tensor,
) -> ad.Tensor:
    """Initial edge features: RBF expansion, linear map, softplus."""
    return ad.softplus(ad.linear(ad.Tensor(rbf_expand(distances, config)), weight, bias))


def write_default_table(path) -> None:
    """Write the packaged table format to ``path`` (atomic number -> 92 reals)."""
    rows = _fallback_rows()
    payload = {str(z): rows[z - 1].tolist() for z in range(1, MAX_Z + 1)}
    with open(path, "w") as fh:
        json.dump(payload, fh)
