"""Long-range message passing through lattice Fourier features.

Node embeddings are aggregated into complex-valued coefficients over an
integer frequency set (one coefficient vector per frequency), reweighted by
a learnable filter, and mapped back to a per-atom real-space update that is
added residually.  Phases are 2*pi*(n . f) with integer frequency triples n
and fractional coordinates f, so the block is exactly periodic in f and
invariant under global fractional translations.

The filter is either a small MLP on the rotation-invariant scalar |k|
(continuous mode, the default) or a free table with one row per frequency.
Any volume prefactor of the inverse transform is absorbed by the filter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import FrequencyMismatch, ShapeError
from .lattice import ReciprocalBasis

TWO_PI = 2.0 * np.pi


def phase_matrices(frac_coords: np.ndarray, frequencies: np.ndarray):
    """cos/sin of 2*pi*(n . f) for every (atom, frequency) pair, (n, m)."""
    frac = np.asarray(frac_coords, dtype=np.float64)
    freqs = np.asarray(frequencies, dtype=np.float64)
    phases = TWO_PI * frac @ freqs.T
    return np.cos(phases), np.sin(phases)


@dataclass
class StructureFactorSet:
    """Real/imaginary coefficient vectors per frequency, with provenance."""

    real: Tensor  # (m, d)
    imag: Tensor  # (m, d)
    frequencies: np.ndarray  # (m, 3) integer triples

    def conjugate_pair_residual(self) -> float:
        """Max |r(-n) - conj(r(n))| over frequency pairs present in the set."""
        index = {tuple(n): i for i, n in enumerate(self.frequencies)}
        worst = 0.0
        for n, i in index.items():
            j = index.get((-n[0], -n[1], -n[2]))
            if j is None:
                continue
            worst = max(worst, float(np.max(np.abs(self.real.data[j] - self.real.data[i]))))
            worst = max(worst, float(np.max(np.abs(self.imag.data[j] + self.imag.data[i]))))
        return worst


@dataclass
class ReciprocalFilter:
    """Learnable per-frequency channel weights.

    continuous_mlp: |k| is expanded over a fixed Gaussian RBF grid, then a
    two-layer MLP maps the features to d weights.  The bounded encoding
    keeps the filter tame between and beyond the |k| values seen in
    training (raw-scalar MLPs extrapolate without bound), and the weights
    stay a function of |k| alone, so rotation invariance is preserved.
    per_index_table: a free (num_frequencies, d) table, for ablations.
    """

    mode: str
    w1: Optional[Parameter] = None
    b1: Optional[Parameter] = None
    w2: Optional[Parameter] = None
    b2: Optional[Parameter] = None
    table: Optional[Parameter] = None
    k_grid_max: float = 25.0
    k_num_centers: int = 32

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        width: int,
        prefix: str,
        mode: str = "continuous_mlp",
        hidden: int = 64,
        num_frequencies: Optional[int] = None,
        output_scale: float = 1e-4,
        k_grid_max: float = 25.0,
        k_num_centers: int = 32,
        dtype=np.float64,
    ) -> "ReciprocalFilter":
        """Final layer scaled near zero so the block starts as an identity."""
        if mode == "continuous_mlp":
            b_in = 1.0 / np.sqrt(k_num_centers)
            w1 = rng.uniform(-b_in, b_in, size=(k_num_centers, hidden)).astype(dtype)
            b1 = rng.uniform(-b_in, b_in, size=hidden).astype(dtype)
            b_h = 1.0 / np.sqrt(hidden)
            w2 = output_scale * rng.uniform(-b_h, b_h, size=(hidden, width)).astype(dtype)
            b2 = output_scale * rng.uniform(-b_h, b_h, size=width).astype(dtype)
            return cls(
                mode=mode,
                w1=ad.parameter(w1, f"{prefix}.w1"),
                b1=ad.parameter(b1, f"{prefix}.b1"),
                w2=ad.parameter(w2, f"{prefix}.w2"),
                b2=ad.parameter(b2, f"{prefix}.b2"),
                k_grid_max=k_grid_max,
                k_num_centers=k_num_centers,
            )
        if mode == "per_index_table":
            if num_frequencies is None:
                raise ValueError("per_index_table mode needs num_frequencies")
            table = output_scale * rng.standard_normal((num_frequencies, width)).astype(dtype)
            return cls(mode=mode, table=ad.parameter(table, f"{prefix}.table"))
        raise ValueError(f"unknown filter mode {mode!r}")

    def parameters(self) -> List[Parameter]:
        if self.mode == "continuous_mlp":
            return [self.w1, self.b1, self.w2, self.b2]
        return [self.table]

    def k_features(self, k_norms: np.ndarray) -> np.ndarray:
        centers = np.linspace(0.0, self.k_grid_max, self.k_num_centers)
        sigma = centers[1] - centers[0]
        diff = np.asarray(k_norms, dtype=np.float64)[:, None] - centers[None, :]
        return np.exp(-(diff**2) / (2.0 * sigma**2))

    def weights(self, k_norms: np.ndarray) -> Tensor:
        """Channel weights per frequency, shape (m, d)."""
        if self.mode == "continuous_mlp":
            dt = self.w1.value.data.dtype
            x = Tensor(self.k_features(k_norms).astype(dt, copy=False))
            hidden = ad.silu(ad.linear(x, self.w1.value, self.b1.value))
            return ad.linear(hidden, self.w2.value, self.b2.value)
        if k_norms.shape[0] != self.table.value.shape[0]:
            raise FrequencyMismatch(
                f"table has {self.table.value.shape[0]} rows, got {k_norms.shape[0]} frequencies"
            )
        return self.table.value


def factors_from_phases(cos_p: np.ndarray, sin_p: np.ndarray, h: Tensor) -> (Tensor, Tensor):
    """real = cos(phi)^T h, imag = -sin(phi)^T h."""
    real = ad.matmul(Tensor(np.ascontiguousarray(cos_p.T)), h)
    imag = ad.mul(ad.matmul(Tensor(np.ascontiguousarray(sin_p.T)), h), -1.0)
    return real, imag


def inverse_from_phases(
    cos_p: np.ndarray, sin_p: np.ndarray, real: Tensor, imag: Tensor, weights: Tensor
) -> Tensor:
    """Real part of the filtered inverse transform, one row per atom."""
    return ad.sub(
        ad.matmul(Tensor(cos_p), ad.mul(weights, real)),
        ad.matmul(Tensor(sin_p), ad.mul(weights, imag)),
    )


def structure_factors(
    h_global: Tensor, frac_coords: np.ndarray, frequencies: np.ndarray
) -> StructureFactorSet:
    """Aggregate node embeddings into one coefficient vector per frequency."""
    frequencies = np.asarray(frequencies)
    if h_global.shape[0] != np.asarray(frac_coords).shape[0]:
        raise ShapeError(
            f"{h_global.shape[0]} embeddings but {np.asarray(frac_coords).shape[0]} coordinates"
        )
    cos_p, sin_p = phase_matrices(frac_coords, frequencies)
    real, imag = factors_from_phases(cos_p, sin_p, h_global)
    return StructureFactorSet(real=real, imag=imag, frequencies=frequencies)


def inverse_filtered(
    factors: StructureFactorSet,
    frac_coords: np.ndarray,
    filter_weights: Tensor,
    frequencies: np.ndarray,
) -> Tensor:
    """Filtered inverse transform back to a per-atom embedding update."""
    frequencies = np.asarray(frequencies)
    if not np.array_equal(factors.frequencies, frequencies):
        raise FrequencyMismatch("structure factors were built from a different frequency set")
    if filter_weights.shape[0] != frequencies.shape[0]:
        raise FrequencyMismatch(
            f"filter produced {filter_weights.shape[0]} rows for "
            f"{frequencies.shape[0]} frequencies"
        )
    cos_p, sin_p = phase_matrices(frac_coords, frequencies)
    return inverse_from_phases(cos_p, sin_p, factors.real, factors.imag, filter_weights)


def reciprocal_block(
    h_global: Tensor,
    frac_coords: np.ndarray,
    basis: ReciprocalBasis,
    filt: ReciprocalFilter,
) -> Tensor:
    """Residual long-range update of the global node embeddings."""
    freqs = basis.frequency_array()
    if freqs.shape[0] == 0:
        raise FrequencyMismatch("reciprocal basis has an empty frequency set")
    factors = structure_factors(h_global, frac_coords, freqs)
    update = inverse_filtered(factors, frac_coords, filt.weights(basis.k_norms()), freqs)
    return ad.add(h_global, update)
