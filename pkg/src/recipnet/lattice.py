"""Lattice algebra, coordinate transforms, and reciprocal-basis construction.

Conventions used throughout the package:
  * the lattice matrix has the three lattice vectors as ROWS, so a row of
    fractional coordinates maps to Cartesian as ``p = f @ lattice``;
  * fractional coordinates live in [0, 1) after wrapping;
  * reciprocal vectors are rows of ``b`` and satisfy ``lattice @ b.T = 2*pi*I``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import LatticeDegenerate, NonFiniteCoordinate

VOLUME_EPS = 1e-6  # |det| below this counts as degenerate (cubic angstroms)
TWO_PI = 2.0 * np.pi


@dataclass
class CrystalStructure:
    """A periodic crystal: atomic numbers, fractional coordinates, lattice.

    ``lattice`` rows are the three lattice vectors in angstroms.  ``labels``
    maps property names to target values (None for missing labels).
    """

    atomic_numbers: List[int]
    frac_coords: np.ndarray
    lattice: np.ndarray
    labels: Dict[str, Optional[float]] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        self.frac_coords = np.asarray(self.frac_coords, dtype=np.float64)
        self.lattice = np.asarray(self.lattice, dtype=np.float64)
        self.atomic_numbers = [int(z) for z in self.atomic_numbers]

    @property
    def num_atoms(self) -> int:
        return len(self.atomic_numbers)

    def cart_coords(self) -> np.ndarray:
        """Cartesian positions, one row per atom."""
        return self.frac_coords @ self.lattice

    def wrapped(self) -> "CrystalStructure":
        """Copy with fractional coordinates wrapped into [0, 1)."""
        return CrystalStructure(
            atomic_numbers=list(self.atomic_numbers),
            frac_coords=wrap_fractional(self.frac_coords),
            lattice=self.lattice.copy(),
            labels=dict(self.labels),
            id=self.id,
        )


@dataclass(frozen=True)
class FrequencyIndex:
    """Integer triple selecting one reciprocal-lattice point."""

    n: Tuple[int, int, int]


@dataclass
class ReciprocalBasis:
    """Reciprocal vectors (rows of ``b``), cell volume, and frequency set.

    ``right_handed`` records the orientation of the input lattice; ``volume``
    is always positive.
    """

    b: np.ndarray
    volume: float
    frequencies: List[FrequencyIndex]
    right_handed: bool = True

    def frequency_array(self) -> np.ndarray:
        """Frequencies as an (m, 3) integer array in enumeration order."""
        return np.array([f.n for f in self.frequencies], dtype=np.int64).reshape(-1, 3)

    def k_vectors(self) -> np.ndarray:
        """Cartesian wave vectors, one row per frequency (inverse angstroms)."""
        return self.frequency_array().astype(np.float64) @ self.b

    def k_norms(self) -> np.ndarray:
        """Rotation-invariant |k| per frequency."""
        return np.linalg.norm(self.k_vectors(), axis=1)


def _check_lattice(lattice: np.ndarray) -> np.ndarray:
    lattice = np.asarray(lattice, dtype=np.float64)
    if lattice.shape != (3, 3):
        raise LatticeDegenerate(f"lattice must be 3x3, got {lattice.shape}")
    if not np.all(np.isfinite(lattice)):
        raise LatticeDegenerate("lattice contains non-finite entries")
    det = np.linalg.det(lattice)
    if abs(det) <= VOLUME_EPS:
        raise LatticeDegenerate(f"|det| = {abs(det):.3e} below threshold {VOLUME_EPS}")
    return lattice


def frac_to_cart(lattice: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Map fractional coordinates to Cartesian: f1*l1 + f2*l2 + f3*l3.

    Accepts a single 3-vector or an (n, 3) array.
    """
    lattice = _check_lattice(lattice)
    f = np.asarray(f, dtype=np.float64)
    return f @ lattice


def cart_to_frac(lattice: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Invert frac_to_cart by a linear solve (no explicit inverse)."""
    lattice = _check_lattice(lattice)
    p = np.asarray(p, dtype=np.float64)
    # f @ L = p  <=>  L.T @ f.T = p.T
    return np.linalg.solve(lattice.T, p.T).T


def wrap_fractional(f: np.ndarray) -> np.ndarray:
    """Wrap fractional coordinates componentwise into [0, 1)."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise NonFiniteCoordinate("fractional coordinates contain NaN/inf")
    return f - np.floor(f)


def enumerate_frequencies(kmax: int, include_zero: bool = False) -> List[FrequencyIndex]:
    """All integer triples with max|n_i| <= kmax, lexicographic order.

    The zero triple is excluded by default: it carries only the mean of the
    node embeddings, which mean pooling already captures.
    """
    if kmax < 0:
        raise ValueError(f"kmax must be >= 0, got {kmax}")
    rng = range(-kmax, kmax + 1)
    out = []
    for n in itertools.product(rng, rng, rng):
        if n == (0, 0, 0) and not include_zero:
            continue
        out.append(FrequencyIndex(n))
    return out


def reciprocal_basis(
    lattice: np.ndarray, kmax: int = 1, include_zero: bool = False
) -> ReciprocalBasis:
    """Reciprocal vectors b1 = 2*pi*(l2 x l3)/V (cyclic) plus a frequency set.

    The signed volume is used in the construction so that
    ``lattice @ b.T = 2*pi*I`` holds for either handedness; the stored
    ``volume`` is its absolute value.
    """
    lattice = _check_lattice(lattice)
    l1, l2, l3 = lattice
    signed_volume = float(l1 @ np.cross(l2, l3))
    b = TWO_PI / signed_volume * np.stack(
        [np.cross(l2, l3), np.cross(l3, l1), np.cross(l1, l2)]
    )
    return ReciprocalBasis(
        b=b,
        volume=abs(signed_volume),
        frequencies=enumerate_frequencies(kmax, include_zero),
        right_handed=signed_volume > 0,
    )


def perpendicular_widths(lattice: np.ndarray) -> np.ndarray:
    """Distance between opposite cell faces along each lattice direction.

    Equal to 2*pi / |b_i|; used to bound periodic-image searches.
    """
    lattice = _check_lattice(lattice)
    l1, l2, l3 = lattice
    volume = abs(float(l1 @ np.cross(l2, l3)))
    cross_norms = np.array(
        [
            np.linalg.norm(np.cross(l2, l3)),
            np.linalg.norm(np.cross(l3, l1)),
            np.linalg.norm(np.cross(l1, l2)),
        ]
    )
    return volume / cross_norms


def validate_structure(s: CrystalStructure) -> List[str]:
    """Collect invariant violations; empty list means the structure is valid."""
    violations: List[str] = []

    lattice = np.asarray(s.lattice, dtype=np.float64)
    if lattice.shape != (3, 3):
        violations.append(f"LatticeDegenerate: lattice shape {lattice.shape} is not 3x3")
    elif not np.all(np.isfinite(lattice)):
        violations.append("LatticeDegenerate: lattice has non-finite entries")
    elif abs(np.linalg.det(lattice)) <= VOLUME_EPS:
        violations.append(
            f"LatticeDegenerate: |det| = {abs(np.linalg.det(lattice)):.3e} <= {VOLUME_EPS}"
        )

    frac = np.asarray(s.frac_coords, dtype=np.float64)
    if frac.ndim != 2 or frac.shape[1] != 3:
        violations.append(f"InvalidCoordinates: frac_coords shape {frac.shape} is not (n, 3)")
    else:
        if frac.shape[0] < 1:
            violations.append("EmptyStructure: at least one atom required")
        if not np.all(np.isfinite(frac)):
            violations.append("NonFiniteCoordinate: frac_coords contain NaN/inf")
        elif np.any(frac < 0.0) or np.any(frac >= 1.0):
            violations.append("UnwrappedCoordinate: frac_coords outside [0, 1)")
        if len(s.atomic_numbers) != frac.shape[0]:
            violations.append(
                f"LengthMismatch: {len(s.atomic_numbers)} atomic numbers for "
                f"{frac.shape[0]} coordinate rows"
            )

    for z in s.atomic_numbers:
        if not isinstance(z, (int, np.integer)) or z < 1:
            violations.append(f"InvalidAtomicNumber: Z = {z!r}")
            break

    return violations
