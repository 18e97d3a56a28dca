"""Radius graph over periodic images with invariant edge distances.

Neighbor searches expand integer image shells until the shell's minimum
possible distance provably exceeds the current candidate radius, so skewed
cells are handled without a fixed supercell assumption.  The bound uses the
perpendicular cell widths: an image in shell rho (max|m_i| = rho) is at least
(rho - 1) * min_width away from any atom in the home cell.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import AtomOverlap
from .lattice import CrystalStructure, perpendicular_widths, wrap_fractional

DISTANCE_EPS = 1e-6  # angstroms; anything closer is an atom overlap


@dataclass(frozen=True)
class PeriodicEdge:
    """Directed edge src -> dst, with dst displaced by ``image`` lattice steps."""

    src: int
    dst: int
    image: Tuple[int, int, int]
    distance: float


@dataclass
class PeriodicGraph:
    num_nodes: int
    edges: List[PeriodicEdge]
    per_node_radius: List[float]
    _arrays: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def _arr(self, key, build):
        if key not in self._arrays:
            self._arrays[key] = build()
        return self._arrays[key]

    def src_array(self) -> np.ndarray:
        return self._arr("src", lambda: np.array([e.src for e in self.edges], dtype=np.int64))

    def dst_array(self) -> np.ndarray:
        return self._arr("dst", lambda: np.array([e.dst for e in self.edges], dtype=np.int64))

    def image_array(self) -> np.ndarray:
        return self._arr(
            "image",
            lambda: np.array([e.image for e in self.edges], dtype=np.int64).reshape(-1, 3),
        )

    def distance_array(self) -> np.ndarray:
        return self._arr(
            "dist", lambda: np.array([e.distance for e in self.edges], dtype=np.float64)
        )


def _images_up_to_shell(max_shell: int) -> np.ndarray:
    r = range(-max_shell, max_shell + 1)
    return np.array(list(itertools.product(r, r, r)), dtype=np.int64)


def _candidate_distances(structure: CrystalStructure, max_shell: int):
    """Distances from every atom to every atom image within the shell bound.

    Returns (images (M,3), dist (n, n, M)) where dist[i, j, g] is the distance
    from atom i to atom j displaced by images[g].
    """
    frac = wrap_fractional(structure.frac_coords)
    cart = frac @ structure.lattice
    images = _images_up_to_shell(max_shell)
    shifts = images.astype(np.float64) @ structure.lattice  # (M, 3)
    # vec[i, j, g] = cart[j] + shifts[g] - cart[i]
    vec = cart[None, :, None, :] + shifts[None, None, :, :] - cart[:, None, None, :]
    dist = np.linalg.norm(vec, axis=-1)
    return images, dist


def knn_radius(structure: CrystalStructure, k: int) -> List[float]:
    """Distance to the k-th nearest periodic neighbor of each atom.

    The atom's own (0,0,0) image is excluded; images of itself in other cells
    count as neighbors.  Shells are expanded until the k-th distance is final.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = structure.num_atoms
    min_width = float(np.min(perpendicular_widths(structure.lattice)))

    shell = 1
    while True:
        images, dist = _candidate_distances(structure, shell)
        self_image = np.all(images == 0, axis=1)
        radii = np.empty(n, dtype=np.float64)
        for i in range(n):
            d = dist[i].copy()
            d[i, self_image] = np.inf  # drop the atom itself
            flat = np.sort(d.ravel())
            if flat.shape[0] < k or not np.isfinite(flat[k - 1]):
                radii[i] = np.inf
            else:
                radii[i] = flat[k - 1]
        # unexplored shells are at least shell * min_width away
        bound = shell * min_width
        if np.all(np.isfinite(radii)) and bound > float(np.max(radii)):
            return [float(r) for r in radii]
        shell += 1


def build_graph(
    structure: CrystalStructure, k: int, radius_scale: float = 1.0
) -> PeriodicGraph:
    """Directed periodic radius graph with per-node k-th-neighbor radii.

    Node i connects to every periodic image within radius_scale * radius[i];
    the reverse of every edge is added so both directions are always present.
    Edges are sorted by (src, distance, dst, image) for determinism.
    """
    if radius_scale < 1.0:
        raise ValueError(f"radius_scale must be >= 1, got {radius_scale}")
    radii = knn_radius(structure, k)
    n = structure.num_atoms
    min_width = float(np.min(perpendicular_widths(structure.lattice)))
    max_radius = radius_scale * max(radii)
    # shells with (shell - 1) * min_width > max_radius cannot contribute
    max_shell = max(1, int(np.ceil(max_radius / min_width)) + 1)

    images, dist = _candidate_distances(structure, max_shell)
    self_image = np.all(images == 0, axis=1)

    overlap = dist < DISTANCE_EPS
    g0 = int(np.argmax(self_image))  # the (0,0,0) image: an atom is not its own overlap
    overlap[np.arange(n), np.arange(n), g0] = False
    if np.any(overlap):
        i, j, g = np.argwhere(overlap)[0]
        raise AtomOverlap(
            f"atoms {i} and {j} (image {tuple(images[g])}) are "
            f"{dist[i, j, g]:.3e} angstroms apart"
        )

    edge_map = {}
    for i in range(n):
        cutoff = radius_scale * radii[i] + 1e-12  # inclusive at the k-th distance
        d = dist[i].copy()
        d[i, self_image] = np.inf
        for j, g in zip(*np.nonzero(d <= cutoff)):
            image = tuple(int(c) for c in images[g])
            edge_map[(i, int(j), image)] = float(d[j, g])

    # symmetrize: reverse edge with negated image, same distance
    for (src, dst, image), d in list(edge_map.items()):
        rev = (dst, src, (-image[0], -image[1], -image[2]))
        edge_map.setdefault(rev, d)

    edges = [
        PeriodicEdge(src=s, dst=t, image=im, distance=d)
        for (s, t, im), d in edge_map.items()
    ]
    edges.sort(key=lambda e: (e.src, e.distance, e.dst, e.image))
    return PeriodicGraph(num_nodes=n, edges=edges, per_node_radius=radii)
