"""Formation geometry: lattice generators and neighbor lists."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

# Lattice points at exactly the safety radius must count as neighbors even
# after floating-point round-off.
NEIGHBOR_TOLERANCE = 1e-9


@dataclass
class Formation:
    positions: np.ndarray
    safety_radius: float
    neighbors: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[1] == 2:
            self.positions = np.hstack([self.positions, np.zeros((len(self.positions), 1))])
        if self.positions.shape[1] != 3:
            raise ValueError("positions must be 2- or 3-vectors")
        if self.safety_radius <= 0:
            raise ValueError("safety_radius must be > 0")
        if not self.neighbors:
            self.neighbors = neighbor_lists(self.positions, self.safety_radius)

    def __len__(self):
        return len(self.positions)

    @property
    def size(self) -> int:
        return len(self.positions)

    def distance(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.positions[i] - self.positions[j]))

    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors])

    def neighbor_sets(self) -> list:
        return [set(map(int, n)) for n in self.neighbors]

    def write_csv(self, path_or_file) -> None:
        own = isinstance(path_or_file, str)
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            writer = csv.writer(fh)
            writer.writerow(["id", "x", "y", "z"])
            for i, (x, y, z) in enumerate(self.positions):
                writer.writerow([i, repr(float(x)), repr(float(y)), repr(float(z))])
        finally:
            if own:
                fh.close()


def neighbor_lists(positions: np.ndarray, radius: float) -> List[np.ndarray]:
    n = len(positions)
    out = [[] for _ in range(n)]
    if n > 1:
        tree = cKDTree(positions)
        pairs = tree.query_pairs(radius * (1 + NEIGHBOR_TOLERANCE), output_type="ndarray")
        for i, j in pairs:
            out[i].append(j)
            out[j].append(i)
    return [np.array(sorted(lst), dtype=np.intp) for lst in out]


def brute_force_neighbors(positions: np.ndarray, radius: float) -> List[np.ndarray]:
    """O(n^2) reference for :func:`neighbor_lists`."""
    positions = np.asarray(positions, dtype=float)
    limit = radius * (1 + NEIGHBOR_TOLERANCE)
    out = []
    for i in range(len(positions)):
        d = np.sqrt(((positions - positions[i]) ** 2).sum(axis=1))
        ids = [j for j in range(len(positions)) if j != i and d[j] <= limit]
        out.append(np.array(ids, dtype=np.intp))
    return out


def gen_hex_grid(rows: int, cols: int, spacing: float = 10.0,
                 safety_radius: Optional[float] = None) -> Formation:
    """Rectangular patch of a hexagonal lattice (odd rows shifted half a spacing)."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    row_height = spacing * math.sqrt(3) / 2
    pts = [
        (c * spacing + (r % 2) * spacing / 2, r * row_height, 0.0)
        for r in range(rows)
        for c in range(cols)
    ]
    return Formation(np.array(pts), safety_radius or spacing)


def ring_count(rings: int) -> int:
    return 1 + 3 * rings * (rings + 1)


def gen_hex_rings(radius_rings: int, spacing: float = 10.0,
                  safety_radius: Optional[float] = None) -> Formation:
    """A centre UAV plus ``radius_rings`` concentric hexagonal rings."""
    if radius_rings < 0:
        raise ValueError("radius_rings must be >= 0")
    R = radius_rings
    pts = []
    for q in range(-R, R + 1):
        for r in range(max(-R, -q - R), min(R, -q + R) + 1):
            pts.append((spacing * (q + r / 2), spacing * math.sqrt(3) / 2 * r, 0.0))
    return Formation(np.array(pts), safety_radius or spacing)


def gen_single_hop(u: int, safety_radius: float = 10.0) -> Formation:
    """``u`` UAVs on a circle of diameter 0.9 x safety radius (complete neighbor graph)."""
    if u < 1:
        raise ValueError("u must be >= 1")
    if u == 1:
        return Formation(np.zeros((1, 3)), safety_radius)
    radius = 0.45 * safety_radius
    theta = 2 * np.pi * np.arange(u) / u
    pts = np.column_stack([radius * np.cos(theta), radius * np.sin(theta), np.zeros(u)])
    return Formation(pts, safety_radius)


def max_diameter(formation) -> float:
    positions = formation.positions if isinstance(formation, Formation) else np.asarray(formation)
    if len(positions) < 2:
        return 0.0
    pts = positions
    if len(positions) > 64:
        planar = np.ptp(positions[:, 2]) == 0
        try:
            hull = ConvexHull(positions[:, :2] if planar else positions)
            pts = positions[hull.vertices]
        except QhullError:
            pts = positions
    best = 0.0
    for i in range(len(pts) - 1):
        d = np.sqrt(((pts[i + 1:] - pts[i]) ** 2).sum(axis=1)).max()
        best = max(best, float(d))
    return best
