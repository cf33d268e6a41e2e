"""Distance, covariance and basis-function primitives shared by predictors.

All distances are Euclidean on (lon, lat) degree coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree


def pairwise_distances(lons1, lats1, lons2, lats2) -> np.ndarray:
    """(n1, n2) matrix of Euclidean distances between two point sets."""
    a = np.column_stack((np.asarray(lons1, float), np.asarray(lats1, float)))
    b = np.column_stack((np.asarray(lons2, float), np.asarray(lats2, float)))
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True)
class ExponentialCov:
    """Stationary exponential covariance C(h) = sigma0_sq * exp(-h / theta)."""

    sigma0_sq: float
    theta: float

    def __post_init__(self):
        if self.sigma0_sq < 0:
            raise ValueError("sigma0_sq must be nonnegative")
        if self.theta <= 0:
            raise ValueError("theta must be positive")

    def __call__(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return self.sigma0_sq * np.exp(-h / self.theta)


def tps_radial(d) -> np.ndarray:
    """Thin-plate spline radial function d^2 log d, with value 0 at d = 0."""
    d = np.asarray(d, dtype=float)
    out = np.zeros_like(d)
    np.log(d, out=out, where=d > 0)
    return d * d * out


def bisquare(d, width) -> np.ndarray:
    """Bisquare taper {1 - (d/width)^2}^2 on [0, width), 0 beyond."""
    if width <= 0:
        raise ValueError("width must be positive")
    t = np.asarray(d, dtype=float) / width
    out = np.square(1.0 - t * t)
    return np.where(t < 1.0, out, 0.0)


def wendland(t) -> np.ndarray:
    """Compactly supported C^4 polynomial (1-t)^6 (35t^2 + 18t + 3)/3 on [0,1]."""
    t = np.asarray(t, dtype=float)
    out = (1.0 - t) ** 6 * (35.0 * t * t + 18.0 * t + 3.0) / 3.0
    return np.where(t <= 1.0, out, 0.0)


@dataclass(frozen=True)
class BasisGrid:
    """A regular lattice of basis centers covering a lon/lat box.

    The lattice is inset or expanded by `margin` grid cells on every side so
    boundary points keep full basis coverage.
    """

    lons: np.ndarray
    lats: np.ndarray
    spacing: float

    @property
    def r(self) -> int:
        return self.lons.size

    @classmethod
    def cover(cls, bbox, nx: int, ny: int, margin: float = 0.0) -> "BasisGrid":
        """nx-by-ny lattice over bbox = (lon_min, lon_max, lat_min, lat_max),
        expanded outward by `margin` (in degrees) on each side."""
        lon_min, lon_max, lat_min, lat_max = bbox
        if nx < 2 or ny < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        gx = np.linspace(lon_min - margin, lon_max + margin, nx)
        gy = np.linspace(lat_min - margin, lat_max + margin, ny)
        LON, LAT = np.meshgrid(gx, gy, indexing="ij")
        spacing = max((gx[-1] - gx[0]) / (nx - 1), (gy[-1] - gy[0]) / (ny - 1))
        return cls(LON.ravel(), LAT.ravel(), float(spacing))


def bisquare_design(lons, lats, grids, width_factor: float = 1.5) -> np.ndarray:
    """Dense (n, r) bisquare design over one or more center grids.

    Each grid contributes columns with width = width_factor * its spacing,
    concatenated in the order given (coarse-to-fine by convention).
    """
    blocks = []
    for grid in grids:
        h = pairwise_distances(lons, lats, grid.lons, grid.lats)
        blocks.append(bisquare(h, width_factor * grid.spacing))
    return np.hstack(blocks)


def wendland_design(lons, lats, grid: BasisGrid, support: float) -> sparse.csr_matrix:
    """Sparse (n, r) Wendland design with the given support radius.

    Only center/point pairs within `support` are stored; rows are built with
    a KD-tree so cost scales with the number of nonzeros.
    """
    if support <= 0:
        raise ValueError("support must be positive")
    pts = np.column_stack((np.asarray(lons, float), np.asarray(lats, float)))
    centers = np.column_stack((grid.lons, grid.lats))
    tree = cKDTree(centers)
    neighbors = tree.query_ball_point(pts, r=support)
    indptr = np.zeros(len(pts) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(nb) for nb in neighbors])
    indices = np.concatenate([np.asarray(nb, dtype=np.int64) for nb in neighbors]) \
        if indptr[-1] else np.zeros(0, dtype=np.int64)
    data = np.empty(indptr[-1], dtype=float)
    pos = 0
    for i, nb in enumerate(neighbors):
        if not nb:
            continue
        d = np.sqrt(np.sum((centers[nb] - pts[i]) ** 2, axis=1))
        data[pos:pos + len(nb)] = wendland(d / support)
        pos += len(nb)
    out = sparse.csr_matrix((data, indices, indptr), shape=(len(pts), grid.r))
    out.eliminate_zeros()  # pairs at exactly the support radius contribute 0
    return out
