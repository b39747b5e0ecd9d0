"""Gaussian filtering of point sets on the permutohedral lattice.

Points are embedded in the hyperplane ``sum(x) = 0`` of R^(d+1), splatted
onto the vertices of their enclosing simplex with barycentric weights,
blurred with a ``[1, 2, 1] / 4`` stencil along each of the d+1 lattice
directions and sliced back.  The result approximates

    out_i = sum_k exp(-|f_i - f_k|^2 / 2) * v_k

for features that have already been divided by their bandwidths.

The vertex set is closed under the blur neighbourhoods, so no mass is lost
to vertices that were never splatted onto.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

MAX_DIM = 16


def _elevation_scales(d: int) -> np.ndarray:
    # variance-matched scaling: blur contributes 3/4 of the unit variance,
    # splat + slice interpolation the remaining 1/4
    inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
    i = np.arange(d, dtype=np.float64)
    return inv_std / np.sqrt((i + 1.0) * (i + 2.0))


def _elevate(points: np.ndarray) -> np.ndarray:
    n, d = points.shape
    cf = points * _elevation_scales(d)
    suffix = np.zeros((n, d + 1))
    suffix[:, :d] = np.cumsum(cf[:, ::-1], axis=1)[:, ::-1]
    elevated = suffix.copy()
    elevated[:, 1:] -= np.arange(1, d + 1) * cf
    return elevated


def _normalizer(d: int) -> float:
    """Ratio between the true Gaussian sum and the raw lattice output.

    A vertex of the scaled lattice (d+1)*A*_d covers (d+1)^(d-1/2) units of
    hyperplane volume; dividing by the Jacobian of the elevation map gives
    the feature-space cell volume, and (2*pi)^(d/2) is the Gaussian mass.
    """
    jac = _elevate(np.eye(d))  # rows are images of the unit vectors
    gram = jac @ jac.T
    cell = (d + 1) ** (d - 0.5) / np.sqrt(np.linalg.det(gram))
    return float((2.0 * np.pi) ** (d / 2.0) / cell)


def _enclosing_simplex(elevated: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, dp1 = elevated.shape
    d = dp1 - 1
    v = elevated / dp1
    up = np.ceil(v) * dp1
    down = np.floor(v) * dp1
    rem0 = np.where(up - elevated < elevated - down, up, down)
    coord_sum = np.rint(rem0.sum(axis=1) / dp1).astype(np.int64)

    # rank of each residual in decreasing order, ties to the lower index
    resid = elevated - rem0
    order = np.argsort(-resid, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(dp1), (n, dp1)), axis=1)

    rank = rank + coord_sum[:, None]
    low = rank < 0
    high = rank > d
    rank = np.where(low, rank + dp1, np.where(high, rank - dp1, rank))
    rem0 = np.where(low, rem0 + dp1, np.where(high, rem0 - dp1, rem0)).astype(np.int64)

    delta = (elevated - rem0) / dp1
    bary = np.zeros((n, d + 2))
    rows = np.repeat(np.arange(n), dp1)
    np.add.at(bary, (rows, (d - rank).ravel()), delta.ravel())
    np.add.at(bary, (rows, (d - rank + 1).ravel()), -delta.ravel())
    bary[:, 0] += 1.0 + bary[:, d + 1]

    idx = np.arange(dp1)
    keys = np.empty((n, dp1, d), dtype=np.int64)
    for r in range(dp1):
        canonical = np.where(idx <= d - r, r, r - dp1)
        keys[:, r, :] = (rem0 + canonical[rank])[:, :d]
    return keys, bary[:, :dp1]


def _directions(d: int) -> np.ndarray:
    # lattice direction j in the first d coordinates; the last coordinate is
    # implied by the zero-sum constraint
    dirs = -np.ones((d + 1, d), dtype=np.int64)
    dirs[np.arange(d), np.arange(d)] = d
    return dirs


class _KeyCodec:
    """Mixed-radix packing of integer lattice keys into single int64 codes."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        span = (hi - lo + 1).astype(object)
        total = 1
        for s in span:
            total *= int(s)
        if total >= 2**62:
            raise ValueError("feature range too large for lattice hashing")
        self.lo = lo
        self.mult = np.cumprod(np.concatenate([[1], (hi - lo + 1)[:-1]])).astype(np.int64)

    def encode(self, keys: np.ndarray) -> np.ndarray:
        return ((keys - self.lo) * self.mult).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class Lattice:
    """A built lattice; read-only and safe to share between filter calls."""

    n_points: int
    dim: int
    vertices: np.ndarray  # (n, d+1) vertex index per simplex corner
    weights: np.ndarray  # (n, d+1) barycentric weights, rows sum to 1
    neighbors: np.ndarray  # (d+1, 2, M) blur neighbour index, M = missing
    n_vertices: int
    scale: float

    def filter(self, values: np.ndarray, normalize: bool = False) -> np.ndarray:
        """Gaussian-filter ``values`` (n x c) over the lattice points.

        With ``normalize`` each output row is divided by the filtered
        all-ones channel, so a constant field maps to itself.
        """
        values = np.asarray(values, dtype=np.float64)
        squeeze = values.ndim == 1
        if squeeze:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != self.n_points:
            raise ValueError(
                f"values have {values.shape[0]} rows, lattice has {self.n_points} points"
            )
        if normalize:
            values = np.concatenate([values, np.ones((self.n_points, 1))], axis=1)
        out = self._splat_blur_slice(values)
        if normalize:
            out = out[:, :-1] / out[:, -1:]
        else:
            out *= self.scale
        return out[:, 0] if squeeze else out

    def _splat_blur_slice(self, values: np.ndarray) -> np.ndarray:
        grid = self._splat @ values
        for step in self._blur:
            grid = step @ grid
        return self._slice @ grid

    @cached_property
    def _splat(self) -> sparse.csr_matrix:
        n, k = self.vertices.shape
        cols = np.repeat(np.arange(n), k)
        mat = sparse.csr_matrix(
            (self.weights.ravel(), (self.vertices.ravel(), cols)), shape=(self.n_vertices, n)
        )
        mat.sum_duplicates()
        return mat

    @cached_property
    def _slice(self) -> sparse.csr_matrix:
        return self._splat.T.tocsr()

    @cached_property
    def _blur(self) -> list[sparse.csr_matrix]:
        m = self.n_vertices
        rows = np.arange(m)
        indptr = np.arange(0, 3 * m + 1, 3)
        mats = []
        for fwd, back in self.neighbors:
            # a missing neighbour (index m) becomes a zero entry on the diagonal
            cols = np.stack([np.where(back < m, back, rows), rows, np.where(fwd < m, fwd, rows)], axis=1)
            vals = np.stack([np.where(back < m, 0.25, 0.0), np.full(m, 0.5), np.where(fwd < m, 0.25, 0.0)], axis=1)
            mats.append(sparse.csr_matrix((vals.ravel(), cols.ravel(), indptr), shape=(m, m)))
        return mats


def build_lattice(points: np.ndarray) -> Lattice:
    """Build the lattice for an (n, d) array of bandwidth-scaled features."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
        raise ValueError("points must be a non-empty (n, d) array")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite coordinates")
    n, d = points.shape
    if d > MAX_DIM:
        raise ValueError(f"lattices above {MAX_DIM} dimensions are not supported")

    keys, weights = _enclosing_simplex(_elevate(points))
    flat = keys.reshape(-1, d)
    dirs = _directions(d)

    # closure and neighbour steps stay well inside this padded box
    lo = flat.min(axis=0) - (d + 1) * 4
    hi = flat.max(axis=0) + (d + 1) * 4
    codec = _KeyCodec(lo, hi)
    # the packing is linear, so lattice steps are constant code offsets
    offsets = dirs @ codec.mult

    point_codes = codec.encode(flat)
    codes = np.unique(point_codes)
    for off in offsets:
        codes = np.unique(np.concatenate([codes, codes + off, codes - off]))
    m = len(codes)

    def lookup(c: np.ndarray) -> np.ndarray:
        pos = np.minimum(np.searchsorted(codes, c), m - 1)
        return np.where(codes[pos] == c, pos, m)

    vertex_idx = lookup(point_codes).reshape(n, d + 1)
    neighbors = np.stack([np.stack([lookup(codes + off), lookup(codes - off)]) for off in offsets])
    return Lattice(
        n_points=n,
        dim=d,
        vertices=vertex_idx,
        weights=weights,
        neighbors=neighbors,
        n_vertices=m,
        scale=_normalizer(d),
    )


def gaussian_sum_bruteforce(points: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Exact O(n^2) evaluation of the unit-bandwidth Gaussian sum."""
    points = np.asarray(points, dtype=np.float64)
    sq = np.sum(points**2, axis=1)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0)
    return np.exp(-0.5 * dist2) @ np.asarray(values, dtype=np.float64)
