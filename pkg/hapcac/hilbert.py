"""
3D Hilbert curve indices.

The curve is Skilling's transpose construction as implemented by the
`hilbertcurve` package; tests/data/hilbert_golden.txt freezes it, since
encoder and decoder must agree on the ordering forever.
"""

from functools import lru_cache

import numpy as np
from hilbertcurve.hilbertcurve import HilbertCurve

from .pointcloud import MAX_GEOM_BITS

DIMENSIONS = 3


@lru_cache(maxsize=None)
def _curve(geom_bits):
    if not 1 <= geom_bits <= MAX_GEOM_BITS:
        raise ValueError(
            "geom_bits must be within 1..{}, got {}".format(MAX_GEOM_BITS, geom_bits)
        )
    return HilbertCurve(geom_bits, DIMENSIONS)


def hilbert_index(coord, geom_bits):
    """
    Index of one voxel along the curve.
    """
    coord = [int(c) for c in coord]
    if len(coord) != DIMENSIONS:
        raise ValueError("Expected a coordinate triple, got {}".format(coord))
    curve = _curve(geom_bits)
    if any(c < 0 or c >= (1 << geom_bits) for c in coord):
        raise ValueError("Coordinate {} outside the {}-bit cube".format(coord, geom_bits))
    return int(curve.distance_from_point(coord))


def hilbert_inverse(h, geom_bits):
    """
    Voxel at position `h` along the curve.
    """
    curve = _curve(geom_bits)
    h = int(h)
    if h < 0 or h >= 1 << (DIMENSIONS * geom_bits):
        raise ValueError("Index {} outside the {}-bit curve".format(h, geom_bits))
    return tuple(int(c) for c in curve.point_from_distance(h))


def hilbert_indices(positions, geom_bits):
    """
    Vectorised hilbert_index over an (N, 3) array; returns int64 indices.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim != 2 or positions.shape[1] != DIMENSIONS:
        raise ValueError("Expected an (N, 3) array, got {}".format(positions.shape))
    curve = _curve(geom_bits)
    if np.any(positions < 0) or np.any(positions >= (1 << geom_bits)):
        raise ValueError("Coordinates outside the {}-bit cube".format(geom_bits))
    distances = curve.distances_from_points(positions.tolist())
    return np.asarray(distances, dtype=np.int64)


def hilbert_inverses(indices, geom_bits):
    """
    Vectorised hilbert_inverse; returns an (N, 3) int64 array.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    curve = _curve(geom_bits)
    if np.any(indices < 0) or np.any(indices >= 1 << (DIMENSIONS * geom_bits)):
        raise ValueError("Indices outside the {}-bit curve".format(geom_bits))
    points = curve.points_from_distances(indices.tolist())
    return np.asarray(points, dtype=np.int64).reshape(-1, DIMENSIONS)


def sort_by_hilbert(pc):
    """
    Permutation that orders the cloud's points by ascending Hilbert index.
    """
    h = hilbert_indices(pc.positions, pc.geom_bits)
    return np.argsort(h, kind="stable")
