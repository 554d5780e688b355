"""
Per-target neighbourhoods inside a coding unit's context group.

Distances are exact integer squared norms; ties go to the smaller Hilbert
index. Only context attributes are ever read, which is what makes the
bundles reproducible on the decoder side.
"""

from dataclasses import dataclass

import numpy as np

from .utilities import ConfigError, IntegrityError

IDW_NEIGHBORS = 3
PRED_SCALE = 64


@dataclass(frozen=True)
class NeighborhoodParams:
    k: int = 32
    k1: int = 8
    k2: int = 8

    def __post_init__(self):
        if min(self.k, self.k1, self.k2) < 1:
            raise ConfigError("k, k1 and k2 must be at least 1.")
        if self.k1 > self.k or self.k2 > self.k:
            raise ConfigError("k1 and k2 cannot exceed k.")


@dataclass
class NeighborhoodBundle:
    """
    Neighbourhoods of every target of one coding unit, batched on axis 0.

    neighbors -- (B, K) slice-local indices of the K nearest context points
    pred      -- (B, C) IDW prediction on the 1/64 grid (symbol units)
    groups    -- (B, K1, K2) columns of `neighbors`: the K2 nearest of each
                 of the K1 nearest neighbours, itself first
    zbar      -- (B, K1, K2, 3) group coordinates normalised around their
                 first member
    xbar      -- (B, K1, K2, C) attribute residuals over the attribute maximum
    attrs     -- (B, K1, K2, C) the raw context attributes behind xbar
    zbar2     -- (B, K1, 3) the K1 nearest neighbours normalised around the target
    """

    targets: np.ndarray
    neighbors: np.ndarray
    pred: np.ndarray
    groups: np.ndarray
    zbar: np.ndarray
    xbar: np.ndarray
    attrs: np.ndarray
    zbar2: np.ndarray

    def __len__(self):
        return len(self.targets)

    @property
    def inner_neighbors(self):
        return self.neighbors[:, : self.groups.shape[1]]


def _squared_distances(a, b):
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...i,...i->...", diff, diff)


def knn_context(targets, context, k, tie_keys=None):
    """
    Indices of the `k` nearest context points per target, nearest first.

    Ties are broken by ascending `tie_keys` (Hilbert indices); by default
    the context order itself, which is Hilbert order for context groups.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    context = np.asarray(context, dtype=np.int64).reshape(-1, 3)
    if len(context) == 0:
        raise ConfigError("KNN needs a non-empty context.")
    k = min(int(k), len(context))

    if tie_keys is None:
        tie_keys = np.arange(len(context), dtype=np.int64)
    tie_keys = np.broadcast_to(np.asarray(tie_keys, dtype=np.int64), (len(targets), len(context)))

    d2 = _squared_distances(targets, context)
    order = np.lexsort((tie_keys, d2), axis=-1)
    return order[:, :k]


def idw_predict(neighbor_coords, neighbor_attrs, target):
    """
    Inverse-distance-weighted prediction from the first three neighbours,
    rounded to a 1/64 grid.

    Accepts a single neighbourhood ((n, 3), (n, C), (3,)) or a batch with a
    leading axis on all three.
    """
    coords = np.asarray(neighbor_coords, dtype=np.int64)[..., :IDW_NEIGHBORS, :]
    attrs = np.asarray(neighbor_attrs, dtype=np.float64)[..., :IDW_NEIGHBORS, :]
    target = np.asarray(target, dtype=np.int64)

    diff = coords - target[..., None, :]
    distance = np.sqrt(np.einsum("...i,...i->...", diff, diff).astype(np.float64))
    weights = 1.0 / distance
    estimate = np.einsum("...n,...nc->...c", weights, attrs) / weights.sum(axis=-1)[..., None]
    return np.rint(estimate * PRED_SCALE) / PRED_SCALE


def normalize_coords(coords, center):
    """
    Offsets from `center` scaled by the largest offset norm in the group.
    """
    offsets = np.asarray(coords, dtype=np.float64) - np.asarray(center, dtype=np.float64)[
        ..., None, :
    ]
    norms = np.sqrt(np.einsum("...i,...i->...", offsets, offsets))
    scale = norms.max(axis=-1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    return np.where(scale[..., None] > 0, offsets / safe[..., None], 0.0)


def normalize_attrs(attrs, pred, max_attri):
    """
    Attribute residuals against the target's prediction, over the attribute maximum.
    """
    attrs = np.asarray(attrs, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    return (attrs - pred[..., None, :]) / np.asarray(max_attri, dtype=np.float64)


def assemble_bundles(unit, slice_coords, slice_attrs, params, max_attri, audit=False):
    """
    Build the NeighborhoodBundle of every target in `unit`.

    `slice_attrs` may hold placeholders (negative values) for points not yet
    decoded; with `audit` set, reading one raises IntegrityError.
    """
    context = np.asarray(unit.context, dtype=np.int64)
    if len(context) == 0:
        raise ConfigError("The first coding unit has no context group.")
    members = np.asarray(unit.members, dtype=np.int64)

    ctx_coords = np.asarray(slice_coords, dtype=np.int64)[context]
    ctx_attrs = np.asarray(slice_attrs, dtype=np.int64)[context]
    if audit:
        if np.intersect1d(context, members).size:
            raise IntegrityError("Context group overlaps the unit being coded.")
        if np.any(ctx_attrs < 0):
            raise IntegrityError("Context group references an undecoded point.")

    target_coords = np.asarray(slice_coords, dtype=np.int64)[members]
    nearest = knn_context(target_coords, ctx_coords, params.k)
    k = nearest.shape[1]
    k1 = min(params.k1, k)
    k2 = min(params.k2, k)

    nbr_coords = ctx_coords[nearest]
    nbr_attrs = ctx_attrs[nearest]
    pred = idw_predict(nbr_coords, nbr_attrs, target_coords)

    # K2 nearest of each inner neighbour among all K; it sits at distance 0.
    d2 = _squared_distances(nbr_coords[:, :k1], nbr_coords)
    ties = np.broadcast_to(nearest[:, None, :], d2.shape)
    groups = np.lexsort((ties, d2), axis=-1)[..., :k2]

    rows = np.arange(len(members))[:, None, None]
    group_coords = nbr_coords[rows, groups]
    group_attrs = nbr_attrs[rows, groups]

    return NeighborhoodBundle(
        targets=members,
        neighbors=context[nearest],
        pred=pred,
        groups=groups,
        zbar=normalize_coords(group_coords, group_coords[..., 0, :]),
        xbar=normalize_attrs(group_attrs, pred[:, None, :], max_attri),
        attrs=group_attrs,
        zbar2=normalize_coords(nbr_coords[:, :k1], target_coords),
    )
