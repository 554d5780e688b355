"""
Slicing and fast Level-of-Detail construction.

Refinement levels are picked at equal strides along the Hilbert order of the
not-yet-selected points, so no Euclidean distance is computed here. Context
groups are capped by Hilbert-index proximity to the unit being coded.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .utilities import ConfigError

LOG = logging.getLogger(__name__)

# h < 2^48 and |unit| <= 2^14 keep h * |unit| inside int64.
MAX_UNIT_POINTS_LIMIT = 1 << 14
MAX_SEED = (1 << 64) - 1


@dataclass(frozen=True)
class LodParams:
    n1: int = 16
    growth: int = 2
    max_unit_points: int = 512
    max_context_points: int = 2048
    slice_size: int = 1 << 14
    seed: int = 0
    random_first: bool = True

    def __post_init__(self):
        if self.n1 < 1:
            raise ConfigError("n1 must be at least 1.")
        if self.growth < 2:
            raise ConfigError("growth must be at least 2.")
        if not self.n1 <= self.max_unit_points <= MAX_UNIT_POINTS_LIMIT:
            raise ConfigError(
                "max_unit_points must be within n1..{}.".format(MAX_UNIT_POINTS_LIMIT)
            )
        if self.max_context_points < 1:
            raise ConfigError("max_context_points must be at least 1.")
        if self.slice_size < self.n1:
            raise ConfigError("slice_size must be at least n1.")
        if not 0 <= self.seed <= MAX_SEED:
            raise ConfigError("seed must be an unsigned 64-bit integer.")


@dataclass
class CodingUnit:
    level: int
    sublevel: int
    members: np.ndarray
    context: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self):
        return len(self.members)


@dataclass
class LodPartition:
    units: list

    def __iter__(self):
        return iter(self.units)

    def __len__(self):
        return len(self.units)

    def __getitem__(self, i):
        return self.units[i]

    def level_sizes(self):
        """
        Points per refinement level, sub-levels merged.
        """
        sizes = {}
        for unit in self.units:
            sizes[unit.level] = sizes.get(unit.level, 0) + len(unit)
        return [sizes[level] for level in sorted(sizes)]


def slice_points(order, slice_size):
    """
    Contiguous runs of `slice_size` positions of `order`; the last run keeps
    the remainder.
    """
    if slice_size < 1:
        raise ConfigError("slice_size must be at least 1.")
    n = len(order)
    return [range(start, min(start + slice_size, n)) for start in range(0, n, slice_size)]


def _first_offset(params, slice_id, level, interval):
    """
    Start position of a level inside its first stride.

    Philox is counter-based: keyed by the stream seed and addressed by
    (slice, level), so slices can be built in any order.
    """
    if not params.random_first or interval <= 1:
        return 0
    bitgen = np.random.Philox(
        key=np.array([params.seed, 0], dtype=np.uint64),
        counter=np.array([slice_id, level, 0, 0], dtype=np.uint64),
    )
    return int(bitgen.random_raw()) % interval


def build_context_group(earlier_units, unit, slice_hilbert, max_context_points):
    """
    Previously coded points a unit may reference, at most `max_context_points`.

    Over the cap, keep the candidates whose Hilbert index is closest to the
    unit's mean index. The mean stays an exact (sum, count) pair:
    |h * count - sum| orders candidates without rounding.
    """
    if not earlier_units:
        return np.empty(0, dtype=np.int64)

    candidates = np.sort(np.concatenate([u.members for u in earlier_units]))
    if len(candidates) <= max_context_points:
        return candidates

    slice_hilbert = np.asarray(slice_hilbert, dtype=np.int64)
    member_h = slice_hilbert[unit.members]
    total = np.int64(int(member_h.sum()))
    count = np.int64(len(member_h))

    h = slice_hilbert[candidates]
    distance = np.abs(h * count - total)
    keep = np.lexsort((h, distance))[:max_context_points]
    return np.sort(candidates[keep])


def build_lod(slice_coords, slice_hilbert, params, slice_id=0):
    """
    Split one Hilbert-sorted slice into coding units, coarse to fine.

    Level l picks n1 * growth**(l - 1) of the remaining points at a stride
    of len(remaining) // level_size, starting inside the first stride. When
    fewer points remain than the level asks for, they form the final level.
    Levels larger than max_unit_points are split into consecutive sub-levels.
    """
    slice_hilbert = np.asarray(slice_hilbert, dtype=np.int64)
    n = len(slice_hilbert)
    if n == 0:
        raise ConfigError("Cannot build levels of detail for an empty slice.")
    if len(slice_coords) != n:
        raise ConfigError("Coordinates and Hilbert indices differ in length.")
    if n > 1 and np.any(np.diff(slice_hilbert) <= 0):
        raise ConfigError("Slice points must be sorted by unique Hilbert index.")

    remaining = np.arange(n, dtype=np.int64)
    units = []
    level = 1
    level_size = params.n1
    while len(remaining):
        if len(remaining) < level_size:
            selected = remaining
            remaining = remaining[:0]
        else:
            # start + (level_size - 1) * interval stays inside remaining
            interval = max(1, len(remaining) // level_size)
            start = _first_offset(params, slice_id, level, interval)
            picks = start + interval * np.arange(level_size, dtype=np.int64)
            chosen = np.zeros(len(remaining), dtype=bool)
            chosen[picks] = True
            selected = remaining[chosen]
            remaining = remaining[~chosen]

        step = params.max_unit_points
        for sublevel, begin in enumerate(range(0, len(selected), step)):
            unit = CodingUnit(level, sublevel, selected[begin : begin + step])
            unit.context = build_context_group(
                units, unit, slice_hilbert, params.max_context_points
            )
            units.append(unit)

        level += 1
        level_size *= params.growth

    LOG.debug(
        "Slice %d: %d points in %d units over %d levels", slice_id, n, len(units), level - 1
    )
    return LodPartition(units)
