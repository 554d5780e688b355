"""
Point clouds with integer geometry and integer attributes.

Reads and writes PLY (ASCII or binary little endian) and converts colour
attributes between RGB and the reversible YCoCg-R lifting transform.
"""

import io
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from .utilities import FormatError

LOG = logging.getLogger(__name__)

MAX_GEOM_BITS = 16
MAX_REFLECTANCE_BITS = 16

# PLY comments that pin bit depths which cannot be recovered from the data.
GEOM_BITS_COMMENT = "hapcac geom_bits"
REFLECTANCE_BITS_COMMENT = "hapcac reflectance_bits"

COLOR_PROPERTIES = ("red", "green", "blue")
YCOCG_PROPERTIES = ("luma", "co", "cg")
REFLECTANCE_PROPERTIES = ("reflectance", "intensity")


class AttributeKind(Enum):
    COLOR_RGB = 0
    COLOR_YCOCG = 1
    REFLECTANCE = 2


@dataclass(frozen=True)
class AttributeSpace:
    """
    Alphabet description of a per-point attribute.

    `max_attri` is the alphabet size per channel, `lower` the smallest legal
    value per channel. Chroma channels of YCoCg-R are signed; the codec adds
    `symbol_offset` to obtain non-negative symbols.
    """

    kind: AttributeKind
    channel_bits: tuple
    max_attri: tuple
    lower: tuple

    @classmethod
    def rgb(cls):
        return cls(AttributeKind.COLOR_RGB, (8, 8, 8), (256, 256, 256), (0, 0, 0))

    @classmethod
    def ycocg(cls):
        return cls(
            AttributeKind.COLOR_YCOCG, (8, 9, 9), (256, 512, 512), (0, -256, -256)
        )

    @classmethod
    def reflectance(cls, bits=8):
        if not 1 <= bits <= MAX_REFLECTANCE_BITS:
            raise FormatError("Reflectance bit depth {} is not supported.".format(bits))
        return cls(AttributeKind.REFLECTANCE, (bits,), (1 << bits,), (0,))

    @classmethod
    def from_kind(cls, kind, bits=8):
        if kind == AttributeKind.COLOR_RGB:
            return cls.rgb()
        if kind == AttributeKind.COLOR_YCOCG:
            return cls.ycocg()
        return cls.reflectance(bits)

    @property
    def channels(self):
        return len(self.channel_bits)

    @property
    def is_color(self):
        return self.kind != AttributeKind.REFLECTANCE

    @property
    def upper(self):
        return tuple(lo + size - 1 for lo, size in zip(self.lower, self.max_attri))

    @property
    def symbol_offset(self):
        return tuple(-lo for lo in self.lower)

    def to_symbols(self, attributes):
        return np.asarray(attributes, dtype=np.int64) + np.asarray(
            self.symbol_offset, dtype=np.int64
        )

    def from_symbols(self, symbols):
        return np.asarray(symbols, dtype=np.int64) - np.asarray(
            self.symbol_offset, dtype=np.int64
        )

    def check(self, attributes):
        """
        Raise FormatError unless every channel value is inside the alphabet.
        """
        attributes = np.asarray(attributes)
        if attributes.ndim != 2 or attributes.shape[1] != self.channels:
            raise FormatError(
                "Expected {} attribute channel(s), got shape {}.".format(
                    self.channels, attributes.shape
                )
            )
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        if np.any(attributes < lower) or np.any(attributes > upper):
            raise FormatError(
                "Attribute values fall outside the {} alphabet.".format(self.kind.name)
            )


class PointCloud:
    """
    Integer voxel positions plus one integer attribute vector per point.
    """

    def __init__(self, positions, attributes, space, geom_bits=None):
        positions = np.asarray(positions, dtype=np.int64)
        attributes = np.asarray(attributes, dtype=np.int64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise FormatError("Positions must be an (N, 3) array.")
        if attributes.ndim == 1:
            attributes = attributes.reshape(-1, 1)
        if len(positions) < 1:
            raise FormatError("A point cloud needs at least one point.")
        if len(positions) != len(attributes):
            raise FormatError(
                "Got {} positions but {} attribute rows.".format(
                    len(positions), len(attributes)
                )
            )

        if geom_bits is None:
            geom_bits = infer_geom_bits(positions)
        check_geometry(positions, geom_bits)
        space.check(attributes)

        self.positions = positions
        self.attributes = attributes
        self.space = space
        self.geom_bits = int(geom_bits)

    def __len__(self):
        return len(self.positions)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.space == other.space
            and self.geom_bits == other.geom_bits
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.attributes, other.attributes)
        )

    def __repr__(self):
        return "<PointCloud N={} space={} geom_bits={}>".format(
            len(self), self.space.kind.name, self.geom_bits
        )

    def with_attributes(self, attributes, space=None):
        return PointCloud(
            self.positions, attributes, space or self.space, geom_bits=self.geom_bits
        )

    def to_ycocg(self):
        if self.space.kind != AttributeKind.COLOR_RGB:
            return self
        return self.with_attributes(
            rgb_to_ycocg_r(self.attributes), space=AttributeSpace.ycocg()
        )

    def to_rgb(self):
        if self.space.kind != AttributeKind.COLOR_YCOCG:
            return self
        return self.with_attributes(
            ycocg_r_to_rgb(self.attributes), space=AttributeSpace.rgb()
        )


##
# Geometry checks
##


def infer_geom_bits(positions):
    """
    Smallest bit depth holding every coordinate, at least 1.
    """
    positions = np.asarray(positions)
    if np.any(positions < 0):
        raise FormatError("Coordinates must be non-negative voxel indices.")
    return max(1, int(positions.max()).bit_length())


def check_geometry(positions, geom_bits):
    """
    Coordinates inside [0, 2^geom_bits) and no duplicate points.
    """
    if not 1 <= geom_bits <= MAX_GEOM_BITS:
        raise FormatError(
            "Geometry bit depth must be within 1..{}, got {}.".format(
                MAX_GEOM_BITS, geom_bits
            )
        )
    if np.any(positions < 0) or np.any(positions >= (1 << geom_bits)):
        raise FormatError(
            "Coordinates fall outside the declared {}-bit range.".format(geom_bits)
        )
    if len(np.unique(positions, axis=0)) != len(positions):
        raise FormatError("Point cloud contains duplicate points.")


##
# Colour transform
##


def _as_triples(values, lower, upper, name):
    arr = np.asarray(values, dtype=np.int64)
    if arr.shape[-1] != 3:
        raise ValueError("{} expects triples, got shape {}.".format(name, arr.shape))
    if np.any(arr < np.asarray(lower)) or np.any(arr > np.asarray(upper)):
        raise ValueError("{} input out of range.".format(name))
    return arr


def _like_input(values, out):
    if np.ndim(values) == 1:
        return tuple(int(v) for v in out)
    return out


def rgb_to_ycocg_r(rgb):
    """
    Forward YCoCg-R lifting. Accepts a triple or an (N, 3) array.
    """
    arr = _as_triples(rgb, (0, 0, 0), (255, 255, 255), "rgb_to_ycocg_r")
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    co = r - b
    t = b + (co >> 1)
    cg = g - t
    y = t + (cg >> 1)
    return _like_input(rgb, np.stack([y, co, cg], axis=-1))


def ycocg_r_to_rgb(ycocg):
    """
    Inverse YCoCg-R lifting. Accepts a triple or an (N, 3) array.
    """
    arr = _as_triples(ycocg, (0, -256, -256), (255, 255, 255), "ycocg_r_to_rgb")
    y, co, cg = arr[..., 0], arr[..., 1], arr[..., 2]
    t = y - (cg >> 1)
    g = cg + t
    b = t - (co >> 1)
    r = b + co
    out = np.stack([r, g, b], axis=-1)
    if np.any(out < 0) or np.any(out > 255):
        raise ValueError("ycocg_r_to_rgb input is not the image of an RGB triple.")
    return _like_input(ycocg, out)


##
# PLY
##


def _parse_ply(data):
    try:
        ply = PlyData.read(io.BytesIO(data))
    except (PlyParseError, ValueError, IndexError, EOFError, UnicodeDecodeError) as e:
        raise FormatError("Malformed PLY: {}".format(e))
    if not ply.text and ply.byte_order == ">":
        raise FormatError("Big-endian PLY files are not supported.")
    try:
        vertex = ply["vertex"]
    except KeyError:
        raise FormatError("PLY has no 'vertex' element.")
    return ply, vertex


def _comment_value(ply, prefix):
    for comment in ply.comments:
        if comment.startswith(prefix):
            try:
                return int(comment[len(prefix) :].strip())
            except ValueError:
                raise FormatError("Malformed PLY comment '{}'.".format(comment))
    return None


def _integral_column(vertex, name):
    column = np.asarray(vertex[name])
    if np.issubdtype(column.dtype, np.floating):
        if not np.all(np.isfinite(column)) or np.any(column != np.floor(column)):
            raise FormatError(
                "Property '{}' holds non-integral values; quantize geometry first.".format(
                    name
                )
            )
    elif not np.issubdtype(column.dtype, np.integer):
        raise FormatError("Property '{}' must be numeric.".format(name))
    return column.astype(np.int64)


def _read_positions(ply, vertex):
    names = vertex.data.dtype.names or ()
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FormatError("PLY vertex element lacks property '{}'.".format(axis))
    positions = np.stack([_integral_column(vertex, axis) for axis in "xyz"], axis=1)
    geom_bits = _comment_value(ply, GEOM_BITS_COMMENT)
    if geom_bits is None:
        geom_bits = infer_geom_bits(positions)
    return positions, geom_bits


def read_geometry(data):
    """
    Positions and bit depth only; attribute properties are ignored.
    """
    ply, vertex = _parse_ply(data)
    positions, geom_bits = _read_positions(ply, vertex)
    if len(positions) < 1:
        raise FormatError("A point cloud needs at least one point.")
    check_geometry(positions, geom_bits)
    return positions, geom_bits


def read_ply(data):
    """
    Parse PLY bytes into a PointCloud.
    """
    ply, vertex = _parse_ply(data)
    positions, geom_bits = _read_positions(ply, vertex)
    names = vertex.data.dtype.names or ()

    if all(p in names for p in COLOR_PROPERTIES):
        attributes = np.stack(
            [_integral_column(vertex, p) for p in COLOR_PROPERTIES], axis=1
        )
        space = AttributeSpace.rgb()
    elif all(p in names for p in YCOCG_PROPERTIES):
        attributes = np.stack(
            [_integral_column(vertex, p) for p in YCOCG_PROPERTIES], axis=1
        )
        space = AttributeSpace.ycocg()
    else:
        name = next((p for p in REFLECTANCE_PROPERTIES if p in names), None)
        if name is None:
            raise FormatError(
                "PLY has neither red/green/blue nor reflectance/intensity properties."
            )
        column = _integral_column(vertex, name)
        bits = _comment_value(ply, REFLECTANCE_BITS_COMMENT)
        if bits is None:
            if vertex[name].dtype.itemsize == 1:
                bits = 8
            else:
                bits = max(8, int(column.max(initial=0)).bit_length())
        attributes = column.reshape(-1, 1)
        space = AttributeSpace.reflectance(bits)

    LOG.debug("Read %d points (%s, %d-bit geometry)", len(positions), space.kind.name, geom_bits)
    return PointCloud(positions, attributes, space, geom_bits=geom_bits)


def write_ply(pc, text=False):
    """
    Serialize a PointCloud as PLY (binary little endian unless `text`).
    """
    if not isinstance(pc, PointCloud) or len(pc) < 1:
        raise FormatError("Refusing to write an empty point cloud.")

    fields = [("x", "i4"), ("y", "i4"), ("z", "i4")]
    comments = ["{} {}".format(GEOM_BITS_COMMENT, pc.geom_bits)]
    if pc.space.kind == AttributeKind.COLOR_RGB:
        attribute_names = COLOR_PROPERTIES
        fields += [(p, "u1") for p in COLOR_PROPERTIES]
    elif pc.space.kind == AttributeKind.COLOR_YCOCG:
        attribute_names = YCOCG_PROPERTIES
        fields += [(p, "i2") for p in YCOCG_PROPERTIES]
    else:
        attribute_names = ("reflectance",)
        bits = pc.space.channel_bits[0]
        fields.append(("reflectance", "u1" if bits <= 8 else "u2"))
        comments.append("{} {}".format(REFLECTANCE_BITS_COMMENT, bits))

    records = np.empty(len(pc), dtype=fields)
    for i, axis in enumerate("xyz"):
        records[axis] = pc.positions[:, i]
    for i, name in enumerate(attribute_names):
        records[name] = pc.attributes[:, i]

    element = PlyElement.describe(records, "vertex")
    out = io.BytesIO()
    PlyData([element], text=text, byte_order="<", comments=comments).write(out)
    return out.getvalue()
