# -*- coding: utf8 -*-
import unittest

import numpy as np

from hapcac.pointcloud import (
    AttributeKind,
    AttributeSpace,
    PointCloud,
    infer_geom_bits,
    read_geometry,
    read_ply,
    rgb_to_ycocg_r,
    write_ply,
    ycocg_r_to_rgb,
)
from hapcac.utilities import FormatError


def ascii_ply(properties, rows, comments=()):
    lines = ["ply", "format ascii 1.0"]
    lines += ["comment {}".format(c) for c in comments]
    lines.append("element vertex {}".format(len(rows)))
    lines += ["property {} {}".format(kind, name) for kind, name in properties]
    lines.append("end_header")
    lines += [" ".join(str(v) for v in row) for row in rows]
    return ("\n".join(lines) + "\n").encode("ascii")


XYZ = [("float", "x"), ("float", "y"), ("float", "z")]
RGB = [("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]


class TestColorTransform(unittest.TestCase):
    def test_examples(self):
        self.assertEqual(rgb_to_ycocg_r((0, 0, 0)), (0, 0, 0))
        self.assertEqual(rgb_to_ycocg_r((255, 255, 255)), (255, 0, 0))
        self.assertEqual(ycocg_r_to_rgb((0, 0, 0)), (0, 0, 0))
        self.assertEqual(ycocg_r_to_rgb((255, 0, 0)), (255, 255, 255))
        self.assertEqual(rgb_to_ycocg_r((255, 0, 0)), (63, 255, -127))

    def test_lossless_on_grid(self):
        axis = np.append(np.arange(0, 256, 5), 255)
        rgb = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
        ycocg = rgb_to_ycocg_r(rgb)
        np.testing.assert_array_equal(ycocg_r_to_rgb(ycocg), rgb)

        space = AttributeSpace.ycocg()
        self.assertTrue(np.all(ycocg >= np.asarray(space.lower)))
        self.assertTrue(np.all(ycocg <= np.asarray(space.upper)))

    def test_out_of_range(self):
        with self.assertRaises(ValueError):
            rgb_to_ycocg_r((256, 0, 0))
        with self.assertRaises(ValueError):
            rgb_to_ycocg_r((1, 2))
        with self.assertRaises(ValueError):
            ycocg_r_to_rgb((0, 255, 255))


class TestAttributeSpace(unittest.TestCase):
    def test_spaces(self):
        space = AttributeSpace.ycocg()
        self.assertEqual(space.max_attri, (256, 512, 512))
        self.assertEqual(space.symbol_offset, (0, 256, 256))
        self.assertEqual(space.upper, (255, 255, 255))
        np.testing.assert_array_equal(space.to_symbols([[10, -256, 255]]), [[10, 0, 511]])
        np.testing.assert_array_equal(space.from_symbols([[10, 0, 511]]), [[10, -256, 255]])

        self.assertEqual(AttributeSpace.reflectance(12).max_attri, (4096,))
        self.assertEqual(AttributeSpace.from_kind(AttributeKind.COLOR_RGB), AttributeSpace.rgb())
        with self.assertRaises(FormatError):
            AttributeSpace.reflectance(17)

    def test_check(self):
        with self.assertRaises(FormatError):
            AttributeSpace.rgb().check([[0, 0, 256]])
        with self.assertRaises(FormatError):
            AttributeSpace.rgb().check([[0, 0]])
        AttributeSpace.ycocg().check([[0, -256, 255]])


class TestPointCloud(unittest.TestCase):
    def test_invariants(self):
        space = AttributeSpace.reflectance(8)
        with self.assertRaises(FormatError):
            PointCloud(np.empty((0, 3)), np.empty((0, 1)), space)
        with self.assertRaises(FormatError):
            PointCloud([(0, 0, 0), (0, 0, 0)], [1, 2], space)
        with self.assertRaises(FormatError):
            PointCloud([(0, 0, 8)], [1], space, geom_bits=3)
        with self.assertRaises(FormatError):
            PointCloud([(0, 0, 1)], [1, 2], space)
        with self.assertRaises(FormatError):
            PointCloud([(0, 0, -1)], [1], space)

    def test_geom_bits(self):
        self.assertEqual(infer_geom_bits([(0, 0, 0)]), 1)
        self.assertEqual(infer_geom_bits([(5, 1, 0)]), 3)
        self.assertEqual(infer_geom_bits([(1023, 0, 0)]), 10)

    def test_color_conversion(self):
        pc = PointCloud(
            [(0, 0, 0), (1, 0, 0)], [(255, 255, 255), (12, 200, 7)], AttributeSpace.rgb()
        )
        ycocg = pc.to_ycocg()
        self.assertEqual(ycocg.space.kind, AttributeKind.COLOR_YCOCG)
        self.assertEqual(tuple(ycocg.attributes[0]), (255, 0, 0))
        self.assertEqual(ycocg.to_rgb(), pc)
        self.assertIs(ycocg.to_ycocg(), ycocg)
        self.assertNotEqual(ycocg, pc)


class TestPly(unittest.TestCase):
    def test_single_point(self):
        pc = read_ply(ascii_ply(XYZ + RGB, [(0, 0, 0, 10, 20, 30)]))
        self.assertEqual(len(pc), 1)
        np.testing.assert_array_equal(pc.positions, [(0, 0, 0)])
        np.testing.assert_array_equal(pc.attributes, [(10, 20, 30)])
        self.assertEqual(pc.space, AttributeSpace.rgb())

    def test_duplicate_points(self):
        data = ascii_ply(XYZ + RGB, [(1, 2, 3, 0, 0, 0), (1, 2, 3, 5, 5, 5)])
        with self.assertRaises(FormatError):
            read_ply(data)

    def test_malformed(self):
        with self.assertRaises(FormatError):
            read_ply(b"not a ply file")
        with self.assertRaises(FormatError):
            read_ply(ascii_ply(XYZ, [(0, 0, 0)]))
        with self.assertRaises(FormatError):
            read_ply(ascii_ply(XYZ + RGB, [(0.5, 0, 0, 1, 1, 1)]))
        with self.assertRaises(FormatError):
            read_ply(ascii_ply(XYZ[:2] + RGB, [(0, 0, 1, 1, 1)]))

    def test_reflectance(self):
        data = ascii_ply(XYZ + [("ushort", "intensity")], [(0, 0, 0, 1000), (3, 1, 2, 40)])
        pc = read_ply(data)
        self.assertEqual(pc.space, AttributeSpace.reflectance(10))
        np.testing.assert_array_equal(pc.attributes[:, 0], [1000, 40])

        data = ascii_ply(XYZ + [("uchar", "reflectance")], [(0, 0, 0, 7)])
        self.assertEqual(read_ply(data).space, AttributeSpace.reflectance(8))

        data = ascii_ply(
            XYZ + [("ushort", "reflectance")],
            [(0, 0, 0, 7)],
            comments=["hapcac reflectance_bits 12"],
        )
        self.assertEqual(read_ply(data).space, AttributeSpace.reflectance(12))

    def test_round_trips(self):
        rng = np.random.default_rng(0)
        positions = np.unique(rng.integers(0, 1024, size=(200, 3)), axis=0)
        n = len(positions)
        clouds = [
            PointCloud(positions, rng.integers(0, 256, size=(n, 3)), AttributeSpace.rgb(), 12),
            PointCloud(
                positions, rng.integers(0, 4096, size=(n, 1)), AttributeSpace.reflectance(12)
            ),
            PointCloud(positions, rng.integers(0, 32, size=(n, 1)), AttributeSpace.reflectance(5)),
        ]
        clouds.append(clouds[0].to_ycocg())
        for pc in clouds:
            for text in (False, True):
                self.assertEqual(read_ply(write_ply(pc, text=text)), pc)

    def test_header(self):
        pc = PointCloud([(1, 2, 3)], [(4, 5, 6)], AttributeSpace.rgb())
        data = write_ply(pc, text=True)
        header = data.split(b"end_header")[0].decode("ascii").splitlines()
        self.assertEqual(header[0], "ply")
        self.assertIn("element vertex 1", header)
        self.assertIn("comment hapcac geom_bits 2", header)
        body = data.split(b"end_header\n")[1].split()
        self.assertEqual(body, [b"1", b"2", b"3", b"4", b"5", b"6"])

    def test_write_rejects_non_clouds(self):
        with self.assertRaises(FormatError):
            write_ply(None)

    def test_read_geometry(self):
        pc = PointCloud([(9, 2, 3), (0, 0, 0)], [(4, 5, 6), (0, 0, 0)], AttributeSpace.rgb(), 6)
        positions, geom_bits = read_geometry(write_ply(pc))
        np.testing.assert_array_equal(positions, pc.positions)
        self.assertEqual(geom_bits, 6)

        positions, geom_bits = read_geometry(ascii_ply(XYZ, [(9, 2, 3)]))
        self.assertEqual(geom_bits, 4)


if __name__ == "__main__":
    unittest.main()
