import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sweepnet import io
from sweepnet.geometry import Camera, DepthRange
from sweepnet.network import NetworkWeights

finite32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)


class TestPfm:
    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite32))
    def test_round_trip_bitwise(self, arr):
        back = io.parse_pfm(io.dump_pfm(arr))
        assert back.dtype == np.float32
        assert back.tobytes() == arr.tobytes()

    def test_invalid_pixel_written_as_minus_one(self, tmp_path):
        depth = np.array([[1.5, 0.0], [2.0, 3.25]])
        io.write_depth_pfm(tmp_path / "d.pfm", depth)
        raw = io.read_pfm(tmp_path / "d.pfm")
        np.testing.assert_array_equal(raw, [[1.5, -1.0], [2.0, 3.25]])
        np.testing.assert_array_equal(io.read_depth_pfm(tmp_path / "d.pfm"), depth)

    def test_header_and_row_order(self):
        data = io.dump_pfm(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        assert data.startswith(b"Pf\n2 2\n-1.0\n")
        # bottom row first
        assert struct.unpack("<4f", data[-16:]) == (3.0, 4.0, 1.0, 2.0)

    def test_big_endian_accepted(self):
        # hand-written file: positive scale, big-endian floats, bottom row first
        data = b"Pf\n3 1\n1.0\n" + struct.pack(">3f", 0.5, -1.0, 7.0)
        np.testing.assert_array_equal(io.parse_pfm(data), [[0.5, -1.0, 7.0]])
        assert io.dump_pfm(io.parse_pfm(data)).startswith(b"Pf\n3 1\n-1.0\n")

    @pytest.mark.parametrize(
        "data,offset",
        [
            (b"P5\n1 1\n-1.0\n", 0),
            (b"Pf\nx 1\n-1.0\n", 3),
            (b"Pf\n2 2\n-1.0\n\0\0\0\0", 12),
            (b"Pf\n1 1\n0\n\0\0\0\0", 7),
        ],
    )
    def test_errors_carry_offset(self, data, offset):
        with pytest.raises(io.FormatError) as err:
            io.parse_pfm(data)
        assert err.value.offset == offset
        assert f"at byte {offset}" in str(err.value)

    def test_rejects_3d(self):
        with pytest.raises(ValueError):
            io.dump_pfm(np.zeros((2, 2, 3)))


class TestPpm:
    @settings(max_examples=30, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 8), st.just(3))))
    def test_round_trip(self, img):
        np.testing.assert_array_equal(io.parse_ppm(io.dump_ppm(img)), img)

    def test_comments_in_header(self):
        data = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03"
        np.testing.assert_array_equal(io.parse_ppm(data), [[[1, 2, 3]]])

    @pytest.mark.parametrize("data", [b"P6\n2 2\n65535\n", b"P6\n2 2\n255\n\0", b"P3\n1 1\n255\n", b"P6\n99999999 2\n255\n"])
    def test_errors(self, data):
        with pytest.raises(io.FormatError):
            io.parse_ppm(data)

    def test_float_conversion(self):
        img = np.array([[[0.0, 0.5, 1.0]]])
        np.testing.assert_array_equal(io.to_uint8(img), [[[0, 128, 255]]])


class TestCamera:
    FIXTURE = """extrinsic
0.0 -1.0 0.0 1.25
1.0 0.0 0.0 -0.5
0.0 0.0 1.0 3e2
0.0 0.0 0.0 1.0

intrinsic
100.5 0.0 31.5
0.0 99.25 23.5
0.0 0.0 1.0

425.0 2.5 192 905.0
"""

    def test_fixture_parses_exactly(self, tmp_path):
        path = tmp_path / "00000000_cam.txt"
        path.write_text(self.FIXTURE)
        cam, depth_range = io.read_camera(path)
        np.testing.assert_array_equal(cam.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]])
        np.testing.assert_array_equal(cam.t, [1.25, -0.5, 300.0])
        np.testing.assert_array_equal(cam.K, [[100.5, 0, 31.5], [0, 99.25, 23.5], [0, 0, 1]])
        assert (cam.width, cam.height) == (64, 48)
        assert depth_range == DepthRange(425.0, 905.0, 192)

    def test_round_trip_exact(self, rng, tmp_path):
        from conftest import random_camera

        for _ in range(20):
            cam = random_camera(rng)
            r = DepthRange(float(rng.uniform(1, 50)), float(rng.uniform(60, 500)), int(rng.integers(2, 200)))
            io.write_camera(tmp_path / "c.txt", cam, r)
            back, back_range = io.read_camera(tmp_path / "c.txt", cam.width, cam.height)
            np.testing.assert_array_equal(back.K, cam.K)
            np.testing.assert_array_equal(back.R, cam.R)
            np.testing.assert_array_equal(back.t, cam.t)
            assert back_range == r

    def test_without_depth_line(self):
        cam, line = io.parse_camera(self.FIXTURE.rsplit("\n\n", 1)[0], 64, 48)
        assert line is None

    @pytest.mark.parametrize("text", ["", "intrinsic\n", FIXTURE.replace("1.25", "1,25"), FIXTURE.replace("intrinsic", "intr"), FIXTURE.replace("0.0 0.0 1.0\n\n425", "0.0 1.0\n\n425")])
    def test_errors(self, text):
        with pytest.raises(io.FormatError):
            io.parse_camera(text, 64, 48)


class TestPly:
    def test_round_trip(self, rng, tmp_path):
        pts = rng.normal(size=(50, 3)).astype(np.float32)
        cols = rng.integers(0, 256, size=(50, 3)).astype(np.uint8)
        io.write_ply(tmp_path / "c.ply", io.FusedCloud(pts, cols, np.full(50, 3)))
        p, c = io.read_ply(tmp_path / "c.ply")
        assert p.tobytes() == pts.tobytes()
        np.testing.assert_array_equal(c, cols)

    def test_empty_is_header_only(self):
        data = io.dump_ply(np.zeros((0, 3)), np.zeros((0, 3), np.uint8))
        assert data.endswith(b"end_header\n") and b"element vertex 0" in data
        p, c = io.parse_ply(data)
        assert p.shape == (0, 3) and c.shape == (0, 3)

    def test_truncated(self):
        data = io.dump_ply(np.ones((2, 3)), np.ones((2, 3), np.uint8))
        with pytest.raises(io.FormatError):
            io.parse_ply(data[:-1])


class TestWeights:
    def test_round_trip_bitwise(self, rng):
        tensors = {"a": rng.normal(size=(3, 3, 2, 4)).astype(np.float32), "bias/é": np.arange(5, dtype=np.float32), "scalar": np.float32(2.5).reshape(())}
        back = io.parse_weights(io.dump_weights(tensors))
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].shape == tensors[k].shape
            assert back[k].tobytes() == tensors[k].tobytes()

    def test_zero_tensors(self):
        data = io.dump_weights({})
        assert data == b"SWNW" + struct.pack("<II", 1, 0)
        assert io.parse_weights(data) == {}

    def test_layout(self):
        data = io.dump_weights({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
        expected = b"SWNW" + struct.pack("<III", 1, 1, 1) + b"w" + struct.pack("<III", 2, 1, 2) + struct.pack("<2f", 1, 2)
        assert data == expected

    @pytest.mark.parametrize(
        "data,offset",
        [
            (b"XXXX" + bytes(8), 0),
            (b"SWNW" + struct.pack("<II", 2, 0), 4),
            (b"SWNW" + struct.pack("<II", 1, 1), 12),
            (b"SWNW" + struct.pack("<IIIcI", 1, 1, 1, b"w", 9), 17),
        ],
    )
    def test_errors_carry_offset(self, data, offset):
        with pytest.raises(io.FormatError) as err:
            io.parse_weights(data)
        assert err.value.offset == offset

    def test_network_round_trip(self, tmp_path):
        w = NetworkWeights.init(0, "gru")
        w = NetworkWeights.from_named({k: v.astype(np.float32).astype(np.float64) for k, v in w.named_parameters().items()})
        io.save_network(tmp_path / "w.bin", w)
        back = io.load_network(tmp_path / "w.bin")
        assert back.mode == "gru"
        for k, v in w.named_parameters().items():
            np.testing.assert_array_equal(back.named_parameters()[k], v)


def valid_samples():
    img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    return {
        "pfm": io.dump_pfm(np.ones((3, 2), np.float32)),
        "ppm": io.dump_ppm(img),
        "ply": io.dump_ply(np.ones((2, 3)), np.ones((2, 3), np.uint8)),
        "weights": io.dump_weights({"w": np.ones((2, 2), np.float32)}),
        "camera": TestCamera.FIXTURE.encode(),
    }


PARSERS = {
    "pfm": io.parse_pfm,
    "ppm": io.parse_ppm,
    "ply": io.parse_ply,
    "weights": io.parse_weights,
    "camera": lambda b: io.parse_camera(b.decode("utf-8", errors="replace"), 64, 48),
}


def test_fuzz_readers_raise_structured_errors():
    """10k seeded random inputs: fresh bytes, and mutated or truncated valid files."""
    rng = np.random.default_rng(2024)
    seeds = valid_samples()
    names = list(PARSERS)
    outcomes = {"ok": 0, "error": 0}
    for i in range(10_000):
        name = names[i % len(names)]
        kind = rng.integers(3)
        if kind == 0:
            data = rng.integers(0, 256, size=int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
        else:
            buf = bytearray(seeds[name])
            if kind == 1:
                for pos in rng.integers(0, len(buf), size=int(rng.integers(1, 4))):
                    buf[pos] = int(rng.integers(0, 256))
            else:
                del buf[int(rng.integers(0, len(buf))) :]
            data = bytes(buf)
        try:
            PARSERS[name](data)
            outcomes["ok"] += 1
        except ValueError:
            outcomes["error"] += 1
    assert outcomes["error"] > 1000
