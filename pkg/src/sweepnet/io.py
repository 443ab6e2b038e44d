"""Readers and writers for PFM, PPM, PLY, camera text files and weights.

Every format has a bytes-level ``dump_*`` / ``parse_*`` pair; the
``read_*`` / ``write_*`` helpers wrap them with file access. Malformed
input raises ``FormatError``.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Camera, DepthRange
from .network import NetworkWeights

WEIGHTS_MAGIC = b"SWNW"
WEIGHTS_VERSION = 1
MAX_DIM = 1 << 24
MAX_RANK = 8


class FormatError(ValueError):
    """Input bytes do not form a valid file of the expected format."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})" if offset is not None else message)


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited token; skips ``#`` comments."""
    n = len(data)
    while pos < n:
        if data[pos : pos + 1].isspace():
            pos += 1
        elif data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = n if end < 0 else end + 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", start)
    return data[start:pos], pos


def _read_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, end = _read_token(data, pos)
    if not tok.isdigit():
        raise FormatError(f"{what} is not a non-negative integer: {tok[:20]!r}", end - len(tok))
    value = int(tok)
    if value > MAX_DIM:
        raise FormatError(f"{what} {value} exceeds limit {MAX_DIM}", end - len(tok))
    return value, end


# ---------------------------------------------------------------------------
# PFM


def dump_pfm(data: np.ndarray) -> bytes:
    """Grayscale PFM, little-endian, rows stored bottom to top."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"PFM maps must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.flipud(arr).astype("<f4").tobytes()


def parse_pfm(data: bytes) -> np.ndarray:
    """Parse a grayscale PFM; big-endian files (positive scale) are converted."""
    if not data.startswith(b"Pf"):
        if data.startswith(b"PF"):
            raise FormatError("color PFM is not supported", 0)
        raise FormatError("missing 'Pf' magic", 0)
    pos = 2
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after magic", pos)
    w, pos = _read_int(data, pos, "width")
    h, pos = _read_int(data, pos, "height")
    tok, pos = _read_token(data, pos)
    try:
        scale = float(tok.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"bad scale {tok[:20]!r}", pos - len(tok)) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError("scale must be a non-zero finite number", pos - len(tok))
    if pos >= len(data) or data[pos : pos + 1] not in (b"\n", b" ", b"\r", b"\t"):
        raise FormatError("missing single whitespace before raster", pos)
    pos += 1
    need = w * h * 4
    if len(data) - pos < need:
        raise FormatError(f"raster truncated: need {need} bytes, have {len(data) - pos}", pos)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return np.flipud(arr).astype(np.float32)


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    Path(path).write_bytes(dump_pfm(data))


def read_pfm(path: str | Path) -> np.ndarray:
    return parse_pfm(Path(path).read_bytes())


INVALID_PFM_DEPTH = -1.0


def write_depth_pfm(path: str | Path, depth: np.ndarray) -> None:
    """Depth map with invalid pixels (<= 0) stored as -1."""
    write_pfm(path, np.where(depth > 0, depth, INVALID_PFM_DEPTH))


def read_depth_pfm(path: str | Path) -> np.ndarray:
    """Depth map as float64 with invalid pixels set to 0."""
    d = read_pfm(path).astype(np.float64)
    return np.where(d > 0, d, 0.0)


# ---------------------------------------------------------------------------
# PPM


def dump_ppm(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("PPM images must be H x W x 3 uint8")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def parse_ppm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise FormatError("missing 'P6' magic", 0)
    pos = 2
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after magic", pos)
    w, pos = _read_int(data, pos, "width")
    h, pos = _read_int(data, pos, "height")
    maxval, pos = _read_int(data, pos, "maxval")
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM supported, maxval {maxval}", pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace before raster", pos)
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise FormatError(f"raster truncated: need {need} bytes, have {len(data) - pos}", pos)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(dump_ppm(image))


def read_ppm(path: str | Path) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def read_image(path: str | Path) -> np.ndarray:
    """PPM image as float64 in [0, 1]."""
    return to_float(read_ppm(path))


# ---------------------------------------------------------------------------
# camera text


def dump_camera(cam: Camera, depth_range: DepthRange | None = None) -> str:
    E = np.eye(4)
    E[:3, :3] = cam.R
    E[:3, 3] = cam.t
    lines = ["extrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in E]
    lines += ["", "intrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cam.K]
    lines.append("")
    if depth_range is not None:
        r = depth_range
        lines.append(f"{r.d_min!r} {r.inverse_spacing!r} {r.count} {r.d_max!r}")
    return "\n".join(lines) + "\n"


_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def _floats(line: str, count: int, lineno: int) -> list[float]:
    parts = line.split()
    if len(parts) != count:
        raise FormatError(f"line {lineno}: expected {count} numbers, got {len(parts)}")
    for p in parts:
        if not _NUMBER.match(p):
            raise FormatError(f"line {lineno}: not a decimal number: {p[:20]!r}")
    return [float(p) for p in parts]


def parse_camera(text: str, width: int, height: int) -> tuple[Camera, tuple[float, float, float, float] | None]:
    """Parse the MVSNet-style camera file.

    Returns the camera and the raw ``(d_min, interval, count, d_max)``
    line when present.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    if len(lines) < 9 or lines[0] != "extrinsic":
        raise FormatError("camera file must start with 'extrinsic'")
    E = np.array([_floats(lines[1 + i], 4, 2 + i) for i in range(4)])
    rest = [ln for ln in lines[5:] if ln]
    if not rest or rest[0] != "intrinsic":
        raise FormatError("missing 'intrinsic' block")
    if len(rest) < 4:
        raise FormatError("intrinsic block truncated")
    K = np.array([_floats(rest[1 + i], 3, 7 + i) for i in range(3)])
    depth_line = None
    if len(rest) > 4:
        parts = rest[4].split()
        if len(parts) < 2:
            raise FormatError("depth line needs at least d_min and interval")
        vals = _floats(rest[4], len(parts), 11)
        vals += [0.0] * (4 - len(vals))
        depth_line = tuple(vals[:4])
    try:
        cam = Camera(K, E[:3, :3], E[:3, 3], width, height)
    except ValueError as exc:
        raise FormatError(f"invalid camera: {exc}") from None
    return cam, depth_line


def write_camera(path: str | Path, cam: Camera, depth_range: DepthRange | None = None) -> None:
    Path(path).write_text(dump_camera(cam, depth_range), encoding="utf-8")


def read_camera(path: str | Path, width: int | None = None, height: int | None = None) -> tuple[Camera, DepthRange | None]:
    """Read a camera file. Image size defaults to twice the principal point (rounded)."""
    text = Path(path).read_text(encoding="utf-8")
    cam, line = parse_camera(text, 1, 1)
    if width is None:
        width = int(round(2 * cam.K[0, 2] + 1))
    if height is None:
        height = int(round(2 * cam.K[1, 2] + 1))
    cam = Camera(cam.K, cam.R, cam.t, width, height)
    depth_range = None
    if line is not None:
        d_min, interval, count, d_max = line
        if count >= 2 and d_max > d_min > 0:
            depth_range = DepthRange(d_min, d_max, int(count))
    return cam, depth_range


# ---------------------------------------------------------------------------
# PLY


@dataclass
class FusedCloud:
    points: np.ndarray  # (n, 3)
    colors: np.ndarray  # (n, 3) uint8
    support: np.ndarray  # (n,) int

    def __len__(self) -> int:
        return len(self.points)


_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def dump_ply(points: np.ndarray, colors: np.ndarray) -> bytes:
    n = len(points)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode("ascii")
    rec = np.empty(n, dtype=_PLY_VERTEX)
    if n:
        pts = np.asarray(points, dtype="<f4")
        col = np.asarray(colors, dtype=np.uint8)
        rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
        rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
    return header + rec.tobytes()


def parse_ply(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Points (float32) and colors (uint8) of a file written by ``dump_ply``."""
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("missing PLY header", 0)
    try:
        header = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise FormatError("non-ASCII PLY header", 0) from None
    if len(header) < 2 or header[1] != "format binary_little_endian 1.0":
        raise FormatError("only binary_little_endian 1.0 PLY supported", 4)
    count = None
    props = []
    for line in header[2:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element" and len(parts) == 3 and parts[1] == "vertex":
            if not parts[2].isdigit() or int(parts[2]) > MAX_DIM * 16:
                raise FormatError(f"bad vertex count {parts[2][:20]!r}")
            count = int(parts[2])
        elif parts[0] == "property" and len(parts) == 3:
            props.append((parts[1], parts[2]))
        else:
            raise FormatError(f"unsupported header line {line[:40]!r}")
    expected = [("float", "x"), ("float", "y"), ("float", "z"), ("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]
    if count is None or props != expected:
        raise FormatError("vertex element must be x,y,z float and red,green,blue uchar")
    pos = end + len(b"end_header\n")
    need = count * _PLY_VERTEX.itemsize
    if len(data) - pos < need:
        raise FormatError(f"vertex data truncated: need {need} bytes, have {len(data) - pos}", pos)
    rec = np.frombuffer(data, dtype=_PLY_VERTEX, count=count, offset=pos)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float32)
    col = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.uint8)
    return pts, col


def write_ply(path: str | Path, cloud: FusedCloud) -> None:
    Path(path).write_bytes(dump_ply(cloud.points, cloud.colors))


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    return parse_ply(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# weights


def dump_weights(tensors: dict[str, np.ndarray]) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def parse_weights(data: bytes) -> dict[str, np.ndarray]:
    """Named float32 tensors in file order."""
    if len(data) < 12:
        raise FormatError("weights file shorter than its header", 0)
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"unknown magic {data[:4]!r}", 0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}", 4)
    pos = 12
    tensors: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if n > len(data) - pos:
            raise FormatError(f"truncated {what}", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", pos - name_len) from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > MAX_RANK:
            raise FormatError(f"rank {rank} exceeds limit {MAX_RANK}", pos - 4)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = 1
        for d in dims:
            if d > MAX_DIM:
                raise FormatError(f"dimension {d} exceeds limit {MAX_DIM}", pos)
            size *= d
        if size * 4 > len(data) - pos:
            raise FormatError(f"tensor {name!r} payload truncated", pos)
        payload = take(size * 4, "payload")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", pos)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return tensors


def write_weights(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_weights(tensors))


def read_weights(path: str | Path) -> dict[str, np.ndarray]:
    return parse_weights(Path(path).read_bytes())


def save_network(path: str | Path, weights: NetworkWeights) -> None:
    write_weights(path, weights.named_parameters())


def load_network(path: str | Path) -> NetworkWeights:
    tensors = {k: v.astype(np.float64) for k, v in read_weights(path).items()}
    return NetworkWeights.from_named(tensors)
