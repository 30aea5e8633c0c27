"""Synthetic targets, relay sampling patterns, photon noise and file formats."""
import json
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import SPEED_OF_LIGHT, DirectionalAlbedo, MeasurementPair, SignalSet, VoxelGrid
from .errors import FormatError, GridMismatchError, NumericalError, ParameterError
from .transport import TransportOperator, timing_window

# -- targets ----------------------------------------------------------------

PYRAMID_BASE = 1.0
PYRAMID_HEIGHT = 0.2
PYRAMID_DISTANCE = 0.5


def default_pyramid_grid(n=64):
    """``n``-cubed grid over a 1.2 x 1.2 m aperture and depths 0.4 to 0.8 m."""
    return VoxelGrid.from_bounds((n, n, n), (0.4, -0.6, -0.6), (0.8, 0.6, 0.6))


def pyramid_faces(base=PYRAMID_BASE, height=PYRAMID_HEIGHT, distance=PYRAMID_DISTANCE,
                  apex_toward_relay=True):
    """The four lateral faces as ``(triangles (4, 3, 3), outward normals (4, 3))``.

    The pyramid axis is the depth axis through ``y = z = 0``.  With the apex
    toward the relay the apex sits at depth ``distance`` and the base at
    ``distance + height``; otherwise the two are swapped.  Normals point to
    the relay side (negative depth component).
    """
    h = base / 2.0
    near, far = distance, distance + height
    apex_x, base_x = (near, far) if apex_toward_relay else (far, near)
    apex = np.array([apex_x, 0.0, 0.0])
    corners = np.array([[base_x, h, -h], [base_x, h, h], [base_x, -h, h], [base_x, -h, -h]])
    tris = np.array([[apex, corners[i], corners[(i + 1) % 4]] for i in range(4)])
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals *= -np.sign(normals[:, :1])
    return tris, normals


def point_triangle_distance(p, tri):
    """Euclidean distance from points ``p`` (n, 3) to the filled triangle ``tri`` (3, 3)."""
    a, b, c = tri
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    rel = p - a
    h = rel @ n
    foot = p - h[:, None] * n
    # inside test via signs of the edge cross products against the normal
    inside = np.ones(p.shape[0], dtype=bool)
    for s, e in ((a, b), (b, c), (c, a)):
        inside &= np.cross(e - s, foot - s) @ n >= 0
    best = np.where(inside, np.abs(h), np.inf)
    for s, e in ((a, b), (b, c), (c, a)):
        d = e - s
        t = np.clip(((p - s) @ d) / (d @ d), 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(p - (s + t[:, None] * d), axis=1))
    return best


def make_pyramid(grid, albedo=1.0, apex_toward_relay=True, base=PYRAMID_BASE,
                 height=PYRAMID_HEIGHT, distance=PYRAMID_DISTANCE):
    """Directional albedo of a hollow square pyramid seen from the relay.

    A voxel belongs to the surface when its center lies within half a voxel
    diagonal of a lateral face; it takes the normal of the nearest face.  The
    base is never drawn.
    """
    lower, upper = np.asarray(grid.origin), np.asarray(grid.upper)
    h = base / 2.0
    if (lower[0] > distance or upper[0] < distance + height or lower[1] > -h
            or upper[1] < h or lower[2] > -h or upper[2] < h):
        raise ParameterError("grid does not contain the pyramid")
    tris, normals = pyramid_faces(base, height, distance, apex_toward_relay)
    centers = grid.centers()
    dist = np.stack([point_triangle_distance(centers, t) for t in tris])
    radius = 0.5 * np.linalg.norm(grid.voxel_size)
    nearest = np.argmin(dist, axis=0)
    on = dist[nearest, np.arange(centers.shape[0])] <= radius
    u = np.zeros((centers.shape[0], 3))
    u[on] = albedo * normals[nearest[on]]
    return DirectionalAlbedo(grid, u.reshape(grid.shape + (3,)))


def make_plane_chart(grid, depth, mask=None, albedo=1.0):
    """Fronto-parallel chart at ``depth`` facing the relay.

    ``mask`` is an ``(n_y, n_z)`` boolean image of the printed region
    (default: the whole plane).
    """
    k = int(np.floor((depth - grid.origin[0]) / grid.voxel_size[0]))
    if not 0 <= k < grid.n_x:
        raise ParameterError(f"depth {depth} lies outside the grid")
    if mask is None:
        mask = np.ones((grid.n_y, grid.n_z), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (grid.n_y, grid.n_z):
        raise GridMismatchError(f"mask shape {mask.shape} differs from ({grid.n_y}, {grid.n_z})")
    u = np.zeros(grid.shape + (3,))
    u[k, mask, 0] = -albedo
    return DirectionalAlbedo(grid, u)


# -- relay patterns -----------------------------------------------------------

PATTERN_KINDS = ("grid", "random", "vertical-bars", "horizontal-bars", "box-frame", "point-list")
PATTERN_MODES = ("confocal", "exhaustive-nonconfocal", "fixed-detector")


@dataclass
class PatternSpec:
    """Sampling pattern on a relay plane of constant depth.

    ``counts`` depends on ``kind``: ``(k_y, k_z)`` for grid, ``(n,)`` for
    random, ``(bars, points_per_bar)`` for the bar patterns and
    ``(points_per_side,)`` for box-frame.  ``extent`` is the ``(y, z)`` size
    of the covered square region centered at ``center``.
    """

    kind: str = "grid"
    counts: Sequence[int] = (10, 10)
    extent: Sequence[float] = (2.0, 2.0)
    center: Sequence[float] = (0.0, 0.0)
    depth: float = 0.0
    mode: str = "confocal"
    seed: int = 0
    points: Optional[Sequence[Sequence[float]]] = None
    detector: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ParameterError(f"unknown pattern kind {self.kind!r}")
        if self.mode not in PATTERN_MODES:
            raise ParameterError(f"unknown pattern mode {self.mode!r}")


def _spread(n, lo, hi):
    return np.linspace(lo, hi, n) if n > 1 else np.array([(lo + hi) / 2.0])


def pattern_points(spec):
    """Relay points ``(P, 3)`` of a pattern before pair expansion."""
    cy, cz = spec.center
    hy, hz = spec.extent[0] / 2.0, spec.extent[1] / 2.0
    counts = [int(c) for c in spec.counts]
    if spec.kind == "grid":
        ky, kz = (counts * 2)[:2]
        if ky < 2 or kz < 2:
            raise ParameterError("grid patterns need at least 2 points per side")
        ys, zs = np.meshgrid(_spread(ky, cy - hy, cy + hy), _spread(kz, cz - hz, cz + hz), indexing="ij")
        yz = np.stack([ys.ravel(), zs.ravel()], axis=1)
    elif spec.kind == "random":
        rng = np.random.default_rng(spec.seed)
        n = counts[0]
        yz = np.stack([rng.uniform(cy - hy, cy + hy, n), rng.uniform(cz - hz, cz + hz, n)], axis=1)
    elif spec.kind in ("vertical-bars", "horizontal-bars"):
        bars, per = counts[0], counts[1]
        across = _spread(bars, cy - hy, cy + hy) if spec.kind == "vertical-bars" else _spread(bars, cz - hz, cz + hz)
        along = _spread(per, cz - hz, cz + hz) if spec.kind == "vertical-bars" else _spread(per, cy - hy, cy + hy)
        a, b = np.meshgrid(across, along, indexing="ij")
        yz = np.stack([a.ravel(), b.ravel()], axis=1)
        if spec.kind == "horizontal-bars":
            yz = yz[:, ::-1]
    elif spec.kind == "box-frame":
        per = counts[0]
        if per < 1:
            raise ParameterError("box-frame needs at least one point per side")
        # walk the perimeter counter-clockwise from the (-y, -z) corner
        k = np.arange(4 * per)
        side = k // per
        frac = (k % per) / per
        ys = np.choose(side, [-1 + 2 * frac, np.ones_like(frac), 1 - 2 * frac, -np.ones_like(frac)])
        zs = np.choose(side, [-np.ones_like(frac), -1 + 2 * frac, np.ones_like(frac), 1 - 2 * frac])
        yz = np.stack([cy + hy * ys, cz + hz * zs], axis=1)
    else:
        if spec.points is None:
            raise ParameterError("point-list pattern needs points")
        pts = np.asarray(spec.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise ParameterError("points must be (P, 2) or (P, 3)")
        if pts.shape[1] == 3:
            return pts
        yz = pts
    out = np.empty((yz.shape[0], 3))
    out[:, 0] = spec.depth
    out[:, 1:] = yz
    return out


def expand_pairs(points, mode="confocal", detector=None):
    """Turn relay points into measurement pairs.

    Exhaustive mode lists the ``P`` confocal pairs first, then the
    ``P (P - 1)`` non-confocal ones ordered by (illumination, detection) index.
    """
    pts = [tuple(float(x) for x in p) for p in np.asarray(points, dtype=float)]
    if mode == "confocal":
        return [MeasurementPair(p, p) for p in pts]
    if mode == "exhaustive-nonconfocal":
        out = [MeasurementPair(p, p) for p in pts]
        out += [MeasurementPair(a, b) for i, a in enumerate(pts) for j, b in enumerate(pts) if i != j]
        return out
    if mode == "fixed-detector":
        det = pts[0] if detector is None else tuple(float(x) for x in detector)
        return [MeasurementPair(p, det) for p in pts]
    raise ParameterError(f"unknown pattern mode {mode!r}")


def make_pattern(spec):
    """Measurement pairs of a PatternSpec (deterministic given ``spec.seed``)."""
    det = spec.detector
    if det is not None and len(det) == 2:
        det = (spec.depth, det[0], det[1])
    return expand_pairs(pattern_points(spec), spec.mode, det)


# -- measurement simulation -----------------------------------------------------


@dataclass
class Timing:
    """Histogram timing; ``n_t=None`` picks a window covering the grid."""

    bin_width: float = 32e-12
    n_t: Optional[int] = None
    t0: float = 0.0
    c: float = SPEED_OF_LIGHT


@dataclass
class NoiseSpec:
    """Poisson photon noise.

    Counts are drawn with mean ``scale * b_sim + background * bin_width`` and
    divided back by ``scale``.  Negative simulated values are clipped to zero
    before drawing.  When ``peak_counts`` is given it replaces ``scale`` by
    ``peak_counts / max(b_sim)``, the expected count at the brightest bin.
    """

    enabled: bool = False
    scale: float = 1.0
    background: float = 0.0
    seed: int = 0
    peak_counts: Optional[float] = None

    def __post_init__(self):
        if self.scale <= 0 or self.background < 0:
            raise ParameterError("noise scale must be positive and background nonnegative")
        if self.peak_counts is not None and not self.peak_counts > 0:
            raise ParameterError("peak_counts must be positive")


def simulate_measurement(u, pairs, timing=None, noise=None, operator=None):
    """Simulated transient histograms of ``u`` for ``pairs``.

    Returns a SignalSet; noiseless unless ``noise.enabled``.
    """
    timing = timing or Timing()
    noise = noise or NoiseSpec()
    if operator is None:
        if timing.n_t is None:
            illum = np.array([p.illum for p in pairs])
            detect = np.array([p.detect for p in pairs])
            t_start, n_t = timing_window(u.grid, illum, detect, timing.bin_width, timing.c)
            # keep t0 as requested and stretch the window to the last arrival
            n_t = int(np.ceil((t_start - timing.t0) / timing.bin_width)) + n_t
            timing = Timing(timing.bin_width, max(1, n_t), timing.t0, timing.c)
        operator = TransportOperator.from_pairs(u.grid, pairs, timing.n_t, timing.bin_width,
                                                timing.t0, timing.c)
    clean = operator.forward(u.u)
    if not noise.enabled:
        hist = clean
    else:
        scale = noise.scale
        if noise.peak_counts is not None:
            peak = float(np.max(clean))
            if not peak > 0:
                raise NumericalError("noise requested for an all-zero signal", step="simulate")
            scale = noise.peak_counts / peak
        rng = np.random.default_rng(noise.seed)
        lam = scale * np.clip(clean, 0.0, None) + noise.background * operator.bin_width
        hist = rng.poisson(lam).astype(float) / scale
    return SignalSet(operator.illum, operator.detect, hist, operator.bin_width, operator.t0, operator.c)


# -- file formats -----------------------------------------------------------------

SIGNAL_MAGIC = b"CCSOCRSG"
VOLUME_MAGIC = b"CCSOCRVL"
SCHEMA_VERSION = 1
_ENDIAN = {"little": "<", "big": ">"}


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{what} contains NaN or Inf")


def _encode(magic, header, payload, endianness):
    if endianness not in _ENDIAN:
        raise ParameterError(f"endianness must be 'little' or 'big', got {endianness!r}")
    header = dict(header, endianness=endianness, dtype="float64", schema_version=SCHEMA_VERSION)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = np.ascontiguousarray(payload, dtype=_ENDIAN[endianness] + "f8").tobytes()
    blob = struct.pack("<I", len(head)) + head + body
    return magic + blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def _decode(data, magic):
    if len(data) < len(magic) or data[:len(magic)] != magic:
        raise FormatError("magic", f"expected {magic!r}")
    pos = len(magic)
    if len(data) < pos + 4:
        raise FormatError("header", "missing header length")
    (hlen,) = struct.unpack_from("<I", data, pos)
    if len(data) < pos + 4 + hlen:
        raise FormatError("header", "truncated header")
    try:
        header = json.loads(data[pos + 4:pos + 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("header", f"malformed JSON ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError("header", "header must be a JSON object")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise FormatError("header", f"unsupported schema version {header.get('schema_version')!r}")
    if header.get("dtype") != "float64" or header.get("endianness") not in _ENDIAN:
        raise FormatError("header", "dtype must be float64 and endianness little or big")
    start = pos + 4 + hlen
    count = header.get("count")
    if not isinstance(count, int) or count < 0:
        raise FormatError("header", "missing payload count")
    end = start + 8 * count
    if len(data) < end:
        raise FormatError("payload", f"truncated: expected {8 * count} bytes, found {len(data) - start}")
    if len(data) < end + 4:
        raise FormatError("checksum", "missing CRC32")
    if len(data) > end + 4:
        raise FormatError("checksum", "trailing bytes after CRC32")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[pos:end]) & 0xFFFFFFFF != crc:
        raise FormatError("checksum", "CRC32 mismatch")
    payload = np.frombuffer(data[start:end], dtype=_ENDIAN[header["endianness"]] + "f8")
    return header, payload.astype(np.float64)


def encode_signal(s, endianness="little"):
    for arr, what in ((s.illum, "illum"), (s.detect, "detect"), (s.histogram, "histogram")):
        _check_finite(arr, what)
    header = {"kind": "signal", "M": s.n_pairs, "n_t": s.n_t, "bin_width": s.bin_width, "t0": s.t0,
              "c": s.c, "illum": s.illum.tolist(), "detect": s.detect.tolist(),
              "count": int(s.histogram.size)}
    return _encode(SIGNAL_MAGIC, header, s.histogram, endianness)


def decode_signal(data):
    header, payload = _decode(data, SIGNAL_MAGIC)
    try:
        m, n_t = int(header["M"]), int(header["n_t"])
        illum = np.array(header["illum"], dtype=float).reshape(m, 3)
        detect = np.array(header["detect"], dtype=float).reshape(m, 3)
        bin_width, t0, c = float(header["bin_width"]), float(header["t0"]), float(header["c"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("header", f"bad signal fields ({exc})") from None
    if payload.size != m * n_t:
        raise FormatError("payload", f"expected {m * n_t} values, found {payload.size}")
    return SignalSet(illum, detect, payload.reshape(m, n_t), bin_width, t0, c)


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """A scalar field on a voxel grid (back-projections, albedo maps)."""

    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, order="C")
        if vals.shape != self.grid.shape:
            raise GridMismatchError(f"values have shape {vals.shape}, grid is {self.grid.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def encode_volume(u, endianness="little"):
    """Serialize a DirectionalAlbedo (3 components) or ScalarVolume (1 component)."""
    arr = u.u if isinstance(u, DirectionalAlbedo) else u.values[..., None]
    _check_finite(arr, "volume")
    header = {"kind": "volume", "grid": u.grid.to_dict(), "components": int(arr.shape[-1]),
              "count": int(arr.size)}
    return _encode(VOLUME_MAGIC, header, arr, endianness)


def decode_volume(data):
    header, payload = _decode(data, VOLUME_MAGIC)
    try:
        grid = VoxelGrid.from_dict(header["grid"])
        comps = int(header["components"])
    except (KeyError, TypeError, ValueError, ParameterError) as exc:
        raise FormatError("header", f"bad volume fields ({exc})") from None
    if payload.size != grid.n_voxels * comps:
        raise FormatError("payload", f"expected {grid.n_voxels * comps} values, found {payload.size}")
    if comps == 1:
        return ScalarVolume(grid, payload.reshape(grid.shape))
    if comps != 3:
        raise FormatError("header", f"volumes have 1 or 3 components, not {comps}")
    return DirectionalAlbedo(grid, payload.reshape(grid.shape + (3,)))


def write_signal(path, s, endianness="little"):
    with open(path, "wb") as fh:
        fh.write(encode_signal(s, endianness))


def read_signal(path):
    with open(path, "rb") as fh:
        return decode_signal(fh.read())


def write_volume(path, u, endianness="little"):
    with open(path, "wb") as fh:
        fh.write(encode_volume(u, endianness))


def read_volume(path):
    with open(path, "rb") as fh:
        return decode_volume(fh.read())
