"""Hyperspectral cube I/O, min-max normalization, tiling, deterministic
train/val/test splitting, and LR-pair synthesis.

Cube binary format: magic 'HSI1', u16 version = 1, u32 little-endian
height, width, bands, u8 dtype code (0 = float32), then band-sequential
little-endian float32 samples (band-major, then row-major). An optional
JSON sidecar ``<stem>.meta.json`` carries the dataset name and original
value range.

The LR synthesis chain is: Gaussian blur (sigma 0.8943 by default) ->
stride-s decimation -> bilinear upsample back to the tile size. No noise
is added. Every step is a convex combination or a selection of input
samples, so degraded values never leave the input tile's value range.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import Rng, bilinear_resize, decimate, gaussian_blur

CUBE_MAGIC = b"HSI1"
CUBE_VERSION = 1
MAX_DIM = 1 << 20  # sanity cap on any header dimension

DEFAULT_SIGMA = 0.8943
DEFAULT_SCALE = 2
DEFAULT_TILE = 64

SPLITS = ("train", "val", "test")


class CubeFormatError(ValueError):
    """Raised for corrupt or implausible cube files."""


@dataclass
class HsiCube:
    data: np.ndarray  # [bands, height, width] float32
    name: str = ""
    value_range: tuple = None

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass
class TileSet:
    tiles: list  # of [bands, t, t] arrays
    origins: list  # of (row, col)
    splits: list = None  # parallel list of 'train'/'val'/'test'
    seed: int = None
    tile_size: int = DEFAULT_TILE

    def indices(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [i for i, s in enumerate(self.splits) if s == split]


@dataclass
class LrHrPair:
    lr_upsampled: np.ndarray  # [bands, t, t]
    hr: np.ndarray  # [bands, t, t]


def save_cube(cube, path, sidecar=True):
    data = np.ascontiguousarray(cube.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CUBE_MAGIC)
        f.write(struct.pack("<H", CUBE_VERSION))
        f.write(struct.pack("<III", cube.height, cube.width, cube.bands))
        f.write(struct.pack("<B", 0))
        f.write(data.tobytes())
    if sidecar:
        meta = {
            "name": cube.name,
            "height": cube.height,
            "width": cube.width,
            "bands": cube.bands,
            "value_range": list(cube.value_range) if cube.value_range else None,
        }
        with open(_sidecar_path(path), "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
            f.write("\n")


def _sidecar_path(path):
    stem, _ = os.path.splitext(path)
    return stem + ".meta.json"


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CubeFormatError(f"truncated cube file while reading {what}")
    return buf


def load_cube(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CUBE_MAGIC:
            raise CubeFormatError("not a cube file (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != CUBE_VERSION:
            raise CubeFormatError(f"unsupported cube version {version}")
        h, w, bands = struct.unpack("<III", _read_exact(f, 12, "dimensions"))
        if not all(0 < d <= MAX_DIM for d in (h, w, bands)):
            raise CubeFormatError(f"implausible cube dimensions {h}x{w}x{bands}")
        (dtype_code,) = struct.unpack("<B", _read_exact(f, 1, "dtype"))
        if dtype_code != 0:
            raise CubeFormatError(f"unknown dtype code {dtype_code}")
        n = bands * h * w
        raw = _read_exact(f, 4 * n, "samples")
        if f.read(1):
            raise CubeFormatError("trailing bytes after samples")
    data = np.frombuffer(raw, dtype="<f4").reshape(bands, h, w).copy()
    name, value_range = "", None
    sidecar = _sidecar_path(path)
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            meta = json.load(f)
        name = meta.get("name", "")
        vr = meta.get("value_range")
        value_range = tuple(vr) if vr else None
    return HsiCube(data=data, name=name, value_range=value_range)


def normalize_cube(cube):
    """Min-max normalize to [0,1] using the global min/max across all bands
    (preserves inter-band relative magnitudes, which SAM depends on).
    Records the original range."""
    lo = float(cube.data.min())
    hi = float(cube.data.max())
    if not hi > lo:
        raise ValueError(f"cannot normalize constant cube (min == max == {lo})")
    data = ((cube.data.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)
    return HsiCube(data=data, name=cube.name, value_range=(lo, hi))


def tile_cube(cube, tile_size=DEFAULT_TILE):
    """Non-overlapping tile grid from origin (0,0); partial border tiles
    are dropped."""
    if tile_size < 1:
        raise ValueError(f"tile size must be >= 1, got {tile_size}")
    if cube.height < tile_size or cube.width < tile_size:
        raise ValueError(
            f"cube {cube.height}x{cube.width} smaller than one {tile_size}x{tile_size} tile"
        )
    tiles, origins = [], []
    for r in range(0, cube.height - tile_size + 1, tile_size):
        for c in range(0, cube.width - tile_size + 1, tile_size):
            tiles.append(np.ascontiguousarray(
                cube.data[:, r:r + tile_size, c:c + tile_size]))
            origins.append((r, c))
    return TileSet(tiles=tiles, origins=origins, tile_size=tile_size)


def split_tiles(tileset, seed):
    """Deterministic shuffled assignment: after a seeded permutation, the
    first floor(0.15 N) tiles become test, the next floor(0.15 N) val, the
    remainder train."""
    n = len(tileset.tiles)
    if n < 3:
        raise ValueError(f"need at least 3 tiles to split, got {n}")
    n_test = int(np.floor(0.15 * n))
    n_val = int(np.floor(0.15 * n))
    order = Rng(seed).permutation(n)
    splits = [None] * n
    for rank, idx in enumerate(order):
        if rank < n_test:
            splits[idx] = "test"
        elif rank < n_test + n_val:
            splits[idx] = "val"
        else:
            splits[idx] = "train"
    return TileSet(tiles=tileset.tiles, origins=tileset.origins,
                   splits=splits, seed=int(seed), tile_size=tileset.tile_size)


def degrade(hr_tile, sigma=DEFAULT_SIGMA, s=DEFAULT_SCALE):
    """HR tile -> (LR upsampled back to tile size, HR) training pair."""
    if hr_tile.shape[1] % s or hr_tile.shape[2] % s:
        raise ValueError(
            f"tile side {hr_tile.shape[1:]} must be divisible by stride {s}"
        )
    lr = decimate(gaussian_blur(hr_tile, sigma), s)
    lr_up = bilinear_resize(lr, hr_tile.shape[1], hr_tile.shape[2])
    return LrHrPair(lr_upsampled=lr_up, hr=hr_tile)


def make_pairs(tileset, split, sigma=DEFAULT_SIGMA, s=DEFAULT_SCALE):
    """Degraded pairs for one split, in tile-index order."""
    return [degrade(tileset.tiles[i], sigma=sigma, s=s)
            for i in tileset.indices(split)]


def stack_pairs(pairs):
    """List of pairs -> batched (X, Y) arrays [N, bands, t, t]."""
    x = np.stack([p.lr_upsampled for p in pairs]).astype(np.float32)
    y = np.stack([p.hr for p in pairs]).astype(np.float32)
    return x, y
