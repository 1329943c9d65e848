"""Raster handling: normalization, NDVI, mirror-padded overlap tiling,
valid-crop stitching, test-time augmentation, and PPM/PGM/AFT1 file I/O.

Rasters are numpy arrays shaped [C,H,W] (u8 for images/labels, f32 for
derived data). Tiling uses 50% overlap with a mirror margin of a quarter
tile so the kept central crops partition the original extent exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import storage
from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionMismatchError,
    GeometryError,
    PaletteDecodeError,
    RasterFormatError,
    RasterParseError,
)

ROLE_TAGS = ("optical", "dsm", "ndvi", "label", "probability")

# class index -> RGB; the conventional coloring for the six land-cover classes
DEFAULT_PALETTE = (
    (255, 255, 255),   # impervious surface
    (0, 0, 255),       # building
    (0, 255, 255),     # low vegetation
    (0, 255, 0),       # tree
    (255, 255, 0),     # car
    (255, 0, 0),       # clutter/background
)
CLASS_NAMES = ("imp_surf", "building", "low_veg", "tree", "car", "clutter")
IGNORE_VALUE = 255


@dataclass
class RasterImage:
    data: np.ndarray          # [C,H,W]
    role: str = "optical"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractError(f"raster data must be [C,H,W], got shape {self.data.shape}")
        if self.data.dtype not in (np.uint8, np.float32):
            raise ContractError(f"raster dtype must be u8 or f32, got {self.data.dtype}")
        if self.role not in ROLE_TAGS:
            raise ContractError(f"unknown raster role {self.role!r}")

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class ChannelStats:
    names: list
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise DegenerateInputError(f"channel std must be > 0, got {self.std}")

    def save(self, path) -> None:
        lines = ["channel,mean,std"]
        for name, m, s in zip(self.names, self.mean, self.std):
            lines.append(f"{name},{m!r},{s!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ChannelStats":
        names, means, stds = [], [], []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("channel,"):
                continue
            name, m, s = line.split(",")
            names.append(name)
            means.append(float(m))
            stds.append(float(s))
        return cls(names=names, mean=np.array(means), std=np.array(stds))


def compute_stats(arrays: Sequence[np.ndarray], names: Sequence[str]) -> ChannelStats:
    """Dataset-wide per-channel mean/std over a list of [C,H,W] rasters."""
    channels = len(names)
    count = 0
    total = np.zeros(channels, dtype=np.float64)
    total_sq = np.zeros(channels, dtype=np.float64)
    for arr in arrays:
        flat = arr.reshape(channels, -1).astype(np.float64)
        count += flat.shape[1]
        total += flat.sum(axis=1)
        total_sq += (flat * flat).sum(axis=1)
    if count == 0:
        raise DegenerateInputError("compute_stats over zero pixels")
    mean = total / count
    var = total_sq / count - mean * mean
    return ChannelStats(names=list(names), mean=mean, std=np.sqrt(np.maximum(var, 0.0)))


def normalize(img: RasterImage, stats: ChannelStats) -> RasterImage:
    """(x - mean) / std per channel, producing a float32 raster."""
    if img.channels != len(stats.names):
        raise DimensionMismatchError(
            f"raster has {img.channels} channels, stats describe {len(stats.names)}")
    data = img.data.astype(np.float32)
    mean = stats.mean.astype(np.float32).reshape(-1, 1, 1)
    std = stats.std.astype(np.float32).reshape(-1, 1, 1)
    return RasterImage(data=(data - mean) / std, role=img.role)


def compute_ndvi(nir: np.ndarray, red: np.ndarray) -> np.ndarray:
    """(nir - red) / (nir + red) with a zero-denominator guard; range [-1, 1]."""
    if nir.shape != red.shape:
        raise DimensionMismatchError(f"channel extents differ: {nir.shape} vs {red.shape}")
    nir = nir.astype(np.float32)
    red = red.astype(np.float32)
    denom = nir + red
    out = np.zeros_like(nir)
    nz = denom != 0
    out[nz] = (nir[nz] - red[nz]) / denom[nz]
    return out


def mirror_pad(data: np.ndarray, margin: int) -> np.ndarray:
    """Reflect without repeating the edge pixel: [a,b,c], margin 1 -> [b,a,b,c,b]."""
    if margin == 0:
        return data.copy()
    h, w = data.shape[-2], data.shape[-1]
    if margin >= min(h, w):
        raise GeometryError(f"mirror margin {margin} too large for extent {h}x{w}")
    pad = [(0, 0)] * (data.ndim - 2) + [(margin, margin), (margin, margin)]
    return np.pad(data, pad, mode="reflect")


@dataclass
class TileGrid:
    width: int                # original extent
    height: int
    tile: int
    stride: int
    margin: int
    spans_y: list             # per-origin (origin, valid_start, valid_end) in padded coords
    spans_x: list

    @property
    def padded_width(self) -> int:
        return self.width + 2 * self.margin

    @property
    def padded_height(self) -> int:
        return self.height + 2 * self.margin

    @property
    def n_tiles(self) -> int:
        return len(self.spans_y) * len(self.spans_x)

    def positions(self):
        """Yield (iy, ix, y_span, x_span) in row-major tile order."""
        for iy, ys in enumerate(self.spans_y):
            for ix, xs in enumerate(self.spans_x):
                yield iy, ix, ys, xs


def _axis_spans(extent: int, tile: int, stride: int, margin: int) -> list:
    padded = extent + 2 * margin
    if tile > padded:
        raise GeometryError(f"tile {tile} exceeds padded extent {padded}")
    origins = list(range(0, padded - tile + 1, stride))
    if origins[-1] != padded - tile:
        origins.append(padded - tile)
    q = tile // 4
    starts = [margin] + [o + q for o in origins[1:]]
    ends = starts[1:] + [padded - margin]
    return [(o, s, e) for o, s, e in zip(origins, starts, ends)]


def make_tile_grid(w: int, h: int, tile: int, overlap: int) -> TileGrid:
    """Plan mirror margin, tile origins, and the kept central crop of each tile.

    Only 50% overlap is supported; the margin is a quarter tile so the first
    and last crops land exactly on the original borders and the kept crops
    partition the original extent with no gap or double cover.
    """
    if tile < 2 or tile % 2:
        raise ContractError(f"tile size must be even and >= 2, got {tile}")
    if overlap != tile // 2:
        raise ContractError(f"only 50% overlap is supported: tile {tile} needs overlap {tile // 2}")
    margin = tile // 4
    stride = tile // 2
    return TileGrid(width=w, height=h, tile=tile, stride=stride, margin=margin,
                    spans_y=_axis_spans(h, tile, stride, margin),
                    spans_x=_axis_spans(w, tile, stride, margin))


def slice_tiles(data: np.ndarray, grid: TileGrid) -> list:
    """Cut the mirror-padded raster into row-major tile arrays."""
    padded = mirror_pad(data, grid.margin)
    out = []
    for _, _, (oy, _, _), (ox, _, _) in grid.positions():
        out.append(padded[..., oy:oy + grid.tile, ox:ox + grid.tile].copy())
    return out


def stitch(tiles: Sequence[np.ndarray], grid: TileGrid, mode: str = "crop") -> np.ndarray:
    """Reassemble tile outputs onto the original extent.

    ``crop`` keeps each tile's central valid region (bit-exact partition);
    ``average`` sums full tiles where they overlap and divides by coverage.
    """
    tiles = list(tiles)
    if len(tiles) != grid.n_tiles:
        raise ContractError(f"got {len(tiles)} tiles, grid expects {grid.n_tiles}")
    lead = tiles[0].shape[:-2]
    for i, t in enumerate(tiles):
        if t.shape[-2:] != (grid.tile, grid.tile) or t.shape[:-2] != lead:
            raise ContractError(f"tile {i} has shape {t.shape}, expected {lead + (grid.tile, grid.tile)}")
    m = grid.margin
    if mode == "crop":
        out = np.zeros(lead + (grid.height, grid.width), dtype=tiles[0].dtype)
        for i, (_, _, (oy, sy, ey), (ox, sx, ex)) in enumerate(grid.positions()):
            out[..., sy - m:ey - m, sx - m:ex - m] = \
                tiles[i][..., sy - oy:ey - oy, sx - ox:ex - ox]
        return out
    if mode == "average":
        acc = np.zeros(lead + (grid.padded_height, grid.padded_width), dtype=np.float64)
        cnt = np.zeros((grid.padded_height, grid.padded_width), dtype=np.float64)
        for i, (_, _, (oy, _, _), (ox, _, _)) in enumerate(grid.positions()):
            acc[..., oy:oy + grid.tile, ox:ox + grid.tile] += tiles[i]
            cnt[oy:oy + grid.tile, ox:ox + grid.tile] += 1.0
        acc /= cnt
        core = acc[..., m:m + grid.height, m:m + grid.width]
        return core.astype(tiles[0].dtype)
    raise ContractError(f"unknown stitch mode {mode!r}")


def coverage_count(grid: TileGrid) -> np.ndarray:
    """How many valid crops claim each original pixel (the invariant says 1)."""
    cnt = np.zeros((grid.height, grid.width), dtype=np.int64)
    m = grid.margin
    for _, _, (_, sy, ey), (_, sx, ex) in grid.positions():
        cnt[sy - m:ey - m, sx - m:ex - m] += 1
    return cnt


# ---------------------------------------------------------------------------
# test-time augmentation over the dihedral group

DIHEDRAL_TRANSFORMS = tuple((k, f) for f in (False, True) for k in range(4))


def dihedral_apply(arr: np.ndarray, transform: tuple) -> np.ndarray:
    """Apply (rot90 count, hflip flag): flip about the vertical axis, then rotate."""
    k, flip = transform
    if flip:
        arr = arr[..., ::-1]
    if k:
        arr = np.rot90(arr, k, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def dihedral_invert(arr: np.ndarray, transform: tuple) -> np.ndarray:
    k, flip = transform
    if k:
        arr = np.rot90(arr, -k, axes=(-2, -1))
    if flip:
        arr = arr[..., ::-1]
    return np.ascontiguousarray(arr)


def parse_tta_set(spec: str) -> tuple:
    """Named transform sets: d4 (all eight), flips, or identity."""
    named = {
        "d4": DIHEDRAL_TRANSFORMS,
        "flips": ((0, False), (0, True)),
        "identity": ((0, False),),
    }
    if spec not in named:
        raise ContractError(f"unknown TTA set {spec!r}; choose from {sorted(named)}")
    return named[spec]


def tta_probabilities(predict: Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray],
                      main: np.ndarray, aux: Optional[np.ndarray],
                      transforms: Sequence[tuple]) -> np.ndarray:
    """Sum of inverse-mapped probability maps over the transform set."""
    transforms = list(transforms)
    for t in transforms:
        if t not in DIHEDRAL_TRANSFORMS:
            raise ContractError(f"transform {t} is not in the dihedral group")
    if (0, False) not in transforms:
        raise ContractError("the identity transform must be included")
    total = None
    for t in transforms:
        p = predict(dihedral_apply(main, t),
                    None if aux is None else dihedral_apply(aux, t))
        p = dihedral_invert(p, t)
        total = p.copy() if total is None else total + p
    return total


def tta_predict(predict, main, aux, transforms) -> np.ndarray:
    """Argmax class map of the summed probabilities (first class wins ties)."""
    return tta_probabilities(predict, main, aux, transforms).argmax(axis=0)


# ---------------------------------------------------------------------------
# raster file formats: PPM (P6), PGM (P5), AFT1

def _parse_pnm_header(buf: bytes, magic: bytes):
    if buf[:2] != magic:
        raise RasterParseError(f"bad magic at byte 0: {buf[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise RasterParseError(f"truncated header at byte {pos}")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise RasterParseError(f"unexpected byte {ch!r} in header at byte {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise RasterParseError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise RasterFormatError(f"unsupported maxval {maxval}, only 255 is handled")
    if width < 1 or height < 1:
        raise RasterParseError(f"non-positive extent {width}x{height}")
    return width, height, pos


def read_raster(path) -> RasterImage:
    buf = Path(path).read_bytes()
    if buf[:2] == b"P6":
        w, h, pos = _parse_pnm_header(buf, b"P6")
        need = w * h * 3
        if len(buf) - pos < need:
            raise RasterParseError(
                f"truncated P6 payload at byte {pos}: need {need} bytes, have {len(buf) - pos}")
        pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
        data = pixels.reshape(h, w, 3).transpose(2, 0, 1).copy()
        return RasterImage(data=data, role="optical")
    if buf[:2] == b"P5":
        w, h, pos = _parse_pnm_header(buf, b"P5")
        need = w * h
        if len(buf) - pos < need:
            raise RasterParseError(
                f"truncated P5 payload at byte {pos}: need {need} bytes, have {len(buf) - pos}")
        pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
        return RasterImage(data=pixels.reshape(1, h, w).copy(), role="label")
    if buf[:4] == storage.AFT1_MAGIC:
        arr, end = storage.tensor_from_bytes(buf)
        if end != len(buf):
            raise RasterParseError(f"trailing bytes after AFT1 payload at byte {end}")
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise RasterFormatError(f"AFT1 raster must be rank 2 or 3, got rank {arr.ndim}")
        return RasterImage(data=arr.astype(np.float32), role="dsm")
    raise RasterParseError(f"unrecognized raster magic at byte 0: {buf[:4]!r}")


def write_raster(img: RasterImage, path) -> None:
    path = Path(path)
    data = img.data
    if data.dtype == np.uint8 and data.shape[0] == 3:
        header = f"P6\n{img.width} {img.height}\n255\n".encode()
        path.write_bytes(header + data.transpose(1, 2, 0).tobytes())
    elif data.dtype == np.uint8 and data.shape[0] == 1:
        header = f"P5\n{img.width} {img.height}\n255\n".encode()
        path.write_bytes(header + data[0].tobytes())
    elif data.dtype == np.float32:
        storage.save_tensor(data, path)
    else:
        raise RasterFormatError(
            f"no encoding for dtype {data.dtype} with {data.shape[0]} channels")


def encode_labels(class_map: np.ndarray, palette: Sequence[tuple] = DEFAULT_PALETTE) -> RasterImage:
    """Class-index map -> RGB color raster via the palette bijection."""
    class_map = np.asarray(class_map)
    if class_map.max(initial=0) >= len(palette):
        raise ContractError(
            f"class {int(class_map.max())} has no palette entry (palette size {len(palette)})")
    table = np.array(palette, dtype=np.uint8)
    rgb = table[class_map]                      # [H,W,3]
    return RasterImage(data=rgb.transpose(2, 0, 1).copy(), role="label")


def decode_labels(img: RasterImage, palette: Sequence[tuple] = DEFAULT_PALETTE) -> np.ndarray:
    """RGB color raster -> class-index map; unknown colors are an error."""
    if img.channels != 3:
        raise ContractError(f"decode_labels needs a 3-channel raster, got {img.channels}")
    rgb = img.data.transpose(1, 2, 0).astype(np.int64)
    keys = rgb[..., 0] * 65536 + rgb[..., 1] * 256 + rgb[..., 2]
    out = np.full(keys.shape, -1, dtype=np.int64)
    for idx, color in enumerate(palette):
        out[keys == (color[0] * 65536 + color[1] * 256 + color[2])] = idx
    if (out < 0).any():
        y, x = np.argwhere(out < 0)[0]
        color = tuple(int(v) for v in rgb[y, x])
        raise PaletteDecodeError(f"color {color} at pixel (row {y}, col {x}) is not in the palette")
    return out


# ---------------------------------------------------------------------------
# dataset manifest

@dataclass
class ManifestEntry:
    tile_id: str
    optical_path: Path
    dsm_path: Path
    label_path: Path


def read_manifest(path) -> list:
    """Lines of ``tile_id, optical_path, dsm_path, label_path`` (paths relative
    to the manifest's directory); blank lines and #-comments are skipped."""
    path = Path(path)
    base = path.parent
    entries = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise RasterParseError(f"{path}:{ln}: expected 4 comma-separated fields, got {len(parts)}")
        entries.append(ManifestEntry(tile_id=parts[0],
                                     optical_path=base / parts[1],
                                     dsm_path=base / parts[2],
                                     label_path=base / parts[3]))
    return entries
