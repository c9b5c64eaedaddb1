"""Pixel-level features: GRID rasters, the convolutional stem and sampling.

Coordinates are ``(row, col)`` with the origin at the top-left pixel centre.
Image coordinates enter feature space by dividing by exactly ``STRIDE``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import ConfigError, FormatError, InputError
from .tensor import Tensor

STRIDE = 4

GRID_MAGIC = b"GRID"
_TAG_TO_DTYPE = {0: np.dtype("<u4"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBIII")


@dataclass
class Grid2D:
    """Row-major, channel-last raster of shape ``(H, W, C)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 1:
            raise InputError(f"grid must be H x W x C with positive dims, got {v.shape}")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def plane(self, channel: int = 0) -> np.ndarray:
        return self.values[:, :, channel]


def _dtype_tag(arr: np.ndarray) -> int:
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise InputError("integer grid values must fit in u32")
        return 0
    if arr.dtype == np.float32:
        return 1
    return 2


def encode_grid(grid: Grid2D | np.ndarray) -> bytes:
    g = grid if isinstance(grid, Grid2D) else Grid2D(grid)
    tag = _dtype_tag(g.values)
    payload = np.ascontiguousarray(g.values.astype(_TAG_TO_DTYPE[tag], copy=False))
    return _HEADER.pack(GRID_MAGIC, tag, g.height, g.width, g.channels) + payload.tobytes()


def decode_grid(buf: bytes) -> Grid2D:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated GRID header: expected {_HEADER.size} bytes, got {len(buf)}", len(buf))
    magic, tag, h, w, c = _HEADER.unpack_from(buf)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad GRID magic {magic!r}", 0)
    if tag not in _TAG_TO_DTYPE:
        raise FormatError(f"unknown GRID dtype tag {tag}", 4)
    dtype = _TAG_TO_DTYPE[tag]
    expected = h * w * c * dtype.itemsize
    actual = len(buf) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"GRID payload length mismatch: expected {expected} bytes, got {actual}",
            _HEADER.size + min(actual, expected),
        )
    values = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size).reshape(h, w, c)
    native = {0: np.uint32, 1: np.float32, 2: np.float64}[tag]
    return Grid2D(values.astype(native))


def write_grid(path: str | Path, grid: Grid2D | np.ndarray) -> None:
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path: str | Path) -> Grid2D:
    return decode_grid(Path(path).read_bytes())


# -- convolutional stem ------------------------------------------------------

LAYER_STRIDES = (2, 2, 1)


def stem_widths(c: int) -> tuple[int, int, int]:
    return max(8, c // 4), max(8, c // 2), c


def init_stem(rng: np.random.Generator, c: int, num_classes: int, in_channels: int = 3) -> dict[str, Tensor]:
    """Stem parameters with uniform(+-1/sqrt(fan_in)) weights and zero biases."""
    params: dict[str, Tensor] = {}
    cin = in_channels
    for k, cout in enumerate(stem_widths(c), start=1):
        bound = 1.0 / np.sqrt(9 * cin)
        params[f"stem.conv{k}.w"] = Tensor(rng.uniform(-bound, bound, (3, 3, cin, cout)), requires_grad=True)
        params[f"stem.conv{k}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    bound = 1.0 / np.sqrt(c)
    params["sem.w"] = Tensor(rng.uniform(-bound, bound, (c, num_classes + 1)), requires_grad=True)
    params["sem.b"] = Tensor(np.zeros(num_classes + 1), requires_grad=True)
    return params


def stem_forward(params: dict[str, Tensor], image: np.ndarray) -> tuple[Tensor, Tensor]:
    """Run the stem on an ``(H, W, 3)`` image.

    Returns the stride-4 feature map ``(H/4, W/4, c)`` and semantic logits
    ``(H/4, W/4, Q+1)``; background is semantic class 0.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise InputError(f"image must be H x W x C, got shape {image.shape}")
    h, w, _ = image.shape
    if h % STRIDE or w % STRIDE:
        raise InputError(f"image dims {h}x{w} must be divisible by {STRIDE}; pad the tile first")
    x = Tensor(image)
    for k, s in enumerate(LAYER_STRIDES, start=1):
        x = T.relu(T.conv2d(x, params[f"stem.conv{k}.w"], params[f"stem.conv{k}.b"], stride=s, pad=1))
    fh, fw, c = x.shape
    logits = T.linear(T.reshape(x, (fh * fw, c)), params["sem.w"], params["sem.b"])
    return x, T.reshape(logits, (fh, fw, params["sem.w"].shape[1]))


def upsample_index(fh: int, fw: int, factor: int = STRIDE) -> np.ndarray:
    """Flat feature-pixel index for every full-resolution pixel (nearest neighbour)."""
    rows = np.arange(fh * factor) // factor
    cols = np.arange(fw * factor) // factor
    return (rows[:, None] * fw + cols[None, :]).reshape(-1)


# -- sampling ----------------------------------------------------------------

def bilinear_matrix(points: np.ndarray, h: int, w: int) -> sp.csr_matrix:
    """Sparse ``(P, h*w)`` interpolation matrix for feature-space points.

    Points outside ``[0, h-1] x [0, w-1]`` are clamped to the border.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r = np.clip(pts[:, 0], 0.0, h - 1.0)
    c = np.clip(pts[:, 1], 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    p = np.arange(len(pts))
    rows = np.concatenate([p, p, p, p])
    cols = np.concatenate([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1])
    vals = np.concatenate([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    m = sp.coo_matrix((vals, (rows, cols)), shape=(len(pts), h * w)).tocsr()
    m.eliminate_zeros()
    return m


def _flat(feat: Tensor) -> Tensor:
    h, w, c = feat.shape
    return T.reshape(feat, (h * w, c))


def sample_points(feat: Tensor, points: np.ndarray) -> Tensor:
    """Bilinear samples ``(P, c)`` of an ``(h, w, c)`` map at feature-space points."""
    h, w, _ = feat.shape
    return T.sparse_matmul(bilinear_matrix(points, h, w), _flat(feat))


def bilinear_sample(feat: Tensor, point) -> Tensor:
    return sample_points(feat, np.asarray(point, dtype=np.float64).reshape(1, 2))


def box_points(bbox) -> np.ndarray | None:
    """The 16 feature-space sample points of a 2x2 ROI-Align with 2x2 samples per cell.

    ``bbox`` is ``(top, left, bottom, right)`` in image coordinates.  Returns
    ``None`` for boxes with less than one square pixel of area.
    """
    top, left, bottom, right = (float(v) for v in bbox)
    if (bottom - top) * (right - left) < 1.0:
        return None
    frac = (np.arange(4) + 0.5) / 4.0
    rows = (top + frac * (bottom - top)) / STRIDE
    cols = (left + frac * (right - left)) / STRIDE
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def box_pool_matrix(bboxes, h: int, w: int, fallback=None) -> sp.csr_matrix:
    """Sparse ``(N, h*w)`` matrix averaging the ROI-Align samples of each box.

    Degenerate boxes sample the ``fallback`` image-space point (default: box centre).
    """
    mats = []
    for k, bbox in enumerate(bboxes):
        pts = box_points(bbox)
        if pts is None:
            top, left, bottom, right = bbox
            centre = (0.5 * (top + bottom), 0.5 * (left + right)) if fallback is None else fallback[k]
            mats.append(bilinear_matrix(np.asarray(centre, dtype=np.float64) / STRIDE, h, w))
        else:
            m = bilinear_matrix(pts, h, w)
            mats.append(sp.csr_matrix(m.sum(axis=0) / len(pts)))
    if not mats:
        return sp.csr_matrix((0, h * w))
    return sp.vstack(mats).tocsr()


def box_pool(feat: Tensor, bbox) -> Tensor:
    h, w, _ = feat.shape
    return T.sparse_matmul(box_pool_matrix([bbox], h, w), _flat(feat))


def sinusoidal_pe_table(points, c: int) -> np.ndarray:
    """Sinusoidal encodings ``(P, c)``: first half encodes row, second half col.

    Each half interleaves ``sin, cos`` pairs at frequencies ``10000^(-2k/(c/2))``.
    """
    if c % 4:
        raise ConfigError(f"positional encoding width {c} must be divisible by 4")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    half = c // 2
    freqs = 10000.0 ** (-np.arange(0, half, 2) / half)
    out = np.empty((len(pts), c))
    for axis in range(2):
        ang = pts[:, axis:axis + 1] * freqs[None, :]
        out[:, axis * half:(axis + 1) * half:2] = np.sin(ang)
        out[:, axis * half + 1:(axis + 1) * half:2] = np.cos(ang)
    return out


def sinusoidal_pe(pos, c: int) -> np.ndarray:
    return sinusoidal_pe_table(np.asarray(pos, dtype=np.float64).reshape(1, 2), c)[0]
