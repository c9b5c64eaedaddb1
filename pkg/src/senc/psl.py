"""Polygon structure learning: ray-sampled contours and their RNN encoding.

Rays leave the centroid at angles ``i * 2*pi/n``, measured clockwise from
image "up" (decreasing row).  The mask boundary is the 0.5 iso-line of the
bilinearly interpolated binary mask, which keeps sub-pixel estimates smooth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ConfigError, InputError
from .featmap import sinusoidal_pe, sinusoidal_pe_table
from .tensor import Tensor

CENTROID_OUTSIDE = 1
MULTI_CROSSING = 2
NO_CROSSING = 4

STEP = 0.25
BISECT_ITERS = 10


@dataclass
class ContourSample:
    centroid: np.ndarray  # (2,) row, col
    points: np.ndarray  # (n, 2) in ray order
    gammas: np.ndarray  # (n,)
    lpes: np.ndarray  # (n, c)
    bbox: tuple[float, float, float, float]  # top, left, bottom, right (pixel edges)
    quality: int = 0
    centroid_lpe: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.gammas)

    @property
    def angles(self) -> np.ndarray:
        return ray_angles(self.n)

    @property
    def angles_deg(self) -> np.ndarray:
        return ray_angles_deg(self.n)


def ray_angles_deg(n: int) -> np.ndarray:
    """Ray angles in degrees; built from ``360 / n`` so e.g. n=18 gives exact 20 degree steps."""
    if n < 1:
        raise ConfigError("number of rays must be positive")
    return np.arange(n) * (360.0 / n)


def ray_angles(n: int) -> np.ndarray:
    return np.radians(ray_angles_deg(n))


def ray_directions(n: int) -> np.ndarray:
    a = ray_angles(n)
    return np.stack([-np.cos(a), np.sin(a)], axis=1)


def mask_bbox(rows: np.ndarray, cols: np.ndarray) -> tuple[float, float, float, float]:
    """Bounding box through the outer pixel edges of a set of pixels."""
    return (rows.min() - 0.5, cols.min() - 0.5, rows.max() + 0.5, cols.max() + 0.5)


def local_pe(point, bbox, c: int) -> np.ndarray:
    """Encoding of ``point`` relative to the bottom-left corner of ``bbox``.

    Local axes point up and right, so coordinates inside the box are >= 0.
    """
    top, left, bottom, right = bbox
    return sinusoidal_pe((bottom - point[0], point[1] - left), c)


def _local_pe_table(points: np.ndarray, bbox, c: int) -> np.ndarray:
    top, left, bottom, right = bbox
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return sinusoidal_pe_table(np.stack([bottom - pts[:, 0], pts[:, 1] - left], axis=1), c)


def extract_contour_sample(mask: np.ndarray, n: int, lpe_dim: int = 64) -> ContourSample:
    """Sample ``n`` contour points of a single binary nucleus mask.

    Each ray is stepped outward in 0.25 px increments; the farthest
    inside-to-outside transition is refined by 10 bisection steps.
    """
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[:, :, 0]
    m = m.astype(bool)
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        raise InputError("empty nucleus mask")
    centroid = np.array([rows.mean(), cols.mean()])
    bbox = mask_bbox(rows, cols)

    # crop with a zero border so interpolation outside the mask is well defined
    r0, c0 = rows.min() - 2, cols.min() - 2
    crop = np.zeros((rows.max() - r0 + 3, cols.max() - c0 + 3))
    crop[rows - r0, cols - c0] = 1.0
    origin = np.array([r0, c0], dtype=np.float64)

    def inside(pts: np.ndarray) -> np.ndarray:
        local = (pts - origin).reshape(-1, 2).T
        vals = ndimage.map_coordinates(crop, local, order=1, mode="constant", cval=0.0)
        return (vals >= 0.5).reshape(pts.shape[:-1])

    dirs = ray_directions(n)
    reach = np.hypot(crop.shape[0], crop.shape[1]) + 1.0
    ts = np.arange(0.0, reach + STEP, STEP)
    flags = inside(centroid + ts[None, :, None] * dirs[:, None, :])

    quality = 0 if flags[0, 0] else CENTROID_OUTSIDE
    exits = flags[:, :-1] & ~flags[:, 1:]
    n_exits = exits.sum(axis=1)
    if np.any(n_exits > 1):
        quality |= MULTI_CROSSING
    last = np.where(n_exits > 0, exits.shape[1] - 1 - np.argmax(exits[:, ::-1], axis=1), -1)
    hit = last >= 0
    if not np.all(hit):
        quality |= NO_CROSSING
    lo = np.where(hit, ts[np.maximum(last, 0)], 0.0)
    hi = np.where(hit, lo + STEP, 0.0)
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        ok = inside(centroid + mid[:, None] * dirs)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    t = np.where(hit, 0.5 * (lo + hi), 0.0)
    points = centroid + t[:, None] * dirs
    gammas = np.hypot(points[:, 0] - centroid[0], points[:, 1] - centroid[1])
    return ContourSample(
        centroid=centroid,
        points=points,
        gammas=gammas,
        lpes=_local_pe_table(points, bbox, lpe_dim),
        bbox=bbox,
        quality=quality,
        centroid_lpe=_local_pe_table(centroid, bbox, lpe_dim)[0],
    )


def sequence_features(sample: ContourSample) -> np.ndarray:
    """RNN input ``(n+1, 2 + c)``: rows ``(i, gamma_i, LPE_i)``, centroid first with gamma 0."""
    n = sample.n
    head = np.concatenate([[0.0, 0.0], sample.centroid_lpe])
    body = np.concatenate([np.arange(1, n + 1)[:, None], sample.gammas[:, None], sample.lpes], axis=1)
    return np.vstack([head, body])


# -- RNN -----------------------------------------------------------------------

def init_rnn(rng: np.random.Generator, in_dim: int, hidden: int, layers: int, out_dim: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for layer in range(1, layers + 1):
        fan_in = in_dim if layer == 1 else hidden
        b = 1.0 / np.sqrt(fan_in)
        params[f"rnn.l{layer}.wh"] = Tensor(rng.uniform(-b, b, (fan_in, hidden)), requires_grad=True)
        b = 1.0 / np.sqrt(hidden)
        params[f"rnn.l{layer}.ws"] = Tensor(rng.uniform(-b, b, (hidden, hidden)), requires_grad=True)
    b = 1.0 / np.sqrt(hidden)
    params["rnn.wz"] = Tensor(rng.uniform(-b, b, (hidden, out_dim)), requires_grad=True)
    return params


def rnn_layers(params: dict[str, Tensor]) -> int:
    return sum(1 for k in params if k.startswith("rnn.l") and k.endswith(".ws"))


def rnn_encode_batch(seqs: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Encode ``(N, n+1, D)`` sequences to shape features ``(N, c)``.

    Layer ``l`` computes ``h_i = relu(h_{i-1} @ ws + h_i^{l-1} @ wh)``; the
    recurrent term is absent at ``i = 0``.  The output is ``h_n^M @ wz``.
    """
    seqs = np.asarray(seqs, dtype=np.float64)
    n_seq, length, dim = seqs.shape
    layers = rnn_layers(params)
    if params["rnn.l1.wh"].shape[0] != dim:
        raise ConfigError(f"sequence width {dim} does not match RNN input width {params['rnn.l1.wh'].shape[0]}")
    x = Tensor(seqs.transpose(1, 0, 2).reshape(length * n_seq, dim))
    h = None
    for layer in range(1, layers + 1):
        proj = T.matmul(x, params[f"rnn.l{layer}.wh"])
        ws = params[f"rnn.l{layer}.ws"]
        h = None
        states = []
        for i in range(length):
            step = T.index(proj, slice(i * n_seq, (i + 1) * n_seq))
            h = T.relu(step if h is None else T.add(T.matmul(h, ws), step))
            states.append(h)
        if layer < layers:
            x = T.concat(states, axis=0)
    return T.matmul(h, params["rnn.wz"])


def rnn_encode(sample: ContourSample, params: dict[str, Tensor]) -> Tensor:
    return rnn_encode_batch(sequence_features(sample)[None], params)


def write_contour_csv(path: str | Path, samples: Iterable[tuple[int, ContourSample]]) -> None:
    """Debug export, one row per contour point: ``id,i,angle_deg,gamma,px,py`` (px = col, py = row)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "i", "angle_deg", "gamma", "px", "py"])
        for nid, s in samples:
            for i, (ang, g, p) in enumerate(zip(s.angles_deg, s.gammas, s.points)):
                w.writerow([nid, i + 1, f"{ang:.6g}", f"{g:.9g}", f"{p[1]:.9g}", f"{p[0]:.9g}"])
