"""Synthetic tiles with three nucleus classes that differ by one mechanism each.

* class 0: smooth ellipse, placed in isolation
* class 1: star polygon with the same area and stain, placed in isolation
* class 2: ellipse drawn like class 0, placed in a compact cluster (every
  member near at least two others) on a striped background patch

The image is the blurred, noisy stain of each nucleus's smooth envelope, so
the star notches survive only in the instance map.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, InputError
from .featmap import Grid2D, read_grid, write_grid

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class SynthConfig:
    size: int = 96
    nuclei: tuple[int, int] = (6, 8)  # isolated class 0/1 nuclei per tile
    clusters: tuple[int, int] = (1, 1)
    cluster_size: tuple[int, int] = (4, 5)
    num_classes: int = 3
    seed: int = 0
    radius: tuple[float, float] = (3.5, 6.0)  # equivalent-disc radius
    aspect: tuple[float, float] = (1.0, 1.3)
    star_lobes: int = 6
    star_amplitude: float = 0.25  # notch depth relative to the envelope radius
    cluster_spacing: tuple[float, float] = (18.0, 22.0)  # centroid distance inside a cluster
    isolation: float = 23.0  # min centroid distance between isolated nuclei
    cluster_isolation: float = 25.0  # min centroid distance from an isolated nucleus to a cluster
    stripe_band: float = 4.5  # half-width of the striped band along intra-cluster segments
    stripe_period: float = 10.0
    stripe_contrast: float = 0.35
    stripe_halo: float = 1.5  # plain background kept around every cluster nucleus
    blur_sigma: float = 1.5
    noise: float = 0.05

    def __post_init__(self):
        if self.size % 4 or self.size < 16:
            raise ConfigError("tile size must be a multiple of 4 and at least 16")
        if self.num_classes != 3:
            raise ConfigError("the generator defines exactly 3 classes")


@dataclass
class Tile:
    image: np.ndarray  # (H, W, 3) float64
    instance_map: np.ndarray  # (H, W) uint32, ids 1..N
    labels: dict[int, int]


def notch_profile(theta: np.ndarray, lobes: int, amp: float, phase: float) -> np.ndarray:
    """Relative contour radius ``1 - amp * max(0, cos(lobes * (theta - phase)))``."""
    return 1.0 - amp * np.maximum(0.0, np.cos(lobes * (theta - phase)))


def notch_area_factor(amp: float) -> float:
    """Area of the notched outline relative to its smooth envelope."""
    # mean of max(0, cos) is 1/pi and of its square 1/4
    return 1.0 - 2.0 * amp / np.pi + amp * amp / 4.0


def _shape(yy, xx, cy, cx, kind: str, rng, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(mask, stain)``: the annotated outline and the smooth envelope that absorbs stain.

    Both classes share the ellipse distribution of the envelope.  A star keeps
    the area of an ellipse drawn with the same radius by enlarging its envelope.
    """
    r_eq = rng.uniform(*cfg.radius)
    ar = rng.uniform(*cfg.aspect)
    phi = rng.uniform(0, np.pi)
    if kind == "star":
        r_eq = r_eq / np.sqrt(notch_area_factor(cfg.star_amplitude))
    a, b = r_eq * np.sqrt(ar), r_eq / np.sqrt(ar)
    dy, dx = yy - cy, xx - cx
    u = (dy * np.cos(phi) + dx * np.sin(phi)) / a
    v = (-dy * np.sin(phi) + dx * np.cos(phi)) / b
    rho = np.hypot(u, v)
    stain = rho <= 1.0
    if kind != "star":
        return stain, stain
    limit = notch_profile(np.arctan2(v, u), cfg.star_lobes, cfg.star_amplitude, rng.uniform(0, 2 * np.pi))
    return rho <= limit, stain


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, k = ndimage.label(mask)  # 4-connectivity
    if k <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, k + 1))
    return lab == (1 + int(np.argmax(sizes)))


class _Canvas:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng
        s = cfg.size
        self.yy, self.xx = np.mgrid[:s, :s].astype(np.float64)
        self.inst = np.zeros((s, s), dtype=np.uint32)
        self.stain = np.zeros((s, s), dtype=bool)
        self.centres: list[tuple[float, float]] = []
        self.classes: list[int] = []
        self.stripes = np.zeros((s, s), dtype=bool)
        self.clustered: list[tuple[float, float]] = []
        self.attempts = 0

    def _try_place(self, cy, cx, kind, cls, min_dist) -> bool:
        if self.centres:
            d = np.hypot(*(np.array(self.centres) - (cy, cx)).T)
            if d.min() < min_dist:
                return False
        m, stain = _shape(self.yy, self.xx, cy, cx, kind, self.rng, self.cfg)
        # one pixel gap keeps neighbours from touching
        if not m.any() or (ndimage.binary_dilation(stain) & self.stain).any():
            return False
        m = _largest_component(m)
        self.inst[m] = len(self.centres) + 1
        self.stain |= stain
        self.centres.append((cy, cx))
        self.classes.append(cls)
        return True

    def place_cluster(self, count: int) -> int:
        cfg, rng = self.cfg, self.rng
        s = cfg.size
        margin = cfg.radius[1] + 1
        for _ in range(MAX_ATTEMPTS):
            self.attempts += 1
            cy, cx = rng.uniform(margin, s - margin, 2)
            if self.centres and np.hypot(*(np.array(self.centres) - (cy, cx)).T).min() < cfg.isolation:
                continue
            members = [(cy, cx)]
            for _ in range(200 * count):
                if len(members) == count:
                    break
                by, bx = members[rng.integers(len(members))]
                ang = rng.uniform(0, 2 * np.pi)
                d = rng.uniform(*cfg.cluster_spacing)
                py, px = by + d * np.sin(ang), bx + d * np.cos(ang)
                if not (margin <= py <= s - margin and margin <= px <= s - margin):
                    continue
                dm = np.hypot(*(np.array(members) - (py, px)).T)
                # every member after the second touches two others, so the cluster stays compact
                if dm.min() < cfg.cluster_spacing[0] or np.sum(dm <= cfg.cluster_spacing[1]) < min(2, len(members)):
                    continue
                if self.centres and np.hypot(*(np.array(self.centres) - (py, px)).T).min() < cfg.isolation:
                    continue
                members.append((py, px))
            if len(members) < count:
                continue
            start = len(self.centres)
            saved = self.stain.copy()
            for py, px in members:
                if not self._try_place(py, px, "ellipse", 2, cfg.cluster_spacing[0]):
                    break
            else:
                self._paint_stripes(members)
                self.clustered.extend(members)
                return count
            # roll back a partially placed cluster
            for k in range(start, len(self.centres)):
                self.inst[self.inst == k + 1] = 0
            self.stain = saved
            del self.centres[start:], self.classes[start:]
        return 0

    def _paint_stripes(self, members):
        pts = np.array(members)
        reach = self.cfg.cluster_spacing[1] * 1.05
        p = np.stack([self.yy, self.xx], axis=-1)
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                a, b = pts[i], pts[j]
                ab = b - a
                if np.hypot(*ab) > reach:
                    continue
                t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
                d = np.hypot(*(p - a - t[..., None] * ab).transpose(2, 0, 1))
                self.stripes |= d <= self.cfg.stripe_band

    def place_isolated(self, cls: int) -> bool:
        cfg, rng = self.cfg, self.rng
        margin = cfg.radius[1] + 1
        kind = "star" if cls == 1 else "ellipse"
        for _ in range(MAX_ATTEMPTS):
            self.attempts += 1
            cy, cx = rng.uniform(margin, cfg.size - margin, 2)
            if self.clustered and np.hypot(*(np.array(self.clustered) - (cy, cx)).T).min() < cfg.cluster_isolation:
                continue
            if self._try_place(cy, cx, kind, cls, cfg.isolation):
                return True
        return False

    def render(self) -> np.ndarray:
        cfg, rng = self.cfg, self.rng
        fg = self.stain.astype(np.float64)
        halo = ndimage.distance_transform_edt(~self.stain) > cfg.stripe_halo
        ang = rng.uniform(0, np.pi)
        wave = np.sin(2 * np.pi * (self.yy * np.cos(ang) + self.xx * np.sin(ang)) / cfg.stripe_period)
        stripe = cfg.stripe_contrast * wave * (self.stripes & halo)
        # stain: nuclei dark in all channels, background pale pink
        base = np.array([0.90, 0.75, 0.85])
        nuc = np.array([0.35, 0.20, 0.50])
        img = base[None, None, :] + fg[..., None] * (nuc - base)[None, None, :]
        img = img + stripe[..., None] * np.array([0.6, 1.0, 0.6])
        img = ndimage.gaussian_filter(img, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0), mode="nearest")
        img = img + rng.normal(0.0, cfg.noise, img.shape)
        return img


def generate_tile(cfg: SynthConfig, seed: int) -> Tile:
    """One tile; the layout is a pure function of ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    cv = _Canvas(cfg, rng)
    for _ in range(int(rng.integers(cfg.clusters[0], cfg.clusters[1] + 1))):
        cv.place_cluster(int(rng.integers(cfg.cluster_size[0], cfg.cluster_size[1] + 1)))
    n_iso = int(rng.integers(cfg.nuclei[0], cfg.nuclei[1] + 1))
    # classes 0 and 1 alternate from a random start so neither is favoured
    wanted = rng.permutation((np.arange(n_iso) + rng.integers(2)) % 2)
    placed = sum(cv.place_isolated(int(c)) for c in wanted)
    if placed < n_iso:
        log.warning("tile seed %d: placed %d of %d isolated nuclei", seed, placed, n_iso)
    image = cv.render()
    labels = {i + 1: c for i, c in enumerate(cv.classes)}
    return Tile(image, cv.inst, labels)


def tile_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def split_assignments(n_tiles: int, seed: int, fractions=(0.7, 0.1, 0.2)) -> list[str]:
    """Train/val/test assignment for every tile in a seeded order."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_val = int(round(n_tiles * fractions[1]))
    n_test = int(round(n_tiles * fractions[2]))
    order = np.random.default_rng(seed).permutation(n_tiles)
    out = ["train"] * n_tiles
    for k in order[:n_test]:
        out[k] = "test"
    for k in order[n_test : n_test + n_val]:
        out[k] = "val"
    return out


# ---- on-disk layout ------------------------------------------------------


def tile_paths(root: str | Path, tile_id: int | str) -> tuple[Path, Path, Path]:
    t = Path(root) / "tiles"
    return t / f"{tile_id}.image.grid", t / f"{tile_id}.inst.grid", t / f"{tile_id}.labels.csv"


def write_labels(path: str | Path, labels: dict[int, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class"])
        for nid in sorted(labels):
            w.writerow([nid, labels[nid]])


def read_labels(path: str | Path) -> dict[int, int]:
    out: dict[int, int] = {}
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["id", "class"]:
            raise InputError(f"{path}: expected header id,class, got {header}")
        for lineno, row in enumerate(rows, start=2):
            try:
                out[int(row[0])] = int(row[1])
            except (ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: bad label row {row}") from None
    return out


def save_tile(root: str | Path, tile_id: int | str, tile: Tile) -> None:
    img_p, inst_p, lab_p = tile_paths(root, tile_id)
    img_p.parent.mkdir(parents=True, exist_ok=True)
    write_grid(img_p, Grid2D(np.asarray(tile.image, dtype=np.float64)))
    write_grid(inst_p, Grid2D(np.asarray(tile.instance_map, dtype=np.uint32)))
    write_labels(lab_p, tile.labels)


def load_tile(root: str | Path, tile_id: int | str) -> Tile:
    img_p, inst_p, lab_p = tile_paths(root, tile_id)
    image = read_grid(img_p).values
    inst = read_grid(inst_p).values
    if inst.dtype.kind != "u":
        raise FormatError(f"{inst_p}: instance map must be u32", 4)
    labels = read_labels(lab_p) if lab_p.exists() else {}
    return Tile(image, inst[:, :, 0], labels)


def write_manifest(root: str | Path, splits: list[str]) -> None:
    with open(Path(root) / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tile", "split"])
        for i, s in enumerate(splits):
            w.writerow([i, s])


def read_manifest(root: str | Path) -> list[tuple[str, str]]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise InputError(f"no manifest.csv in {root}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["tile", "split"]:
        raise InputError(f"{path}: expected header tile,split")
    return [(r[0], r[1]) for r in rows[1:]]


def synthesize(cfg: SynthConfig, out_dir: str | Path, n_tiles: int, fractions=(0.7, 0.1, 0.2)) -> list[str]:
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    for i in range(n_tiles):
        save_tile(out, i, generate_tile(cfg, tile_seed(cfg.seed, i)))
    splits = split_assignments(n_tiles, cfg.seed, fractions)
    write_manifest(out, splits)
    return splits
