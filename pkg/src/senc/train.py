"""Training, prediction, scoring, gradient checking and ablation runs."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import checkpoint
from .config import RunConfig
from .errors import ConfigError, InputError, TrainingError
from .featmap import read_grid
from .gradcheck import GroupResult, check_params
from .losses import LossConfig, class_weights
from .metrics import ScoreAccumulator, ScoreReport
from .model import PreparedTile, SencModel, param_groups
from .synth import Tile, load_tile, read_manifest
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_NAME = "model.ckpt"
LOG_NAME = "train_log.csv"
LOG_HEADER = ["epoch", "loss_total", "loss_ce", "loss_dice", "loss_focal", "train_Favg", "val_Favg"]

ABLATION_ROWS = (
    ("baseline", dict(use_gnn=False, use_edge_feat=False, use_psl=False)),
    ("+GNN", dict(use_gnn=True, use_edge_feat=False, use_psl=False)),
    ("+EdgeFeat", dict(use_gnn=True, use_edge_feat=True, use_psl=False)),
    ("full", dict(use_gnn=True, use_edge_feat=True, use_psl=True)),
)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.99), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---- data ------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    splits: dict[str, list[str]]

    @classmethod
    def open(cls, root: str | Path) -> "Dataset":
        splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
        for tile_id, split in read_manifest(root):
            splits.setdefault(split, []).append(tile_id)
        return cls(Path(root), splits)

    def tiles(self, split: str) -> list[tuple[str, Tile]]:
        return [(tid, load_tile(self.root, tid)) for tid in self.splits.get(split, [])]


def _prepare(model: SencModel, tiles: Iterable[tuple[str, Tile]]) -> list[tuple[str, PreparedTile]]:
    return [(tid, model.prepare(t.image, t.instance_map, t.labels)) for tid, t in tiles]


def _centroids(tile: PreparedTile) -> dict[int, np.ndarray]:
    return {r.id: r.centroid for r in tile.layout.records}


def score_prepared(
    model: SencModel, prepared: list[tuple[str, PreparedTile]], probs: list[np.ndarray] | None = None
) -> ScoreReport:
    """Classification-only scoring with ground-truth instances."""
    acc = ScoreAccumulator(model.cfg.num_classes)
    for k, (_, tile) in enumerate(prepared):
        p = model.predict_proba(tile) if probs is None else probs[k]
        cents = _centroids(tile)
        gt = dict(zip(tile.ids, tile.labels.tolist()))
        pred = dict(zip(tile.ids, np.argmax(p, axis=1).tolist())) if len(p) else {}
        acc.add_tile(cents, gt, cents, pred)
    return acc.report()


# ---- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: SencModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("nan")
    checkpoint: Path | None = None


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def train(
    cfg: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path | None = None,
    *,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam on the summed objective, one tile per step.

    The checkpoint with the best validation F_avg is kept (the last epoch if
    there is no validation split).
    """
    ds = Dataset.open(data_dir)
    model = SencModel(cfg)
    train_set = _prepare(model, ds.tiles("train"))
    if not train_set:
        raise InputError(f"{data_dir}: manifest has no train tiles")
    val_set = _prepare(model, ds.tiles("val"))
    all_labels = np.concatenate([t.labels for _, t in train_set])
    if np.any(all_labels < 0) or np.any(all_labels >= cfg.num_classes):
        raise InputError("training labels must cover every nucleus and lie in [0, Q)")
    loss_cfg = LossConfig(gamma=cfg.focal_gamma, tau=class_weights(all_labels, cfg.num_classes))
    opt = Adam(model.params, cfg.lr, cfg.adam_betas)
    rng = np.random.default_rng(cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / LOG_NAME, "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    result = TrainResult(model)
    best = -np.inf
    best_arrays = model.arrays()
    try:
        for epoch in range(1, cfg.epochs + 1):
            sums = np.zeros(4)
            train_probs: list[np.ndarray] = []
            order = rng.permutation(len(train_set))
            for step, k in enumerate(order):
                tile = train_set[k][1]
                opt.zero_grad()
                parts, t = model.loss(tile, loss_cfg)
                total = parts.total.item()
                if not np.isfinite(total):
                    raise TrainingError(f"non-finite loss {total} at epoch {epoch} step {step} (tile {train_set[k][0]})")
                parts.total.backward()
                opt.step()
                sums += (total, parts.ce, parts.dice, parts.focal)
                train_probs.append(np.zeros((0, cfg.num_classes)) if t is None else t.data)
            # scores from the forward passes taken during the epoch
            inv = np.argsort(order)
            train_f = score_prepared(model, train_set, [train_probs[i] for i in inv]).f_avg
            val_f = score_prepared(model, val_set).f_avg if val_set else float("nan")
            mean = sums / len(train_set)
            row = dict(zip(LOG_HEADER, [epoch, *mean.tolist(), train_f, val_f]))
            result.history.append(row)
            if log_fh is not None:
                writer.writerow([epoch] + [_fmt(v) for v in row.values()][1:])
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(row)
            score = val_f if val_set else float(epoch)
            if score > best:
                best, result.best_epoch, result.best_val = score, epoch, val_f
                best_arrays = model.arrays()
    finally:
        if log_fh is not None:
            log_fh.close()
    result.model = SencModel.from_arrays(cfg, best_arrays)
    if out is not None:
        result.checkpoint = out / CKPT_NAME
        checkpoint.save(result.checkpoint, best_arrays, cfg.to_text())
    return result


# ---- prediction and scoring -------------------------------------------------------


def load_model(ckpt: str | Path, expected: RunConfig | None = None) -> SencModel:
    arrays, meta = checkpoint.load(ckpt)
    cfg = RunConfig.from_text(meta)
    if expected is not None and expected != cfg:
        raise ConfigError("checkpoint config does not match:\n  " + "\n  ".join(cfg.diff(expected)))
    model = SencModel(cfg)
    missing = set(model.params) ^ set(arrays)
    if missing:
        raise ConfigError(f"checkpoint parameters do not match the config: {sorted(missing)}")
    for k, p in model.params.items():
        if p.data.shape != arrays[k].shape:
            raise ConfigError(f"parameter {k}: checkpoint shape {arrays[k].shape} vs {p.data.shape}")
    return SencModel.from_arrays(cfg, arrays)


def write_predictions(path: str | Path, ids: list[int], probs: np.ndarray, num_classes: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nucleus_id", "pred_class"] + [f"prob_{q}" for q in range(num_classes)])
        for nid, p in zip(ids, probs):
            w.writerow([nid, int(np.argmax(p))] + [f"{v:.9g}" for v in p])


def read_predictions(path: str | Path) -> dict[int, int]:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if not header or header[:2] != ["nucleus_id", "pred_class"]:
            raise InputError(f"{path}: not a prediction file")
        return {int(r[0]): int(r[1]) for r in rows}


def predict(
    ckpt: str | Path,
    data_dir: str | Path,
    out_dir: str | Path,
    *,
    expected: RunConfig | None = None,
    split: str | None = None,
    inst_dir: str | Path | None = None,
) -> list[Path]:
    """Write ``{tile}.pred.csv`` per tile.

    With ``inst_dir`` the nuclei come from external ``{tile}.inst.grid`` maps,
    which are copied next to the predictions for instance-level scoring.
    """
    model = load_model(ckpt, expected)
    ds = Dataset.open(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [t for s in ("train", "val", "test") for t in ds.splits.get(s, [])] if split is None else ds.splits.get(split, [])
    written = []
    for tid in ids:
        tile = load_tile(data_dir, tid)
        inst = tile.instance_map
        if inst_dir is not None:
            src = Path(inst_dir) / f"{tid}.inst.grid"
            inst = read_grid(src).values[:, :, 0]
            (out / src.name).write_bytes(src.read_bytes())
        prepared = model.prepare(tile.image, inst, None)
        probs = model.predict_proba(prepared)
        path = out / f"{tid}.pred.csv"
        write_predictions(path, prepared.ids, probs, model.cfg.num_classes)
        written.append(path)
    return written


def _map_centroids(inst: np.ndarray) -> dict[int, np.ndarray]:
    ids = np.unique(inst)
    out = {}
    for nid in ids[ids > 0]:
        rows, cols = np.nonzero(inst == nid)
        out[int(nid)] = np.array([rows.mean(), cols.mean()])
    return out


def score(pred_dir: str | Path, gt_dir: str | Path, num_classes: int = 3, split: str | None = None) -> ScoreReport:
    """Pooled scores over every tile that has a prediction file.

    Tiles whose prediction directory also has ``{tile}.inst.grid`` are scored
    against those predicted instances; otherwise the ground-truth instances
    are reused and only classification can differ.
    """
    pred_dir = Path(pred_dir)
    ds = Dataset.open(gt_dir)
    tids = [t for s in ("train", "val", "test") for t in ds.splits.get(s, [])] if split is None else ds.splits.get(split, [])
    acc = ScoreAccumulator(num_classes)
    seen = 0
    for tid in tids:
        pred_csv = pred_dir / f"{tid}.pred.csv"
        if not pred_csv.exists():
            continue
        seen += 1
        tile = load_tile(gt_dir, tid)
        gt_map = tile.instance_map
        pred_inst = pred_dir / f"{tid}.inst.grid"
        pred_map = read_grid(pred_inst).values[:, :, 0] if pred_inst.exists() else gt_map
        gt_c = _map_centroids(gt_map)
        pred_c = gt_c if pred_map is gt_map else _map_centroids(pred_map)
        pred_cls = read_predictions(pred_csv)
        unknown = set(pred_cls) ^ set(pred_c)
        if unknown:
            raise InputError(f"{pred_csv}: ids {sorted(unknown)[:5]} do not match the instance map")
        acc.add_tile(gt_c, tile.labels, pred_c, pred_cls, gt_map, pred_map)
    if not seen:
        raise InputError(f"no prediction files in {pred_dir} for the selected tiles")
    return acc.report()


# ---- gradient check ------------------------------------------------------------


def gradcheck_tile(seed: int, size: int = 32) -> Tile:
    """Five nuclei of all three shapes on a noisy background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    inst = np.zeros((size, size), dtype=np.uint32)
    q = size / 4
    centres = [(q, q), (q, 3 * q), (3 * q, q), (3 * q, 3 * q), (2 * q, 2 * q)]
    labels = {}
    for i, (cy, cx) in enumerate(centres):
        cy, cx = cy + rng.uniform(-1, 1), cx + rng.uniform(-1, 1)
        theta = np.arctan2(yy - cy, xx - cx)
        r = 3.5 * (1 + (0.3 * np.cos(5 * theta) if i % 3 == 1 else 0.0))
        inst[np.hypot(yy - cy, xx - cx) <= r] = i + 1
        labels[i + 1] = i % 3
    image = rng.uniform(0, 1, (size, size, 3)) + (inst > 0)[..., None] * -0.5
    return Tile(image, inst, labels)


def gradcheck(
    cfg: RunConfig,
    seed: int = 0,
    *,
    tol: float = 1e-4,
    per_param: int = 4,
    corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> list[GroupResult]:
    tile = gradcheck_tile(seed)
    model = SencModel(cfg, None)
    prepared = model.prepare(tile.image, tile.instance_map, tile.labels)
    loss_cfg = LossConfig(gamma=cfg.focal_gamma, tau=class_weights(prepared.labels, cfg.num_classes))
    return check_params(
        lambda: model.loss(prepared, loss_cfg)[0].total,
        model.params,
        param_groups(model.params),
        tol=tol,
        per_param=per_param,
        seed=seed,
        corrupt=corrupt,
    )


# ---- ablation -----------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    scores: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))


def evaluate(model: SencModel, data_dir: str | Path, split: str = "test") -> ScoreReport:
    return score_prepared(model, _prepare(model, Dataset.open(data_dir).tiles(split)))


def ablate(cfg: RunConfig, data_dir: str | Path, seeds: Iterable[int] = (0, 1, 2), out_dir=None, split: str = "test") -> list[AblationRow]:
    """Test F_avg of each ablation row, one training run per row and seed."""
    seeds = list(seeds)
    rows = []
    for name, flags in ABLATION_ROWS:
        scores = []
        for s in seeds:
            t0 = time.time()
            res = train(cfg.with_overrides(seed=int(s), **flags), data_dir)
            scores.append(evaluate(res.model, data_dir, split).f_avg)
            log.info("%s seed %d: F_avg %.4f (%.0fs)", name, s, scores[-1], time.time() - t0)
        rows.append(AblationRow(name, scores))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "mean_Favg"] + [f"seed_{s}" for s in seeds])
            for r in rows:
                w.writerow([r.name, _fmt(r.mean)] + [_fmt(v) for v in r.scores])
    return rows
