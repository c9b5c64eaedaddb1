"""Instance classification and segmentation metrics.

Classification scores follow the weighted F-score used for nucleus typing:
classification errors weigh 2, detection errors weigh 1.  Dataset-level
scores are computed from pooled counts, never by averaging per-tile scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

W_CLS = 2.0
W_DET = 1.0
MATCH_RADIUS = 12.0


@dataclass
class Matching:
    pairs: list[tuple[int, int]]  # (gt_id, pred_id)
    unmatched_gt: list[int]
    unmatched_pred: list[int]
    radius: float = MATCH_RADIUS

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def match_instances(
    gt_centroids,
    pred_centroids,
    radius: float = MATCH_RADIUS,
    gt_ids: Sequence[int] | None = None,
    pred_ids: Sequence[int] | None = None,
) -> Matching:
    """Greedy one-to-one centroid matching, nearest pairs first, distance <= radius.

    Equal distances are resolved by (gt id, pred id), so the result does not
    depend on the order of the input lists.
    """
    g = np.asarray(gt_centroids, dtype=np.float64).reshape(-1, 2)
    p = np.asarray(pred_centroids, dtype=np.float64).reshape(-1, 2)
    gids = list(range(len(g))) if gt_ids is None else [int(i) for i in gt_ids]
    pids = list(range(len(p))) if pred_ids is None else [int(i) for i in pred_ids]
    pairs: list[tuple[int, int]] = []
    if len(g) and len(p):
        d = cdist(g, p)
        gi, pi = np.nonzero(d <= radius)
        order = np.lexsort((np.array(pids)[pi], np.array(gids)[gi], d[gi, pi]))
        used_g: set[int] = set()
        used_p: set[int] = set()
        for k in order:
            a, b = gi[k], pi[k]
            if a in used_g or b in used_p:
                continue
            used_g.add(a)
            used_p.add(b)
            pairs.append((gids[a], pids[b]))
    matched_g = {a for a, _ in pairs}
    matched_p = {b for _, b in pairs}
    return Matching(
        pairs=sorted(pairs),
        unmatched_gt=sorted(i for i in gids if i not in matched_g),
        unmatched_pred=sorted(i for i in pids if i not in matched_p),
        radius=radius,
    )


@dataclass
class ClassCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0


def class_counts(pairs_gt: Sequence[int], pairs_pred: Sequence[int], q: int) -> ClassCounts:
    """Counts over matched pairs for class ``q``.

    tp: true q predicted q; tn: true non-q predicted correctly;
    fp: true non-q predicted q; fn: true q predicted non-q.
    """
    t = np.asarray(pairs_gt, dtype=np.int64)
    p = np.asarray(pairs_pred, dtype=np.int64)
    return ClassCounts(
        tp=int(np.sum((t == q) & (p == q))),
        tn=int(np.sum((t != q) & (p == t))),
        fp=int(np.sum((t != q) & (p == q))),
        fn=int(np.sum((t == q) & (p != q))),
    )


def fscore_from_counts(cc: ClassCounts, fp_d: int, fn_d: int, n_gt: int, n_pred: int) -> float:
    num = 2.0 * (cc.tp + cc.tn)
    den = num + W_CLS * cc.fp + W_CLS * cc.fn + W_DET * fp_d + W_DET * fn_d
    if den == 0:
        return 1.0 if n_gt == 0 and n_pred == 0 else 0.0
    return num / den


def fscore_class(matching: Matching, gt_classes: Mapping[int, int], pred_classes: Mapping[int, int], q: int) -> float:
    gt = [gt_classes[a] for a, _ in matching.pairs]
    pr = [pred_classes[b] for _, b in matching.pairs]
    n_gt = matching.tp + matching.fn
    n_pred = matching.tp + matching.fp
    return fscore_from_counts(class_counts(gt, pr, q), matching.fp, matching.fn, n_gt, n_pred)


def f1(tp: int, fp: int, fn: int) -> float:
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2.0 * tp / den


def detection_fd(matching: Matching) -> float:
    return f1(matching.tp, matching.fp, matching.fn)


# -- pixel metrics -----------------------------------------------------------

def _plane(m) -> np.ndarray:
    m = np.asarray(m)
    return m[:, :, 0] if m.ndim == 3 else m


@dataclass
class OverlapTable:
    gt_ids: np.ndarray
    pred_ids: np.ndarray
    gt_area: np.ndarray
    pred_area: np.ndarray
    inter: np.ndarray  # (n_gt, n_pred) pixel counts


def overlap_table(gt_map, pred_map) -> OverlapTable:
    g = _plane(gt_map).astype(np.int64).ravel()
    p = _plane(pred_map).astype(np.int64).ravel()
    if g.shape != p.shape:
        raise ValueError(f"instance maps differ in size: {np.shape(gt_map)} vs {np.shape(pred_map)}")
    gids, ginv, garea = np.unique(g, return_inverse=True, return_counts=True)
    pids, pinv, parea = np.unique(p, return_inverse=True, return_counts=True)
    inter = np.zeros((len(gids), len(pids)), dtype=np.int64)
    np.add.at(inter, (ginv, pinv), 1)
    gk = gids > 0
    pk = pids > 0
    return OverlapTable(gids[gk], pids[pk], garea[gk], parea[pk], inter[np.ix_(gk, pk)])


@dataclass
class PQCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def add(self, other: "PQCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum

    def scores(self) -> tuple[float, float, float]:
        if self.tp + self.fp + self.fn == 0:
            return 1.0, 1.0, 1.0
        dq = f1(self.tp, self.fp, self.fn)
        sq = self.iou_sum / self.tp if self.tp else 0.0
        return dq * sq, dq, sq


def pq_counts(gt_map, pred_map) -> PQCounts:
    tab = overlap_table(gt_map, pred_map)
    union = tab.gt_area[:, None] + tab.pred_area[None, :] - tab.inter
    matched = 2 * tab.inter > union  # IoU > 1/2 in exact integer arithmetic
    gi, pi = np.nonzero(matched)
    ious = tab.inter[gi, pi] / union[gi, pi]
    tp = len(gi)
    return PQCounts(tp, len(tab.pred_ids) - tp, len(tab.gt_ids) - tp, float(np.sum(ious)))


def panoptic_quality(gt_map, pred_map) -> tuple[float, float, float]:
    """``(PQ, F_d, SQ)`` with unique matching at IoU > 0.5; PQ is exactly F_d * SQ."""
    return pq_counts(gt_map, pred_map).scores()


@dataclass
class AJICounts:
    inter: int = 0
    union: int = 0
    n_gt: int = 0
    n_pred: int = 0

    def add(self, other: "AJICounts") -> None:
        self.inter += other.inter
        self.union += other.union
        self.n_gt += other.n_gt
        self.n_pred += other.n_pred

    def score(self) -> float:
        if self.n_gt == 0:
            return 1.0 if self.n_pred == 0 else 0.0
        return self.inter / self.union if self.union else 0.0


def aji_counts(gt_map, pred_map) -> AJICounts:
    tab = overlap_table(gt_map, pred_map)
    n_gt, n_pred = len(tab.gt_ids), len(tab.pred_ids)
    out = AJICounts(n_gt=n_gt, n_pred=n_pred)
    used = np.zeros(n_pred, dtype=bool)
    for k in range(n_gt):
        if n_pred == 0 or tab.inter[k].max() == 0:
            out.union += int(tab.gt_area[k])
            continue
        union = tab.gt_area[k] + tab.pred_area - tab.inter[k]
        iou = tab.inter[k] / union
        j = int(np.argmax(iou))  # first maximum = lowest pred id
        out.inter += int(tab.inter[k, j])
        out.union += int(union[j])
        used[j] = True
    out.union += int(tab.pred_area[~used].sum())
    return out


def aji(gt_map, pred_map) -> float:
    """Aggregated Jaccard index; unused predictions add their area to the union."""
    return aji_counts(gt_map, pred_map).score()


# -- report ------------------------------------------------------------------

@dataclass
class ScoreAccumulator:
    """Pools counts across tiles; final quotients are taken once in ``report``."""

    num_classes: int
    counts: list[ClassCounts] = field(default_factory=list)
    tp_d: int = 0
    fp_d: int = 0
    fn_d: int = 0
    pq: PQCounts = field(default_factory=PQCounts)
    aji: AJICounts = field(default_factory=AJICounts)
    has_maps: bool = False

    def __post_init__(self):
        if not self.counts:
            self.counts = [ClassCounts() for _ in range(self.num_classes)]

    def add_tile(
        self,
        gt_centroids: Mapping[int, np.ndarray],
        gt_classes: Mapping[int, int],
        pred_centroids: Mapping[int, np.ndarray],
        pred_classes: Mapping[int, int],
        gt_map=None,
        pred_map=None,
    ) -> Matching:
        gids = sorted(gt_centroids)
        pids = sorted(pred_centroids)
        m = match_instances(
            [gt_centroids[i] for i in gids], [pred_centroids[i] for i in pids], gt_ids=gids, pred_ids=pids
        )
        gt = [gt_classes[a] for a, _ in m.pairs]
        pr = [pred_classes[b] for _, b in m.pairs]
        for q in range(self.num_classes):
            cc = class_counts(gt, pr, q)
            tot = self.counts[q]
            tot.tp += cc.tp
            tot.tn += cc.tn
            tot.fp += cc.fp
            tot.fn += cc.fn
        self.tp_d += m.tp
        self.fp_d += m.fp
        self.fn_d += m.fn
        if gt_map is not None and pred_map is not None:
            self.has_maps = True
            self.pq.add(pq_counts(gt_map, pred_map))
            self.aji.add(aji_counts(gt_map, pred_map))
        return m

    def report(self) -> "ScoreReport":
        n_gt = self.tp_d + self.fn_d
        n_pred = self.tp_d + self.fp_d
        per_class = [fscore_from_counts(c, self.fp_d, self.fn_d, n_gt, n_pred) for c in self.counts]
        pq, dq, sq = self.pq.scores() if self.has_maps else (float("nan"),) * 3
        return ScoreReport(
            per_class=per_class,
            f_avg=float(np.mean(per_class)) if per_class else float("nan"),
            f_d=f1(self.tp_d, self.fp_d, self.fn_d),
            aji=self.aji.score() if self.has_maps else float("nan"),
            pq=pq,
            dq=dq,
            sq=sq,
            counts=[ClassCounts(c.tp, c.tn, c.fp, c.fn) for c in self.counts],
            tp_d=self.tp_d,
            fp_d=self.fp_d,
            fn_d=self.fn_d,
        )


@dataclass
class ScoreReport:
    per_class: list[float]
    f_avg: float
    f_d: float
    aji: float
    pq: float
    dq: float
    sq: float
    counts: list[ClassCounts]
    tp_d: int
    fp_d: int
    fn_d: int

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("F_c", str(q), v) for q, v in enumerate(self.per_class)]
        out += [
            ("F_avg", "", self.f_avg),
            ("F_d", "", self.f_d),
            ("AJI", "", self.aji),
            ("PQ", "", self.pq),
            ("DQ", "", self.dq),
            ("SQ", "", self.sq),
        ]
        return out

    def to_text(self) -> str:
        lines = [f"{'metric':<8}{'class':>6}  value"]
        for metric, cls, v in self.rows():
            lines.append(f"{metric:<8}{cls:>6}  {v:.4f}")
        lines.append(f"detections: TP={self.tp_d} FP={self.fp_d} FN={self.fn_d}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "class", "value"])
            for metric, cls, v in self.rows():
                w.writerow([metric, cls, f"{v:.9g}"])
