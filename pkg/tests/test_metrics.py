import csv

import numpy as np
import pytest

from senc.metrics import (
    ScoreAccumulator,
    aji,
    detection_fd,
    fscore_class,
    match_instances,
    panoptic_quality,
    pq_counts,
)

import oracles


def random_map(rng, size=20, max_blobs=6):
    m = np.zeros((size, size), dtype=np.uint32)
    for _ in range(int(rng.integers(0, max_blobs + 1))):
        r, c = rng.integers(0, size, size=2)
        h, w = rng.integers(1, 8, size=2)
        m[r:r + h, c:c + w] = rng.integers(1, 10)
    return m


def perturbed(rng, gt):
    """A prediction: shifted copy of ``gt`` with relabelled ids plus random extra blobs."""
    shift = rng.integers(-2, 3, size=2)
    pred = np.roll(gt, tuple(shift), axis=(0, 1))
    ids = np.unique(pred)
    relabel = dict(zip(ids.tolist(), [0] + rng.permutation(np.arange(1, 20))[: len(ids) - 1].tolist()))
    pred = np.vectorize(relabel.get)(pred).astype(np.uint32)
    extra = random_map(rng, gt.shape[0], 2)
    return np.where(extra > 0, extra + 20, pred).astype(np.uint32)


def random_points(rng, n, lo=0, hi=40):
    ids = rng.permutation(200)[:n] + 1
    pts = rng.integers(lo, hi, size=(n, 2)).astype(np.float64)  # integers make distance ties likely
    return {int(i): p for i, p in zip(ids, pts)}


# -- matching ------------------------------------------------------------------------

def test_identical_sets_match_perfectly(rng):
    pts = rng.uniform(0, 100, size=(8, 2))
    m = match_instances(pts, pts)
    assert m.pairs == [(i, i) for i in range(8)] and m.fp == 0 and m.fn == 0


def test_radius_boundary():
    far = match_instances([[0.0, 0.0]], [[0.0, 13.0]])
    assert (far.tp, far.fn, far.fp) == (0, 1, 1)
    edge = match_instances([[0.0, 0.0]], [[0.0, 12.0]])
    assert edge.tp == 1
    diag = match_instances([[0.0, 0.0]], [[5.0, 12.0]])  # exactly 13 px away
    assert diag.tp == 0


def test_greedy_matching_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        gt, pred = random_points(rng, 10), random_points(rng, 12)
        m = match_instances(list(gt.values()), list(pred.values()), gt_ids=list(gt), pred_ids=list(pred))
        assert m.pairs == oracles.greedy_match(gt, pred)
        assert len({g for g, _ in m.pairs}) == m.tp == len({p for _, p in m.pairs})


def test_matching_ignores_input_order():
    rng = np.random.default_rng(1)
    gt, pred = random_points(rng, 10), random_points(rng, 12)
    base = match_instances(list(gt.values()), list(pred.values()), gt_ids=list(gt), pred_ids=list(pred))
    for _ in range(5):
        gk = rng.permutation(list(gt))
        pk = rng.permutation(list(pred))
        m = match_instances([gt[k] for k in gk], [pred[k] for k in pk], gt_ids=gk, pred_ids=pk)
        assert m.pairs == base.pairs


# -- classification F-score ---------------------------------------------------------

def test_fscore_agrees_with_oracle_on_200_instances():
    rng = np.random.default_rng(2)
    for _ in range(200):
        gt, pred = random_points(rng, int(rng.integers(0, 10))), random_points(rng, int(rng.integers(0, 10)))
        gcls = {k: int(rng.integers(3)) for k in gt}
        pcls = {k: int(rng.integers(3)) for k in pred}
        m = match_instances(list(gt.values()), list(pred.values()), gt_ids=list(gt), pred_ids=list(pred))
        pairs = oracles.greedy_match(gt, pred)
        for q in range(3):
            want = oracles.fscore(pairs, gcls, pcls, len(gt), len(pred), q)
            assert abs(fscore_class(m, gcls, pcls, q) - want) <= 1e-9
        assert abs(detection_fd(m) - oracles.f1(len(pairs), len(pred) - len(pairs), len(gt) - len(pairs))) <= 1e-9


def test_fscore_perfect():
    pts = [[0.0, 0.0], [30.0, 0.0], [0.0, 30.0]]
    m = match_instances(pts, pts)
    cls = {0: 0, 1: 1, 2: 2}
    assert all(fscore_class(m, cls, cls, q) == 1.0 for q in range(3))


def test_fscore_collapses_without_detection_errors():
    pts = [[0.0, 30.0 * k] for k in range(6)]
    m = match_instances(pts, pts)
    gt = {0: 0, 1: 0, 2: 1, 3: 1, 4: 2, 5: 2}
    pred = {0: 1, 1: 2, 2: 1, 3: 2, 4: 0, 5: 2}  # every class-0 nucleus misclassified
    tp, tn, fp, fn = 0, 2, 1, 2  # tn counts the correct non-q pairs 2 and 5
    assert abs(fscore_class(m, gt, pred, 0) - 2 * (tp + tn) / (2 * (tp + tn) + 2 * fp + 2 * fn)) <= 1e-15


def test_fscore_constructed_case():
    gt_pts = {1: (0, 0), 2: (0, 30), 3: (0, 60), 4: (30, 0), 5: (30, 30), 6: (99, 99)}
    pr_pts = {11: (1, 0), 12: (0, 31), 13: (2, 60), 14: (30, 2), 15: (31, 30), 16: (60, 60)}
    gt_cls = {1: 0, 2: 0, 3: 1, 4: 1, 5: 2, 6: 2}
    pr_cls = {11: 0, 12: 1, 13: 0, 14: 1, 15: 2, 16: 0}  # 2<->3 swapped; 6 missed; 16 spurious
    m = match_instances(list(gt_pts.values()), list(pr_pts.values()), gt_ids=list(gt_pts), pred_ids=list(pr_pts))
    assert (m.tp, m.fp, m.fn) == (5, 1, 1)
    # class 0: tp=1 (1->11), fp=1 (3->13), fn=1 (2->12), tn=2 (4, 5)
    assert abs(fscore_class(m, gt_cls, pr_cls, 0) - 6 / (6 + 2 + 2 + 1 + 1)) <= 1e-12
    for q in range(3):
        want = oracles.fscore(m.pairs, gt_cls, pr_cls, 6, 6, q)
        assert abs(fscore_class(m, gt_cls, pr_cls, q) - want) <= 1e-12


def test_detection_half():
    m = match_instances([[0.0, 0.0], [50.0, 50.0]], [[1.0, 1.0], [90.0, 90.0]])
    assert (m.tp, m.fp, m.fn) == (1, 1, 1)
    assert detection_fd(m) == 0.5


def test_empty_tile_conventions():
    empty = match_instances([], [])
    assert fscore_class(empty, {}, {}, 0) == 1.0 and detection_fd(empty) == 1.0
    only_pred = match_instances([], [[1.0, 1.0]])
    assert fscore_class(only_pred, {}, {0: 1}, 0) == 0.0 and detection_fd(only_pred) == 0.0


def test_fscore_invariant_under_label_permutation():
    rng = np.random.default_rng(3)
    perm = [2, 0, 1]
    for _ in range(50):
        gt, pred = random_points(rng, 8), random_points(rng, 8)
        gcls = {k: int(rng.integers(3)) for k in gt}
        pcls = {k: int(rng.integers(3)) for k in pred}
        m = match_instances(list(gt.values()), list(pred.values()), gt_ids=list(gt), pred_ids=list(pred))
        g2 = {k: perm[v] for k, v in gcls.items()}
        p2 = {k: perm[v] for k, v in pcls.items()}
        for q in range(3):
            assert fscore_class(m, gcls, pcls, q) == fscore_class(m, g2, p2, perm[q])


# -- PQ and AJI ------------------------------------------------------------------------

def test_pq_and_aji_agree_with_pixel_oracles_on_200_instances():
    rng = np.random.default_rng(4)
    for _ in range(200):
        gt = random_map(rng)
        pred = perturbed(rng, gt) if rng.uniform() < 0.8 else random_map(rng)
        got = panoptic_quality(gt, pred)
        want = oracles.pq(gt, pred)
        assert max(abs(a - b) for a, b in zip(got, want)) <= 1e-9
        assert abs(aji(gt, pred) - oracles.aji(gt, pred)) <= 1e-9


def test_identical_maps_score_one(rng):
    gt = random_map(rng)
    gt[0, 0] = 3
    assert panoptic_quality(gt, gt) == (1.0, 1.0, 1.0)
    assert aji(gt, gt) == 1.0


def test_iou_exactly_half_is_unmatched():
    gt = np.zeros((8, 8), dtype=np.uint32)
    gt[2:6, 2:6] = 1
    pred = np.zeros_like(gt)
    pred[2:4, 2:6] = 5  # half of the GT area, IoU = 8/16
    c = pq_counts(gt, pred)
    assert (c.tp, c.fp, c.fn) == (0, 1, 1)
    assert panoptic_quality(gt, pred)[0] == 0.0
    pred[4, 2] = 5  # one more pixel: IoU 9/16 > 1/2
    assert pq_counts(gt, pred).tp == 1


def test_aji_half_overlap_is_one_third():
    gt = np.zeros((10, 12), dtype=np.uint32)
    gt[2:6, 2:6] = 1
    pred = np.zeros_like(gt)
    pred[2:6, 4:8] = 1
    assert abs(aji(gt, pred) - 1 / 3) <= 1e-15


def test_aji_empty_conventions():
    z = np.zeros((4, 4), dtype=np.uint32)
    one = z.copy()
    one[1, 1] = 1
    assert aji(z, z) == 1.0 and aji(z, one) == 0.0
    assert panoptic_quality(z, z) == (1.0, 1.0, 1.0)


def test_pq_is_exactly_fd_times_sq():
    rng = np.random.default_rng(5)
    for _ in range(300):
        gt = random_map(rng)
        pq, dq, sq = panoptic_quality(gt, perturbed(rng, gt))
        assert pq == dq * sq


def test_scores_stay_in_unit_interval():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        gt = random_map(rng, 12, 4)
        pred = perturbed(rng, gt) if rng.uniform() < 0.5 else random_map(rng, 12, 4)
        vals = list(panoptic_quality(gt, pred)) + [aji(gt, pred)]
        g, p = random_points(rng, int(rng.integers(0, 5)), 0, 20), random_points(rng, int(rng.integers(0, 5)), 0, 20)
        m = match_instances(list(g.values()), list(p.values()), gt_ids=list(g), pred_ids=list(p))
        gc, pc = {k: int(rng.integers(2)) for k in g}, {k: int(rng.integers(2)) for k in p}
        vals += [detection_fd(m)] + [fscore_class(m, gc, pc, q) for q in range(2)]
        assert all(0.0 <= v <= 1.0 for v in vals)


# -- pooled report -----------------------------------------------------------------------

def test_report_pools_counts_across_tiles(tmp_path):
    acc = ScoreAccumulator(2)
    tiles = [
        ({1: (0, 0), 2: (0, 40)}, {1: 0, 2: 1}, {7: (1, 1), 8: (0, 41)}, {7: 0, 8: 0}),
        ({1: (5, 5)}, {1: 1}, {}, {}),
    ]
    for g, gc, p, pc in tiles:
        acc.add_tile({k: np.array(v, float) for k, v in g.items()}, gc, {k: np.array(v, float) for k, v in p.items()}, pc)
    rep = acc.report()
    assert (rep.tp_d, rep.fp_d, rep.fn_d) == (2, 0, 1)
    # class 0: tp=1, tn=0, fp=1 (1->0), fn=0; detection fn=1
    assert abs(rep.per_class[0] - 2 / (2 + 2 + 1)) <= 1e-15
    # class 1: tp=0, tn=1 (0->0), fp=0, fn=1
    assert abs(rep.per_class[1] - 2 / (2 + 2 + 1)) <= 1e-15
    assert rep.f_avg == np.mean(rep.per_class)
    assert np.isnan(rep.pq) and np.isnan(rep.aji)
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["metric", "class", "value"]
    assert rows[1][:2] == ["F_c", "0"] and rows[3][:2] == ["F_avg", ""]
    assert "F_avg" in rep.to_text()
