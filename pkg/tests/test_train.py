import csv
import logging

import numpy as np
import pytest

from senc import checkpoint
from senc.config import RunConfig
from senc.errors import ConfigError, InputError
from senc.featmap import write_grid
from senc.metrics import ScoreAccumulator
from senc.model import SencModel, param_groups
from senc.synth import SynthConfig, Tile, load_tile, read_manifest, save_tile, synthesize, write_labels, write_manifest
from senc.train import (
    ABLATION_ROWS,
    LOG_HEADER,
    Adam,
    ablate,
    evaluate,
    gradcheck,
    load_model,
    predict,
    read_predictions,
    score,
    train,
    write_predictions,
)
from senc.tensor import Tensor

import oracles

SMALL = RunConfig(c=16, rnn_hidden=16, gnn_hidden=16, epochs=1)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    logging.disable(logging.WARNING)
    synthesize(SynthConfig(seed=1, size=64), root, 10)
    logging.disable(logging.NOTSET)
    return root


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = train(SMALL.with_overrides(epochs=2), data, out)
    return res, out


def test_adam_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1, betas=(0.9, 0.99))
    g = np.array([0.5, -1.0])
    m = v = np.zeros(2)
    x = p.data.copy()
    for t in range(1, 4):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-15)


def test_one_epoch_on_ten_tiles(trained):
    res, out = trained
    rows = list(csv.reader(open(out / "train_log.csv")))
    assert rows[0] == LOG_HEADER and len(rows) == 3
    assert all(np.isfinite(float(v)) for v in rows[1][1:6])
    assert (out / "model.ckpt").exists() and res.checkpoint == out / "model.ckpt"
    assert 1 <= res.best_epoch <= 2


def test_training_is_bitwise_reproducible(data, trained, tmp_path):
    _, out = trained
    train(SMALL.with_overrides(epochs=2), data, tmp_path)
    assert (tmp_path / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()
    assert (tmp_path / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()
    train(SMALL.with_overrides(epochs=2, seed=5), data, tmp_path / "other")
    assert (tmp_path / "other" / "model.ckpt").read_bytes() != (out / "model.ckpt").read_bytes()


def test_checkpoint_embeds_config(trained):
    _, out = trained
    arrays, meta = checkpoint.load(out / "model.ckpt")
    assert RunConfig.from_text(meta) == SMALL.with_overrides(epochs=2)
    assert load_model(out / "model.ckpt").cfg == SMALL.with_overrides(epochs=2)


def test_loss_decreases_over_20_epochs(data):
    res = train(SMALL.with_overrides(epochs=20, lr=1e-3), data)
    assert res.history[19]["loss_total"] < res.history[0]["loss_total"]


def test_training_without_train_tiles_is_refused(tmp_path):
    load_tile_from_synth(tmp_path)
    write_manifest(tmp_path, ["test"])
    with pytest.raises(InputError):
        train(SMALL, tmp_path)


def load_tile_from_synth(root):
    logging.disable(logging.WARNING)
    synthesize(SynthConfig(seed=2, size=64), root, 1, fractions=(0.0, 0.0, 1.0))
    logging.disable(logging.NOTSET)
    return load_tile(root, 0)


# -- predict -------------------------------------------------------------------------

def test_predict_writes_stochastic_rows_and_is_repeatable(data, trained, tmp_path):
    _, out = trained
    paths = predict(out / "model.ckpt", data, tmp_path / "a", split="test")
    again = predict(out / "model.ckpt", data, tmp_path / "b", split="test")
    assert len(paths) == 2
    for a, b in zip(paths, again):
        assert a.read_bytes() == b.read_bytes()
        rows = list(csv.reader(open(a)))
        assert rows[0] == ["nucleus_id", "pred_class", "prob_0", "prob_1", "prob_2"]
        tile = load_tile(data, a.name.split(".")[0])
        assert [int(r[0]) for r in rows[1:]] == sorted(tile.labels)
        probs = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
        assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-8)
        assert [int(r[1]) for r in rows[1:]] == probs.argmax(axis=1).tolist()


def test_predict_refuses_mismatched_config(data, trained, tmp_path):
    _, out = trained
    with pytest.raises(ConfigError, match="K: 4 != 6"):
        predict(out / "model.ckpt", data, tmp_path, expected=SMALL.with_overrides(epochs=2, K=6))


def test_empty_tile_gives_header_only_csv(trained, tmp_path):
    _, out = trained
    save_tile(tmp_path, 0, Tile(np.zeros((64, 64, 3)), np.zeros((64, 64), dtype=np.uint32), {}))
    write_manifest(tmp_path, ["test"])
    (path,) = predict(out / "model.ckpt", tmp_path, tmp_path / "pred")
    assert path.read_text() == "nucleus_id,pred_class,prob_0,prob_1,prob_2\n"


def test_overfit_single_tile_matches_labels(tmp_path):
    logging.disable(logging.WARNING)
    synthesize(SynthConfig(seed=4, size=64), tmp_path, 1, fractions=(1.0, 0.0, 0.0))
    logging.disable(logging.NOTSET)
    res = train(SMALL.with_overrides(epochs=60, lr=3e-3), tmp_path, tmp_path / "run")
    (path,) = predict(tmp_path / "run" / "model.ckpt", tmp_path, tmp_path / "pred")
    pred = read_predictions(path)
    labels = load_tile(tmp_path, 0).labels
    assert np.mean([pred[k] == v for k, v in labels.items()]) >= 0.9


# -- score ---------------------------------------------------------------------------

def test_self_score_is_one(data, tmp_path):
    for tid, _ in read_manifest(data):
        t = load_tile(data, tid)
        ids = sorted(t.labels)
        write_predictions(tmp_path / f"{tid}.pred.csv", ids, np.eye(3)[[t.labels[k] for k in ids]], 3)
    rep = score(tmp_path, data)
    assert rep.f_avg == 1.0 and rep.f_d == 1.0 and rep.pq == 1.0 and rep.aji == 1.0
    assert all(v == 1.0 for v in rep.per_class)


def test_score_with_external_instances_matches_oracles(data, tmp_path):
    rng = np.random.default_rng(0)
    gts, preds = [], []
    for tid, _ in read_manifest(data)[:4]:
        t = load_tile(data, tid)
        inst = np.roll(t.instance_map, (1, -1), axis=(0, 1))
        inst[inst == inst.max()] = 0  # one missed nucleus
        write_grid(tmp_path / f"{tid}.inst.grid", inst[:, :, None])
        ids = sorted(set(np.unique(inst).tolist()) - {0})
        cls = rng.integers(0, 3, size=len(ids))
        write_predictions(tmp_path / f"{tid}.pred.csv", ids, np.eye(3)[cls], 3)
        gts.append(t)
        preds.append((inst, dict(zip(ids, cls.tolist()))))
    rep = score(tmp_path, data)
    # pooled counts over the four tiles through the loop oracles
    pairs_all, gcls, pcls, n_gt, n_pred = [], {}, {}, 0, 0
    for k, (t, (inst, pc)) in enumerate(zip(gts, preds)):
        cent = lambda m: {int(i): np.argwhere(m == i).mean(axis=0) for i in np.unique(m) if i}
        pairs = oracles.greedy_match(cent(t.instance_map), cent(inst))
        pairs_all += [((k, g), (k, p)) for g, p in pairs]
        gcls.update({(k, i): c for i, c in t.labels.items()})
        pcls.update({(k, i): c for i, c in pc.items()})
        n_gt, n_pred = n_gt + len(t.labels), n_pred + len(pc)
    for q in range(3):
        assert abs(rep.per_class[q] - oracles.fscore(pairs_all, gcls, pcls, n_gt, n_pred, q)) <= 1e-12
    tp = len(pairs_all)
    assert abs(rep.f_d - oracles.f1(tp, n_pred - tp, n_gt - tp)) <= 1e-12


def test_shuffled_labels_score_near_chance():
    # chance level of the TN-weighted score for Q balanced classes is Q / (3Q - 2)
    rng = np.random.default_rng(0)
    n = 3000
    gt = np.arange(n) % 3
    cents = {i: np.array([30.0 * i, 0.0]) for i in range(n)}
    scores = []
    for _ in range(20):
        acc = ScoreAccumulator(3)
        acc.add_tile(cents, dict(enumerate(gt.tolist())), cents, dict(enumerate(rng.permutation(gt).tolist())))
        scores.append(acc.report().f_avg)
    assert abs(np.mean(scores) - 1 / 3) <= 0.1
    assert abs(np.mean(scores) - 3 / 7) <= 0.01


def test_score_needs_predictions(data, tmp_path):
    with pytest.raises(InputError):
        score(tmp_path, data)


# -- gradcheck and ablation ------------------------------------------------------------

def test_gradcheck_lists_every_group_and_detects_corruption():
    cfg = SMALL
    results = gradcheck(cfg, per_param=1)
    groups = [r.group for r in results]
    assert groups == list(param_groups(SencModel(cfg).params))
    assert {"stem", "sem_head", "rnn", "gnn.l0", "gnn.l1", "classifier"} <= set(groups)
    assert all(r.passed for r in results)
    bad = gradcheck(cfg, per_param=1, corrupt=lambda name, g: g * 1.01 if name.startswith("rnn.") else g)
    assert [r.passed for r in bad] == [r.group != "rnn" for r in bad]


def test_ablate_emits_four_rows_in_order(data, tmp_path):
    rows = ablate(SMALL, data, seeds=[0], out_dir=tmp_path)
    assert [r.name for r in rows] == [name for name, _ in ABLATION_ROWS] == ["baseline", "+GNN", "+EdgeFeat", "full"]
    table = list(csv.reader(open(tmp_path / "ablation.csv")))
    assert table[0] == ["row", "mean_Favg", "seed_0"] and [r[0] for r in table[1:]] == [r.name for r in rows]
    assert all(0.0 <= r.mean <= 1.0 for r in rows)


def test_flags_off_is_texture_only_path(data):
    res = train(SMALL.with_overrides(use_gnn=False, use_edge_feat=False, use_psl=False), data)
    names = set(res.model.params)
    assert not any(n.startswith("rnn.") for n in names)
    assert 0.0 <= evaluate(res.model, data).f_avg <= 1.0
