"""Inter-nucleus graph: nodes from an instance map, KNN edges, node and edge features."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.spatial.distance import cdist

from . import tensor as T
from .errors import InputError
from .featmap import (
    STRIDE,
    bilinear_matrix,
    box_pool_matrix,
    sinusoidal_pe,
    sinusoidal_pe_table,
    write_grid,
)
from .psl import ContourSample, extract_contour_sample, rnn_encode_batch, sequence_features
from .tensor import Tensor


@dataclass
class NucleusRecord:
    id: int
    centroid: np.ndarray  # (row, col) image coordinates
    bbox: tuple[float, float, float, float]
    contour: ContourSample
    gt_class: int | None = None


def _shift(sample: ContourSample, dr: float, dc: float) -> ContourSample:
    top, left, bottom, right = sample.bbox
    off = np.array([dr, dc], dtype=np.float64)
    return replace(
        sample,
        centroid=sample.centroid + off,
        points=sample.points + off,
        bbox=(top + dr, left + dc, bottom + dr, right + dc),
    )


def extract_nuclei(
    instance_map: np.ndarray,
    labels: Mapping[int, int] | None = None,
    n: int = 18,
    lpe_dim: int = 64,
) -> list[NucleusRecord]:
    """One record per distinct nonzero id, in ascending id order."""
    inst = np.asarray(instance_map)
    if inst.ndim == 3:
        inst = inst[:, :, 0]
    ids = np.unique(inst)
    ids = ids[ids > 0]
    if ids.size and ids.max() <= 64 * ids.size + 4096:
        slices = ndimage.find_objects(inst.astype(np.int64))
        boxes = [(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop) for sl in (slices[int(i) - 1] for i in ids)]
    else:
        boxes = []
        for nid in ids:
            rows, cols = np.nonzero(inst == nid)
            boxes.append((rows.min(), cols.min(), rows.max() + 1, cols.max() + 1))
    return [_record(inst, int(nid), *box, labels, n, lpe_dim) for nid, box in zip(ids, boxes)]


def _record(inst, nid, r0, c0, r1, c1, labels, n, lpe_dim) -> NucleusRecord:
    crop = inst[r0:r1, c0:c1] == nid
    sample = _shift(extract_contour_sample(crop, n, lpe_dim), float(r0), float(c0))
    gt = None if labels is None else labels.get(nid)
    return NucleusRecord(nid, sample.centroid, sample.bbox, sample, None if gt is None else int(gt))


def build_topology(centroids: np.ndarray, k: int) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Union of each node's ``k`` nearest neighbours as undirected edges.

    Distance ties go to the lower node index; ``k`` is clamped to ``N - 1``.
    """
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    adj = np.zeros((n, n), dtype=np.int8)
    kk = min(k, n - 1)
    if n < 2 or kk < 1:
        return [], adj
    d = cdist(pts, pts)
    np.fill_diagonal(d, np.inf)
    for i in range(n):
        for j in np.argsort(d[i], kind="stable")[:kk]:
            adj[i, j] = adj[j, i] = 1
    us, vs = np.nonzero(np.triu(adj, 1))
    return list(zip(us.tolist(), vs.tolist())), adj


@dataclass
class GraphLayout:
    """Everything about a tile's graph that does not depend on learned weights."""

    records: list[NucleusRecord]
    edges: list[tuple[int, int]]
    adjacency: np.ndarray
    feat_shape: tuple[int, int]
    box_matrix: sp.csr_matrix = field(repr=False)
    centroid_matrix: sp.csr_matrix = field(repr=False)
    edge_matrix: sp.csr_matrix = field(repr=False)
    pe: np.ndarray = field(repr=False)
    sequences: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if r.gt_class is None else r.gt_class for r in self.records], dtype=np.int64)

    def messages(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Directed (src, dst, edge row) triples sorted by destination then source."""
        trip = [(v, u, e) for e, (u, v) in enumerate(self.edges)] + [(u, v, e) for e, (u, v) in enumerate(self.edges)]
        trip.sort(key=lambda t: (t[1], t[0]))
        arr = np.array(trip, dtype=np.int64).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]


def edge_midpoints(records: Sequence[NucleusRecord], edges) -> np.ndarray:
    """Feature-space midpoints of the centroid segments."""
    out = np.zeros((len(edges), 2))
    for e, (u, v) in enumerate(edges):
        out[e] = (records[u].centroid + records[v].centroid) / (2.0 * STRIDE)
    return out


def layout_from_records(records: list[NucleusRecord], image_shape: tuple[int, int], k: int, c: int) -> GraphLayout:
    h, w = image_shape[0] // STRIDE, image_shape[1] // STRIDE
    cents = np.array([r.centroid for r in records]).reshape(-1, 2)
    edges, adj = build_topology(cents, k)
    seqs = np.stack([sequence_features(r.contour) for r in records]) if records else np.zeros((0, 1, c + 2))
    return GraphLayout(
        records=records,
        edges=edges,
        adjacency=adj,
        feat_shape=(h, w),
        box_matrix=box_pool_matrix([r.bbox for r in records], h, w, fallback=cents),
        centroid_matrix=bilinear_matrix(cents / STRIDE, h, w),
        edge_matrix=bilinear_matrix(edge_midpoints(records, edges), h, w),
        pe=sinusoidal_pe_table(cents, c),
        sequences=seqs,
    )


def build_layout(instance_map, labels=None, *, k: int = 4, n: int = 18, c: int = 64) -> GraphLayout:
    inst = np.asarray(instance_map)
    if inst.ndim == 3:
        inst = inst[:, :, 0]
    return layout_from_records(extract_nuclei(inst, labels, n, c), inst.shape, k, c)


def _flat(feat: Tensor) -> Tensor:
    h, w, c = feat.shape
    return T.reshape(feat, (h * w, c))


def node_features(layout: GraphLayout, feat: Tensor, rnn_params: Mapping[str, Tensor] | None) -> Tensor:
    """Node matrix ``[B, C, PE, Z]``; ``Z`` is omitted when ``rnn_params`` is None."""
    if feat.shape[:2] != layout.feat_shape:
        raise InputError(f"feature map {feat.shape[:2]} does not match layout {layout.feat_shape}")
    flat = _flat(feat)
    parts = [
        T.sparse_matmul(layout.box_matrix, flat),
        T.sparse_matmul(layout.centroid_matrix, flat),
        Tensor(layout.pe),
    ]
    if rnn_params is not None:
        parts.append(rnn_encode_batch(layout.sequences, dict(rnn_params)))
    return T.concat(parts, axis=1)


def edge_features(layout: GraphLayout, feat: Tensor) -> Tensor:
    return T.sparse_matmul(layout.edge_matrix, _flat(feat))


def node_feature(record: NucleusRecord, feat: Tensor, rnn_params: Mapping[str, Tensor] | None) -> Tensor:
    """Single-nucleus ``[B, C, PE, Z]`` row."""
    h, w, c = feat.shape
    flat = _flat(feat)
    parts = [
        T.sparse_matmul(box_pool_matrix([record.bbox], h, w, fallback=[record.centroid]), flat),
        T.sparse_matmul(bilinear_matrix(record.centroid / STRIDE, h, w), flat),
        Tensor(sinusoidal_pe(record.centroid, c)[None]),
    ]
    if rnn_params is not None:
        parts.append(rnn_encode_batch(sequence_features(record.contour)[None], dict(rnn_params)))
    return T.concat(parts, axis=1)


def edge_feature(u: NucleusRecord, v: NucleusRecord, feat: Tensor) -> Tensor:
    h, w, _ = feat.shape
    mid = (u.centroid + v.centroid) / (2.0 * STRIDE)
    return T.sparse_matmul(bilinear_matrix(mid, h, w), _flat(feat))


@dataclass
class HistoGraph:
    layout: GraphLayout
    x: Tensor
    y: Tensor

    @property
    def adjacency(self) -> np.ndarray:
        return self.layout.adjacency

    @property
    def edges(self) -> list[tuple[int, int]]:
        return self.layout.edges


def build_graph(instance_map, image, params, labels=None, *, k: int = 4, n: int = 18, use_psl: bool = True) -> HistoGraph:
    """Stem forward plus full graph assembly for one tile."""
    from .featmap import stem_forward

    inst = np.asarray(instance_map)
    if inst.ndim == 3:
        inst = inst[:, :, 0]
    if inst.shape != np.asarray(image).shape[:2]:
        raise InputError(f"instance map {inst.shape} and image {np.asarray(image).shape[:2]} differ")
    feat, _ = stem_forward(params, image)
    c = feat.shape[2]
    layout = build_layout(inst, labels, k=k, n=n, c=c)
    rnn = {k_: v for k_, v in params.items() if k_.startswith("rnn.")} if use_psl else None
    return HistoGraph(layout, node_features(layout, feat, rnn), edge_features(layout, feat))


def write_graph_dump(out_dir: str | Path, graph: HistoGraph) -> None:
    """``nodes.csv``, ``edges.csv`` plus GRID exports of the node and edge features."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = graph.layout.records
    with open(out / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "row", "col", "class"])
        for r in recs:
            w.writerow([r.id, f"{r.centroid[0]:.9g}", f"{r.centroid[1]:.9g}", "" if r.gt_class is None else r.gt_class])
    with open(out / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v"])
        for u, v in graph.edges:
            w.writerow([recs[u].id, recs[v].id])
    if graph.x.shape[0]:
        write_grid(out / "node_feats.grid", graph.x.data[:, None, :])
    if graph.y.shape[0]:
        write_grid(out / "edge_feats.grid", graph.y.data[:, None, :])
