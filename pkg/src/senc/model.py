"""End-to-end model: stem, node/edge features, shape RNN and the GNN classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import RunConfig
from .featmap import STRIDE, init_stem, stem_forward, upsample_index
from .gnn import init_gnn, stack_forward
from .graph import GraphLayout, build_layout, edge_features, node_features
from .losses import LossConfig, LossParts, one_hot, total_loss
from .psl import init_rnn
from .tensor import Tensor


@dataclass
class PreparedTile:
    """Weight-independent inputs of one tile, computed once and reused every epoch."""

    image: np.ndarray  # (H, W, 3) float64
    layout: GraphLayout
    messages: tuple[np.ndarray, np.ndarray, np.ndarray]
    up_index: np.ndarray
    sem_target: np.ndarray | None  # (H*W, Q+1) one-hot
    labels: np.ndarray | None  # (N,) class ids

    @property
    def ids(self) -> list[int]:
        return self.layout.ids


def semantic_target(instance_map: np.ndarray, labels: Mapping[int, int], num_classes: int) -> np.ndarray:
    """Per-pixel one-hot over ``Q+1`` classes; background is 0, class q is q+1."""
    inst = np.asarray(instance_map).astype(np.int64)
    if inst.ndim == 3:
        inst = inst[:, :, 0]
    sem = np.zeros(inst.shape, dtype=np.int64)
    for nid, cls in labels.items():
        sem[inst == nid] = int(cls) + 1
    return one_hot(sem.reshape(-1), num_classes + 1)


def prepare_tile(image, instance_map, labels: Mapping[int, int] | None, cfg: RunConfig) -> PreparedTile:
    image = np.asarray(image, dtype=np.float64)
    inst = np.asarray(instance_map)
    if inst.ndim == 3:
        inst = inst[:, :, 0]
    layout = build_layout(inst, labels, k=cfg.K, n=cfg.n, c=cfg.c)
    h, w = image.shape[0] // STRIDE, image.shape[1] // STRIDE
    lab = None
    sem = None
    if labels is not None:
        lab = layout.labels
        sem = semantic_target(inst, labels, cfg.num_classes)
    return PreparedTile(image, layout, layout.messages(), upsample_index(h, w), sem, lab)


def init_params(cfg: RunConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = init_stem(rng, cfg.c, cfg.num_classes)
    in_dim = 3 * cfg.c
    if cfg.use_psl:
        params.update(init_rnn(rng, cfg.c + 2, cfg.rnn_hidden, cfg.rnn_layers, cfg.c))
        in_dim += cfg.c
    params.update(init_gnn(rng, in_dim, cfg.c, cfg.gnn_hidden, cfg.gnn_layers, cfg.num_classes))
    return params


def param_groups(params: Mapping[str, Tensor]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in params:
        head = name.split(".")[0]
        key = {"stem": "stem", "sem": "sem_head", "rnn": "rnn", "cls": "classifier"}.get(head)
        if key is None:
            key = "gnn." + name.split(".")[1]
        groups.setdefault(key, []).append(name)
    return groups


class SencModel:
    def __init__(self, cfg: RunConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params

    @classmethod
    def from_arrays(cls, cfg: RunConfig, arrays: Mapping[str, np.ndarray]) -> "SencModel":
        return cls(cfg, {k: Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def prepare(self, image, instance_map, labels=None) -> PreparedTile:
        return prepare_tile(image, instance_map, labels, self.cfg)

    def forward(self, tile: PreparedTile) -> tuple[Tensor, Tensor | None]:
        """Full-resolution semantic probabilities ``(H*W, Q+1)`` and class probabilities ``(N, Q)``."""
        p = self.params
        feat, logits = stem_forward(p, tile.image)
        fh, fw, k = logits.shape
        sem_low = T.softmax(T.reshape(logits, (fh * fw, k)), axis=1)
        sem = T.index(sem_low, tile.up_index)
        if tile.layout.num_nodes == 0:
            return sem, None
        rnn = {n: v for n, v in p.items() if n.startswith("rnn.")} if self.cfg.use_psl else None
        x = node_features(tile.layout, feat, rnn)
        y = edge_features(tile.layout, feat)
        t = stack_forward(x, y, tile.messages, p, self.cfg.use_gnn, self.cfg.use_edge_feat)
        return sem, t

    def loss(self, tile: PreparedTile, loss_cfg: LossConfig) -> tuple[LossParts, Tensor | None]:
        sem, t = self.forward(tile)
        labels = tile.labels if tile.labels is not None else np.zeros(0, dtype=np.int64)
        return total_loss(sem, tile.sem_target, t, labels, loss_cfg), t

    def predict_proba(self, tile: PreparedTile) -> np.ndarray:
        _, t = self.forward(tile)
        return np.zeros((0, self.cfg.num_classes)) if t is None else t.data
