"""GENConv message passing with edge features and a residual classifier stack."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import IntegrityError
from .tensor import Tensor

MSG_EPS = 1e-7


def _uniform(rng, fan_in, shape):
    b = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-b, b, shape), requires_grad=True)


def init_gnn(
    rng: np.random.Generator,
    in_dim: int,
    edge_dim: int,
    hidden: int,
    layers: int,
    num_classes: int,
) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {
        "gnn.in.w": _uniform(rng, in_dim, (in_dim, hidden)),
        "gnn.in.b": Tensor(np.zeros(hidden), requires_grad=True),
    }
    if edge_dim != hidden:
        p["gnn.edge.w"] = _uniform(rng, edge_dim, (edge_dim, hidden))
    for l in range(layers):
        pre = f"gnn.l{l}."
        p[pre + "norm.g"] = Tensor(np.ones(hidden), requires_grad=True)
        p[pre + "norm.b"] = Tensor(np.zeros(hidden), requires_grad=True)
        p[pre + "beta"] = Tensor(np.array(1.0), requires_grad=True)
        p[pre + "mlp1.w"] = _uniform(rng, 2 * hidden, (2 * hidden, hidden))
        p[pre + "mlp1.b"] = Tensor(np.zeros(hidden), requires_grad=True)
        p[pre + "mlp2.w"] = _uniform(rng, hidden, (hidden, hidden))
        p[pre + "mlp2.b"] = Tensor(np.zeros(hidden), requires_grad=True)
    p["cls.w"] = _uniform(rng, hidden, (hidden, num_classes))
    p["cls.b"] = Tensor(np.zeros(num_classes), requires_grad=True)
    return p


def gnn_layers(params: Mapping[str, Tensor]) -> int:
    return sum(1 for k in params if k.startswith("gnn.l") and k.endswith(".beta"))


def genconv_aggregate(
    x: Tensor,
    y: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    eid: np.ndarray,
    beta: Tensor,
    num_edges: int | None = None,
) -> Tensor:
    """Softmax-weighted neighbourhood aggregation of positive messages.

    Message ``m_j = relu(x_j + y_ij) + eps``; per destination and channel the
    weights are ``softmax_j(beta * m_j)``.  Nodes without neighbours get 0.
    """
    n = x.shape[0]
    if num_edges is not None and y.shape[0] != num_edges:
        raise IntegrityError(f"{y.shape[0]} edge feature rows for {num_edges} edges")
    if len(src) == 0:
        return Tensor(np.zeros(x.shape))
    if eid.max() >= y.shape[0]:
        raise IntegrityError(f"edge row {eid.max()} missing from edge features of shape {y.shape}")
    m = T.relu(T.index(x, src) + T.index(y, eid)) + MSG_EPS
    z = beta * m
    zmax = np.full((n, x.shape[1]), -np.inf)
    np.maximum.at(zmax, dst, z.data)
    e = T.exp(z - Tensor(zmax[dst]))
    den = T.segment_sum(e, dst, n)
    w = e / T.index(den, dst)
    return T.segment_sum(w * m, dst, n)


def genconv_update(x: Tensor, a: Tensor, params: Mapping[str, Tensor], layer: int) -> Tensor:
    """Two-layer ReLU perceptron on ``concat(x_i, a_i)``."""
    pre = f"gnn.l{layer}."
    h = T.relu(T.linear(T.concat([x, a], axis=1), params[pre + "mlp1.w"], params[pre + "mlp1.b"]))
    return T.linear(h, params[pre + "mlp2.w"], params[pre + "mlp2.b"])


def stack_forward(
    x: Tensor,
    y: Tensor,
    messages: tuple[np.ndarray, np.ndarray, np.ndarray],
    params: Mapping[str, Tensor],
    use_gnn: bool = True,
    use_edge_feat: bool = True,
) -> Tensor:
    """Class probabilities ``(N, Q)`` for every node.

    Each block is ``x <- relu(genconv(norm(x))) + x``.  With ``use_gnn`` off
    the aggregate is replaced by zeros, leaving a per-node residual MLP.
    """
    src, dst, eid = messages
    h = T.linear(x, params["gnn.in.w"], params["gnn.in.b"])
    n, width = h.shape
    if not use_edge_feat:
        y = Tensor(np.zeros((y.shape[0], width)))
    elif "gnn.edge.w" in params:
        y = T.matmul(y, params["gnn.edge.w"])
    for l in range(gnn_layers(params)):
        pre = f"gnn.l{l}."
        z = T.layer_norm(h, params[pre + "norm.g"], params[pre + "norm.b"])
        if use_gnn:
            a = genconv_aggregate(z, y, src, dst, eid, params[pre + "beta"])
        else:
            a = Tensor(np.zeros((n, width)))
        h = T.relu(genconv_update(z, a, params, l)) + h
    return T.softmax(T.linear(h, params["cls.w"], params["cls.b"]), axis=1)
