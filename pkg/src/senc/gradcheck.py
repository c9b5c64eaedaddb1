"""Central finite-difference checks against the analytic tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``.

    ``coords`` optionally restricts the check to a list of flat indices; the
    remaining entries of the result are NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    todo = range(flat.size) if coords is None else coords
    for k in todo:
        orig = flat[k]
        flat[k] = orig + step
        fp = f().data.item()
        flat[k] = orig - step
        fm = f().data.item()
        flat[k] = orig
        out[k] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


REL_FLOOR = 1e-6


def stable_numeric_grad(
    f: Callable[[], Tensor], x: Tensor, step: float = 1e-5, coords=None, shrink: int = 2, agree: float = 1e-3
) -> np.ndarray:
    """Central differences that step around ReLU kinks.

    A kink within ``step`` of the probe makes the estimate jump with the step
    size.  Each coordinate is compared with a probe at a ten times smaller
    step; while the two disagree by more than ``agree`` (relative) the step
    keeps shrinking.  The larger step of the first agreeing pair is kept, so
    smooth coordinates get exactly the plain ``step`` estimate.
    """
    flat = x.data.reshape(-1)
    todo = list(range(flat.size) if coords is None else coords)
    first = numeric_grad(f, x, step, todo).reshape(-1)
    out = np.full(flat.shape, np.nan)
    for k in todo:
        prev, h = first[k], step
        for _ in range(shrink):
            h /= 10.0
            cur = numeric_grad(f, x, h, [k]).reshape(-1)[k]
            if abs(cur - prev) <= agree * max(REL_FLOOR, abs(cur), abs(prev)):
                break
            prev = cur
        out[k] = prev
    return out.reshape(x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over the finite entries of ``numeric``.

    The floor keeps round-off in the differences from dominating near-zero entries.
    """
    ok = np.isfinite(numeric)
    if not ok.any():
        return 0.0
    a, n = analytic[ok], numeric[ok]
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))))


@dataclass
class GroupResult:
    group: str
    n_checked: int
    max_rel_err: float
    passed: bool


def check_params(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    groups: Mapping[str, list[str]],
    tol: float = 1e-4,
    step: float = 1e-5,
    per_param: int = 6,
    seed: int = 0,
    corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> list[GroupResult]:
    """Compare tape gradients with finite differences, one result per group.

    Up to ``per_param`` coordinates of every parameter are probed: half with
    the largest analytic magnitude, the rest chosen at random.  ``corrupt`` is
    a test hook applied to each analytic gradient.
    """
    for p in params.values():
        p.zero_grad()
    f().backward()
    rng = np.random.default_rng(seed)
    results = []
    for group, names in groups.items():
        worst, checked = 0.0, 0
        for name in names:
            p = params[name]
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            if corrupt is not None:
                analytic = corrupt(name, analytic)
            k = min(per_param, p.size)
            top = np.argsort(-np.abs(analytic.reshape(-1)), kind="stable")[: (k + 1) // 2]
            rest = np.setdiff1d(np.arange(p.size), top)
            extra = rng.choice(rest, size=min(k - len(top), rest.size), replace=False)
            coords = np.concatenate([top, extra]).astype(np.int64)
            numeric = stable_numeric_grad(f, p, step, coords)
            worst = max(worst, rel_error(analytic, numeric))
            checked += k
        results.append(GroupResult(group, checked, worst, worst <= tol))
    return results
