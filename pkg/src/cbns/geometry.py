"""Geometric kernels: farthest-point sampling, chamfer terms, soft projection.

Index-valued operations (fps, match_hard, nearest_neighbors) are plain numpy
and deterministic, with ties broken by lowest index. Value-valued operations
(chamfer, soft_project) run in torch and are differentiable; they accept an
optional leading batch dimension and compute every batch element exactly as a
standalone call would.

Squared Euclidean distance is used throughout. Brute-force distance matrices
are fine at the scales this toolkit targets (n <= 2048).
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from .core import PointCloud


def as_points(cloud, dtype=np.float64) -> np.ndarray:
    """Coerce PointCloud / array / tensor to an (n, d) numpy array."""
    if isinstance(cloud, PointCloud):
        pts = cloud.points
    elif isinstance(cloud, torch.Tensor):
        pts = cloud.detach().cpu().numpy()
    else:
        pts = np.asarray(cloud)
    if pts.ndim != 2:
        raise ValueError(f"expected an (n, d) matrix, got shape {pts.shape}")
    return pts.astype(dtype, copy=False)


def as_tensor(cloud, dtype=torch.float32) -> torch.Tensor:
    if isinstance(cloud, torch.Tensor):
        return cloud.to(dtype)
    if isinstance(cloud, PointCloud):
        return torch.as_tensor(cloud.points, dtype=dtype)
    return torch.as_tensor(np.asarray(cloud), dtype=dtype)


@dataclasses.dataclass(frozen=True)
class NeighborSet:
    """k nearest reference indices with squared distances, sorted ascending."""

    indices: np.ndarray
    distances: np.ndarray


def nearest_neighbors(point, reference, k: int) -> NeighborSet:
    ref = as_points(reference)
    p = np.asarray(point, dtype=np.float64).reshape(-1)
    if not 1 <= k <= ref.shape[0]:
        raise ValueError(f"k={k} out of range for {ref.shape[0]} reference points")
    d2 = ((ref - p) ** 2).sum(axis=1)
    # stable argsort keeps lowest-index order among exact ties
    order = np.argsort(d2, kind="stable")[:k]
    return NeighborSet(indices=order, distances=d2[order])


def fps(cloud, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min farthest point sampling.

    The first index is `start`; each next index maximizes the squared distance
    to the already-selected set, ties going to the lowest index.
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for n={n}")
    if not 0 <= start < n:
        raise ValueError(f"start={start} out of range for n={n}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    min_d2 = ((pts - pts[start]) ** 2).sum(axis=1)
    min_d2[start] = -1.0  # selected points never re-picked
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        d2 = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0
    return chosen


def pairwise_sq_dists(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """(..., r, n) squared distances between row sets x (..., r, d) and y (..., n, d).

    Matmul formulation keeps memory traffic at O(r*n) instead of O(r*n*d);
    the clamp absorbs tiny negative values from float cancellation.
    """
    x2 = (x * x).sum(dim=-1).unsqueeze(-1)
    y2 = (y * y).sum(dim=-1).unsqueeze(-2)
    cross = x @ y.transpose(-1, -2)
    return (x2 + y2 - 2.0 * cross).clamp_min(0.0)


def chamfer_terms(a: torch.Tensor, b: torch.Tensor) -> tuple:
    """Differentiable chamfer terms with optional batch dimension.

    avg_term: mean over a of squared nearest distance to b, plus the symmetric
    b-to-a term. max_term: max over a of squared nearest distance to b (one
    directional).
    """
    d2 = pairwise_sq_dists(a, b)
    a_to_b = d2.min(dim=-1).values
    b_to_a = d2.min(dim=-2).values
    avg = a_to_b.mean(dim=-1) + b_to_a.mean(dim=-1)
    mx = a_to_b.max(dim=-1).values
    return avg, mx


def chamfer(a, b) -> tuple:
    """Chamfer terms for two clouds; returns (avg_term, max_term) floats."""
    ta = as_tensor(a, torch.float64)
    tb = as_tensor(b, torch.float64)
    if ta.shape[-1] != tb.shape[-1]:
        raise ValueError("clouds must share the coordinate dimension")
    avg, mx = chamfer_terms(ta, tb)
    return float(avg), float(mx)


def soft_project(generated, reference, temperature, k: int = 8) -> tuple:
    """Softly snap generated points onto the reference cloud.

    Each generated point is replaced by a convex combination of its k nearest
    reference points with weights exp(-d_i^2 / temperature^2), normalized per
    row. Differentiable w.r.t. the generated points and temperature; as the
    temperature anneals toward 0 the projection approaches hard selection.

    Accepts (r, d) or batched (B, r, d) inputs. Returns (projected, weights).
    """
    g = generated if isinstance(generated, torch.Tensor) else as_tensor(generated)
    ref = reference if isinstance(reference, torch.Tensor) else as_tensor(reference, g.dtype)
    t = temperature if isinstance(temperature, torch.Tensor) else torch.as_tensor(
        float(temperature), dtype=g.dtype)
    if float(t.detach()) <= 0.0:
        raise ValueError("temperature must be positive")
    if k > ref.shape[-2]:
        raise ValueError(f"k={k} exceeds reference size {ref.shape[-2]}")

    d2 = pairwise_sq_dists(g, ref)                      # (..., r, n)
    nd2, nidx = torch.topk(d2, k, dim=-1, largest=False)
    logits = -nd2 / (t * t)
    weights = torch.softmax(logits, dim=-1)             # (..., r, k)
    gather_idx = nidx.unsqueeze(-1).expand(*nidx.shape, ref.shape[-1])
    neighbors = torch.gather(
        ref.unsqueeze(-3).expand(*nidx.shape[:-1], ref.shape[-2], ref.shape[-1]),
        -2, gather_idx)                                 # (..., r, k, d)
    projected = (weights.unsqueeze(-1) * neighbors).sum(dim=-2)
    return projected, weights


def match_hard(generated, reference) -> np.ndarray:
    """Hard assignment of each generated point to a distinct reference index.

    Pairs are claimed greedily in order of ascending squared match distance,
    so when several generated points want the same reference point the closest
    one keeps it and displaced points fall through to their next-nearest
    unused index. Ties break toward the lowest (generated, reference) index.
    """
    g = as_points(generated)
    ref = as_points(reference)
    r, n = g.shape[0], ref.shape[0]
    if r > n:
        raise ValueError(f"cannot match {r} points into {n} reference points")
    d2 = ((g[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2.ravel(), kind="stable")  # flat order = (gen, ref) lexicographic ties
    assigned = np.full(r, -1, dtype=np.int64)
    used = np.zeros(n, dtype=bool)
    remaining = r
    for flat in order:
        gi, ri = divmod(int(flat), n)
        if assigned[gi] >= 0 or used[ri]:
            continue
        assigned[gi] = ri
        used[ri] = True
        remaining -= 1
        if remaining == 0:
            break
    return assigned
