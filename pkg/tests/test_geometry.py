import numpy as np
import pytest
import torch

from cbns.geometry import (NeighborSet, chamfer, chamfer_terms, fps,
                           match_hard, nearest_neighbors, soft_project)

from conftest import central_diff, rel_error


# ---------------------------------------------------------------------------
# fps

def test_fps_unit_square_corners():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert fps(pts, 2, start=0).tolist() == [0, 3]


def test_fps_exhaustion_returns_all(rng):
    pts = rng.normal(size=(7, 3))
    idx = fps(pts, 7, start=2)
    assert sorted(idx.tolist()) == list(range(7))
    assert idx[0] == 2


def test_fps_bounds():
    pts = np.zeros((4, 3))
    pts[1] = 1
    with pytest.raises(ValueError):
        fps(pts, 5)
    with pytest.raises(ValueError):
        fps(pts, 2, start=4)


def _fps_oracle(pts, k, start):
    """Greedy max-min recomputing the full distance matrix at every step."""
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    chosen = [start]
    while len(chosen) < k:
        best_idx, best_val = None, -1.0
        for cand in range(len(pts)):
            if cand in chosen:
                continue
            val = min(d2[cand][j] for j in chosen)
            if val > best_val:
                best_idx, best_val = cand, val
        chosen.append(best_idx)
    return chosen


def test_fps_matches_bruteforce_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 33))
        k = int(rng.integers(1, n + 1))
        start = int(rng.integers(0, n))
        pts = rng.normal(size=(n, 3))
        assert fps(pts, k, start).tolist() == _fps_oracle(pts, k, start)


def test_fps_no_duplicates_and_minpair_nonincreasing(rng):
    pts = rng.normal(size=(24, 3))
    prev = np.inf
    for k in range(2, 25):
        idx = fps(pts, k)
        assert len(set(idx.tolist())) == k
        sel = pts[idx]
        d2 = ((sel[:, None, :] - sel[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        min_pair = d2.min()
        assert min_pair <= prev + 1e-12
        prev = min_pair


# ---------------------------------------------------------------------------
# chamfer

def test_chamfer_identity(rng):
    pts = rng.normal(size=(10, 3))
    avg, mx = chamfer(pts, pts.copy())
    assert avg == 0.0 and mx == 0.0


def test_chamfer_single_pair():
    avg, mx = chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]))
    assert avg == pytest.approx(2.0)
    assert mx == pytest.approx(1.0)


def test_chamfer_matches_exhaustive_oracle(rng):
    for _ in range(50):
        na, nb = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        a, b = rng.normal(size=(na, 3)), rng.normal(size=(nb, 3))
        avg, mx = chamfer(a, b)
        a_to_b = [min(((p - q) ** 2).sum() for q in b) for p in a]
        b_to_a = [min(((q - p) ** 2).sum() for p in a) for q in b]
        assert avg == pytest.approx(np.mean(a_to_b) + np.mean(b_to_a), rel=1e-9)
        assert mx == pytest.approx(max(a_to_b), rel=1e-9)


def test_chamfer_avg_symmetric_max_not(rng):
    a, b = rng.normal(size=(9, 3)), rng.normal(size=(5, 3))
    avg_ab, _ = chamfer(a, b)
    avg_ba, _ = chamfer(b, a)
    assert avg_ab == pytest.approx(avg_ba, rel=1e-12)


def test_chamfer_batched_matches_per_sample(rng):
    a = torch.as_tensor(rng.normal(size=(4, 6, 3)))
    b = torch.as_tensor(rng.normal(size=(4, 11, 3)))
    avg_b, mx_b = chamfer_terms(a, b)
    for i in range(4):
        avg_i, mx_i = chamfer_terms(a[i], b[i])
        assert float(avg_b[i]) == float(avg_i)
        assert float(mx_b[i]) == float(mx_i)


# ---------------------------------------------------------------------------
# nearest neighbors

def test_nearest_neighbors_sorted_distinct(rng):
    ref = rng.normal(size=(20, 3))
    ns = nearest_neighbors(rng.normal(size=3), ref, k=5)
    assert isinstance(ns, NeighborSet)
    assert len(set(ns.indices.tolist())) == 5
    assert np.all(np.diff(ns.distances) >= 0)


# ---------------------------------------------------------------------------
# soft projection

def test_soft_project_exact_hit(rng):
    ref = rng.normal(size=(12, 3))
    gen = ref[4:5].copy()
    projected, weights = soft_project(gen, ref, temperature=0.5, k=1)
    np.testing.assert_allclose(projected.numpy(), ref[4:5], atol=1e-7)
    np.testing.assert_allclose(weights.numpy(), [[1.0]])


def test_soft_project_weights_sum_to_one(rng):
    ref = torch.as_tensor(rng.normal(size=(30, 3)))
    gen = torch.as_tensor(rng.normal(size=(9, 3)))
    _, weights = soft_project(gen, ref, temperature=0.7, k=8)
    np.testing.assert_allclose(weights.sum(dim=-1).numpy(), 1.0, atol=1e-6)


def test_soft_project_rejects_bad_temperature(rng):
    ref = rng.normal(size=(10, 3))
    with pytest.raises(ValueError):
        soft_project(ref[:3], ref, temperature=0.0, k=2)


def _separated_reference(rng, n=16, min_dist=0.1):
    pts = []
    while len(pts) < n:
        cand = rng.uniform(-1, 1, size=3)
        if all(((cand - p) ** 2).sum() >= min_dist ** 2 for p in pts):
            pts.append(cand)
    return np.array(pts)


def test_soft_project_cold_temperature_approaches_hard_nn(rng):
    for _ in range(20):
        ref = _separated_reference(rng)
        picks = rng.choice(len(ref), size=5, replace=False)
        gen = ref[picks] + 0.02 * rng.normal(size=(5, 3))
        projected, _ = soft_project(gen, ref, temperature=1e-3, k=8)
        # hard oracle: nearest reference point per generated point
        for g, p in zip(gen, projected.numpy()):
            nearest = ref[((ref - g) ** 2).sum(axis=1).argmin()]
            assert np.linalg.norm(p - nearest) < 1e-3


def test_soft_project_gradient_matches_central_differences(rng):
    for _ in range(5):
        ref = rng.normal(size=(10, 3))
        gen0 = rng.normal(size=(4, 3))
        probe = rng.normal(size=(4, 3))

        def scalar(gen_np):
            proj, _ = soft_project(torch.as_tensor(gen_np, dtype=torch.float64),
                                   torch.as_tensor(ref, dtype=torch.float64),
                                   temperature=0.6, k=5)
            return float((proj * torch.as_tensor(probe)).sum())

        gen_t = torch.as_tensor(gen0, dtype=torch.float64, ).clone().requires_grad_(True)
        proj, _ = soft_project(gen_t, torch.as_tensor(ref, dtype=torch.float64),
                               temperature=0.6, k=5)
        (proj * torch.as_tensor(probe)).sum().backward()
        fd = central_diff(scalar, gen0)
        assert rel_error(gen_t.grad.numpy(), fd) < 1e-4


def test_soft_project_translation_equivariant(rng):
    ref = torch.as_tensor(rng.normal(size=(14, 3)))
    gen = torch.as_tensor(rng.normal(size=(5, 3)))
    shift = torch.as_tensor(rng.normal(size=3))
    base, w0 = soft_project(gen, ref, temperature=0.4, k=6)
    moved, w1 = soft_project(gen + shift, ref + shift, temperature=0.4, k=6)
    np.testing.assert_allclose(moved.numpy(), (base + shift).numpy(), atol=1e-5)
    np.testing.assert_allclose(w0.numpy(), w1.numpy(), atol=1e-5)


def test_soft_project_batched_matches_per_sample(rng):
    ref = torch.as_tensor(rng.normal(size=(3, 15, 3)))
    gen = torch.as_tensor(rng.normal(size=(3, 6, 3)))
    proj_b, w_b = soft_project(gen, ref, temperature=0.8, k=4)
    for i in range(3):
        proj_i, w_i = soft_project(gen[i], ref[i], temperature=0.8, k=4)
        np.testing.assert_array_equal(proj_b[i].numpy(), proj_i.numpy())
        np.testing.assert_array_equal(w_b[i].numpy(), w_i.numpy())


# ---------------------------------------------------------------------------
# hard matching

def test_match_hard_exact_copies(rng):
    ref = rng.normal(size=(10, 3))
    picks = np.array([7, 2, 9, 0])
    assert match_hard(ref[picks], ref).tolist() == picks.tolist()


def test_match_hard_conflict_resolution():
    ref = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    gen = np.array([[0.1, 0, 0], [0.2, 0, 0]])  # both nearest to ref 0
    idx = match_hard(gen, ref)
    # the closer generated point keeps ref 0; the other is displaced to ref 1
    assert idx.tolist() == [0, 1]


def _match_oracle(g, ref):
    """Independent greedy: repeatedly take the globally closest unmatched
    (generated, reference) pair, rescanning distances every round."""
    r, n = len(g), len(ref)
    assigned = {}
    used = set()
    while len(assigned) < r:
        best = None
        for i in range(r):
            if i in assigned:
                continue
            for j in range(n):
                if j in used:
                    continue
                d = ((g[i] - ref[j]) ** 2).sum()
                key = (d, i, j)
                if best is None or key < best:
                    best = key
        _, i, j = best
        assigned[i] = j
        used.add(j)
    return [assigned[i] for i in range(r)]


def test_match_hard_matches_independent_greedy_oracle(rng):
    for _ in range(100):
        r = int(rng.integers(1, 9))
        n = int(rng.integers(r, 13))
        g = rng.normal(size=(r, 3))
        ref = rng.normal(size=(n, 3))
        idx = match_hard(g, ref)
        assert len(set(idx.tolist())) == r  # distinct
        assert idx.tolist() == _match_oracle(g, ref)
        # never below the allow-duplicates lower bound; equal when no conflicts
        d2 = ((g[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        naive = d2.argmin(axis=1)
        total = d2[np.arange(r), idx].sum()
        lower = d2[np.arange(r), naive].sum()
        assert total >= lower - 1e-12
        if len(set(naive.tolist())) == r:
            assert idx.tolist() == naive.tolist()


def test_match_hard_rejects_oversampling(rng):
    with pytest.raises(ValueError):
        match_hard(rng.normal(size=(5, 3)), rng.normal(size=(3, 3)))
