import numpy as np
import pytest
from numpy.testing import assert_array_equal

from cfmatch.autodiff import ShapeError, Tensor, backward, no_grad, zero_grad
from cfmatch.cf import QueryPoints, ecf
from cfmatch.samplers import (
    AugmentedPoints,
    SamplerParams,
    apply_sampler,
    augment_with_loss,
    augment_with_signal,
    build_knn_graph,
    gnn_forward,
    init_sampler,
    mlp_forward,
    propose,
    sample_base_points,
)
from cfmatch.training import AdamState, adam_step


def qp(arr):
    return QueryPoints(Tensor(np.asarray(arr, dtype=np.float64)))


def grids_for(points, x_shift=0.0):
    rng = np.random.default_rng(17)
    x = Tensor(rng.normal(size=(50, points.dim)) + x_shift)
    y = Tensor(rng.normal(size=(50, points.dim)))
    return ecf(x, points), ecf(y, points)


def zero_head(params):
    params.weights["wh"].data[...] = 0.0
    params.weights["bh"].data[...] = 0.0
    return params


# ---------------------------------------------------------------------------
# base points


def test_base_points_are_deterministic_per_seed():
    a = sample_base_points(16, 3, 7)
    b = sample_base_points(16, 3, 7)
    assert_array_equal(a.points.data, b.points.data)


def test_base_points_match_standard_normal_moments():
    pts = sample_base_points(4096, 1, 0).points.data
    assert -0.1 < pts.mean() < 0.1
    assert 0.9 < pts.var() < 1.1


def test_two_base_points_are_distinct():
    pts = sample_base_points(2, 5, 3).points.data
    assert not np.array_equal(pts[0], pts[1])


def test_base_points_validate_sizes():
    with pytest.raises(ShapeError):
        sample_base_points(1, 2, 0)
    with pytest.raises(ShapeError):
        sample_base_points(4, 0, 0)


# ---------------------------------------------------------------------------
# kNN graph


def test_knn_graph_on_collinear_points():
    graph = build_knn_graph(qp([[0.0], [1.0], [10.0]]), 1)
    assert_array_equal(graph.edges[:, 0], [1, 0, 1])


def test_knn_graph_with_large_k_is_complete():
    points = qp(np.random.default_rng(2).normal(size=(6, 2)))
    graph = build_knn_graph(points, 50)
    assert graph.k == 5
    for i in range(6):
        assert sorted(graph.edges[i]) == sorted(set(range(6)) - {i})


def brute_force_neighbours(pts, k):
    n = pts.shape[0]
    out = np.empty((n, k), dtype=np.intp)
    for i in range(n):
        dist = np.linalg.norm(pts - pts[i], axis=1)
        ranked = sorted((float(dist[j]), j) for j in range(n) if j != i)
        out[i] = [j for _, j in ranked[:k]]
    return out


def test_knn_graph_matches_brute_force_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        pts = rng.normal(size=(rng.integers(10, 60), 2))
        k = int(rng.integers(1, 9))
        graph = build_knn_graph(QueryPoints(Tensor(pts)), k)
        assert_array_equal(graph.edges, brute_force_neighbours(pts, k))


def test_knn_neighbour_distances_are_separating():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(100, 2))
    graph = build_knn_graph(QueryPoints(Tensor(pts)), 8)
    dist = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
    for i in range(100):
        neighbours = set(graph.edges[i].tolist())
        others = [j for j in range(100) if j != i and j not in neighbours]
        assert dist[i, graph.edges[i]].max() <= dist[i, others].min()


def test_knn_graph_excludes_self_even_with_duplicates():
    graph = build_knn_graph(qp([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]]), 1)
    assert_array_equal(graph.edges[:, 0], [1, 0, 0])


# ---------------------------------------------------------------------------
# augmentation


def test_augmentation_of_identical_ecfs_is_nearly_zero():
    points = sample_base_points(8, 2, 1)
    gx, _ = grids_for(points)
    aug = augment_with_loss(points, gx, gx)
    assert (aug.features.data[:, -1] <= 1e-6 + 1e-12).all()


def test_augmentation_of_antipodal_cfs_is_two():
    from cfmatch.cf import ComplexGrid

    points = qp([[1.0]])
    gx = ComplexGrid(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    gy = ComplexGrid(Tensor(np.array([-1.0])), Tensor(np.array([0.0])))
    aug = augment_with_loss(points, gx, gy)
    assert abs(aug.features.data[0, -1] - 2.0) < 1e-9


def test_augmentation_shape_contract():
    points = sample_base_points(16, 3, 2)
    gx, gy = grids_for(points)
    aug = augment_with_loss(points, gx, gy)
    assert aug.features.shape == (16, 4)
    assert_array_equal(aug.features.data[:, :3], points.points.data)


def test_augmentation_is_detached_from_gradients():
    points = sample_base_points(8, 2, 3)
    gx, gy = grids_for(points, x_shift=0.5)
    aug = augment_with_loss(points, gx, gy)
    assert not aug.features.requires_grad


def test_augment_with_signal_rejects_negative_values():
    points = sample_base_points(4, 2, 4)
    with pytest.raises(ShapeError):
        augment_with_signal(points, np.array([0.1, -0.2, 0.3, 0.4]))


# ---------------------------------------------------------------------------
# forward passes


def test_gnn_with_zero_head_is_identity():
    points = sample_base_points(12, 2, 5)
    gx, gy = grids_for(points, x_shift=1.0)
    params = zero_head(init_sampler("gnn", 2, 6))
    moved = propose(points, gx, gy, params)
    assert_array_equal(moved.points.data, points.points.data)


def test_mlp_with_zero_head_is_identity():
    points = sample_base_points(12, 2, 7)
    gx, gy = grids_for(points, x_shift=1.0)
    params = zero_head(init_sampler("mlp", 2, 8))
    moved = propose(points, gx, gy, params)
    assert_array_equal(moved.points.data, points.points.data)


def test_gaussian_kind_returns_points_unchanged():
    points = sample_base_points(8, 2, 9)
    gx, gy = grids_for(points)
    params = init_sampler("gaussian", 2, 0)
    assert propose(points, gx, gy, params) is points


def test_unknown_kind_is_rejected():
    with pytest.raises(ValueError):
        SamplerParams(kind="magic")


def fraction_bound_violations(points, moved, alpha):
    # compare magnitudes against the rounded bounds themselves: rounding is
    # monotone, so |base*(1+a*delta)| <= fl(|base|*(1+a)) holds exactly
    base = points.points.data
    new = moved.points.data
    bad = 0
    zero = base == 0.0
    bad += int((new[zero] != 0.0).sum())
    nz = ~zero
    magnitude = np.abs(new[nz])
    upper = np.abs(base[nz]) * (1.0 + alpha)
    lower = np.abs(base[nz]) * (1.0 - alpha)
    bad += int(((magnitude > upper) | (magnitude < lower)).sum())
    bad += int((np.sign(new[nz]) != np.sign(base[nz])).sum())
    return bad


@pytest.mark.parametrize("kind", ["mlp", "gnn"])
def test_fraction_update_bound_and_zero_fixpoint(kind):
    rng = np.random.default_rng(11)
    for trial in range(30):
        pts = rng.normal(size=(10, 3))
        pts[rng.integers(0, 10), rng.integers(0, 3)] = 0.0
        points = qp(pts)
        gx, gy = grids_for(points, x_shift=rng.uniform(-1, 1))
        params = init_sampler(kind, 3, [12, trial])
        for w in params.weights.values():  # exaggerate to push tanh to saturation
            w.data *= rng.uniform(0.0, 30.0)
        moved = propose(points, gx, gy, params)
        assert fraction_bound_violations(points, moved, params.alpha) == 0
        signs_base = np.sign(points.points.data)
        signs_new = np.sign(moved.points.data)
        assert_array_equal(signs_base, signs_new)


def test_mlp_is_row_equivariant():
    rng = np.random.default_rng(13)
    feats = np.concatenate([rng.normal(size=(9, 2)), rng.uniform(0, 1, (9, 1))], axis=1)
    params = init_sampler("mlp", 2, 14)
    moved = mlp_forward(AugmentedPoints(Tensor(feats)), params)
    perm = rng.permutation(9)
    moved_perm = mlp_forward(AugmentedPoints(Tensor(feats[perm])), params)
    assert_array_equal(moved.points.data[perm], moved_perm.points.data)


def test_gnn_locality_with_one_layer():
    # two clusters far apart, k=1: with one layer, a node only sees itself
    # and its nearest neighbour, so edits in the other cluster cannot reach it
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [50.0, 50.0], [50.1, 50.0]])
    points = qp(pts)
    graph = build_knn_graph(points, 1)
    params = init_sampler("gnn", 2, 15, layers=1, k=1)
    signal = np.array([0.5, 0.5, 0.5, 0.5])
    base = gnn_forward(points, graph, augment_with_signal(points, signal), params)
    bumped_signal = signal.copy()
    bumped_signal[3] = 7.5
    bumped = gnn_forward(points, graph, augment_with_signal(points, bumped_signal), params)
    assert_array_equal(base.points.data[:2], bumped.points.data[:2])
    assert not np.array_equal(base.points.data[3], bumped.points.data[3])


def test_proposals_are_deterministic():
    points = sample_base_points(16, 2, 16)
    gx, gy = grids_for(points, x_shift=0.7)
    params = init_sampler("gnn", 2, 17)
    a = propose(points, gx, gy, params)
    b = propose(points, gx, gy, params)
    assert_array_equal(a.points.data, b.points.data)


def test_gnn_forward_validates_inputs():
    points = sample_base_points(8, 2, 18)
    graph = build_knn_graph(points, 3)
    params = init_sampler("gnn", 2, 19)
    bad_aug = AugmentedPoints(Tensor(np.ones((8, 5))))
    with pytest.raises(ShapeError):
        gnn_forward(points, graph, bad_aug, params)
    other_graph = build_knn_graph(sample_base_points(9, 2, 20), 3)
    gx, gy = grids_for(points)
    with pytest.raises(ShapeError):
        gnn_forward(points, other_graph, augment_with_loss(points, gx, gy), params)


def test_ascent_training_climbs_a_fixed_surface():
    # maximizing a fixed Gaussian density: after a short ascent run the
    # proposed points should sit higher on the surface than the raw draws
    from cfmatch.experiments import PocSurface

    surface = PocSurface(mean=np.array([1.0, -0.8]), cov=np.diag([0.5, 0.8]))
    gains = []
    for seed in range(20):
        params = init_sampler("gnn", 2, [21, seed])
        state = AdamState.for_params(params.weights)
        for step in range(120):
            points = sample_base_points(32, 2, [22, seed, step])
            aug = augment_with_signal(points, surface.pdf(points.points.data))
            zero_grad(params.weights)
            moved = apply_sampler(points, aug, params)
            centered = moved.points - Tensor(surface.mean)
            from cfmatch.autodiff import matmul

            quad = (matmul(centered, Tensor(surface.prec)) * centered).sum()
            backward(quad * (-0.5))
            adam_step(params.weights, {n: w.grad for n, w in params.weights.items()},
                      state, 1e-2, "ascent")
        with no_grad():
            points = sample_base_points(256, 2, [23, seed])
            aug = augment_with_signal(points, surface.pdf(points.points.data))
            moved = apply_sampler(points, aug, params)
        gains.append(surface.pdf(moved.points.data).mean() - surface.pdf(points.points.data).mean())
    assert np.median(gains) >= 0.0
