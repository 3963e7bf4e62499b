import numpy as np
import pytest

from eegraph.graph import (
    AdjacencyMask,
    BaseAdjacency,
    ChebLayerWeights,
    GraphWarning,
    cheb_conv,
    cheb_conv_backward,
    effective_adjacency,
    masked_scaled_laplacian,
    masked_scaled_laplacian_backward,
    normalized_laplacian,
    normalized_laplacian_backward,
    power_iteration,
    scale_laplacian,
    scale_laplacian_backward,
)
from eegraph.tensor import Tensor, finite_diff_check

from oracles import dense_spectral_conv, random_graph


class TestNormalizedLaplacian:
    def test_two_node_graph(self):
        lap, _ = normalized_laplacian(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.allclose(lap, [[1.0, -1.0], [-1.0, 1.0]], atol=1e-12)

    def test_three_node_complete(self):
        adj = np.ones((3, 3)) - np.eye(3)
        lap, _ = normalized_laplacian(adj)
        expected = np.eye(3) - 0.5 * adj
        assert np.allclose(lap, expected, atol=1e-12)

    def test_isolated_node_gets_identity_row(self):
        adj = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.warns(GraphWarning):
            lap, _ = normalized_laplacian(adj)
        assert np.allclose(lap[2], [0.0, 0.0, 1.0])
        assert np.allclose(lap[:, 2], [0.0, 0.0, 1.0])

    def test_eigenvalues_in_zero_two(self):
        rng = np.random.default_rng(21)
        for n in range(2, 7):
            lap, _ = normalized_laplacian(random_graph(rng, n))
            evals = np.linalg.eigvalsh(lap)
            assert evals.min() > -1e-9
            assert evals.max() < 2.0 + 1e-9


class TestScaleLaplacian:
    def test_two_node_hand_case(self):
        lap = np.array([[1.0, -1.0], [-1.0, 1.0]])  # eigenvalues {0, 2}
        scaled = scale_laplacian(lap)
        assert scaled.lambda_max == pytest.approx(2.0, abs=1e-8)
        assert np.allclose(scaled.matrix, [[0.0, -1.0], [-1.0, 0.0]], atol=1e-8)
        assert not scaled.fallback

    def test_zero_matrix_falls_back(self):
        with pytest.warns(GraphWarning):
            scaled = scale_laplacian(np.zeros((3, 3)))
        assert scaled.fallback
        assert scaled.lambda_max == 2.0
        assert np.allclose(scaled.matrix, -np.eye(3))

    def test_largest_eigenvalue_becomes_one(self):
        rng = np.random.default_rng(4)
        for n in range(3, 7):
            lap, _ = normalized_laplacian(random_graph(rng, n))
            scaled = scale_laplacian(lap)
            top = np.linalg.eigvalsh(scaled.matrix).max()
            assert top == pytest.approx(1.0, abs=1e-6)

    def test_spectral_radius_bound_via_power_iteration(self):
        rng = np.random.default_rng(40)
        for n in range(3, 7):
            lap, _ = normalized_laplacian(random_graph(rng, n))
            scaled = scale_laplacian(lap)
            radius, _, ok = power_iteration(scaled.matrix)
            assert ok
            assert abs(radius) <= 1.0 + 1e-6

    def test_symmetry_preserved(self):
        rng = np.random.default_rng(9)
        lap, _ = normalized_laplacian(random_graph(rng, 5))
        scaled = scale_laplacian(lap)
        assert np.max(np.abs(scaled.matrix - scaled.matrix.T)) < 1e-9


class TestEffectiveAdjacency:
    def test_all_ones_mask_is_identity_map(self):
        base = BaseAdjacency.fully_connected(4)
        mask = AdjacencyMask.ones_like(base)
        assert np.array_equal(effective_adjacency(base, mask), base.entries)

    def test_all_zero_mask(self):
        base = BaseAdjacency.fully_connected(4)
        mask = AdjacencyMask.ones_like(base)
        mask.values.data[:] = 0.0
        assert np.count_nonzero(effective_adjacency(base, mask)) == 0

    def test_elementwise_scaling(self):
        base = BaseAdjacency.fully_connected(3)
        mask = AdjacencyMask.ones_like(base)
        mask.values.data[0, 1] = 0.5
        eff = effective_adjacency(base, mask)
        assert eff[0, 1] == 0.5
        assert eff[1, 0] == 1.0

    def test_mask_text_roundtrip(self, tmp_path):
        base = BaseAdjacency.fully_connected(5)
        mask = AdjacencyMask.ones_like(base)
        rng = np.random.default_rng(2)
        mask.values.data *= rng.uniform(0.1, 2.0, mask.values.data.shape)
        mask.values.data[1, 3] = 0.0
        mask.frozen[1, 3] = True
        path = tmp_path / "mask.txt"
        mask.export_text(path)
        loaded = AdjacencyMask.import_text(path, n_nodes=5)
        assert np.allclose(loaded.values.data, mask.values.data)
        assert loaded.frozen[1, 3]

    def test_density(self):
        base = BaseAdjacency.fully_connected(64)
        mask = AdjacencyMask.ones_like(base)
        assert mask.density(base) == 1.0
        assert base.n_edges == 4032


class TestChebConv:
    def test_order_one_is_pure_channel_mix(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 3))
        theta = ChebLayerWeights(Tensor(rng.standard_normal((1, 3, 2))))
        lap, _ = normalized_laplacian(random_graph(rng, 4))
        scaled = scale_laplacian(lap)
        out = cheb_conv(x, scaled, theta)
        assert np.allclose(out, x @ theta.theta.data[0])

    def test_zero_operator_order_three(self):
        # T_2(0) = -I, so the output collapses to x(theta_0 - theta_2)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 2))
        theta = ChebLayerWeights(Tensor(rng.standard_normal((3, 2, 2))))
        scaled = scale_laplacian(np.zeros((5, 5)), warn=False)
        scaled.matrix[:] = 0.0  # exercise the recurrence at L~ = 0 exactly
        out = cheb_conv(x, scaled, theta)
        expected = x @ theta.theta.data[0] - x @ theta.theta.data[2]
        assert np.allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("n,order", [(3, 2), (4, 3), (5, 4), (6, 5), (2, 5)])
    def test_matches_dense_spectral_oracle(self, n, order):
        rng = np.random.default_rng(100 * n + order)
        adj = random_graph(rng, n)
        lap, _ = normalized_laplacian(adj)
        scaled = scale_laplacian(lap)
        x = rng.standard_normal((n, 3))
        theta = ChebLayerWeights(Tensor(rng.standard_normal((order, 3, 2))))
        ours = cheb_conv(x, scaled, theta)
        oracle = dense_spectral_conv(lap, scaled.lambda_max, x, theta.theta.data)
        assert np.max(np.abs(ours - oracle)) < 1e-8

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(8)
        lap, _ = normalized_laplacian(random_graph(rng, 4))
        scaled = scale_laplacian(lap)
        theta = ChebLayerWeights(Tensor(rng.standard_normal((3, 2, 5))))
        xb = rng.standard_normal((6, 4, 2))
        batched = cheb_conv(xb, scaled, theta)
        for i in range(6):
            assert np.allclose(batched[i], cheb_conv(xb[i], scaled, theta))


class TestGradients:
    def test_theta_and_input_gradients(self):
        rng = np.random.default_rng(31)
        n, order = 5, 4
        lap, _ = normalized_laplacian(random_graph(rng, n))
        scaled = scale_laplacian(lap)
        x = Tensor(rng.standard_normal((n, 2)))
        theta = ChebLayerWeights(Tensor(rng.standard_normal((order, 2, 3))))
        w = rng.standard_normal((n, 3))  # fixed projection to a scalar loss

        def f():
            out = cheb_conv(x.data, scaled, theta)
            dx, _ = cheb_conv_backward(w, x.data, scaled, theta, need_dlap=False)
            x.add_grad(dx)
            return float((out * w).sum())

        assert finite_diff_check(f, [x, theta.theta], h=1e-5) < 1e-4

    def test_mask_gradient_through_full_chain(self):
        # gradient flows mask -> effective adjacency -> normalized Laplacian
        # -> scaled Laplacian (including lambda_max) -> Chebyshev filter
        rng = np.random.default_rng(17)
        n, order = 5, 3
        base = BaseAdjacency.fully_connected(n)
        mask = AdjacencyMask.ones_like(base)
        mask.values.data *= rng.uniform(0.6, 1.4, (n, n))  # asymmetric, positive degrees
        np.fill_diagonal(mask.values.data, 0.0)
        x = rng.standard_normal((n, 2))
        theta = ChebLayerWeights(Tensor(rng.standard_normal((order, 2, 2))))
        w = rng.standard_normal((n, 2))

        def f():
            scaled, cache = masked_scaled_laplacian(base, mask, warn=False)
            out = cheb_conv(x, scaled, theta)
            _, dlap = cheb_conv_backward(
                np.broadcast_to(w, out.shape).copy(), x, scaled, theta)
            masked_scaled_laplacian_backward(dlap, cache, base, mask)
            return float((out * w).sum())

        assert finite_diff_check(f, [mask.values], h=1e-5) < 1e-4

    def test_frozen_entries_get_no_gradient(self):
        rng = np.random.default_rng(23)
        n = 4
        base = BaseAdjacency.fully_connected(n)
        mask = AdjacencyMask.ones_like(base)
        mask.values.data[0, 1] = 0.0
        mask.frozen[0, 1] = True
        x = rng.standard_normal((n, 2))
        theta = ChebLayerWeights(Tensor(rng.standard_normal((3, 2, 2))))
        scaled, cache = masked_scaled_laplacian(base, mask, warn=False)
        out = cheb_conv(x, scaled, theta)
        _, dlap = cheb_conv_backward(np.ones_like(out), x, scaled, theta)
        masked_scaled_laplacian_backward(dlap, cache, base, mask)
        mask.gate_gradient()
        assert mask.values.grad[0, 1] == 0.0
        assert np.any(mask.values.grad != 0.0)

    def test_laplacian_backward_alone(self):
        rng = np.random.default_rng(29)
        n = 4
        adj = Tensor(rng.uniform(0.3, 1.2, (n, n)))
        np.fill_diagonal(adj.data, 0.0)
        w = rng.standard_normal((n, n))

        def f():
            lap, cache = normalized_laplacian(adj.data, warn=False)
            adj.add_grad(normalized_laplacian_backward(w, cache))
            return float((lap * w).sum())

        assert finite_diff_check(f, [adj], h=1e-5) < 1e-4

    def test_scale_backward_includes_lambda_term(self):
        rng = np.random.default_rng(37)
        n = 5
        sym = rng.standard_normal((n, n))
        lap_t = Tensor(0.5 * (sym + sym.T) + 2.0 * np.eye(n))  # PD-ish, symmetric
        w = rng.standard_normal((n, n))

        def f():
            scaled = scale_laplacian(lap_t.data, warn=False)
            lap_t.add_grad(scale_laplacian_backward(w, scaled))
            return float((scaled.matrix * w).sum())

        assert finite_diff_check(f, [lap_t], h=1e-5) < 1e-4
