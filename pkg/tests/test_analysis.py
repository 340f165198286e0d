import numpy as np
import pytest

from conftest import quadratic_oracle, random_batch, random_params
from flatfed.analysis import (
    ProbeConfig,
    eval_plane,
    eval_random_surface,
    feature_norm_probe,
    per_client_lambda_max,
    plane_basis,
    plane_coords,
    plane_grid,
    probe_batch,
    sharpness_ratio,
    spectrum_export,
    surface_export,
    plane_export,
    top_k_eigs,
    top_k_from_hvp,
)
from flatfed.autodiff import hvp
from flatfed.data import ClientShard, Dataset, make_batch, synth_classification
from flatfed.errors import GeometryError, NumericsError, UsageError
from flatfed.federation import ClientUpdate, evaluate
from flatfed.models import init_params, mlp
from flatfed.optim import SgdConfig, SgdState, sgd_step
from flatfed.autodiff import loss_and_grad
from flatfed.tensor import ParamVector, Tensor


def pv(values):
    data = np.asarray(values, dtype=np.float64)
    return ParamVector(data, (("w", (data.size,), 0),))


class TestPowerIteration:
    def test_diagonal_quadratic_top2(self):
        a = np.diag([3.0, 1.0])
        rep = top_k_from_hvp(lambda v: a @ v, 2, 2, max_iters=500, tol=1e-12)
        np.testing.assert_allclose(rep.eigenvalues, [3.0, 1.0], rtol=1e-8)

    def test_isotropic_all_ones(self):
        rep = top_k_from_hvp(lambda v: v, 6, 3, max_iters=100, tol=1e-10)
        np.testing.assert_allclose(rep.eigenvalues, [1.0, 1.0, 1.0], rtol=1e-10)

    def test_tiny_mlp_matches_dense_eigensolve(self):
        # dense oracle: assemble H column by column from the same hvp on
        # basis vectors, then a standard symmetric eigensolve
        ds = synth_classification(2, 40, 3, seed=3)
        model = mlp([3, 4, 2])  # 26 params
        theta = init_params(model, 1)
        batch = make_batch(ds, np.arange(ds.n))
        cfg = SgdConfig(lr=0.1)
        state = SgdState()
        for _ in range(300):
            _, g = loss_and_grad(theta, model, batch)
            theta, state = sgd_step(theta, g, state, cfg)

        def op(v):
            return hvp(theta, model, batch, theta.like(v)).data

        n = theta.size
        dense = np.zeros((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            dense[:, i] = op(e)
        dense = (dense + dense.T) / 2.0
        top5 = sorted(sorted(np.linalg.eigvalsh(dense), key=abs, reverse=True)[:5], reverse=True)

        rep = top_k_from_hvp(op, n, 5, max_iters=1000, tol=1e-12, seed=0)
        for found, ref in zip(rep.eigenvalues, top5):
            assert abs(found - ref) / abs(ref) < 1e-3

    def test_deflated_vectors_orthogonal(self):
        rng = np.random.default_rng(4)
        q, _ = np.linalg.qr(rng.normal(size=(10, 10)))
        a = q @ np.diag([9.0, 7.0, 4.0, 2.0, 1.5, 1.0, 0.8, 0.5, 0.3, 0.1]) @ q.T
        rep = top_k_from_hvp(lambda v: a @ v, 10, 4, max_iters=500, tol=1e-12)
        gram = rep.vectors @ rep.vectors.T
        assert np.max(np.abs(gram - np.eye(4))) < 1e-6

    def test_residuals_small_on_converged_pairs(self):
        rng = np.random.default_rng(5)
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        a = q @ np.diag([5.0, 3.0, 2.0, 1.0, 0.7, 0.5, 0.2, 0.1]) @ q.T
        rep = top_k_from_hvp(lambda v: a @ v, 8, 3, max_iters=200, tol=1e-10)
        assert all(r < 1e-2 for r in rep.residuals)

    def test_nan_hvp_reports_eigenvalue_index(self):
        def bad(v):
            return np.full_like(v, np.nan)

        with pytest.raises(NumericsError, match="eigenvalue 1"):
            top_k_from_hvp(bad, 4, 1)

    def test_paper_default_iteration_cap(self, rng):
        spec = mlp([3, 4, 2])
        params = random_params(spec, rng)
        batch = random_batch(spec, rng, n=10)
        rep = top_k_eigs(params, spec, batch, k=1)
        assert rep.iters_used[0] <= 20


class TestSharpnessRatio:
    def test_hand_ratio(self):
        rep = top_k_from_hvp(lambda v: np.diag([10.0, 9, 8, 7, 5]) @ v, 5, 5, max_iters=500, tol=1e-12)
        assert sharpness_ratio(rep) == pytest.approx(2.0, rel=1e-6)

    def test_isotropic_ratio_is_one(self):
        rep = top_k_from_hvp(lambda v: v, 8, 5, max_iters=50, tol=1e-10)
        assert sharpness_ratio(rep) == pytest.approx(1.0, rel=1e-9)

    def test_needs_five_eigenvalues(self):
        rep = top_k_from_hvp(lambda v: v, 8, 3, max_iters=50)
        with pytest.raises(UsageError):
            sharpness_ratio(rep)

    def test_zero_lambda5_undefined(self):
        rep = top_k_from_hvp(lambda v: np.diag([2.0, 0, 0, 0, 0]) @ v, 5, 5, max_iters=200)
        assert sharpness_ratio(rep) is None


class TestPerClientLambdaMax:
    def quadratic_probe(self, curvatures):
        shards = [ClientShard(i, np.arange(3), 3, np.array([3])) for i in range(len(curvatures))]
        ds = Dataset(Tensor(np.zeros((3, 1))), np.zeros(3, dtype=np.int64), 1)

        def builder(theta, shard):
            c = curvatures[shard.client_id]
            return lambda v: c * v

        model = mlp([1, 1])
        return shards, ProbeConfig(model=model, dataset=ds, shards=shards, hvp_builder=builder)

    def test_quadratic_harness_analytic_lambda(self):
        shards, probe = self.quadratic_probe([2.5, 7.0])
        ups = [ClientUpdate(i, pv([0.0, 0.0]), 3, 0.0) for i in range(2)]
        out = per_client_lambda_max(ups, probe)
        assert out[0] == (0, pytest.approx(2.5, rel=1e-8))
        assert out[1] == (1, pytest.approx(7.0, rel=1e-8))

    def test_identical_clients_identical_lambda(self):
        ds = synth_classification(3, 20, 4, seed=2)
        model = mlp([4, 5, 3])
        theta = init_params(model, 0)
        idx = np.arange(30)
        shards = [ClientShard.build(ds, i, idx) for i in range(3)]
        ups = [ClientUpdate(i, theta, 30, 0.0) for i in range(3)]
        probe = ProbeConfig(model=model, dataset=ds, shards=shards, seed=1)
        out = per_client_lambda_max(ups, probe)
        lams = [lam for _, lam in out]
        assert lams[0] == lams[1] == lams[2]

    def test_row_count_matches_probed_clients(self):
        shards, probe = self.quadratic_probe([1.0, 2.0, 3.0])
        ups = [ClientUpdate(i, pv([0.0]), 3, 0.0) for i in range(3)]
        assert len(per_client_lambda_max(ups, probe)) == 3


class TestPlaneBasis:
    def test_hand_gram_schmidt(self):
        u, v = plane_basis(pv([0.0, 0.0]), pv([1.0, 0.0]), pv([0.0, 2.0]))
        np.testing.assert_allclose(u.data, [1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(v.data, [0.0, 1.0], atol=1e-15)

    def test_orthonormal_for_random_triples(self, rng):
        for _ in range(20):
            t1, t2, t3 = (pv(rng.normal(size=12)) for _ in range(3))
            u, v = plane_basis(t1, t2, t3)
            assert abs(np.linalg.norm(u.data) - 1.0) < 1e-10
            assert abs(np.linalg.norm(v.data) - 1.0) < 1e-10
            assert abs(np.dot(u.data, v.data)) < 1e-10

    def test_invariant_to_rescaling_third_anchor(self, rng):
        t1, t2, t3 = (pv(rng.normal(size=9)) for _ in range(3))
        u1, v1 = plane_basis(t1, t2, t3)
        stretched = pv(t1.data + 7.5 * (t3.data - t1.data))
        u2, v2 = plane_basis(t1, t2, stretched)
        np.testing.assert_allclose(u1.data, u2.data, atol=1e-10)
        np.testing.assert_allclose(v1.data, v2.data, atol=1e-10)

    def test_degenerate_inputs_raise(self):
        t1 = pv([0.0, 0.0])
        with pytest.raises(GeometryError):
            plane_basis(t1, t1, pv([1.0, 1.0]))
        with pytest.raises(GeometryError):
            plane_basis(t1, pv([1.0, 0.0]), pv([2.0, 0.0]))


class TestEvalPlane:
    def quad_metric(self, a):
        loss, _ = quadratic_oracle(a)
        return lambda p: loss(p.data)

    def test_two_by_two_quadratic_hand_values(self):
        metric = self.quad_metric(np.diag([2.0, 4.0]))
        theta1 = pv([0.0, 0.0])
        basis = (pv([1.0, 0.0]), pv([0.0, 1.0]))
        xs = np.array([0.0, 1.0])
        ys = np.array([0.0, 2.0])
        values = eval_plane(theta1, basis, xs, ys, None, None, metric)
        # loss(x, y) = x^2 + 2 y^2
        np.testing.assert_allclose(values, [[0.0, 1.0], [8.0, 9.0]], atol=1e-12)

    def test_origin_value_equals_metric_at_theta1_exactly(self, rng):
        ds = synth_classification(3, 15, 4, seed=0)
        model = mlp([4, 6, 3])
        t1 = init_params(model, 1)
        t2 = init_params(model, 2)
        t3 = init_params(model, 3)
        grid = plane_grid(t1, t2, t3, model, ds, n=9, metric="loss")
        kx, ky = grid.origin_node
        assert grid.xs[kx] == 0.0 and grid.ys[ky] == 0.0
        assert grid.values[ky, kx] == evaluate(t1, model, ds)[1]

    def test_anchors_inside_extent(self, rng):
        ds = synth_classification(2, 10, 3, seed=1)
        model = mlp([3, 2])
        t1, t2, t3 = (init_params(model, s) for s in (1, 2, 3))
        grid = plane_grid(t1, t2, t3, model, ds, n=21)
        (x0, x1), (y0, y1) = grid.extent
        for ax, ay in grid.anchors:
            assert x0 - 1e-12 <= ax <= x1 + 1e-12
            assert y0 - 1e-12 <= ay <= y1 + 1e-12

    def test_default_n_21_in_export(self):
        ds = synth_classification(2, 10, 3, seed=1)
        model = mlp([3, 2])
        t1, t2, t3 = (init_params(model, s) for s in (1, 2, 3))
        grid = plane_grid(t1, t2, t3, model, ds)
        export = plane_export(grid)
        assert export["kind"] == "plane"
        assert export["meta"]["N"] == 21
        assert len(export["values"]) == 21 * 21

    def test_evaluation_side_effect_free(self):
        ds = synth_classification(2, 10, 3, seed=1)
        model = mlp([3, 2])
        t1, t2, t3 = (init_params(model, s) for s in (1, 2, 3))
        before = t1.data.copy()
        plane_grid(t1, t2, t3, model, ds, n=5)
        assert np.array_equal(t1.data, before)


class TestRandomSurface:
    def test_center_equals_loss_at_theta(self):
        ds = synth_classification(3, 10, 4, seed=2)
        model = mlp([4, 3])
        theta = init_params(model, 5)
        grid = eval_random_surface(theta, model, ds, resolution=5, seed=3)
        assert grid.center_value == evaluate(theta, model, ds)[1]
        mid = len(grid.offsets) // 2
        assert grid.offsets[mid] == 0.0
        assert grid.values[mid, mid] == grid.center_value

    def test_same_seed_identical(self):
        ds = synth_classification(2, 8, 3, seed=0)
        model = mlp([3, 2])
        theta = init_params(model, 1)
        a = eval_random_surface(theta, model, ds, resolution=5, seed=9)
        b = eval_random_surface(theta, model, ds, resolution=5, seed=9)
        assert np.array_equal(a.values, b.values)

    def test_quadratic_slice_is_parabola(self, rng):
        # along d1 (b = 0) the restriction of a quadratic loss is exactly
        # a parabola in the offset; a degree-2 fit must be near-perfect
        a = rng.normal(size=(6, 6))
        a = a @ a.T / 6.0 + np.eye(6)
        loss, _ = quadratic_oracle(a, rng.normal(size=6))
        theta = pv(rng.normal(size=6))
        grid = eval_random_surface(
            theta, None, None, resolution=9, seed=2, metric=lambda p: loss(p.data)
        )
        mid = len(grid.offsets) // 2
        slice_vals = grid.values[mid, :]  # b = 0 row
        coeffs = np.polyfit(grid.offsets, slice_vals, 2)
        fit = np.polyval(coeffs, grid.offsets)
        assert float(np.max(np.abs(fit - slice_vals))) < 1e-8


class TestFeatureNormProbe:
    def test_zero_network_gives_zero_norms(self):
        ds = synth_classification(2, 10, 3, seed=0)
        model = mlp([3, 2])
        theta = ParamVector(np.zeros(model.num_params), model.manifest)
        shards = [ClientShard.build(ds, 0, np.arange(10)), ClientShard.build(ds, 1, np.arange(10, 20))]
        out = feature_norm_probe(theta, model, ds, shards)
        assert out == [(0, 0.0), (1, 0.0)]

    def test_hand_norm_three_four_five(self):
        # single sample x = 1, linear weights (3, 4): logits (3, 4), norm 5
        model = mlp([1, 2])
        theta = ParamVector(np.array([3.0, 4.0, 0.0, 0.0]), model.manifest)
        ds = Dataset(Tensor(np.array([[1.0]])), np.array([0]), 2)
        out = feature_norm_probe(theta, model, ds, [ClientShard.build(ds, 0, np.array([0]))])
        assert out[0][1] == pytest.approx(5.0, abs=1e-12)

    def test_identical_shards_identical_norms(self):
        ds = synth_classification(2, 10, 3, seed=4)
        model = mlp([3, 4, 2])
        theta = init_params(model, 2)
        idx = np.arange(8)
        shards = [ClientShard.build(ds, i, idx) for i in range(2)]
        out = feature_norm_probe(theta, model, ds, shards)
        assert out[0][1] == out[1][1]


def test_probe_batch_fixed_and_seeded():
    ds = synth_classification(3, 50, 4, seed=0)
    a = probe_batch(ds, size=32, seed=5)
    b = probe_batch(ds, size=32, seed=5)
    assert np.array_equal(a.x, b.x)
    assert a.size == 32
    full = probe_batch(ds, size=10_000, seed=5)
    assert full.size == ds.n


def test_spectrum_and_surface_exports_roundtrip_schema():
    rep = top_k_from_hvp(lambda v: np.diag([3.0, 1.0, 0.5]) @ v, 3, 2, max_iters=200, tol=1e-10)
    ex = spectrum_export(rep, seed=7)
    assert ex["kind"] == "spectrum"
    assert ex["meta"]["k"] == 2
    assert ex["values"][0] >= ex["values"][1]

    ds = synth_classification(2, 8, 3, seed=0)
    model = mlp([3, 2])
    theta = init_params(model, 1)
    grid = eval_random_surface(theta, model, ds, resolution=3, seed=1)
    ex = surface_export(grid)
    assert ex["kind"] == "surface"
    assert ex["meta"]["resolution"] == 3
    assert len(ex["values"]) == 9
