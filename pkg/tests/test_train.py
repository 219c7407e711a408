import numpy as np
import pytest

from greenmg.errors import DegenerateTarget, NumericalBlowup, ShapeMismatch
from greenmg.mlmi import dense_apply
from greenmg.nn import SubdomainTag, classify_indices, init_params, mlp_forward
from greenmg.problems import generate_dataset, problem_spec
from greenmg.train import (Objective, TrainConfig, all_pairs, compute_metrics, desk_config, evaluate,
                           export_learned_kernel, lr_at, make_predictor, relative_l2_loss, train_model)


@pytest.fixture(scope="module")
def small_data():
    spec = problem_spec("poisson1d", 17)
    return generate_dataset(spec, 6, 0)


@pytest.fixture(scope="module")
def desk_data():
    spec = problem_spec("poisson1d", 129)
    return generate_dataset(spec, 100, 0), generate_dataset(spec, 100, 1)


def perturbed(params, rng, scale=0.05):
    out = params.copy()
    for name in out.names:
        out.arrays[name] += rng.normal(0, scale, out[name].shape)
    return out


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(p=0.0)
        with pytest.raises(ValueError):
            TrainConfig(milestones=(300, 100))
        with pytest.raises(ValueError):
            TrainConfig(variant="GX")

    def test_roundtrip(self):
        cfg = desk_config("GL-aug", "poisson2d", p=0.2, seed=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.batch_size == 20 and cfg.epochs == 300 and cfg.milestones == (100, 300)

    def test_out_width(self):
        assert TrainConfig(variant="GL").out_width == 1
        assert TrainConfig(variant="GL-aug").out_width == 2
        assert TrainConfig(variant="GreenMGNet").out_width == 2


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [(0, 0.01), (999, 0.01), (1000, 0.001), (2999, 0.001),
                                                (3000, 0.0001), (5000, 0.0001)])
    def test_one_dimensional(self, epoch, expected):
        assert lr_at(epoch, desk_config("GL", "poisson1d")) == pytest.approx(expected, rel=1e-12)

    def test_two_dimensional(self):
        cfg = desk_config("GL", "darcy2d")
        assert lr_at(99, cfg) == pytest.approx(0.01)
        assert lr_at(100, cfg) == pytest.approx(0.001)
        assert lr_at(300, cfg) == pytest.approx(0.0001)


class TestLoss:
    def test_examples(self, rng):
        u = rng.normal(size=(4, 9))
        assert relative_l2_loss(u, u)[0] == 0.0
        assert relative_l2_loss(np.zeros_like(u), u)[0] == 1.0
        assert relative_l2_loss(1.1 * u, u)[0] == pytest.approx(0.1, abs=1e-12)

    def test_zero_diff_has_zero_cotangent(self, rng):
        u = rng.normal(size=(3, 5))
        assert np.all(relative_l2_loss(u, u)[1] == 0)

    def test_degenerate_target(self):
        with pytest.raises(DegenerateTarget):
            relative_l2_loss(np.ones((2, 3)), np.vstack([np.ones(3), np.zeros(3)]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            relative_l2_loss(np.ones((2, 3)), np.ones((2, 4)))

    def test_cotangent_matches_finite_differences(self, rng):
        u = rng.normal(size=(3, 6))
        pred = u + rng.normal(0, 0.3, u.shape)
        _, cot = relative_l2_loss(pred, u)
        step = 1e-7
        for index in [(0, 0), (1, 3), (2, 5)]:
            plus, minus = pred.copy(), pred.copy()
            plus[index] += step
            minus[index] -= step
            fd = (relative_l2_loss(plus, u)[0] - relative_l2_loss(minus, u)[0]) / (2 * step)
            assert cot[index] == pytest.approx(fd, rel=1e-6)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(problem_spec("poisson1d", 129), 20, 4)


class TestMetrics:
    def test_perfect_kernel(self, data):
        h = data.spec.h
        metrics = compute_metrics(lambda f: dense_apply(data.kernel, f, h, 1), data, data.kernel)
        assert metrics.eps_G == 0.0
        assert metrics.eps_u <= 2e-3

    def test_zero_kernel(self, data):
        zero = np.zeros_like(data.kernel)
        metrics = compute_metrics(lambda f: dense_apply(zero, f, data.spec.h, 1), data, zero)
        assert metrics.eps_u == 1.0
        assert metrics.eps_G == 1.0

    def test_doubled_kernel(self, data):
        metrics = compute_metrics(lambda f: 0 * f + 1.0, data, 2 * data.kernel)
        assert metrics.eps_G == 1.0

    def test_no_exact_kernel_reports_absent(self):
        data = generate_dataset(problem_spec("airy1d", 33), 3, 0)
        metrics = compute_metrics(lambda f: 0.5 * data.solutions, data, np.zeros((33, 33)))
        assert metrics.eps_G is None
        assert metrics.eps_u == pytest.approx(0.5)

    def test_pointwise_fields(self, data):
        zero = np.zeros_like(data.kernel)
        metrics = compute_metrics(lambda f: dense_apply(zero, f, data.spec.h, 1), data, zero, pointwise=True)
        assert np.array_equal(metrics.E_u, np.abs(data.solutions))
        assert metrics.E_G.shape == data.kernel.shape

    def test_empty_dataset(self, data):
        with pytest.raises(ShapeMismatch):
            compute_metrics(lambda f: f, data.subset(np.arange(0)), None)


class TestObjective:
    def test_full_window_matches_dense(self, small_data, rng):
        params = perturbed(init_params(1, 2, 0), rng)
        F, U = small_data.forcings, small_data.solutions
        dense = Objective("GL-aug", 17, 1).value_and_grad(params, F, U)
        multi = Objective("GreenMGNet", 17, 1, k=1, m=17).value_and_grad(params, F, U)
        assert multi[0] == pytest.approx(dense[0], rel=1e-10)
        for name in params.names:
            assert np.allclose(multi[1][name], dense[1][name], rtol=1e-8, atol=1e-12)

    def test_full_window_matches_dense_2d(self, rng):
        data = generate_dataset(problem_spec("poisson2d", 9), 3, 0)
        params = perturbed(init_params(2, 2, 1), rng)
        dense = Objective("GL-aug", 9, 2).value_and_grad(params, data.forcings, data.solutions)
        multi = Objective("GreenMGNet", 9, 2, k=1, m=9).value_and_grad(params, data.forcings, data.solutions)
        assert multi[0] == pytest.approx(dense[0], rel=1e-10)

    @pytest.mark.parametrize("variant,k,m", [("GreenMGNet", 1, 1), ("GreenMGNet", 2, 1), ("GL-aug", None, None),
                                             ("GL", None, None)])
    def test_gradient_matches_finite_differences(self, small_data, rng, variant, k, m):
        params = perturbed(init_params(1, 1 if variant == "GL" else 2, 2), rng)
        obj = Objective(variant, 17, 1, k=k, m=m)
        F, U = small_data.forcings, small_data.solutions
        _, grads = obj.value_and_grad(params, F, U)
        flat = params.flatten()
        gflat = np.concatenate([grads[name].ravel() for name in params.names])
        for index in rng.choice(flat.size, 5, replace=False):
            step = 1e-6
            up, down = flat.copy(), flat.copy()
            up[index] += step
            down[index] -= step
            fd = (obj.value_and_grad(params.with_flat(up), F, U)[0]
                  - obj.value_and_grad(params.with_flat(down), F, U)[0]) / (2 * step)
            assert abs(gflat[index] - fd) <= 1e-4 * max(abs(fd), 1e-3), (variant, index)

    def test_subsampled_fraction_and_resampling(self, small_data):
        params = init_params(1, 2, 0)
        obj = Objective("GL-aug", 17, 1, p=0.25, seed=3)
        assert obj.fraction == 0.25
        a = obj.value_and_grad(params, small_data.forcings, small_data.solutions)[0]
        b = obj.value_and_grad(params, small_data.forcings, small_data.solutions)[0]
        assert a != b
        again = Objective("GL-aug", 17, 1, p=0.25, seed=3)
        assert again.value_and_grad(params, small_data.forcings, small_data.solutions)[0] == a

    def test_subsampled_estimator_is_unbiased(self, small_data):
        # averaging the 1/p-scaled subset kernel reproduces the full kernel
        obj = Objective("GL", 17, 1, p=0.3, seed=0)
        total = obj.model.inputs.shape[0]
        hits = np.zeros(total)
        draws = 4000
        for _ in range(draws):
            hits[obj._subset()] += 1 / obj.p
        assert np.abs(hits / draws - 1).max() < 0.15
        assert abs(hits.mean() / draws - 1) < 0.01


class TestTraining:
    def test_lr_zero_keeps_params(self, small_data):
        cfg = TrainConfig(variant="GreenMGNet", epochs=1, lr=0.0, k=1, m=1)
        result = train_model(cfg, small_data)
        assert np.array_equal(result.params.flatten(), init_params(1, 2, 0).flatten())
        assert len(result.losses) == 1

    @pytest.mark.parametrize("variant", ["GL", "GL-aug", "GreenMGNet"])
    def test_deterministic(self, small_data, variant):
        cfg = TrainConfig(variant=variant, epochs=5, k=1, m=1, seed=4, p=0.5 if variant == "GL" else 1.0)
        a = train_model(cfg, small_data)
        b = train_model(cfg, small_data)
        assert a.losses == b.losses
        assert np.array_equal(a.params.flatten(), b.params.flatten())

    def test_minibatches(self):
        data = generate_dataset(problem_spec("poisson2d", 9), 7, 0)
        cfg = desk_config("GreenMGNet", "poisson2d", epochs=3, k=1, m=1, batch_size=3)
        result = train_model(cfg, data)
        assert len(result.losses) == 3
        assert all(np.isfinite(result.losses))

    def test_problem_mismatch(self, small_data):
        with pytest.raises(ShapeMismatch):
            train_model(TrainConfig(problem="log1d", epochs=1), small_data)

    def test_blowup_reports_epoch(self, small_data):
        forcings = small_data.forcings.copy()
        forcings[0, 3] = np.inf
        bad = type(small_data)(small_data.spec, forcings, small_data.solutions, 0)
        with pytest.raises(NumericalBlowup) as info:
            train_model(TrainConfig(variant="GL", epochs=3), bad)
        assert info.value.epoch == 0

    @pytest.mark.parametrize("variant,k,m", [("GL", 0, 0), ("GL-aug", 0, 0), ("GreenMGNet", 1, 1)])
    def test_loss_trend(self, variant, k, m):
        data = generate_dataset(problem_spec("poisson1d", 33), 20, 0)
        for seed in range(2):
            result = train_model(TrainConfig(variant=variant, epochs=200, k=k, m=m, seed=seed), data)
            tenth = len(result.losses) // 10
            assert np.median(result.losses[-tenth:]) < np.median(result.losses[:tenth])

    @pytest.mark.slow
    def test_greenmgnet_desk_regression(self, desk_data):
        train, test = desk_data
        eps_u, gains = [], []
        for seed in range(3):
            cfg = desk_config("GreenMGNet", "poisson1d", k=1, m=3, seed=seed)
            result = train_model(cfg, train)
            trained = evaluate(result.params, test, "GreenMGNet", 1, 3)
            untrained = evaluate(init_params(1, 2, seed), test, "GreenMGNet", 1, 3)
            eps_u.append(trained.eps_u)
            gains.append(untrained.eps_G / trained.eps_G)
        assert np.median(eps_u) < 1e-2
        assert np.median(gains) >= 10


class TestExport:
    def test_untrained_export(self):
        out = export_learned_kernel(init_params(2, 2, 0), 5, 2, "GL-aug")
        assert out["kernel"].shape == (25, 25)
        assert np.all(np.isfinite(out["kernel"]))

    def test_d4_entries_are_head_means(self):
        params = init_params(2, 2, 1)
        n = 5
        kernel = export_learned_kernel(params, n, 2, "GL-aug")["kernel"].ravel()
        i, j, xy = all_pairs(n, 2)
        d4 = classify_indices(i, j) == SubdomainTag.D4
        heads = mlp_forward(params, xy)[d4]
        assert np.array_equal(kernel[d4], 0.5 * (heads[:, 0] + heads[:, 1]))

    def test_greenmgnet_samples_drive_inference(self, small_data):
        params = init_params(1, 2, 0)
        predict, kernel = make_predictor(params, 17, 1, "GreenMGNet", 1, 17)
        dense = dense_apply(kernel, small_data.forcings, small_data.spec.h, 1)
        assert np.allclose(predict(small_data.forcings), dense, rtol=1e-10, atol=1e-12)
        exported = export_learned_kernel(params, 17, 1, "GreenMGNet", 2, 1)
        assert exported["samples"].shape == (len(exported["plan"].point_set),)

    def test_evaluate_reports_fraction(self, small_data):
        metrics = evaluate(init_params(1, 2, 0), small_data, "GreenMGNet", 1, 1)
        assert 0 < metrics.p < 1
        assert evaluate(init_params(1, 1, 0), small_data, "GL").p == 1.0
