import math

import numpy as np
import pytest

from cpflow.flow import log_density
from cpflow.training import (
    HISTORY_FIELDS,
    AdamState,
    Checkpoint,
    CheckpointError,
    CsvParseError,
    Dataset,
    DatasetError,
    NonFiniteGradient,
    TrainConfig,
    TrainingAborted,
    adam_step,
    build_stack,
    clip_grad_norm,
    evaluate,
    gaussian_baseline_nll,
    generate_gaussian_ot,
    generate_toy,
    load_csv,
    make_dataset,
    moment_w2_bound,
    parse_csv_text,
    train,
)

TINY = dict(n_flows=2, n_hidden_layers=2, n_hidden_units=8, batch_size=32, epochs=1, log_every=4, val_max=64)


def tiny_dataset(n=160, seed=0):
    return Dataset("eight_gaussians", generate_toy("eight_gaussians", n, seed), seed=seed)


class TestToyData:
    def test_eight_gaussians_centered(self):
        x = generate_toy("eight_gaussians", 100_000, seed=1)
        se = x.std(axis=0, ddof=1) / math.sqrt(len(x))
        assert np.all(np.abs(x.mean(axis=0)) < 3 * se)

    def test_rings_radii_bounded(self):
        r = np.linalg.norm(generate_toy("rings", 20_000, seed=2), axis=1)
        assert r.min() >= 1 - 5 * 0.08 and r.max() <= 4 + 5 * 0.08

    def test_one_moon_shape(self):
        x = generate_toy("one_moon", 1000, seed=0)
        assert x.shape == (1000, 2)
        np.testing.assert_allclose(np.median(np.linalg.norm(x, axis=1)), 2.0, atol=0.05)

    @pytest.mark.parametrize("kind", ["one_moon", "eight_gaussians", "rings"])
    def test_deterministic(self, kind):
        np.testing.assert_array_equal(generate_toy(kind, 50, 3), generate_toy(kind, 50, 3))

    def test_unknown_kind(self):
        with pytest.raises(DatasetError):
            generate_toy("spirals", 10)


class TestGaussianOT:
    def test_sample_covariance(self):
        x, mean, cov = generate_gaussian_ot(3, 100_000, seed=4)
        n = len(x)
        se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
        assert np.all(np.abs(np.cov(x, rowvar=False) - cov) < 3 * se + 1e-12)

    def test_wishart_mean(self):
        d, k, draws = 3, 4, 10_000
        covs = np.stack([generate_gaussian_ot(d, 1, seed=s)[2] for s in range(draws)])
        sd = np.sqrt(np.where(np.eye(d, dtype=bool), 2 * k, k) / draws)
        assert np.all(np.abs(covs.mean(axis=0) - k * np.eye(d)) < 3.5 * sd)

    def test_one_dimensional_chi_square(self):
        v = np.array([generate_gaussian_ot(1, 1, seed=s)[2][0, 0] for s in range(10_000)])
        # chi-square with 2 degrees of freedom: mean 2, variance 4
        assert abs(v.mean() - 2.0) < 3 * 2.0 / math.sqrt(len(v))
        assert abs(v.var() - 4.0) < 0.4


class TestCsv:
    def test_basic(self):
        x = parse_csv_text("1.0,2.0\n3.0,4.0")
        assert x.shape == (2, 2)

    def test_header(self):
        np.testing.assert_array_equal(parse_csv_text("a,b\n1,2\n", has_header=True), [[1.0, 2.0]])
        np.testing.assert_array_equal(parse_csv_text("a,b\n1,2\n", has_header=None), [[1.0, 2.0]])
        np.testing.assert_array_equal(parse_csv_text("5,6\n1,2\n", has_header=None), [[5.0, 6.0], [1.0, 2.0]])

    def test_ragged_line_number(self):
        with pytest.raises(CsvParseError) as info:
            parse_csv_text("1,2\n3,4\n5\n")
        assert info.value.line == 3 and "line 3" in str(info.value)

    @pytest.mark.parametrize("text", ["", "1,x\n", "1,nan\n"])
    def test_rejects(self, text):
        with pytest.raises(CsvParseError):
            parse_csv_text(text)

    def test_load_standardizes_with_train_split(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(200, 3)) * [1, 5, 10] + [0, 3, -7]
        path = tmp_path / "d.csv"
        path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in data))
        ds = load_csv(path, seed=1)
        np.testing.assert_allclose(ds.train.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(ds.train.std(axis=0), 1, atol=1e-12)
        np.testing.assert_allclose(ds.test * ds.scale + ds.loc, data[ds.indices("test")])


class TestDataset:
    def test_splits_disjoint_and_deterministic(self):
        ds = Dataset("x", np.arange(100.0)[:, None], seed=3)
        parts = [set(ds.indices(s)) for s in ("train", "val", "test")]
        assert sum(map(len, parts)) == 100 and not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        np.testing.assert_array_equal(ds.indices("val"), Dataset("x", np.arange(100.0)[:, None], seed=3).indices("val"))

    def test_rejects_non_finite(self):
        with pytest.raises(DatasetError):
            Dataset("x", np.array([[1.0], [np.inf]]))

    def test_make_dataset_sources(self):
        assert make_dataset("toy:rings", n=10).dim == 2
        ds = make_dataset("gaussian_ot", n=20, d=4)
        assert ds.dim == 4 and ds.mean.shape == (4,)
        with pytest.raises(DatasetError):
            make_dataset("mnist")


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p, state = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, AdamState(), lr=0.005)
        np.testing.assert_allclose(p["w"], -0.005, rtol=1e-6)
        assert state.step == 1

    def test_zero_gradient(self):
        params = {"w": np.array([1.0, 2.0])}
        p, state = adam_step(params, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"], params["w"])
        assert state.step == 1

    def test_non_finite_rejected_without_state_change(self):
        state = AdamState()
        with pytest.raises(NonFiniteGradient):
            adam_step({"w": np.zeros(2)}, {"w": np.array([1.0, np.nan])}, state, lr=0.1)
        assert state.step == 0 and not state.m

    def test_matches_reference_recursion(self, rng):
        g = rng.normal(size=(5, 3))
        params, state = {"w": np.zeros(3)}, AdamState()
        m = v = np.zeros(3)
        w = np.zeros(3)
        for t in range(1, 6):
            params, state = adam_step(params, {"w": g[t - 1]}, state, lr=0.01)
            m = 0.9 * m + 0.1 * g[t - 1]
            v = 0.999 * v + 0.001 * g[t - 1] ** 2
            w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(params["w"], w, rtol=1e-14)

    def test_clip(self):
        g, total = clip_grad_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
        assert total == 5.0
        np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])


class TestConfig:
    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"learning_rate": 0.0}, {"epochs": -1}, {"lr_schedule": "step"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="btach_size"):
            TrainConfig.from_dict({"btach_size": 3})

    def test_cosine_schedule(self):
        c = TrainConfig(learning_rate=0.1, lr_schedule="cosine")
        assert c.lr_at(0, 10) == 0.1 and abs(c.lr_at(10, 10)) < 1e-15
        np.testing.assert_allclose(c.lr_at(5, 10), 0.05)


class TestCheckpoint:
    def _trained(self, tmp_path, **kw):
        config = TrainConfig(**{**TINY, **kw})
        ds = tiny_dataset()
        return train(build_stack(config, 2), ds, config, out_dir=tmp_path, max_steps=3), config, ds

    def test_bytes_round_trip(self, tmp_path):
        (_, _, ckpt), _, _ = self._trained(tmp_path)
        blob = ckpt.to_bytes()
        assert Checkpoint.from_bytes(blob).to_bytes() == blob
        saved = (tmp_path / "checkpoint.bin").read_bytes()
        assert Checkpoint.load(tmp_path / "checkpoint.bin").to_bytes() == saved

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"NOTACKPT" + bytes(20))

    def test_truncated(self, tmp_path):
        (_, _, ckpt), _, _ = self._trained(tmp_path)
        with pytest.raises((CheckpointError, Exception)):
            Checkpoint.from_bytes(ckpt.to_bytes()[:-5])

    def test_resume_is_bitwise_identical(self, tmp_path):
        config = TrainConfig(**{**TINY, "epochs": 2})
        ds = tiny_dataset()
        full, _, _ = train(build_stack(config, 2), ds, config, max_steps=5)
        _, _, ckpt = train(build_stack(config, 2), ds, config, max_steps=3)
        resumed = Checkpoint.from_bytes(ckpt.to_bytes())
        stack, _, ck2 = train(resumed.stack, ds, config, resume=resumed, max_steps=5)
        assert ck2.step == 5
        a, b = full.arrays(), stack.arrays()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestTrain:
    def test_zero_epochs_unchanged(self):
        config = TrainConfig(**{**TINY, "epochs": 0})
        stack = build_stack(config, 2)
        before = {k: v.copy() for k, v in stack.arrays().items()}
        out, history, ckpt = train(stack, tiny_dataset(), config)
        assert ckpt.step == 0 and not history.rows
        assert all(np.array_equal(before[k], v) for k, v in out.arrays().items())

    def test_deterministic(self):
        config = TrainConfig(**TINY)
        runs = [train(build_stack(config, 2), tiny_dataset(), config)[0].arrays() for _ in range(2)]
        assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])

    def test_history_csv(self, tmp_path):
        config = TrainConfig(**TINY)
        _, history, ckpt = train(build_stack(config, 2), tiny_dataset(), config, out_dir=tmp_path)
        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == ",".join(HISTORY_FIELDS)
        assert len(lines) - 1 == len(history.rows) >= 1
        assert ckpt.step == 4 and history.rows[-1]["step"] == 4
        parse_csv_text("\n".join(lines), has_header=True)

    def test_improves_likelihood(self):
        config = TrainConfig(**{**TINY, "epochs": 3})
        ds = tiny_dataset(400)
        stack = build_stack(config, 2)
        stack.initialize(ds.train[:32])
        before = -log_density(stack, ds.val).logp.mean()
        stack, _, _ = train(stack, ds, config)
        assert -log_density(stack, ds.val).logp.mean() < before

    def test_nan_parameters_abort(self):
        config = TrainConfig(**TINY)
        stack = build_stack(config, 2)
        stack.initialize(tiny_dataset().train[:32])
        stack.layers[0].params["reparam.w1"] = np.array(np.nan)
        with pytest.raises(TrainingAborted):
            train(stack, tiny_dataset(), config, max_steps=2)

    def test_exact_and_slq_validation_agree(self):
        config = TrainConfig(**{**TINY, "epochs": 2})
        ds = tiny_dataset(400)
        stack, _, _ = train(build_stack(config, 2), ds, config)
        exact = evaluate(stack, ds.val, TrainConfig(**{**TINY, "val_mode": "exact"}))["val_nll"]
        slq = evaluate(stack, ds.val, TrainConfig(**{**TINY, "val_mode": "slq"}))["val_nll"]
        assert abs(exact - slq) < 0.05


class TestDiagnostics:
    def test_gaussian_baseline_matches_scipy(self, rng):
        from scipy import stats

        train_x, test_x = rng.normal(size=(500, 2)) @ [[1, 0.5], [0, 1]], rng.normal(size=(50, 2))
        mu, cov = train_x.mean(axis=0), np.cov(train_x, rowvar=False, bias=True)
        expected = -stats.multivariate_normal(mu, cov).logpdf(test_x).mean()
        np.testing.assert_allclose(gaussian_baseline_nll(train_x, test_x), expected, rtol=1e-12)

    def test_moment_bound_below_any_coupling(self, rng):
        x = rng.normal(size=(300, 3)) * [1, 2, 3]
        for y in (rng.normal(size=(300, 3)), x * 0.5 + 1, x[::-1]):
            assert moment_w2_bound(x, y) <= np.mean(np.sum((x - y) ** 2, axis=1)) + 1e-9

    def test_moment_bound_tight_for_linear_map(self, rng):
        x = rng.normal(size=(300, 2)) * [2.0, 0.5]
        y = x * [0.5, 2.0]
        np.testing.assert_allclose(moment_w2_bound(x, y), np.mean(np.sum((x - y) ** 2, axis=1)), rtol=1e-9)
