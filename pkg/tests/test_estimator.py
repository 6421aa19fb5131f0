import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cpflow.estimator import CPFlowDensity
from cpflow.training import generate_toy

FAST = dict(n_flows=2, n_hidden_layers=2, n_hidden_units=8, epochs=2, batch_size=64)


@pytest.fixture(scope="module")
def fitted():
    X = generate_toy("eight_gaussians", 400, seed=0)
    return CPFlowDensity(**FAST).fit(X), X


class TestCPFlowDensity:
    def test_params_round_trip(self):
        est = CPFlowDensity(n_flows=4, learning_rate=0.01)
        assert est.get_params()["n_flows"] == 4
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        est.set_params(epochs=7)
        assert est.epochs == 7

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            CPFlowDensity().transform(np.zeros((1, 2)))

    def test_transform_round_trip(self, fitted):
        est, X = fitted
        Z = est.transform(X[:20])
        np.testing.assert_allclose(est.inverse_transform(Z), X[:20], atol=1e-4)

    def test_score_is_mean_log_density(self, fitted):
        est, X = fitted
        np.testing.assert_allclose(est.score(X[:30]), est.score_samples(X[:30]).mean())
        assert est.score_samples(X[:5]).shape == (5,)

    def test_sample_shapes_and_reproducibility(self, fitted):
        est, _ = fitted
        np.testing.assert_array_equal(est.sample(4, random_state=1), est.sample(4, random_state=1))
        assert est.sample(0).shape == (0, 2)

    def test_feature_mismatch(self, fitted):
        est, _ = fitted
        with pytest.raises(ValueError):
            est.transform(np.zeros((2, 3)))

    def test_input_validation(self):
        with pytest.raises(ValueError):
            CPFlowDensity(**FAST).fit(np.array([[0.0, np.nan], [1.0, 2.0]]))
        with pytest.raises(ValueError):
            CPFlowDensity(**FAST, logdet="cholesky").fit(np.zeros((10, 2)) + np.arange(10)[:, None])

    def test_deterministic_fit(self):
        X = generate_toy("one_moon", 200, seed=1)
        a = CPFlowDensity(**FAST).fit(X).score_samples(X[:10])
        b = CPFlowDensity(**FAST).fit(X).score_samples(X[:10])
        np.testing.assert_array_equal(a, b)
