import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from probmil.data import SyntheticSpec, generate_synthetic
from probmil.estimator import MilClassifier
from probmil.validation import check_bags, check_labels


@pytest.fixture(scope="module")
def bags():
    ds = generate_synthetic(SyntheticSpec(num_classes=3, feature_dim=4, bag_size=6,
                                          bags_per_class=20, separation=5.0, seed=2))
    return ds.instances(), ds.labels.astype(int)


def small(**kw):
    params = dict(hidden=(16,), steps=150, batch_size=8, eval_every=50, dropout=0.0, lr=1e-2)
    params.update(kw)
    return MilClassifier(**params)


class TestParams:
    def test_get_set_clone(self):
        est = MilClassifier(strategy="max", hidden=(3, 4), random_state=9)
        p = est.get_params()
        assert p["strategy"] == "max" and p["hidden"] == (3, 4) and p["random_state"] == 9
        c = clone(est)
        assert c.get_params() == p and c is not est
        est.set_params(phi="relu")
        assert est.phi == "relu"

    def test_not_fitted(self, bags):
        with pytest.raises(NotFittedError):
            MilClassifier().predict_proba(bags[0])


class TestFit:
    def test_fit_predict(self, bags):
        X, Y = bags
        est = small().fit(X, Y)
        P = est.predict_proba(X)
        assert P.shape == Y.shape and np.all((P > 0) & (P < 1))
        np.testing.assert_array_equal(est.predict(X), (P >= 0.5).astype(int))
        assert est.n_features_in_ == 4 and est.n_classes_ == 3
        assert est.score(X, Y) > 0.8

    def test_reproducible(self, bags):
        X, Y = bags
        a = small(dropout=0.2).fit(X, Y).predict_proba(X)
        b = small(dropout=0.2).fit(X, Y).predict_proba(X)
        np.testing.assert_array_equal(a, b)

    def test_eval_set_and_log(self, bags):
        X, Y = bags
        est = small(steps=100).fit(X[:40], Y[:40], eval_set=(X[40:], Y[40:]))
        assert [r.step for r in est.run_log_.records] == [0, 50, 100]
        assert est.run_log_.best_step in (0, 50, 100)

    def test_ragged_bags(self, bags):
        X, Y = bags
        ragged = [x[: 2 + i % 4] for i, x in enumerate(X)]
        est = small(steps=30).fit(ragged, Y)
        assert est.predict_proba(ragged).shape == Y.shape

    def test_attention_weights(self, bags):
        X, Y = bags
        est = small(steps=20).fit(X, Y)
        w = est.attention_weights(X[:3])
        assert len(w) == 3 and w[0].shape == (6, 3)
        np.testing.assert_allclose(w[0].sum(axis=0), 1.0, atol=1e-12)
        with pytest.raises(ValueError):
            small(strategy="max", steps=1).fit(X, Y).attention_weights(X[:1])

    def test_feature_mismatch(self, bags):
        X, Y = bags
        est = small(steps=1).fit(X, Y)
        with pytest.raises(ValueError, match="expected 4"):
            est.predict_proba(np.ones((2, 3, 5)))


class TestValidation:
    def test_bags(self):
        assert check_bags(np.ones((2, 3, 4))).shape == (2, 3, 4)
        with pytest.raises(ValueError):
            check_bags(np.ones((2, 3)))
        with pytest.raises(ValueError):
            check_bags([np.ones((2, 3)), np.ones((2, 4))])
        with pytest.raises(ValueError):
            check_bags(np.full((1, 2, 2), np.nan))
        with pytest.raises(ValueError):
            check_bags([])

    def test_labels(self):
        np.testing.assert_array_equal(check_labels([[1, 0]], 1), [[True, False]])
        with pytest.raises(ValueError):
            check_labels([[2, 0]], 1)
        with pytest.raises(ValueError):
            check_labels([[1, 0]], 2)
