import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from treatsurv.data import SyntheticConfig, generate_synthetic, stack_volumes, survival_array
from treatsurv.estimator import TreatmentSurvivalRegressor, check_treatments, check_volumes
from treatsurv.exceptions import ShapeError, ValidationError


@pytest.fixture(scope="module")
def xy():
    samples = generate_synthetic(SyntheticConfig(n_subjects=12, seed=2))
    return stack_volumes(samples), survival_array(samples), [s.treatment.label for s in samples]


def small(**kwargs):
    return TreatmentSurvivalRegressor(conv_channels=(4, 4, 4, 4), fc_widths=(8, 8, 1), epochs=2, batch_size=4,
                                      **kwargs)


def test_params_round_trip():
    est = small(fusion="concat")
    params = est.get_params()
    assert params["fusion"] == "concat" and params["epochs"] == 2
    assert clone(est).get_params() == params


def test_fit_predict(xy):
    X, y, t = xy
    est = small().fit(X, y, t)
    pred = est.predict(X, t)
    assert pred.shape == (12,) and np.all(np.isfinite(pred))
    assert len(est.loss_history_) == 2
    cf = est.predict_counterfactual(X[:3])
    assert cf.shape == (3, 3)
    np.testing.assert_array_equal(cf[:, 0], est.predict(X[:3], "GTR"))
    assert np.isfinite(est.score(X, y, t))
    clamped = est.predict(X, t, clamp=True)
    assert np.all((clamped >= 5) & (clamped <= 1767))


def test_fit_is_deterministic(xy):
    X, y, t = xy
    a = small(random_state=3).fit(X, y, t).predict(X, t)
    b = small(random_state=3).fit(X, y, t).predict(X, t)
    assert a.tobytes() == b.tobytes()


def test_none_fusion_ignores_treatment(xy):
    X, y, _ = xy
    est = small(fusion="none").fit(X, y)
    assert est.predict(X[:2], "GTR").tobytes() == est.predict(X[:2], "NA").tobytes()


def test_validation_errors(xy):
    X, y, t = xy
    with pytest.raises(ValidationError, match="treatment"):
        small().fit(X, y)
    with pytest.raises(ShapeError):
        small().fit(X[:, :3], y, t)
    with pytest.raises(ShapeError):
        small().fit(X, y[:5], t)
    with pytest.raises(ValidationError):
        small().fit(X, y * 100, t)
    with pytest.raises(ValidationError):
        small(fusion="gated").fit(X, y, t)
    with pytest.raises(ValueError):
        check_volumes(np.full((1, 4, 4, 4, 4), np.nan))
    with pytest.raises(ShapeError):
        check_volumes(np.zeros((1, 4, 4, 4, 5)))
    with pytest.raises(ShapeError):
        check_treatments(["GTR", "NA"], 3)


def test_predict_before_fit(xy):
    with pytest.raises(NotFittedError):
        small().predict(xy[0], "GTR")


def test_predict_channel_mismatch(xy):
    X, y, t = xy
    est = small().fit(X, y, t)
    with pytest.raises(ShapeError, match="fitted on 5"):
        est.predict(X[:, :4], t)
