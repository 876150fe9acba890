"""The following test cases verify the feature [Propensity scores](../reqs/reqs.md#7-feature-propensity-scores)
described in the requirements.

The test cases do not need any prior condition before being executed, unless explicitly stated otherwise.
"""
import logging

import numpy as np
import pandas as pd
import pytest
from scipy import optimize
from scipy.special import expit, logit
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.metrics import log_loss

import flexcausal as fc
import helpers
from flexcausal.propensity import _sklearn_tree
from flexcausal.settings import PropensitySettings


def setup_module():
    fc.set_logging_level(logging.CRITICAL)


def teardown_module():
    pass


def practice_features(n=300, seed=0, strength=1.5):
    """Practice design whose treatment follows `expit(strength * x0 - 0.3)`."""
    design = helpers.make_design(n, seed=seed)
    rng = np.random.default_rng(seed + 100)
    z = (rng.random(n) < expit(strength * design.columns[0].values - 0.3)).astype(int)
    design.keys = pd.DataFrame({'practice_id': [f'p{i}' for i in range(n)], 'treated': z})
    return design, z


def test__null_model_qkit():
    """**Description**: Fits the L1 logistic model with a penalty zeroing every coefficient

    **Requirements tested**:

    - [27001](../reqs/reqs.md#req-id-27001) L1 logistic model

    **Evaluation criteria**:

    - Check all coefficients are zero and every prediction equals the treated share
    """
    features, z = practice_features(seed=1)

    model = fc.fit_l1_logistic(features, z, lambda_grid=[10.0])

    assert model.penalty == 10.0
    np.testing.assert_array_equal(model.std_coefficients, 0.0)
    np.testing.assert_allclose(fc.predict_ps(model, features), z.mean(), atol=1e-10)


def test__kkt_conditions_qkit():
    """**Description**: Checks the optimality of the cross-validated L1 logistic fit

    **Requirements tested**:

    - [27001](../reqs/reqs.md#req-id-27001) L1 logistic model
    - [27002](../reqs/reqs.md#req-id-27002) Cross-validated penalty

    **Actions to be performed**:

    - Fit the model with the default penalty path and 5 folds

    **Evaluation criteria**:

    - Check the optimality residual at the selected penalty is below 1e-6
    - Check the selected penalty has the smallest held-out log-loss, the largest one on ties
    """
    features, z = practice_features(seed=2)

    model = fc.fit_l1_logistic(features, z, rng=np.random.default_rng(4))

    lambdas = np.array(model.diagnostics['lambdas'])
    cv_loss = np.array(model.diagnostics['cv_log_loss'])
    assert lambdas.size == 30 and model.diagnostics['folds'] == 5
    assert model.penalty == lambdas[cv_loss == cv_loss.min()].max()
    assert fc.kkt_residual(model, features, z) < 1e-6
    assert model.coefficients[0] > 0.0


def test__penalty_path_qkit():
    """**Description**: Computes the warm-started L1 logistic path

    **Requirements tested**:

    - [27001](../reqs/reqs.md#req-id-27001) L1 logistic model

    **Evaluation criteria**:

    - Check the default path has 30 decreasing penalties, zero coefficients at the first one and a positive
      coefficient for the treatment driver at the last one
    - Check explicit penalties come back in the given order and agree with single-penalty fits
    """
    features, z = practice_features(seed=5)

    path = fc.l1_logistic_path(features, z)

    penalties = np.array([penalty for penalty, _, _ in path])
    assert penalties.size == 30 and np.all(np.diff(penalties) < 0.0)
    assert np.max(np.abs(path[0][1])) < 1e-8
    assert path[-1][1][0] > 0.0

    explicit = fc.l1_logistic_path(features, z, lambdas=[0.01, 0.1, 1.0])

    assert [penalty for penalty, _, _ in explicit] == [0.01, 0.1, 1.0]
    np.testing.assert_array_equal(explicit[2][1], 0.0)
    single = fc.fit_l1_logistic(features, z, lambda_grid=[0.01])
    np.testing.assert_allclose(explicit[0][1], single.std_coefficients, atol=1e-6)


def test__unpenalized_limit_qkit():
    """**Description**: Compares a barely penalized fit with the maximum likelihood estimate

    **Requirements tested**:

    - [27001](../reqs/reqs.md#req-id-27001) L1 logistic model

    **Actions to be performed**:

    - Fit one feature with a penalty of 1e-10 and minimize the logistic loss with scipy

    **Evaluation criteria**:

    - Check intercept and slope agree to 1e-4 on the original feature scale
    """
    rng = np.random.default_rng(6)
    x = rng.standard_normal(400) * 2.0 + 1.0
    z = (rng.random(400) < expit(0.5 + 1.2 * x)).astype(int)
    features = fc.DesignMatrix(columns=[helpers.continuous_column('x', x)])

    def loss(params):
        eta = params[0] + params[1] * x
        return np.sum(np.logaddexp(0.0, eta) - z * eta)

    def gradient(params):
        resid = expit(params[0] + params[1] * x) - z
        return np.array([resid.sum(), np.dot(resid, x)])

    mle = optimize.minimize(loss, np.zeros(2), jac=gradient, method='BFGS', options={'gtol': 1e-9}).x
    model = fc.fit_l1_logistic(features, z, lambda_grid=[1e-10])

    assert model.intercept == pytest.approx(mle[0], abs=1e-4)
    assert model.coefficients[0] == pytest.approx(mle[1], abs=1e-4)


def test__separation_warning_qkit():
    """**Description**: Warns when the treatment arms are separable

    **Requirements tested**:

    - [27001](../reqs/reqs.md#req-id-27001) L1 logistic model

    **Evaluation criteria**:

    - Check `SeparationWarning` is issued for a feature splitting the arms perfectly
    """
    x = np.linspace(-1.0, 1.0, 40)
    features = fc.DesignMatrix(columns=[helpers.continuous_column('x', x)])

    with pytest.warns(fc.SeparationWarning):
        model = fc.fit_l1_logistic(features, (x > 0).astype(int), lambda_grid=[1e-8])

    assert model.std_coefficients[0] > 30.0


def test__unavailable_models_qkit():
    """**Description**: Rejects degenerate data and unavailable methods

    **Requirements tested**:

    - [27004](../reqs/reqs.md#req-id-27004) Reserved methods and single class

    **Evaluation criteria**:

    - Check a single treatment arm raises `SingleClass` for both models
    - Check `cbps` and `bart` raise `ReservedMethod` and an unknown name raises `ConfigError`
    """
    features, _ = practice_features(n=50)
    ones = np.ones(50, dtype=int)

    with pytest.raises(fc.SingleClass):
        fc.fit_l1_logistic(features, ones)
    with pytest.raises(fc.SingleClass):
        fc.fit_gbm(features, ones)
    for method in ('cbps', 'bart'):
        with pytest.raises(fc.ReservedMethod):
            fc.fit_propensity(features, method)
    with pytest.raises(fc.ConfigError):
        fc.fit_propensity(features, 'forest')


def test__boosting_zero_rounds_qkit():
    """**Description**: Fits boosted trees with no round

    **Requirements tested**:

    - [27003](../reqs/reqs.md#req-id-27003) Boosted trees

    **Evaluation criteria**:

    - Check the model holds no tree and predicts the treated share everywhere
    """
    features, z = practice_features(seed=3)

    model = fc.fit_gbm(features, z, rounds=0)

    assert model.trees == []
    np.testing.assert_allclose(fc.predict_ps(model, features), z.mean(), atol=1e-12)


def test__boosting_early_stopping_qkit():
    """**Description**: Fits boosted trees with early stopping

    **Requirements tested**:

    - [27003](../reqs/reqs.md#req-id-27003) Boosted trees

    **Actions to be performed**:

    - Fit up to 60 rounds with a patience of 10 through `fit_propensity`

    **Evaluation criteria**:

    - Check the training loss never increases and the kept rounds minimize the holdout loss
    - Check the predictions stay inside the clip bounds
    """
    features, z = practice_features(n=400, seed=5, strength=2.0)
    settings = PropensitySettings(method='gbm', rounds=60, patience=10, clip=[0.05, 0.95])

    model = fc.fit_propensity(features, 'gbm', settings, rng=np.random.default_rng(1))

    train_loss = np.array(model.diagnostics['train_log_loss'])
    holdout_loss = np.array(model.diagnostics['holdout_log_loss'])
    assert train_loss.size == 60
    assert np.all(np.diff(train_loss) <= 1e-9)
    assert len(model.trees) == model.diagnostics['rounds'] >= 1
    assert holdout_loss[len(model.trees) - 1] == holdout_loss[:len(model.trees) + 9].min()
    ps = fc.predict_ps(model, features)
    assert ps.min() >= 0.05 and ps.max() <= 0.95


def test__boosted_tree_conversion_qkit():
    """**Description**: Converts scikit-learn boosted trees into regression trees

    **Requirements tested**:

    - [27003](../reqs/reqs.md#req-id-27003) Boosted trees

    **Actions to be performed**:

    - Fit 20 rounds of depth 3 with scikit-learn and rebuild the log-odds from the converted trees

    **Evaluation criteria**:

    - Check the rebuilt log-odds equal the classifier decision function
    """
    features, z = practice_features(seed=7)
    encoded, names = features.numeric_matrix(one_hot=True)
    classifier = GradientBoostingClassifier(n_estimators=20, learning_rate=0.1, max_depth=3, random_state=0)
    classifier.fit(encoded, z)

    model = fc.PropensityModel(kind='gbm', feature_names=features.names, encoded_names=names,
                               intercept=float(logit(classifier.init_.class_prior_[1])), shrinkage=0.1,
                               trees=[_sklearn_tree(classifier.estimators_[stage, 0]) for stage in range(20)])

    np.testing.assert_allclose(model.log_odds(encoded), classifier.decision_function(encoded), atol=1e-10)


@pytest.mark.parametrize('method', ['lasso', 'gbm'])
def test__model_persistence_qkit(tmp_path, method):
    """**Description**: Saves and reloads a fitted model

    **Requirements tested**:

    - [27005](../reqs/reqs.md#req-id-27005) Persistence and clipping

    **Evaluation criteria**:

    - Check the reloaded model predicts the same values
    - Check a feature table with other columns raises `DimensionMismatch`
    """
    features, _ = practice_features(seed=8)
    settings = PropensitySettings(method=method, rounds=20, patience=5)
    model = fc.fit_propensity(features, method, settings)

    model.save(tmp_path / 'propensity_model.json')
    reloaded = fc.PropensityModel.load(tmp_path / 'propensity_model.json')

    np.testing.assert_array_equal(fc.predict_ps(reloaded, features), fc.predict_ps(model, features))
    with pytest.raises(fc.DimensionMismatch):
        fc.predict_ps(reloaded, helpers.make_design(20, categorical=False))


def interaction_features(n, seed):
    """Practice design whose treatment follows an exclusive-or of `x0 > 0` and `x1 > 0.5`."""
    design = helpers.make_design(n, seed=seed)
    rng = np.random.default_rng(seed + 100)
    rule = (design.columns[0].values > 0.0) ^ (design.columns[1].values > 0.5)
    z = (rng.random(n) < expit(3.0 * rule - 1.5)).astype(int)
    return design, z


@pytest.mark.slow
def test__boosted_trees_fit_interactions():
    """**Description**: Compares both propensity models on an interaction-driven treatment rule

    **Requirements tested**:

    - [27003](../reqs/reqs.md#req-id-27003) Boosted trees
    - [27006](../reqs/reqs.md#req-id-27006) Interaction-driven treatment

    **Initial conditions**:

    - 1000 training and 1000 test practices treated with probability 0.82 when exactly one of `x0 > 0` and
      `x1 > 0.5` holds and 0.18 otherwise

    **Actions to be performed**:

    - 20 times: fit the L1 logistic model and the boosted trees, then score the test practices

    **Evaluation criteria**:

    - Check the boosted trees have the smaller test log-loss in at least 18 replications
    """
    wins = 0
    for rep in range(20):
        train, z_train = interaction_features(1000, seed=2 * rep)
        test, z_test = interaction_features(1000, seed=2 * rep + 1)
        rng = np.random.default_rng(rep)

        lasso = fc.fit_l1_logistic(train, z_train, rng=rng)
        gbm = fc.fit_gbm(train, z_train, rng=rng)

        wins += log_loss(z_test, fc.predict_ps(gbm, test)) < log_loss(z_test, fc.predict_ps(lasso, test))

    assert wins >= 18
