"""Module providing the practice-level propensity score models.

Two models are available:

- `lasso`: L1-penalized logistic regression on standardized features with an unpenalized intercept, fitted by
  iteratively reweighted least squares with cyclic coordinate descent, penalty chosen by stratified K-fold
  cross-validated log-loss.
- `gbm`: gradient boosted trees of log-odds (scikit-learn), number of rounds chosen by early stopping on a stratified
  20 % holdout. The fitted trees are kept as `RegressionTree` objects so the model is stored in the forest line grammar.

`cbps` and `bart` are reserved names.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.metrics import log_loss
from sklearn.model_selection import StratifiedKFold, train_test_split

from .about import __package__
from .errors import ConfigError, DimensionMismatch, ReservedMethod, SeparationWarning, SingleClass
from .panel import DesignColumn, DesignMatrix
from .trees import RegressionTree, SplitRule, evaluate_tree, parse_tree, serialize_tree

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

METHODS = ('lasso', 'gbm')
RESERVED_METHODS = ('cbps', 'bart')
DEFAULT_CLIP = (0.01, 0.99)
SEPARATION_THRESHOLD = 30.0
PATH_LENGTH = 30
PATH_RATIO = 1e-3


@dataclass
class PropensityModel:
    """Fitted propensity model.

    Attributes:
        kind (str): `lasso` or `gbm`.
        feature_names (list): Design columns the model expects.
        encoded_names (list): Columns after one-hot encoding of the categorical covariates.
        clip (tuple): Bounds applied to every prediction.
        intercept (float): Log-odds intercept, original feature scale (`lasso`) or initial log-odds (`gbm`).
        coefficients (ndarray): Coefficients on the original feature scale (`lasso`).
        std_coefficients (ndarray): Coefficients on the standardized features (`lasso`).
        feature_means, feature_scales (ndarray): Standardization of the encoded features (`lasso`).
        penalty (float): Selected L1 penalty (`lasso`).
        trees (list): Boosted `RegressionTree` objects on the encoded features (`gbm`).
        shrinkage (float): Learning rate applied to every tree (`gbm`).
        diagnostics (dict): Cross-validation or loss curves.
    """
    kind: str
    feature_names: list
    encoded_names: list
    clip: tuple = DEFAULT_CLIP
    intercept: float = 0.0
    coefficients: np.ndarray = None
    std_coefficients: np.ndarray = None
    feature_means: np.ndarray = None
    feature_scales: np.ndarray = None
    penalty: float = None
    trees: list = field(default_factory=list)
    shrinkage: float = 0.1
    diagnostics: dict = field(default_factory=dict)

    def log_odds(self, encoded):
        """Unclipped log-odds of the rows of an encoded feature matrix."""
        if self.kind == 'lasso':
            return self.intercept + encoded @ self.coefficients
        # boosted trees were fitted on float32 features; compare on the same values
        design = _encoded_design(encoded.astype(np.float32).astype(float), self.encoded_names)
        total = np.full(encoded.shape[0], self.intercept)
        for tree in self.trees:
            total += self.shrinkage * evaluate_tree(tree, design)
        return total

    def to_dict(self):
        item = {
            'kind': self.kind,
            'feature_names': list(self.feature_names),
            'encoded_names': list(self.encoded_names),
            'clip': list(self.clip),
            'intercept': self.intercept,
            'diagnostics': self.diagnostics,
        }
        if self.kind == 'lasso':
            item.update(
                coefficients=self.coefficients.tolist(),
                std_coefficients=self.std_coefficients.tolist(),
                feature_means=self.feature_means.tolist(),
                feature_scales=self.feature_scales.tolist(),
                penalty=self.penalty,
            )
        else:
            item.update(shrinkage=self.shrinkage, trees=[serialize_tree(tree) for tree in self.trees])
        return item

    @classmethod
    def from_dict(cls, item):
        model = cls(kind=item['kind'], feature_names=item['feature_names'], encoded_names=item['encoded_names'],
                    clip=tuple(item['clip']), intercept=item['intercept'], diagnostics=item.get('diagnostics', {}))
        if model.kind == 'lasso':
            model.coefficients = np.asarray(item['coefficients'], dtype=float)
            model.std_coefficients = np.asarray(item['std_coefficients'], dtype=float)
            model.feature_means = np.asarray(item['feature_means'], dtype=float)
            model.feature_scales = np.asarray(item['feature_scales'], dtype=float)
            model.penalty = item['penalty']
        else:
            model.shrinkage = item['shrinkage']
            model.trees = [parse_tree(line) for line in item['trees']]
        return model

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def _encoded_design(matrix, names):
    return DesignMatrix(columns=[DesignColumn(name, 'continuous', matrix[:, j]) for j, name in enumerate(names)])


def _check_classes(z):
    z = np.asarray(z, dtype=float)
    if not np.isin(z, (0.0, 1.0)).all():
        raise ConfigError('Treatment labels must be 0 or 1')
    if z.min() == z.max():
        text = f'All practices have treated={int(z[0])}, a propensity model can not be fitted'
        logger.error(text)
        raise SingleClass(text)
    return z


def _standardize(encoded):
    means = encoded.mean(axis=0)
    scales = encoded.std(axis=0)
    scales[scales == 0.0] = 1.0
    return (encoded - means) / scales, means, scales


def _objective(Xs, z, beta, intercept, penalty):
    eta = intercept + Xs @ beta
    # mean logistic loss, written to stay finite for large |eta|
    loss = np.mean(np.logaddexp(0.0, eta) - z * eta)
    return loss + penalty * np.sum(np.abs(beta))


def _soft_threshold(value, threshold):
    return np.sign(value) * max(abs(value) - threshold, 0.0)


def _coordinate_descent(Xs, z, penalty, beta=None, intercept=None, tol=1e-10, max_outer=200, max_inner=1000):
    """Minimizes `mean logistic loss + penalty * ||beta||_1` by IRLS outer steps and coordinate descent inner steps.

    Returns:
        (tuple): `(beta, intercept, outer_iterations)`.
    """
    n, p = Xs.shape
    beta = np.zeros(p) if beta is None else beta.copy()
    intercept = float(logit(np.clip(z.mean(), 1e-12, 1.0 - 1e-12))) if intercept is None else intercept
    objective = _objective(Xs, z, beta, intercept, penalty)
    for outer in range(1, max_outer + 1):
        eta = intercept + Xs @ beta
        prob = expit(eta)
        weights = np.clip(prob * (1.0 - prob), 1e-5, None)
        working = eta + (z - prob) / weights
        new_beta, new_intercept = beta.copy(), intercept
        resid = working - new_intercept - Xs @ new_beta
        curvature = (weights[:, None] * Xs ** 2).sum(axis=0) / n
        for _ in range(max_inner):
            largest = 0.0
            step = np.sum(weights * resid) / np.sum(weights)
            new_intercept += step
            resid -= step
            largest = max(largest, abs(step))
            for j in range(p):
                if curvature[j] == 0.0:
                    continue
                old = new_beta[j]
                rho = np.dot(weights * Xs[:, j], resid) / n + curvature[j] * old
                new_beta[j] = _soft_threshold(rho, penalty) / curvature[j]
                if new_beta[j] != old:
                    resid -= Xs[:, j] * (new_beta[j] - old)
                    largest = max(largest, abs(new_beta[j] - old))
            if largest < tol:
                break

        # step halving keeps the penalized objective monotone
        new_objective = _objective(Xs, z, new_beta, new_intercept, penalty)
        halvings = 0
        while new_objective > objective + 1e-15 and halvings < 30:
            new_beta = (beta + new_beta) / 2.0
            new_intercept = (intercept + new_intercept) / 2.0
            new_objective = _objective(Xs, z, new_beta, new_intercept, penalty)
            halvings += 1
        change = max(np.max(np.abs(new_beta - beta), initial=0.0), abs(new_intercept - intercept))
        beta, intercept, objective = new_beta, new_intercept, new_objective
        if change < tol:
            break
    return beta, intercept, outer


def default_lambda_grid(Xs, z, length=PATH_LENGTH, ratio=PATH_RATIO):
    """Log-spaced penalties from the smallest penalty zeroing every coefficient down to `ratio` times it."""
    largest = float(np.max(np.abs(Xs.T @ (z - z.mean())))) / Xs.shape[0] if Xs.shape[1] else 1.0
    largest = largest if largest > 0.0 else 1.0
    return largest * np.logspace(0.0, np.log10(ratio), length)


def _path(Xs, z, lambdas):
    """Warm-started fits along the penalties sorted from large to small; results follow the input order."""
    lambdas = np.asarray(lambdas, dtype=float)
    results = [None] * lambdas.size
    beta, intercept = None, None
    for index in np.argsort(-lambdas, kind='stable'):
        beta, intercept, _ = _coordinate_descent(Xs, z, lambdas[index], beta, intercept)
        results[index] = (float(lambdas[index]), beta.copy(), intercept)
    return results


def l1_logistic_path(features, z, lambdas=None):
    """Coefficients of the standardized L1 logistic fit along a penalty path.

    Returns:
        (list): `(penalty, std_coefficients, intercept)` per penalty, in the order of `lambdas`.
    """
    encoded, _ = features.numeric_matrix(one_hot=True)
    z = _check_classes(z)
    Xs, _, _ = _standardize(encoded)
    lambdas = default_lambda_grid(Xs, z) if lambdas is None else lambdas
    return _path(Xs, z, lambdas)


def kkt_residual(model, features, z):
    """Largest violation of the optimality conditions of a fitted `lasso` model at its penalty.

    For a nonzero coefficient the gradient of the mean log-loss must equal `-penalty * sign(beta)`; for a zero
    coefficient its magnitude must not exceed `penalty`; the intercept gradient must vanish.
    """
    encoded, _ = features.numeric_matrix(one_hot=True)
    Xs = (encoded - model.feature_means) / model.feature_scales
    z = np.asarray(z, dtype=float)
    prob = expit(model_std_intercept(model) + Xs @ model.std_coefficients)
    gradient = Xs.T @ (prob - z) / z.size
    active = model.std_coefficients != 0.0
    violations = np.where(active, np.abs(gradient + model.penalty * np.sign(model.std_coefficients)),
                          np.maximum(np.abs(gradient) - model.penalty, 0.0))
    return float(max(np.max(violations, initial=0.0), abs(np.mean(prob - z))))


def model_std_intercept(model):
    """Intercept of a `lasso` model on the standardized feature scale."""
    return model.intercept + float(np.dot(model.coefficients, model.feature_means))


def fit_l1_logistic(features, z, lambda_grid=None, folds=5, rng=None, clip=DEFAULT_CLIP):
    """Fits the L1-penalized logistic propensity model.

    Args:
        features (DesignMatrix): One row per practice, e.g. from `propensity_features()`.
        z (array): Treatment flag per practice.
        lambda_grid (sequence, optional): Candidate penalties on the standardized scale; 30 log-spaced values from
            the zeroing penalty down to 1/1000 of it when None.
        folds (int): Cross-validation folds, reduced to the minority class count when needed.
        rng (Generator, optional): Source of the fold shuffling seed.
        clip (tuple): Bounds of the predicted probabilities.

    Returns:
        (PropensityModel): Model with the penalty of minimal mean held-out log-loss (largest penalty on ties).

    Raises:
        SingleClass: All practices in the same arm.

    Example:
    ```py
    import flexcausal as fc

    features = fc.propensity_features(data)
    model = fc.fit_l1_logistic(features, features.keys['treated'].to_numpy())
    ps = fc.predict_ps(model, features)
    ```
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    encoded, encoded_names = features.numeric_matrix(one_hot=True)
    z = _check_classes(z)
    Xs, means, scales = _standardize(encoded)
    lambdas = default_lambda_grid(Xs, z) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)

    minority = int(min(z.sum(), z.size - z.sum()))
    n_folds = min(folds, minority)
    cv_loss = np.zeros(lambdas.size)
    if n_folds >= 2 and lambdas.size > 1:
        splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=int(rng.integers(2 ** 31 - 1)))
        for train, test in splitter.split(Xs, z):
            for index, (_, beta, intercept) in enumerate(_path(Xs[train], z[train], lambdas)):
                prob = np.clip(expit(intercept + Xs[test] @ beta), 1e-15, 1.0 - 1e-15)
                cv_loss[index] += log_loss(z[test], prob, labels=[0, 1]) / n_folds
        candidates = np.flatnonzero(cv_loss == cv_loss.min())
        best = candidates[np.argmax(lambdas[candidates])]
    else:
        best = int(np.argmin(lambdas))
    penalty = float(lambdas[best])

    path = np.sort(lambdas[lambdas >= penalty])[::-1]
    _, beta, intercept = _path(Xs, z, path)[-1]
    if np.any(np.abs(beta) > SEPARATION_THRESHOLD):
        text = f'Logistic coefficients reach {np.max(np.abs(beta)):.1f} on the standardized scale, ' \
               'the arms look separable'
        logger.warning(text)
        warnings.warn(text, SeparationWarning)

    coefficients = beta / scales
    model = PropensityModel(
        kind='lasso', feature_names=features.names, encoded_names=encoded_names, clip=tuple(clip),
        intercept=float(intercept - np.dot(coefficients, means)), coefficients=coefficients,
        std_coefficients=beta, feature_means=means, feature_scales=scales, penalty=penalty,
        diagnostics={'lambdas': lambdas.tolist(), 'cv_log_loss': cv_loss.tolist(), 'folds': n_folds},
    )
    logger.info(f'L1 logistic propensity: penalty {penalty:.3g}, {int(np.sum(beta != 0))} nonzero coefficients')
    return model


def _sklearn_tree(estimator):
    """Converts a fitted scikit-learn regression tree into a heap-indexed `RegressionTree`."""
    nodes = estimator.tree_
    tree = RegressionTree()
    tree.leaves = {}
    stack = [(0, 1)]
    while stack:
        node, index = stack.pop()
        left, right = nodes.children_left[node], nodes.children_right[node]
        if left == right:
            tree.leaves[index] = float(nodes.value[node].ravel()[0])
            continue
        # scikit-learn sends a row left when x <= threshold
        tree.rules[index] = SplitRule.continuous(int(nodes.feature[node]), float(nodes.threshold[node]))
        stack.append((left, 2 * index))
        stack.append((right, 2 * index + 1))
    return tree


def _stop_round(losses, patience):
    best, best_round = np.inf, 0
    for stage, loss in enumerate(losses):
        if loss < best:
            best, best_round = loss, stage
        elif stage - best_round >= patience:
            break
    return best_round + 1


def fit_gbm(features, z, rounds=500, shrinkage=0.1, depth=3, rng=None, holdout=0.2, patience=50,
            clip=DEFAULT_CLIP):
    """Fits boosted trees of the treatment log-odds.

    Args:
        features (DesignMatrix): One row per practice.
        z (array): Treatment flag per practice.
        rounds (int): Largest number of boosting rounds; 0 returns the intercept-only model.
        shrinkage (float): Learning rate.
        depth (int): Depth of every tree.
        rng (Generator, optional): Source of the holdout and boosting seeds.
        holdout (float): Stratified share of the practices used for early stopping.
        patience (int): Rounds without holdout improvement before stopping.
        clip (tuple): Bounds of the predicted probabilities.

    Returns:
        (PropensityModel): Trees up to the round with the smallest holdout log-loss.

    Raises:
        SingleClass: All practices in the same arm.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    encoded, encoded_names = features.numeric_matrix(one_hot=True)
    z = _check_classes(z).astype(int)
    model = PropensityModel(kind='gbm', feature_names=features.names, encoded_names=encoded_names,
                            clip=tuple(clip), intercept=float(logit(z.mean())), shrinkage=shrinkage)
    if rounds == 0:
        logger.info('Boosted propensity with 0 rounds: constant treated share')
        return model

    seed = int(rng.integers(2 ** 31 - 1))
    indices = np.arange(z.size)
    try:
        train, test = train_test_split(indices, test_size=holdout, stratify=z, random_state=seed)
    except ValueError:
        logger.warning('Too few practices per arm for a stratified holdout, drawing it unstratified')
        train, test = train_test_split(indices, test_size=holdout, random_state=seed)
    if np.unique(z[train]).size < 2:
        raise SingleClass('The training split holds a single treatment arm')

    classifier = GradientBoostingClassifier(n_estimators=rounds, learning_rate=shrinkage, max_depth=depth,
                                            random_state=seed)
    classifier.fit(encoded[train], z[train])
    train_loss = [log_loss(z[train], prob[:, 1], labels=[0, 1])
                  for prob in classifier.staged_predict_proba(encoded[train])]
    holdout_loss = [log_loss(z[test], prob[:, 1], labels=[0, 1])
                    for prob in classifier.staged_predict_proba(encoded[test])]
    kept = _stop_round(holdout_loss, patience)

    model.intercept = float(logit(classifier.init_.class_prior_[1]))
    model.trees = [_sklearn_tree(classifier.estimators_[stage, 0]) for stage in range(kept)]
    model.diagnostics = {'rounds': kept, 'train_log_loss': train_loss, 'holdout_log_loss': holdout_loss}
    logger.info(f'Boosted propensity: {kept} of {rounds} rounds kept')
    return model


def fit_propensity(features, method, settings=None, rng=None):
    """Dispatches to `fit_l1_logistic` or `fit_gbm`.

    Args:
        features (DesignMatrix): One row per practice, keys holding `treated`.
        method (str): `lasso` or `gbm`.
        settings (PropensitySettings, optional): Model settings.
        rng (Generator, optional): Random stream.

    Raises:
        ReservedMethod: For `cbps` and `bart`.
        ConfigError: For any other unknown method.
    """
    if method in RESERVED_METHODS:
        text = f'Propensity method {method} is reserved and not available'
        logger.error(text)
        raise ReservedMethod(text)
    if method not in METHODS:
        text = f'Unknown propensity method {method!r}, expected one of {METHODS}'
        logger.error(text)
        raise ConfigError(text)
    z = features.keys['treated'].to_numpy()
    options = {} if settings is None else settings.options(method)
    if method == 'lasso':
        return fit_l1_logistic(features, z, rng=rng, **options)
    return fit_gbm(features, z, rng=rng, **options)


def predict_ps(model, features):
    """Clipped propensity estimates of the feature rows.

    Raises:
        DimensionMismatch: If the feature columns differ from those of the fitted model.
    """
    features.check_names(model.feature_names)
    encoded, names = features.numeric_matrix(one_hot=True)
    if names != list(model.encoded_names):
        raise DimensionMismatch(f'Encoded columns {names} differ from the fitted {model.encoded_names}')
    return np.clip(expit(model.log_odds(encoded)), model.clip[0], model.clip[1])
