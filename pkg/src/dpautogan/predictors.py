"""Supervised models used by the evaluation metrics.

* ``logistic``: binary logistic regression, damped Newton with step halving
* ``multinomial_logistic``: softmax regression (class 0 as reference), damped Newton
* ``linear``: least squares, or lasso by coordinate descent on standardized features
* ``random_forest``: bootstrap ensemble of Gini CART trees with majority vote

A classification target with a single class yields a constant predictor
flagged ``degenerate``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import expit, log_expit, logsumexp
from sklearn.tree import DecisionTreeClassifier

KINDS = ("logistic", "multinomial_logistic", "linear", "random_forest")

# A small ridge term keeps the optimum finite on separable data.
DEFAULT_L2 = 1e-4
DEFAULT_L1 = 1e-3


@dataclass
class Predictor:
    kind: str
    n_features: int
    classes: Optional[np.ndarray] = None
    degenerate: bool = False
    coef: Optional[np.ndarray] = None
    intercept: Optional[np.ndarray] = None
    trees: List[DecisionTreeClassifier] = field(default_factory=list)
    loss_history: List[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear"


def _check_X(X, n_features: Optional[int] = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, predictor was fit on {n_features}")
    return X


def fit(kind: str, X, y, seed: int = 0, **options) -> Predictor:
    """Fit a predictor of the given kind. See module docstring for the algorithms."""
    if kind not in KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}")
    X = _check_X(X)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y differ in length")
    if X.shape[0] < 1:
        raise ValueError("need at least one row")
    if kind == "linear":
        return _fit_linear(X, y.astype(np.float64), **options)
    classes, codes = np.unique(y, return_inverse=True)
    if len(classes) == 1:
        return Predictor(kind, X.shape[1], classes, degenerate=True)
    if kind == "logistic":
        if len(classes) != 2:
            raise ValueError("binary logistic regression needs exactly two classes")
        return _fit_logistic(X, codes, classes, **options)
    if kind == "multinomial_logistic":
        return _fit_multinomial(X, codes, classes, **options)
    return _fit_forest(X, codes, classes, seed, **options)


def predict_proba(p: Predictor, X) -> np.ndarray:
    """Class probabilities, one row per example and one column per ``p.classes``."""
    if not p.is_classifier:
        raise ValueError("regression predictors have no class probabilities")
    X = _check_X(X, p.n_features)
    K = len(p.classes)
    if p.degenerate:
        return np.ones((X.shape[0], 1))
    if p.kind == "logistic":
        p1 = expit(X @ p.coef[:, 0] + p.intercept[0])
        return np.column_stack([1.0 - p1, p1])
    if p.kind == "multinomial_logistic":
        Z = np.zeros((X.shape[0], K))
        Z[:, 1:] = X @ p.coef + p.intercept
        return np.exp(Z - logsumexp(Z, axis=1, keepdims=True))
    votes = forest_votes(p, X)
    return votes / len(p.trees)


def predict(p: Predictor, X) -> np.ndarray:
    """Labels for classifiers (argmax, ties to the lowest class), values for regression."""
    X = _check_X(X, p.n_features)
    if not p.is_classifier:
        return X @ p.coef + p.intercept[0]
    if p.degenerate:
        return np.full(X.shape[0], p.classes[0])
    if p.kind == "random_forest":
        return p.classes[np.argmax(forest_votes(p, X), axis=1)]
    return p.classes[np.argmax(predict_proba(p, X), axis=1)]


def positive_score(p: Predictor, X) -> np.ndarray:
    """Score of the second class for binary classifiers (zeros when degenerate)."""
    X = _check_X(X, p.n_features)
    if p.degenerate:
        return np.zeros(X.shape[0])
    return predict_proba(p, X)[:, 1]


# --- logistic -----------------------------------------------------------------

def _logistic_loss(w, b, X, y, l2):
    z = X @ w + b
    return float(-np.sum(y * log_expit(z) + (1 - y) * log_expit(-z)) / len(y) + 0.5 * l2 * w @ w)


def _fit_logistic(X, y, classes, l2: float = DEFAULT_L2, tol: float = 1e-10,
                  max_iter: int = 10_000) -> Predictor:
    m, n = X.shape
    y = y.astype(np.float64)
    A = np.column_stack([X, np.ones(m)])
    theta = np.zeros(n + 1)
    reg = np.full(n + 1, l2)
    reg[-1] = 0.0
    loss = _logistic_loss(theta[:-1], theta[-1], X, y, l2)
    history = [loss]
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(A @ theta)
        grad = A.T @ (p - y) / m + reg * theta
        if np.max(np.abs(grad)) < tol:
            break
        H = (A * (p * (1 - p))[:, None]).T @ A / m + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-10
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        while True:
            cand = theta - t * step
            new_loss = _logistic_loss(cand[:-1], cand[-1], X, y, l2)
            if new_loss <= loss - 1e-4 * t * (grad @ step) or t < 1e-12:
                break
            t *= 0.5
        if new_loss > loss:
            break
        improvement = loss - new_loss
        theta, loss = cand, new_loss
        history.append(loss)
        if improvement < 1e-16:
            break
    return Predictor("logistic", n, classes, coef=theta[:-1, None].copy(),
                     intercept=theta[-1:].copy(), loss_history=history, n_iter=it)


def _fit_multinomial(X, y, classes, l2: float = DEFAULT_L2, tol: float = 1e-10,
                     max_iter: int = 10_000, dense_limit: int = 1500) -> Predictor:
    m, n = X.shape
    K = len(classes)
    A = np.column_stack([X, np.ones(m)])
    Y = np.zeros((m, K - 1))
    rows = np.flatnonzero(y > 0)
    Y[rows, y[rows] - 1] = 1.0
    reg = np.full((n + 1, 1), l2)
    reg[-1] = 0.0

    def probs(B):
        Z = np.zeros((m, K))
        Z[:, 1:] = A @ B
        lse = logsumexp(Z, axis=1)
        return Z, lse, np.exp(Z[:, 1:] - lse[:, None])

    def loss_of(B):
        Z, lse, _ = probs(B)
        return float(np.sum(lse - Z[np.arange(m), y]) / m + 0.5 * np.sum(reg * B * B))

    B = np.zeros((n + 1, K - 1))
    loss = loss_of(B)
    history = [loss]
    it = 0
    for it in range(1, max_iter + 1):
        _, _, P = probs(B)
        grad = A.T @ (P - Y) / m + reg * B
        if np.max(np.abs(grad)) < tol:
            break

        def hv(D):
            D = D.reshape(B.shape)
            U = A @ D
            HU = (P * U - P * np.sum(P * U, axis=1, keepdims=True)) / m
            return (A.T @ HU + reg * D + 1e-10 * D).ravel()

        if B.size <= dense_limit:
            H = np.column_stack([hv(e) for e in np.eye(B.size)])
            step = np.linalg.solve(H, grad.ravel()).reshape(B.shape)
        else:
            op = LinearOperator((B.size, B.size), matvec=hv)
            step = cg(op, grad.ravel(), rtol=1e-4, maxiter=50)[0].reshape(B.shape)
        t = 1.0
        slope = float(np.sum(grad * step))
        while True:
            cand = B - t * step
            new_loss = loss_of(cand)
            if new_loss <= loss - 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if new_loss > loss:
            break
        improvement = loss - new_loss
        B, loss = cand, new_loss
        history.append(loss)
        if improvement < 1e-16:
            break
    return Predictor("multinomial_logistic", n, classes, coef=B[:-1].copy(), intercept=B[-1].copy(),
                     loss_history=history, n_iter=it)


# --- linear / lasso -------------------------------------------------------------

def _fit_linear(X, y, l1_penalty: float = DEFAULT_L1, tol: float = 1e-8,
                max_iter: int = 10_000) -> Predictor:
    """Minimise ``1/(2m) ||y - b - X w||^2 + l1 * ||w||_1`` over standardized columns."""
    if l1_penalty < 0:
        raise ValueError("l1_penalty must be non-negative")
    m, n = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 1e-12
    Xs = np.zeros_like(X)
    Xs[:, live] = (X[:, live] - mu[live]) / sd[live]
    yc = y - y.mean()
    beta = np.zeros(n)
    it = 0
    if l1_penalty == 0:
        beta[live] = np.linalg.lstsq(Xs[:, live], yc, rcond=None)[0]
    else:
        G = Xs.T @ Xs / m
        c = Xs.T @ yc / m
        for it in range(1, max_iter + 1):
            max_delta = 0.0
            for j in np.flatnonzero(live):
                rho = c[j] - G[j] @ beta + G[j, j] * beta[j]
                new = np.sign(rho) * max(abs(rho) - l1_penalty, 0.0) / G[j, j]
                max_delta = max(max_delta, abs(new - beta[j]))
                beta[j] = new
            if max_delta < tol:
                break
    coef = np.where(live, beta / np.where(live, sd, 1.0), 0.0)
    intercept = y.mean() - mu @ coef
    return Predictor("linear", n, coef=coef, intercept=np.array([intercept]), n_iter=it)


# --- random forest ----------------------------------------------------------------

def _fit_forest(X, y, classes, seed: int, n_trees: int = 100, max_depth: Optional[int] = None,
                min_leaf: int = 1, feature_subsample: Optional[str] = "sqrt",
                bootstrap: bool = True) -> Predictor:
    m, n = X.shape
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        tree_seed = int(rng.integers(2 ** 31 - 1))
        rows = rng.integers(0, m, size=m) if bootstrap else np.arange(m)
        tree = DecisionTreeClassifier(criterion="gini", max_depth=max_depth,
                                      min_samples_leaf=min_leaf, max_features=feature_subsample,
                                      random_state=tree_seed)
        tree.fit(X[rows], y[rows])
        trees.append(tree)
    return Predictor("random_forest", n, classes, trees=trees)


def tree_predictions(p: Predictor, X) -> np.ndarray:
    """``(n_trees, m)`` matrix of class codes, one row per tree."""
    X = _check_X(X, p.n_features)
    return np.stack([t.classes_[np.argmax(t.predict_proba(X), axis=1)] for t in p.trees])


def forest_votes(p: Predictor, X) -> np.ndarray:
    """``(m, n_classes)`` vote counts over the trees."""
    codes = tree_predictions(p, X)
    K = len(p.classes)
    votes = np.zeros((codes.shape[1], K))
    for row in codes:
        votes[np.arange(len(row)), row] += 1
    return votes
