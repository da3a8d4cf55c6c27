"""Synthetic-versus-real quality metrics.

Datasets enter either raw (:class:`~dpautogan.data.Table`) or encoded
(``(m, n)`` matrices in ``[0, 1]``). Undefined scores are reported as
``None`` together with a reason string, never as sentinel numbers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import predictors
from .data import Schema, Table, preprocess

log = logging.getLogger(__name__)

ALL_METRICS = ("probability", "prediction", "histogram", "kway_tv", "pca", "diversity", "label")


# --- discrete distributions and divergences ---------------------------------------

@dataclass(frozen=True)
class DiscreteDist:
    categories: Tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "probs", p)
        if p.shape != (len(self.categories),):
            raise ValueError("one probability per category required")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")

    @classmethod
    def from_codes(cls, codes, categories: Sequence[str]) -> "DiscreteDist":
        counts = np.bincount(np.asarray(codes, dtype=np.int64), minlength=len(categories))
        total = counts.sum()
        if total == 0:
            raise ValueError("cannot build a distribution from zero observations")
        return cls(tuple(categories), counts / total)


def _aligned(P: DiscreteDist, Q: DiscreteDist):
    if P.categories != Q.categories:
        raise ValueError("distributions are over different category lists")
    return P.probs, Q.probs


def kl(P: DiscreteDist, Q: DiscreteDist) -> float:
    """Plain KL divergence in nats; ``inf`` if ``Q`` misses part of ``P``'s support."""
    p, q = _aligned(P, Q)
    s = p > 0
    if np.any(q[s] == 0):
        return math.inf
    return float(np.sum(p[s] * np.log(p[s] / q[s])))


def auto_mu(P: DiscreteDist) -> float:
    """Smoothing ``exp(-1 / (1 - p1))`` where ``p1`` is the largest probability of ``P``."""
    p1 = float(P.probs.max())
    if p1 >= 1.0:
        raise ValueError("automatic mu is undefined for a point-mass distribution; pass mu")
    return math.exp(-1.0 / (1.0 - p1))


def mu_smoothed_kl(P: DiscreteDist, Q: DiscreteDist, mu: Union[float, str] = "auto") -> float:
    """``sum over supp(P) of (P + mu) log((P + mu) / (Q + mu))``.

    Smaller ``mu`` penalises categories that ``Q`` misses more heavily.
    """
    p, q = _aligned(P, Q)
    if mu == "auto":
        mu = auto_mu(P)
    mu = float(mu)
    if not mu > 0:
        raise ValueError("mu must be positive")
    s = p > 0
    a = p[s] + mu
    return float(np.sum(a * np.log(a / (q[s] + mu))))


def jsd(P: DiscreteDist, Q: DiscreteDist) -> float:
    """Jensen-Shannon divergence against the mixture ``(P + Q) / 2``, in nats."""
    p, q = _aligned(P, Q)
    total = p + q
    out = 0.0
    for x in (p, q):
        s = x > 0
        # x / M written as 2x / (p + q) so that subnormal masses cannot divide by zero
        out += 0.5 * float(np.sum(x[s] * np.log(2.0 * x[s] / total[s])))
    return max(out, 0.0)


# --- classification and regression scores -----------------------------------------

def auroc(y_true, score) -> Optional[float]:
    """Area under the ROC curve, trapezoids over every distinct threshold.

    Counts are accumulated as integers so the value is exactly
    ``P[s+ > s-] + P[s+ = s-] / 2``. ``None`` when only one class is present.
    """
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(score, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    edges = np.flatnonzero(np.diff(s)) + 1
    groups = np.split(np.arange(len(s)), edges)
    tp = fp = 0
    twice_area = 0
    for g in groups:
        d_tp = int(y[g].sum())
        d_fp = len(g) - d_tp
        twice_area += d_fp * (2 * tp + d_tp)
        tp += d_tp
        fp += d_fp
    return twice_area / (2 * n_pos * n_neg)


def f1_binary(y_true, y_pred, positive=1) -> float:
    """``2 precision recall / (precision + recall)`` with ``0/0`` read as 0."""
    t = np.asarray(y_true) == positive
    p = np.asarray(y_pred) == positive
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def f1_micro(y_true, y_pred) -> float:
    """Micro-averaged F1; for single-label multiclass data this equals accuracy."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    tp = int(np.sum(t == p))
    wrong = len(t) - tp
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + 2 * wrong)


def classification_scores(y_true, y_pred, y_score=None, binary: Optional[bool] = None,
                          positive=1) -> dict:
    """F1 (binary or micro), accuracy and, for binary targets with scores, AUROC."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape:
        raise ValueError("y_true and y_pred differ in length")
    if binary is None:
        binary = len(np.union1d(np.unique(t), np.unique(p))) <= 2
    out = {
        "accuracy": float(np.mean(t == p)) if len(t) else None,
        "f1": f1_binary(t, p, positive) if binary else f1_micro(t, p),
        "auroc": None,
    }
    if binary and y_score is not None:
        out["auroc"] = auroc(t == positive, y_score)
        if out["auroc"] is None:
            out["auroc_undefined"] = "test column has a single class"
    return out


def r2_score(y_true, y_pred) -> Optional[float]:
    """``1 - sum (y - yhat)^2 / sum (y - mean y)^2``; ``None`` for a constant target."""
    y = np.asarray(y_true, dtype=np.float64)
    yh = np.asarray(y_pred, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return None
    return 1.0 - float(np.sum((y - yh) ** 2)) / ss_tot


# --- dimension-wise metrics ---------------------------------------------------------

def binary_columns(schema: Schema) -> List[Tuple[str, int]]:
    """``(label, encoded index)`` for every 0/1 column of the encoding."""
    out = []
    for c, (lo, hi) in zip(schema.columns, schema.offsets):
        if c.kind == "categorical":
            out += [(f"{c.name}={cat}", lo + j) for j, cat in enumerate(c.categories)]
        elif c.kind == "binary_label":
            out.append((f"{c.name}={c.categories[1]}", lo))
    return out


def dimension_wise_probability(R, S, schema: Schema) -> List[dict]:
    """Proportion of ones in each binary encoded column, real against synthetic."""
    R = np.asarray(R, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    return [{"name": name, "real": float(R[:, j].mean()), "synth": float(S[:, j].mean())}
            for name, j in binary_columns(schema)]


DEFAULT_POLICY = {"binary": "logistic", "multiclass": "multinomial_logistic", "continuous": "linear"}


def _feature_target(table: Table, X: np.ndarray, schema: Schema, k: int):
    c = schema.columns[k]
    lo, hi = schema.offsets[k]
    features = np.delete(X, np.arange(lo, hi), axis=1)
    return features, table.columns[c.name]


def _score_feature(kind: str, model_kind: str, Xtr, ytr, Xte, yte, seed: int) -> dict:
    if kind == "continuous":
        model = predictors.fit(model_kind, Xtr, ytr, seed=seed)
        r2 = r2_score(yte, predictors.predict(model, Xte))
        out = {"r2": r2, "score": r2}
        if r2 is None:
            out["undefined"] = "test column is constant"
        return out
    model = predictors.fit(model_kind, Xtr, ytr, seed=seed)
    yhat = predictors.predict(model, Xte)
    if kind == "binary":
        score = None
        if not model.degenerate and 1 in model.classes:
            score = predictors.predict_proba(model, Xte)[:, list(model.classes).index(1)]
        out = classification_scores(yte, yhat, score, binary=True, positive=1)
        if model.degenerate:
            out["undefined"] = "training column has a single class"
        elif out["auroc"] is None:
            out["undefined"] = out.pop("auroc_undefined")
        out["score"] = out["auroc"]
    else:
        out = classification_scores(yte, yhat, binary=False)
        out["score"] = out["f1"]
    out["degenerate_fit"] = bool(model.degenerate)
    return out


def _feature_kind(schema: Schema, k: int) -> str:
    c = schema.columns[k]
    if c.is_continuous:
        return "continuous"
    return "binary" if len(c.categories) == 2 else "multiclass"


def dimension_wise_prediction(R_train: Table, S: Table, T_test: Table, schema: Optional[Schema] = None,
                              policy: Optional[dict] = None, seed: int = 0,
                              features: Optional[Sequence[str]] = None) -> List[dict]:
    """Train on real and on synthetic data to predict each feature from the rest; test on real.

    Binary features score by AUROC, multiclass by micro-F1, continuous by R^2.
    """
    schema = schema or R_train.schema
    policy = {**DEFAULT_POLICY, **(policy or {})}
    XR, XS, XT = preprocess(R_train, schema), preprocess(S, schema), preprocess(T_test, schema)
    out = []
    for k, c in enumerate(schema.columns):
        if features is not None and c.name not in features:
            continue
        kind = _feature_kind(schema, k)
        Xr, yr = _feature_target(R_train, XR, schema, k)
        Xs, ys = _feature_target(S, XS, schema, k)
        Xt, yt = _feature_target(T_test, XT, schema, k)
        real = _score_feature(kind, policy[kind], Xr, yr, Xt, yt, seed)
        synth = _score_feature(kind, policy[kind], Xs, ys, Xt, yt, seed)
        flags = []
        if not c.is_continuous and len(np.unique(ys)) == 1:
            flags.append("synthetic_single_class")
        if "undefined" in real or "undefined" in synth:
            flags.append("score_undefined")
        out.append({"name": c.name, "kind": kind, "metric": {"binary": "auroc", "multiclass": "f1",
                                                            "continuous": "r2"}[kind],
                    "real": real, "synth": synth, "flags": flags})
    return out


def label_prediction_accuracy(S: Table, R_test: Table, label_column: str, seed: int = 0,
                              **forest_options) -> dict:
    """Random forest trained on ``S`` (all other features) and scored on ``R_test``."""
    schema = S.schema
    k = schema.index(label_column)
    if schema.columns[k].is_continuous:
        raise ValueError("label column must be categorical")
    Xs, ys = _feature_target(S, preprocess(S), schema, k)
    Xt, yt = _feature_target(R_test, preprocess(R_test, schema), schema, k)
    model = predictors.fit("random_forest", Xs, ys, seed=seed, **forest_options)
    yhat = predictors.predict(model, Xt)
    binary = len(schema.columns[k].categories) == 2
    scores = classification_scores(yt, yhat, binary=binary, positive=1)
    return {"label": label_column, "accuracy": scores["accuracy"], "f1": scores["f1"],
            "degenerate": bool(model.degenerate)}


# --- marginals ----------------------------------------------------------------------

def _bin_codes(R: Table, S: Table, name: str, bins: int) -> Tuple[np.ndarray, np.ndarray]:
    spec = R.schema[name]
    r, s = R.columns[name], S.columns[name]
    if not spec.is_continuous:
        return r.astype(np.int64), s.astype(np.int64)
    lo, hi = float(r.min()), float(r.max())
    if hi == lo:
        return np.zeros(len(r), np.int64), np.zeros(len(s), np.int64)

    def b(v):
        return np.clip(np.floor((v - lo) * bins / (hi - lo)), 0, bins - 1).astype(np.int64)
    return b(r), b(s)


def kway_tv(R: Table, S: Table, features: Sequence[str], bins: int = 100) -> float:
    """Sum over joint bins of ``|mass_R - mass_S|``; lies in ``[0, 2]``.

    Continuous features are cut into ``bins`` equal-width bins spanning the
    real data's range (synthetic values outside it go to the edge bins).
    """
    if len(features) < 1:
        raise ValueError("need at least one feature")
    nR, nS = R.n_rows, S.n_rows
    if nR == 0 or nS == 0:
        raise ValueError("both datasets must be non-empty")
    codes = [_bin_codes(R, S, f, bins) for f in features]
    keys = np.vstack([np.column_stack([c[0] for c in codes]), np.column_stack([c[1] for c in codes])])
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    cR = np.bincount(inv[:nR], minlength=inv.max() + 1).astype(np.int64)
    cS = np.bincount(inv[nR:], minlength=inv.max() + 1).astype(np.int64)
    num = int(np.abs(cR * nS - cS * nR).sum())
    return num / (nR * nS)


def kway_marginal_tv(R: Table, S: Table, features: Optional[Sequence[str]] = None, k: int = 3,
                     bins: int = 100, repeats: int = 100, seed: int = 0) -> dict:
    """k-way TV on the given features, or averaged over random ``k``-subsets."""
    if features is not None:
        score = kway_tv(R, S, features, bins)
        return {"k": len(features), "features": [list(features)], "scores": [score], "mean": score}
    names = R.schema.names
    if not 1 <= k <= len(names):
        raise ValueError("k must lie between 1 and the number of columns")
    rng = np.random.default_rng(seed)
    subsets, scores = [], []
    for _ in range(repeats):
        pick = sorted(rng.choice(len(names), size=k, replace=False).tolist())
        subset = [names[i] for i in pick]
        subsets.append(subset)
        scores.append(kway_tv(R, S, subset, bins))
    return {"k": k, "features": subsets, "scores": scores, "mean": float(np.mean(scores))}


def histogram_1way(R: Table, S: Table, feature: str, bins: int = 20) -> dict:
    """Paired relative frequencies of one feature.

    Categorical features use their categories; continuous features use
    ``bins`` equal-width bins over the schema bounds, the last one closed.
    """
    spec = R.schema[feature]
    if spec.is_continuous:
        edges = np.linspace(spec.min, spec.max, bins + 1)
        labels = [f"[{edges[i]:.6g},{edges[i + 1]:.6g}{']' if i == bins - 1 else ')'}"
                  for i in range(bins)]
        counts = [np.histogram(np.clip(t.columns[feature], spec.min, spec.max), bins=edges)[0]
                  for t in (R, S)]
    else:
        labels = list(spec.categories)
        counts = [np.bincount(t.columns[feature], minlength=len(labels)) for t in (R, S)]
    freqs = [c / max(c.sum(), 1) for c in counts]
    return {"feature": feature, "bins": labels, "real": freqs[0].tolist(), "synth": freqs[1].tolist()}


def histogram_tv(hist: dict) -> float:
    """Total variation ``0.5 * sum |p - q|`` of a paired histogram."""
    return 0.5 * float(np.abs(np.asarray(hist["real"]) - np.asarray(hist["synth"])).sum())


def marginal_tv_1way(R: Table, S: Table, feature: str, bins: int = 20) -> float:
    return histogram_tv(histogram_1way(R, S, feature, bins))


# --- PCA and Wasserstein ------------------------------------------------------------------

def pca_projection(R, k: int = 2) -> Tuple[np.ndarray, float]:
    """Top-``k`` principal directions (columns, orthonormal) and the variance fraction they explain.

    Each direction is signed so its largest-magnitude entry is positive.
    Rank-deficient data yields fewer columns, with a warning.
    """
    X = np.asarray(R, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a matrix with at least two rows")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    w, V = np.linalg.eigh(cov)
    w, V = w[::-1], V[:, ::-1]
    total = float(w.clip(min=0).sum())
    rank = int(np.sum(w > max(w[0], 0.0) * 1e-12)) if w[0] > 0 else 0
    if rank < k:
        log.warning("data has rank %d < %d; returning %d components", rank, k, rank)
        k = rank
    P = V[:, :k].copy()
    for j in range(k):
        i = int(np.argmax(np.abs(P[:, j])))
        if P[i, j] < 0:
            P[:, j] = -P[:, j]
    v = float(w[:k].sum() / total) if total > 0 else 0.0
    return P, v


def matching_cost(A, B) -> float:
    """Mean squared Euclidean cost of the optimal perfect matching of two equal-size sets."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError("point sets must have the same shape")
    C = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
    r, c = linear_sum_assignment(C)
    return float(C[r, c].mean())


def wasserstein2(A, B, max_points: int = 512, subsamples: int = 5, seed: int = 0) -> float:
    """Squared 2-Wasserstein distance between empirical point sets.

    Sets of different size are subsampled to the smaller one; sets larger
    than ``max_points`` are averaged over seeded ``max_points`` subsamples.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n = min(len(A), len(B))
    if n == 0:
        raise ValueError("empty point set")
    if len(A) == len(B) <= max_points:
        return matching_cost(A, B)
    rng = np.random.default_rng(seed)
    size = min(n, max_points)
    reps = subsamples if size < max(len(A), len(B)) else 1
    vals = [matching_cost(A[rng.choice(len(A), size, replace=False)],
                          B[rng.choice(len(B), size, replace=False)]) for _ in range(reps)]
    return float(np.mean(vals))


def wasserstein_score(R_proj, S_proj, diameter: float, v: float, **kw) -> float:
    """``1 - W / (sqrt(v) * diameter^2)`` with ``W`` the squared 2-Wasserstein distance."""
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    if not 0 < v <= 1 + 1e-12:
        raise ValueError("explained variance must lie in (0, 1]")
    return 1.0 - wasserstein2(R_proj, S_proj, **kw) / (math.sqrt(v) * diameter ** 2)


def pca_wasserstein(R, S, diameter: float, k: int = 2, seed: int = 0) -> dict:
    """Project both encoded sets on the real data's top-``k`` directions and score them."""
    P, v = pca_projection(R, k)
    R = np.asarray(R, dtype=np.float64)
    mean = R.mean(axis=0)
    Rp = (R - mean) @ P
    Sp = (np.asarray(S, dtype=np.float64) - mean) @ P
    return {"k": P.shape[1], "explained_variance": v,
            "score": wasserstein_score(Rp, Sp, diameter, v, seed=seed),
            "real_points": Rp, "synth_points": Sp}


# --- diversity --------------------------------------------------------------------------

def diversity_table(R: Table, S: Table) -> List[dict]:
    """Per categorical feature: smoothed KL and JSD of the synthetic marginal against the real one."""
    rows = []
    for c in R.schema.columns:
        if c.is_continuous:
            continue
        P = DiscreteDist.from_codes(R.columns[c.name], c.categories)
        Q = DiscreteDist.from_codes(S.columns[c.name], c.categories)
        try:
            mu = auto_mu(P)
            skl = mu_smoothed_kl(P, Q, mu)
        except ValueError:
            mu, skl = None, None
        rows.append({"name": c.name, "mu": mu, "mu_smoothed_kl": skl, "jsd": jsd(P, Q),
                     "synth_support": int(np.sum(Q.probs > 0)), "real_support": int(np.sum(P.probs > 0))})
    return rows


# --- report -------------------------------------------------------------------------------

def report_schema() -> dict:
    return json.loads(resources.files("dpautogan").joinpath("report_schema.json").read_text())


def validate_report(report: dict) -> None:
    import jsonschema
    jsonschema.validate(report, report_schema())


def _scrub(x):
    """Replace non-finite floats by ``None`` so the report is strict JSON."""
    if isinstance(x, dict):
        return {k: _scrub(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_scrub(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def evaluate(R_train: Table, R_test: Table, S: Table, metrics: Sequence[str] = ALL_METRICS,
             seed: int = 0, label_column: Optional[str] = None, hist_bins: int = 20,
             kway: int = 3, kway_repeats: int = 100, provenance: Optional[dict] = None):
    """Run the selected metrics; returns ``(report, plot_tables)``.

    ``report`` is a JSON-ready dict conforming to ``report_schema.json``;
    ``plot_tables`` maps a table name to ``(header, rows)`` for CSV output.
    """
    unknown = [m for m in metrics if m not in ALL_METRICS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {list(ALL_METRICS)}")
    schema = R_train.schema
    if R_test.schema != schema or S.schema != schema:
        raise ValueError("all datasets must share one schema")
    if "label" in metrics and label_column is None:
        metrics = [m for m in metrics if m != "label"]
    XR, XS = preprocess(R_train), preprocess(S)
    report = {"version": 1, "provenance": dict(provenance or {}, seed=seed,
                                                  rows={"real_train": R_train.n_rows,
                                                        "real_test": R_test.n_rows,
                                                        "synth": S.n_rows}),
              "metrics": list(metrics), "per_feature": [], "global": {},
              "notes": ["jsd uses the mixture form 0.5 KL(P||M) + 0.5 KL(Q||M), M = (P + Q) / 2",
                        "kway_tv lies in [0, 2]; 1-way marginal tv is 0.5 * L1 and lies in [0, 1]"]}
    tables: Dict[str, Tuple[list, list]] = {}

    if "probability" in metrics:
        probs = dimension_wise_probability(XR, XS, schema)
        report["global"]["probability"] = probs
        tables["probability_pairs"] = (["feature", "real", "synth"],
                                       [[p["name"], p["real"], p["synth"]] for p in probs])
    if "prediction" in metrics:
        pred = dimension_wise_prediction(R_train, S, R_test, schema, seed=seed)
        report["per_feature"] = pred
        tables["prediction_pairs"] = (["feature", "metric", "real", "synth", "flags"],
                                      [[p["name"], p["metric"], p["real"]["score"], p["synth"]["score"],
                                        ";".join(p["flags"])] for p in pred])
    if "histogram" in metrics:
        hists = [histogram_1way(R_train, S, c.name, hist_bins) for c in schema.columns]
        report["global"]["marginal_tv_1way"] = [{"name": h["feature"], "tv": histogram_tv(h)}
                                                for h in hists]
        tables["histograms"] = (["feature", "bin", "real", "synth"],
                                [[h["feature"], b, r, s] for h in hists
                                 for b, r, s in zip(h["bins"], h["real"], h["synth"])])
    if "kway_tv" in metrics:
        k = min(kway, len(schema.columns))
        report["global"]["kway_tv"] = kway_marginal_tv(R_train, S, k=k, repeats=kway_repeats, seed=seed)
    if "pca" in metrics:
        pw = pca_wasserstein(XR, XS, schema.diameter, seed=seed)
        report["global"]["pca_wasserstein"] = {k: pw[k] for k in ("k", "explained_variance", "score")}
        pts = [["real", *row] for row in pw["real_points"].tolist()]
        pts += [["synth", *row] for row in pw["synth_points"].tolist()]
        tables["pca_scatter"] = (["source"] + [f"pc{j + 1}" for j in range(pw["k"])], pts)
    if "diversity" in metrics:
        report["global"]["diversity"] = diversity_table(R_train, S)
    if "label" in metrics:
        report["global"]["label_prediction"] = {
            "synthetic": label_prediction_accuracy(S, R_test, label_column, seed=seed),
            "real": label_prediction_accuracy(R_train, R_test, label_column, seed=seed)}
    report = _scrub(report)
    return report, tables
