"""Renyi-DP accounting for Poisson-subsampled Gaussian DP-SGD.

Curves are composed at the RDP level (pointwise sums over a shared grid of
integer orders) and only converted to (epsilon, delta)-DP at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS = tuple(range(2, 257)) + (272, 304, 368, 496, 752, 1264, 2048)

# exp() underflows below this many nats relative to the largest term
_LOG_UNDERFLOW = 745.0


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(int(a) for a in self.orders))
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if len(self.orders) != vals.shape[0]:
            raise ValueError("orders and values differ in length")
        if any(a < 2 for a in self.orders) or list(self.orders) != sorted(set(self.orders)):
            raise ValueError("orders must be distinct ascending integers >= 2")
        if np.any(vals < 0) or np.any(np.isnan(vals)):
            raise ValueError("RDP values must be non-negative")

    @classmethod
    def zero(cls, orders: Sequence[int] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), np.zeros(len(orders)))

    def to_dict(self) -> dict:
        return {"orders": list(self.orders),
                "values": [v if math.isfinite(v) else "inf" for v in self.values.tolist()]}

    @classmethod
    def from_dict(cls, d: dict) -> "RdpCurve":
        return cls(tuple(d["orders"]), np.array([float(v) for v in d["values"]]))


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    optimal_order: Optional[int]

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon if math.isfinite(self.epsilon) else "inf",
                "delta": self.delta, "optimal_order": self.optimal_order}

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacySpend":
        return cls(float(d["epsilon"]), float(d["delta"]), d.get("optimal_order"))


NON_PRIVATE = float("inf")


def rdp_subsampled_gaussian(q: float, psi: float, alpha: int) -> float:
    """RDP of one Poisson-subsampled Gaussian step at integer order ``alpha``.

    ``log(sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1) / (2 psi^2))) / (a-1)``,
    summed in log space. Returns ``inf`` when the sum is not representable.
    """
    alpha = int(alpha)
    if alpha < 2:
        raise ValueError("alpha must be an integer >= 2")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if psi < 0:
        raise ValueError("psi must be non-negative")
    if psi == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * psi * psi)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
                 + (alpha - k) * math.log1p(-q) + k * math.log(q)
                 + k * (k - 1) / (2.0 * psi * psi))
    log_terms = log_terms[log_terms >= log_terms.max() - _LOG_UNDERFLOW]
    total = float(logsumexp(log_terms))
    if not math.isfinite(total):
        return math.inf
    return max(total, 0.0) / (alpha - 1)


def rdp_curve(q: float, psi: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Single-iteration RDP curve over ``orders``."""
    return RdpCurve(tuple(orders), np.array([rdp_subsampled_gaussian(q, psi, a) for a in orders]))


def compose_iterations(curve: RdpCurve, T: int) -> RdpCurve:
    if T < 0:
        raise ValueError("T must be non-negative")
    with np.errstate(invalid="ignore"):
        vals = np.where(np.isinf(curve.values) & (T == 0), 0.0, curve.values * T)
    return RdpCurve(curve.orders, vals)


def rdp_account(T: int, q: float, psi: float, r: int = 1,
                orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Curve of ``T`` DP-SGD iterations.

    The microbatch size ``r`` does not enter: one record still lands in a
    single clipped microbatch, so the sensitivity stays ``C``.
    """
    if T == 0:
        return RdpCurve.zero(orders)
    return compose_iterations(rdp_curve(q, psi, orders), T)


def add_curves(c1: RdpCurve, c2: RdpCurve) -> RdpCurve:
    """Pointwise sum; orders missing from either grid become ``inf``."""
    if c1.orders == c2.orders:
        return RdpCurve(c1.orders, c1.values + c2.values)
    grid = sorted(set(c1.orders) | set(c2.orders))
    lookup1 = dict(zip(c1.orders, c1.values))
    lookup2 = dict(zip(c2.orders, c2.values))
    vals = [lookup1.get(a, math.inf) + lookup2.get(a, math.inf) for a in grid]
    return RdpCurve(tuple(grid), np.array(vals))


def sum_curves(curves: Iterable[RdpCurve]) -> RdpCurve:
    curves = list(curves)
    out = curves[0]
    for c in curves[1:]:
        out = add_curves(out, c)
    return out


def to_dp(curve: RdpCurve, delta: float) -> PrivacySpend:
    """Best ``(epsilon, delta)`` over the order grid; ties go to the smaller order."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    orders = np.asarray(curve.orders, dtype=np.float64)
    eps = curve.values + math.log(1.0 / delta) / (orders - 1.0)
    if not np.any(np.isfinite(eps)):
        raise ValueError("budget unbounded: every order of the curve is infinite")
    i = int(np.argmin(eps))
    return PrivacySpend(float(eps[i]), delta, curve.orders[i])


@dataclass(frozen=True)
class CompositionComparison:
    eps_combined: float
    eps1: float
    eps2: float

    @property
    def naive_sum(self) -> float:
        return self.eps1 + self.eps2

    @property
    def savings(self) -> float:
        return 1.0 - self.eps_combined / self.naive_sum


def joint_vs_separate(c1: RdpCurve, c2: RdpCurve, delta: float) -> CompositionComparison:
    """RDP-level composition at ``delta`` against two separate conversions at ``delta / 2``."""
    combined = to_dp(add_curves(c1, c2), delta).epsilon
    return CompositionComparison(combined, to_dp(c1, delta / 2).epsilon, to_dp(c2, delta / 2).epsilon)


def account_phases(phases: Sequence[dict], delta: float,
                   orders: Sequence[int] = DEFAULT_ORDERS) -> dict:
    """Accounting report for a list of phases ``{q, psi, T, r}``.

    Each phase is converted on its own at ``delta / len(phases)`` and all
    phases together at ``delta``.
    """
    if not phases:
        raise ValueError("at least one phase is required")
    curves = []
    for ph in phases:
        psi = float(ph["psi"])
        if psi <= 0:
            raise ValueError("non-private phases (psi = 0) cannot be accounted")
        curves.append(rdp_account(int(ph["T"]), float(ph["q"]), psi, int(ph.get("r", 1)), orders))
    per_delta = delta / len(curves)
    per_phase = [to_dp(c, per_delta) for c in curves]
    combined = to_dp(sum_curves(curves), delta)
    naive = sum(s.epsilon for s in per_phase)
    return {
        "delta": delta,
        "per_phase": [{"eps": s.epsilon, "alpha_star": s.optimal_order, "delta": per_delta}
                      for s in per_phase],
        "combined": {"eps": combined.epsilon, "alpha_star": combined.optimal_order},
        "naive_sum_eps": naive,
        "savings": 1.0 - combined.epsilon / naive,
    }
