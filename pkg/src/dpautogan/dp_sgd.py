"""One private optimisation step: Poisson sampling, microbatch clipping, Gaussian noise."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .nn import OptimizerState, optimizer_step


@dataclass(frozen=True)
class DpSgdConfig:
    """Hyperparameters of one privately trained phase.

    ``clip_norm=inf`` disables clipping and is only meant for non-private runs;
    the accountant refuses such configs.
    """

    sampling_rate: float
    clip_norm: float
    noise_multiplier: float
    microbatch_size: int = 1
    learning_rate: float = 1e-3
    optimizer: dict = field(default_factory=lambda: {"kind": "sgd"})
    iterations: int = 1

    def __post_init__(self):
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must lie in (0, 1]")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if self.microbatch_size < 1:
            raise ValueError("microbatch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    @property
    def is_private(self) -> bool:
        return self.noise_multiplier > 0 and math.isfinite(self.clip_norm)

    def k_hat(self, m: int) -> float:
        return self.sampling_rate * m / self.microbatch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip_norm"] = "inf" if math.isinf(self.clip_norm) else self.clip_norm
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DpSgdConfig":
        d = dict(d)
        d["clip_norm"] = float(d["clip_norm"])
        d.setdefault("optimizer", {"kind": "sgd"})
        return cls(**d)


@dataclass
class NoisyGradient:
    g: np.ndarray
    k_hat: float
    batch_indices: np.ndarray


def sample_batch(m: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Include each of ``range(m)`` independently with probability ``q``."""
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if q == 1.0:
        return np.arange(m)
    return np.flatnonzero(rng.random(m) < q)


# Clipped vectors are shrunk by this extra factor so that rounding in any norm
# routine cannot push them back above C.
_CLIP_MARGIN = 1.0 - 1e-12


def _row_norms(M: np.ndarray) -> np.ndarray:
    return np.linalg.norm(M, axis=1)


def clip(v, C: float) -> np.ndarray:
    """Scale ``v`` by ``min(1, C / ||v||)``; the result never exceeds norm ``C``."""
    v = np.asarray(v, dtype=np.float64)
    return clip_rows(v.reshape(1, -1), C).reshape(v.shape)


def clip_rows(grads: np.ndarray, C: float) -> np.ndarray:
    """Row-wise :func:`clip` for a ``(k, n_params)`` matrix."""
    if C <= 0:
        raise ValueError("C must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    if math.isinf(C):
        return grads.copy()
    norms = _row_norms(grads)
    over = norms > C
    out = grads.copy()
    out[over] *= (C / norms[over] * _CLIP_MARGIN)[:, None]
    for j in np.flatnonzero(over):
        while max(_row_norms(out[j:j + 1])[0], np.linalg.norm(out[j])) > C:
            out[j] *= _CLIP_MARGIN
    return out


def noisy_average(microbatch_grads, C: float, psi: float, k_hat: float,
                  rng: np.random.Generator) -> np.ndarray:
    """``(sum_i clip(g_i, C) + N(0, C^2 psi^2 I)) / k_hat``."""
    if psi < 0:
        raise ValueError("psi must be non-negative")
    if k_hat <= 0:
        raise ValueError("k_hat must be positive")
    grads = np.atleast_2d(np.asarray(microbatch_grads, dtype=np.float64))
    clipped = clip_rows(grads, C)
    assert np.all(_row_norms(clipped) <= C), "clipped contribution exceeds C"
    total = clipped.sum(axis=0)
    if psi > 0:
        total = total + rng.standard_normal(total.shape) * (C * psi)
    return total / k_hat


def partition(batch: np.ndarray, r: int) -> np.ndarray:
    """Split sampled indices into ``floor(|B| / r)`` microbatches of size ``r``; leftovers are dropped."""
    k = len(batch) // r
    return np.asarray(batch[:k * r]).reshape(k, r)


def noisy_gradient(m: int, microbatch_grads: Callable[[np.ndarray], np.ndarray],
                   cfg: DpSgdConfig, rng: np.random.Generator) -> Optional[NoisyGradient]:
    """Sample, partition and privatise; ``None`` when fewer than ``r`` rows were sampled.

    ``microbatch_grads`` maps a ``(k, r)`` index matrix to the ``(k, n_params)``
    matrix of per-microbatch mean gradients.
    """
    batch = sample_batch(m, cfg.sampling_rate, rng)
    parts = partition(batch, cfg.microbatch_size)
    if len(parts) == 0:
        return None
    grads = microbatch_grads(parts)
    k_hat = cfg.k_hat(m)
    g = noisy_average(grads, cfg.clip_norm, cfg.noise_multiplier, k_hat, rng)
    return NoisyGradient(g, k_hat, batch)


def dp_sgd_step(m: int, microbatch_grads: Callable[[np.ndarray], np.ndarray], params: np.ndarray,
                cfg: DpSgdConfig, opt_state: OptimizerState, rng: np.random.Generator):
    """One full DP-SGD iteration over a dataset of ``m`` rows.

    Returns ``(params, opt_state, noisy_gradient_or_None)``. A skipped step
    (fewer than ``r`` rows sampled) leaves parameters and optimizer untouched.
    """
    if m < 1:
        raise ValueError("dataset must be non-empty")
    ng = noisy_gradient(m, microbatch_grads, cfg, rng)
    if ng is None:
        return params, opt_state, None
    new_params, new_state = optimizer_step(opt_state, params, ng.g, cfg.learning_rate)
    return new_params, new_state, ng
