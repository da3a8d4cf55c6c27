"""Named training configurations for the ADULT census and MIMIC-III experiments, plus a toy plan.

The MIMIC presets reproduce the published hyperparameters but cannot be
checked here, since the data is access-restricted.
"""

from __future__ import annotations

import math
from typing import Dict, Optional

from .dp_sgd import DpSgdConfig
from .nn import BatchNorm1d, Dense, MlpSpec, leaky_relu, mlp, sigmoid, tanh
from .trainer import SEED_NAMES, AutoencoderPlan, GanPlan, TrainPlan

ADULT_WIDTH = 106
ADULT_TRAIN = 32561
MIMIC_WIDTH = 1071
MIMIC_TRAIN = 27912

# name -> (autoencoder noise multiplier, discriminator noise multiplier)
ADULT_NOISE = {"adult-eps-0.36": (5.0, 8.0), "adult-eps-0.51": (2.5, 7.5),
               "adult-eps-1.01": (1.5, 3.5), "adult-nonprivate": (0.0, 0.0)}
# name -> (noise multiplier for both phases, discriminator iterations at the chosen checkpoint)
MIMIC_NOISE = {"mimic-eps-0.81": (3.5, 6000), "mimic-eps-1.33": (2.3, 7000),
               "mimic-eps-2.70": (1.3, 7000), "mimic-nonprivate": (0.0, 20000)}

PRESETS = tuple(ADULT_NOISE) + tuple(MIMIC_NOISE)


def _dp(batch: int, n_train: int, clip: float, psi: float, lr: float, optimizer: dict,
        iterations: int) -> DpSgdConfig:
    private = psi > 0
    return DpSgdConfig(sampling_rate=min(1.0, batch / n_train),
                       clip_norm=clip if private else math.inf,
                       noise_multiplier=psi, microbatch_size=1, learning_rate=lr,
                       optimizer=optimizer, iterations=iterations)


ADAM = {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8}
RMSPROP = {"kind": "rmsprop", "alpha": 0.99, "epsilon": 1e-8}


def adult_generator(noise_dim: int = 64, latent: int = 15) -> MlpSpec:
    """Three Linear/BatchNorm/LeakyReLU blocks; block 0's output is added to block 1's."""
    layers = []
    for a, b in ((noise_dim, 64), (64, 64), (64, latent)):
        layers += [Dense(a, b, bias=False), BatchNorm1d(b), leaky_relu(0.2)]
    return MlpSpec(tuple(layers), ((0, 1),))


def adult_plan(name: str = "adult-eps-0.51", n_train: int = ADULT_TRAIN,
               seeds: Optional[Dict[str, int]] = None, delta: float = 1e-5) -> TrainPlan:
    psi1, psi3 = ADULT_NOISE[name]
    lrelu = leaky_relu(0.2)
    ae = AutoencoderPlan(
        encoder=mlp((ADULT_WIDTH, 60, 15), lrelu, lrelu),
        decoder=mlp((15, 60, ADULT_WIDTH), lrelu, sigmoid()),
        dp=_dp(64, n_train, 0.012, psi1, 0.005, ADAM, 10_000))
    critic_steps, d_iters = 15, 15_000
    gan = GanPlan(
        generator=adult_generator(),
        discriminator=mlp((ADULT_WIDTH, 70, 35, 1), lrelu),
        discriminator_dp=_dp(128, n_train, 0.022, psi3, 0.005, RMSPROP, d_iters),
        generator_steps=d_iters // critic_steps, critic_steps=critic_steps,
        generator_lr=0.005, generator_batch=128, generator_optimizer=RMSPROP)
    return TrainPlan(ae, gan, delta, dict(seeds or {k: i for i, k in enumerate(SEED_NAMES)}), name)


def mimic_plan(name: str = "mimic-eps-0.81", n_train: int = MIMIC_TRAIN,
               seeds: Optional[Dict[str, int]] = None, delta: float = 1e-5) -> TrainPlan:
    psi, d_iters = MIMIC_NOISE[name]
    latent = 64 if psi > 0 else 128
    lrelu = leaky_relu(0.2)
    ae = AutoencoderPlan(
        encoder=mlp((MIMIC_WIDTH, latent), tanh(), tanh()),
        decoder=mlp((latent, MIMIC_WIDTH), sigmoid(), sigmoid()),
        dp=_dp(100, n_train, 0.8157, psi, 0.001, ADAM, 15_000))
    critic_steps = 2
    gan = GanPlan(
        generator=mlp((latent, latent, latent), lrelu, tanh()),
        discriminator=mlp((MIMIC_WIDTH, 256, 1), lrelu),
        discriminator_dp=_dp(128, n_train, 0.35, psi, 0.001, RMSPROP, d_iters),
        generator_steps=d_iters // critic_steps, critic_steps=critic_steps,
        generator_lr=0.001, generator_batch=1000, generator_optimizer=RMSPROP)
    return TrainPlan(ae, gan, delta, dict(seeds or {k: i for i, k in enumerate(SEED_NAMES)}), name)


def preset(name: str, n_train: Optional[int] = None, seeds: Optional[Dict[str, int]] = None,
           delta: float = 1e-5) -> TrainPlan:
    """Resolve a preset name; ``n_train`` defaults to the published training-set size."""
    if name in ADULT_NOISE:
        return adult_plan(name, n_train or ADULT_TRAIN, seeds, delta)
    if name in MIMIC_NOISE:
        return mimic_plan(name, n_train or MIMIC_TRAIN, seeds, delta)
    raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")


def toy_plan(width: int = 9, n_train: int = 2000, latent: int = 8,
             seeds: Optional[Dict[str, int]] = None) -> TrainPlan:
    """Small non-private plan sized for ``datasets.toy_mixture``; trains in well under a minute."""
    lrelu = leaky_relu(0.2)
    ae = AutoencoderPlan(
        encoder=mlp((width, 32, latent), lrelu, tanh()),
        decoder=mlp((latent, 32, width), lrelu, sigmoid()),
        dp=_dp(64, n_train, math.inf, 0.0, 0.005, {"kind": "adam"}, 3000))
    generator = MlpSpec((Dense(latent, 32, bias=False), BatchNorm1d(32), lrelu,
                         Dense(32, 32, bias=False), BatchNorm1d(32), lrelu,
                         Dense(32, latent), tanh()), ((0, 1),))
    gen_steps, critic_steps = 3000, 2
    gan = GanPlan(
        generator=generator,
        discriminator=mlp((width, 32, 16, 1), lrelu),
        discriminator_dp=_dp(64, n_train, math.inf, 0.0, 0.001, RMSPROP, gen_steps * critic_steps),
        generator_steps=gen_steps, critic_steps=critic_steps,
        generator_lr=0.0005, generator_batch=64, generator_optimizer=RMSPROP)
    return TrainPlan(ae, gan, 1e-5, dict(seeds or {k: i for i, k in enumerate(SEED_NAMES)}), "toy",
                     log_every=500)
