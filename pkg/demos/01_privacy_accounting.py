"""How much privacy does a two-phase training run spend?

The autoencoder and the GAN critic both see the private data, each through
its own DP-SGD run. Converting each run to (eps, delta) separately and adding
the results is valid but loose. Adding the Renyi curves first and converting
once is tighter. This script shows the gap on the ADULT settings.

    python3 demos/01_privacy_accounting.py
"""

import numpy as np

from dpautogan.accountant import add_curves, joint_vs_separate, rdp_account, to_dp
from dpautogan.presets import preset

# %% One phase: 10,000 autoencoder steps, batches of 64 out of 32,561 rows.
ae = rdp_account(10_000, 64 / 32561, 2.5)
print("autoencoder alone:", to_dp(ae, 1e-5))

# The curve holds one Renyi-DP value per integer order; the conversion picks
# the order that minimises eps.
for alpha in (2, 16, 60, 128):
    i = list(ae.orders).index(alpha)
    print(f"  order {alpha:>3}: rdp = {ae.values[i]:.4f}")

# %% Two phases, two ways.
gan = rdp_account(15_000, 128 / 32561, 7.5)
cmp = joint_vs_separate(ae, gan, 1e-5)
print(f"\nseparate conversion (delta/2 each): {cmp.eps1:.4f} + {cmp.eps2:.4f} = {cmp.naive_sum:.4f}")
print(f"joint conversion:                    {cmp.eps_combined:.4f}")
print(f"saving:                              {100 * cmp.savings:.1f}%")

# %% The same numbers come straight out of a named preset.
plan = preset("adult-eps-0.51")
curves = [rdp_account(c.iterations, c.sampling_rate, c.noise_multiplier)
          for c in (plan.autoencoder.dp, plan.gan.discriminator_dp)]
print("\npreset adult-eps-0.51 ->", to_dp(add_curves(*curves), plan.delta))

# %% Budget as a function of discriminator iterations, for picking checkpoints.
for T in np.linspace(0, 15_000, 6).astype(int):
    spend = to_dp(add_curves(ae, rdp_account(int(T), 128 / 32561, 7.5)), 1e-5)
    print(f"  after {T:>6} critic steps: eps = {spend.epsilon:.3f}")
