"""Shared test helpers: random architectures and a finite-difference oracle."""

import numpy as np

from dpautogan.nn import BatchNorm1d, Dense, MlpSpec, forward, leaky_relu, sigmoid, tanh

ACTIVATIONS = (tanh, sigmoid, lambda: leaky_relu(0.2))


def random_spec(rng: np.random.Generator, batchnorm: bool = True, residual: bool = True) -> MlpSpec:
    """A small random MLP; hidden blocks share one width so residual links are legal."""
    n_in = int(rng.integers(2, 6))
    width = int(rng.integers(3, 7))
    n_hidden = int(rng.integers(1, 4))
    layers = [Dense(n_in, width, bool(rng.integers(2)))]
    for h in range(n_hidden):
        if batchnorm and rng.random() < 0.5:
            layers.append(BatchNorm1d(width))
        layers.append(ACTIVATIONS[rng.integers(3)]())
        if h < n_hidden - 1:
            layers.append(Dense(width, width))
    layers.append(Dense(width, int(rng.integers(1, 4))))
    if rng.random() < 0.5:
        layers.append(ACTIVATIONS[rng.integers(3)]())
    links = ()
    if residual and n_hidden >= 2:
        links = ((0, n_hidden - 1),) if rng.random() < 0.7 else ((0, 1),)
    return MlpSpec(tuple(layers), links)


def fd_param_grad(spec, params, x, weights, mode="train", h=1e-5):
    """Central differences of ``sum(weights * forward(params, x))`` for each parameter."""
    out = np.zeros(spec.n_params)
    for j in range(spec.n_params):
        p = params.copy()
        p[j] += h
        up = np.sum(weights * forward(spec, p, x, mode)[0])
        p[j] -= 2 * h
        down = np.sum(weights * forward(spec, p, x, mode)[0])
        out[j] = (up - down) / (2 * h)
    return out


def fd_input_grad(spec, params, x, weights, mode="train", h=1e-5):
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += h
        up = np.sum(weights * forward(spec, params, xp, mode)[0])
        xp[idx] -= 2 * h
        down = np.sum(weights * forward(spec, params, xp, mode)[0])
        out[idx] = (up - down) / (2 * h)
    return out


def rel_error(a, b, floor=1e-5):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps exact zeros (biases feeding a train-mode batch norm) from
    turning finite-difference round-off into a huge relative error.
    """
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def tiny_table(m=120, seed=0):
    """Small mixed-type table: a 3-class column, a binary label and one continuous column."""
    from dpautogan.data import ColumnSpec, Schema, Table
    rng = np.random.default_rng(seed)
    schema = Schema((ColumnSpec("kind", "categorical", ("a", "b", "c")),
                     ColumnSpec("label", "binary_label", ("no", "yes")),
                     ColumnSpec("value", "continuous", min=0.0, max=4.0)))
    k = rng.choice(3, m, p=[0.6, 0.3, 0.1])
    return Table(schema, {"kind": k, "label": (k == 2).astype(int),
                          "value": np.clip(k + rng.random(m), 0, 4)})


def tiny_plan(width, ae_iters=20, gen_steps=5, critic_steps=2, private=False, m=120, latent=3,
              weight_clip=None, **plan_kw):
    """A fast two-phase plan for a ``width``-column encoding."""
    import math
    from dpautogan.dp_sgd import DpSgdConfig
    from dpautogan.trainer import AutoencoderPlan, GanPlan, TrainPlan
    lr = leaky_relu(0.2)
    C, psi = (1.0, 1.1) if private else (math.inf, 0.0)
    ae = AutoencoderPlan(mlp_spec((width, 8, latent), lr, tanh()), mlp_spec((latent, 8, width), lr, sigmoid()),
                         DpSgdConfig(16 / m, C, psi, 1, 0.01, {"kind": "adam"}, ae_iters))
    gen = MlpSpec((Dense(4, 8, False), BatchNorm1d(8), lr, Dense(8, latent), tanh()))
    gan = GanPlan(gen, mlp_spec((width, 8, 1), lr),
                  DpSgdConfig(16 / m, C, psi, 2, 0.005, {"kind": "rmsprop", "alpha": 0.99},
                              gen_steps * critic_steps),
                  gen_steps, critic_steps, 0.005, 16, {"kind": "rmsprop", "alpha": 0.99}, weight_clip)
    return TrainPlan(ae, gan, **plan_kw)


def mlp_spec(dims, hidden, out=None):
    from dpautogan.nn import mlp
    return mlp(dims, hidden, out)
