"""Two-phase private training: an autoencoder, then a WGAN in its latent space.

Phase 1 trains encoder and decoder jointly with DP-SGD on the reconstruction
loss; the two gradients are clipped and noised as one concatenated vector.
Phase 2 freezes the decoder and trains a generator whose samples are decoded
before they reach the discriminator. Only the discriminator touches real
data in phase 2, so only its steps are private. The generator is trained
without noise.

Loss conventions for phase 2 (``D`` is the discriminator, ``G`` the generator
and ``De`` the decoder):

* discriminator minimises ``mean D(real) - mean D(De(G(z)))``
* generator minimises ``mean D(De(G(z)))``

so the two players optimise the same objective in opposite directions.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from . import __version__
from .accountant import (PrivacySpend, RdpCurve, add_curves, compose_iterations, rdp_account,
                         rdp_curve, to_dp)
from .data import Schema, Table, postprocess, preprocess
from .dp_sgd import DpSgdConfig, dp_sgd_step
from .nn import BCE_EPS, MlpSpec, Network, make_optimizer, optimizer_step

SEED_NAMES = ("data", "autoencoder", "gan", "synth")

LogFn = Callable[[dict], None]


# --- plans ----------------------------------------------------------------------

def _opt_kwargs(cfg: dict) -> Tuple[str, dict]:
    cfg = dict(cfg)
    return cfg.pop("kind"), cfg


@dataclass(frozen=True)
class AutoencoderPlan:
    encoder: MlpSpec
    decoder: MlpSpec
    dp: DpSgdConfig

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                "dp": self.dp.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderPlan":
        return cls(MlpSpec.from_dict(d["encoder"]), MlpSpec.from_dict(d["decoder"]),
                   DpSgdConfig.from_dict(d["dp"]))


@dataclass(frozen=True)
class GanPlan:
    """Generator, discriminator and their schedules.

    ``discriminator_dp.iterations`` counts discriminator steps; it must equal
    ``generator_steps * critic_steps``.
    """

    generator: MlpSpec
    discriminator: MlpSpec
    discriminator_dp: DpSgdConfig
    generator_steps: int
    critic_steps: int = 1
    generator_lr: float = 1e-3
    generator_batch: int = 64
    generator_optimizer: dict = field(default_factory=lambda: {"kind": "rmsprop", "alpha": 0.99})
    weight_clip: Optional[float] = None

    def __post_init__(self):
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be at least 1")
        if self.generator_steps < 0:
            raise ValueError("generator_steps must be non-negative")
        if self.discriminator_dp.iterations != self.generator_steps * self.critic_steps:
            raise ValueError("discriminator iterations must equal generator_steps * critic_steps")
        if self.generator_batch < 1 or self.generator_lr <= 0:
            raise ValueError("generator batch and learning rate must be positive")
        if self.weight_clip is not None and not self.weight_clip > 0:
            raise ValueError("weight_clip must be positive")
        if self.discriminator.out_dim != 1:
            raise ValueError("the discriminator must output one score")

    @property
    def noise_dim(self) -> int:
        return self.generator.in_dim

    def to_dict(self) -> dict:
        return {"generator": self.generator.to_dict(), "discriminator": self.discriminator.to_dict(),
                "discriminator_dp": self.discriminator_dp.to_dict(),
                "generator_steps": self.generator_steps, "critic_steps": self.critic_steps,
                "generator_lr": self.generator_lr, "generator_batch": self.generator_batch,
                "generator_optimizer": dict(self.generator_optimizer),
                "weight_clip": self.weight_clip, "noise": {"kind": "standard_normal",
                                                           "dim": self.noise_dim}}

    @classmethod
    def from_dict(cls, d: dict) -> "GanPlan":
        return cls(MlpSpec.from_dict(d["generator"]), MlpSpec.from_dict(d["discriminator"]),
                   DpSgdConfig.from_dict(d["discriminator_dp"]), int(d["generator_steps"]),
                   int(d.get("critic_steps", 1)), float(d.get("generator_lr", 1e-3)),
                   int(d.get("generator_batch", 64)),
                   dict(d.get("generator_optimizer", {"kind": "rmsprop", "alpha": 0.99})),
                   d.get("weight_clip"))


@dataclass(frozen=True)
class TrainPlan:
    autoencoder: AutoencoderPlan
    gan: GanPlan
    delta: float = 1e-5
    seeds: Dict[str, int] = field(default_factory=lambda: {k: i for i, k in enumerate(SEED_NAMES)})
    preset: Optional[str] = None
    log_every: int = 100
    checkpoint_every: int = 1000

    def __post_init__(self):
        ae, gan = self.autoencoder, self.gan
        if ae.encoder.out_dim != ae.decoder.in_dim:
            raise ValueError("encoder output width must equal decoder input width")
        if gan.generator.out_dim != ae.decoder.in_dim:
            raise ValueError("generator output width must equal the latent width")
        if gan.discriminator.in_dim != ae.decoder.out_dim or ae.encoder.in_dim != ae.decoder.out_dim:
            raise ValueError("encoder input, decoder output and discriminator input widths must agree")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        missing = [k for k in SEED_NAMES if k not in self.seeds]
        if missing:
            raise ValueError(f"missing seeds {missing}")

    @property
    def latent_dim(self) -> int:
        return self.autoencoder.decoder.in_dim

    @property
    def data_dim(self) -> int:
        return self.autoencoder.decoder.out_dim

    @property
    def is_private(self) -> bool:
        return self.autoencoder.dp.is_private and self.gan.discriminator_dp.is_private

    def to_dict(self) -> dict:
        return {"autoencoder": self.autoencoder.to_dict(), "gan": self.gan.to_dict(),
                "delta": self.delta, "seeds": dict(self.seeds), "preset": self.preset,
                "log_every": self.log_every, "checkpoint_every": self.checkpoint_every}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(AutoencoderPlan.from_dict(d["autoencoder"]), GanPlan.from_dict(d["gan"]),
                   float(d.get("delta", 1e-5)),
                   {k: int(v) for k, v in d.get("seeds", {k: i for i, k in enumerate(SEED_NAMES)}).items()},
                   d.get("preset"), int(d.get("log_every", 100)), int(d.get("checkpoint_every", 1000)))


# --- released model -----------------------------------------------------------------

@dataclass
class SynthModel:
    """Everything that is released: decoder, generator, latent noise and schema.

    No encoder or discriminator parameters are ever stored here.
    """

    decoder: Network
    generator: Network
    schema: Schema
    spend: PrivacySpend
    manifest: dict = field(default_factory=dict)

    @property
    def noise_dim(self) -> int:
        return self.generator.spec.in_dim


def generate(model: SynthModel, count: int, seed: int, chunk: int = 10_000) -> Table:
    """Sample ``count`` raw rows: ``z ~ N(0, I)``, then generator, decoder and decoding, all in eval mode."""
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(seed)
    parts = []
    for start in range(0, count, chunk):
        z = rng.standard_normal((min(chunk, count - start), model.noise_dim))
        parts.append(model.decoder(model.generator(z)))
    X = np.vstack(parts) if parts else np.zeros((0, model.schema.width))
    return postprocess(X, model.schema)


# --- gradients ----------------------------------------------------------------------

def bce_rows(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p), axis=1)


def autoencoder_grads(enc: Network, dec: Network, X: np.ndarray,
                      per_example: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Reconstruction loss per row and gradients wrt the joint (encoder, decoder) vector.

    With ``per_example`` the gradient has one row per example; otherwise it is
    the gradient of the mean loss.
    """
    z, t_enc = enc.forward(X, "train")
    xh, t_dec = dec.forward(z, "train")
    losses = bce_rows(xh, X)
    p = np.clip(xh, BCE_EPS, 1.0 - BCE_EPS)
    d_out = (p - X) / (p * (1.0 - p))
    if not per_example:
        d_out = d_out / len(X)
    g_dec, g_z = dec.backward(t_dec, d_out, per_example=per_example)
    g_enc, _ = enc.backward(t_enc, g_z, per_example=per_example)
    return losses, np.concatenate([g_enc, g_dec], axis=-1)


def discriminator_grads(disc: Network, real: np.ndarray, fake: np.ndarray,
                        r: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-microbatch critic losses ``mean D(real_j) - mean D(fake_j)`` and their gradients.

    ``real`` and ``fake`` hold ``k * r`` rows each; microbatch ``j`` is rows
    ``j*r .. (j+1)*r - 1`` of both.
    """
    k = len(real) // r
    P = disc.spec.n_params
    if not disc.spec.has_batchnorm:
        both = np.vstack([real, fake])
        out, tape = disc.forward(both, "train")
        g_out = np.concatenate([np.full(k * r, 1.0 / r), np.full(k * r, -1.0 / r)])[:, None]
        G, _ = disc.backward(tape, g_out, per_example=True)
        grads = G[:k * r].reshape(k, r, P).sum(axis=1) + G[k * r:].reshape(k, r, P).sum(axis=1)
        scores = out[:, 0]
        losses = scores[:k * r].reshape(k, r).mean(axis=1) - scores[k * r:].reshape(k, r).mean(axis=1)
        return losses, grads
    losses, grads = np.zeros(k), np.zeros((k, P))
    for j in range(k):
        sl = slice(j * r, (j + 1) * r)
        out, tape = disc.forward(np.vstack([real[sl], fake[sl]]), "train")
        g_out = np.concatenate([np.full(r, 1.0 / r), np.full(r, -1.0 / r)])[:, None]
        grads[j], _ = disc.backward(tape, g_out)
        losses[j] = out[:r, 0].mean() - out[r:, 0].mean()
    return losses, grads


def generator_grads(gen: Network, dec: Network, disc: Network, z: np.ndarray) -> Tuple[float, np.ndarray]:
    """Generator loss ``mean D(De(G(z)))`` and its gradient wrt the generator parameters.

    The decoder and discriminator are only differentiated with respect to
    their inputs; their parameters are never touched.
    """
    h, t_gen = gen.forward(z, "train")
    x, t_dec = dec.forward(h, "eval")
    d, t_disc = disc.forward(x, "eval")
    g_out = np.full_like(d, 1.0 / len(z))
    _, g_x = disc.backward(t_disc, g_out, want_param_grad=False)
    _, g_h = dec.backward(t_dec, g_x, want_param_grad=False)
    g_w, _ = gen.backward(t_gen, g_h)
    return float(d.mean()), g_w


# --- phases ---------------------------------------------------------------------------

def _curve_for(cfg: DpSgdConfig, iterations: int) -> Optional[RdpCurve]:
    """RDP curve of ``iterations`` steps, or ``None`` for a non-private config."""
    if not cfg.is_private:
        return None
    return rdp_account(iterations, cfg.sampling_rate, cfg.noise_multiplier, cfg.microbatch_size)


def _eps_so_far(step_curve: Optional[RdpCurve], t: int, prior: Optional[RdpCurve], delta: float,
                prior_private: bool = True):
    if step_curve is None or not prior_private:
        return "inf"
    c = compose_iterations(step_curve, t)
    if prior is not None:
        c = add_curves(prior, c)
    return to_dp(c, delta).epsilon


def _spawn(rng: np.random.Generator, n: int):
    """Independent child generators, derived deterministically from ``rng``'s seed."""
    return [np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(n)]


@dataclass
class PhaseResult:
    curve: Optional[RdpCurve]
    iterations: int
    skipped: int
    final_loss: Optional[float]


def train_autoencoder(X: np.ndarray, plan: TrainPlan, rng: np.random.Generator,
                      log_fn: Optional[LogFn] = None) -> Tuple[Network, Network, PhaseResult]:
    """Run phase 1; returns encoder, decoder and the phase summary (curve ``None`` when non-private)."""
    ae = plan.autoencoder
    if X.shape[1] != ae.encoder.in_dim:
        raise ValueError(f"data width {X.shape[1]} does not match encoder input {ae.encoder.in_dim}")
    init_rng, dp_rng = _spawn(rng, 2)
    enc = Network.initialise(ae.encoder, init_rng)
    dec = Network.initialise(ae.decoder, init_rng)
    n_enc = ae.encoder.n_params
    cfg = ae.dp
    kind, consts = _opt_kwargs(cfg.optimizer)
    opt = make_optimizer(kind, n_enc + ae.decoder.n_params, **consts)
    params = np.concatenate([enc.params, dec.params])
    m = len(X)
    has_bn = ae.encoder.has_batchnorm or ae.decoder.has_batchnorm
    last_loss = [None]

    def mb_grads(parts: np.ndarray) -> np.ndarray:
        k, r = parts.shape
        if not has_bn:
            losses, G = autoencoder_grads(enc, dec, X[parts.ravel()], per_example=True)
            last_loss[0] = float(losses.mean())
            return G.reshape(k, r, -1).mean(axis=1)
        out, total = np.zeros((k, len(params))), 0.0
        for j in range(k):
            losses, out[j] = autoencoder_grads(enc, dec, X[parts[j]], per_example=False)
            total += losses.sum()
        last_loss[0] = total / parts.size
        return out

    step_curve = rdp_curve(cfg.sampling_rate, cfg.noise_multiplier) if cfg.is_private else None
    skipped = 0
    for t in range(1, cfg.iterations + 1):
        params, opt, ng = dp_sgd_step(m, mb_grads, params, cfg, opt, dp_rng)
        enc.params, dec.params = params[:n_enc], params[n_enc:]
        if ng is None:
            skipped += 1
        if log_fn and (t % plan.log_every == 0 or t == cfg.iterations):
            log_fn({"phase": "autoencoder", "iter": t, "loss": last_loss[0],
                    "eps_so_far": _eps_so_far(step_curve, t, None, plan.delta)})
    curve = _curve_for(cfg, cfg.iterations)
    return enc, dec, PhaseResult(curve, cfg.iterations, skipped, last_loss[0])


def train_gan(X: np.ndarray, decoder: Network, plan: TrainPlan, rng: np.random.Generator,
              log_fn: Optional[LogFn] = None, prior_curve: Optional[RdpCurve] = None,
              prior_private: bool = True,
              checkpoint_fn: Optional[Callable[[int, Network], None]] = None
              ) -> Tuple[Network, PhaseResult]:
    """Run phase 2 against a frozen decoder; returns the generator and the phase summary."""
    gp = plan.gan
    init_rng, dp_rng, latent_rng = _spawn(rng, 3)
    gen = Network.initialise(gp.generator, init_rng)
    disc = Network.initialise(gp.discriminator, init_rng)
    cfg = gp.discriminator_dp
    kind, consts = _opt_kwargs(cfg.optimizer)
    d_opt = make_optimizer(kind, gp.discriminator.n_params, **consts)
    kind, consts = _opt_kwargs(gp.generator_optimizer)
    g_opt = make_optimizer(kind, gp.generator.n_params, **consts)
    m = len(X)
    r = cfg.microbatch_size
    last_d = [None]

    def mb_grads(parts: np.ndarray) -> np.ndarray:
        k = len(parts)
        z = latent_rng.standard_normal((k * r, gp.noise_dim))
        h, _ = gen.forward(z, "train")
        fake = decoder(h)
        losses, G = discriminator_grads(disc, X[parts.ravel()], fake, r)
        last_d[0] = float(losses.mean())
        return G

    step_curve = rdp_curve(cfg.sampling_rate, cfg.noise_multiplier) if cfg.is_private else None
    skipped = 0
    g_loss = None
    d_iter = 0
    for step in range(1, gp.generator_steps + 1):
        for _ in range(gp.critic_steps):
            disc.params, d_opt, ng = dp_sgd_step(m, mb_grads, disc.params, cfg, d_opt, dp_rng)
            d_iter += 1
            if ng is None:
                skipped += 1
            if gp.weight_clip is not None:
                disc.params = np.clip(disc.params, -gp.weight_clip, gp.weight_clip)
        z = latent_rng.standard_normal((gp.generator_batch, gp.noise_dim))
        g_loss, g_w = generator_grads(gen, decoder, disc, z)
        gen.params, g_opt = optimizer_step(g_opt, gen.params, g_w, gp.generator_lr)
        if log_fn and (step % plan.log_every == 0 or step == gp.generator_steps):
            log_fn({"phase": "gan", "iter": step, "loss": g_loss, "loss_d": last_d[0],
                    "eps_so_far": _eps_so_far(step_curve, d_iter, prior_curve, plan.delta,
                                              prior_private)})
        if checkpoint_fn and plan.checkpoint_every and step % plan.checkpoint_every == 0:
            checkpoint_fn(step, gen)
    curve = _curve_for(cfg, d_iter)
    return gen, PhaseResult(curve, d_iter, skipped, g_loss)


def _spend(plan: TrainPlan, c1: Optional[RdpCurve], c3: Optional[RdpCurve]) -> PrivacySpend:
    if c1 is None or c3 is None:
        return PrivacySpend(math.inf, plan.delta, None)
    return to_dp(add_curves(c1, c3), plan.delta)


def train(table: Table, plan: TrainPlan, schema: Optional[Schema] = None,
          log_fn: Optional[LogFn] = None,
          checkpoint_dir: Optional[Path] = None) -> Tuple[SynthModel, PrivacySpend]:
    """Encode, run both phases, and account the two curves jointly before converting to (eps, delta)."""
    schema = schema or table.schema
    X = preprocess(table, schema)
    if X.shape[1] != plan.data_dim:
        raise ValueError(f"schema encodes {X.shape[1]} columns, plan expects {plan.data_dim}")
    if len(X) == 0:
        raise ValueError("training data is empty")
    enc, dec, r1 = train_autoencoder(X, plan, np.random.default_rng(plan.seeds["autoencoder"]), log_fn)
    del enc

    def manifest(gan_iters: int, gen_steps: int, r3: Optional[PhaseResult]) -> dict:
        return {
            "package_version": __version__,
            "plan": plan.to_dict(),
            "n_train": int(len(X)),
            "realized": {
                "autoencoder_iterations": r1.iterations, "autoencoder_skipped": r1.skipped,
                "discriminator_iterations": gan_iters, "generator_steps": gen_steps,
                "discriminator_skipped": r3.skipped if r3 else None,
            },
            "noise": {"kind": "standard_normal", "dim": plan.gan.noise_dim},
        }

    checkpoint_fn = None
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

        def checkpoint_fn(step: int, gen: Network):
            d_iters = step * plan.gan.critic_steps
            c3 = _curve_for(plan.gan.discriminator_dp, d_iters)
            snap = SynthModel(dec, Network(gen.spec, gen.params.copy(), gen.buffers.copy()), schema,
                              _spend(plan, r1.curve, c3), manifest(d_iters, step, None))
            save_model(snap, checkpoint_dir / f"checkpoint_{step:06d}.dpag")

    gen, r3 = train_gan(X, dec, plan, np.random.default_rng(plan.seeds["gan"]), log_fn,
                        prior_curve=r1.curve, prior_private=r1.curve is not None,
                        checkpoint_fn=checkpoint_fn)
    spend = _spend(plan, r1.curve, r3.curve)
    model = SynthModel(dec, gen, schema, spend,
                       manifest(r3.iterations, plan.gan.generator_steps, r3))
    return model, spend


# --- container ------------------------------------------------------------------------

MAGIC = b"DPAGMDL\x00"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def model_to_bytes(model: SynthModel) -> bytes:
    """Serialise into ``MAGIC | u32 version | u64 header length | JSON header | f64 blobs | sha256``."""
    arrays = [("decoder.params", model.decoder.params), ("decoder.buffers", model.decoder.buffers),
              ("generator.params", model.generator.params),
              ("generator.buffers", model.generator.buffers)]
    blobs, table, offset = [], [], 0
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        table.append({"name": name, "offset": offset, "length": len(a)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "decoder": model.decoder.spec.to_dict(),
        "generator": model.generator.spec.to_dict(),
        "schema": model.schema.to_dict(),
        "spend": model.spend.to_dict(),
        "manifest": model.manifest,
        "blobs": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def model_from_bytes(data: bytes) -> SynthModel:
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        if data[:len(MAGIC)] == MAGIC:
            raise ModelFormatError("checksum failure: file is truncated")
        raise ModelFormatError("not a model file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("checksum failure: file is corrupt or truncated")
    version, head_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + head_len])
    blob_base = start + head_len
    arrays = {}
    for entry in header["blobs"]:
        lo = blob_base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(body[lo:lo + 8 * entry["length"]], dtype="<f8").astype(np.float64)
    dec = Network(MlpSpec.from_dict(header["decoder"]), arrays["decoder.params"], arrays["decoder.buffers"])
    gen = Network(MlpSpec.from_dict(header["generator"]), arrays["generator.params"],
                  arrays["generator.buffers"])
    return SynthModel(dec, gen, Schema.from_dict(header["schema"]),
                      PrivacySpend.from_dict(header["spend"]), header["manifest"])


def save_model(model: SynthModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> SynthModel:
    return model_from_bytes(Path(path).read_bytes())
