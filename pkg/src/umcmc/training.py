"""Regularised conditional WGAN training of unfolded samplers.

The generator is the unfolded chain; the critic scores (x, y) pairs. Each
training step runs ``n_critic`` critic updates followed by one generator
update. Validation periodically re-tunes the diversity weight ``w_sd`` and
emits a :class:`Checkpoint`.

Randomness is keyed by (seed, step, purpose), so a run resumed from a
checkpoint continues bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Node
from .kernels import (ChainDivergenceError, Observation, ObservationBatch, UnfoldedModel, as_batch,
                      unfold_chain)
from .priors import AnalyticGaussian, VPSchedule

# purposes for keyed generators
_BATCH, _CHAINS, _LAYERS, _ALPHA, _VAL, _PROBE = range(6)


def keyed_rng(seed: int, step: int, purpose: int, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), purpose, sub])


class TrainingDivergenceError(FloatingPointError):
    """Raised on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, step: int, last_checkpoint: "Checkpoint | None"):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainingConfig:
    sd_threshold: float
    w1: float = 1.0
    w_sd: float = 0.0
    w_ps: float = 0.0
    n_val: int = 8
    val_size: int = 16
    batch_size: int = 32
    generator_lr: float = 1e-3
    discriminator_lr: float = 1e-3
    n_critic: int = 5
    gp_weight: float = 1.0
    robbins_monro_step: float = 0.1
    rm_gain_exponent: float = 0.6
    calibrate_direction: bool = True
    total_steps: int = 100
    validation_interval: int = 10

    def __post_init__(self):
        if not self.sd_threshold > 0:
            raise ValueError("sd_threshold must be positive")
        for name in ("w1", "w_sd", "w_ps", "generator_lr", "discriminator_lr", "gp_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("n_val", "val_size", "batch_size", "validation_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_critic < 0 or self.total_steps < 0 or self.robbins_monro_step <= 0:
            raise ValueError("n_critic and total_steps must be nonnegative, robbins_monro_step positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --- critic -----------------------------------------------------------------

@dataclass
class Discriminator:
    """Two hidden leaky-ReLU layers on concat(x, y)."""

    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, d_x: int, d_y: int, rng: np.random.Generator, hidden: int = 128) -> "Discriminator":
        d_in = d_x + d_y
        return cls({
            "W1": rng.standard_normal((hidden, d_in)) * math.sqrt(2.0 / d_in),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((hidden, hidden)) * math.sqrt(2.0 / hidden),
            "b2": np.zeros(hidden),
            "w3": rng.standard_normal((1, hidden)) * math.sqrt(1.0 / hidden),
            "b3": np.zeros(1),
        })

    def __call__(self, x, y) -> Node:
        return disc_forward(self.params, x, y)


def disc_forward(phi: dict, x, y) -> Node:
    """Critic values, one per row of the flat (batch, d) inputs."""
    h = ad.concat([ad._wrap(x), ad._wrap(y)], axis=1)
    h = ad.leaky_relu(ad.add(ad.matvec(phi["W1"], h), phi["b1"]), 0.2)
    h = ad.leaky_relu(ad.add(ad.matvec(phi["W2"], h), phi["b2"]), 0.2)
    out = ad.add(ad.matvec(phi["w3"], h), phi["b3"])
    return ad.reshape(out, (-1,))


# --- losses -----------------------------------------------------------------

def select_layers(samples: Sequence[Node], layer_idx: np.ndarray) -> Node:
    """Row i of the result is ``samples[layer_idx[i]]`` row i."""
    out = None
    for k, s in enumerate(samples):
        pick = (layer_idx == k).astype(np.float64).reshape(-1, 1)
        if not pick.any():
            continue
        term = ad.mul(s, pick)
        out = term if out is None else ad.add(out, term)
    return out


def loss_adv(critic: Callable, x_true, y_flat, generated: Node) -> Node:
    """mean_i D(x_i, y_i) - mean_i D(xhat_i, y_i)."""
    real = critic(x_true, y_flat)
    fake = critic(generated, y_flat)
    return ad.sub(ad.mean(real), ad.mean(fake))


def loss_gp(critic: Callable, x_true, y_flat, generated, alpha: np.ndarray) -> Node:
    """mean_i (||grad_x D(alpha x + (1 - alpha) xhat, y)|| - 1)^2 with a nested backward pass."""
    x_true = np.asarray(ad._wrap(x_true).value)
    xhat = np.asarray(ad._wrap(generated).value)
    a = np.asarray(alpha, dtype=np.float64).reshape(-1, 1)
    interp = ad.param(a * x_true + (1.0 - a) * xhat)
    (g,) = ad.grad(ad.sum(critic(interp, y_flat)), [interp], create_graph=True)
    norms = ad.sqrt(ad.add(ad.sum(ad.mul(g, g), axis=1), 1e-12))
    return ad.mean(ad.power(ad.sub(norms, 1.0), 2.0))


def loss_l1(ergodic_mean: Node, x_true) -> Node:
    """Batch mean of ||x - xbar||_1."""
    x_true = ad._wrap(x_true)
    return ad.scale(ad.l1_sum(ad.sub(x_true, ergodic_mean)), 1.0 / x_true.shape[0])


def loss_sd(samples: Sequence[Node], ergodic_mean: Node | None = None) -> Node:
    """Batch mean of sum_l ||x_l - xbar||_1 over the retained samples."""
    if not samples:
        raise ValueError("loss_sd needs at least one sample")
    if ergodic_mean is None:
        total = samples[0]
        for s in samples[1:]:
            total = ad.add(total, s)
        ergodic_mean = ad.scale(total, 1.0 / len(samples))
    acc = None
    for s in samples:
        term = ad.l1_sum(ad.sub(s, ergodic_mean))
        acc = term if acc is None else ad.add(acc, term)
    return ad.scale(acc, 1.0 / samples[0].shape[0])


def mean_abs_perceptual(x_true, x_gen) -> Node:
    """Default perceptual distance: mean absolute difference."""
    return ad.mean(ad.absolute(ad.sub(ad._wrap(x_true), x_gen)))


def total_generator_loss(adv: Node, l1: Node, sd: Node, ps: Node, w1: float, w_sd: float, w_ps: float) -> Node:
    out = adv
    if w1:
        out = ad.add(out, ad.scale(l1, w1))
    if w_sd:
        out = ad.sub(out, ad.scale(sd, w_sd))
    if w_ps:
        out = ad.add(out, ad.scale(ps, w_ps))
    return out


# --- diversity-weight tuning ---------------------------------------------------

def rm_target(n_val: int) -> float:
    return 2.0 * (n_val + 1) / n_val


def robbins_monro_update(w_sd: float, val_stats, n_val: int, step: float, direction: int = 1) -> float:
    """w_sd <- max(0, w_sd + step * direction * (target - r)), r = mse_single / mse_mean.

    ``direction`` is the sign of dr/dw_sd: +1 when more reward means more spread.
    """
    if isinstance(val_stats, dict):
        single, mean = val_stats["mse_single"], val_stats["mse_mean"]
    else:
        single, mean = val_stats
    if mean <= 0:
        return w_sd
    r = single / mean
    return max(0.0, w_sd + step * direction * (rm_target(n_val) - r))


def sd_safeguard(w_sd: float, val_mse: float, threshold: float) -> float:
    if not threshold > 0:
        raise ValueError("safeguard threshold must be positive")
    return 0.0 if val_mse > threshold else w_sd


def calibrate_direction(probe: Callable[[float], float], w_low: float, w_high: float) -> int:
    """Sign of r(w_high) - r(w_low); ties resolve to +1."""
    return -1 if probe(w_high) < probe(w_low) else 1


# --- optimiser ------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}m/{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, prefix: str, t: int) -> None:
        self.t = t
        for key, val in arrays.items():
            if key.startswith(prefix + "m/"):
                self.m[key[len(prefix) + 2:]] = val.copy()
            elif key.startswith(prefix + "v/"):
                self.v[key[len(prefix) + 2:]] = val.copy()


# --- data -----------------------------------------------------------------------

@dataclass
class PairedData:
    """Training and validation (x, observation) pairs; images are flattened internally."""

    train_x: np.ndarray
    train_obs: list[Observation]
    val_x: np.ndarray
    val_obs: list[Observation]

    def __post_init__(self):
        self.train_x = np.asarray(self.train_x, dtype=np.float64).reshape(len(self.train_obs), -1)
        self.val_x = np.asarray(self.val_x, dtype=np.float64).reshape(len(self.val_obs), -1)
        if len(self.train_obs) == 0 or len(self.val_obs) == 0:
            raise ValueError("training and validation sets must be nonempty")

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, ObservationBatch]:
        idx = rng.integers(0, len(self.train_obs), size=size)
        return self.train_x[idx], ObservationBatch([self.train_obs[i] for i in idx])


# --- checkpoints -------------------------------------------------------------------

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: UnfoldedModel
    disc: Discriminator
    config: TrainingConfig
    step: int
    seed: int
    w_sd: float
    direction: int
    opt_g: Adam
    opt_d: Adam
    log: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def metrics(self) -> dict:
        return self.log[-1] if self.log else {}

    def to_record(self) -> tuple[dict, dict, bytes]:
        arrays = {f"model/{k}": v for k, v in self.model.params.items()}
        arrays.update({f"disc/{k}": v for k, v in self.disc.params.items()})
        arrays.update(self.opt_g.state_arrays("adam_g/"))
        arrays.update(self.opt_d.state_arrays("adam_d/"))
        if self.model.denoiser is not None:
            arrays["denoiser/mu0"] = self.model.denoiser.mu0
            arrays["denoiser/c0"] = self.model.denoiser.c0
        cfg = {
            "type": "checkpoint",
            "version": self.version,
            "model": {"kind": self.model.kind, "L": self.model.L, "L0": self.model.L0,
                      "beta_min": self.model.sched.beta_min, "beta_max": self.model.sched.beta_max},
            "training": self.config.to_dict(),
            "step": self.step,
            "seed": self.seed,
            "w_sd": self.w_sd,
            "direction": self.direction,
            "adam_t": [self.opt_g.t, self.opt_d.t],
            "log": self.log,
            "extra": self.extra,
        }
        return arrays, cfg, container.pack_rng_state(self.seed, self.step)

    def save(self, path) -> None:
        container.save(path, *self.to_record())

    @classmethod
    def from_record(cls, arrays: dict, cfg: dict, rng_state: bytes) -> "Checkpoint":
        if cfg.get("type") != "checkpoint":
            raise container.ContainerFormatError("not a checkpoint container")
        if cfg["version"] != FORMAT_VERSION:
            raise container.ContainerFormatError(f"unsupported checkpoint version {cfg['version']}")
        mcfg = cfg["model"]
        den = None
        if "denoiser/mu0" in arrays:
            den = AnalyticGaussian(arrays["denoiser/mu0"], arrays["denoiser/c0"])
        model = UnfoldedModel(mcfg["kind"], mcfg["L"], mcfg["L0"],
                              {k[6:]: v for k, v in arrays.items() if k.startswith("model/")},
                              VPSchedule(mcfg["beta_min"], mcfg["beta_max"]), den)
        disc = Discriminator({k[5:]: v for k, v in arrays.items() if k.startswith("disc/")})
        tcfg = TrainingConfig(**cfg["training"])
        opt_g, opt_d = Adam(tcfg.generator_lr), Adam(tcfg.discriminator_lr)
        opt_g.load_state(arrays, "adam_g/", cfg["adam_t"][0])
        opt_d.load_state(arrays, "adam_d/", cfg["adam_t"][1])
        seed, step = container.unpack_rng_state(rng_state)
        if step != cfg["step"]:
            raise container.ContainerFormatError("rng state disagrees with recorded step")
        return cls(model, disc, tcfg, cfg["step"], seed, cfg["w_sd"], cfg["direction"], opt_g, opt_d,
                   cfg["log"], cfg.get("extra", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_record(*container.load(path))


def _snapshot(model, disc, cfg, step, seed, w_sd, direction, opt_g, opt_d, log, extra) -> Checkpoint:
    def copy_adam(opt):
        new = Adam(opt.lr, opt.beta1, opt.beta2, opt.eps)
        new.t = opt.t
        new.m = {k: v.copy() for k, v in opt.m.items()}
        new.v = {k: v.copy() for k, v in opt.v.items()}
        return new

    return Checkpoint(model.copy(), Discriminator({k: v.copy() for k, v in disc.params.items()}),
                      dataclasses.replace(cfg, w_sd=w_sd), step, seed, w_sd, direction,
                      copy_adam(opt_g), copy_adam(opt_d), [dict(r) for r in log], dict(extra))


# --- single steps ---------------------------------------------------------------------

def _chain_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2 ** 62, size=n)


def generator_loss_terms(model: UnfoldedModel, params: dict, disc_params: dict, x_true: np.ndarray,
                         ob: ObservationBatch, seeds, layer_rng: np.random.Generator,
                         perceptual: Callable = mean_abs_perceptual) -> dict[str, Node]:
    trace = unfold_chain(model, ob, seeds, params=params)
    layer_idx = layer_rng.integers(0, len(trace.samples), size=ob.batch)
    picked = select_layers(trace.samples, layer_idx)
    critic = lambda x, y: disc_forward(disc_params, x, y)  # noqa: E731
    return {
        "adv": loss_adv(critic, x_true, ob.y_flat, picked),
        "l1": loss_l1(trace.ergodic_mean, x_true),
        "sd": loss_sd(trace.samples, trace.ergodic_mean),
        "ps": perceptual(x_true, trace.final()),
    }


def _finite_or_raise(value: float, step: int, last: Checkpoint | None) -> None:
    if not math.isfinite(value):
        raise TrainingDivergenceError(step, last)


def generator_step(model, disc, cfg, w_sd, opt, data, seed, step, perceptual, sub=0) -> float:
    rng_b = keyed_rng(seed, step, _BATCH, 100 + sub)
    x, ob = data.batch(rng_b, cfg.batch_size)
    seeds = _chain_seeds(keyed_rng(seed, step, _CHAINS, 100 + sub), ob.batch)
    tape = ad.Tape()
    params = model.bind(tape)
    phi = {k: ad.const(v) for k, v in disc.params.items()}
    terms = generator_loss_terms(model, params, phi, x, ob, seeds, keyed_rng(seed, step, _LAYERS, 100 + sub),
                                 perceptual)
    loss = total_generator_loss(terms["adv"], terms["l1"], terms["sd"], terms["ps"], cfg.w1, w_sd, cfg.w_ps)
    value = loss.item()
    if not math.isfinite(value):
        return value
    gm = tape.backward(loss)
    grads = {k: gm[params[k]] for k in model.params}
    opt.step(model.params, grads)
    return value


def critic_step(model, disc, cfg, opt, data, seed, step, sub) -> float:
    x, ob = data.batch(keyed_rng(seed, step, _BATCH, sub), cfg.batch_size)
    seeds = _chain_seeds(keyed_rng(seed, step, _CHAINS, sub), ob.batch)
    with ad.no_grad():
        trace = unfold_chain(model, ob, seeds)
        layer_idx = keyed_rng(seed, step, _LAYERS, sub).integers(0, len(trace.samples), size=ob.batch)
        fake = select_layers(trace.samples, layer_idx).value
    alpha = keyed_rng(seed, step, _ALPHA, sub).random(ob.batch)
    tape = ad.Tape()
    phi = tape.bind(disc.params)
    critic = lambda a, b: disc_forward(phi, a, b)  # noqa: E731
    loss = ad.add(ad.neg(loss_adv(critic, x, ob.y_flat, fake)),
                  ad.scale(loss_gp(critic, x, ob.y_flat, fake, alpha), cfg.gp_weight))
    value = loss.item()
    if not math.isfinite(value):
        return value
    gm = tape.backward(loss)
    opt.step(disc.params, {k: gm[phi[k]] for k in disc.params})
    return value


def validation_stats(model: UnfoldedModel, data: PairedData, cfg: TrainingConfig, seed: int) -> dict:
    """Single-sample and N_val-mean squared errors from independent final-layer samples."""
    n_obs = min(cfg.val_size, len(data.val_obs))
    obs = [data.val_obs[i] for i in range(n_obs) for _ in range(cfg.n_val)]
    x = np.repeat(data.val_x[:n_obs], cfg.n_val, axis=0)
    seeds = _chain_seeds(keyed_rng(seed, 0, _VAL), len(obs))
    with ad.no_grad():
        trace = unfold_chain(model, ObservationBatch(obs), seeds)
    final = trace.final().value
    err_single = np.sum((final - x) ** 2, axis=1).mean()
    means = final.reshape(n_obs, cfg.n_val, -1).mean(axis=1)
    err_mean = np.sum((means - data.val_x[:n_obs]) ** 2, axis=1).mean()
    erg = trace.ergodic_mean.value.reshape(n_obs, cfg.n_val, -1)[:, 0]
    mse_pix = np.mean((erg - data.val_x[:n_obs]) ** 2, axis=1)
    psnr = float(np.mean(np.where(mse_pix > 0, 10 * np.log10(1.0 / np.maximum(mse_pix, 1e-300)), np.inf)))
    return {"mse_single": float(err_single), "mse_mean": float(err_mean),
            "ratio": float(err_single / err_mean) if err_mean > 0 else float("nan"), "val_psnr": psnr}


# --- driver -----------------------------------------------------------------------------

def train(cfg: TrainingConfig, data: PairedData, model: UnfoldedModel, disc: Discriminator, seed: int,
          resume: Checkpoint | None = None, perceptual: Callable = mean_abs_perceptual,
          extra_validation: Callable[[UnfoldedModel], dict] | None = None) -> Iterator[Checkpoint]:
    """Alternate critic and generator updates; yield a checkpoint at step 0 and at each validation.

    ``model`` and ``disc`` are updated in place. With ``resume`` all state is
    taken from the checkpoint instead.
    """
    if resume is not None:
        model.params = {k: v.copy() for k, v in resume.model.params.items()}
        disc.params = {k: v.copy() for k, v in resume.disc.params.items()}
        step, seed, w_sd, direction = resume.step, resume.seed, resume.w_sd, resume.direction
        opt_g, opt_d = resume.opt_g, resume.opt_d
        log = [dict(r) for r in resume.log]
        extra = dict(resume.extra)
    else:
        step, w_sd = 0, cfg.w_sd
        opt_g, opt_d = Adam(cfg.generator_lr), Adam(cfg.discriminator_lr)
        direction = 0 if cfg.calibrate_direction else 1  # 0: calibrate at the first update
        log = []
        extra = {"n_rm_updates": 0}
        log.append(_validate(model, cfg, data, seed, 0, w_sd, float("nan"), float("nan"), extra_validation))
        yield _snapshot(model, disc, cfg, 0, seed, w_sd, direction, opt_g, opt_d, log, extra)
    last = _snapshot(model, disc, cfg, step, seed, w_sd, direction, opt_g, opt_d, log, extra)

    while step < cfg.total_steps:
        step += 1
        try:
            loss_d = float("nan")
            for sub in range(cfg.n_critic):
                loss_d = critic_step(model, disc, cfg, opt_d, data, seed, step, sub)
                _finite_or_raise(loss_d, step, last)
            loss_g = generator_step(model, disc, cfg, w_sd, opt_g, data, seed, step, perceptual)
            _finite_or_raise(loss_g, step, last)
        except ChainDivergenceError:
            raise TrainingDivergenceError(step, last) from None
        if step % cfg.validation_interval == 0 or step == cfg.total_steps:
            row = _validate(model, cfg, data, seed, step, w_sd, loss_g, loss_d, extra_validation)
            if direction == 0:
                direction = _calibrate(model, disc, cfg, data, seed, step, perceptual)
            k = extra["n_rm_updates"]
            gain = cfg.robbins_monro_step / (k + 1) ** cfg.rm_gain_exponent
            w_sd = robbins_monro_update(w_sd, row, cfg.n_val, gain, direction)
            w_sd = sd_safeguard(w_sd, row["mse_single"], cfg.sd_threshold)
            extra["n_rm_updates"] = k + 1
            row["w_sd_next"] = w_sd
            log.append(row)
            last = _snapshot(model, disc, cfg, step, seed, w_sd, direction, opt_g, opt_d, log, extra)
            yield last


def _validate(model, cfg, data, seed, step, w_sd, loss_g, loss_d, extra_validation) -> dict:
    try:
        stats = validation_stats(model, data, cfg, seed)
    except ChainDivergenceError:
        raise TrainingDivergenceError(step, None) from None
    row = {"step": step, "loss_g": loss_g, "loss_d": loss_d, "w_sd": w_sd, **stats}
    if extra_validation is not None:
        row.update(extra_validation(model))
    return row


PROBE_STEPS = 10


def _calibrate(model, disc, cfg, data, seed, step, perceptual) -> int:
    """Probe r after a few generator steps at two diversity weights (same noise for both).

    Run at the first validation rather than at step 0: an untrained generator
    can show the opposite sign to the one that holds for the rest of training.
    """
    w_low = 0.0
    w_high = max(2.0 * cfg.w_sd, 1.0)

    def probe(w: float) -> float:
        m = model.copy()
        opt = Adam(cfg.generator_lr)
        for i in range(PROBE_STEPS):
            generator_step(m, disc, cfg, w, opt, data, seed, step, perceptual, sub=_PROBE + 10 * i)
        return validation_stats(m, data, cfg, seed)["ratio"]

    try:
        return calibrate_direction(probe, w_low, w_high)
    except ChainDivergenceError:
        return 1
