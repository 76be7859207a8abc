"""Flow-matching training and guided Euler sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .embeddings import patch_pixels
from .tensor import NonFiniteError

NULL_TOKEN = 0


@dataclass
class NoiseState:
    x: np.ndarray
    noise: np.ndarray
    sigma: np.ndarray

    @property
    def mixed(self) -> np.ndarray:
        return mix_noise(self.x, self.noise, self.sigma)


def mix_noise(x, noise, sigma):
    """``sigma * noise + (1 - sigma) * x``; ``sigma`` is a scalar or broadcastable array."""
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x.shape != noise.shape:
        raise ValueError(f"mix_noise: shapes {x.shape} and {noise.shape} differ")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0.0) or np.any(sigma > 1.0):
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    return sigma * noise + (1.0 - sigma) * x


def sample_sigma(rng: np.random.Generator, n: int, dist: str = "uniform") -> np.ndarray:
    if dist == "logit_normal":
        return 1.0 / (1.0 + np.exp(-rng.standard_normal(n)))
    return rng.random(n)


def fm_loss(model, x: np.ndarray, cond: np.ndarray, type_ids, prompts: list,
            sigma: np.ndarray, noise: np.ndarray):
    """Velocity-matching loss; returns ``(loss, gradient record)``.

    ``x`` and ``noise`` are ``[B, H, W, ch]`` images. The target velocity
    ``noise - x`` is the derivative of the mixing path in sigma.
    """
    noisy = mix_noise(x, noise, sigma[:, None, None, None])
    pred = model(noisy, sigma, cond, type_ids, prompts)
    target = patch_pixels(noise - x, model.cfg.patch)
    loss = T.mse(pred, target)
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"non-finite loss at sigma={sigma}")
    grads = T.gradients(loss, model.parameters()) if loss.requires_grad else {}
    return loss, grads


def balanced_batches(type_ids, batch_size: int, seed: int, epochs: int | None = None):
    """Yield index batches whose condition types are pairwise distinct.

    Each epoch visits every sample exactly once. Types are drawn without
    replacement with probability proportional to their remaining samples, so
    batch size 1 degenerates to a uniform shuffle. When fewer types than
    ``batch_size`` still have samples, the batch is shorter.
    """
    type_ids = np.asarray(type_ids, dtype=np.int64)
    types = np.unique(type_ids)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > len(types):
        raise ValueError(f"batch_size {batch_size} exceeds the {len(types)} condition types; "
                         "batches must hold pairwise-distinct types")
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng([seed, epoch])
        pools = {int(t): list(rng.permutation(np.flatnonzero(type_ids == t))) for t in types}
        while True:
            live = [t for t in pools if pools[t]]
            if not live:
                break
            counts = np.array([len(pools[t]) for t in live], dtype=np.float64)
            k = min(batch_size, len(live))
            pick = rng.choice(len(live), size=k, replace=False, p=counts / counts.sum())
            yield np.array([pools[live[j]].pop() for j in pick], dtype=np.int64)
        epoch += 1


def lr_at(step: int, base: float, warmup: int) -> float:
    """Linear warmup to ``base`` over ``warmup`` steps, then constant."""
    if warmup <= 0:
        return base
    return base * min(1.0, step / warmup)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr: float, warmup: int = 0, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.warmup = warmup
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, step: int) -> float:
        if step < 1:
            raise ValueError("optimizer steps count from 1")
        lr = lr_at(step, self.lr, self.warmup)
        c1 = 1.0 - self.b1 ** step
        c2 = 1.0 - self.b2 ** step
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd:
                p.data *= 1.0 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


def optimize_step(opt: AdamW, params: dict, grads: dict, step: int) -> float:
    return opt.step(params, grads, step)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (step, loss, lr)
    val: dict = field(default_factory=dict)  # step -> validation loss


def _prompts_with_drop(prompts: list, drop: np.ndarray) -> list:
    return [[NULL_TOKEN] if d else list(p) for p, d in zip(prompts, drop)]


def validation_loss(model, data, seed: int = 0, batch: int = 16) -> float:
    """Flow-matching loss on ``data`` with a fixed draw of sigma and noise."""
    rng = np.random.default_rng([seed, 0x7A1])
    n = len(data)
    sigma = rng.random(n)
    noise = rng.standard_normal(data.targets.shape)
    cond = np.zeros_like(data.conds) if model.cfg.zero_condition else data.conds
    total = 0.0
    with T.no_grad():
        for s in range(0, n, batch):
            sl = slice(s, min(n, s + batch))
            loss, _ = fm_loss(model, data.targets[sl], cond[sl], data.type_ids[sl],
                              data.prompts[sl], sigma[sl], noise[sl])
            total += float(loss.data) * (sl.stop - sl.start)
    return total / n


def train(model, data, cfg: RunConfig | None = None, log_path=None, val_data=None,
          val_steps=(), callback=None) -> TrainResult:
    """Train ``model`` in place on a :class:`~unigen.datagen.Corpus`.

    Loss rows ``step,loss,lr`` go to ``log_path`` when given. Validation loss
    is recorded at each step listed in ``val_steps``.
    """
    cfg = cfg or model.cfg
    params = model.parameters()
    opt = AdamW(cfg.lr, cfg.warmup, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    batches = balanced_batches(data.type_ids, cfg.batch_size, cfg.seed)
    result = TrainResult()
    val_steps = set(val_steps)
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "lr"])
    try:
        if 0 in val_steps and val_data is not None:
            result.val[0] = validation_loss(model, val_data, cfg.seed)
        for step in range(1, cfg.steps + 1):
            idx = next(batches)
            rng = np.random.default_rng([cfg.seed, step])
            sigma = sample_sigma(rng, len(idx), cfg.sigma_dist)
            noise = rng.standard_normal(data.targets[idx].shape)
            drop = rng.random(len(idx)) < cfg.prompt_drop
            cond = data.conds[idx]
            if cfg.zero_condition:
                cond = np.zeros_like(cond)
            prompts = _prompts_with_drop([data.prompts[i] for i in idx], drop)
            loss, grads = fm_loss(model, data.targets[idx], cond, data.type_ids[idx], prompts, sigma, noise)
            lr = opt.step(params, grads, step)
            value = float(loss.data)
            result.history.append((step, value, lr))
            if writer is not None and (step % cfg.log_every == 0 or step == cfg.steps):
                writer.writerow([step, repr(value), repr(lr)])
            if step in val_steps and val_data is not None:
                result.val[step] = validation_loss(model, val_data, cfg.seed)
            if callback is not None:
                callback(step, value, lr)
    finally:
        if fh is not None:
            fh.close()
    return result


# ---------------------------------------------------------------------------
# sampling


def euler_sample(velocity, noise: np.ndarray, steps: int) -> np.ndarray:
    """Integrate ``dx/dsigma = v`` from sigma=1 (``noise``) down to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    sigmas = np.linspace(1.0, 0.0, steps + 1)
    x = np.array(noise, dtype=np.float64)
    for i in range(steps):
        x = x - (sigmas[i] - sigmas[i + 1]) * velocity(x, sigmas[i])
    return x


def guided_velocity(model, cond: np.ndarray, type_id: int, prompt: list, guidance: float):
    """Classifier-free guidance: ``v_null + g (v_cond - v_null)``; the null
    prompt is the reserved token 0."""
    def velocity(x, sigma):
        with T.no_grad():
            if guidance == 1.0:
                out = model(x, np.array([sigma]), cond, [type_id], [prompt]).data
                return model.to_image(out)
            xx = np.concatenate([x, x], axis=0)
            cc = np.concatenate([cond, cond], axis=0)
            out = model(xx, np.array([sigma, sigma]), cc, [type_id, type_id], [prompt, [NULL_TOKEN]]).data
        v_cond, v_null = model.to_image(out[:1]), model.to_image(out[1:])
        return v_null + guidance * (v_cond - v_null)

    return velocity


def check_finite_params(model) -> None:
    for name, prm in model.named_parameters():
        if not np.isfinite(prm.data).all():
            raise NonFiniteError(f"parameter {name} holds non-finite values")


def sample_image(model, cond: np.ndarray, type_id: int, prompt: list, steps: int = 28,
                 guidance: float = 3.5, seed: int = 1872) -> np.ndarray:
    """Generate one ``[H, W, ch]`` image in [0, 1] from a condition image."""
    check_finite_params(model)
    if guidance < 0:
        raise ValueError("guidance must be >= 0")
    if not prompt:
        raise ValueError("empty prompt")
    s, ch = model.cfg.image_size, model.cfg.channels
    noise = np.random.default_rng(seed).standard_normal((1, s, s, ch))
    velocity = guided_velocity(model, np.asarray(cond, dtype=np.float64)[None], type_id, list(prompt), guidance)
    return np.clip(euler_sample(velocity, noise, steps)[0], 0.0, 1.0)
