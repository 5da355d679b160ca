"""Denoiser training and sampling on toy data.

The training objective is the adjusted denoising loss for data observed at an
assumed corruption level sigma_hat: noise levels are clipped to sigma_t =
max(sigma_hat, sigma_t), the observation is re-noised by the residual amount
sqrt(sigma_t^2 - sigma_hat^2), and the prediction mixes the network output
with the input,

    || (sigma_t^2 - sigma_hat^2)/sigma_t^2 * f(x_t, t)
       + sigma_hat^2/sigma_t^2 * x_t  -  y ||^2,

which trains an unbiased clean-data denoiser from already-noisy observations.
With sigma_hat = 0 every adjustment vanishes identically and the loss *is*
the standard denoising objective, so one code path serves both modes and the
reduction holds bit for bit under shared draws.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError, PreconditionError
from .nets import Adam, DenseNet
from .rng import make_rng
from .schedule import NoiseSchedule

DIVERGENCE_THRESHOLD = 1e6
MODES = ("standard", "ambient")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    steps: int = 20000
    schedule: NoiseSchedule = NoiseSchedule()
    sigma_hat: float = 0.0
    seed: int = 0
    # Cosine decay to lr/50 over the run; the late small-step phase is what
    # lets the denoiser settle below the batch-noise floor (no weight EMA here).
    lr_decay: str = "cosine"

    def __post_init__(self):
        if self.sigma_hat < 0:
            raise PreconditionError(f"sigma_hat must be nonnegative, got {self.sigma_hat}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise PreconditionError("need steps >= 0, batch_size >= 1, lr > 0")
        if self.lr_decay not in ("none", "cosine"):
            raise PreconditionError(f"unknown lr_decay {self.lr_decay!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_decay == "none" or self.steps <= 1:
            return self.lr
        frac = 0.5 * (1.0 + np.cos(np.pi * step / max(1, self.steps - 1)))
        return self.lr * (0.02 + 0.98 * frac)


def denoising_loss(
    net: DenseNet,
    batch: np.ndarray,
    sigma_hat: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray]]:
    """Adjusted denoising loss and parameter gradients on one batch.

    Draw order is fixed (t first, then the noise) so runs with equal seeds
    agree bitwise whatever sigma_hat is.  At a clipped level (sigma_t ==
    sigma_hat) the network weight is exactly zero and the sample contributes
    exactly zero loss and gradient.
    """
    y = np.atleast_2d(np.asarray(batch, dtype=float))
    if y.shape[0] < 1:
        raise PreconditionError("batch must be nonempty")
    n = y.shape[0]
    t = schedule.sample_t(rng, n)
    eps = rng.standard_normal(y.shape)

    sigma_t = np.maximum(schedule.sigma(t), sigma_hat)
    st2 = (sigma_t**2)[:, None]
    w_net = (st2 - sigma_hat**2) / st2
    w_skip = sigma_hat**2 / st2

    x_t = y + np.sqrt(st2 - sigma_hat**2) * eps
    out, cache = net.forward_cached(x_t, sigma_t)
    resid = w_net * out + w_skip * x_t - y
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    upstream = (2.0 / n) * w_net * resid
    grads, _ = net.backward(cache, upstream)
    return loss, grads


def standard_diffusion_loss(
    net: DenseNet, batch: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator
) -> tuple[float, list[np.ndarray]]:
    """Plain denoising loss ||f(y + sigma_t eps, t) - y||^2 (sigma_hat = 0 case)."""
    return denoising_loss(net, batch, 0.0, schedule, rng)


def ambient_tweedie_loss(
    net: DenseNet,
    batch_noisy: np.ndarray,
    sigma_hat: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray]]:
    """Adjusted denoising loss for observations already at level sigma_hat."""
    if sigma_hat < 0:
        raise PreconditionError(f"sigma_hat must be nonnegative, got {sigma_hat}")
    return denoising_loss(net, batch_noisy, sigma_hat, schedule, rng)


def pretrain(
    net: DenseNet,
    data,
    cfg: TrainConfig,
    mode: str = "ambient",
) -> tuple[DenseNet, list[float]]:
    """Train a denoiser on the dataset's noisy points; returns (net, loss curve).

    ``mode='ambient'`` uses the adjusted objective at cfg.sigma_hat,
    ``mode='standard'`` the plain objective.  Training mutates ``net`` in
    place; zero steps leave it untouched.  A loss above 1e6 aborts.
    """
    if mode not in MODES:
        raise PreconditionError(f"unknown pretraining mode {mode!r}; choose from {MODES}")
    sigma_hat = cfg.sigma_hat if mode == "ambient" else 0.0
    rng = make_rng(cfg.seed)
    opt = Adam(net.parameters(), cfg.lr)
    points = data.points
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(0, points.shape[0], cfg.batch_size)
        loss, grads = denoising_loss(net, points[idx], sigma_hat, cfg.schedule, rng)
        if not np.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
            raise DivergenceError(
                f"pretraining diverged at step {step}: loss = {loss:.3e}",
                diagnostics={"step": step, "loss": loss, "mode": mode},
            )
        opt.lr = cfg.lr_at(step)
        opt.step(net.parameters(), grads)
        curve.append(loss)
    return net, curve


def ambient_sample(
    net: DenseNet,
    sigma_hat: float,
    steps: int,
    mode: str,
    n: int,
    rng: np.random.Generator,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> np.ndarray:
    """Reverse-process sampling over a decreasing geometric noise grid.

    Each step moves x along the denoiser direction,
    x <- x - (sigma_t - sigma_prev)/sigma_t * (x - f(x, sigma_t)).
    In ``truncated`` mode the walk exits with the denoised estimate
    f(x, sigma_t) the first time the next level drops below sigma_hat;
    ``full`` mode iterates all the way down to sigma_min.
    """
    if mode not in ("full", "truncated"):
        raise PreconditionError(f"unknown sampling mode {mode!r}")
    grid = schedule.sampling_grid(steps)
    x = rng.standard_normal((n, net.data_dim)) * grid[0]
    for i in range(len(grid) - 1):
        sig, sig_prev = grid[i], grid[i + 1]
        x0_hat = net.forward(x, sig)
        if mode == "truncated" and sig_prev < sigma_hat:
            return x0_hat
        x = x - ((sig - sig_prev) / sig) * (x - x0_hat)
    return x


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "noisedistill-checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_payload(
    net: DenseNet, cfg: TrainConfig, step: int, mode: str, meta: dict | None = None
) -> dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "mode": mode,
        "step": int(step),
        "layer_sizes": list(net.layer_sizes),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "train_config": {
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "steps": cfg.steps,
            "sigma_min": cfg.schedule.sigma_min,
            "sigma_max": cfg.schedule.sigma_max,
            "sigma_hat": cfg.sigma_hat,
            "seed": cfg.seed,
        },
    }
    if meta is not None:
        payload["meta"] = meta
    return payload


def save_checkpoint(
    path, net: DenseNet, cfg: TrainConfig, step: int, mode: str, meta: dict | None = None
) -> None:
    """Write a self-describing JSON checkpoint; floats round-trip exactly."""
    payload = checkpoint_payload(net, cfg, step, mode, meta=meta)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[DenseNet, TrainConfig, int, str]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise PreconditionError(f"{path} is not a checkpoint file")
    net = object.__new__(DenseNet)
    net.layer_sizes = [int(v) for v in payload["layer_sizes"]]
    net.weights = [np.array(w, dtype=float) for w in payload["weights"]]
    net.biases = [np.array(b, dtype=float) for b in payload["biases"]]
    tc = payload["train_config"]
    cfg = TrainConfig(
        batch_size=int(tc["batch_size"]),
        lr=float(tc["lr"]),
        steps=int(tc["steps"]),
        schedule=NoiseSchedule(float(tc["sigma_min"]), float(tc["sigma_max"])),
        sigma_hat=float(tc["sigma_hat"]),
        seed=int(tc["seed"]),
    )
    return net, cfg, int(payload["step"]), str(payload["mode"])
