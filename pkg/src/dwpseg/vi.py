"""Mean-field Gaussian posterior over U-Net weights trained under the kernel prior.

The objective maximised per step is

    data term  +  sum over kernel slices of
        [-log q(w) - log r(z|w) + log p(z) + log p(w|z)]

with w drawn from q by the reparameterisation trick and z drawn from the
encoder r. Biases (and anything that is not a 3x3x3 kernel) use a
standard-normal prior in place of the VAE terms. The decoder is frozen;
posterior parameters and encoder parameters are updated with Adam.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_paramset, save_paramset
from .data import Volume
from .dwp import VAEPrior, log_terms
from .harvest import SHARED, conv_layers
from .numerics import (KERNEL, NonFiniteError, OptimizerState, ParamSet, adam_step,
                       gaussian_log_pdf, reparam_sample, torch_generator)
from .segnet import UNetConfig, bce_dice_loss, forward, he_random, volumes_to_tensor

log = logging.getLogger(__name__)

SLICE = KERNEL ** 3
PRIOR_MODES = ("dwp", "std_normal")
LIKELIHOOD_SCALES = ("dataset_size", "voxel_sum")
INIT_LOG_SIGMA = -5.0


class UnmappedLayerError(KeyError):
    pass


@dataclass
class VariationalPosterior:
    mu: ParamSet
    log_sigma: ParamSet

    def __post_init__(self):
        if list(self.mu) != list(self.log_sigma):
            raise ValueError("mu and log_sigma must share names and order")
        for n in self.mu:
            if self.mu[n].shape != self.log_sigma[n].shape:
                raise ValueError(f"shape mismatch for {n!r}")

    def sigma(self, name: str) -> torch.Tensor:
        return torch.exp(self.log_sigma[name])


@dataclass
class VITrainConfig:
    epochs: int = 150
    lr_theta: float = 1e-3
    lr_psi: float = 1e-3
    mc_samples: int = 1
    likelihood_scale: str = "voxel_sum"
    prior_mode: str = "dwp"
    seed: int = 0
    lambda_dice: float = 1.0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.likelihood_scale not in LIKELIHOOD_SCALES:
            raise ValueError(f"likelihood_scale must be one of {LIKELIHOOD_SCALES}")


def init_posterior(cfg: UNetConfig, rng, log_sigma: float = INIT_LOG_SIGMA,
                   dtype: torch.dtype = torch.float32) -> VariationalPosterior:
    mu = he_random(cfg, rng, dtype)
    return VariationalPosterior(mu, {n: torch.full_like(t, log_sigma) for n, t in mu.items()})


def sample_weights(q: VariationalPosterior, rng: Optional[torch.Generator] = None,
                   noise: Optional[ParamSet] = None) -> tuple[ParamSet, ParamSet]:
    """One pathwise draw per scalar weight; returns (w_hat, noise)."""
    w_hat, used = {}, {}
    for n in q.mu:
        w_hat[n], used[n] = reparam_sample(q.mu[n], q.log_sigma[n], rng,
                                           None if noise is None else noise[n])
    return w_hat, used


def group_for(layer: str, priors: dict[str, VAEPrior]) -> str:
    if SHARED in priors:
        return SHARED
    if layer in priors:
        return layer
    raise UnmappedLayerError(f"conv layer {layer!r} has no prior group")


def _group_rows(q: VariationalPosterior, priors: dict[str, VAEPrior]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for layer in conv_layers(q.mu):
        groups.setdefault(group_for(layer, priors), []).append(layer)
    return groups


def draw_latent_noise(q: VariationalPosterior, priors: dict[str, VAEPrior],
                      rng: Optional[torch.Generator] = None) -> dict[str, torch.Tensor]:
    """Standard-normal latent noise, one row per kernel slice, per prior group."""
    out = {}
    for key, layers in _group_rows(q, priors).items():
        rows = sum(q.mu[l].numel() // SLICE for l in layers)
        dtype = next(iter(priors[key].psi.values())).dtype
        out[key] = torch.randn(rows, priors[key].latent_dim, generator=rng, dtype=dtype)
    return out


def _neg_log_q(q: VariationalPosterior, w_hat: ParamSet, name: str, rows: int) -> torch.Tensor:
    return -gaussian_log_pdf(w_hat[name].reshape(rows, -1), q.mu[name].reshape(rows, -1),
                             q.sigma(name).reshape(rows, -1))


def _std_normal_log_pdf(w: torch.Tensor) -> torch.Tensor:
    return gaussian_log_pdf(w, torch.zeros_like(w), torch.ones_like(w))


def prior_bound_terms(q: VariationalPosterior, w_hat: ParamSet,
                      priors: Optional[dict[str, VAEPrior]] = None,
                      rng: Optional[torch.Generator] = None, prior_mode: str = "dwp",
                      psi: Optional[dict[str, ParamSet]] = None,
                      latent_noise: Optional[dict[str, torch.Tensor]] = None,
                      ) -> dict[str, torch.Tensor]:
    """Per-tensor vectors of bound contributions.

    Kernel tensors give one value per 3x3x3 slice (row-major over
    (out, in)); every other tensor gives one value per scalar weight.
    """
    if prior_mode not in PRIOR_MODES:
        raise ValueError(f"unknown prior_mode {prior_mode!r}")
    kernels = conv_layers(q.mu)
    out: dict[str, torch.Tensor] = {}
    for name in q.mu:
        if name in kernels and prior_mode == "dwp":
            continue
        rows = q.mu[name].numel() // SLICE if name in kernels else q.mu[name].numel()
        w = w_hat[name].reshape(rows, -1)
        out[name] = _neg_log_q(q, w_hat, name, rows) + _std_normal_log_pdf(w)
    if prior_mode == "std_normal":
        return {n: out[n] for n in q.mu}

    if priors is None:
        raise ValueError("prior_mode 'dwp' needs priors")
    for key, layers in _group_rows(q, priors).items():
        prior = priors[key]
        sizes = [q.mu[l].numel() // SLICE for l in layers]
        w = torch.cat([w_hat[l].reshape(-1, SLICE) for l in layers])
        noise = None if latent_noise is None else latent_noise[key]
        _, log_r, log_pz, log_pw = log_terms(prior, w, rng, noise,
                                             None if psi is None else psi[key])
        vae = -log_r + log_pz + log_pw
        for l, part in zip(layers, torch.split(vae, sizes)):
            out[l] = _neg_log_q(q, w_hat, l, part.shape[0]) + part
    return {n: out[n] for n in q.mu}


def prior_bound_term(q: VariationalPosterior, w_hat: ParamSet,
                     priors: Optional[dict[str, VAEPrior]] = None,
                     rng: Optional[torch.Generator] = None, prior_mode: str = "dwp",
                     psi: Optional[dict[str, ParamSet]] = None,
                     latent_noise: Optional[dict[str, torch.Tensor]] = None) -> torch.Tensor:
    """Single-sample estimate of the summed prior bound (a scalar tensor)."""
    terms = prior_bound_terms(q, w_hat, priors, rng, prior_mode, psi, latent_noise)
    return torch.stack([t.sum() for t in terms.values()]).sum()


def data_term(w: ParamSet, x: torch.Tensor, y: torch.Tensor, cfg: Optional[UNetConfig],
              n_total: int, scale: str = "voxel_sum", lambda_dice: float = 1.0,
              forward_fn: Optional[Callable[[ParamSet, torch.Tensor], torch.Tensor]] = None,
              ) -> torch.Tensor:
    """Log-likelihood proxy: negated BCE+Dice scaled up to the whole training set.

    ``dataset_size`` multiplies the per-volume loss by the number of training
    volumes; ``voxel_sum`` also multiplies by the voxels per volume, treating
    each voxel as one observation (the BCE part is then a true summed
    Bernoulli log-likelihood).

    ``forward_fn`` replaces the U-Net forward pass (used for small test nets).
    """
    logits = forward(w, x, cfg) if forward_fn is None else forward_fn(w, x)
    loss = bce_dice_loss(logits, y, lambda_dice)
    factor = n_total / x.shape[0]
    if scale == "voxel_sum":
        factor *= y[0].numel()
    return -factor * loss


def objective(q: VariationalPosterior, x: torch.Tensor, y: torch.Tensor, cfg: UNetConfig,
              n_total: int, priors: Optional[dict[str, VAEPrior]], vcfg: VITrainConfig,
              rng: Optional[torch.Generator] = None, psi: Optional[dict[str, ParamSet]] = None,
              weight_noise: Optional[ParamSet] = None,
              latent_noise: Optional[dict[str, torch.Tensor]] = None,
              forward_fn: Optional[Callable[[ParamSet, torch.Tensor], torch.Tensor]] = None,
              ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, data term, prior term) for one weight draw."""
    w_hat, _ = sample_weights(q, rng, weight_noise)
    d = data_term(w_hat, x, y, cfg, n_total, vcfg.likelihood_scale, vcfg.lambda_dice,
                  forward_fn)
    p = prior_bound_term(q, w_hat, priors, rng, vcfg.prior_mode, psi, latent_noise)
    return d + p, d, p


@dataclass
class VIRun:
    posterior: VariationalPosterior
    priors: dict[str, VAEPrior]
    trace: list[float] = field(default_factory=list)
    data_trace: list[float] = field(default_factory=list)
    prior_trace: list[float] = field(default_factory=list)


def _pack(q: VariationalPosterior, priors: dict[str, VAEPrior], train_psi: bool) -> ParamSet:
    params = {**{"mu." + n: t for n, t in q.mu.items()},
              **{"ls." + n: t for n, t in q.log_sigma.items()}}
    if train_psi:
        for key, prior in priors.items():
            params.update({f"psi.{key}.{n}": t for n, t in prior.psi.items()})
    return params


def _unpack(params: ParamSet, priors: dict[str, VAEPrior]):
    mu = {n[3:]: t for n, t in params.items() if n.startswith("mu.")}
    ls = {n[3:]: t for n, t in params.items() if n.startswith("ls.")}
    psi = {}
    for key, prior in priors.items():
        psi[key] = {n: params.get(f"psi.{key}.{n}", t) for n, t in prior.psi.items()}
    return VariationalPosterior(mu, ls), psi


def train_dwp(target_train: Sequence[Volume], cfg: UNetConfig,
              priors: Optional[dict[str, VAEPrior]], vcfg: VITrainConfig,
              rng: np.random.Generator | None = None,
              q0: Optional[VariationalPosterior] = None,
              on_epoch_end: Optional[Callable[[int, VariationalPosterior], None]] = None) -> VIRun:
    """Stochastic VI on the target set; decoders stay fixed, encoders warm-start.

    Each step uses one training volume and ``mc_samples`` weight draws.
    ``vcfg.max_steps`` (if set) caps the number of epochs at
    ``ceil(max_steps / len(target_train))``.
    """
    if not target_train:
        raise ValueError("empty target training set")
    priors = dict(priors or {})
    if vcfg.prior_mode == "dwp" and not priors:
        raise ValueError("prior_mode 'dwp' needs trained priors")
    rng = np.random.default_rng(vcfg.seed) if rng is None else rng
    gen = torch_generator(rng)
    q = q0 if q0 is not None else init_posterior(cfg, rng)
    dtype = next(iter(q.mu.values())).dtype
    xs, ys = volumes_to_tensor(target_train, dtype)
    n = len(target_train)
    epochs = vcfg.epochs
    if vcfg.max_steps is not None:
        epochs = min(epochs, math.ceil(vcfg.max_steps / n))

    train_psi = vcfg.prior_mode == "dwp"
    params = _pack(q, priors, train_psi)
    names = list(params)
    lrs = {k: (vcfg.lr_psi if k.startswith("psi.") else vcfg.lr_theta) for k in names}
    states = {lr: OptimizerState(lr=lr) for lr in set(lrs.values())}
    run = VIRun(q, priors)
    step = 0
    for epoch in range(1, epochs + 1):
        totals, datas, priors_ = [], [], []
        for i in rng.permutation(n):
            step += 1
            leaf = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            q_leaf, psi = _unpack(leaf, priors)
            total = d_sum = p_sum = 0.0
            for _ in range(vcfg.mc_samples):
                t, d, p = objective(q_leaf, xs[i:i + 1], ys[i:i + 1], cfg, n, priors, vcfg,
                                    gen, psi if train_psi else None)
                total = total + t / vcfg.mc_samples
                d_sum += d.item() / vcfg.mc_samples
                p_sum += p.item() / vcfg.mc_samples
            if not torch.isfinite(total):
                raise NonFiniteError(
                    f"non-finite objective at step {step} (data={d_sum}, prior={p_sum})")
            grads = dict(zip(names, torch.autograd.grad(-total, [leaf[k] for k in names])))
            new = {}
            for lr, state in states.items():
                group = {k: g for k, g in grads.items() if lrs[k] == lr}
                sub = {k: params[k] for k in group}
                sub, states[lr] = adam_step(sub, group, state)
                new.update(sub)
            params = {k: new.get(k, params[k]) for k in names}
            totals.append(total.item())
            datas.append(d_sum)
            priors_.append(p_sum)
        run.trace.append(float(np.mean(totals)))
        run.data_trace.append(float(np.mean(datas)))
        run.prior_trace.append(float(np.mean(priors_)))
        log.debug("vi epoch %d objective %.3f (data %.3f, prior %.3f)", epoch,
                  run.trace[-1], run.data_trace[-1], run.prior_trace[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch, _unpack(params, priors)[0])
    final = {k: v.detach() for k, v in params.items()}
    q_final, psi = _unpack(final, priors)
    run.posterior = q_final
    run.priors = {k: p.with_psi(psi[k]) for k, p in priors.items()}
    return run


def predict(q: VariationalPosterior, v: Volume, cfg: UNetConfig, mode: str = "mean",
            n: int = 1, rng: Optional[torch.Generator] = None) -> np.ndarray:
    """Foreground probabilities: forward at the posterior mean, or averaged over n draws."""
    dtype = next(iter(q.mu.values())).dtype
    x, _ = volumes_to_tensor([v], dtype)
    with torch.no_grad():
        if mode == "mean":
            return torch.sigmoid(forward(q.mu, x, cfg))[0, 0].numpy()
        if mode != "mc_average":
            raise ValueError(f"unknown predict mode {mode!r}")
        if n < 1:
            raise ValueError("n must be >= 1")
        acc = torch.zeros_like(x[0, 0])
        for _ in range(n):
            w, _ = sample_weights(q, rng)
            acc += torch.sigmoid(forward(w, x, cfg))[0, 0]
        return (acc / n).numpy()


def save_posterior(q: VariationalPosterior, directory: str | os.PathLike,
                   manifest: Optional[dict] = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_paramset(directory / "mu.ckpt", q.mu)
    save_paramset(directory / "log_sigma.ckpt", q.log_sigma)
    if manifest is not None:
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n")


def load_posterior(directory: str | os.PathLike) -> VariationalPosterior:
    directory = Path(directory)
    return VariationalPosterior(load_paramset(directory / "mu.ckpt"),
                                load_paramset(directory / "log_sigma.ckpt"))
