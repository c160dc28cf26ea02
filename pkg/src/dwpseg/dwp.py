"""VAE over flattened 3x3x3 kernel slices, used as an implicit weight prior.

Encoder r(z|w) and decoder p(w|z) are small dense nets with leaky-ReLU
hidden layers and diagonal-Gaussian heads. Their parameters are stored as
plain ParamSets (``psi`` for the encoder, ``phi`` for the decoder) so the VI
stage can differentiate through ``psi`` while ``phi`` stays fixed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_paramset, save_paramset
from .harvest import KernelSlice, SLICE
from .numerics import (KERNEL, NonFiniteError, OptimizerState, ParamSet, adam_step,
                       gaussian_log_pdf, reparam_sample, torch_generator)

SIGMA_MIN = 1e-4
SIGMA_MAX = 1e2
LEAKY_SLOPE = 0.01
INIT_HEAD_SCALE = 0.01
INIT_SIGMA_FLOOR = 1e-3
DECODER_VARIANCES = ("learned_per_element", "global_scalar")


@dataclass
class VAEConfig:
    latent_dim: int = 4
    encoder_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64)
    decoder_variance: str = "learned_per_element"
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if any(h < self.latent_dim for h in self.encoder_hidden + self.decoder_hidden):
            raise ValueError("hidden widths must be >= latent_dim")
        if self.decoder_variance not in DECODER_VARIANCES:
            raise ValueError(f"decoder_variance must be one of {DECODER_VARIANCES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class VAEPrior:
    psi: ParamSet
    phi: ParamSet
    config: VAEConfig
    group_key: str = "shared"
    trace: list[float] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def with_psi(self, psi: ParamSet) -> "VAEPrior":
        return VAEPrior(psi, self.phi, self.config, self.group_key, self.trace)


# --------------------------------------------------------------------------
# networks


def _dense_init(sizes: Sequence[int], prefix: str, gen: torch.Generator,
                dtype: torch.dtype) -> ParamSet:
    params: ParamSet = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = math.sqrt(2.0 / a)
        params[f"{prefix}{i}.weight"] = (torch.randn(b, a, generator=gen, dtype=torch.float64)
                                         * std).to(dtype)
        params[f"{prefix}{i}.bias"] = torch.zeros(b, dtype=dtype)
    return params


def _mlp(params: ParamSet, prefix: str, depth: int, x: torch.Tensor) -> torch.Tensor:
    for i in range(depth):
        x = F.linear(x, params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"])
        if i < depth - 1:
            x = F.leaky_relu(x, LEAKY_SLOPE)
    return x


def _sigma(raw: torch.Tensor) -> torch.Tensor:
    return torch.exp(raw.clamp(math.log(SIGMA_MIN), math.log(SIGMA_MAX)))


def init_prior(cfg: VAEConfig, rng, group_key: str = "shared",
               dtype: torch.dtype = torch.float32, data: Optional[torch.Tensor] = None,
               ) -> VAEPrior:
    """Random dense nets; with ``data``, the decoder output starts at the data's
    per-element mean and log-std so the first epochs are not spent rescaling."""
    gen = rng if isinstance(rng, torch.Generator) else torch_generator(rng)
    d = cfg.latent_dim
    psi = _dense_init([SLICE, *cfg.encoder_hidden, 2 * d], "enc", gen, dtype)
    out = 2 * SLICE if cfg.decoder_variance == "learned_per_element" else SLICE
    phi = _dense_init([d, *cfg.decoder_hidden, out], "dec", gen, dtype)
    last = f"dec{len(cfg.decoder_hidden)}"
    phi[f"{last}.weight"] *= INIT_HEAD_SCALE
    log_std = torch.zeros(SLICE, dtype=dtype)
    if data is not None:
        data = data.to(dtype)
        phi[f"{last}.bias"][:SLICE] = data.mean(0)
        log_std = torch.log(data.std(0, unbiased=False).clamp_min(INIT_SIGMA_FLOOR))
    if cfg.decoder_variance == "learned_per_element":
        phi[f"{last}.bias"][SLICE:] = log_std
    else:
        phi["dec.log_sigma"] = log_std.mean().reshape(1)
    return VAEPrior(psi, phi, cfg, group_key)


def _encode(psi: ParamSet, cfg: VAEConfig, w: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    h = _mlp(psi, "enc", len(cfg.encoder_hidden) + 1, w)
    d = cfg.latent_dim
    return h[..., :d], _sigma(h[..., d:])


def _decode(phi: ParamSet, cfg: VAEConfig, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    h = _mlp(phi, "dec", len(cfg.decoder_hidden) + 1, z)
    if cfg.decoder_variance == "learned_per_element":
        return h[..., :SLICE], _sigma(h[..., SLICE:])
    return h, _sigma(phi["dec.log_sigma"]).expand_as(h)


def _as_rows(x, width: int, what: str, dtype) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    t = t.to(dtype)
    if t.shape[-1:] != (width,):
        if t.numel() % width == 0 and t.dim() >= 3:
            t = t.reshape(-1, width)
        else:
            raise ValueError(f"{what} must have trailing dimension {width}, got {tuple(t.shape)}")
    return t


def _dtype(prior: VAEPrior) -> torch.dtype:
    return next(iter(prior.psi.values())).dtype


def encode(prior: VAEPrior, w) -> tuple[torch.Tensor, torch.Tensor]:
    """(mu_z, sigma_z) for one 27-vector or a batch of them."""
    w = _as_rows(w, SLICE, "kernel", _dtype(prior))
    return _encode(prior.psi, prior.config, w)


def decode(prior: VAEPrior, z) -> tuple[torch.Tensor, torch.Tensor]:
    """(mu_w, sigma_w) for one latent vector or a batch of them."""
    z = _as_rows(z, prior.latent_dim, "latent", _dtype(prior))
    return _decode(prior.phi, prior.config, z)


def log_terms(prior: VAEPrior, w_hat: torch.Tensor, rng: Optional[torch.Generator] = None,
              noise: Optional[torch.Tensor] = None, psi: Optional[ParamSet] = None,
              ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Draw z ~ r(z|w_hat) and return (z_hat, log r(z_hat|w_hat), log p(z_hat), log p(w_hat|z_hat)).

    Rows of ``w_hat`` are independent slices; each log term is one value per
    row. ``psi`` overrides the prior's encoder (the VI stage trains a copy).
    """
    cfg = prior.config
    w_hat = _as_rows(w_hat, SLICE, "kernel", _dtype(prior))
    mu_z, sigma_z = _encode(prior.psi if psi is None else psi, cfg, w_hat)
    z_hat, _ = reparam_sample(mu_z, torch.log(sigma_z), rng, noise)
    log_r = gaussian_log_pdf(z_hat, mu_z, sigma_z)
    log_pz = gaussian_log_pdf(z_hat, torch.zeros_like(z_hat), torch.ones_like(z_hat))
    mu_w, sigma_w = _decode(prior.phi, cfg, z_hat)
    log_pw = gaussian_log_pdf(w_hat, mu_w, sigma_w)
    return z_hat, log_r, log_pz, log_pw


def elbo(prior: VAEPrior, w: torch.Tensor, gen: Optional[torch.Generator] = None,
         psi: Optional[ParamSet] = None, phi: Optional[ParamSet] = None) -> torch.Tensor:
    """Per-row single-sample bound E_r[log p(w|z)] - KL(r(z|w) || N(0, I)), KL in closed form."""
    cfg = prior.config
    mu_z, sigma_z = _encode(prior.psi if psi is None else psi, cfg, w)
    z, _ = reparam_sample(mu_z, torch.log(sigma_z), gen)
    mu_w, sigma_w = _decode(prior.phi if phi is None else phi, cfg, z)
    rec = gaussian_log_pdf(w, mu_w, sigma_w)
    kl = 0.5 * (mu_z ** 2 + sigma_z ** 2 - 1).sum(-1) - torch.log(sigma_z).sum(-1)
    return rec - kl


# --------------------------------------------------------------------------
# training and sampling


def train_vae(kernels, cfg: VAEConfig, rng, group_key: str = "shared") -> VAEPrior:
    """Fit the VAE by minibatch Adam on the negative bound.

    ``kernels`` is any (n, 3, 3, 3) or (n, 27) array. Records the
    epoch-averaged bound (nats per slice) in ``prior.trace``.
    """
    data = torch.as_tensor(np.asarray(kernels, dtype=np.float32)).reshape(-1, SLICE)
    n = data.shape[0]
    if n == 0:
        raise ValueError(f"kernel group {group_key!r} is empty")
    gen = rng if isinstance(rng, torch.Generator) else torch_generator(rng)
    prior = init_prior(cfg, gen, group_key, data=data)
    batch = min(cfg.batch_size, n)
    params = {**{"psi." + k: v for k, v in prior.psi.items()},
              **{"phi." + k: v for k, v in prior.phi.items()}}
    state = OptimizerState(lr=cfg.lr)
    trace = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n - batch + 1, batch):
            idx = order[start:start + batch]
            leaf = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            psi = {k[4:]: v for k, v in leaf.items() if k.startswith("psi.")}
            phi = {k[4:]: v for k, v in leaf.items() if k.startswith("phi.")}
            bound = elbo(prior, data[idx], gen, psi, phi).mean()
            if not torch.isfinite(bound):
                raise NonFiniteError(f"non-finite VAE bound at epoch {epoch + 1}")
            names = list(leaf)
            grads = torch.autograd.grad(-bound, [leaf[k] for k in names])
            params, state = adam_step(params, dict(zip(names, grads)), state)
            total += bound.item() * len(idx)
        trace.append(total / ((n // batch) * batch))
    psi = {k[4:]: v.detach() for k, v in params.items() if k.startswith("psi.")}
    phi = {k[4:]: v.detach() for k, v in params.items() if k.startswith("phi.")}
    return VAEPrior(psi, phi, cfg, group_key, trace)


def sample_kernels(prior: VAEPrior, n: int, rng) -> list[KernelSlice]:
    """Mean kernels mu_w(z) for z ~ N(0, I)."""
    gen = rng if isinstance(rng, torch.Generator) else torch_generator(rng)
    z = torch.randn(n, prior.latent_dim, generator=gen, dtype=_dtype(prior))
    with torch.no_grad():
        mu_w, _ = _decode(prior.phi, prior.config, z)
    return [KernelSlice(m.numpy().reshape(KERNEL, KERNEL, KERNEL), "dwp-sample", -1, -1, -1)
            for m in mu_w]


# --------------------------------------------------------------------------
# persistence


def save_prior(prior: VAEPrior, path: str | os.PathLike) -> None:
    """CKPT1 file holding psi./phi. tensors plus a ``<path>.json`` sidecar."""
    tensors = {**{"psi." + k: v for k, v in prior.psi.items()},
               **{"phi." + k: v for k, v in prior.phi.items()}}
    save_paramset(path, tensors)
    cfg = asdict(prior.config)
    sidecar = {"config": cfg, "group_key": prior.group_key, "trace": prior.trace}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_prior(path: str | os.PathLike, dtype: torch.dtype = torch.float32) -> VAEPrior:
    meta = json.loads(Path(str(path) + ".json").read_text())
    tensors = load_paramset(path, dtype)
    psi = {k[4:]: v for k, v in tensors.items() if k.startswith("psi.")}
    phi = {k[4:]: v for k, v in tensors.items() if k.startswith("phi.")}
    return VAEPrior(psi, phi, VAEConfig(**meta["config"]), meta["group_key"], meta.get("trace", []))


def save_priors(priors: dict[str, VAEPrior], directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (key, prior) in enumerate(priors.items()):
        p = directory / f"prior_{i:02d}.ckpt"
        save_prior(prior, p)
        paths.append(p)
    return paths


def load_priors(directory: str | os.PathLike) -> dict[str, VAEPrior]:
    paths = sorted(Path(directory).glob("prior_*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no prior_*.ckpt files in {directory}")
    priors = [load_prior(p) for p in paths]
    return {p.group_key: p for p in priors}
