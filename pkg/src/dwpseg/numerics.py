"""Differentiable primitives shared by every training stage.

Autograd comes from torch. The 3x3x3 convolution has its own backward pass
because torch's batch-1 CPU path falls back to a slow reference kernel; the
oneDNN forward plus a shifted-matmul weight gradient is several times faster
and stays deterministic in single-threaded mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F

ParamSet = Dict[str, torch.Tensor]

KERNEL = 3


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf shows up where the contract forbids it."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message)
        self.name = name


def set_single_threaded(seed: Optional[int] = None) -> None:
    """Pin torch to one intra-op thread so reductions have a fixed order.

    Denormals are flushed to zero: small weights and gradients otherwise drift
    into the subnormal range during long runs and slow every op down ~2x.
    """
    torch.set_num_threads(1)
    for t in (np.float16, np.float32, np.float64):
        np.finfo(t)  # cache before flushing, or numpy warns its subnormal is zero
    torch.set_flush_denormal(True)
    if seed is not None:
        torch.manual_seed(seed)


def torch_generator(rng: np.random.Generator | int) -> torch.Generator:
    """Derive a torch generator from a numpy stream (or a plain seed)."""
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
    else:
        seed = int(rng.integers(0, 2**62))
    return torch.Generator().manual_seed(seed)


# --------------------------------------------------------------------------
# conv3d


def _check_conv_shapes(x: torch.Tensor, w: torch.Tensor, padding: int) -> None:
    if x.dim() != 5:
        raise ValueError(f"conv3d input must be 5-D [N,C,D,H,W], got {tuple(x.shape)}")
    if w.dim() != 5:
        raise ValueError(f"conv3d kernels must be 5-D [Cout,Cin,3,3,3], got {tuple(w.shape)}")
    if tuple(w.shape[2:]) != (KERNEL,) * 3:
        raise ValueError(f"kernel spatial extent must be 3x3x3, got {tuple(w.shape[2:])}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"channel axis mismatch: input has Cin={x.shape[1]}, kernels expect Cin={w.shape[1]}"
        )
    for axis, size in zip("DHW", x.shape[2:]):
        if size + 2 * padding < KERNEL:
            raise ValueError(
                f"spatial axis {axis} too small: {size} + 2*{padding} < {KERNEL}"
            )


def _use_onednn(t: torch.Tensor) -> bool:
    return t.dtype == torch.float32 and torch.backends.mkldnn.is_available()


def _conv_forward(x: torch.Tensor, w: torch.Tensor, padding: int) -> torch.Tensor:
    if _use_onednn(x):
        return torch.mkldnn_convolution(
            x.contiguous(), w.contiguous(), None, [padding] * 3, [1] * 3, [1] * 3, 1
        )
    return F.conv3d(x, w, padding=padding)


def _conv_grad_weight(x: torch.Tensor, g: torch.Tensor, padding: int) -> torch.Tensor:
    # dL/dw[o,i,a,b,c] = sum_n,s g[n,o,s] * xpad[n,i,s+(a,b,c)]
    n, cin = x.shape[:2]
    cout = g.shape[1]
    d, h, w_ = g.shape[2:]
    xp = F.pad(x, (padding,) * 6) if padding else x
    g2 = g.transpose(0, 1).reshape(cout, -1)
    out = x.new_empty(cout, cin, KERNEL ** 3)
    i = 0
    for a in range(KERNEL):
        for b in range(KERNEL):
            for c in range(KERNEL):
                patch = xp[:, :, a:a + d, b:b + h, c:c + w_]
                out[:, :, i] = g2 @ patch.transpose(0, 1).reshape(cin, -1).t()
                i += 1
    return out.reshape(cout, cin, KERNEL, KERNEL, KERNEL)


def _conv_grad_input(g: torch.Tensor, w: torch.Tensor, padding: int) -> torch.Tensor:
    # full correlation with the spatially flipped, channel-transposed kernel
    wf = w.flip(2, 3, 4).transpose(0, 1).contiguous()
    return _conv_forward(g, wf, KERNEL - 1 - padding)


class _Conv3d(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, w, padding):
        ctx.save_for_backward(x, w)
        ctx.padding = padding
        return _conv_forward(x, w, padding)

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.saved_tensors
        g = g.contiguous()
        gx = gw = None
        if ctx.needs_input_grad[0]:
            gx = _conv_grad_input(g, w, ctx.padding)
        if ctx.needs_input_grad[1]:
            gw = _conv_grad_weight(x, g, ctx.padding)
        return gx, gw, None


def conv3d(x: torch.Tensor, kernels: torch.Tensor, bias: Optional[torch.Tensor] = None,
           padding: int = 1) -> torch.Tensor:
    """Stride-1 3x3x3 convolution (cross-correlation), differentiable in both operands.

    Output extent per spatial axis is ``size + 2*padding - 2``.
    """
    _check_conv_shapes(x, kernels, padding)
    if padding not in (0, 1, 2):
        raise ValueError(f"padding must be 0, 1 or 2, got {padding}")
    out = _Conv3d.apply(x, kernels, padding)
    if bias is not None:
        if bias.shape != (kernels.shape[0],):
            raise ValueError(
                f"bias axis mismatch: expected ({kernels.shape[0]},), got {tuple(bias.shape)}"
            )
        out = out + bias.view(1, -1, 1, 1, 1)
    return out


# --------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: ParamSet, grads: ParamSet, state: OptimizerState,
              ) -> tuple[ParamSet, OptimizerState]:
    """One bias-corrected adaptive-moment update.

    Returns a new ParamSet and a new state; inputs are left untouched.
    Parameters missing from ``grads`` are carried over unchanged.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(
                f"gradient shape {tuple(g.shape)} != parameter shape "
                f"{tuple(params[name].shape)} for {name!r}"
            )
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}", name)

    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params: ParamSet = {}
    m_new: Dict[str, torch.Tensor] = dict(state.m)
    v_new: Dict[str, torch.Tensor] = dict(state.v)
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                new_params[name] = p
                continue
            m = state.m.get(name)
            v = state.v.get(name)
            m = g * (1 - state.beta1) if m is None else m * state.beta1 + g * (1 - state.beta1)
            v = g * g * (1 - state.beta2) if v is None else v * state.beta2 + g * g * (1 - state.beta2)
            m_new[name], v_new[name] = m, v
            update = (m / bc1) / ((v / bc2).sqrt() + state.eps)
            new_params[name] = p - state.lr * update
    new_state = OptimizerState(state.lr, state.beta1, state.beta2, state.eps, t, m_new, v_new)
    return new_params, new_state


# --------------------------------------------------------------------------
# sampling


def reparam_sample(mu: torch.Tensor, log_sigma: torch.Tensor,
                   rng: Optional[torch.Generator] = None,
                   noise: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Pathwise Gaussian draw ``mu + exp(log_sigma) * noise``.

    ``noise`` may be supplied to replay a draw (fixed-noise gradient checks).
    """
    if mu.shape != log_sigma.shape:
        raise ValueError(
            f"mu shape {tuple(mu.shape)} != log_sigma shape {tuple(log_sigma.shape)}"
        )
    if noise is None:
        noise = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
    elif noise.shape != mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != mu shape {tuple(mu.shape)}")
    return mu + torch.exp(log_sigma) * noise, noise


def gaussian_log_pdf(x: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
                     dim: Optional[int] = -1) -> torch.Tensor:
    """Diagonal Gaussian log-density, summed over ``dim`` (elementwise if None)."""
    z = (x - mu) / sigma
    lp = -0.5 * z * z - torch.log(sigma) - 0.5 * math.log(2 * math.pi)
    return lp if dim is None else lp.sum(dim)


# --------------------------------------------------------------------------
# gradient check


def finite_diff_check(loss_fn: Callable[[ParamSet], torch.Tensor], params: ParamSet,
                      epsilon: float = 1e-4, max_coords: int = 200, seed: int = 0,
                      atol: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    Coordinates are subsampled uniformly (without replacement) when the
    ParamSet has more than ``max_coords`` scalars. The relative error at a
    coordinate is ``|a - n| / max(|a|, |n|, atol)``. A non-finite loss at
    any probe makes the check fail with ``inf``.
    """
    base = {k: v.detach().to(torch.float64).clone() for k, v in params.items()}
    names = list(base)
    sizes = [base[k].numel() for k in names]
    total = sum(sizes)
    if total == 0:
        return 0.0

    leaf = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    loss = loss_fn(leaf)
    if not torch.isfinite(loss):
        return math.inf
    analytic = torch.autograd.grad(loss, [leaf[k] for k in names], allow_unused=True)
    analytic = [torch.zeros_like(base[k]) if g is None else g for k, g in zip(names, analytic)]
    flat_grad = torch.cat([g.reshape(-1) for g in analytic])

    rng = np.random.default_rng(seed)
    coords = np.arange(total) if total <= max_coords else np.sort(
        rng.choice(total, size=max_coords, replace=False))
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for c in coords:
            j = int(np.searchsorted(offsets, c, side="right") - 1)
            name, local = names[j], int(c - offsets[j])
            probe = dict(base)
            t = base[name].clone()
            flat = t.view(-1)
            orig = flat[local].item()
            flat[local] = orig + epsilon
            probe[name] = t
            f_plus = loss_fn(probe)
            flat[local] = orig - epsilon
            f_minus = loss_fn(probe)
            if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                return math.inf
            numeric = (f_plus.item() - f_minus.item()) / (2 * epsilon)
            a = flat_grad[c].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            worst = max(worst, err)
    return worst
