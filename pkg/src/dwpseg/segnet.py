"""Functional 3D U-Net on plain ParamSets, BCE+Dice loss and overlap metrics.

Parameters live in an ordered ``dict[str, Tensor]`` rather than an
``nn.Module`` so that the same forward pass can run on point weights,
sampled weights or checkpointed weights without rebinding anything.

Layer naming for ``levels = L``::

    enc{l}.conv{1,2}.{weight,bias}       l = 0 .. L-1
    up{l}.conv.{weight,bias}             l = L-2 .. 0  (nearest x2 then conv)
    dec{l}.conv{1,2}.{weight,bias}       l = L-2 .. 0  (after skip concat)
    out.conv.{weight,bias}               1 output channel, logits
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Collection, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_paramset
from .data import Volume
from .numerics import (KERNEL, NonFiniteError, OptimizerState, ParamSet, adam_step,
                       conv3d, torch_generator)

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels != 1:
            raise ValueError("only a single output channel (binary masks) is supported")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def conv_shapes(self) -> list[tuple[str, int, int]]:
        """``(layer, c_in, c_out)`` for every conv in forward order."""
        shapes = []
        c = self.in_channels
        for l in range(self.levels):
            co = self.channels(l)
            shapes += [(f"enc{l}.conv1", c, co), (f"enc{l}.conv2", co, co)]
            c = co
        for l in reversed(range(self.levels - 1)):
            co = self.channels(l)
            shapes += [(f"up{l}.conv", c, co), (f"dec{l}.conv1", 2 * co, co),
                       (f"dec{l}.conv2", co, co)]
            c = co
        shapes.append(("out.conv", c, self.out_channels))
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for layer, ci, co in self.conv_shapes():
            out[f"{layer}.weight"] = (co, ci, KERNEL, KERNEL, KERNEL)
            out[f"{layer}.bias"] = (co,)
        return out

    def block_of(self, name: str) -> str:
        """Block a parameter belongs to: ``enc{l}``, ``dec{l}`` (incl. its up conv) or ``out``."""
        head = name.split(".")[0]
        if head.startswith("up"):
            return "dec" + head[2:]
        return head


class CheckpointMismatch(ValueError):
    pass


def he_random(cfg: UNetConfig, rng: np.random.Generator | torch.Generator | int,
              dtype: torch.dtype = torch.float32) -> ParamSet:
    """Kaiming-normal kernels (std sqrt(2 / fan_in)), zero biases."""
    gen = rng if isinstance(rng, torch.Generator) else torch_generator(rng)
    params: ParamSet = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = shape[1] * KERNEL ** 3
            w = torch.randn(shape, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / fan_in)
            params[name] = w.to(dtype)
        else:
            params[name] = torch.zeros(shape, dtype=dtype)
    return params


def build_unet(cfg: UNetConfig, init: str = "he_random", rng=None,
               checkpoint: Optional[str] = None, dtype: torch.dtype = torch.float32) -> ParamSet:
    if init == "he_random":
        return he_random(cfg, 0 if rng is None else rng, dtype)
    if init == "from_checkpoint":
        if checkpoint is None:
            raise ValueError("init='from_checkpoint' needs a checkpoint path")
        params = load_paramset(checkpoint, dtype)
        check_congruent(cfg, params)
        return {name: params[name] for name in cfg.param_shapes()}
    raise ValueError(f"unknown init {init!r}")


def check_congruent(cfg: UNetConfig, params: ParamSet) -> None:
    expected = cfg.param_shapes()
    missing = [n for n in expected if n not in params]
    mismatched = [f"{n}: {tuple(params[n].shape)} != {s}" for n, s in expected.items()
                  if n in params and tuple(params[n].shape) != s]
    extra = [n for n in params if n not in expected]
    if missing or mismatched or extra:
        raise CheckpointMismatch(
            "checkpoint does not match UNetConfig; "
            f"missing={missing} mismatched={mismatched} unexpected={extra}"
        )


def param_count(params: ParamSet) -> int:
    return sum(int(t.numel()) for t in params.values())


# --------------------------------------------------------------------------
# forward


def _act(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def _conv(params: ParamSet, layer: str, x: torch.Tensor) -> torch.Tensor:
    return conv3d(x, params[f"{layer}.weight"], params[f"{layer}.bias"], padding=1)


def forward(params: ParamSet, x: torch.Tensor, cfg: UNetConfig) -> torch.Tensor:
    """Logits of shape (N, 1, D, H, W) for input (N, C, D, H, W)."""
    if x.dim() != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input (N,{cfg.in_channels},D,H,W), got {tuple(x.shape)}")
    factor = 2 ** (cfg.levels - 1)
    bad = [s for s in x.shape[2:] if s % factor]
    if bad:
        raise ValueError(
            f"spatial dims {tuple(x.shape[2:])} must be divisible by {factor} "
            f"for a {cfg.levels}-level U-Net"
        )
    skips = []
    for l in range(cfg.levels):
        if l:
            x = F.max_pool3d(x, 2)
        x = _act(_conv(params, f"enc{l}.conv1", x))
        x = _act(_conv(params, f"enc{l}.conv2", x))
        skips.append(x)
    for l in reversed(range(cfg.levels - 1)):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = _act(_conv(params, f"up{l}.conv", x))
        x = torch.cat([skips[l], x], dim=1)
        x = _act(_conv(params, f"dec{l}.conv1", x))
        x = _act(_conv(params, f"dec{l}.conv2", x))
    return _conv(params, "out.conv", x)


def volumes_to_tensor(volumes: Sequence[Volume], dtype: torch.dtype = torch.float32,
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([v.intensities for v in volumes])[:, None]).to(dtype)
    y = torch.from_numpy(np.stack([v.mask for v in volumes])[:, None]).to(dtype)
    return x, y


# --------------------------------------------------------------------------
# loss and metrics


def bce_dice_terms(logits: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(mean-voxel BCE, 1 - softDice) with softDice smoothing 1.0."""
    if logits.shape != mask.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs mask {tuple(mask.shape)}")
    bce = F.binary_cross_entropy_with_logits(logits, mask)
    p = torch.sigmoid(logits)
    soft = (2 * (p * mask).sum() + DICE_SMOOTH) / (p.sum() + mask.sum() + DICE_SMOOTH)
    return bce, 1 - soft


def bce_dice_loss(logits: torch.Tensor, mask: torch.Tensor, lambda_dice: float = 1.0) -> torch.Tensor:
    bce, dice = bce_dice_terms(logits, mask)
    return bce + lambda_dice * dice


def _binarize(a, threshold: float) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a) > threshold


def dice_metric(prob, mask, threshold: float = 0.5) -> float:
    a, b = _binarize(prob, threshold), _binarize(mask, threshold)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def iou_metric(prob, mask, threshold: float = 0.5) -> float:
    a, b = _binarize(prob, threshold), _binarize(mask, threshold)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def predict_proba(params: ParamSet, volume: Volume, cfg: UNetConfig) -> np.ndarray:
    x, _ = volumes_to_tensor([volume], next(iter(params.values())).dtype)
    with torch.no_grad():
        return torch.sigmoid(forward(params, x, cfg))[0, 0].numpy()


def evaluate(predict: Callable[[Volume], np.ndarray], volumes: Iterable[Volume],
             ) -> tuple[float, float]:
    """Mean (dice, iou) over volumes for a volume -> probability-grid callable."""
    dices, ious = [], []
    for v in volumes:
        p = predict(v)
        dices.append(dice_metric(p, v.mask))
        ious.append(iou_metric(p, v.mask))
    return float(np.mean(dices)), float(np.mean(ious))


# --------------------------------------------------------------------------
# training


def train_plain(train: Sequence[Volume], p0: ParamSet, cfg: UNetConfig,
                freeze: Collection[str] = (), epochs: int = 1, lr: float = 1e-3,
                rng: np.random.Generator | None = None, lambda_dice: float = 1.0,
                on_epoch_end: Optional[Callable[[int, ParamSet], None]] = None,
                ) -> tuple[ParamSet, list[float]]:
    """Adam on BCE+Dice, batch size one volume, reshuffled every epoch.

    Returns the final ParamSet and the epoch-mean training losses. Tensors
    named in ``freeze`` are returned as the very same objects from ``p0``.
    """
    unknown = sorted(set(freeze) - set(p0))
    if unknown:
        raise KeyError(f"unknown freeze names: {unknown}")
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(0) if rng is None else rng
    dtype = next(iter(p0.values())).dtype
    xs, ys = volumes_to_tensor(train, dtype)
    trainable = [n for n in p0 if n not in freeze]
    params = dict(p0)
    state = OptimizerState(lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        losses = []
        for i in rng.permutation(len(train)):
            leaf = {n: (t.detach().requires_grad_(True) if n in trainable else t)
                    for n, t in params.items()}
            loss = bce_dice_loss(forward(leaf, xs[i:i + 1], cfg), ys[i:i + 1], lambda_dice)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            if trainable:
                grads = torch.autograd.grad(loss, [leaf[n] for n in trainable])
                params, state = adam_step(params, dict(zip(trainable, grads)), state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.5f", epoch, history[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch, params)
    return params, history
