"""Training objective: mean L1 plus a weighted perceptual term.

The perceptual term compares frozen feature pyramids of the two images.
Instead of pretrained VGG19 features it uses a seeded bank of random 3x3
filters: ``relu(conv3x3)`` at full resolution, 2x average pooling, then a
second ``relu(conv3x3)``.  The bank never trains.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..autodiff import Tensor, abs_, avg_pool2, conv2d, mean, relu, sub
from ..errors import DimensionError

PROXY_SEED = 20220613
PROXY_WIDTHS = (3, 8, 8)


@lru_cache(maxsize=4)
def _filter_bank(dtype_name: str) -> tuple[np.ndarray, ...]:
    rng = np.random.default_rng(PROXY_SEED)
    bank = []
    for cin, cout in zip(PROXY_WIDTHS, PROXY_WIDTHS[1:]):
        bound = 1.0 / np.sqrt(9 * cin)
        k = rng.uniform(-bound, bound, size=(3, 3, cin, cout)).astype(dtype_name)
        k.flags.writeable = False
        bank.append(k)
    return tuple(bank)


def _features(x: Tensor) -> list[Tensor]:
    k1, k2 = _filter_bank(x.dtype.name)
    f1 = relu(conv2d(x, Tensor(k1)))
    f2 = relu(conv2d(avg_pool2(f1), Tensor(k2)))
    return [f1, f2]


def perceptual_proxy(pred: Tensor, target: Tensor) -> Tensor:
    """Sum over pyramid levels of the mean absolute feature difference."""
    if pred.shape != target.shape:
        raise DimensionError(f"perceptual_proxy: {pred.shape} vs {target.shape}")
    total = None
    for fp, ft in zip(_features(pred), _features(target)):
        term = mean(abs_(sub(fp, ft)))
        total = term if total is None else total + term
    return total


def loss_terms(pred: Tensor, target: Tensor, lambda_p: float = 0.03) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, l1, perceptual)``; ``perceptual`` is a constant 0 when ``lambda_p == 0``."""
    if pred.shape != target.shape:
        raise DimensionError(f"loss: prediction {pred.shape} vs target {target.shape}")
    l1 = mean(abs_(sub(pred, target)))
    if lambda_p == 0:
        return l1, l1, Tensor(np.zeros((), dtype=pred.dtype))
    perc = perceptual_proxy(pred, target)
    return l1 + perc * lambda_p, l1, perc


def total_loss(pred: Tensor, target: Tensor, lambda_p: float = 0.03) -> Tensor:
    return loss_terms(pred, target, lambda_p)[0]
