"""Seeded training and evaluation loops."""
from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Tensor, backward
from ..errors import ConfigError, NumericError
from ..network import ABLATIONS, NetworkConfig, NetworkParams, apply_ablation, deblur_forward, init_params
from .data import Dataset, Pair
from .losses import loss_terms
from .metrics import psnr, ssim
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "loss", "l1", "perceptual", "psnr_val", "ssim_val")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    iterations: int = 500
    lambda_p: float = 0.03
    seed: int = 0
    ablation: str = "full"
    log_every: int = 50

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lambda_p < 0:
            raise ConfigError(f"lambda_p must be >= 0, got {self.lambda_p}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")


def thread_limit() -> int:
    try:
        return max(1, int(os.environ.get("CUBEMIX_THREADS", "1")))
    except ValueError as e:
        raise ConfigError("CUBEMIX_THREADS must be an integer") from e


@contextlib.contextmanager
def limited_threads():
    """Cap BLAS worker threads (default 1) so reductions run in a fixed order."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=thread_limit()):
        yield


@dataclass
class EvalResult:
    psnr: float
    ssim: float
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("image_id", "psnr", "ssim"))
        for name, p, s in self.rows:
            w.writerow((name, repr(p), repr(s)))
        return buf.getvalue()


@dataclass
class TrainResult:
    params: NetworkParams
    net_cfg: NetworkConfig
    log: list[dict] = field(default_factory=list)

    def metrics_csv(self) -> str:
        return format_metric_log(self.log)


def format_metric_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["iteration"]] + [f"{r[k]:.10g}" for k in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def _stack(pairs: Sequence[Pair], attr: str, dtype) -> np.ndarray:
    return np.stack([getattr(p, attr) for p in pairs]).astype(dtype)


def predict(params: NetworkParams, net_cfg: NetworkConfig, blurry: np.ndarray) -> np.ndarray:
    """Forward pass with the export-time clamp to [0, 1]."""
    dtype = params.head_b.dtype if params.head_b is not None else np.float64
    out = deblur_forward(Tensor(np.asarray(blurry, dtype=dtype)), params, net_cfg)
    return np.clip(out.data.astype(np.float64), 0.0, 1.0)


def evaluate(params: NetworkParams, pairs: Sequence[Pair], net_cfg: NetworkConfig) -> EvalResult:
    """Mean PSNR/SSIM of clamped network outputs against the sharp targets."""
    rows = []
    for p in pairs:
        out = predict(params, net_cfg, p.blurry)
        rows.append((p.name, psnr(out, p.sharp), ssim(out, p.sharp)))
    if not rows:
        return EvalResult(math.nan, math.nan, [])
    return EvalResult(
        float(np.mean([r[1] for r in rows])),
        float(np.mean([r[2] for r in rows])),
        rows,
    )


def train_loop(
    cfg: TrainConfig,
    data: Dataset,
    params: Optional[NetworkParams] = None,
    net_cfg: NetworkConfig = NetworkConfig(),
    dtype=np.float32,
) -> TrainResult:
    """Minimize the L1 + perceptual loss with Adam on mini-batches.

    ``cfg.ablation`` is applied to ``net_cfg`` first; when ``params`` is
    ``None`` they are initialized from ``cfg.seed``.  A row is appended to
    the metric log every ``cfg.log_every`` steps and after the last step.
    """
    net = apply_ablation(net_cfg, cfg.ablation)
    if params is None:
        params = init_params(net, cfg.seed, dtype)
    log: list[dict] = []
    if cfg.iterations == 0:
        return TrainResult(params, net, log)
    if not data.train:
        raise ConfigError("training split is empty")

    rng = np.random.default_rng([cfg.seed, 1])
    order: list[int] = []
    state = AdamState()
    named = params.named()

    with limited_threads():
        for it in range(1, cfg.iterations + 1):
            if len(order) < cfg.batch_size:
                order.extend(int(i) for i in rng.permutation(len(data.train)))
            idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
            batch = [data.train[i] for i in idx]
            x = Tensor(_stack(batch, "blurry", dtype))
            y = Tensor(_stack(batch, "sharp", dtype))

            leaves = {k: Tensor(v.data, requires_grad=True) for k, v in named.items()}
            pred = deblur_forward(x, params.with_tensors(leaves), net)
            total, l1, perc = loss_terms(pred, y, cfg.lambda_p)
            loss_value = float(total.data)
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss at iteration {it}: total={loss_value} "
                    f"l1={float(l1.data)} perceptual={float(perc.data)}"
                )
            backward(total)
            grads = {k: leaf.grad for k, leaf in leaves.items()}
            named, state = adam_step(named, grads, state, cfg.lr)

            if it % cfg.log_every == 0 or it == cfg.iterations:
                current = params.with_tensors(named)
                ev = evaluate(current, data.val, net) if data.val else EvalResult(math.nan, math.nan)
                row = {
                    "iteration": it,
                    "loss": loss_value,
                    "l1": float(l1.data),
                    "perceptual": float(perc.data),
                    "psnr_val": ev.psnr,
                    "ssim_val": ev.ssim,
                }
                log.append(row)
                logger.info("iter %d loss %.6f val psnr %.4f ssim %.4f", it, loss_value, ev.psnr, ev.ssim)

    return TrainResult(params.with_tensors(named), net, log)
